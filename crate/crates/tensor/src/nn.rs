//! Small composite layers built from tape primitives.

use crate::graph::{Graph, Var};

/// Handles to the parameters of one LSTM layer.
///
/// Gate columns are ordered `(input, forget, cell, output)`, each `hidden` wide.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: LstmWeights) -> (Var, Var) {
    let hidden = g.value(h).cols();
    let xi = g.linear(x, w.w_ih, w.bias);
    let hh = g.matmul(h, w.w_hh);
    let gates = g.add(xi, hh);
    let i = g.slice_cols(gates, 0, hidden);
    let f = g.slice_cols(gates, hidden, 2 * hidden);
    let cand = g.slice_cols(gates, 2 * hidden, 3 * hidden);
    let o = g.slice_cols(gates, 3 * hidden, 4 * hidden);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_next = g.add(keep, write);
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed);
    (h_next, c_next)
}

/// Mean squared error between two equally shaped nodes.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean(sq)
}

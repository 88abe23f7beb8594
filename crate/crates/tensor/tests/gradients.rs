use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortexlab_tensor::nn::{lstm_cell, LstmWeights};
use vortexlab_tensor::{finite_diff_check, Graph, Tensor, TensorError, Var};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![r, c], data).unwrap()
}

/// Reduces an arbitrary node to a scalar with a fixed random linear functional,
/// so every output coordinate contributes to the checked gradient.
fn project_to_scalar(g: &mut Graph, x: Var, seed: u64) -> Var {
    let t = g.value(x).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.rows(), t.cols());
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn check(name: &str, point: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let err = finite_diff_check(f, &point, EPS).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let p = g.param("p", Tensor::row(&[1.0, -2.0, 3.0]));
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn half_dot_gradient_is_identity() {
    let mut g = Graph::new();
    let p = g.param("p", Tensor::row(&[1.0, 2.0]));
    let sq = g.mul(p, p);
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn unused_parameters_get_exact_zeros() {
    let mut g = Graph::new();
    let used = g.param("used", Tensor::row(&[1.0, 2.0]));
    let _unused = g.param("unused", Tensor::row(&[5.0, 6.0, 7.0]));
    let loss = g.sum(used);
    let grads = g.backward(loss).unwrap();
    let pg = g.param_grads(&grads);
    assert_eq!(pg["unused"].data(), &[0.0, 0.0, 0.0]);
    assert_eq!(pg["used"].data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_nodes() {
    let mut g = Graph::new();
    let p = g.param("p", Tensor::row(&[1.0, 2.0]));
    assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
    let mut other = Graph::new();
    for _ in 0..5 {
        other.constant(Tensor::scalar(0.0));
    }
    let foreign = other.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(foreign), Err(TensorError::UnknownNode(_))));
}

#[test]
fn max_pool_ties_route_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::from_rows(&[[1.0, 0.0], [3.0, 2.0], [3.0, 2.0], [0.0, 2.0]]).unwrap());
    let m = g.segment_max(x, &[0..4]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, 4, 3);
    let err = finite_diff_check(
        |g, v| {
            let s = g.scale(v[0], 2.5);
            project_to_scalar(g, s, 9)
        },
        &[x],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-10, "{err:e}");
}

#[test]
fn layer_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_tensor(&mut rng, 6, 4);
    let w = rand_tensor(&mut rng, 4, 3);
    let b = rand_tensor(&mut rng, 1, 3);

    check("affine", vec![x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        project_to_scalar(g, y, 1)
    });
    check("matmul", vec![x.clone(), w.clone()], |g, v| {
        let y = g.matmul(v[0], v[1]);
        project_to_scalar(g, y, 2)
    });
    check("matmul_nt", vec![x.clone(), rand_tensor(&mut rng, 5, 4)], |g, v| {
        let y = g.matmul_nt(v[0], v[1]);
        project_to_scalar(g, y, 3)
    });
    check("relu", vec![x.clone()], |g, v| {
        let y = g.relu(v[0]);
        project_to_scalar(g, y, 4)
    });
    check("tanh", vec![x.clone()], |g, v| {
        let y = g.tanh(v[0]);
        project_to_scalar(g, y, 5)
    });
    check("sigmoid", vec![x.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        project_to_scalar(g, y, 6)
    });
    check("max-pool over points", vec![x.clone()], |g, v| {
        let y = g.segment_max(v[0], &[0..2, 2..6]);
        project_to_scalar(g, y, 7)
    });
    check("segment mean", vec![x.clone()], |g, v| {
        let y = g.segment_mean(v[0], &[0..3, 3..6]);
        project_to_scalar(g, y, 8)
    });
    check("l2-normalize", vec![x.clone()], |g, v| {
        let y = g.l2_normalize_rows(v[0], 1e-12);
        project_to_scalar(g, y, 10)
    });
    check("cosine similarity", vec![x.clone(), rand_tensor(&mut rng, 3, 4)], |g, v| {
        let y = g.cosine_similarity(v[0], v[1]);
        project_to_scalar(g, y, 11)
    });
    check("log-sum-exp", vec![x.clone()], |g, v| {
        let y = g.logsumexp_rows(v[0], None);
        project_to_scalar(g, y, 12)
    });
    check("log-sum-exp excluding one column", vec![x.clone()], |g, v| {
        let y = g.logsumexp_rows(v[0], Some(&[0, 1, 2, 3, 0, 1]));
        project_to_scalar(g, y, 13)
    });
    check("broadcast / gather / select", vec![rand_tensor(&mut rng, 2, 4), x.clone()], |g, v| {
        let wide = g.broadcast_segments(v[0], &[0..2, 2..6]);
        let picked = g.gather_rows(v[1], &[5, 0, 0, 3, 2, 1]);
        let mix = g.select_rows(&[true, false, true, false, false, true], wide, picked);
        let sq = g.square(mix);
        project_to_scalar(g, sq, 14)
    });
    check("slice / concat / mul_col / sum_cols", vec![x.clone(), rand_tensor(&mut rng, 6, 1)], |g, v| {
        let a = g.slice_cols(v[0], 1, 3);
        let b = g.slice_cols(v[0], 0, 1);
        let cat = g.concat_cols(&[b, a]);
        let scaled = g.mul_col(cat, v[1]);
        let rows = g.sum_cols(scaled);
        project_to_scalar(g, rows, 15)
    });
    check("minimum", vec![x.clone(), rand_tensor(&mut rng, 6, 4)], |g, v| {
        let m = g.minimum(v[0], v[1]);
        project_to_scalar(g, m, 16)
    });
    check("weighted centroid", vec![rand_tensor(&mut rng, 6, 2).map(|v| v.abs() + 0.1), rand_tensor(&mut rng, 6, 2)], |g, v| {
        let c = g.weighted_centroid(v[0], v[1], &[0..4, 4..6], 1e-8);
        project_to_scalar(g, c, 17)
    });
}

#[test]
fn softmax_cross_entropy_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, 5, 4).map(|v| 3.0 * v);
    let err = finite_diff_check(
        |g, v| {
            let lse = g.logsumexp_rows(v[0], None);
            let tgt = g.pick(v[0], &[0, 3, 1, 2, 2]);
            let nll = g.sub(lse, tgt);
            g.mean(nll)
        },
        &[logits],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn lstm_cell_single_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, i, h) = (3, 4, 5);
    let point = vec![
        rand_tensor(&mut rng, b, i),
        rand_tensor(&mut rng, b, h),
        rand_tensor(&mut rng, b, h),
        rand_tensor(&mut rng, i, 4 * h),
        rand_tensor(&mut rng, h, 4 * h),
        rand_tensor(&mut rng, 1, 4 * h),
    ];
    let err = finite_diff_check(
        |g, v| {
            let w = LstmWeights { w_ih: v[3], w_hh: v[4], bias: v[5] };
            let (hn, cn) = lstm_cell(g, v[0], v[1], v[2], w);
            let both = g.concat_cols(&[hn, cn]);
            project_to_scalar(g, both, 21)
        },
        &point,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err:e}");
}

#[test]
fn identical_inputs_give_bitwise_identical_trajectories() {
    use vortexlab_tensor::{adam_step, AdamConfig, AdamState, ParameterStore};
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut params = ParameterStore::new();
        params.insert("w", rand_tensor(&mut rng, 3, 2));
        params.insert("b", rand_tensor(&mut rng, 1, 2));
        let x = rand_tensor(&mut rng, 8, 3);
        let y = rand_tensor(&mut rng, 8, 2);
        let mut state = AdamState::default();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut g = Graph::new();
            let w = g.param("w", params.get("w").unwrap().clone());
            let b = g.param("b", params.get("b").unwrap().clone());
            let xi = g.constant(x.clone());
            let yi = g.constant(y.clone());
            let pred = g.linear(xi, w, b);
            let pred = g.tanh(pred);
            let loss = vortexlab_tensor::nn::mse(&mut g, pred, yi);
            losses.push(g.value(loss).item().to_bits());
            let grads = g.backward(loss).unwrap();
            adam_step(&mut params, &g.param_grads(&grads), &mut state, 1e-2, AdamConfig::default()).unwrap();
        }
        losses
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_affine_tanh_chains_pass_gradcheck(seed in 0u64..10_000, r in 1usize..6, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = vec![rand_tensor(&mut rng, r, c), rand_tensor(&mut rng, c, 3), rand_tensor(&mut rng, 1, 3)];
            let err = finite_diff_check(|g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let y = g.tanh(y);
                let y = g.l2_normalize_rows(y, 1e-12);
                project_to_scalar(g, y, seed)
            }, &point, EPS).unwrap();
            prop_assert!(err < TOL);
        }
    }
}

use super::*;
use ndarray::arr2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Scalar objective `⟨w, f(inputs)⟩` and its tape gradient w.r.t. each input.
fn check_fd<F>(inputs: &[Array2<f64>], f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars);
    let weight = random(&mut rng, g.shape(out).0, g.shape(out).1);
    let grads = g.backward(&[(out, weight.clone())]).unwrap();

    let eval = |xs: &[Array2<f64>]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars);
        (g.value(out) * &weight).sum()
    };
    let h = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = inputs.to_vec();
            plus[k][[r, c]] += h;
            let mut minus = inputs.to_vec();
            minus[k][[r, c]] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (fd - a).abs() / (1e-8 + fd.abs().max(a.abs()));
            assert!(err < tol || (fd - a).abs() < 1e-8, "input {k} [{r},{c}]: fd {fd} vs tape {a}");
        }
    }
}

#[test]
fn linear_identity() {
    let mut g = Graph::new();
    let x = g.input(arr2(&[[1.0, 2.0], [3.0, -4.0]]));
    let w = g.input(Array2::eye(2));
    let b = g.input(Array2::zeros((1, 2)));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &arr2(&[[1.0, 2.0], [3.0, -4.0]]));
}

#[test]
fn relu_values() {
    let mut g = Graph::new();
    let x = g.input(arr2(&[[-1.0, 0.0, 2.0]]));
    let y = g.relu(x);
    assert_eq!(g.value(y), &arr2(&[[0.0, 0.0, 2.0]]));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let x = g.input(Array2::zeros((4, 3)));
    let w = g.input(Array2::zeros((2, 5)));
    let msg = g.linear(x, w, None).unwrap_err().to_string();
    assert!(msg.contains("(4, 3)") && msg.contains("(2, 5)"), "{msg}");
    let a = g.input(Array2::zeros((2, 3)));
    assert!(g.concat_channels(&[x, a]).is_err());
    assert!(g.broadcast_rows(x, 3).is_err());
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 5, 3);
    let w = random(&mut rng, 4, 3);
    let b = random(&mut rng, 1, 4);
    check_fd(&[x.clone(), w, b], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), 1e-6);
    check_fd(std::slice::from_ref(&x), |g, v| g.tanh(v[0]), 1e-6);
    check_fd(std::slice::from_ref(&x), |g, v| g.normalize_rows(v[0]).unwrap(), 1e-5);
    check_fd(std::slice::from_ref(&x), |g, v| g.mean_pool_rows(v[0]).unwrap(), 1e-6);
    check_fd(&[random(&mut rng, 1, 3)], |g, v| g.broadcast_rows(v[0], 4).unwrap(), 1e-6);
    check_fd(&[x.clone(), random(&mut rng, 5, 2)], |g, v| g.concat_channels(&[v[0], v[1]]).unwrap(), 1e-6);
    check_fd(&[x.clone(), random(&mut rng, 2, 3)], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap(), 1e-6);
    check_fd(
        std::slice::from_ref(&x),
        |g, v| g.gather_mean(v[0], vec![vec![0, 2], vec![], vec![4], vec![1, 1, 3]]).unwrap(),
        1e-6,
    );
    check_fd(&[x], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0]).unwrap(), 1e-5);
}

#[test]
fn random_composite_graphs_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..7);
        let c = rng.gen_range(1..5);
        let x = random(&mut rng, n, c);
        let w1 = random(&mut rng, 4, c);
        let w2 = random(&mut rng, 3, 8);
        let ops: Vec<u8> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        check_fd(
            &[x, w1, w2],
            |g, v| {
                let mut h = g.linear(v[0], v[1], None).unwrap();
                for &op in &ops[..3] {
                    h = match op {
                        0 => g.tanh(h),
                        1 => g.normalize_rows(h).unwrap(),
                        2 => {
                            let p = g.mean_pool_rows(h).unwrap();
                            let b = g.broadcast_rows(p, g.shape(h).0).unwrap();
                            g.add(h, b).unwrap()
                        }
                        _ => g.relu(h),
                    };
                }
                let p = g.mean_pool_rows(h).unwrap();
                let b = g.broadcast_rows(p, g.shape(h).0).unwrap();
                let cat = g.concat_channels(&[h, b]).unwrap();
                g.linear(cat, v[2], None).unwrap()
            },
            1e-4,
        );
    }
}

#[test]
fn recording_does_not_change_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 6, 3);
    let w = random(&mut rng, 5, 3);
    let run = |mut g: Graph| {
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let h = g.linear(xv, wv, None).unwrap();
        let h = g.normalize_rows(h).unwrap();
        let h = g.relu(h);
        let p = g.mean_pool_rows(h).unwrap();
        g.value(p).clone()
    };
    assert_eq!(run(Graph::new()), run(Graph::inference()));
}

#[test]
fn repeated_parameter_use_accumulates() {
    let mut store = ParameterStore::new();
    let id = store.insert("w", arr2(&[[2.0]])).unwrap();
    let mut g = Graph::new();
    let x = g.input(arr2(&[[3.0]]));
    let w = g.param(&store, id);
    let w_again = g.param(&store, id);
    assert_eq!(w, w_again);
    let y1 = g.linear(x, w, None).unwrap();
    let y2 = g.linear(y1, w, None).unwrap();
    let grads = g.backward(&[(y2, arr2(&[[1.0]]))]).unwrap();
    // y2 = w² x, d/dw = 2 w x = 12.
    let pg = grads.parameter_grads(&g);
    assert_eq!(pg, vec![(id, arr2(&[[12.0]]))]);
}

#[test]
fn inference_graph_refuses_backward() {
    let mut g = Graph::inference();
    let x = g.input(arr2(&[[1.0]]));
    assert!(g.backward(&[(x, arr2(&[[1.0]]))]).is_err());
}

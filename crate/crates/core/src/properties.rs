use crate::autograd::{Graph, ParamStore};
use crate::bdf::{bdf_coefficients, gen_homogeneous_trajectory, residual};
use crate::data::darcy::{gen_darcy_trajectory_from, DarcyConfig, DarcyStencil};
use crate::data::format::{decode_dataset, encode_dataset, Container};
use crate::data::{build_windows, permute_augment, rng_from, ForcingAlignment, Hidden, Trajectory};
use crate::kernel::{KernelEstimate, Provenance};
use crate::metrics::{kernel_recovery_error, mape, relative_l2, MAPE_FLOOR};
use crate::model::{rollout, BdfExtrapolator, Normalizer};
use crate::nao::{init_state, Nao, NaoConfig};
use crate::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng_from(seed))
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.sub(b).map(|d| d.norm() <= tol * (1.0 + b.norm())).unwrap_or(false)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bdf_weights_sum_to_one(order in 1usize..=6) {
        let s = bdf_coefficients(order).unwrap();
        prop_assert!((s.explicit_weights().iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn residual_vanishes_on_polynomials(order in 1usize..=6, coeffs in prop::collection::vec(-2.0f64..2.0, 7), t0 in -1.0f64..1.0) {
        let s = bdf_coefficients(order).unwrap();
        let c = &coeffs[..=order];
        let p = |t: f64| c.iter().rev().fold(0.0, |acc, &a| acc * t + a);
        let dp = |t: f64| c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, &a)| acc * t + k as f64 * a);
        let h = 0.1;
        let history: Vec<Vec<f64>> = (0..order).map(|j| vec![p(t0 + j as f64 * h)]).collect();
        let t1 = t0 + order as f64 * h;
        let r = residual(&s, &history, &[p(t1)], &[dp(t1)], h).unwrap();
        prop_assert!(r[0].abs() < 1e-9);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let a = tensor(m, k, seed);
        let b = tensor(k, n, seed ^ 1);
        let c = tensor(n, 3, seed ^ 2);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-12));
        prop_assert!(close(&a.transpose().unwrap().transpose().unwrap(), &a, 0.0));
    }

    #[test]
    fn slicing_inverts_concatenation(seed in any::<u64>(), r1 in 1usize..4, r2 in 1usize..4) {
        let a = tensor(r1, 3, seed);
        let b = tensor(r2, 3, seed ^ 7);
        let ab = Tensor::concat_rows(&[&a, &b]).unwrap();
        prop_assert_eq!(ab.slice_rows(0, r1).unwrap(), a);
        prop_assert_eq!(ab.slice_rows(r1, r2).unwrap(), b);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let s = tensor(4, 6, seed).scale(scale).softmax(1).unwrap();
        for r in 0..4 {
            let row = s.row_slice(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_bilinear_form(seed in any::<u64>()) {
        // d/dW sum(A W B) = Aᵀ 1 Bᵀ.
        let a = tensor(3, 4, seed);
        let b = tensor(2, 5, seed ^ 3);
        let mut store = ParamStore::new();
        let w = store.add("w", tensor(4, 2, seed ^ 5));
        let mut g = Graph::new();
        let av = g.constant(a.clone()).unwrap();
        let bv = g.constant(b.clone()).unwrap();
        let wv = g.param(&store, w).unwrap();
        let aw = g.matmul(av, wv).unwrap();
        let awb = g.matmul(aw, bv).unwrap();
        let loss = g.reduce_sum(awb).unwrap();
        g.backward(loss).unwrap().accumulate(&mut store).unwrap();
        let expected = a.transpose().unwrap().matmul(&Tensor::ones(&[3, 5])).unwrap().matmul(&b.transpose().unwrap()).unwrap();
        prop_assert!(close(&store.get(w).grad, &expected, 1e-12));
    }

    #[test]
    fn zero_queries_make_nao_state_identity(seed in any::<u64>(), d in 1usize..4) {
        let n = 5;
        let mut store = ParamStore::new();
        let cfg = NaoConfig { steps: 2, d_k: 3, ..NaoConfig::new(d, n, 1.0) };
        let nao = Nao::new(cfg, &mut store, "", &mut rng_from(seed)).unwrap();
        for t in 0..2 {
            let (q, _) = nao.step_params(t);
            let shape = store.value(q).shape().to_vec();
            store.set_value(q, Tensor::zeros(&shape)).unwrap();
        }
        let j0 = init_state(&tensor(d, n, seed ^ 1), &tensor(d, n, seed ^ 2)).unwrap();
        let mut g = Graph::new();
        let jv = g.constant(j0.clone()).unwrap();
        let jt = nao.evolve(&mut g, &store, jv).unwrap();
        prop_assert_eq!(g.value(jt), &j0);
    }

    #[test]
    fn nao_is_linear_in_the_target_forcing(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let (d, n) = (2, 6);
        let mut store = ParamStore::new();
        let nao = Nao::new(NaoConfig { d_k: 4, ..NaoConfig::new(d, n, 0.5) }, &mut store, "", &mut rng_from(seed)).unwrap();
        let h = tensor(d, n, seed ^ 1);
        let f = tensor(d, n, seed ^ 2);
        let x: Vec<f64> = tensor(1, n, seed ^ 3).into_data();
        let y = nao.forward(&store, &h, &f, &x).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let ys = nao.forward(&store, &h, &f, &xs).unwrap();
        for (a, b) in y.iter().zip(&ys) {
            prop_assert!((alpha * a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
        prop_assert!(nao.forward(&store, &h, &f, &vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_error_is_scale_free_and_bounded(seed in any::<u64>(), c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
        let k = KernelEstimate::new(tensor(5, 5, seed), Provenance::Analytic).unwrap();
        let l = KernelEstimate::new(tensor(5, 5, seed ^ 9), Provenance::Learned).unwrap();
        let e = kernel_recovery_error(&l, &k).unwrap();
        let scaled = KernelEstimate::new(l.k.scale(c), Provenance::Learned).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        prop_assert!((kernel_recovery_error(&scaled, &k).unwrap() - e).abs() < 1e-12);
    }

    #[test]
    fn relative_metrics_are_scale_free(p in prop::collection::vec(-10.0f64..10.0, 1..10), s in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0]) {
        let t: Vec<f64> = p.iter().map(|v| v + 1.0 + v.abs()).collect();
        let a = relative_l2(&p, &t).unwrap();
        let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
        let ts: Vec<f64> = t.iter().map(|v| v * s).collect();
        prop_assert!((relative_l2(&ps, &ts).unwrap() - a).abs() < 1e-12);
        let m = mape(&p, &t, MAPE_FLOOR).unwrap();
        prop_assert!(m.percent >= 0.0 && m.excluded == 0);
        prop_assert_eq!(mape(&t, &t, MAPE_FLOOR).unwrap().percent, 0.0);
    }

    #[test]
    fn normalization_round_trips(x in prop::collection::vec(-1e3f64..1e3, 1..20), mean in -5.0f64..5.0, std in 0.01f64..10.0) {
        let n = Normalizer { x_mean: mean, x_std: std, f_mean: 0.0, f_std: 1.0 };
        for (a, b) in x.iter().zip(n.state_inv(&n.state(&x))) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn windows_cover_each_target_once(len in 6usize..40, n in 1usize..6) {
        let t = gen_homogeneous_trajectory(2, len, len as u64, 0).unwrap();
        let w = build_windows(&t, n, ForcingAlignment::Target).unwrap();
        prop_assert_eq!(w.len(), len - n);
        for (i, s) in w.iter().enumerate() {
            prop_assert_eq!(s.target_index, n + i);
            prop_assert_eq!(&s.target, &t.states[n + i]);
        }
    }

    #[test]
    fn augmentation_permutes_without_altering(k in 1usize..4, seed in any::<u64>()) {
        let t = gen_homogeneous_trajectory(3, 12, 4, 0).unwrap();
        let w = build_windows(&t, 5, ForcingAlignment::Target).unwrap();
        let aug = permute_augment(&w, k, seed).unwrap();
        prop_assert_eq!(aug.len(), k * w.len());
        for rep in aug.chunks(w.len()) {
            let mut idx: Vec<usize> = rep.iter().map(|s| s.target_index).collect();
            idx.sort_unstable();
            prop_assert_eq!(idx, (5..12).collect::<Vec<_>>());
            for s in rep {
                prop_assert_eq!(s, &w[s.target_index - 5]);
            }
        }
    }

    #[test]
    fn cumulative_rollout_error_is_a_prefix_sum(seed in any::<u64>(), steps in 1usize..20) {
        let mut t = gen_homogeneous_trajectory(3, 30, seed, 0).unwrap();
        // Perturb the truth so the errors are nonzero.
        let mut rng = rng_from(seed ^ 11);
        for s in t.states.iter_mut().skip(5) {
            for (v, e) in s.iter_mut().zip(Tensor::randn(&[3], 0.1, &mut rng).into_data()) {
                *v += e;
            }
        }
        let r = rollout(&BdfExtrapolator, &t, 5, 0, steps, ForcingAlignment::Target).unwrap();
        let mut acc = 0.0;
        for i in 0..steps {
            acc += r.errors[i];
            prop_assert!((acc - r.cumulative[i]).abs() < 1e-10);
            prop_assert!(i == 0 || r.cumulative[i] >= r.cumulative[i - 1]);
        }
    }

    #[test]
    fn dataset_encoding_round_trips(seed in any::<u64>(), count in 1usize..4, len in 1usize..6, dim in 1usize..5) {
        let mut rng = rng_from(seed);
        let trajs: Vec<Trajectory> = (0..count as u64)
            .map(|p| {
                let states = (0..len).map(|_| Tensor::randn(&[dim], 1.0, &mut rng).into_data()).collect();
                let forcings = (0..len).map(|_| Tensor::randn(&[dim], 1.0, &mut rng).into_data()).collect();
                Trajectory::new(states, forcings, Hidden::None, p).unwrap()
            })
            .collect();
        let bytes = encode_dataset(&trajs, 0).unwrap();
        let (grid, back) = decode_dataset(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(grid, 0);
        prop_assert_eq!(back, trajs);
    }

    #[test]
    fn container_round_trips(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let c = Container {
            meta: serde_json::json!({"seed": seed}),
            tensors: vec![("a".into(), tensor(rows, cols, seed)), ("b".into(), Tensor::scalar(seed as f64))],
        };
        let back = Container::decode(&c.encode().unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.meta, c.meta);
        prop_assert_eq!(back.tensors, c.tensors);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn darcy_solution_map_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0) {
        // p(αg₁ + g₂) = αp(g₁) + p(g₂) from the same initial state.
        let cfg = DarcyConfig::with_grid(5, 3, 1);
        let size = 25;
        let b = crate::data::make_microstructure(&cfg.micro_spec, cfg.b_high, cfg.b_low, seed).unwrap();
        let g1 = Tensor::randn(&[size], 1.0, &mut rng_from(seed ^ 1)).into_data();
        let g2 = Tensor::randn(&[size], 1.0, &mut rng_from(seed ^ 2)).into_data();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + b).collect();
        let run = |g: &Vec<f64>| gen_darcy_trajectory_from(&cfg, &b, &vec![g.clone(); 4], &vec![0.0; size], Hidden::None, 0).unwrap();
        let (p1, p2, pm) = (run(&g1), run(&g2), run(&mix));
        for k in 0..size {
            let lin = alpha * p1.states[3][k] + p2.states[3][k];
            prop_assert!((pm.states[3][k] - lin).abs() < 1e-7 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn darcy_stencil_is_symmetric_positive(seed in any::<u64>()) {
        let cfg = DarcyConfig::with_grid(4, 1, 1);
        let b = crate::data::make_microstructure(&cfg.micro_spec, cfg.b_high, cfg.b_low, seed).unwrap();
        let st = DarcyStencil::new(&b, 4).unwrap();
        let u = Tensor::randn(&[16], 1.0, &mut rng_from(seed ^ 4)).into_data();
        let v = Tensor::randn(&[16], 1.0, &mut rng_from(seed ^ 5)).into_data();
        let (mut au, mut av) = (vec![0.0; 16], vec![0.0; 16]);
        st.apply(&u, &mut au);
        st.apply(&v, &mut av);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((dot(&v, &au) - dot(&u, &av)).abs() < 1e-9 * (1.0 + dot(&v, &au).abs()));
        prop_assert!(dot(&u, &au) > 0.0);
    }
}

mod common;

use common::*;
use gdl::dictionary::*;
use gdl::exact_ot::{Coupling, DualPair};
use gdl::gw::{gw_solve, GwOptions};
use gdl::model::{Dictionary, Embedding, GraphRepr, Histogram};
use gdl::sbm::{gen_d1, order_grid};
use gdl::unmixing::{unmix, UnmixOptions, UnmixResult};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn random_graph(r: &mut TestRng, n: usize, dim: Option<usize>) -> GraphRepr {
    let h = Histogram::new(random_histogram(r, n)).unwrap();
    let g = GraphRepr::with_weights(random_symmetric(r, n), h).unwrap();
    match dim {
        Some(d) => g.with_features(random_matrix(r, n, d)).unwrap(),
        None => g,
    }
}

fn random_dictionary(r: &mut TestRng, s: usize, n: usize, dim: Option<usize>, alpha: f64) -> Dictionary {
    let atoms = (0..s).map(|_| random_symmetric(r, n)).collect();
    let mut d = Dictionary::new(atoms, 0.0).unwrap();
    if let Some(k) = dim {
        d.feature_atoms = Some((0..s).map(|_| random_matrix(r, n, k)).collect());
        d.alpha = alpha;
    }
    d
}

fn batch_objective(batch: &[GraphRepr], results: &[UnmixResult], d: &Dictionary) -> f64 {
    let mut total = 0.0;
    for (g, r) in batch.iter().zip(results) {
        let w = r.embedding.w.as_array();
        let ct = d.structure(w.view());
        total += match (&g.features, d.features(w.view())) {
            (Some(a), Some(at)) => naive_fgw(&g.c, a, &ct, &at, r.coupling.matrix(), d.alpha),
            _ => naive_gw(&g.c, &ct, r.coupling.matrix()),
        };
    }
    total / batch.len() as f64
}

fn check_atoms_gradient(seed: u64, fused: bool) {
    let mut r = rng(seed);
    let s = 1 + (seed as usize) % 5;
    let n = 2 + (seed as usize) % 5;
    let b = 1 + (seed as usize) % 4;
    let dim = fused.then_some(2);
    let alpha = 0.2 + 0.6 * r.random::<f64>();
    let d = random_dictionary(&mut r, s, n, dim, alpha);
    let batch: Vec<GraphRepr> = (0..b)
        .map(|_| {
            let order = 2 + r.random_range(0..6);
            random_graph(&mut r, order, dim)
        })
        .collect();
    let results: Vec<UnmixResult> = batch.iter().map(|g| unmix(g, &d, &UnmixOptions::default()).unwrap()).collect();
    let grads = atoms_gradient(&batch, &results, &d).unwrap();
    let step = 1e-6;
    let check = |fd: f64, g: f64, what: &str| {
        let scale = fd.abs().max(g.abs()).max(1e-4);
        assert!((fd - g).abs() <= 1e-5 * scale, "seed {seed} {what}: fd {fd} vs {g}");
    };
    for k in 0..s {
        for i in 0..n {
            for j in 0..n {
                let mut plus = d.clone();
                plus.atoms[k][[i, j]] += step;
                let mut minus = d.clone();
                minus.atoms[k][[i, j]] -= step;
                let fd = (batch_objective(&batch, &results, &plus) - batch_objective(&batch, &results, &minus)) / (2.0 * step);
                check(fd, grads.structure[k][[i, j]], "structure");
            }
            if fused {
                for c in 0..2 {
                    let mut plus = d.clone();
                    plus.feature_atoms.as_mut().unwrap()[k][[i, c]] += step;
                    let mut minus = d.clone();
                    minus.feature_atoms.as_mut().unwrap()[k][[i, c]] -= step;
                    let fd =
                        (batch_objective(&batch, &results, &plus) - batch_objective(&batch, &results, &minus)) / (2.0 * step);
                    check(fd, grads.features.as_ref().unwrap()[k][[i, c]], "features");
                }
            }
        }
    }
}

#[test]
fn atoms_gradient_matches_finite_differences() {
    for seed in 0..15 {
        check_atoms_gradient(seed, false);
        check_atoms_gradient(100 + seed, true);
    }
}

fn manual_result(w: Array1<f64>, t: Array2<f64>, beta: Array1<f64>) -> UnmixResult {
    let alpha = Array1::zeros(t.nrows());
    UnmixResult {
        embedding: Embedding::structure_only(Histogram::new(w).unwrap()),
        coupling: Coupling(t),
        duals: DualPair { alpha, beta },
        loss: 0.0,
        bcd_iterations: 0,
        loss_trace: vec![],
    }
}

#[test]
fn unused_atom_gets_zero_gradient() {
    let mut r = rng(3);
    let d = random_dictionary(&mut r, 3, 4, None, 0.5);
    let g = random_graph(&mut r, 5, None);
    let t = Coupling::product(g.h.view(), Histogram::uniform(4).view()).0;
    let res = manual_result(ndarray::array![0.5, 0.0, 0.5], t, Array1::zeros(4));
    let grads = atoms_gradient(&[g], &[res], &d).unwrap();
    assert!(grads.structure[1].iter().all(|&x| x == 0.0));
    assert!(grads.structure[0].iter().any(|&x| x != 0.0));
}

#[test]
fn graph_equal_to_single_atom_has_zero_gradient() {
    let mut r = rng(4);
    let d = random_dictionary(&mut r, 1, 5, None, 0.5);
    let h = Histogram::uniform(5);
    let g = GraphRepr::with_weights(d.atoms[0].clone(), h.clone()).unwrap();
    let res = manual_result(ndarray::array![1.0], Coupling::diagonal(h.view()).0, Array1::zeros(5));
    let grads = atoms_gradient(&[g], &[res], &d).unwrap();
    assert!(grads.structure[0].iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn weight_gradient_errors_and_zero_rows() {
    let mut r = rng(5);
    let mut d = random_dictionary(&mut r, 2, 3, None, 0.5);
    let plain = manual_result(ndarray::array![0.5, 0.5], Array2::from_elem((2, 3), 1.0 / 6.0), Array1::zeros(3));
    assert_eq!(weight_atoms_gradient(std::slice::from_ref(&plain), &d, None).unwrap_err(), gdl::GdlError::MissingDuals);
    d.weight_atoms = Some(vec![Histogram::uniform(3); 2]);
    let mut res = plain.clone();
    res.embedding.v = Some(Histogram::vertex(2, 0));
    res.duals.beta = ndarray::array![1.0, -2.0, 0.5];
    let g = weight_atoms_gradient(&[res.clone(), res], &d, None).unwrap();
    assert!(g[1].iter().all(|&x| x == 0.0));
    assert_eq!(g[0], ndarray::array![0.5, -1.0, 0.25]);
}

/// GW between a graph and `(C̃, h̃(v))` as a function of the weight atoms.
fn gw_value(c: &Array2<f64>, h: &Histogram, ct: &Array2<f64>, ht: &Array1<f64>, seed: u64) -> f64 {
    let opts = GwOptions { restarts: 20, seed, ..Default::default() };
    gw_solve(c.view(), ct.view(), h, &Histogram::new(ht.clone()).unwrap(), &opts).unwrap().value
}

#[test]
fn weight_gradient_matches_directional_derivatives() {
    let mut r = rng(6);
    let (s, n) = (2, 4);
    let (mut checked, mut skipped) = (0, 0);
    for _ in 0..40 {
        let mut d = random_dictionary(&mut r, s, n, None, 0.5);
        let weights: Vec<Histogram> = (0..s).map(|_| Histogram::new(random_histogram(&mut r, n)).unwrap()).collect();
        d.weight_atoms = Some(weights.clone());
        let order = 3 + r.random_range(0..3);
        let g = random_graph(&mut r, order, None);
        let w = random_simplex(&mut r, s);
        let v = random_simplex(&mut r, s);
        let ct = d.structure(w.view());
        let ht = d.node_weights(Some(v.view()));
        let sol = gw_solve(
            g.c.view(),
            ct.view(),
            &g.h,
            &ht,
            &GwOptions { restarts: 20, seed: 1, ..Default::default() },
        )
        .unwrap();
        // CG stops exactly at vertex optima; interior stationary points are only
        // approached sublinearly, which blurs the duals
        let support = sol.coupling.0.iter().filter(|&&x| x > 1e-14).count();
        if support > g.order() + n - 1 || (sol.value - gw_value(&g.c, &g.h, &ct, ht.as_array(), 2)).abs() > 1e-8 {
            skipped += 1;
            continue;
        }
        let mut res = manual_result(w.clone(), sol.coupling.0.clone(), sol.duals.beta.clone());
        res.embedding.v = Some(Histogram::new(v.clone()).unwrap());
        // scale 1 gives the derivative of GW itself for a batch of one
        let grads = weight_atoms_gradient(&[res], &d, Some(1.0)).unwrap();
        for k in 0..s {
            for _ in 0..5 {
                let dir = random_tangent(&mut r, n);
                let eps = 1e-6;
                let shifted = |sign: f64| {
                    let hk = weights[k].as_array() + &(sign * eps * &dir);
                    let mut ht = Array1::zeros(n);
                    for (j, hj) in weights.iter().enumerate() {
                        ht.scaled_add(v[j], if j == k { &hk } else { hj.as_array() });
                    }
                    gw_value(&g.c, &g.h, &ct, &ht, 1)
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
                let predicted = grads[k].dot(&dir);
                assert!((fd - predicted).abs() <= 1e-4, "fd {fd} vs {predicted}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 50, "checked {checked}, skipped {skipped}");
}

proptest! {
    #[test]
    fn simplex_projection_is_optimal(x in prop::collection::vec(-3.0f64..3.0, 1..8), seed in 0u64..1000) {
        let x = Array1::from(x);
        let p = project_simplex(&x);
        let pa = p.as_array();
        prop_assert!(pa.iter().all(|&v| v >= 0.0));
        prop_assert!((pa.sum() - 1.0).abs() <= 1e-12);
        // variational inequality against random simplex points
        let mut r = rng(seed);
        for _ in 0..10 {
            let y = random_simplex(&mut r, x.len());
            prop_assert!((&x - pa).dot(&(&y - pa)) <= 1e-12);
        }
        let again = project_simplex(pa);
        for (a, b) in again.as_array().iter().zip(pa.iter()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}

fn small_config(s: usize, n: usize) -> TrainConfig {
    TrainConfig { batch_size: 4, epochs: 2, seed: 11, ..TrainConfig::new(s, n) }
}

#[test]
fn init_uses_graph_of_matching_order() {
    let mut r = rng(7);
    let g = random_graph(&mut r, 5, None);
    let cfg = TrainConfig::new(1, 5);
    let d = init_dictionary(&[g.clone()], &cfg, &mut rng(0)).unwrap();
    assert_eq!(d.atoms[0], g.c);
    let err = init_dictionary::<GraphRepr>(&[], &cfg, &mut rng(0)).unwrap_err();
    assert_eq!(err, gdl::GdlError::EmptyDataset);
}

#[test]
fn init_is_deterministic_and_symmetric() {
    let data = gen_d1(4, &order_grid(10, 20), 1).unwrap();
    for order in [4, 6, 25] {
        let cfg = TrainConfig { learn_h: true, ..TrainConfig::new(3, order) };
        let a = init_dictionary(&data, &cfg, &mut rng(9)).unwrap();
        let b = init_dictionary(&data, &cfg, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        for c in &a.atoms {
            assert_eq!(c.shape(), &[order, order]);
            assert_eq!(c, &c.t());
        }
        assert!(a.weight_atoms.as_ref().unwrap().iter().all(|h| *h == Histogram::uniform(order)));
    }
}

#[test]
fn zero_learning_rates_leave_dictionary_unchanged() {
    let data = gen_d1(2, &order_grid(10, 15), 2).unwrap();
    for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
        let cfg = TrainConfig { lr_c: 0.0, lr_h: 0.0, learn_h: true, optimizer, ..small_config(2, 5) };
        let d = init_dictionary(&data, &cfg, &mut rng(1)).unwrap();
        let out = gdl_step(&d, &data, &cfg, &mut OptimizerState::new(optimizer)).unwrap();
        assert_eq!(out.dictionary, d);
        assert!(out.loss.is_finite());
    }
}

#[test]
fn steps_keep_atoms_symmetric_and_weights_on_simplex() {
    let data = gen_d1(4, &order_grid(10, 15), 3).unwrap();
    let cfg = TrainConfig { learn_h: true, nonneg: true, lr_h: 0.05, ..small_config(3, 6) };
    let mut d = init_dictionary(&data, &cfg, &mut rng(2)).unwrap();
    let mut state = OptimizerState::new(Optimizer::Adam);
    for chunk in data.chunks(4) {
        d = gdl_step(&d, chunk, &cfg, &mut state).unwrap().dictionary;
        for c in &d.atoms {
            assert_eq!(c, &c.t());
            assert!(c.iter().all(|&x| x >= 0.0));
        }
        for h in d.weight_atoms.as_ref().unwrap() {
            assert!(h.as_array().iter().all(|&x| x >= 0.0));
            assert!((h.as_array().sum() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn learning_reduces_loss_on_convex_combinations() {
    let mut r = rng(8);
    let n = 5;
    let truth = [random_symmetric(&mut r, n), random_symmetric(&mut r, n)];
    let data: Vec<GraphRepr> = (0..40)
        .map(|_| {
            let t: f64 = r.random();
            GraphRepr::new(&truth[0] * t + &truth[1] * (1.0 - t)).unwrap()
        })
        .collect();
    let cfg = TrainConfig { batch_size: 4, lambda: 0.0, lr_c: 0.01, seed: 5, ..TrainConfig::new(2, n) };
    let mut d = init_dictionary(&data, &cfg, &mut rng(cfg.seed)).unwrap();
    let mut state = OptimizerState::new(cfg.optimizer);
    let mean_loss = |d: &Dictionary| {
        data.iter().map(|g| unmix(g, d, &cfg.unmix).unwrap().loss).sum::<f64>() / data.len() as f64
    };
    let initial = mean_loss(&d);
    for step in 0..100 {
        let start = (step * 4) % data.len();
        d = gdl_step(&d, &data[start..start + 4], &cfg, &mut state).unwrap().dictionary;
    }
    let fin = mean_loss(&d);
    assert!(fin < initial, "loss {initial} -> {fin}");
}

#[test]
fn fit_is_deterministic_with_expected_trace_length() {
    let data = gen_d1(3, &order_grid(10, 15), 4).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::new(2, 5) };
    let (d1, t1) = fit(&data, &cfg).unwrap();
    let (d2, t2) = fit(&data, &cfg).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(t1, t2);
    assert_eq!(t1.len(), 2 * 9usize.div_ceil(4));
    let cfg0 = TrainConfig { epochs: 0, ..cfg.clone() };
    let (d0, t0) = fit(&data, &cfg0).unwrap();
    assert!(t0.is_empty());
    assert_eq!(d0, init_dictionary(&data, &cfg0, &mut rng(cfg0.seed)).unwrap());
}

#[test]
fn stream_of_identical_graphs_settles_without_events() {
    let g = gen_d1(1, &[12], 5).unwrap().remove(1);
    let cfg = TrainConfig { batch_size: 4, seed: 3, ..TrainConfig::new(2, 6) };
    let stream = StreamConfig { window: 5, snapshot_every: 10, ..Default::default() };
    let out = fit_stream(std::iter::repeat_n(g, 4 * 40), &cfg, &stream).unwrap();
    assert_eq!(out.trace.len(), 40);
    assert!(out.trace.event_steps().is_empty());
    let rm = &out.trace.running_mean;
    for i in stream.window..rm.len() - 1 {
        assert!(rm[i + 1] <= rm[i] + 1e-9, "running mean rose at {i}: {:?}", &rm[i..i + 2]);
    }
    assert_eq!(out.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    assert_eq!(out.snapshots.last().unwrap().1, out.dictionary);
}

#[test]
fn trace_csv_layout() {
    let trace = detect_events(&[1.0, 1.0, 4.0], 1, 1.5);
    let csv = trace.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,running_mean,event");
    assert_eq!(lines[3], "2,4.0,4.0,1");
}

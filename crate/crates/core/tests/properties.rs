mod common;

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use common::{build_network, graph, network, permute_network, walk_matrix};
use mwtgc::data::{window_count, window_dataset, Normalizer, SplitSpec};
use mwtgc::evaluation::{dm_test, mad, mape, mase, rmse};
use mwtgc::model::{forward, graph_convolve, Hyperparameters, InitConfig, ModelKind, ModelParameters, SpatialStage};
use mwtgc::network::{adjacency_ranks, build_adjacency, rank_k_adjacency, Connection};
use mwtgc::sparse::{sparse_apply, CsrMatrix};
use mwtgc::weights::{angle_weight, build_weight_set, Direction, WeightConfig, WeightKind};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn small_model(net: &mwtgc::network::RoadNetwork, kinds: &[WeightKind], seed: u64) -> ModelParameters {
    let n = net.len();
    let hyper = Hyperparameters {
        history: 3,
        horizon: 4,
        max_rank: 2,
        c_out: 2,
        hidden_size: 5,
        kinds: kinds.to_vec(),
        num_segments: n,
    };
    ModelParameters::new(
        ModelKind::MwTgc,
        hyper,
        net,
        &WeightConfig::default(),
        Normalizer::identity(),
        seed,
        InitConfig::default(),
    )
    .unwrap()
}

/// `m` re-expressed for the permuted network `net_p` (segment `i` → `perm[i]`).
fn permute_model(m: &ModelParameters, net_p: &mwtgc::network::RoadNetwork, perm: &[usize]) -> ModelParameters {
    let mut p = small_model(net_p, &m.hyper.kinds, m.seed);
    let c_out = m.hyper.c_out;
    match (&m.spatial, &mut p.spatial) {
        (
            SpatialStage::GraphConv { layer, drc },
            SpatialStage::GraphConv {
                layer: layer_p,
                drc: drc_p,
            },
        ) => {
            for (e, ep) in layer.entries.iter().zip(layer_p.entries.iter_mut()) {
                assert_eq!(e.key, ep.key);
                assert_eq!(e.adjacency.nnz(), ep.adjacency.nnz());
                for (pos, (i, j, v)) in e.adjacency.iter().enumerate() {
                    let q = ep.adjacency.position(perm[i], perm[j]).unwrap();
                    assert_eq!(ep.adjacency.values()[q], v);
                    ep.weights[[0, q]] = e.weights[[0, pos]];
                }
            }
            *drc_p = drc.clone();
        }
        _ => unreachable!(),
    }
    for (g, gp) in [
        (&m.encoder.input_gate, &mut p.encoder.input_gate),
        (&m.encoder.forget_gate, &mut p.encoder.forget_gate),
        (&m.encoder.output_gate, &mut p.encoder.output_gate),
        (&m.encoder.candidate, &mut p.encoder.candidate),
    ] {
        for i in 0..perm.len() {
            for o in 0..c_out {
                gp.input.row_mut(perm[i] * c_out + o).assign(&g.input.row(i * c_out + o));
            }
        }
        gp.hidden = g.hidden.clone();
        gp.bias = g.bias.clone();
    }
    for (g, gp) in [
        (&m.decoder.input_gate, &mut p.decoder.input_gate),
        (&m.decoder.forget_gate, &mut p.decoder.forget_gate),
        (&m.decoder.output_gate, &mut p.decoder.output_gate),
        (&m.decoder.candidate, &mut p.decoder.candidate),
    ] {
        for i in 0..perm.len() {
            gp.input.row_mut(perm[i]).assign(&g.input.row(i));
        }
        gp.hidden = g.hidden.clone();
        gp.bias = g.bias.clone();
    }
    for i in 0..perm.len() {
        p.output.weight.column_mut(perm[i]).assign(&m.output.weight.column(i));
        p.output.bias[[0, perm[i]]] = m.output.bias[[0, i]];
    }
    p
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-50.0..50.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn shape_and_two_matrices() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1..6usize, 2..12usize).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_k_matches_walk_enumeration((n, edges) in graph(8), k in 1usize..=3) {
        let segs: Vec<_> = (0..n).map(|i| (i % 5, i as f64, 0.0, 0.0)).collect();
        let net = build_network(&segs, &edges);
        let adj = rank_k_adjacency(&build_adjacency(&net).unwrap(), k).unwrap();
        prop_assert_eq!(adj.outflow.to_dense().unwrap(), walk_matrix(n, &edges, k));
        prop_assert_eq!(adj.inflow, adj.outflow.transpose());
    }

    #[test]
    fn u_turns_never_change_adjacency((n, edges) in graph(8), extra in proptest::collection::vec((0usize..8, 0usize..8), 0..6)) {
        let segs: Vec<_> = (0..n).map(|i| (i % 5, i as f64, 0.0, 0.0)).collect();
        let net = build_network(&segs, &edges);
        let mut with_u = net.clone();
        let mut seen: BTreeSet<(usize, usize)> = edges.clone();
        for (a, b) in extra {
            let (a, b) = (a % n, b % n);
            if a != b && seen.insert((a, b)) {
                with_u = with_u.with_connection(Connection { from_id: a, to_id: b, is_u_turn: true }).unwrap();
            }
        }
        prop_assert_eq!(adjacency_ranks(&net, 3).unwrap(), adjacency_ranks(&with_u, 3).unwrap());
    }

    #[test]
    fn clipped_weights_in_unit_interval_with_unit_diagonal(net in network(7)) {
        let set = build_weight_set(&net, 3, &WeightKind::ALL, &WeightConfig::default()).unwrap();
        prop_assert_eq!(set.len(), 36);
        let plain1 = build_adjacency(&net).unwrap();
        for e in &set.entries {
            for (i, j, v) in e.matrix.iter() {
                prop_assert!((0.0..=1.0).contains(&v), "{} ({i},{j}) = {v}", e.key);
            }
            for i in 0..net.len() {
                prop_assert_eq!(e.matrix.get(i, i), Some(1.0));
            }
            if e.key.rank == 1 {
                let pattern = match e.key.direction {
                    Direction::Outflow => &plain1.outflow,
                    Direction::Inflow => &plain1.inflow,
                };
                for (i, j, _) in e.matrix.iter().filter(|(i, j, _)| i != j) {
                    prop_assert!(pattern.get(i, j).is_some());
                }
            }
        }
        // inflow is the transpose of outflow for every kind and rank
        for e in set.entries.iter().filter(|e| e.key.direction == Direction::Outflow) {
            let mut k = e.key;
            k.direction = Direction::Inflow;
            prop_assert_eq!(set.get(&k).unwrap(), &e.matrix.transpose());
        }
    }

    #[test]
    fn angle_weight_periodic(a in 0.0..TAU, b in 0.0..TAU, wa in -3i32..3, wb in -3i32..3) {
        let cfg = WeightConfig::default();
        let w = angle_weight(a, b, &cfg);
        let shifted = angle_weight(a + wa as f64 * TAU, b + wb as f64 * TAU, &cfg);
        prop_assert!((w - shifted).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn sparse_apply_matches_dense(n in 1usize..10, entries in proptest::collection::btree_map((0usize..10, 0usize..10), -5.0..5.0f64, 0..30), x in proptest::collection::vec(-10.0..10.0f64, 10)) {
        let triplets: Vec<_> = entries.into_iter().filter(|((i, j), _)| *i < n && *j < n).map(|((i, j), v)| (i, j, v)).collect();
        let s = CsrMatrix::from_triplets(n, n, triplets).unwrap();
        let x = Array1::from(x[..n].to_vec());
        let sparse = sparse_apply(&s, x.view()).unwrap();
        let dense = s.to_dense().unwrap().dot(&x);
        for (a, b) in sparse.iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_never_below_mad((p, a) in shape_and_two_matrices()) {
        prop_assert!(rmse(p.view(), a.view()).unwrap() >= mad(p.view(), a.view()).unwrap() - 1e-12);
    }

    #[test]
    fn metrics_match_brute_force((p, a) in shape_and_two_matrices()) {
        let a = a.mapv(|v| v.abs() + 1.0);
        let (rows, cols) = a.dim();
        let total = (rows * cols) as f64;
        let mut sq = 0.0;
        let mut abs = 0.0;
        let mut pct = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let e = p[[r, c]] - a[[r, c]];
                sq += e * e;
                abs += e.abs();
                pct += (e / a[[r, c]]).abs();
            }
        }
        prop_assert!((rmse(p.view(), a.view()).unwrap() - (sq / total).sqrt()).abs() < 1e-12);
        prop_assert!((mad(p.view(), a.view()).unwrap() - abs / total).abs() < 1e-12);
        prop_assert!((mape(p.view(), a.view()).unwrap().value - 100.0 * pct / total).abs() < 1e-9);
        let mut m = 0.0;
        for r in 0..rows {
            let num: f64 = (0..cols).map(|c| (p[[r, c]] - a[[r, c]]).abs()).sum();
            let den: f64 = (1..cols).map(|c| (a[[r, c]] - a[[r, c - 1]]).abs()).sum::<f64>() / (cols - 1) as f64;
            m += num / den;
        }
        prop_assert!((mase(p.view(), a.view()).unwrap().value - m / rows as f64).abs() < 1e-9);
    }

    #[test]
    fn metrics_invariant_under_segment_permutation((p, a) in shape_and_two_matrices(), seed in any::<u64>()) {
        let a = a.mapv(|v| v.abs() + 1.0);
        let rows = a.nrows();
        let mut order: Vec<usize> = (0..rows).collect();
        let mut rng = mwtgc::numerics::SeededRng::new(seed);
        rng.shuffle(&mut order);
        let pp = p.select(ndarray::Axis(0), &order);
        let ap = a.select(ndarray::Axis(0), &order);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs());
        prop_assert!(close(rmse(p.view(), a.view()).unwrap(), rmse(pp.view(), ap.view()).unwrap()));
        prop_assert!(close(mad(p.view(), a.view()).unwrap(), mad(pp.view(), ap.view()).unwrap()));
        prop_assert!(close(mape(p.view(), a.view()).unwrap().value, mape(pp.view(), ap.view()).unwrap().value));
        prop_assert!(close(mase(p.view(), a.view()).unwrap().value, mase(pp.view(), ap.view()).unwrap().value));
    }

    #[test]
    fn dm_antisymmetric(a in proptest::collection::vec(0.0..10.0f64, 20..60), shift in proptest::collection::vec(-1.0..1.0f64, 60), lag in 0usize..5) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        if let (Ok(ab), Ok(ba)) = (dm_test(&a, &b, lag), dm_test(&b, &a, lag)) {
            prop_assert_eq!(ab.statistic, -ba.statistic);
            prop_assert_eq!(ab.p_value, ba.p_value);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }
    }

    #[test]
    fn window_count_formula(h in 1usize..20, tp in 1usize..20, extra in 0usize..50) {
        let day = h + tp + extra;
        let split = SplitSpec { train_days: 2, val_days: 1, test_days: 1, steps_per_day: day };
        let w = window_dataset(4 * day, h, tp, &split).unwrap();
        prop_assert_eq!(w.train.len(), 2 * day - (h + tp) + 1);
        prop_assert_eq!(w.val.len(), window_count(day, h, tp));
        prop_assert_eq!(w.test.len(), day - (h + tp) + 1);
        for &s in &w.train {
            prop_assert!(s + h + tp <= 2 * day);
        }
        for &s in &w.val {
            prop_assert!(s >= 2 * day && s + h + tp <= 3 * day);
        }
    }

    #[test]
    fn normalizer_round_trip(values in matrix(3, 8), probe in matrix(2, 5)) {
        let values = values.mapv(|v| v + 60.0);
        if let Ok(norm) = Normalizer::fit(values.view()) {
            let back = norm.inverse(&norm.forward(&probe));
            for (x, y) in back.iter().zip(probe.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_permutation_equivariant(net in network(6), seed in any::<u64>(), window in matrix(6, 3)) {
        let n = net.len();
        let mut perm: Vec<usize> = (0..n).collect();
        mwtgc::numerics::SeededRng::new(seed).shuffle(&mut perm);
        let kinds = [WeightKind::Plain, WeightKind::Distance, WeightKind::SpeedLimitRatio, WeightKind::Angle];
        let m = small_model(&net, &kinds, seed);
        let net_p = permute_network(&net, &perm);
        let mp = permute_model(&m, &net_p, &perm);
        let x = window.slice(ndarray::s![..n, ..]).mapv(|v| v / 25.0);
        let mut xp = Array2::zeros(x.dim());
        for i in 0..n {
            xp.row_mut(perm[i]).assign(&x.row(i));
        }
        let y = forward(&m, &x).unwrap();
        let yp = forward(&mp, &xp).unwrap();
        for i in 0..n {
            for t in 0..y.ncols() {
                prop_assert!((y[[i, t]] - yp[[perm[i], t]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shorter_horizon_is_a_prefix(net in network(5), seed in any::<u64>(), window in matrix(5, 3)) {
        let n = net.len();
        let m = small_model(&net, &[WeightKind::Plain], seed);
        let mut short = m.clone();
        short.hyper.horizon = 2;
        let x = window.slice(ndarray::s![..n, ..]).mapv(|v| v / 25.0);
        let long = forward(&m, &x).unwrap();
        let short = forward(&short, &x).unwrap();
        prop_assert_eq!(short, long.slice(ndarray::s![.., ..2]).to_owned());
    }

    #[test]
    fn checkpoint_reload_is_bit_identical(net in network(5), seed in any::<u64>(), window in matrix(5, 3)) {
        let n = net.len();
        let mut m = small_model(&net, &[WeightKind::Plain, WeightKind::SpeedLimitRatio], seed);
        m.normalizer = Normalizer { mean: 47.123456789, std: 9.87654321 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let loaded = ModelParameters::load(&path).unwrap();
        prop_assert_eq!(&loaded, &m);
        let x = window.slice(ndarray::s![..n, ..]).mapv(|v| v + 50.0);
        prop_assert_eq!(m.forecast(x.view()).unwrap(), loaded.forecast(x.view()).unwrap());
    }

    #[test]
    fn edgeless_graph_has_no_cross_node_flow(n in 2usize..8, x in proptest::collection::vec(-3.0..3.0f64, 8), node in 0usize..8, bump in 0.1..2.0f64) {
        let segs: Vec<_> = (0..n).map(|i| (i % 5, i as f64 * 10.0, 0.0, 0.0)).collect();
        let net = build_network(&segs, &BTreeSet::new());
        let mut m = small_model(&net, &[WeightKind::Plain], 1);
        m.hyper.max_rank = 1;
        let set = build_weight_set(&net, 1, &[WeightKind::Plain], &WeightConfig::default()).unwrap();
        let mut rng = mwtgc::numerics::SeededRng::new(3);
        let layer = mwtgc::model::GraphConvLayer::from_weight_set(&set, 0.05, &mut rng);
        for e in &layer.entries {
            prop_assert_eq!(e.adjacency.to_dense().unwrap(), Array2::<f64>::eye(n));
        }
        let x = Array1::from(x[..n].to_vec());
        let node = node % n;
        let mut bumped = x.clone();
        bumped[node] += bump;
        let a = graph_convolve(&x, &layer).unwrap();
        let b = graph_convolve(&bumped, &layer).unwrap();
        for i in (0..n).filter(|&i| i != node) {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }
}

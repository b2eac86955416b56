use nalgebra::DMatrix;
use panelcast::disagg;
use panelcast::eval::{self, ForecastSet};
use panelcast::graph::{self, RawAdjacency};
use panelcast::panel::{self, CsvSchema, Panel, ScalingStats, SplitSpec, Variable};
use panelcast::stats;
use panelcast::synth::{self, Dgp, DgpSpec};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("m{i:03}")).collect()
}

fn panel_from(n: usize, t: usize, values: Vec<f64>) -> Panel {
    Panel::new(ids(n), (2012..2012 + t as i32).collect(), values).unwrap()
}

fn csv_bytes(p: &Panel) -> Vec<u8> {
    let mut buf = Vec::new();
    panel::write_panel(p, &mut buf).unwrap();
    buf
}

/// Random N×T panel with N in 2..12, T in 5..10.
fn arb_panel() -> impl Strategy<Value = Panel> {
    (2usize..12, 5usize..10).prop_flat_map(|(n, t)| {
        prop::collection::vec(-1e3f64..1e3, n * t).prop_map(move |v| panel_from(n, t, v))
    })
}

fn arb_edges(n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..n, 0..n), 1..4 * n)
        .prop_map(|e| e.into_iter().filter(|(a, b)| a != b).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_ignores_test_window(p in arb_panel(), shift in -1e6f64..1e6, scale in 0.1f64..10.0) {
        let t = p.n_years();
        let split = SplitSpec::new(2012, 2012 + t as i32 - 3, 2012 + t as i32 - 1).unwrap();
        let base = panel::fit_scaling(&p, &split, Variable::Income).unwrap();
        let q = p.map_cells(|_, c, v| if c >= t - 2 { v * scale + shift } else { v });
        let moved = panel::fit_scaling(&q, &split, Variable::Income).unwrap();
        prop_assert!(base.mean.iter().zip(&moved.mean).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(base.sd.iter().zip(&moved.sd).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn standardize_round_trips(p in arb_panel()) {
        let t = p.n_years();
        let split = SplitSpec::new(2012, 2012 + t as i32 - 2, 2012 + t as i32 - 1).unwrap();
        let stats = panel::fit_scaling(&p, &split, Variable::Nightlights).unwrap();
        let z = panel::standardize(&p, &stats).unwrap();
        let back = panel::destandardize(&z, &stats).unwrap();
        for (a, b) in p.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        for i in 0..z.n_units() {
            let train = &z.row(i)[..split.train_len()];
            prop_assert!(stats::mean(train).abs() < 1e-10);
            prop_assert!((stats::sample_sd(train) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn panel_csv_round_trips_bitwise(p in arb_panel(), tiny in 1e-300f64..1e-290) {
        let p = p.map_cells(|i, c, v| if (i + c) % 5 == 0 { v * tiny } else { v });
        let back = panel::ingest_panel(csv_bytes(&p).as_slice(), &CsvSchema::default()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn ingest_ignores_row_order(p in arb_panel(), seed in any::<u64>()) {
        let text = String::from_utf8(csv_bytes(&p)).unwrap();
        let mut lines: Vec<&str> = text.lines().skip(1).collect();
        let mut state = seed | 1;
        for k in (1..lines.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            lines.swap(k, (state % (k as u64 + 1)) as usize);
        }
        let shuffled = format!("unit_id,year,value\n{}\n", lines.join("\n"));
        let back = panel::ingest_panel(shuffled.as_bytes(), &CsvSchema::default()).unwrap();
        prop_assert_eq!(back.select_units(p.unit_ids()).unwrap(), p);
    }

    #[test]
    fn scaling_stats_csv_round_trips(p in arb_panel()) {
        let t = p.n_years();
        let split = SplitSpec::new(2012, 2012 + t as i32 - 2, 2012 + t as i32 - 1).unwrap();
        let stats = panel::fit_scaling(&p, &split, Variable::Income).unwrap();
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        prop_assert_eq!(ScalingStats::read_csv(buf.as_slice(), Variable::Income).unwrap(), stats);
    }

    #[test]
    fn log_det_matches_dense(edges in arb_edges(25), k in 0usize..20) {
        let raw = RawAdjacency::from_edges(ids(25), &edges).unwrap();
        let Ok((g, _)) = graph::remove_islands(&raw) else { return Ok(()) };
        let (lo, hi) = g.admissible_interval();
        let rho = lo + (hi - lo) * (k as f64 + 0.5) / 20.0;
        let n = g.n_units();
        let w = DMatrix::from_row_slice(n, n, &g.dense_weights());
        let det = (DMatrix::<f64>::identity(n, n) - w * rho).determinant();
        prop_assert!(det > 0.0);
        let dense = det.ln();
        prop_assert!((g.log_det(rho) - dense).abs() <= 1e-9 * dense.abs().max(1e-3));
    }

    #[test]
    fn weights_are_row_stochastic(edges in arb_edges(30), c in -5.0f64..5.0) {
        let raw = RawAdjacency::from_edges(ids(30), &edges).unwrap();
        let Ok((g, _)) = graph::remove_islands(&raw) else { return Ok(()) };
        let lag = g.spatial_lag(&vec![c; g.n_units()]);
        prop_assert!(lag.iter().all(|v| (v - c).abs() <= 1e-12 * (1.0 + c.abs())));
        let ev = g.eigenvalues();
        prop_assert!((ev.iter().cloned().fold(f64::MIN, f64::max) - 1.0).abs() < 1e-10);
        prop_assert!(ev.iter().all(|&l| (-1.0 - 1e-10..=1.0 + 1e-10).contains(&l)));
    }

    #[test]
    fn island_removal_is_a_fixed_point(edges in arb_edges(20), drop in prop::collection::vec(0usize..20, 0..6)) {
        let raw = RawAdjacency::from_edges(ids(20), &edges).unwrap();
        let keep: Vec<String> = ids(20).into_iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, u)| u).collect();
        let Ok((g, removed)) = graph::remove_islands(&raw.restrict(&keep).unwrap()) else { return Ok(()) };
        prop_assert!(g.degrees().iter().all(|&d| d > 0));
        prop_assert_eq!(g.n_units() + removed.len(), keep.len());
        let again = RawAdjacency { unit_ids: g.unit_ids().to_vec(), neighbors: g.adjacency().to_vec() };
        prop_assert!(graph::remove_islands(&again).unwrap().1.is_empty());
    }

    #[test]
    fn lattice_mean_degree_formula(rows in 1usize..30, cols in 2usize..30) {
        let g = synth::make_lattice_graph(rows, cols).unwrap();
        let edges = rows * (cols - 1) + (rows - 1) * cols + 2 * (rows - 1) * (cols - 1);
        prop_assert!((g.mean_degree() - 2.0 * edges as f64 / (rows * cols) as f64).abs() < 1e-12);
        prop_assert_eq!(g.n_components(), 1);
    }

    #[test]
    fn dm_antisymmetric_and_scale_free(
        a in prop::collection::vec(-3.0f64..3.0, 40),
        b in prop::collection::vec(-3.0f64..3.0, 40),
        k in 0.01f64..100.0,
    ) {
        let (ea, eb) = (panel_from(20, 2, a), panel_from(20, 2, b));
        let ab = eval::dm_test(&ea, &eb).unwrap();
        let ba = eval::dm_test(&eb, &ea).unwrap();
        prop_assert_eq!(ab.statistic, -ba.statistic);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        let scaled = eval::dm_test(&ea.map_cells(|_, _, v| v * k), &eb.map_cells(|_, _, v| v * k)).unwrap();
        prop_assert!((scaled.statistic - ab.statistic).abs() <= 1e-8 * (1.0 + ab.statistic.abs()));
    }

    #[test]
    fn dm_ignores_unit_order(
        a in prop::collection::vec(-3.0f64..3.0, 30),
        b in prop::collection::vec(-3.0f64..3.0, 30),
    ) {
        let (ea, eb) = (panel_from(15, 2, a), panel_from(15, 2, b));
        let rev: Vec<String> = ids(15).into_iter().rev().collect();
        let ra = ea.select_units(&rev).unwrap();
        let rb = eb.select_units(&rev).unwrap();
        let x = eval::dm_test(&ea, &eb).unwrap();
        let y = eval::dm_test(&ra, &rb).unwrap();
        prop_assert!((x.statistic - y.statistic).abs() <= 1e-10 * (1.0 + x.statistic.abs()));
    }

    #[test]
    fn original_scale_rmse_is_sd_times_standardized(
        realized in prop::collection::vec(-3.0f64..3.0, 24),
        pred in prop::collection::vec(-3.0f64..3.0, 24),
        sd in prop::collection::vec(0.01f64..1e4, 12),
        mean in prop::collection::vec(-1e5f64..1e5, 12),
    ) {
        let real = Panel::new(ids(12), vec![2020, 2021], realized).unwrap();
        let f = ForecastSet::new("M", Panel::new(ids(12), vec![2020, 2021], pred).unwrap());
        let stats = ScalingStats { unit_ids: ids(12), mean, sd: sd.clone(), variable: Variable::Income };
        let r = eval::accuracy(&f, &real, &stats).unwrap();
        for i in 0..12 {
            let expect = sd[i] * r.per_unit_rmse[i];
            prop_assert!((r.per_unit_rmse_orig[i] - expect).abs() <= 1e-10 * (1.0 + expect));
        }
    }

    #[test]
    fn diagnostics_invariant_to_positive_affine_maps(
        p in arb_panel(),
        q in prop::collection::vec(-1e3f64..1e3, 120),
        a in prop::collection::vec(0.01f64..100.0, 12),
        c in prop::collection::vec(-1e3f64..1e3, 12),
    ) {
        let inc = p.map_cells(|i, t, _| q[(i * 10 + t) % q.len()] + (t * t) as f64);
        let Ok(base) = panel::diagnostics(&p, &inc) else { return Ok(()) };
        let moved = panel::diagnostics(&p.map_cells(|i, _, v| a[i] * v + c[i]), &inc.map_cells(|i, _, v| a[11 - i] * v - c[i])).unwrap();
        for (x, y) in base.within_corr.iter().zip(&moved.within_corr) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-8),
                (None, None) => {}
                _ => prop_assert!(false, "degenerate flag changed"),
            }
        }
    }

    #[test]
    fn chow_lin_respects_aggregation(annual in prop::collection::vec(1.0f64..1e4, 3..12)) {
        let r = disagg::chow_lin(&annual).unwrap();
        prop_assert_eq!(r.monthly.len(), 12 * annual.len());
        for (k, total) in annual.iter().enumerate() {
            let s: f64 = r.monthly[12 * k..12 * k + 12].iter().sum();
            prop_assert!((s - total).abs() <= 1e-9 * total.abs());
        }
        prop_assert!(r.a > 0.0 && r.a < 1.0);
    }
}

#[test]
fn sar_panel_satisfies_its_defining_identity() {
    for dgp in [Dgp::Sar, Dgp::Sdm] {
        let spec = DgpSpec { rows: 12, cols: 15, seed: 5, ..DgpSpec::for_dgp(dgp) };
        let p = synth::gen_spatial_panel(&spec).unwrap();
        let wy = p.graph.lag_panel(&p.y).unwrap();
        let wx = p.graph.lag_panel(&p.x).unwrap();
        let mut worst = 0.0f64;
        for i in 0..p.y.n_units() {
            for t in 0..p.y.n_years() {
                let r = p.y.get(i, t)
                    - spec.rho * wy.get(i, t)
                    - spec.beta * p.x.get(i, t)
                    - spec.theta * wx.get(i, t)
                    - p.alpha[i]
                    - p.eps.get(i, t);
                worst = worst.max(r.abs());
            }
        }
        assert!(worst < 1e-8, "{dgp:?}: identity residual {worst:e}");
    }
}

#[test]
fn spatial_lag_correlation_rises_with_rho() {
    let mut last = f64::NEG_INFINITY;
    for rho in [0.0, 0.2, 0.4, 0.6, 0.8, 0.95] {
        let spec = DgpSpec { rho, seed: 3, ..DgpSpec::for_dgp(Dgp::Sar) };
        let p = synth::gen_spatial_panel(&spec).unwrap();
        let wy = p.graph.lag_panel(&p.y).unwrap();
        let corr = stats::pearson(p.y.values(), wy.values()).unwrap();
        assert!(corr > last, "rho {rho}: corr {corr} not above {last}");
        last = corr;
    }
}

#[test]
fn synthetic_panels_round_trip_through_ingestion() {
    let tmp = tempfile::tempdir().unwrap();
    for dgp in [Dgp::Sar, Dgp::Hetero, Dgp::Ar1, Dgp::RandomWalk] {
        let spec = DgpSpec { rows: 6, cols: 7, n: 30, seed: 9, ..DgpSpec::for_dgp(dgp) };
        let dir = tmp.path().join(format!("{dgp:?}"));
        panelcast::pipeline::write_synth(&spec, &dir).unwrap();
        let (nl, income) =
            panelcast::pipeline::read_panels(&dir.join("nightlights.csv"), &dir.join("income.csv"), &CsvSchema::default())
                .unwrap();
        let (x, y) = match dgp {
            Dgp::Sar => {
                let p = synth::gen_spatial_panel(&spec).unwrap();
                let edges = std::fs::File::open(dir.join("edges.csv")).unwrap();
                let raw = graph::ingest_edges(edges, p.graph.unit_ids()).unwrap();
                assert_eq!(raw.neighbors, p.graph.adjacency());
                (p.x, p.y)
            }
            Dgp::Hetero => {
                let p = synth::gen_hetero_panel(&spec).unwrap();
                (p.x, p.y)
            }
            _ => synth::gen_univariate_panel(&spec).unwrap(),
        };
        assert_eq!(nl, x, "{dgp:?}");
        assert_eq!(income, y, "{dgp:?}");
    }
}

#[test]
fn generators_are_seed_deterministic() {
    let spec = DgpSpec { n: 50, seed: 21, ..DgpSpec::for_dgp(Dgp::Hetero) };
    let a = synth::gen_hetero_panel(&spec).unwrap();
    let b = synth::gen_hetero_panel(&spec).unwrap();
    assert_eq!(a.y, b.y);
    let c = synth::gen_hetero_panel(&DgpSpec { seed: 22, ..spec }).unwrap();
    assert_ne!(a.y, c.y);
}

use panelcast::baselines::LinearFit;
use panelcast::neural::NetConfig;
use panelcast::panel::{self, CsvSchema};
use panelcast::pipeline::{self, ExperimentConfig, FittedModel, ModelSpec, Prepared, Stage, DEFAULT_MODELS};
use panelcast::synth::{Dgp, DgpSpec};
use panelcast::Error;

fn small_sar(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        synth: Some(DgpSpec { rows: 5, cols: 6, t: 9, seed, ..DgpSpec::for_dgp(Dgp::Sar) }),
        net: NetConfig { epochs: 3, hidden: 6, ..Default::default() },
        ..Default::default()
    }
}

fn config_message(c: &ExperimentConfig) -> String {
    match c.validate() {
        Err(Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn validation_names_the_offending_field() {
    let base = small_sar(0);
    assert_eq!(base.validate().unwrap().len(), 11);

    let c = ExperimentConfig { models: vec!["GRU".into(), "Prophet".into()], ..base.clone() };
    assert!(config_message(&c).starts_with("models"));
    let c = ExperimentConfig { models: vec!["GRU".into(), "gru".into()], ..base.clone() };
    assert!(config_message(&c).contains("twice"));
    let c = ExperimentConfig { models: vec!["SAR".into()], ..base.clone() };
    assert!(config_message(&c).starts_with("reference"));
    let c = ExperimentConfig { synth: None, ..base.clone() };
    assert!(config_message(&c).starts_with("data"));
    let c = ExperimentConfig {
        synth: Some(DgpSpec::for_dgp(Dgp::Hetero)),
        models: vec!["SAR".into(), "GRU".into()],
        ..base.clone()
    };
    assert!(config_message(&c).starts_with("data.edges"));
    let c = ExperimentConfig { net: NetConfig { dropout: 1.0, ..Default::default() }, ..base.clone() };
    assert!(config_message(&c).starts_with("net"));
    let c = ExperimentConfig { threads: 0, ..base };
    assert!(config_message(&c).starts_with("threads"));
}

#[test]
fn invalid_config_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let c = ExperimentConfig { out: out.clone(), models: vec!["Nope".into()], ..small_sar(0) };
    let e = pipeline::run_pipeline(&c).unwrap_err();
    assert_eq!(e.stage, Stage::Config);
    assert_eq!(e.stage.exit_code(), 2);
    assert!(std::fs::read_to_string(out.join("FAILED")).unwrap().contains("stage = config"));
    assert!(!out.join("prepared").exists());
}

#[test]
fn config_parses_from_toml_and_rejects_unknown_keys() {
    let c = ExperimentConfig::from_toml_str(
        "seed = 4\nmodels = [\"PanelFE\", \"GRU\"]\n[split]\ntrain_end = 2019\n[net]\nhidden = 16\n[synth]\ndgp = \"sdm\"\n",
    )
    .unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.net.hidden, 16);
    assert_eq!(c.split.train_end, Some(2019));
    assert_eq!(c.synth.unwrap().dgp, Dgp::Sdm);
    assert!(ExperimentConfig::from_toml_str("[net]\nhiden = 3\n").is_err());
    assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
}

#[test]
fn model_names_parse_case_insensitively() {
    for name in DEFAULT_MODELS {
        let spec: ModelSpec = name.parse().unwrap();
        assert_eq!(spec.name(), name);
        assert_eq!(name.to_lowercase().parse::<ModelSpec>().unwrap(), spec);
    }
}

#[test]
fn prepared_inputs_round_trip_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline::prepare(&small_sar(3)).unwrap();
    p.write(tmp.path()).unwrap();
    let q = Prepared::read(tmp.path()).unwrap();
    assert_eq!(q.split, p.split);
    assert_eq!(q.nl, p.nl);
    assert_eq!(q.income, p.income);
    assert_eq!(q.nl_raw, p.nl_raw);
    assert_eq!(q.income_stats, p.income_stats);
    assert_eq!(q.nl_stats, p.nl_stats);
    let (g, h) = (p.graph.unwrap(), q.graph.unwrap());
    assert_eq!(g.unit_ids(), h.unit_ids());
    assert_eq!(g.adjacency(), h.adjacency());
    assert_eq!(g.eigenvalues(), h.eigenvalues());
}

#[test]
fn fitted_models_reload_to_identical_forecasts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_sar(1);
    let p = pipeline::prepare(&config).unwrap();
    for name in DEFAULT_MODELS {
        let spec: ModelSpec = name.parse().unwrap();
        let fitted = pipeline::fit_model(spec, &p, &config).unwrap();
        let dir = tmp.path().join(name);
        fitted.save(&dir).unwrap();
        let loaded = FittedModel::load(spec, &dir).unwrap();
        let a = pipeline::forecast_model(&fitted, &p, false).unwrap();
        let b = pipeline::forecast_model(&loaded, &p, false).unwrap();
        assert_eq!(a, b, "{name}");
        assert_eq!(a.years(), &[2019, 2020]);
    }
}

#[test]
fn linear_coefficients_round_trip() {
    let config = small_sar(2);
    let p = pipeline::prepare(&config).unwrap();
    for name in ["Persistence", "PanelFE", "OLSperUnit", "ARDL"] {
        let spec: ModelSpec = name.parse().unwrap();
        let FittedModel::Linear(fit) = pipeline::fit_model(spec, &p, &config).unwrap() else { unreachable!() };
        let mut buf = Vec::new();
        fit.write_csv(&mut buf).unwrap();
        let ModelSpec::Linear(m) = spec else { unreachable!() };
        let back = LinearFit::read_csv(m, buf.as_slice()).unwrap();
        assert_eq!(back.unit_ids, fit.unit_ids, "{name}");
        assert_eq!(back.alpha, fit.alpha, "{name}");
        assert_eq!(back.phi, fit.phi, "{name}");
        if fit.slope.is_some() {
            assert_eq!(back.slope, fit.slope, "{name}");
        } else {
            assert_eq!(back.beta, fit.beta, "{name}");
        }
    }
}

#[test]
fn degenerate_units_are_dropped_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut nl = String::from("unit_id,year,value\n");
    let mut inc = nl.clone();
    for u in 0..6 {
        for y in 2012..2020 {
            let x = ((u * 7 + y * 3) % 11) as f64 + u as f64;
            nl.push_str(&format!("c{u},{y},{x}\n"));
            let v = if u == 2 { 5.0 } else { 2.0 * x + ((y * u) % 5) as f64 };
            inc.push_str(&format!("c{u},{y},{v}\n"));
        }
    }
    std::fs::write(tmp.path().join("nl.csv"), nl).unwrap();
    std::fs::write(tmp.path().join("inc.csv"), inc).unwrap();
    let mut c = ExperimentConfig {
        models: vec!["PanelFE".into(), "Persistence".into()],
        reference: "PanelFE".into(),
        out: tmp.path().join("o"),
        ..Default::default()
    };
    c.data.nightlights = Some(tmp.path().join("nl.csv"));
    c.data.income = Some(tmp.path().join("inc.csv"));
    let summary = pipeline::run_pipeline(&c).unwrap();
    assert_eq!(summary.evaluation.reports[0].n_units, 5);
    let dropped = std::fs::read_to_string(tmp.path().join("o/prepared/dropped_units.txt")).unwrap();
    assert_eq!(dropped.trim(), "c2");
    let manifest = std::fs::read_to_string(tmp.path().join("o/manifest.toml")).unwrap();
    assert!(manifest.contains("dropped_degenerate = [\"c2\"]"));
}

#[test]
fn every_model_sees_the_same_standardized_inputs() {
    let config = small_sar(4);
    let p = pipeline::prepare(&config).unwrap();
    let g = p.graph.as_ref().unwrap();
    // Spatial models use the graph's units, which here are all panel units.
    assert_eq!(g.unit_ids(), p.income.unit_ids());
    let realized = p.realized().unwrap();
    let expected = panel::standardize(&p.income_raw, &p.income_stats).unwrap();
    assert_eq!(p.income, expected);
    assert_eq!(realized.years(), &[2019, 2020]);
    let reread = panel::ingest_panel(
        {
            let mut b = Vec::new();
            panel::write_panel(&p.nl, &mut b).unwrap();
            b
        }
        .as_slice(),
        &CsvSchema::default(),
    )
    .unwrap();
    assert_eq!(reread, p.nl);
}

#[test]
fn explicit_split_is_honoured_and_checked() {
    let mut c = small_sar(5);
    c.split.train_end = Some(2017);
    c.split.test_end = Some(2018);
    let p = pipeline::prepare(&c).unwrap();
    assert_eq!((p.split.train_start, p.split.train_end, p.split.test_end), (2012, 2017, 2018));
    c.split.train_end = Some(2013);
    assert_eq!(pipeline::prepare(&c).unwrap_err().stage, Stage::Config);
    c.split = Default::default();
    c.split.test_end = Some(2020);
    assert_eq!(pipeline::prepare(&c).unwrap_err().stage, Stage::Config);
}

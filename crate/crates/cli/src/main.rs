use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panelcast::disagg;
use panelcast::error::{Error, Result};
use panelcast::eval;
use panelcast::io::write_atomic;
use panelcast::panel::{self, CsvSchema};
use panelcast::pipeline::{
    self, AtStage, ExperimentConfig, FittedModel, ModelSpec, Prepared, Stage, StageResult, DEFAULT_MODELS,
};
use panelcast::synth::{Dgp, DgpSpec};

#[derive(Parser)]
#[command(name = "panelcast", version, about = "Panel nowcasting benchmark suite")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML), or a run manifest to re-run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Condition test-window lags on the model's own forecasts.
    #[arg(long, global = true)]
    recursive_lags: bool,
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long, global = true)]
    reference: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Read, align, split and standardize the input panels.
    Ingest,
    /// Within-unit correlation and AR(1) persistence diagnostics.
    Diagnose,
    /// Build the island-free contiguity graph and summarize it.
    Graph,
    /// Fit one model on the prepared panels.
    Fit { model: String },
    /// Forecast the test window with a fitted model.
    Forecast { model: String },
    /// Accuracy metrics and the pairwise DM matrix for stored forecasts.
    Evaluate,
    /// DM test between two stored forecast sets.
    Dm { a: String, b: String },
    /// Chow–Lin monthly disaggregation of an annual panel.
    Disagg {
        /// Annual panel CSV; defaults to the prepared raw income panel.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate a synthetic panel set.
    Synth(SynthArgs),
    /// Render the comparison table from stored forecasts.
    Report,
    /// Every stage for every configured model.
    Run,
}

#[derive(Args)]
struct SynthArgs {
    dgp: String,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Units, for non-spatial DGPs.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    start_year: Option<i32>,
}

fn config_err(e: Error) -> pipeline::PipelineError {
    pipeline::PipelineError { stage: Stage::Config, source: e }
}

fn load_config(g: &Global) -> StageResult<ExperimentConfig> {
    let mut c = match &g.config {
        Some(p) => ExperimentConfig::load(p).map_err(config_err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &g.out {
        c.out = o.clone();
    }
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(t) = g.threads {
        c.threads = t;
    }
    if g.recursive_lags {
        c.recursive_lags = true;
    }
    if let Some(m) = &g.models {
        c.models = m.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(r) = &g.reference {
        c.reference = r.clone();
    }
    Ok(c)
}

fn prepared_dir(out: &Path) -> PathBuf {
    out.join("prepared")
}

fn ingest(config: &ExperimentConfig) -> StageResult<Prepared> {
    let p = pipeline::prepare(config)?;
    p.write(&prepared_dir(&config.out)).at(Stage::Output)?;
    Ok(p)
}

/// Prepared inputs from an earlier `ingest`, or a fresh one.
fn prepared(config: &ExperimentConfig) -> StageResult<Prepared> {
    let dir = prepared_dir(&config.out);
    if dir.join("split.txt").is_file() {
        Prepared::read(&dir).at(Stage::Ingest)
    } else {
        ingest(config)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn model(name: &str) -> StageResult<ModelSpec> {
    name.parse().map_err(config_err)
}

/// Stored forecast sets, in the order of the configured model list.
fn stored_forecasts(config: &ExperimentConfig, explicit: bool) -> StageResult<Vec<eval::ForecastSet>> {
    let names: Vec<String> =
        if explicit { config.models.clone() } else { DEFAULT_MODELS.iter().map(|s| s.to_string()).collect() };
    let mut sets = Vec::new();
    for name in names {
        let spec = model(&name)?;
        let path = pipeline::forecast_path(&config.out, spec.name());
        if path.is_file() {
            sets.push(pipeline::read_forecast(&path, spec.name()).at(Stage::Evaluate)?);
        } else if explicit {
            return Err(config_err(Error::Config(format!("models: no forecasts at {}", path.display()))));
        }
    }
    if sets.is_empty() {
        return Err(config_err(Error::Config(format!("no forecasts under {}", config.out.join("forecasts").display()))));
    }
    Ok(sets)
}

fn evaluation(config: &ExperimentConfig, explicit: bool) -> StageResult<pipeline::Evaluation> {
    let p = Prepared::read(&prepared_dir(&config.out)).at(Stage::Ingest)?;
    let sets = stored_forecasts(config, explicit)?;
    let reference = model(&config.reference)?.name();
    if !sets.iter().any(|s| s.model == reference) {
        return Err(config_err(Error::Config(format!("reference: no stored forecasts for {reference}"))));
    }
    pipeline::evaluate(&sets, &p, reference).at(Stage::Evaluate)
}

fn fit_summary(fitted: &FittedModel) -> String {
    match fitted {
        FittedModel::Linear(f) => format!("{}: {} units", f.model.name(), f.unit_ids.len()),
        FittedModel::Spatial(f) => {
            let theta = f.theta.map(|t| format!(" theta = {t:.6}")).unwrap_or_default();
            format!(
                "{}: rho = {:.6} beta = {:.6}{theta} sigma2 = {:.6}{}",
                f.model.name(),
                f.rho,
                f.beta,
                f.sigma2,
                if f.non_concave { " (profile likelihood not concave)" } else { "" }
            )
        }
        FittedModel::Neural { model, report } => {
            let mse = report.as_ref().and_then(|r| r.epoch_mse.last().copied()).unwrap_or(f64::NAN);
            format!("{}: {} parameters, final train MSE = {mse:.6}", model.architecture().name(), model.n_params())
        }
    }
}

fn synth(args: &SynthArgs, out: &Path, seed: u64) -> StageResult<()> {
    let dgp: Dgp = args.dgp.parse().map_err(config_err)?;
    let mut spec = DgpSpec::for_dgp(dgp);
    spec.seed = seed;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { spec.$f = v; })* };
    }
    set!(rho, beta, theta, phi, noise_sd, rows, cols, n, t, start_year);
    pipeline::write_synth(&spec, out).at(Stage::Output)?;
    // A config that points at the generated files, ready for `--config`.
    let abs = |name: &str| fs::canonicalize(out.join(name)).unwrap_or_else(|_| out.join(name));
    let mut config = ExperimentConfig { seed, out: abs(""), ..Default::default() };
    config.data.nightlights = Some(abs("nightlights.csv"));
    config.data.income = Some(abs("income.csv"));
    if out.join("edges.csv").is_file() {
        config.data.edges = Some(abs("edges.csv"));
    } else {
        config.models.retain(|m| m != "SAR" && m != "SDM");
    }
    let text = config.to_toml_string().at(Stage::Output)?;
    write_atomic(&out.join("config.toml"), text.as_bytes()).at(Stage::Output)?;
    println!("wrote {} panels for {} units to {}", args.dgp, spec.n_units(), out.display());
    Ok(())
}

fn execute(cli: Cli) -> StageResult<()> {
    let config = load_config(&cli.global)?;
    let out = config.out.clone();
    fs::create_dir_all(&out).map_err(Error::from).at(Stage::Output)?;
    match &cli.command {
        Command::Ingest => {
            let p = ingest(&config)?;
            println!(
                "{} units, years {}..={}, train {}..={}, dropped {} degenerate, removed {} islands",
                p.income.n_units(),
                p.income.years()[0],
                p.income.years().last().unwrap(),
                p.split.train_start,
                p.split.train_end,
                p.dropped_degenerate.len(),
                p.removed_islands.len()
            );
        }
        Command::Diagnose => {
            let p = prepared(&config)?;
            let report = panel::diagnostics(&p.nl_raw, &p.income_raw).at(Stage::Evaluate)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf).at(Stage::Report)?;
            write_atomic(&out.join("diagnostics.csv"), &buf).at(Stage::Output)?;
            let s = &report.summary;
            let text = format!(
                "pooled_corr = {:.4}\nwithin_corr_p25 = {:.4}\nwithin_corr_median = {:.4}\nwithin_corr_p75 = {:.4}\n\
                 share_corr_above_0_3 = {:.4}\nshare_corr_above_0_5 = {:.4}\nshare_corr_negative = {:.4}\n\
                 ar1_p25 = {:.4}\nar1_median = {:.4}\nar1_p75 = {:.4}\nn_degenerate = {}\n",
                s.pooled_corr,
                s.corr_quartiles.p25,
                s.corr_quartiles.median,
                s.corr_quartiles.p75,
                s.share_corr_above_0_3,
                s.share_corr_above_0_5,
                s.share_corr_negative,
                s.ar1_quartiles.p25,
                s.ar1_quartiles.median,
                s.ar1_quartiles.p75,
                s.n_degenerate
            );
            write_atomic(&out.join("diagnostics_summary.txt"), text.as_bytes()).at(Stage::Output)?;
            print!("{text}");
        }
        Command::Graph => {
            let p = prepared(&config)?;
            let g = p.graph.as_ref().ok_or_else(|| {
                config_err(Error::Config("data.edges: no graph; give an edge list or a spatial synth DGP".into()))
            })?;
            let (lo, hi) = g.admissible_interval();
            let text = format!(
                "n_units = {}\nmean_degree = {:.4}\ncomponents = {}\nrho_lower = {lo:.6}\nrho_upper = {hi:.6}\nremoved_islands = {}\n",
                g.n_units(),
                g.mean_degree(),
                g.n_components(),
                p.removed_islands.len()
            );
            write_atomic(&out.join("graph_summary.txt"), text.as_bytes()).at(Stage::Output)?;
            print!("{text}");
        }
        Command::Fit { model: name } => {
            let spec = model(name)?;
            let p = prepared(&config)?;
            let fitted = pipeline::fit_model(spec, &p, &config).at(Stage::Fit)?;
            fitted.save(&pipeline::model_dir(&out, spec.name())).at(Stage::Output)?;
            println!("{}", fit_summary(&fitted));
        }
        Command::Forecast { model: name } => {
            let spec = model(name)?;
            let p = Prepared::read(&prepared_dir(&out)).at(Stage::Ingest)?;
            let fitted = FittedModel::load(spec, &pipeline::model_dir(&out, spec.name())).at(Stage::Fit)?;
            let pred = pipeline::forecast_model(&fitted, &p, config.recursive_lags).at(Stage::Forecast)?;
            let path = pipeline::forecast_path(&out, spec.name());
            fs::create_dir_all(path.parent().unwrap()).map_err(Error::from).at(Stage::Output)?;
            let mut buf = Vec::new();
            panel::write_panel(&pred, &mut buf).at(Stage::Output)?;
            write_atomic(&path, &buf).at(Stage::Output)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate => {
            let e = evaluation(&config, cli.global.models.is_some())?;
            e.write_accuracy(&out).at(Stage::Output)?;
            print!("{}", e.table());
        }
        Command::Report => {
            let e = evaluation(&config, cli.global.models.is_some())?;
            e.write_accuracy(&out).at(Stage::Output)?;
            e.write_report(&out).at(Stage::Report)?;
            print!("{}", e.table());
        }
        Command::Dm { a, b } => {
            let p = Prepared::read(&prepared_dir(&out)).at(Stage::Ingest)?;
            let (a, b) = (model(a)?.name(), model(b)?.name());
            let fa = pipeline::read_forecast(&pipeline::forecast_path(&out, a), a).at(Stage::Evaluate)?;
            let fb = pipeline::read_forecast(&pipeline::forecast_path(&out, b), b).at(Stage::Evaluate)?;
            let r = eval::dm_between(&fa, &fb, &p.realized().at(Stage::Evaluate)?).at(Stage::Evaluate)?;
            println!(
                "DM {} vs {}: statistic = {:+.4}, p = {:.4}, n = {}, mean loss differential = {:.6}{}",
                r.model_a,
                r.model_b,
                r.statistic,
                r.p_value,
                r.n,
                r.mean_diff,
                if r.zero_variance { " (zero variance)" } else { "" }
            );
        }
        Command::Disagg { input } => {
            let path = input.clone().unwrap_or_else(|| prepared_dir(&out).join("income.csv"));
            let annual = panel::ingest_panel(open(&path).at(Stage::Ingest)?, &CsvSchema::default()).at(Stage::Ingest)?;
            let results: Vec<_> = annual.rows().map(disagg::chow_lin).collect::<Result<_>>().at(Stage::Fit)?;
            let mut buf = Vec::new();
            disagg::write_monthly(annual.unit_ids(), annual.years(), &results, &mut buf).at(Stage::Output)?;
            write_atomic(&out.join("monthly.csv"), &buf).at(Stage::Output)?;
            let monthly: Vec<Vec<f64>> = results.iter().map(|r| r.monthly.clone()).collect();
            let d = disagg::persistence_diagnostic(&monthly).at(Stage::Evaluate)?;
            let text = format!(
                "units = {}\nmonthly_ar1_p25 = {:.4}\nmonthly_ar1_median = {:.4}\nmonthly_ar1_p75 = {:.4}\nimplied_annual = {:.4}\n",
                annual.n_units(),
                d.quartiles.p25,
                d.quartiles.median,
                d.quartiles.p75,
                d.implied_annual
            );
            write_atomic(&out.join("monthly_persistence.txt"), text.as_bytes()).at(Stage::Output)?;
            print!("{text}");
        }
        Command::Synth(args) => synth(args, &out, config.seed)?,
        Command::Run => {
            let summary = pipeline::run_pipeline(&config)?;
            print!("{}", summary.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}

//! Experiment orchestration. Every model in a run sees the same split and the
//! same standardized panels; each stage reads and writes plain files under
//! the output directory so stages can also run one at a time.
//!
//! ```text
//! out/
//!   prepared/   raw and standardized panels, scaling stats, split, graph
//!   models/     one directory of fitted parameters per model
//!   forecasts/  <model>.csv test-window predictions (standardized)
//!   accuracy.csv  per_year_rmse.csv  per_unit_rmse.csv
//!   dm_matrix.csv  report.csv  report.txt  manifest.toml
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, LinearFit, LinearModel};
use crate::error::{Error, Result};
use crate::eval::{self, AccuracyReport, DmResult, ForecastSet, ReportRow};
use crate::graph::{self, RawAdjacency, SpatialGraph};
use crate::io::write_atomic;
use crate::neural::{self, Architecture, NetConfig, SequenceModel, TrainReport};
use crate::panel::{self, CsvSchema, Panel, ScalingStats, SplitSpec, Variable};
use crate::spatial::{self, SpatialFit, SpatialModel};
use crate::synth::{self, Dgp, DgpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    Linear(LinearModel),
    Spatial(SpatialModel),
    Neural(Architecture),
}

impl ModelSpec {
    pub fn name(self) -> &'static str {
        match self {
            ModelSpec::Linear(m) => m.name(),
            ModelSpec::Spatial(m) => m.name(),
            ModelSpec::Neural(a) => a.name(),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(m) = s.parse::<LinearModel>() {
            return Ok(ModelSpec::Linear(m));
        }
        if let Ok(m) = s.parse::<SpatialModel>() {
            return Ok(ModelSpec::Spatial(m));
        }
        if let Ok(a) = s.parse::<Architecture>() {
            return Ok(ModelSpec::Neural(a));
        }
        Err(Error::Config(format!("models: unknown model name {s:?}")))
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_MODELS: [&str; 11] =
    ["Persistence", "PanelFE", "OLSperUnit", "ARDL", "SAR", "SDM", "RNN", "LSTM", "BiLSTM", "GRU", "Transformer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Config,
    Ingest,
    Graph,
    Fit,
    Forecast,
    Evaluate,
    Report,
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Graph => "graph",
            Stage::Fit => "fit",
            Stage::Forecast => "forecast",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Output => "output",
        }
    }

    /// Process exit code for failures in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Ingest => 3,
            Stage::Graph => 4,
            Stage::Fit => 5,
            Stage::Forecast => 6,
            Stage::Evaluate => 7,
            Stage::Report => 8,
            Stage::Output => 9,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} stage failed: {source}", stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub nightlights: Option<PathBuf>,
    pub income: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub unit_column: String,
    pub year_column: String,
    pub value_column: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = CsvSchema::default();
        Self { nightlights: None, income: None, edges: None, unit_column: s.unit, year_column: s.year, value_column: s.value }
    }
}

impl DataConfig {
    fn schema(&self) -> CsvSchema {
        CsvSchema { unit: self.unit_column.clone(), year: self.year_column.clone(), value: self.value_column.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_start: Option<i32>,
    pub train_end: Option<i32>,
    pub test_end: Option<i32>,
    /// Length of the test window when the explicit bounds are absent.
    pub test_years: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_start: None, train_end: None, test_end: None, test_years: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub models: Vec<String>,
    pub reference: String,
    pub recursive_lags: bool,
    pub threads: usize,
    pub data: DataConfig,
    pub synth: Option<DgpSpec>,
    pub split: SplitConfig,
    pub net: NetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("results"),
            models: DEFAULT_MODELS.iter().map(|s| s.to_string()).collect(),
            reference: "GRU".into(),
            recursive_lags: false,
            threads: 1,
            data: DataConfig::default(),
            synth: None,
            split: SplitConfig::default(),
            net: NetConfig::default(),
        }
    }
}

const MANIFEST_FORMAT: &str = "panelcast-manifest-1";

impl ExperimentConfig {
    /// Parses a config file, or the `[config]` table of a run manifest.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let is_manifest = table.get("format").and_then(|v| v.as_str()) == Some(MANIFEST_FORMAT);
        let value = if is_manifest {
            table.get("config").cloned().ok_or_else(|| Error::Config("manifest has no [config] table".into()))?
        } else {
            toml::Value::Table(table)
        };
        value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>> {
        let specs: Vec<ModelSpec> = self.models.iter().map(|m| m.parse()).collect::<Result<_>>()?;
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].contains(s) {
                return Err(Error::Config(format!("models: {} listed twice", s.name())));
            }
        }
        Ok(specs)
    }

    fn needs_graph(specs: &[ModelSpec]) -> bool {
        specs.iter().any(|s| matches!(s, ModelSpec::Spatial(_)))
    }

    /// Checks everything that can be checked before any data is read.
    pub fn validate(&self) -> Result<Vec<ModelSpec>> {
        let specs = self.model_specs()?;
        if specs.is_empty() {
            return Err(Error::Config("models: list is empty".into()));
        }
        let reference: ModelSpec =
            self.reference.parse().map_err(|_| Error::Config(format!("reference: unknown model {:?}", self.reference)))?;
        if !specs.contains(&reference) {
            return Err(Error::Config(format!("reference: {} is not in the model list", reference.name())));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads: must be at least 1".into()));
        }
        self.net.validate().map_err(|e| Error::Config(format!("net: {e}")))?;
        match (&self.synth, &self.data.nightlights, &self.data.income) {
            (Some(_), None, None) => {}
            (None, Some(nl), Some(inc)) => {
                for (field, p) in [("data.nightlights", nl), ("data.income", inc)] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("{field}: file {} does not exist", p.display())));
                    }
                }
            }
            (Some(_), _, _) => return Err(Error::Config("synth: cannot be combined with data.nightlights/data.income".into())),
            _ => return Err(Error::Config("data: need both nightlights and income files, or a [synth] section".into())),
        }
        if let Some(edges) = &self.data.edges {
            if !edges.is_file() {
                return Err(Error::Config(format!("data.edges: file {} does not exist", edges.display())));
            }
        }
        if Self::needs_graph(&specs) {
            let synth_graph = self.synth.as_ref().is_some_and(|s| matches!(s.dgp, Dgp::Sar | Dgp::Sdm));
            if !synth_graph && self.data.edges.is_none() {
                return Err(Error::Config("data.edges: spatial models need an edge list or a spatial [synth] DGP".into()));
            }
        }
        Ok(specs)
    }

    pub fn net_config(&self, arch: Architecture) -> NetConfig {
        NetConfig { architecture: arch, seed: self.seed, ..self.net.clone() }
    }
}

/// Inputs shared by every model of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitSpec,
    pub nl_raw: Panel,
    pub income_raw: Panel,
    pub nl: Panel,
    pub income: Panel,
    pub nl_stats: ScalingStats,
    pub income_stats: ScalingStats,
    pub graph: Option<SpatialGraph>,
    pub removed_islands: Vec<String>,
    pub dropped_degenerate: Vec<String>,
}

struct Loaded {
    nl: Panel,
    income: Panel,
    raw_graph: Option<RawAdjacency>,
}

fn load_synth(spec: &DgpSpec) -> Result<Loaded> {
    match spec.dgp {
        Dgp::Sar | Dgp::Sdm => {
            let p = synth::gen_spatial_panel(spec)?;
            let raw = RawAdjacency { unit_ids: p.graph.unit_ids().to_vec(), neighbors: p.graph.adjacency().to_vec() };
            Ok(Loaded { nl: p.x, income: p.y, raw_graph: Some(raw) })
        }
        Dgp::Hetero => {
            let p = synth::gen_hetero_panel(spec)?;
            Ok(Loaded { nl: p.x, income: p.y, raw_graph: None })
        }
        Dgp::Ar1 | Dgp::RandomWalk => {
            let (nl, income) = synth::gen_univariate_panel(spec)?;
            Ok(Loaded { nl, income, raw_graph: None })
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Reads the nightlight and income panels and aligns nightlights to the
/// income panel's unit order.
pub fn read_panels(nl: &Path, income: &Path, schema: &CsvSchema) -> Result<(Panel, Panel)> {
    let nl = panel::ingest_panel(open(nl)?, schema)?;
    let income = panel::ingest_panel(open(income)?, schema)?;
    if nl.years() != income.years() {
        return Err(Error::UnitMismatch("nightlight and income panels cover different years".into()));
    }
    if nl.n_units() != income.n_units() {
        return Err(Error::UnitMismatch(format!(
            "nightlight panel has {} units, income panel {}",
            nl.n_units(),
            income.n_units()
        )));
    }
    let nl = nl.select_units(income.unit_ids()).map_err(|e| Error::UnitMismatch(e.to_string()))?;
    Ok((nl, income))
}

fn load(config: &ExperimentConfig, need_graph: bool) -> StageResult<Loaded> {
    if let Some(spec) = &config.synth {
        return load_synth(spec).at(Stage::Ingest);
    }
    let (nl_path, inc_path) = (config.data.nightlights.as_ref().unwrap(), config.data.income.as_ref().unwrap());
    let (nl, income) = read_panels(nl_path, inc_path, &config.data.schema()).at(Stage::Ingest)?;
    let raw_graph = match (&config.data.edges, need_graph) {
        (Some(p), true) => Some(graph::ingest_edges_within(open(p).at(Stage::Graph)?, income.unit_ids()).at(Stage::Graph)?.0),
        _ => None,
    };
    Ok(Loaded { nl, income, raw_graph })
}

pub fn resolve_split(config: &SplitConfig, panel: &Panel) -> Result<SplitSpec> {
    match (config.train_start, config.train_end, config.test_end) {
        (None, None, None) => SplitSpec::last_years(panel, config.test_years),
        (start, Some(train_end), end) => {
            let split = SplitSpec::new(
                start.unwrap_or(panel.years()[0]),
                train_end,
                end.unwrap_or(*panel.years().last().unwrap_or(&train_end)),
            )?;
            split.validate(panel)?;
            Ok(split)
        }
        _ => Err(Error::InvalidSplit("split: train_end is required when any split bound is given".into())),
    }
}

/// Splits, drops units with zero train-window variance in either variable,
/// standardizes, and builds the island-free graph when needed.
pub fn prepare(config: &ExperimentConfig) -> StageResult<Prepared> {
    let specs = config.validate().at(Stage::Config)?;
    let loaded = load(config, ExperimentConfig::needs_graph(&specs))?;
    let split = resolve_split(&config.split, &loaded.income).at(Stage::Config)?;
    let mut degenerate = Vec::new();
    for (p, v) in [(&loaded.nl, Variable::Nightlights), (&loaded.income, Variable::Income)] {
        match panel::fit_scaling(p, &split, v) {
            Ok(_) => {}
            Err(Error::DegenerateUnit(ids)) => degenerate.extend(ids),
            Err(e) => return Err(e).at(Stage::Ingest),
        }
    }
    let degenerate_set: HashSet<&String> = degenerate.iter().collect();
    let keep: Vec<String> = loaded.income.unit_ids().iter().filter(|u| !degenerate_set.contains(u)).cloned().collect();
    if keep.len() < 2 {
        return Err(Error::DegenerateUnit(degenerate)).at(Stage::Ingest);
    }
    let mut dropped: Vec<String> = loaded.income.unit_ids().iter().filter(|u| degenerate_set.contains(u)).cloned().collect();
    dropped.dedup();
    let nl_raw = loaded.nl.select_units(&keep).at(Stage::Ingest)?;
    let income_raw = loaded.income.select_units(&keep).at(Stage::Ingest)?;
    let nl_stats = panel::fit_scaling(&nl_raw, &split, Variable::Nightlights).at(Stage::Ingest)?;
    let income_stats = panel::fit_scaling(&income_raw, &split, Variable::Income).at(Stage::Ingest)?;
    let nl = panel::standardize(&nl_raw, &nl_stats).at(Stage::Ingest)?;
    let income = panel::standardize(&income_raw, &income_stats).at(Stage::Ingest)?;
    let (graph, removed_islands) = match loaded.raw_graph {
        Some(raw) => {
            let (g, removed) = graph::remove_islands(&raw.restrict(&keep).at(Stage::Graph)?).at(Stage::Graph)?;
            (Some(g), removed)
        }
        None => (None, Vec::new()),
    };
    Ok(Prepared { split, nl_raw, income_raw, nl, income, nl_stats, income_stats, graph, removed_islands, dropped_degenerate: dropped })
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect())
}

impl Prepared {
    pub fn realized(&self) -> Result<Panel> {
        Ok(self.income.select_columns(self.split.test_cols(&self.income)?))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, p) in [
            ("nightlights.csv", &self.nl_raw),
            ("income.csv", &self.income_raw),
            ("nightlights_std.csv", &self.nl),
            ("income_std.csv", &self.income),
        ] {
            write_with(&dir.join(name), |b| panel::write_panel(p, b))?;
        }
        write_with(&dir.join("realized.csv"), |b| panel::write_panel(&self.realized()?, b))?;
        write_with(&dir.join("scaling_nightlights.csv"), |b| self.nl_stats.write_csv(b))?;
        write_with(&dir.join("scaling_income.csv"), |b| self.income_stats.write_csv(b))?;
        let s = &self.split;
        write_atomic(
            &dir.join("split.txt"),
            format!("train_start = {}\ntrain_end = {}\ntest_end = {}\n", s.train_start, s.train_end, s.test_end).as_bytes(),
        )?;
        write_lines(&dir.join("dropped_units.txt"), &self.dropped_degenerate)?;
        if let Some(g) = &self.graph {
            write_with(&dir.join("edges.csv"), |b| graph::write_edges(g, b))?;
            write_lines(&dir.join("removed_units.txt"), &self.removed_islands)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let schema = CsvSchema::default();
        let panel_at = |name: &str| panel::ingest_panel(open(&dir.join(name))?, &schema);
        let kv = crate::io::read_key_values(open(&dir.join("split.txt"))?)?;
        let year = |k: &str| -> Result<i32> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("split.txt: missing {k}")))?
                .parse()
                .map_err(|e| Error::Parse(format!("split.txt {k}: {e}")))
        };
        let split = SplitSpec::new(year("train_start")?, year("train_end")?, year("test_end")?)?;
        let income = panel_at("income_std.csv")?;
        let removed_islands = read_lines(&dir.join("removed_units.txt"))?;
        let graph = if dir.join("edges.csv").exists() {
            let removed: HashSet<&String> = removed_islands.iter().collect();
            let kept: Vec<String> = income.unit_ids().iter().filter(|u| !removed.contains(u)).cloned().collect();
            let raw = graph::ingest_edges(open(&dir.join("edges.csv"))?, &kept)?;
            Some(SpatialGraph::new(raw.unit_ids, raw.neighbors)?)
        } else {
            None
        };
        Ok(Self {
            split,
            nl_raw: panel_at("nightlights.csv")?.select_units(income.unit_ids())?,
            income_raw: panel_at("income.csv")?.select_units(income.unit_ids())?,
            nl: panel_at("nightlights_std.csv")?.select_units(income.unit_ids())?,
            nl_stats: ScalingStats::read_csv(open(&dir.join("scaling_nightlights.csv"))?, Variable::Nightlights)?,
            income_stats: ScalingStats::read_csv(open(&dir.join("scaling_income.csv"))?, Variable::Income)?,
            income,
            graph,
            removed_islands,
            dropped_degenerate: read_lines(&dir.join("dropped_units.txt"))?,
        })
    }

    fn spatial_inputs(&self) -> Result<(&SpatialGraph, Panel, Panel)> {
        let g = self.graph.as_ref().ok_or_else(|| Error::Config("spatial models need a graph".into()))?;
        Ok((g, self.income.select_units(g.unit_ids())?, self.nl.select_units(g.unit_ids())?))
    }
}

#[derive(Debug, Clone)]
pub enum FittedModel {
    Linear(LinearFit),
    Spatial(SpatialFit),
    Neural { model: SequenceModel, report: Option<TrainReport> },
}

pub fn fit_model(spec: ModelSpec, prepared: &Prepared, config: &ExperimentConfig) -> Result<FittedModel> {
    let (y, x, split) = (&prepared.income, &prepared.nl, &prepared.split);
    Ok(match spec {
        ModelSpec::Linear(m) => FittedModel::Linear(match m {
            LinearModel::Persistence => baselines::fit_persistence(y),
            LinearModel::PanelFe => baselines::fit_panel_fe(y, x, split)?,
            LinearModel::OlsPerUnit => baselines::fit_ols_per_unit(y, x, split)?,
            LinearModel::Ardl => baselines::fit_ardl(y, x, split)?,
        }),
        ModelSpec::Spatial(m) => {
            let (g, ys, xs) = prepared.spatial_inputs()?;
            FittedModel::Spatial(spatial::fit(&ys, &xs, g, split, m)?)
        }
        ModelSpec::Neural(a) => {
            let (model, report) = neural::fit_panel(&config.net_config(a), x, y, split)?;
            let report = report.into_result()?;
            FittedModel::Neural { model, report: Some(report) }
        }
    })
}

pub fn forecast_model(fitted: &FittedModel, prepared: &Prepared, recursive_lags: bool) -> Result<Panel> {
    let (y, x, split) = (&prepared.income, &prepared.nl, &prepared.split);
    match fitted {
        FittedModel::Linear(fit) => baselines::predict(fit, y, x, split, recursive_lags),
        FittedModel::Spatial(fit) => {
            let (g, _, xs) = prepared.spatial_inputs()?;
            spatial::forecast(fit, &xs.select_columns(split.test_cols(&xs)?), g)
        }
        FittedModel::Neural { model, .. } => neural::forecast_panel(model, x, y, split),
    }
}

impl FittedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        match self {
            FittedModel::Linear(fit) => write_with(&dir.join("coefficients.csv"), |b| fit.write_csv(b)),
            FittedModel::Spatial(fit) => {
                write_with(&dir.join("params.txt"), |b| fit.write_params(b))?;
                write_with(&dir.join("fixed_effects.csv"), |b| fit.write_fixed_effects(b))?;
                write_with(&dir.join("loglik_trace.csv"), |b| fit.write_trace(b))
            }
            FittedModel::Neural { model, report } => {
                neural::save_checkpoint(model, &dir.join("checkpoint"))?;
                if let Some(r) = report {
                    let mut text = String::from("epoch,train_mse\n");
                    for (e, m) in r.epoch_mse.iter().enumerate() {
                        text.push_str(&format!("{},{m:?}\n", e + 1));
                    }
                    write_atomic(&dir.join("train_loss.csv"), text.as_bytes())?;
                }
                Ok(())
            }
        }
    }

    pub fn load(spec: ModelSpec, dir: &Path) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Linear(m) => FittedModel::Linear(LinearFit::read_csv(m, open(&dir.join("coefficients.csv"))?)?),
            ModelSpec::Spatial(_) => {
                FittedModel::Spatial(SpatialFit::read(open(&dir.join("params.txt"))?, open(&dir.join("fixed_effects.csv"))?)?)
            }
            ModelSpec::Neural(_) => FittedModel::Neural { model: neural::load_checkpoint(&dir.join("checkpoint"))?, report: None },
        })
    }
}

pub fn read_forecast(path: &Path, model: &str) -> Result<ForecastSet> {
    Ok(ForecastSet::new(model, panel::ingest_panel(open(path)?, &CsvSchema::default())?))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reference: String,
    pub reports: Vec<AccuracyReport>,
    pub rows: Vec<ReportRow>,
    pub dm_pairs: Vec<DmResult>,
}

/// Accuracy per model, DM of each model against the reference, and DM for
/// every ordered pair of distinct models.
pub fn evaluate(forecasts: &[ForecastSet], prepared: &Prepared, reference: &str) -> Result<Evaluation> {
    let realized = prepared.realized()?;
    let reference_set = forecasts
        .iter()
        .find(|f| f.model == reference)
        .ok_or_else(|| Error::Config(format!("reference: no forecasts for {reference}")))?;
    let mut reports = Vec::with_capacity(forecasts.len());
    let mut rows = Vec::with_capacity(forecasts.len());
    for f in forecasts {
        let report = eval::accuracy(f, &realized, &prepared.income_stats)?;
        let dm = if f.model == reference { None } else { Some(eval::dm_between(f, reference_set, &realized)?) };
        rows.push(ReportRow::new(&report, dm));
        reports.push(report);
    }
    let mut dm_pairs = Vec::new();
    for a in forecasts {
        for b in forecasts {
            if a.model != b.model {
                dm_pairs.push(eval::dm_between(a, b, &realized)?);
            }
        }
    }
    Ok(Evaluation { reference: reference.to_string(), reports, rows, dm_pairs })
}

impl Evaluation {
    pub fn write_accuracy(&self, dir: &Path) -> Result<()> {
        write_with(&dir.join("accuracy.csv"), |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record([
                "model",
                "n_units",
                "rmse_norm",
                "rmse_orig_median",
                "r2",
                "rmse_p25",
                "rmse_median",
                "rmse_p75",
                "top1_share",
                "pred_min",
                "pred_max",
                "realized_min",
                "realized_max",
            ])?;
            for r in &self.reports {
                let q = &r.rmse_quartiles;
                let nums = [
                    r.rmse_norm,
                    r.rmse_orig_median,
                    r.r2,
                    q.p25,
                    q.median,
                    q.p75,
                    r.top1_share,
                    r.prediction_range.0,
                    r.prediction_range.1,
                    r.realized_range.0,
                    r.realized_range.1,
                ];
                let mut rec = vec![r.model.clone(), r.n_units.to_string()];
                rec.extend(nums.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        })?;
        write_with(&dir.join("per_year_rmse.csv"), |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["model", "year", "rmse"])?;
            for r in &self.reports {
                for (y, v) in &r.per_year_rmse {
                    w.write_record([r.model.clone(), y.to_string(), format!("{v:?}")])?;
                }
            }
            w.flush()?;
            Ok(())
        })?;
        write_with(&dir.join("per_unit_rmse.csv"), |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["model", "unit_id", "rmse_norm", "rmse_orig"])?;
            for r in &self.reports {
                for ((u, a), o) in r.unit_ids.iter().zip(&r.per_unit_rmse).zip(&r.per_unit_rmse_orig) {
                    w.write_record([r.model.clone(), u.clone(), format!("{a:?}"), format!("{o:?}")])?;
                }
            }
            w.flush()?;
            Ok(())
        })?;
        write_with(&dir.join("dm_matrix.csv"), |b| eval::write_dm_matrix(&self.dm_pairs, b))
    }

    pub fn table(&self) -> String {
        eval::render_table(&self.rows, &self.reference)
    }

    pub fn write_report(&self, dir: &Path) -> Result<()> {
        write_with(&dir.join("report.csv"), |b| eval::write_report_csv(&self.rows, &self.reference, b))?;
        write_atomic(&dir.join("report.txt"), self.table().as_bytes())
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    model: String,
    seed: u64,
    epochs: usize,
    final_train_mse: f64,
    final_param_norm: f64,
    wall_clock_secs: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: &'static str,
    seed: u64,
    wall_clock_secs: f64,
    n_units: usize,
    n_years: usize,
    spatial_units: Option<usize>,
    dropped_degenerate: &'a [String],
    removed_islands: &'a [String],
    outputs: Vec<String>,
    train: Vec<TrainSummary>,
    config: &'a ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub table: String,
    pub evaluation: Evaluation,
}

fn absolute(p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone()))
}

/// Config echo that re-runs the same experiment: split bounds resolved and
/// data paths made absolute.
fn resolved_config(config: &ExperimentConfig, split: &SplitSpec) -> ExperimentConfig {
    let mut c = config.clone();
    c.split = SplitConfig {
        train_start: Some(split.train_start),
        train_end: Some(split.train_end),
        test_end: Some(split.test_end),
        test_years: split.test_len(),
    };
    c.data.nightlights = absolute(&c.data.nightlights);
    c.data.income = absolute(&c.data.income);
    c.data.edges = absolute(&c.data.edges);
    c
}

pub fn forecast_path(out: &Path, model: &str) -> PathBuf {
    out.join("forecasts").join(format!("{model}.csv"))
}

pub fn model_dir(out: &Path, model: &str) -> PathBuf {
    out.join("models").join(model)
}

/// Runs every configured model end to end. On failure a `FAILED` file in the
/// output directory names the stage; outputs already written are partial.
pub fn run_pipeline(config: &ExperimentConfig) -> StageResult<RunSummary> {
    let out = config.out.clone();
    fs::create_dir_all(&out).map_err(Error::from).at(Stage::Output)?;
    let failed = out.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).map_err(Error::from).at(Stage::Output)?;
    }
    let result = run_stages(config, &out);
    if let Err(e) = &result {
        let _ = fs::write(&failed, format!("stage = {}\nerror = {}\n", e.stage.name(), e.source));
    }
    result
}

fn fit_one(spec: ModelSpec, prepared: &Prepared, config: &ExperimentConfig) -> StageResult<(FittedModel, Panel)> {
    let fitted = fit_model(spec, prepared, config).at(Stage::Fit)?;
    let pred = forecast_model(&fitted, prepared, config.recursive_lags).at(Stage::Forecast)?;
    Ok((fitted, pred))
}

/// Fits a batch of models, one thread per model when there is more than one.
/// Each fit depends only on its own seed, so results match a sequential run.
fn fit_and_forecast(specs: &[ModelSpec], prepared: &Prepared, config: &ExperimentConfig) -> Vec<StageResult<(FittedModel, Panel)>> {
    if specs.len() == 1 {
        return vec![fit_one(specs[0], prepared, config)];
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs.iter().map(|&s| scope.spawn(move || fit_one(s, prepared, config))).collect();
        handles.into_iter().map(|h| h.join().expect("model fit thread panicked")).collect()
    })
}

fn run_stages(config: &ExperimentConfig, out: &Path) -> StageResult<RunSummary> {
    let start = Instant::now();
    let specs = config.validate().at(Stage::Config)?;
    let prepared = prepare(config)?;
    prepared.write(&out.join("prepared")).at(Stage::Output)?;
    let mut forecasts = Vec::with_capacity(specs.len());
    let mut train = Vec::new();
    for chunk in specs.chunks(config.threads.max(1)) {
        let results = fit_and_forecast(chunk, &prepared, config);
        for (spec, result) in chunk.iter().zip(results) {
            let (fitted, pred) = result?;
            fitted.save(&model_dir(out, spec.name())).at(Stage::Output)?;
            if let FittedModel::Neural { model, report: Some(r) } = &fitted {
                train.push(TrainSummary {
                    model: spec.name().into(),
                    seed: model.config.seed,
                    epochs: r.epoch_mse.len(),
                    final_train_mse: r.epoch_mse.last().copied().unwrap_or(f64::NAN),
                    final_param_norm: r.final_param_norm,
                    wall_clock_secs: r.wall_clock_secs,
                });
            }
            let path = forecast_path(out, spec.name());
            fs::create_dir_all(path.parent().unwrap()).map_err(Error::from).at(Stage::Output)?;
            write_with(&path, |b| panel::write_panel(&pred, b)).at(Stage::Output)?;
            forecasts.push(ForecastSet::new(spec.name(), pred));
        }
    }
    let reference = config.reference.parse::<ModelSpec>().at(Stage::Config)?.name();
    let evaluation = evaluate(&forecasts, &prepared, reference).at(Stage::Evaluate)?;
    evaluation.write_accuracy(out).at(Stage::Output)?;
    evaluation.write_report(out).at(Stage::Report)?;
    let mut outputs: Vec<String> = vec![
        "prepared".into(),
        "accuracy.csv".into(),
        "per_year_rmse.csv".into(),
        "per_unit_rmse.csv".into(),
        "dm_matrix.csv".into(),
        "report.csv".into(),
        "report.txt".into(),
    ];
    for s in &specs {
        outputs.push(format!("forecasts/{}.csv", s.name()));
        outputs.push(format!("models/{}", s.name()));
    }
    let resolved = resolved_config(config, &prepared.split);
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        n_units: prepared.income.n_units(),
        n_years: prepared.income.n_years(),
        spatial_units: prepared.graph.as_ref().map(|g| g.n_units()),
        dropped_degenerate: &prepared.dropped_degenerate,
        removed_islands: &prepared.removed_islands,
        outputs,
        train,
        config: &resolved,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string())).at(Stage::Output)?;
    write_atomic(&out.join("manifest.toml"), text.as_bytes()).at(Stage::Output)?;
    let table = evaluation.table();
    Ok(RunSummary { out: out.to_path_buf(), table, evaluation })
}

/// Writes a generated panel set (and its graph for spatial DGPs) in the
/// ingestion formats, plus the true parameters.
pub fn write_synth(spec: &DgpSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let loaded = load_synth(spec)?;
    write_with(&dir.join("nightlights.csv"), |b| panel::write_panel(&loaded.nl, b))?;
    write_with(&dir.join("income.csv"), |b| panel::write_panel(&loaded.income, b))?;
    if let Some(raw) = &loaded.raw_graph {
        let g = SpatialGraph::new(raw.unit_ids.clone(), raw.neighbors.clone())?;
        write_with(&dir.join("edges.csv"), |b| graph::write_edges(&g, b))?;
    }
    let text = toml::to_string(spec).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(&dir.join("truth.toml"), text.as_bytes())
}

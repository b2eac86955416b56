//! Forecast accuracy metrics and the cross-sectional Diebold–Mariano test.
//!
//! The DM statistic averages squared-loss differentials over the test years
//! within each unit and then tests the cross-sectional mean, which is what
//! gives power when the test window is only a couple of years long.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::panel::{Panel, ScalingStats};
use crate::stats::Quartiles;

/// Test-window predictions of one model, in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub model: String,
    pub predictions: Panel,
}

impl ForecastSet {
    pub fn new(model: impl Into<String>, predictions: Panel) -> Self {
        Self { model: model.into(), predictions }
    }

    /// Forecast errors against the realized standardized panel (prediction minus realized).
    pub fn errors(&self, realized: &Panel) -> Result<Panel> {
        let aligned = align(realized, &self.predictions)?;
        let p = &self.predictions;
        Ok(p.map_cells(|i, c, v| v - aligned.get(i, c)))
    }
}

/// Restricts `realized` to the units (in order) and years of `target`.
fn align(realized: &Panel, target: &Panel) -> Result<Panel> {
    let cols: Vec<usize> = target
        .years()
        .iter()
        .map(|&y| {
            realized
                .year_index(y)
                .ok_or_else(|| Error::UnitMismatch(format!("realized panel lacks year {y}")))
        })
        .collect::<Result<_>>()?;
    let sub = realized.select_units(target.unit_ids()).map_err(|e| match e {
        Error::UnknownUnit(u) => Error::UnitMismatch(format!("unit {u:?} absent from realized panel")),
        other => other,
    })?;
    let t = cols.len();
    let values = (0..sub.n_units() * t).map(|k| sub.get(k / t, cols[k % t])).collect();
    Panel::new(target.unit_ids().to_vec(), target.years().to_vec(), values)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DmResult {
    pub model_a: String,
    pub model_b: String,
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub statistic: f64,
    pub p_value: f64,
    /// All loss differentials were equal, so `sd_diff` is zero.
    pub zero_variance: bool,
}

/// Cross-sectional DM test on aligned N×T_te error matrices.
///
/// `statistic > 0` means model A has the larger mean squared error.
pub fn dm_test(errors_a: &Panel, errors_b: &Panel) -> Result<DmResult> {
    if !errors_a.same_shape(errors_b) {
        return Err(Error::UnitMismatch("error matrices must share units and years".into()));
    }
    let n = errors_a.n_units();
    let t = errors_a.n_years();
    if n < 2 || t == 0 {
        return Err(Error::Shape(format!("DM test needs N >= 2 and T >= 1, got {n}x{t}")));
    }
    let d: Vec<f64> = (0..n)
        .map(|i| {
            errors_a.row(i).iter().zip(errors_b.row(i)).map(|(a, b)| a * a - b * b).sum::<f64>() / t as f64
        })
        .collect();
    Ok(dm_from_differentials(&d))
}

fn dm_from_differentials(d: &[f64]) -> DmResult {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let (statistic, zero_variance) = if sd > 0.0 {
        (mean / (sd / n.sqrt()), false)
    } else if mean == 0.0 {
        (0.0, true)
    } else {
        (f64::INFINITY.copysign(mean), true)
    };
    let p_value = if statistic.is_infinite() { 0.0 } else { erfc(statistic.abs() / std::f64::consts::SQRT_2) };
    DmResult {
        model_a: String::new(),
        model_b: String::new(),
        n: d.len(),
        mean_diff: mean,
        sd_diff: sd,
        statistic,
        p_value,
        zero_variance,
    }
}

/// DM test between two forecast sets on the intersection of their units
/// (in A's unit order).
pub fn dm_between(a: &ForecastSet, b: &ForecastSet, realized: &Panel) -> Result<DmResult> {
    let in_b: HashMap<&str, usize> =
        b.predictions.unit_ids().iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let common: Vec<String> =
        a.predictions.unit_ids().iter().filter(|u| in_b.contains_key(u.as_str())).cloned().collect();
    if a.predictions.years() != b.predictions.years() {
        return Err(Error::UnitMismatch(format!("{} and {} cover different years", a.model, b.model)));
    }
    let ea = ForecastSet::new(&a.model, a.predictions.select_units(&common)?).errors(realized)?;
    let eb = ForecastSet::new(&b.model, b.predictions.select_units(&common)?).errors(realized)?;
    let mut res = dm_test(&ea, &eb)?;
    res.model_a = a.model.clone();
    res.model_b = b.model.clone();
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub model: String,
    pub unit_ids: Vec<String>,
    pub n_units: usize,
    /// Cross-sectional mean of per-unit RMSE, standardized units.
    pub rmse_norm: f64,
    /// Cross-sectional median of per-unit RMSE on the original scale.
    pub rmse_orig_median: f64,
    pub r2: f64,
    pub rmse_quartiles: Quartiles,
    pub top1_share: f64,
    pub per_year_rmse: Vec<(i32, f64)>,
    pub prediction_range: (f64, f64),
    pub realized_range: (f64, f64),
    pub per_unit_rmse: Vec<f64>,
    pub per_unit_rmse_orig: Vec<f64>,
}

fn range(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Accuracy of `forecast` against the realized standardized panel; `stats`
/// maps both back to the original scale for the euro-denominated column.
pub fn accuracy(forecast: &ForecastSet, realized: &Panel, stats: &ScalingStats) -> Result<AccuracyReport> {
    let pred = &forecast.predictions;
    let real = align(realized, pred)?;
    let stats = stats.select_units(pred.unit_ids()).map_err(|e| Error::UnitMismatch(e.to_string()))?;
    let n = pred.n_units();
    let t = pred.n_years();
    if n == 0 || t == 0 {
        return Err(Error::Shape("empty forecast set".into()));
    }

    let pred_orig = crate::panel::destandardize(pred, &stats)?;
    let real_orig = crate::panel::destandardize(&real, &stats)?;

    let mut per_unit_sse = Vec::with_capacity(n);
    let mut per_unit_rmse = Vec::with_capacity(n);
    let mut per_unit_rmse_orig = Vec::with_capacity(n);
    for i in 0..n {
        let sse: f64 = pred.row(i).iter().zip(real.row(i)).map(|(p, r)| (p - r) * (p - r)).sum();
        let sse_orig: f64 = pred_orig.row(i).iter().zip(real_orig.row(i)).map(|(p, r)| (p - r) * (p - r)).sum();
        per_unit_sse.push(sse);
        per_unit_rmse.push((sse / t as f64).sqrt());
        per_unit_rmse_orig.push((sse_orig / t as f64).sqrt());
    }

    let sse_total: f64 = per_unit_sse.iter().sum();
    let real_mean = real.values().iter().sum::<f64>() / (n * t) as f64;
    let sst: f64 = real.values().iter().map(|v| (v - real_mean) * (v - real_mean)).sum();
    let r2 = 1.0 - sse_total / sst;

    let k = (0.01 * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        per_unit_sse[b].total_cmp(&per_unit_sse[a]).then_with(|| pred.unit_ids()[a].cmp(&pred.unit_ids()[b]))
    });
    let top1_share = if sse_total > 0.0 {
        order[..k].iter().map(|&i| per_unit_sse[i]).sum::<f64>() / sse_total
    } else {
        k as f64 / n as f64
    };

    let per_year_rmse = (0..t)
        .map(|c| {
            let mse = (0..n).map(|i| (pred.get(i, c) - real.get(i, c)).powi(2)).sum::<f64>() / n as f64;
            (pred.years()[c], mse.sqrt())
        })
        .collect();

    Ok(AccuracyReport {
        model: forecast.model.clone(),
        unit_ids: pred.unit_ids().to_vec(),
        n_units: n,
        rmse_norm: per_unit_rmse.iter().sum::<f64>() / n as f64,
        rmse_orig_median: Quartiles::of(&per_unit_rmse_orig).median,
        r2,
        rmse_quartiles: Quartiles::of(&per_unit_rmse),
        top1_share,
        per_year_rmse,
        prediction_range: range(pred.values()),
        realized_range: range(real.values()),
        per_unit_rmse,
        per_unit_rmse_orig,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dominance {
    pub a: Quartiles,
    pub b: Quartiles,
    /// A's upper quartile lies below B's lower quartile.
    pub a_dominates: bool,
}

pub fn dominance_summary(a: &AccuracyReport, b: &AccuracyReport) -> Dominance {
    Dominance { a: a.rmse_quartiles, b: b.rmse_quartiles, a_dominates: a.rmse_quartiles.p75 < b.rmse_quartiles.p25 }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub rmse_norm: f64,
    pub rmse_orig_median: f64,
    pub r2: f64,
    /// DM against the reference model; `None` for the reference itself.
    pub dm: Option<DmResult>,
}

impl ReportRow {
    pub fn new(report: &AccuracyReport, dm: Option<DmResult>) -> Self {
        Self {
            model: report.model.clone(),
            rmse_norm: report.rmse_norm,
            rmse_orig_median: report.rmse_orig_median,
            r2: report.r2,
            dm,
        }
    }

    fn dm_cell(&self) -> String {
        match &self.dm {
            None => "--".to_string(),
            Some(dm) => {
                let stars = if dm.p_value < 0.01 { "***" } else { "" };
                format!("{:+.2}{stars}", dm.statistic)
            }
        }
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["Model", "RMSE (norm.)", "RMSE (orig., median)", "R2", "DM vs"];

/// Aligned plain-text table: model, RMSE norm., original-scale median RMSE, R², DM vs reference.
pub fn render_table(rows: &[ReportRow], reference: &str) -> String {
    let header = [
        REPORT_COLUMNS[0].to_string(),
        REPORT_COLUMNS[1].to_string(),
        REPORT_COLUMNS[2].to_string(),
        REPORT_COLUMNS[3].to_string(),
        format!("{} {reference}", REPORT_COLUMNS[4]),
    ];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                format!("{:.3}", r.rmse_norm),
                format!("{:.3}", r.rmse_orig_median),
                format!("{:+.3}", r.r2),
                r.dm_cell(),
            ]
        })
        .collect();
    let mut width = header.clone().map(|h| h.len());
    for row in &body {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String; 5]| {
        let _ = write!(out, "{:<w$}", cells[0], w = width[0]);
        for (k, cell) in cells.iter().enumerate().skip(1) {
            let _ = write!(out, "  {:>w$}", cell, w = width[k]);
        }
        out.push('\n');
    };
    line(&mut out, &header);
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * 4));
    out.push('\n');
    for row in &body {
        line(&mut out, row);
    }
    out
}

/// CSV with the same five columns as the text table.
pub fn write_report_csv<W: Write>(rows: &[ReportRow], reference: &str, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["model", "rmse_norm", "rmse_orig_median", "r2", &format!("dm_vs_{reference}")])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            format!("{:?}", r.rmse_norm),
            format!("{:?}", r.rmse_orig_median),
            format!("{:?}", r.r2),
            r.dm_cell(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Full pairwise DM matrix as long CSV: `model_a,model_b,n,mean_diff,sd_diff,dm,p_value`.
pub fn write_dm_matrix<W: Write>(results: &[DmResult], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["model_a", "model_b", "n", "mean_diff", "sd_diff", "dm", "p_value"])?;
    for r in results {
        w.write_record([
            r.model_a.clone(),
            r.model_b.clone(),
            r.n.to_string(),
            format!("{:?}", r.mean_diff),
            format!("{:?}", r.sd_diff),
            format!("{:?}", r.statistic),
            format!("{:?}", r.p_value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Variable;

    fn panel(rows: &[&[f64]], years: &[i32]) -> Panel {
        Panel::from_rows(
            (0..rows.len()).map(|i| format!("u{i}")).collect(),
            years.to_vec(),
            &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn unit_stats(n: usize) -> ScalingStats {
        ScalingStats {
            unit_ids: (0..n).map(|i| format!("u{i}")).collect(),
            mean: vec![0.0; n],
            sd: vec![1.0; n],
            variable: Variable::Income,
        }
    }

    #[test]
    fn identical_errors_give_zero_statistic() {
        let e = panel(&[&[0.1, 0.5], &[-1.0, 0.2], &[0.0, 0.3]], &[1, 2]);
        let r = dm_test(&e, &e).unwrap();
        assert_eq!((r.mean_diff, r.statistic, r.p_value), (0.0, 0.0, 1.0));
        assert!(r.zero_variance);
    }

    #[test]
    fn sign_convention_and_zero_variance() {
        let a = panel(&[&[2.0, 2.0], &[2.0, 2.0], &[2.0, 2.0]], &[1, 2]);
        let b = panel(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]], &[1, 2]);
        let r = dm_test(&a, &b).unwrap();
        assert!(r.zero_variance && r.statistic == f64::INFINITY && r.p_value == 0.0);
        let b = panel(&[&[1.0, 1.0], &[1.2, 0.9], &[0.5, 1.1]], &[1, 2]);
        let r = dm_test(&a, &b).unwrap();
        assert!(r.statistic > 0.0 && !r.zero_variance);
        assert_eq!(dm_test(&b, &a).unwrap().statistic, -r.statistic);
    }

    #[test]
    fn dm_hand_computation() {
        // d = (4-1, 1-0, 0-1) / 1 = (3, 1, -1): mean 1, var 4, DM = 1 / (2 / √3)
        let a = panel(&[&[2.0], &[1.0], &[0.0]], &[1]);
        let b = panel(&[&[1.0], &[0.0], &[1.0]], &[1]);
        let r = dm_test(&a, &b).unwrap();
        assert_eq!(r.mean_diff, 1.0);
        assert_eq!(r.sd_diff, 2.0);
        assert!((r.statistic - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((r.p_value - 2.0 * (1.0 - normal_cdf(r.statistic))).abs() < 1e-15);
    }

    #[test]
    fn normal_cdf_reference_values() {
        // references from 30-digit mpmath
        let cases = [
            (0.0, 0.5),
            (1.959963984540054, 0.974999999999999986234748637706),
            (-3.0, 0.0013498980316300945266518147676),
            (6.5, 0.999999999959839994161408821917),
        ];
        for (x, expected) in cases {
            assert!((normal_cdf(x) - expected).abs() < 1e-10, "{x}");
        }
    }

    #[test]
    fn perfect_forecast_report() {
        let realized = panel(&[&[0.0, 1.0, 2.0], &[1.0, -1.0, 0.5]], &[1, 2, 3]);
        let f = ForecastSet::new("m", realized.select_columns(1..3));
        let r = accuracy(&f, &realized, &unit_stats(2)).unwrap();
        assert_eq!((r.rmse_norm, r.r2), (0.0, 1.0));
        assert_eq!(r.top1_share, 0.5);
    }

    #[test]
    fn mean_forecast_has_zero_r2() {
        let realized = panel(&[&[1.0, 3.0], &[-2.0, 0.0]], &[1, 2]);
        let f = ForecastSet::new("m", realized.map_cells(|_, _, _| 0.5));
        assert_eq!(accuracy(&f, &realized, &unit_stats(2)).unwrap().r2, 0.0);
    }

    #[test]
    fn two_unit_hand_fixture() {
        // u0 errors (1, -1), u1 errors (2, 0); sd (2, 10), means (5, 100)
        let realized = panel(&[&[0.0, 0.0], &[1.0, 1.0]], &[2020, 2021]);
        let pred = panel(&[&[1.0, -1.0], &[3.0, 1.0]], &[2020, 2021]);
        let stats = ScalingStats {
            unit_ids: vec!["u0".into(), "u1".into()],
            mean: vec![5.0, 100.0],
            sd: vec![2.0, 10.0],
            variable: Variable::Income,
        };
        let r = accuracy(&ForecastSet::new("m", pred), &realized, &stats).unwrap();
        assert_eq!(r.per_unit_rmse, vec![1.0, 2f64.sqrt()]);
        assert!((r.rmse_norm - (1.0 + 2f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((r.per_unit_rmse_orig[0] - 2.0).abs() < 1e-12);
        assert!((r.per_unit_rmse_orig[1] - 10.0 * 2f64.sqrt()).abs() < 1e-12);
        // SSE = 2 + 4 = 6, realized mean 0.5, SST = 4 * 0.25 = 1
        assert!((r.r2 - (1.0 - 6.0)).abs() < 1e-15);
        // ceil(0.02) = 1 unit: the larger total squared error 4 of 6
        assert!((r.top1_share - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.per_year_rmse[0], (2020, (5.0f64 / 2.0).sqrt()));
        assert_eq!(r.per_year_rmse[1], (2021, (1.0f64 / 2.0).sqrt()));
        assert_eq!(r.prediction_range, (-1.0, 3.0));
    }

    #[test]
    fn unit_mismatch() {
        let realized = panel(&[&[0.0, 1.0]], &[1, 2]);
        let pred = Panel::from_rows(vec!["zz".into()], vec![1, 2], &[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            accuracy(&ForecastSet::new("m", pred), &realized, &unit_stats(1)),
            Err(Error::UnitMismatch(_))
        ));
    }

    #[test]
    fn dominance() {
        let base = AccuracyReport {
            model: "a".into(),
            unit_ids: vec![],
            n_units: 4,
            rmse_norm: 0.0,
            rmse_orig_median: 0.0,
            r2: 0.0,
            rmse_quartiles: Quartiles { p25: 1.43, median: 1.95, p75: 2.51 },
            top1_share: 0.0,
            per_year_rmse: vec![],
            prediction_range: (0.0, 0.0),
            realized_range: (0.0, 0.0),
            per_unit_rmse: vec![],
            per_unit_rmse_orig: vec![],
        };
        assert!(!dominance_summary(&base, &base).a_dominates);
        let mut gru = base.clone();
        gru.rmse_quartiles = Quartiles { p25: 0.81, median: 1.22, p75: 1.87 };
        assert!(!dominance_summary(&gru, &base).a_dominates);
        let mut shifted = base.clone();
        shifted.rmse_quartiles = Quartiles { p25: 0.43, median: 0.95, p75: 1.51 };
        let mut wide = base.clone();
        wide.rmse_quartiles = Quartiles { p25: 1.6, median: 2.0, p75: 3.0 };
        assert!(dominance_summary(&shifted, &wide).a_dominates);
    }

    #[test]
    fn table_layout() {
        let rows = vec![
            ReportRow { model: "GRU".into(), rmse_norm: 1.482, rmse_orig_median: 1.074, r2: 0.053, dm: None },
            ReportRow {
                model: "PanelFE".into(),
                rmse_norm: 2.052,
                rmse_orig_median: 1.78,
                r2: -0.531,
                dm: Some(DmResult {
                    model_a: "PanelFE".into(),
                    model_b: "GRU".into(),
                    n: 10,
                    mean_diff: 1.0,
                    sd_diff: 1.0,
                    statistic: 39.98,
                    p_value: 0.0,
                    zero_variance: false,
                }),
            },
        ];
        let t = render_table(&rows, "GRU");
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Model") && lines[0].ends_with("DM vs GRU"));
        assert!(lines[2].contains("1.482") && lines[2].contains("+0.053") && lines[2].ends_with("--"));
        assert!(lines[3].ends_with("+39.98***"));
        let mut csv = Vec::new();
        write_report_csv(&rows, "GRU", &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("model,rmse_norm,rmse_orig_median,r2,dm_vs_GRU\n"));
    }
}

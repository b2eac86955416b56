//! The N×T unit-year panel, leakage-safe standardization and descriptive
//! diagnostics.
//!
//! Values are stored row-major: row `i` holds unit `i`'s series over
//! `years`. Scaling statistics are estimated from the training window only,
//! so anything observed in test years cannot reach the standardized inputs.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::{self, Quartiles};

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    unit_ids: Vec<String>,
    years: Vec<i32>,
    values: Vec<f64>,
}

impl Panel {
    /// Builds a panel from row-major values, checking shape, uniqueness and finiteness.
    pub fn new(unit_ids: Vec<String>, years: Vec<i32>, values: Vec<f64>) -> Result<Self> {
        if values.len() != unit_ids.len() * years.len() {
            return Err(Error::Shape(format!(
                "{} values for {} units x {} years",
                values.len(),
                unit_ids.len(),
                years.len()
            )));
        }
        if years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::RaggedYears(format!(
                "years must be strictly increasing with unit step, got {years:?}"
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Parse(format!("duplicate unit id {id:?}")));
            }
        }
        let t = years.len();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                unit: unit_ids[k / t].clone(),
                year: years[k % t],
            });
        }
        Ok(Self { unit_ids, years, values })
    }

    pub fn from_rows(unit_ids: Vec<String>, years: Vec<i32>, rows: &[Vec<f64>]) -> Result<Self> {
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(unit_ids, years, values)
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let t = self.n_years();
        &self.values[i * t..(i + 1) * t]
    }

    pub fn get(&self, i: usize, col: usize) -> f64 {
        self.values[i * self.n_years() + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_years().max(1))
    }

    /// Cross-section at column `col` (one value per unit).
    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_units()).map(|i| self.get(i, col)).collect()
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    /// Applies `f(unit, col, value)` to every cell.
    pub fn map_cells(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Panel {
        let t = self.n_years();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(k / t, k % t, v))
            .collect();
        Panel { unit_ids: self.unit_ids.clone(), years: self.years.clone(), values }
    }

    /// Restricts to the given unit ids, in the given order.
    pub fn select_units(&self, ids: &[String]) -> Result<Panel> {
        let index: HashMap<&str, usize> =
            self.unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let mut values = Vec::with_capacity(ids.len() * self.n_years());
        for id in ids {
            let &i = index.get(id.as_str()).ok_or_else(|| Error::UnknownUnit(id.clone()))?;
            values.extend_from_slice(self.row(i));
        }
        Ok(Panel { unit_ids: ids.to_vec(), years: self.years.clone(), values })
    }

    /// Restricts to a contiguous column range.
    pub fn select_columns(&self, cols: Range<usize>) -> Panel {
        let values = self.rows().flat_map(|r| r[cols.clone()].iter().copied()).collect();
        Panel {
            unit_ids: self.unit_ids.clone(),
            years: self.years[cols].to_vec(),
            values,
        }
    }

    pub fn same_shape(&self, other: &Panel) -> bool {
        self.unit_ids == other.unit_ids && self.years == other.years
    }
}

/// Column names for the long-format panel CSV.
#[derive(Debug, Clone, PartialEq, Eq, serde::Deserialize, Serialize)]
pub struct CsvSchema {
    pub unit: String,
    pub year: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { unit: "unit_id".into(), year: "year".into(), value: "value".into() }
    }
}

/// Reads a long-format `unit_id,year,value` CSV into a rectangular panel.
///
/// Units keep first-appearance order; years are sorted. A year axis that is
/// not a unit-step range is `RaggedYears`; any absent unit-year on a valid
/// year axis is `MissingCell`.
pub fn ingest_panel<R: Read>(reader: R, schema: &CsvSchema) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name:?}")))
    };
    let (cu, cy, cv) = (col(&schema.unit)?, col(&schema.year)?, col(&schema.value)?);

    let mut units: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, i32), f64> = HashMap::new();
    let mut years = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let unit = rec.get(cu).unwrap_or_default().to_string();
        let year: i32 = rec
            .get(cy)
            .unwrap_or_default()
            .parse()
            .map_err(|e| Error::Parse(format!("bad year for unit {unit:?}: {e}")))?;
        let raw = rec.get(cv).unwrap_or_default();
        let value: f64 = raw
            .parse()
            .map_err(|e| Error::Parse(format!("bad value {raw:?} for {unit}/{year}: {e}")))?;
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { unit, year });
        }
        let i = *unit_index.entry(unit.clone()).or_insert_with(|| {
            units.push(unit.clone());
            units.len() - 1
        });
        if cells.insert((i, year), value).is_some() {
            return Err(Error::DuplicateCell { unit, year });
        }
        years.insert(year);
    }
    let years: Vec<i32> = years.into_iter().collect();
    if years.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::RaggedYears(format!("observed years {years:?} are not contiguous")));
    }
    let mut values = Vec::with_capacity(units.len() * years.len());
    for (i, unit) in units.iter().enumerate() {
        for &year in &years {
            match cells.get(&(i, year)) {
                Some(&v) => values.push(v),
                None => return Err(Error::MissingCell { unit: unit.clone(), year }),
            }
        }
    }
    Panel::new(units, years, values)
}

/// Writes a panel in long format with the default schema.
pub fn write_panel<W: Write>(panel: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "year", "value"])?;
    for (i, id) in panel.unit_ids.iter().enumerate() {
        for (c, year) in panel.years.iter().enumerate() {
            w.write_record([id.as_str(), &year.to_string(), &panel.get(i, c).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A train window followed immediately by a test window (inclusive year bounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_start: i32,
    pub train_end: i32,
    pub test_end: i32,
}

impl SplitSpec {
    pub fn new(train_start: i32, train_end: i32, test_end: i32) -> Result<Self> {
        let s = Self { train_start, train_end, test_end };
        if s.train_len() < 3 {
            return Err(Error::InvalidSplit(format!(
                "train window {train_start}..={train_end} has fewer than 3 years"
            )));
        }
        if test_end <= train_end {
            return Err(Error::InvalidSplit(format!(
                "test window must follow train end {train_end}, got end {test_end}"
            )));
        }
        Ok(s)
    }

    /// Train on everything but the last `test_len` years of the panel.
    pub fn last_years(panel: &Panel, test_len: usize) -> Result<Self> {
        let years = panel.years();
        if years.len() <= test_len {
            return Err(Error::InvalidSplit("test window covers the whole panel".into()));
        }
        Self::new(years[0], years[years.len() - 1 - test_len], years[years.len() - 1])
    }

    pub fn train_len(&self) -> usize {
        (self.train_end - self.train_start + 1).max(0) as usize
    }

    pub fn test_len(&self) -> usize {
        (self.test_end - self.train_end).max(0) as usize
    }

    pub fn test_years(&self) -> Vec<i32> {
        (self.train_end + 1..=self.test_end).collect()
    }

    pub fn validate(&self, panel: &Panel) -> Result<()> {
        if panel.year_index(self.train_start).is_none() || panel.year_index(self.test_end).is_none() {
            return Err(Error::InvalidSplit(format!(
                "split {}..={} / ..={} not contained in panel years {:?}..={:?}",
                self.train_start,
                self.train_end,
                self.test_end,
                panel.years().first(),
                panel.years().last()
            )));
        }
        Ok(())
    }

    pub fn train_cols(&self, panel: &Panel) -> Result<Range<usize>> {
        self.validate(panel)?;
        let s = panel.year_index(self.train_start).unwrap();
        Ok(s..s + self.train_len())
    }

    pub fn test_cols(&self, panel: &Panel) -> Result<Range<usize>> {
        let train = self.train_cols(panel)?;
        Ok(train.end..train.end + self.test_len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Nightlights,
    Income,
    Other,
}

/// Per-unit train-window mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStats {
    pub unit_ids: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub variable: Variable,
}

impl ScalingStats {
    pub fn select_units(&self, ids: &[String]) -> Result<ScalingStats> {
        let index: HashMap<&str, usize> =
            self.unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let mut mean = Vec::with_capacity(ids.len());
        let mut sd = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = index.get(id.as_str()).ok_or_else(|| Error::UnknownUnit(id.clone()))?;
            mean.push(self.mean[i]);
            sd.push(self.sd[i]);
        }
        Ok(ScalingStats { unit_ids: ids.to_vec(), mean, sd, variable: self.variable })
    }
}

impl ScalingStats {
    /// `unit_id,mean,sd` in shortest round-trip decimal.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["unit_id", "mean", "sd"])?;
        for ((id, m), s) in self.unit_ids.iter().zip(&self.mean).zip(&self.sd) {
            w.write_record([id.clone(), format!("{m:?}"), format!("{s:?}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, variable: Variable) -> Result<ScalingStats> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = ScalingStats { unit_ids: Vec::new(), mean: Vec::new(), sd: Vec::new(), variable };
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c).unwrap_or_default().parse::<f64>().map_err(|e| Error::Parse(format!("scaling row {}: {e}", k + 1)))
            };
            out.unit_ids.push(rec.get(0).unwrap_or_default().to_string());
            out.mean.push(num(1)?);
            out.sd.push(num(2)?);
        }
        Ok(out)
    }
}

pub fn fit_scaling(panel: &Panel, split: &SplitSpec, variable: Variable) -> Result<ScalingStats> {
    let cols = split.train_cols(panel)?;
    let mut mean = Vec::with_capacity(panel.n_units());
    let mut sd = Vec::with_capacity(panel.n_units());
    let mut degenerate = Vec::new();
    for (i, row) in panel.rows().enumerate() {
        let train = &row[cols.clone()];
        let m = stats::mean(train);
        let s = stats::sample_sd(train);
        if !(s > 0.0) {
            degenerate.push(panel.unit_ids[i].clone());
        }
        mean.push(m);
        sd.push(s);
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateUnit(degenerate));
    }
    Ok(ScalingStats { unit_ids: panel.unit_ids.clone(), mean, sd, variable })
}

fn check_units(panel: &Panel, stats: &ScalingStats) -> Result<()> {
    if panel.unit_ids != stats.unit_ids {
        return Err(Error::UnitMismatch("panel and scaling stats unit order differ".into()));
    }
    Ok(())
}

pub fn standardize(panel: &Panel, stats: &ScalingStats) -> Result<Panel> {
    check_units(panel, stats)?;
    Ok(panel.map_cells(|i, _, v| (v - stats.mean[i]) / stats.sd[i]))
}

pub fn destandardize(panel: &Panel, stats: &ScalingStats) -> Result<Panel> {
    check_units(panel, stats)?;
    Ok(panel.map_cells(|i, _, v| v * stats.sd[i] + stats.mean[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsSummary {
    pub pooled_corr: f64,
    pub corr_quartiles: Quartiles,
    pub share_corr_above_0_3: f64,
    pub share_corr_above_0_5: f64,
    pub share_corr_negative: f64,
    pub ar1_quartiles: Quartiles,
    pub n_degenerate: usize,
}

/// Within-unit nightlight/income correlation and income AR(1) persistence.
///
/// Per-unit entries are `None` for zero-variance series; those units are
/// listed in `degenerate` and excluded from the summary quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub unit_ids: Vec<String>,
    pub within_corr: Vec<Option<f64>>,
    pub ar1: Vec<Option<f64>>,
    pub degenerate: Vec<String>,
    pub summary: DiagnosticsSummary,
}

pub fn diagnostics(nl: &Panel, income: &Panel) -> Result<DiagnosticsReport> {
    if !nl.same_shape(income) {
        return Err(Error::UnitMismatch("nightlight and income panels are not aligned".into()));
    }
    let mut within_corr = Vec::with_capacity(nl.n_units());
    let mut ar1 = Vec::with_capacity(nl.n_units());
    let mut degenerate = Vec::new();
    for i in 0..nl.n_units() {
        let c = stats::pearson(nl.row(i), income.row(i));
        let phi = stats::ar1_coefficient(income.row(i));
        if c.is_none() || phi.is_none() {
            degenerate.push(nl.unit_ids[i].clone());
        }
        within_corr.push(c);
        ar1.push(phi);
    }
    let corrs: Vec<f64> = within_corr.iter().flatten().copied().collect();
    let phis: Vec<f64> = ar1.iter().flatten().copied().collect();
    if corrs.is_empty() || phis.is_empty() {
        return Err(Error::DegenerateUnit(degenerate));
    }
    let share = |pred: fn(f64) -> bool| corrs.iter().filter(|&&c| pred(c)).count() as f64 / corrs.len() as f64;
    let summary = DiagnosticsSummary {
        pooled_corr: stats::pearson(nl.values(), income.values()).unwrap_or(f64::NAN),
        corr_quartiles: Quartiles::of(&corrs),
        share_corr_above_0_3: share(|c| c > 0.3),
        share_corr_above_0_5: share(|c| c > 0.5),
        share_corr_negative: share(|c| c < 0.0),
        ar1_quartiles: Quartiles::of(&phis),
        n_degenerate: degenerate.len(),
    };
    Ok(DiagnosticsReport { unit_ids: nl.unit_ids.clone(), within_corr, ar1, degenerate, summary })
}

impl DiagnosticsReport {
    /// Per-unit CSV: `unit_id,within_corr,ar1,degenerate`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "within_corr", "ar1", "degenerate"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, id) in self.unit_ids.iter().enumerate() {
            let flag = self.within_corr[i].is_none() || self.ar1[i].is_none();
            w.write_record([id.clone(), fmt(self.within_corr[i]), fmt(self.ar1[i]), (flag as u8).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i}")).collect()
    }

    const SMALL: &str = "unit_id,year,value\nA,2019,1\nA,2020,2\nB,2019,3\nB,2020,4\nC,2019,5\nC,2020,6\n";

    #[test]
    fn ingest_minimal_rectangle() {
        let p = ingest_panel(SMALL.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!((p.n_units(), p.n_years()), (3, 2));
        assert_eq!(p.row(1), &[3.0, 4.0]);
        assert_eq!(p.years(), &[2019, 2020]);
    }

    #[test]
    fn ingest_errors() {
        let missing = SMALL.replace("B,2020,4\n", "");
        assert!(matches!(
            ingest_panel(missing.as_bytes(), &CsvSchema::default()),
            Err(Error::MissingCell { ref unit, year: 2020 }) if unit == "B"
        ));
        let dup = format!("{SMALL}A,2019,7\n");
        assert!(matches!(ingest_panel(dup.as_bytes(), &CsvSchema::default()), Err(Error::DuplicateCell { .. })));
        let nan = SMALL.replace("C,2020,6", "C,2020,NaN");
        assert!(matches!(ingest_panel(nan.as_bytes(), &CsvSchema::default()), Err(Error::NonFiniteValue { .. })));
        let ragged = "unit_id,year,value\nA,2019,1\nA,2021,2\n";
        assert!(matches!(ingest_panel(ragged.as_bytes(), &CsvSchema::default()), Err(Error::RaggedYears(_))));
    }

    #[test]
    fn ingest_custom_schema_and_order() {
        let csv = "year,muni,nl\n2020,Z,2\n2019,Z,1\n2019,Y,3\n2020,Y,4\n";
        let schema = CsvSchema { unit: "muni".into(), year: "year".into(), value: "nl".into() };
        let p = ingest_panel(csv.as_bytes(), &schema).unwrap();
        assert_eq!(p.unit_ids(), &["Z".to_string(), "Y".to_string()]);
        assert_eq!(p.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn write_then_ingest_round_trips() {
        let p = Panel::new(ids(2), vec![2000, 2001, 2002], vec![0.1, -2.5, 1e-17, 3.0, 4.25, 1e300]).unwrap();
        let mut buf = Vec::new();
        write_panel(&p, &mut buf).unwrap();
        assert_eq!(ingest_panel(buf.as_slice(), &CsvSchema::default()).unwrap(), p);
    }

    #[test]
    fn split_rejects_short_training() {
        assert!(SplitSpec::new(2019, 2020, 2021).is_err());
        assert!(SplitSpec::new(2018, 2020, 2020).is_err());
        let s = SplitSpec::new(2012, 2019, 2021).unwrap();
        assert_eq!((s.train_len(), s.test_len()), (8, 2));
        assert_eq!(s.test_years(), vec![2020, 2021]);
    }

    #[test]
    fn scaling_hand_values() {
        let p = Panel::new(ids(1), vec![1, 2, 3, 4], vec![2.0, 4.0, 6.0, 10.0]).unwrap();
        let split = SplitSpec::new(1, 3, 4).unwrap();
        let s = fit_scaling(&p, &split, Variable::Income).unwrap();
        assert_eq!((s.mean[0], s.sd[0]), (4.0, 2.0));
        let z = standardize(&p, &s).unwrap();
        assert_eq!(z.row(0), &[-1.0, 0.0, 1.0, 3.0]);
        let back = destandardize(&z, &s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn destandardize_hand_values() {
        let stats = ScalingStats { unit_ids: ids(1), mean: vec![29.0], sd: vec![2.0], variable: Variable::Income };
        let z = Panel::new(ids(1), vec![1, 2], vec![0.0, -0.49]).unwrap();
        let raw = destandardize(&z, &stats).unwrap();
        assert_eq!(raw.row(0)[0], 29.0);
        assert!((raw.row(0)[1] - (29.0 - 0.49 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_unit_is_degenerate() {
        let p = Panel::new(ids(2), vec![1, 2, 3, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 9.0]).unwrap();
        let split = SplitSpec::new(1, 3, 4).unwrap();
        match fit_scaling(&p, &split, Variable::Nightlights) {
            Err(Error::DegenerateUnit(units)) => assert_eq!(units, vec!["u1".to_string()]),
            other => panic!("expected DegenerateUnit, got {other:?}"),
        }
    }

    #[test]
    fn exact_linear_relation_has_unit_correlation() {
        let nl = Panel::new(ids(1), vec![1, 2, 3, 4, 5], vec![1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
        let inc = nl.map_cells(|_, _, v| 2.0 * v);
        let d = diagnostics(&nl, &inc).unwrap();
        assert!((d.within_corr[0].unwrap() - 1.0).abs() < 1e-15);
        assert!(d.degenerate.is_empty());
    }

    #[test]
    fn degenerate_units_are_flagged_not_dropped() {
        let nl = Panel::new(ids(2), vec![1, 2, 3, 4], vec![1.0, 2.0, 4.0, 3.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let inc = Panel::new(ids(2), vec![1, 2, 3, 4], vec![1.0, 3.0, 2.0, 5.0, 1.0, 2.0, 1.5, 3.0]).unwrap();
        let d = diagnostics(&nl, &inc).unwrap();
        assert_eq!(d.within_corr.len(), 2);
        assert!(d.within_corr[1].is_none());
        assert_eq!(d.degenerate, vec!["u1".to_string()]);
        assert_eq!(d.summary.n_degenerate, 1);
    }
}

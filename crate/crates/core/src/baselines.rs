//! Non-spatial linear benchmarks on standardized panels: persistence, pooled
//! fixed effects, per-unit OLS and per-unit ARDL(1,0).

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{Panel, SplitSpec};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LinearModel {
    Persistence,
    PanelFe,
    OlsPerUnit,
    Ardl,
}

impl LinearModel {
    pub fn name(self) -> &'static str {
        match self {
            LinearModel::Persistence => "Persistence",
            LinearModel::PanelFe => "PanelFE",
            LinearModel::OlsPerUnit => "OLSperUnit",
            LinearModel::Ardl => "ARDL",
        }
    }
}

impl std::str::FromStr for LinearModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [LinearModel::Persistence, LinearModel::PanelFe, LinearModel::OlsPerUnit, LinearModel::Ardl]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown linear model {s:?}")))
    }
}

/// Fitted coefficients. Per-unit vectors are present only for the models that
/// use them; `fallback[i]` marks units whose regression was degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub model: LinearModel,
    pub unit_ids: Vec<String>,
    pub slope: Option<f64>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    pub fallback: Vec<bool>,
}

fn aligned(y: &Panel, x: &Panel) -> Result<()> {
    if !y.same_shape(x) {
        return Err(Error::UnitMismatch("income and nightlight panels are not aligned".into()));
    }
    Ok(())
}

pub fn fit_persistence(y: &Panel) -> LinearFit {
    LinearFit {
        model: LinearModel::Persistence,
        unit_ids: y.unit_ids().to_vec(),
        slope: None,
        alpha: None,
        beta: None,
        phi: None,
        fallback: vec![false; y.n_units()],
    }
}

/// `ŷ_t = ỹ_{t-1}` on realized lagged values for every test year.
pub fn persistence_forecast(y: &Panel, split: &SplitSpec) -> Result<Panel> {
    predict(&fit_persistence(y), y, y, split, false)
}

pub fn fit_panel_fe(y: &Panel, x: &Panel, split: &SplitSpec) -> Result<LinearFit> {
    aligned(y, x)?;
    let cols = split.train_cols(y)?;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut means = Vec::with_capacity(y.n_units());
    for i in 0..y.n_units() {
        let yr = &y.row(i)[cols.clone()];
        let xr = &x.row(i)[cols.clone()];
        let (my, mx) = (stats::mean(yr), stats::mean(xr));
        for (a, b) in xr.iter().zip(yr) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
        }
        means.push((my, mx));
    }
    if !(sxx > 0.0) {
        return Err(Error::SingularRegressor("nightlights have zero within-unit variance".into()));
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        model: LinearModel::PanelFe,
        unit_ids: y.unit_ids().to_vec(),
        slope: Some(slope),
        alpha: Some(means.iter().map(|(my, mx)| my - slope * mx).collect()),
        beta: None,
        phi: None,
        fallback: vec![false; y.n_units()],
    })
}

/// Per-unit `ỹ = α_i + β_i x̃`; units with constant nightlights fall back to their mean.
pub fn fit_ols_per_unit(y: &Panel, x: &Panel, split: &SplitSpec) -> Result<LinearFit> {
    aligned(y, x)?;
    let cols = split.train_cols(y)?;
    let n = y.n_units();
    let (mut alpha, mut beta, mut fallback) = (Vec::with_capacity(n), Vec::with_capacity(n), vec![false; n]);
    for i in 0..n {
        let yr = &y.row(i)[cols.clone()];
        match stats::simple_ols(&x.row(i)[cols.clone()], yr) {
            Some((a, b)) => {
                alpha.push(a);
                beta.push(b);
            }
            None => {
                alpha.push(stats::mean(yr));
                beta.push(0.0);
                fallback[i] = true;
            }
        }
    }
    Ok(LinearFit {
        model: LinearModel::OlsPerUnit,
        unit_ids: y.unit_ids().to_vec(),
        slope: None,
        alpha: Some(alpha),
        beta: Some(beta),
        phi: None,
        fallback,
    })
}

/// Per-unit `ỹ_t = α_i + φ_i ỹ_{t-1} + β_i x̃_t` over train years after the first.
///
/// Collinear units fall back to intercept + lag, then to intercept only.
pub fn fit_ardl(y: &Panel, x: &Panel, split: &SplitSpec) -> Result<LinearFit> {
    aligned(y, x)?;
    let cols = split.train_cols(y)?;
    let n = y.n_units();
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    let mut fallback = vec![false; n];
    let m = cols.len() - 1;
    let ones = vec![1.0; m];
    for i in 0..n {
        let yr = &y.row(i)[cols.clone()];
        let xr = &x.row(i)[cols.clone()];
        let target = &yr[1..];
        let lag = &yr[..m];
        let cur = &xr[1..];
        match linalg::least_squares(&[&ones, lag, cur], target) {
            Ok(b) => {
                alpha.push(b[0]);
                phi.push(b[1]);
                beta.push(b[2]);
            }
            Err(_) => {
                fallback[i] = true;
                let (a, p) = stats::simple_ols(lag, target).unwrap_or((stats::mean(target), 0.0));
                alpha.push(a);
                phi.push(p);
                beta.push(0.0);
            }
        }
    }
    Ok(LinearFit {
        model: LinearModel::Ardl,
        unit_ids: y.unit_ids().to_vec(),
        slope: None,
        alpha: Some(alpha),
        beta: Some(beta),
        phi: Some(phi),
        fallback,
    })
}

impl LinearFit {
    fn coefs(&self, i: usize) -> (f64, f64, f64) {
        let at = |v: &Option<Vec<f64>>| v.as_ref().map_or(0.0, |v| v[i]);
        let beta = self.slope.unwrap_or_else(|| at(&self.beta));
        match self.model {
            LinearModel::Persistence => (0.0, 0.0, 1.0),
            _ => (at(&self.alpha), beta, at(&self.phi)),
        }
    }

    /// Per-unit coefficient dump: `unit_id,alpha,beta,phi,flags`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["unit_id", "alpha", "beta", "phi", "flags"])?;
        for (i, id) in self.unit_ids.iter().enumerate() {
            let (a, b, p) = self.coefs(i);
            let flag = if self.fallback[i] { "fallback" } else { "" };
            w.write_record([id.clone(), format!("{a:?}"), format!("{b:?}"), format!("{p:?}"), flag.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a coefficient dump written by `write_csv`.
    pub fn read_csv<R: std::io::Read>(model: LinearModel, r: R) -> Result<LinearFit> {
        let mut rdr = csv::Reader::from_reader(r);
        let (mut ids, mut alpha, mut beta, mut phi, mut fallback) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or_default()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("coefficient row {}: {e}", k + 1)))
            };
            ids.push(rec.get(0).unwrap_or_default().to_string());
            alpha.push(num(1)?);
            beta.push(num(2)?);
            phi.push(num(3)?);
            fallback.push(rec.get(4) == Some("fallback"));
        }
        let fit = |slope, alpha, beta, phi| LinearFit { model, unit_ids: ids.clone(), slope, alpha, beta, phi, fallback: fallback.clone() };
        Ok(match model {
            LinearModel::Persistence => fit(None, None, None, None),
            LinearModel::PanelFe => fit(Some(beta.first().copied().unwrap_or(0.0)), Some(alpha), None, None),
            LinearModel::OlsPerUnit => fit(None, Some(alpha), Some(beta), None),
            LinearModel::Ardl => fit(None, Some(alpha), Some(beta), Some(phi)),
        })
    }
}

/// Test-window predictions. Lagged income is the realized value unless
/// `recursive_lags` is set, in which case later test years use the model's
/// own previous prediction.
pub fn predict(fit: &LinearFit, y: &Panel, x: &Panel, split: &SplitSpec, recursive_lags: bool) -> Result<Panel> {
    aligned(y, x)?;
    if fit.unit_ids.as_slice() != y.unit_ids() {
        return Err(Error::UnitMismatch("fit and panel units differ".into()));
    }
    let test = split.test_cols(y)?;
    let t = test.len();
    let mut values = Vec::with_capacity(y.n_units() * t);
    for i in 0..y.n_units() {
        let (a, b, p) = fit.coefs(i);
        let uses_lag = matches!(fit.model, LinearModel::Persistence | LinearModel::Ardl);
        let mut prev_pred = None;
        for c in test.clone() {
            let lag = match (recursive_lags, prev_pred) {
                (true, Some(v)) => v,
                _ => y.get(i, c - 1),
            };
            let pred = match fit.model {
                LinearModel::Persistence => lag,
                _ => a + b * x.get(i, c) + if uses_lag { p * lag } else { 0.0 },
            };
            values.push(pred);
            prev_pred = Some(pred);
        }
    }
    Panel::new(y.unit_ids().to_vec(), split.test_years(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(rows: &[&[f64]]) -> Panel {
        let t = rows[0].len();
        Panel::from_rows(
            (0..rows.len()).map(|i| format!("u{i}")).collect(),
            (2012..2012 + t as i32).collect(),
            &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn split5() -> SplitSpec {
        SplitSpec::new(2012, 2015, 2016).unwrap()
    }

    #[test]
    fn persistence_uses_last_realized_value() {
        let y = panel(&[&[0.0, 0.1, 0.2, 0.3, 0.9]]);
        let f = persistence_forecast(&y, &split5()).unwrap();
        assert_eq!(f.row(0), &[0.3]);
        let c = panel(&[&[1.5; 5]]);
        assert_eq!(persistence_forecast(&c, &split5()).unwrap().row(0), &[1.5]);
    }

    #[test]
    fn panel_fe_exact_relation() {
        let x = panel(&[&[0.1, -0.4, 0.7, 0.2, 1.0], &[2.0, 1.0, 0.5, -1.0, 0.0]]);
        let y = x.map_cells(|i, _, v| 2.0 * v + [3.0, -1.0][i]);
        let fit = fit_panel_fe(&y, &x, &split5()).unwrap();
        assert!((fit.slope.unwrap() - 2.0).abs() < 1e-14);
        let pred = predict(&fit, &y, &x, &split5(), false).unwrap();
        assert!((pred.get(0, 0) - y.get(0, 4)).abs() < 1e-13);
        assert!((pred.get(1, 0) - y.get(1, 4)).abs() < 1e-13);
    }

    #[test]
    fn panel_fe_constant_nightlights_singular() {
        let x = panel(&[&[1.0; 5], &[2.0; 5]]);
        let y = panel(&[&[0.0, 1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 1.0, 0.0, 1.0]]);
        assert!(matches!(fit_panel_fe(&y, &x, &split5()), Err(Error::SingularRegressor(_))));
    }

    #[test]
    fn ols_per_unit_fallback() {
        let x = panel(&[&[0.0, 1.0, 2.0, 3.0, 4.0], &[1.0; 5]]);
        let y = panel(&[&[1.0, 3.0, 5.0, 7.0, 0.0], &[1.0, 2.0, 3.0, 4.0, 5.0]]);
        let fit = fit_ols_per_unit(&y, &x, &split5()).unwrap();
        assert_eq!(fit.fallback, vec![false, true]);
        assert!((fit.alpha.as_ref().unwrap()[0] - 1.0).abs() < 1e-14);
        assert!((fit.beta.as_ref().unwrap()[0] - 2.0).abs() < 1e-14);
        assert_eq!(fit.alpha.as_ref().unwrap()[1], 2.5);
        let pred = predict(&fit, &y, &x, &split5(), false).unwrap();
        assert!((pred.get(0, 0) - 9.0).abs() < 1e-13);
        assert_eq!(pred.get(1, 0), 2.5);
    }

    #[test]
    fn ardl_y_equals_x() {
        let x = panel(&[&[0.3, -1.2, 0.8, 2.0, -0.5, 1.1]]);
        let y = x.clone();
        let split = SplitSpec::new(2012, 2016, 2017).unwrap();
        let fit = fit_ardl(&y, &x, &split).unwrap();
        assert!((fit.beta.as_ref().unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(fit.phi.as_ref().unwrap()[0].abs() < 1e-12);
        assert!(fit.alpha.as_ref().unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn ardl_nests_persistence_including_recursive() {
        let y = panel(&[&[0.3, -1.2, 0.8, 2.0, -0.5, 1.1], &[1.0, 2.0, 0.0, 1.0, 3.0, -2.0]]);
        let x = panel(&[&[9.0, 1.0, -3.0, 0.2, 4.0, 7.0], &[0.0; 6]]);
        let split = SplitSpec::new(2012, 2015, 2017).unwrap();
        let nested = LinearFit {
            model: LinearModel::Ardl,
            unit_ids: y.unit_ids().to_vec(),
            slope: None,
            alpha: Some(vec![0.0; 2]),
            beta: Some(vec![0.0; 2]),
            phi: Some(vec![1.0; 2]),
            fallback: vec![false; 2],
        };
        for recursive in [false, true] {
            let a = predict(&nested, &y, &x, &split, recursive).unwrap();
            let b = predict(&fit_persistence(&y), &y, &x, &split, recursive).unwrap();
            assert_eq!(a, b);
        }
        let realized = predict(&fit_persistence(&y), &y, &x, &split, false).unwrap();
        assert_eq!(realized.row(0), &[2.0, -0.5]);
        let recursive = predict(&fit_persistence(&y), &y, &x, &split, true).unwrap();
        assert_eq!(recursive.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn coefficient_dump_has_flags() {
        let x = panel(&[&[0.0, 1.0, 2.0, 3.0, 4.0], &[1.0; 5]]);
        let y = panel(&[&[1.0, 3.0, 5.0, 7.0, 0.0], &[1.0, 2.0, 3.0, 4.0, 5.0]]);
        let fit = fit_ols_per_unit(&y, &x, &split5()).unwrap();
        let mut buf = Vec::new();
        fit.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("unit_id,alpha,beta,phi,flags\n"));
        assert!(text.lines().nth(2).unwrap().ends_with("fallback"));
    }
}

//! Seeded synthetic panels with known parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::panel::Panel;
use crate::spatial::solve_reduced_form;

/// Queen-contiguity lattice with `rows × cols` cells, ids `u00000`, … in row-major order.
pub fn make_lattice_graph(rows: usize, cols: usize) -> Result<SpatialGraph> {
    if rows * cols < 2 {
        return Err(Error::EmptyGraph);
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut adjacency = vec![Vec::new(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols {
                        adjacency[idx(r, c)].push(idx(nr as usize, nc as usize));
                    }
                }
            }
        }
    }
    SpatialGraph::new(lattice_ids(rows * cols), adjacency)
}

pub fn make_grid_graph(side: usize) -> Result<SpatialGraph> {
    make_lattice_graph(side, side)
}

fn lattice_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i:05}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dgp {
    Sar,
    Sdm,
    Hetero,
    Ar1,
    RandomWalk,
}

impl std::str::FromStr for Dgp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sar" => Ok(Dgp::Sar),
            "sdm" => Ok(Dgp::Sdm),
            "hetero" | "heterononlinear" => Ok(Dgp::Hetero),
            "ar1" | "purear1" => Ok(Dgp::Ar1),
            "randomwalk" | "rw" => Ok(Dgp::RandomWalk),
            other => Err(Error::Config(format!("unknown DGP {other:?}"))),
        }
    }
}

/// Parameters of a synthetic panel. Grid DGPs use `rows × cols` units;
/// the others use `n` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub dgp: Dgp,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub t: usize,
    pub start_year: i32,
    pub rho: f64,
    pub beta: f64,
    pub theta: f64,
    pub phi: f64,
    pub noise_sd: f64,
    /// Mixture weights of (+linear, −linear, quadratic, flat) links.
    pub link_weights: [f64; 4],
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            dgp: Dgp::Sar,
            n: 400,
            rows: 20,
            cols: 20,
            t: 10,
            start_year: 2012,
            rho: 0.7,
            beta: 0.04,
            theta: 0.0,
            phi: 0.5,
            noise_sd: 0.67,
            link_weights: [0.40, 0.35, 0.15, 0.10],
            seed: 0,
        }
    }
}

impl DgpSpec {
    /// Calibrated defaults for each DGP: the spatial DGPs use a 20×25 lattice
    /// with eight years, the heterogeneous panel 2000 units over ten years.
    pub fn for_dgp(dgp: Dgp) -> Self {
        let base = Self { dgp, ..Default::default() };
        match dgp {
            Dgp::Sar => Self { rows: 20, cols: 25, t: 8, noise_sd: 1.0, ..base },
            Dgp::Sdm => Self { rows: 20, cols: 25, t: 8, theta: 0.05, noise_sd: 1.0, ..base },
            Dgp::Hetero => Self { n: 2000, phi: 0.2, noise_sd: 0.5, ..base },
            Dgp::Ar1 => Self { noise_sd: 1.0, ..base },
            Dgp::RandomWalk => Self { noise_sd: 1.0, ..base },
        }
    }

    pub fn n_units(&self) -> usize {
        match self.dgp {
            Dgp::Sar | Dgp::Sdm => self.rows * self.cols,
            _ => self.n,
        }
    }

    fn years(&self) -> Vec<i32> {
        (self.start_year..self.start_year + self.t as i32).collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stationary AR(1) path with unit marginal variance.
fn ar1_path(rng: &mut ChaCha8Rng, phi: f64, t: usize) -> Vec<f64> {
    let innov_sd = (1.0 - phi * phi).sqrt();
    let mut v = normal(rng);
    (0..t)
        .map(|k| {
            if k > 0 {
                v = phi * v + innov_sd * normal(rng);
            }
            v
        })
        .collect()
}

/// A spatial panel together with the latent draws that generated it.
#[derive(Debug, Clone)]
pub struct SpatialPanel {
    pub graph: SpatialGraph,
    pub x: Panel,
    pub y: Panel,
    pub alpha: Vec<f64>,
    pub eps: Panel,
}

/// `y_t = (I - ρW)⁻¹(α + βx_t [+ θWx_t] + ε_t)` on a queen lattice, with
/// `α ~ N(0,1)`, `x` a stationary AR(1)(0.5) per unit and `ε ~ N(0, σ²)`.
pub fn gen_spatial_panel(spec: &DgpSpec) -> Result<SpatialPanel> {
    let graph = make_lattice_graph(spec.rows, spec.cols)?;
    let (lo, hi) = graph.admissible_interval();
    if !(spec.rho > lo && spec.rho < hi) {
        return Err(Error::RhoOutOfBounds { rho: spec.rho, lo, hi });
    }
    let theta = match spec.dgp {
        Dgp::Sar => 0.0,
        Dgp::Sdm => spec.theta,
        other => return Err(Error::Config(format!("{other:?} is not a spatial DGP"))),
    };
    let n = graph.n_units();
    let t = spec.t;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alpha: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let mut x = vec![0.0; n * t];
    for i in 0..n {
        let path: Vec<f64> = ar1_path(&mut rng, 0.5, t).iter().map(|v| v / (1.0 - 0.25f64).sqrt()).collect();
        x[i * t..(i + 1) * t].copy_from_slice(&path);
    }
    let eps: Vec<f64> = (0..n * t).map(|_| spec.noise_sd * normal(&mut rng)).collect();
    let mut y = vec![0.0; n * t];
    for c in 0..t {
        let xc: Vec<f64> = (0..n).map(|i| x[i * t + c]).collect();
        let wx = graph.spatial_lag(&xc);
        let rhs: Vec<f64> =
            (0..n).map(|i| alpha[i] + spec.beta * xc[i] + theta * wx[i] + eps[i * t + c]).collect();
        for (i, v) in solve_reduced_form(&graph, spec.rho, &rhs)?.into_iter().enumerate() {
            y[i * t + c] = v;
        }
    }
    let ids = graph.unit_ids().to_vec();
    Ok(SpatialPanel {
        x: Panel::new(ids.clone(), spec.years(), x)?,
        y: Panel::new(ids.clone(), spec.years(), y)?,
        eps: Panel::new(ids, spec.years(), eps)?,
        alpha,
        graph,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Link {
    Positive,
    Negative,
    Quadratic,
    Flat,
}

impl Link {
    fn apply(self, u: f64) -> f64 {
        match self {
            Link::Positive => u,
            Link::Negative => -u,
            Link::Quadratic => QUAD_SCALE * (u * u - 1.0),
            Link::Flat => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeteroPanel {
    pub x: Panel,
    pub y: Panel,
    pub scale: Vec<f64>,
    pub links: Vec<Link>,
}

// Calibration constants for the heterogeneous DGP: unit-normalized
// nightlights are X_LEVEL + X_SPREAD·u and the income level is INCOME_LEVEL.
const X_LEVEL: f64 = 3.0;
const X_SPREAD: f64 = 0.3;
const INCOME_LEVEL: f64 = 5.0;
const BURN_IN: usize = 20;
const QUAD_SCALE: f64 = 0.3;

/// Heterogeneous panel: unit scale `s_i = 10^N(0,1)` (about four orders of
/// magnitude), a per-unit link drawn from the mixture, and
/// `y_t / s = level + g(u_t) + φ y_{t-1} / s + ε`.
pub fn gen_hetero_panel(spec: &DgpSpec) -> Result<HeteroPanel> {
    let total: f64 = spec.link_weights.iter().sum();
    if !(total > 0.0) || spec.link_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config(format!("invalid link weights {:?}", spec.link_weights)));
    }
    let n = spec.n;
    let t = spec.t;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(n * t);
    let mut ys = Vec::with_capacity(n * t);
    let mut scale = Vec::with_capacity(n);
    let mut links = Vec::with_capacity(n);
    for _ in 0..n {
        let s = 10f64.powf(normal(&mut rng));
        let draw: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut link = Link::Flat;
        for (w, l) in spec.link_weights.iter().zip([Link::Positive, Link::Negative, Link::Quadratic, Link::Flat]) {
            acc += w;
            if draw < acc {
                link = l;
                break;
            }
        }
        let u = ar1_path(&mut rng, 0.5, t + BURN_IN);
        let mut v = INCOME_LEVEL / (1.0 - spec.phi);
        for (k, &uk) in u.iter().enumerate() {
            v = INCOME_LEVEL + link.apply(uk) + spec.phi * v + spec.noise_sd * normal(&mut rng);
            if k >= BURN_IN {
                xs.push(s * (X_LEVEL + X_SPREAD * uk));
                ys.push(s * v);
            }
        }
        scale.push(s);
        links.push(link);
    }
    let ids = lattice_ids(n);
    Ok(HeteroPanel {
        x: Panel::new(ids.clone(), spec.years(), xs)?,
        y: Panel::new(ids, spec.years(), ys)?,
        scale,
        links,
    })
}

/// Per-unit AR(1) (`Dgp::Ar1`, coefficient `phi`) or random walk income with an
/// independent AR(1) nightlight series.
pub fn gen_univariate_panel(spec: &DgpSpec) -> Result<(Panel, Panel)> {
    let phi = match spec.dgp {
        Dgp::Ar1 => spec.phi,
        Dgp::RandomWalk => 1.0,
        other => return Err(Error::Config(format!("{other:?} is not a univariate DGP"))),
    };
    let (n, t) = (spec.n, spec.t);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(n * t);
    let mut ys = Vec::with_capacity(n * t);
    for _ in 0..n {
        xs.extend(ar1_path(&mut rng, 0.5, t));
        let mut v = if phi.abs() < 1.0 { spec.noise_sd * normal(&mut rng) / (1.0 - phi * phi).sqrt() } else { 0.0 };
        for k in 0..t {
            if k > 0 {
                v = phi * v + spec.noise_sd * normal(&mut rng);
            }
            ys.push(v);
        }
    }
    let ids = lattice_ids(n);
    Ok((Panel::new(ids.clone(), spec.years(), xs)?, Panel::new(ids, spec.years(), ys)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_degrees() {
        let g = make_grid_graph(2).unwrap();
        assert_eq!(g.degrees(), &[3, 3, 3, 3]);
        let g = make_grid_graph(3).unwrap();
        assert_eq!(g.degrees()[4], 8);
        assert_eq!(g.degrees()[0], 3);
        assert_eq!(g.degrees()[1], 5);
        assert!(make_grid_graph(1).is_err());
    }

    #[test]
    fn spatial_panel_deterministic() {
        let spec = DgpSpec { rows: 5, cols: 6, seed: 9, ..Default::default() };
        let a = gen_spatial_panel(&spec).unwrap();
        let b = gen_spatial_panel(&spec).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn noiseless_static_panel_is_constant_over_time() {
        let spec = DgpSpec { rows: 4, cols: 4, beta: 0.0, noise_sd: 0.0, ..Default::default() };
        let p = gen_spatial_panel(&spec).unwrap();
        for row in p.y.rows() {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn rho_must_be_admissible() {
        let spec = DgpSpec { rows: 3, cols: 3, rho: 1.0, ..Default::default() };
        assert!(matches!(gen_spatial_panel(&spec), Err(Error::RhoOutOfBounds { .. })));
    }

    #[test]
    fn hetero_mixture_respects_degenerate_weights() {
        let spec = DgpSpec { dgp: Dgp::Hetero, n: 50, link_weights: [0.0, 0.0, 0.0, 1.0], ..Default::default() };
        let p = gen_hetero_panel(&spec).unwrap();
        assert!(p.links.iter().all(|&l| l == Link::Flat));
        assert_eq!((p.x.n_units(), p.x.n_years()), (50, 10));
    }
}

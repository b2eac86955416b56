//! Contiguity graph and its row-standardized weights.
//!
//! `W = D⁻¹B` is never materialized; the spatial lag averages neighbours
//! directly. `W` is similar to the symmetric `S = D^{-1/2} B D^{-1/2}`, whose
//! spectrum is computed once at construction and reused for every
//! log-determinant `log|I - ρW| = Σ log(1 - ρλ)`.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::Panel;

/// Symmetric, irreflexive adjacency before island removal.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAdjacency {
    pub unit_ids: Vec<String>,
    pub neighbors: Vec<Vec<usize>>,
}

impl RawAdjacency {
    pub fn from_edges(unit_ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); unit_ids.len()];
        for &(a, b) in edges {
            if a == b {
                return Err(Error::SelfLoop(unit_ids[a].clone()));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(Self { unit_ids, neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() })
    }

    /// Keeps only the listed units (in that order), dropping edges to anything else.
    pub fn restrict(&self, keep: &[String]) -> Result<Self> {
        let old: HashMap<&str, usize> =
            self.unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let mut new_index = vec![usize::MAX; self.unit_ids.len()];
        for (k, id) in keep.iter().enumerate() {
            let &i = old.get(id.as_str()).ok_or_else(|| Error::UnknownUnit(id.clone()))?;
            new_index[i] = k;
        }
        let neighbors = keep
            .iter()
            .map(|id| {
                let mut adj: Vec<usize> = self.neighbors[old[id.as_str()]]
                    .iter()
                    .filter_map(|&j| (new_index[j] != usize::MAX).then_some(new_index[j]))
                    .collect();
                adj.sort_unstable();
                adj
            })
            .collect();
        Ok(Self { unit_ids: keep.to_vec(), neighbors })
    }
}

/// Reads an `unit_id,neighbor_id` edge list over a known unit set.
pub fn ingest_edges<R: Read>(reader: R, unit_ids: &[String]) -> Result<RawAdjacency> {
    let index: HashMap<&str, usize> = unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let a = rec.get(0).unwrap_or_default();
        let b = rec.get(1).unwrap_or_default();
        let ia = *index.get(a).ok_or_else(|| Error::UnknownUnit(a.to_string()))?;
        let ib = *index.get(b).ok_or_else(|| Error::UnknownUnit(b.to_string()))?;
        if ia == ib {
            return Err(Error::SelfLoop(a.to_string()));
        }
        edges.push((ia, ib));
    }
    RawAdjacency::from_edges(unit_ids.to_vec(), &edges)
}

/// Like [`ingest_edges`], but edges touching units outside `unit_ids` are
/// dropped instead of rejected. Returns the adjacency and the dropped-edge count.
pub fn ingest_edges_within<R: Read>(reader: R, unit_ids: &[String]) -> Result<(RawAdjacency, usize)> {
    let index: HashMap<&str, usize> = unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut edges = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let a = rec.get(0).unwrap_or_default();
        let b = rec.get(1).unwrap_or_default();
        if a == b {
            return Err(Error::SelfLoop(a.to_string()));
        }
        match (index.get(a), index.get(b)) {
            (Some(&ia), Some(&ib)) => edges.push((ia, ib)),
            _ => dropped += 1,
        }
    }
    Ok((RawAdjacency::from_edges(unit_ids.to_vec(), &edges)?, dropped))
}

pub fn write_edges<W: Write>(graph: &SpatialGraph, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "neighbor_id"])?;
    for (i, adj) in graph.adjacency.iter().enumerate() {
        for &j in adj.iter().filter(|&&j| j > i) {
            w.write_record([&graph.unit_ids[i], &graph.unit_ids[j]])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Repeatedly drops units with no neighbours until every degree is at least one.
///
/// Returns the graph over the kept units and the removed ids in deletion order.
pub fn remove_islands(adj: &RawAdjacency) -> Result<(SpatialGraph, Vec<String>)> {
    let n = adj.unit_ids.len();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = adj.neighbors.iter().map(Vec::len).collect();
    let mut removed = Vec::new();
    loop {
        let isolated: Vec<usize> = (0..n).filter(|&i| alive[i] && degree[i] == 0).collect();
        if isolated.is_empty() {
            break;
        }
        for i in isolated {
            alive[i] = false;
            removed.push(adj.unit_ids[i].clone());
            for &j in &adj.neighbors[i] {
                degree[j] -= 1;
            }
        }
    }
    let kept: Vec<String> = (0..n).filter(|&i| alive[i]).map(|i| adj.unit_ids[i].clone()).collect();
    if kept.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let restricted = adj.restrict(&kept)?;
    Ok((SpatialGraph::new(restricted.unit_ids, restricted.neighbors)?, removed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    unit_ids: Vec<String>,
    adjacency: Vec<Vec<usize>>,
    degrees: Vec<usize>,
    eigenvalues: Vec<f64>,
}

impl SpatialGraph {
    /// Validates adjacency (symmetric, irreflexive, no islands) and computes the spectrum.
    pub fn new(unit_ids: Vec<String>, mut adjacency: Vec<Vec<usize>>) -> Result<Self> {
        let n = unit_ids.len();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        if adjacency.len() != n {
            return Err(Error::Shape(format!("{} adjacency lists for {n} units", adjacency.len())));
        }
        for (i, adj) in adjacency.iter_mut().enumerate() {
            adj.sort_unstable();
            adj.dedup();
            if adj.binary_search(&i).is_ok() {
                return Err(Error::SelfLoop(unit_ids[i].clone()));
            }
            if adj.is_empty() {
                return Err(Error::Config(format!("unit {:?} has no neighbours", unit_ids[i])));
            }
            if let Some(&j) = adj.iter().find(|&&j| j >= n) {
                return Err(Error::UnknownUnit(format!("neighbour index {j}")));
            }
        }
        for i in 0..n {
            for &j in &adjacency[i] {
                if adjacency[j].binary_search(&i).is_err() {
                    return Err(Error::Config(format!(
                        "asymmetric adjacency between {:?} and {:?}",
                        unit_ids[i], unit_ids[j]
                    )));
                }
            }
        }
        let degrees: Vec<usize> = adjacency.iter().map(Vec::len).collect();
        let eigenvalues = similarity_spectrum(&adjacency, &degrees)?;
        Ok(Self { unit_ids, adjacency, degrees, eigenvalues })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Spectrum of `D^{-1/2} B D^{-1/2}`, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mean_degree(&self) -> f64 {
        self.degrees.iter().sum::<usize>() as f64 / self.n_units() as f64
    }

    /// `(1/λ_min, 1/λ_max)`: the range of ρ with `I - ρW` nonsingular and det > 0.
    pub fn admissible_interval(&self) -> (f64, f64) {
        let lo = self.eigenvalues[0];
        let hi = self.eigenvalues[self.n_units() - 1];
        (1.0 / lo, 1.0 / hi)
    }

    /// `log|I - ρW|` from the cached spectrum.
    pub fn log_det(&self, rho: f64) -> f64 {
        self.eigenvalues.iter().map(|&l| (1.0 - rho * l).ln()).sum()
    }

    /// Number of connected components.
    pub fn n_components(&self) -> usize {
        let n = self.n_units();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            stack.push(s);
            while let Some(i) = stack.pop() {
                for &j in &self.adjacency[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    /// `(Wv)_i`: mean of `v` over the neighbours of `i`.
    pub fn spatial_lag(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.spatial_lag_into(v, &mut out);
        out
    }

    pub fn spatial_lag_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.n_units());
        for (i, adj) in self.adjacency.iter().enumerate() {
            out[i] = adj.iter().map(|&j| v[j]).sum::<f64>() / adj.len() as f64;
        }
    }

    /// Spatial lag of every year column of a panel whose units match the graph.
    pub fn lag_panel(&self, panel: &Panel) -> Result<Panel> {
        if panel.unit_ids() != self.unit_ids.as_slice() {
            return Err(Error::UnitMismatch("panel units differ from graph units".into()));
        }
        let t = panel.n_years();
        let mut values = vec![0.0; panel.values().len()];
        for c in 0..t {
            let lag = self.spatial_lag(&panel.column(c));
            for (i, v) in lag.into_iter().enumerate() {
                values[i * t + c] = v;
            }
        }
        Panel::new(self.unit_ids.clone(), panel.years().to_vec(), values)
    }

    /// Dense row-major `W`, for small-N reference computations.
    pub fn dense_weights(&self) -> Vec<f64> {
        let n = self.n_units();
        let mut w = vec![0.0; n * n];
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj {
                w[i * n + j] = 1.0 / adj.len() as f64;
            }
        }
        w
    }

    /// `out = (I - ρS) v` with `S` the symmetric similarity matrix.
    pub(crate) fn shifted_similarity_matvec(&self, rho: f64, v: &[f64], out: &mut [f64]) {
        for (i, adj) in self.adjacency.iter().enumerate() {
            let di = (self.degrees[i] as f64).sqrt();
            let s: f64 = adj.iter().map(|&j| v[j] / (self.degrees[j] as f64).sqrt()).sum();
            out[i] = v[i] - rho * s / di;
        }
    }

    pub fn write_removed<W: Write>(removed: &[String], mut writer: W) -> Result<()> {
        for id in removed {
            writeln!(writer, "{id}")?;
        }
        Ok(())
    }
}

fn similarity_spectrum(adjacency: &[Vec<usize>], degrees: &[usize]) -> Result<Vec<f64>> {
    let n = adjacency.len();
    let mut s = vec![0.0; n * n];
    for (i, adj) in adjacency.iter().enumerate() {
        for &j in adj {
            s[i * n + j] = 1.0 / ((degrees[i] * degrees[j]) as f64).sqrt();
        }
    }
    linalg::symmetric_eigenvalues(s, n)
}

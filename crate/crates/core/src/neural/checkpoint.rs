//! Checkpoints: `manifest.toml` (format, config, tensor shapes, Adam step)
//! plus `tensors.txt`, one line per tensor and accumulator in shortest
//! round-trip decimal.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{NetConfig, SequenceModel, TensorSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const FORMAT: &str = "panelcast-checkpoint-1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    architecture: String,
    seed: u64,
    input_dim: usize,
    adam_step: u64,
    n_params: usize,
    config: NetConfig,
    tensors: Vec<TensorSpec>,
}

pub fn save_checkpoint(model: &SequenceModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        architecture: model.architecture().name().into(),
        seed: model.config.seed,
        input_dim: model.input_dim,
        adam_step: model.step,
        n_params: model.n_params(),
        config: model.config.clone(),
        tensors: model.tensors().to_vec(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())?;
    let mut out = String::new();
    for (kind, values) in [("param", &model.params), ("adam_m", &model.adam_m), ("adam_v", &model.adam_v)] {
        for spec in model.tensors() {
            out.push_str(kind);
            out.push('\t');
            out.push_str(&spec.name);
            for v in &values[spec.range()] {
                out.push_str(&format!(" {v:?}"));
            }
            out.push('\n');
        }
    }
    write_atomic(&dir.join("tensors.txt"), out.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<SequenceModel> {
    let manifest: Manifest =
        toml::from_str(&fs::read_to_string(dir.join("manifest.toml"))?).map_err(|e| Error::Parse(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let n = manifest.n_params;
    let mut buffers = [vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]];
    let text = fs::read_to_string(dir.join("tensors.txt"))?;
    for (lineno, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::Parse(format!("tensors.txt line {}: {m}", lineno + 1));
        let (head, values) = line.split_once(' ').unwrap_or((line, ""));
        let (kind, name) = head.split_once('\t').ok_or_else(|| bad("missing tensor name"))?;
        let slot = ["param", "adam_m", "adam_v"].iter().position(|k| *k == kind).ok_or_else(|| bad("unknown kind"))?;
        let spec = manifest.tensors.iter().find(|s| s.name == name).ok_or_else(|| bad("unknown tensor"))?;
        let vals: Vec<f64> =
            values.split_whitespace().map(|v| v.parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<_>>()?;
        if vals.len() != spec.len() || spec.range().end > n {
            return Err(bad("wrong tensor length"));
        }
        buffers[slot][spec.range()].copy_from_slice(&vals);
    }
    let [params, m, v] = buffers;
    if params.iter().chain(&m).chain(&v).any(|x| x.is_nan()) {
        return Err(Error::Parse("checkpoint is missing tensors or holds NaN".into()));
    }
    let model = SequenceModel::from_parts(manifest.config, params, m, v, manifest.adam_step)?;
    if model.tensors() != manifest.tensors.as_slice() {
        return Err(Error::Shape("checkpoint tensor layout does not match its config".into()));
    }
    Ok(model)
}

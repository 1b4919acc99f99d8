//! Checkpoint directories: `manifest.txt` plus `weights.bin`.
//!
//! The manifest is `key = value` text: `format = LDEQ1`, the run config as
//! `config.<section>.<key>` lines, then one line per tensor,
//! `tensor.<name> = <shape> @ <byte offset>` for parameters and
//! `power.<name> = ...` for power-iteration vectors, plus
//! `sigma.<name> = <estimate>`. `weights.bin` holds every tensor as
//! little-endian `f32`, row-major, in manifest order.

use std::fmt::Write as _;
use std::path::Path;

use ldeq_core::model::Model;
use ldeq_core::Tensor;

use crate::config::RunConfig;
use crate::error::{HarnessError, Origin, Result};

pub const FORMAT: &str = "LDEQ1";
pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Write `model` and the config that built it into `dir`.
pub fn save(model: &Model<f32>, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut manifest = format!("format = {FORMAT}\n");
    for (k, v) in cfg.to_pairs() {
        writeln!(manifest, "config.{k} = {v}").expect("string write");
    }
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |kind: &str, name: &str, t: &Tensor<f32>, manifest: &mut String| {
        writeln!(manifest, "{kind}.{name} = {} @ {}", shape_str(t.shape()), blob.len()).expect("string write");
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let p = model.params();
    for (name, t) in p.names().iter().zip(p.tensors()) {
        push("tensor", name, t, &mut manifest);
    }
    for e in model.power_states() {
        push("power", &e.name, &e.state.u, &mut manifest);
    }
    for e in model.power_states() {
        writeln!(manifest, "sigma.{} = {}", e.name, e.sigma).expect("string write");
    }
    let mp = dir.join(MANIFEST);
    std::fs::write(&mp, manifest).map_err(|e| HarnessError::io(&mp, e))?;
    let wp = dir.join(WEIGHTS);
    std::fs::write(&wp, blob).map_err(|e| HarnessError::io(&wp, e))?;
    Ok(())
}

struct Manifest {
    config: Vec<(String, String)>,
    tensors: Vec<(String, Vec<usize>, usize)>,
    sigmas: Vec<(String, f64)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next().and_then(|l| l.split_once('=')) {
        Some((k, v)) if k.trim() == "format" => {
            if v.trim() != FORMAT {
                return Err(HarnessError::checkpoint(
                    None,
                    format!("format version '{}' is not {FORMAT}", v.trim()),
                ));
            }
        }
        _ => return Err(HarnessError::checkpoint(None, "manifest does not start with a format line")),
    }
    let mut m = Manifest {
        config: Vec::new(),
        tensors: Vec::new(),
        sigmas: Vec::new(),
    };
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::checkpoint(None, format!("bad manifest line '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if let Some(key) = k.strip_prefix("config.") {
            m.config.push((key.to_owned(), v.to_owned()));
        } else if let Some(name) = k.strip_prefix("sigma.") {
            let s = v
                .parse()
                .map_err(|_| HarnessError::checkpoint(Some(name), format!("bad estimate '{v}'")))?;
            m.sigmas.push((name.to_owned(), s));
        } else if k.starts_with("tensor.") || k.starts_with("power.") {
            let bad = || HarnessError::checkpoint(Some(k), format!("bad tensor entry '{v}'"));
            let (shape, off) = v.split_once('@').ok_or_else(bad)?;
            let shape = shape
                .trim()
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            let off = off.trim().parse().map_err(|_| bad())?;
            m.tensors.push((k.to_owned(), shape, off));
        } else {
            return Err(HarnessError::checkpoint(None, format!("unknown manifest key '{k}'")));
        }
    }
    Ok(m)
}

fn read_tensor(blob: &[u8], key: &str, want: &[usize], found: Option<&(String, Vec<usize>, usize)>) -> Result<Tensor<f32>> {
    let (_, shape, off) = found.ok_or_else(|| HarnessError::checkpoint(Some(key), "missing from manifest"))?;
    if shape.as_slice() != want {
        return Err(HarnessError::checkpoint(
            Some(key),
            format!("shape {} does not match model shape {}", shape_str(shape), shape_str(want)),
        ));
    }
    let n: usize = shape.iter().product();
    let end = off + 4 * n;
    if end > blob.len() {
        return Err(HarnessError::checkpoint(
            Some(key),
            format!("weights.bin truncated: needs bytes {off}..{end}, has {}", blob.len()),
        ));
    }
    let data = blob[*off..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(shape.clone(), data)?)
}

/// Rebuild the model saved in `dir`, with the config it was saved with.
pub fn load(dir: &Path) -> Result<(RunConfig, Model<f32>)> {
    let mp = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mp).map_err(|e| HarnessError::io(&mp, e))?;
    let m = parse_manifest(&text)?;
    let cfg = RunConfig::from_pairs(m.config.iter().map(|(k, v)| (k.as_str(), v.as_str())), Origin::Checkpoint)?;
    let wp = dir.join(WEIGHTS);
    let blob = std::fs::read(&wp).map_err(|e| HarnessError::io(&wp, e))?;
    let mut model = Model::<f32>::build(&cfg.model)?;
    let find = |key: &str| m.tensors.iter().find(|(k, _, _)| k == key);
    let names = model.params().names().to_vec();
    for (id, name) in names.iter().enumerate() {
        let key = format!("tensor.{name}");
        let want = model.params().get(id).shape().to_vec();
        *model.params_mut().get_mut(id) = read_tensor(&blob, &key, &want, find(&key))?;
    }
    for e in model.power_states_mut() {
        let key = format!("power.{}", e.name);
        let want = e.state.u.shape().to_vec();
        e.state.u = read_tensor(&blob, &key, &want, find(&key))?;
        e.sigma = m
            .sigmas
            .iter()
            .find(|(n, _)| *n == e.name)
            .map(|(_, s)| *s)
            .ok_or_else(|| HarnessError::checkpoint(Some(&format!("sigma.{}", e.name)), "missing from manifest"))?;
    }
    let known = names.len() + model.power_states().len();
    if m.tensors.len() != known {
        return Err(HarnessError::checkpoint(
            None,
            format!("manifest lists {} tensors, the model has {known}", m.tensors.len()),
        ));
    }
    let expected_len: usize = m.tensors.iter().map(|(_, s, _)| 4 * s.iter().product::<usize>()).sum();
    if blob.len() != expected_len {
        return Err(HarnessError::checkpoint(
            None,
            format!("weights.bin has {} bytes, manifest describes {expected_len}", blob.len()),
        ));
    }
    Ok((cfg, model))
}

//! Run configuration from INI text, `--set` overrides and `LDEQ_SEED`.
//!
//! Four sections are recognised: `[model]`, `[solver]`, `[train]` and
//! `[data]`. Every key has a default, unknown keys are rejected, and each
//! value is checked against its domain as it is read so errors can name the
//! key and the line it came from.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ldeq_core::budget::calibrate_slope;
use ldeq_core::model::{ModelConfig, ModelMode};
use ldeq_core::solvers::{ResidualMetric, SolverConfig, SolverKind};

use crate::error::{HarnessError, Origin, Result};

pub const SECTIONS: [&str; 4] = ["model", "solver", "train", "data"];

const KEYS: &[(&str, &str)] = &[
    ("model", "mode"),
    ("model", "channels"),
    ("model", "input_channels"),
    ("model", "height"),
    ("model", "width"),
    ("model", "classes"),
    ("model", "alpha1"),
    ("model", "alpha2"),
    ("model", "c"),
    ("model", "gamma_bar"),
    ("model", "a"),
    ("model", "p"),
    ("model", "target_l"),
    ("model", "mean_only_norm"),
    ("model", "clamp_affine"),
    ("model", "constrain_conv"),
    ("model", "softmax_fusion"),
    ("model", "convex_residual"),
    ("model", "convex_fusion"),
    ("model", "scaled_activation"),
    ("model", "gn_eps"),
    ("model", "build_iters"),
    ("model", "step_iters"),
    ("solver", "kind"),
    ("solver", "tol"),
    ("solver", "metric"),
    ("solver", "fwd_max_iter"),
    ("solver", "bwd_max_iter"),
    ("solver", "memory"),
    ("solver", "lambda"),
    ("solver", "damping"),
    ("train", "backward"),
    ("train", "lr"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "seed"),
    ("train", "out_dir"),
    ("data", "source"),
    ("data", "samples"),
    ("data", "noise"),
    ("data", "images"),
    ("data", "labels"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardKind {
    Implicit,
    Jfb,
}

impl FromStr for BackwardKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "implicit" => Ok(BackwardKind::Implicit),
            "jfb" => Ok(BackwardKind::Jfb),
            _ => Err(format!("expected implicit or jfb, got '{s}'")),
        }
    }
}

impl fmt::Display for BackwardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardKind::Implicit => "implicit",
            BackwardKind::Jfb => "jfb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Sample count of the synthetic generator.
    pub samples: usize,
    /// Pixel noise standard deviation of the synthetic generator.
    pub noise: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            samples: 500,
            noise: 0.1,
            images: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub solver_fwd: SolverConfig,
    pub solver_bwd: SolverConfig,
    pub backward: BackwardKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameters, data, shuffling and dropout masks.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            solver_fwd: SolverConfig::forward(),
            solver_bwd: SolverConfig::backward(),
            backward: BackwardKind::Implicit,
            lr: 1e-3,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            out_dir: PathBuf::from("runs/ldeq"),
            data: DataConfig::default(),
        }
    }
}

/// One `key = value` assignment with its provenance.
#[derive(Debug, Clone)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

/// Parse INI text on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[], None)
}

/// Parse INI text, then apply `--set` overrides in order, then the seed
/// from the environment variable's value if given.
pub fn parse_config_with(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut entries = parse_ini(text)?;
    for o in overrides {
        entries.push(parse_override(o)?);
    }
    if let Some(s) = env_seed {
        entries.push(Entry {
            section: "train".into(),
            key: "seed".into(),
            value: s.trim().into(),
            origin: Origin::Env,
        });
    }
    from_entries(&entries)
}

/// Read the config file (or start from defaults), apply overrides and
/// `LDEQ_SEED`.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?,
        None => String::new(),
    };
    let env = std::env::var("LDEQ_SEED").ok();
    parse_config_with(&text, overrides, env.as_deref())
}

pub fn parse_ini(text: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let origin = Origin::Line(idx + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| HarnessError::config(line, origin, "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(HarnessError::config(name, origin, "unknown section"));
            }
            section = Some(name.to_owned());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::config(line, origin, "expected 'key = value'"))?;
        let key = k.trim();
        let sec = section
            .clone()
            .ok_or_else(|| HarnessError::config(key, origin, "key outside of any section"))?;
        if !KEYS.contains(&(sec.as_str(), key)) {
            return Err(HarnessError::config(format!("{sec}.{key}"), origin, "unknown key"));
        }
        out.push(Entry {
            section: sec,
            key: key.to_owned(),
            value: v.trim().to_owned(),
            origin,
        });
    }
    Ok(out)
}

/// `section.key=value`, or `key=value` when the key names exactly one
/// setting.
pub fn parse_override(s: &str) -> Result<Entry> {
    let origin = Origin::Override;
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| HarnessError::config(s, origin, "expected key=value"))?;
    let k = k.trim();
    let (section, key) = match k.split_once('.') {
        Some((sec, key)) => {
            if !KEYS.contains(&(sec, key)) {
                return Err(HarnessError::config(k, origin, "unknown key"));
            }
            (sec.to_owned(), key.to_owned())
        }
        None => {
            let hits: Vec<&str> = KEYS.iter().filter(|(_, key)| *key == k).map(|(s, _)| *s).collect();
            match hits.as_slice() {
                [sec] => (sec.to_string(), k.to_owned()),
                [] => return Err(HarnessError::config(k, origin, "unknown key")),
                _ => return Err(HarnessError::config(k, origin, "ambiguous key, qualify it with its section")),
            }
        }
    };
    Ok(Entry {
        section,
        key,
        value: v.trim().to_owned(),
        origin,
    })
}

/// Apply entries to the defaults. `model.mode` is applied first so the
/// variant switches it resets can be overridden by later keys regardless
/// of their position.
pub fn from_entries(entries: &[Entry]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut target: Option<(f64, Origin)> = None;
    let (modes, rest): (Vec<&Entry>, Vec<&Entry>) =
        entries.iter().partition(|e| e.section == "model" && e.key == "mode");
    for e in modes.into_iter().chain(rest) {
        if e.section == "model" && e.key == "target_l" {
            let t: f64 = num(&e.value).map_err(|m| HarnessError::config("model.target_l", e.origin, m))?;
            if !(t > 0.0) {
                return Err(HarnessError::config("model.target_l", e.origin, "must be > 0"));
            }
            target = Some((t, e.origin));
            continue;
        }
        cfg.set(&e.section, &e.key, &e.value)
            .map_err(|m| HarnessError::config(format!("{}.{}", e.section, e.key), e.origin, m))?;
    }
    cfg.model.lip.branches = cfg.model.channels.len();
    cfg.model.seed = cfg.seed;
    if let Some((t, origin)) = target {
        cfg.model.lip.slope =
            calibrate_slope(&cfg.model.lip, t).map_err(|err| HarnessError::config("model.target_l", origin, err.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

fn in_range(x: f64, lo: f64, hi: f64, lo_open: bool, hi_open: bool) -> std::result::Result<f64, String> {
    let ok_lo = if lo_open { x > lo } else { x >= lo };
    let ok_hi = if hi_open { x < hi } else { x <= hi };
    if ok_lo && ok_hi {
        Ok(x)
    } else {
        Err(format!(
            "{x} outside {}{lo}, {hi}{}",
            if lo_open { '(' } else { '[' },
            if hi_open { ')' } else { ']' }
        ))
    }
}

fn positive(x: f64) -> std::result::Result<f64, String> {
    in_range(x, 0.0, f64::INFINITY, true, true)
}

fn at_least_one(n: usize) -> std::result::Result<usize, String> {
    if n >= 1 {
        Ok(n)
    } else {
        Err("must be >= 1".into())
    }
}

impl RunConfig {
    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match (section, key) {
            ("model", "mode") => {
                let mode: ModelMode = v.parse().map_err(|e: ldeq_core::Error| e.to_string())?;
                *m = m.clone().with_mode(mode);
            }
            ("model", "channels") => {
                let ch = v
                    .split(',')
                    .map(|s| num::<usize>(s.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if ch.is_empty() || ch.contains(&0) {
                    return Err(format!("channels must be positive, got '{v}'"));
                }
                m.channels = ch;
            }
            ("model", "input_channels") => m.input_channels = at_least_one(num(v)?)?,
            ("model", "height") => m.height = at_least_one(num(v)?)?,
            ("model", "width") => m.width = at_least_one(num(v)?)?,
            ("model", "classes") => m.classes = at_least_one(num(v)?)?,
            ("model", "alpha1") => m.lip.alpha1 = in_range(num(v)?, 0.0, 1.0, false, false)?,
            ("model", "alpha2") => m.lip.alpha2 = in_range(num(v)?, 0.0, 1.0, false, false)?,
            ("model", "c") => m.lip.target_norm = positive(num(v)?)?,
            ("model", "gamma_bar") => m.lip.gamma_bar = positive(num(v)?)?,
            ("model", "a") => m.lip.slope = in_range(num(v)?, 0.0, 1.0, true, false)?,
            ("model", "p") => m.lip.dropout = in_range(num(v)?, 0.0, 1.0, false, true)?,
            ("model", "mean_only_norm") => m.variant.mean_only_norm = flag(v)?,
            ("model", "clamp_affine") => m.variant.clamp_affine = flag(v)?,
            ("model", "constrain_conv") => m.variant.constrain_conv = flag(v)?,
            ("model", "softmax_fusion") => m.variant.softmax_fusion = flag(v)?,
            ("model", "convex_residual") => m.variant.convex_residual = flag(v)?,
            ("model", "convex_fusion") => m.variant.convex_fusion = flag(v)?,
            ("model", "scaled_activation") => m.variant.scaled_activation = flag(v)?,
            ("model", "gn_eps") => m.gn_eps = positive(num(v)?)?,
            ("model", "build_iters") => m.build_iters = at_least_one(num(v)?)?,
            ("model", "step_iters") => m.step_iters = at_least_one(num(v)?)?,
            ("solver", "kind") => {
                let k = match v {
                    "anderson" => SolverKind::Anderson,
                    "banach" => SolverKind::Banach,
                    _ => return Err(format!("expected anderson or banach, got '{v}'")),
                };
                self.solver_fwd.kind = k;
                self.solver_bwd.kind = k;
            }
            ("solver", "tol") => {
                let t = positive(num(v)?)?;
                self.solver_fwd.tol = t;
                self.solver_bwd.tol = t;
            }
            ("solver", "metric") => {
                let r = match v {
                    "relative" => ResidualMetric::Relative,
                    "absolute" => ResidualMetric::Absolute,
                    _ => return Err(format!("expected relative or absolute, got '{v}'")),
                };
                self.solver_fwd.metric = r;
                self.solver_bwd.metric = r;
            }
            ("solver", "fwd_max_iter") => self.solver_fwd.max_iter = at_least_one(num(v)?)?,
            ("solver", "bwd_max_iter") => self.solver_bwd.max_iter = at_least_one(num(v)?)?,
            ("solver", "memory") => {
                let k = at_least_one(num(v)?)?;
                self.solver_fwd.memory = k;
                self.solver_bwd.memory = k;
            }
            ("solver", "lambda") => {
                let l = in_range(num(v)?, 0.0, f64::INFINITY, false, true)?;
                self.solver_fwd.lambda = l;
                self.solver_bwd.lambda = l;
            }
            ("solver", "damping") => {
                let d = in_range(num(v)?, 0.0, 1.0, true, false)?;
                self.solver_fwd.damping = d;
                self.solver_bwd.damping = d;
            }
            ("train", "backward") => self.backward = v.parse()?,
            ("train", "lr") => self.lr = positive(num(v)?)?,
            ("train", "epochs") => self.epochs = at_least_one(num(v)?)?,
            ("train", "batch_size") => self.batch_size = at_least_one(num(v)?)?,
            ("train", "seed") => self.seed = num(v)?,
            ("train", "out_dir") => self.out_dir = PathBuf::from(v),
            ("data", "source") => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "idx" => DataSource::Idx,
                    _ => return Err(format!("expected synthetic or idx, got '{v}'")),
                }
            }
            ("data", "samples") => self.data.samples = at_least_one(num(v)?)?,
            ("data", "noise") => self.data.noise = in_range(num(v)?, 0.0, f64::INFINITY, false, true)?,
            ("data", "images") => self.data.images = Some(PathBuf::from(v)),
            ("data", "labels") => self.data.labels = Some(PathBuf::from(v)),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Cross-field checks on top of the per-key domains.
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| HarnessError::config("model", Origin::Default, e.to_string()))?;
        for (name, s) in [("solver.fwd", &self.solver_fwd), ("solver.bwd", &self.solver_bwd)] {
            s.validate()
                .map_err(|e| HarnessError::config(name, Origin::Default, e.to_string()))?;
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::config(
                "train",
                Origin::Default,
                "lr must be > 0, epochs and batch_size >= 1",
            ));
        }
        if self.data.source == DataSource::Idx && (self.data.images.is_none() || self.data.labels.is_none()) {
            return Err(HarnessError::config(
                "data.source",
                Origin::Default,
                "idx source needs both data.images and data.labels",
            ));
        }
        Ok(())
    }

    /// The effective configuration as `section.key` / value pairs. Feeding
    /// them back through [`from_entries`] reproduces `self`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let v = &m.variant;
        let f = &self.solver_fwd;
        let kind = match f.kind {
            SolverKind::Anderson => "anderson",
            SolverKind::Banach => "banach",
        };
        let channels: Vec<String> = m.channels.iter().map(usize::to_string).collect();
        let mut out: Vec<(&str, String)> = vec![
            ("model.mode", m.mode.to_string()),
            ("model.channels", channels.join(",")),
            ("model.input_channels", m.input_channels.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.classes", m.classes.to_string()),
            ("model.alpha1", m.lip.alpha1.to_string()),
            ("model.alpha2", m.lip.alpha2.to_string()),
            ("model.c", m.lip.target_norm.to_string()),
            ("model.gamma_bar", m.lip.gamma_bar.to_string()),
            ("model.a", m.lip.slope.to_string()),
            ("model.p", m.lip.dropout.to_string()),
            ("model.mean_only_norm", v.mean_only_norm.to_string()),
            ("model.clamp_affine", v.clamp_affine.to_string()),
            ("model.constrain_conv", v.constrain_conv.to_string()),
            ("model.softmax_fusion", v.softmax_fusion.to_string()),
            ("model.convex_residual", v.convex_residual.to_string()),
            ("model.convex_fusion", v.convex_fusion.to_string()),
            ("model.scaled_activation", v.scaled_activation.to_string()),
            ("model.gn_eps", m.gn_eps.to_string()),
            ("model.build_iters", m.build_iters.to_string()),
            ("model.step_iters", m.step_iters.to_string()),
            ("solver.kind", kind.into()),
            ("solver.tol", f.tol.to_string()),
            ("solver.metric", f.metric.name().into()),
            ("solver.fwd_max_iter", f.max_iter.to_string()),
            ("solver.bwd_max_iter", self.solver_bwd.max_iter.to_string()),
            ("solver.memory", f.memory.to_string()),
            ("solver.lambda", f.lambda.to_string()),
            ("solver.damping", f.damping.to_string()),
            ("train.backward", self.backward.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.out_dir", self.out_dir.display().to_string()),
            (
                "data.source",
                match self.data.source {
                    DataSource::Synthetic => "synthetic".into(),
                    DataSource::Idx => "idx".into(),
                },
            ),
            ("data.samples", self.data.samples.to_string()),
            ("data.noise", self.data.noise.to_string()),
        ];
        if let Some(p) = &self.data.images {
            out.push(("data.images", p.display().to_string()));
        }
        if let Some(p) = &self.data.labels {
            out.push(("data.labels", p.display().to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
    }

    /// Build a config from `section.key` pairs such as a checkpoint echo.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, origin: Origin) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, v) in pairs {
            let (section, key) = k
                .split_once('.')
                .filter(|(s, key)| KEYS.contains(&(*s, *key)))
                .ok_or_else(|| HarnessError::config(k, origin, "unknown key"))?;
            entries.push(Entry {
                section: section.into(),
                key: key.into(),
                value: v.into(),
                origin,
            });
        }
        from_entries(&entries)
    }
}

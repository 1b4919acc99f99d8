//! Closed-form Lipschitz calculus for the multiscale fixed-point map.
//!
//! The map factors as `f = post ∘ fusion ∘ residual`. The residual and
//! post-fusion blocks act on each branch independently, so their bounds
//! carry over to the product space unchanged; the fusion block couples
//! branches and is bounded row by row. The network bound is
//!
//! ```text
//! L = Ĥ · sqrt(Σᵢ L̃ᵢ²) · L̄
//! ```
//!
//! Branch indices are zero-based throughout.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::lipops::fusion_weights;
use crate::numfmt::format_g;
use crate::{Error, Result};

/// Budget hyperparameters of the Lipschitz variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzConfig {
    /// Residual-block mix α₁.
    pub alpha1: f64,
    /// Fusion mix α₂.
    pub alpha2: f64,
    /// Conv target norm `c`.
    pub target_norm: f64,
    /// Affine ceiling γ̄.
    pub gamma_bar: f64,
    /// SReLU slope `a`.
    pub slope: f64,
    /// Dropout rate `p`.
    pub dropout: f64,
    /// Branch count `n`.
    pub branches: usize,
    /// Upsample paths carry a 1×1 channel-matching conv and norm before
    /// interpolation, contributing `γ̄·c` on top of `2^{j−i}`.
    pub upsample_includes_conv: bool,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.3,
            target_norm: 2.0,
            gamma_bar: 1.0,
            slope: 0.4,
            dropout: 0.3,
            branches: 4,
            upsample_includes_conv: true,
        }
    }
}

impl LipschitzConfig {
    pub fn validate(&self) -> Result<()> {
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        let checks = [
            (open01(self.alpha1), "alpha1 must lie in (0, 1)"),
            (open01(self.alpha2), "alpha2 must lie in (0, 1)"),
            (self.slope > 0.0 && self.slope <= 1.0, "slope a must lie in (0, 1]"),
            ((0.0..1.0).contains(&self.dropout), "dropout p must lie in [0, 1)"),
            (self.target_norm > 0.0, "target norm c must be > 0"),
            (self.gamma_bar > 0.0, "gamma_bar must be > 0"),
            (self.branches >= 1, "branch count n must be >= 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Domain((*msg).into())),
            None => Ok(()),
        }
    }

    /// The same configuration with dropout disabled (its eval-mode bound).
    pub fn eval_mode(&self) -> Self {
        Self {
            dropout: 0.0,
            ..*self
        }
    }

    pub fn dropout_bound(&self) -> f64 {
        1.0 / (1.0 - self.dropout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    /// `f ∘ g`: bounds multiply.
    Sequential,
    /// `f + g`: bounds add.
    Additive,
}

/// Lipschitz bound of a chain (`Sequential`) or sum (`Additive`) of maps.
pub fn compose(bounds: &[f64], mode: Composition) -> f64 {
    match mode {
        Composition::Sequential => bounds.iter().product(),
        Composition::Additive => bounds.iter().sum(),
    }
}

/// `Ĥ = (1−α₁)·γ̄·a + α₁·γ̄³·c²·a²/(1−p)`.
pub fn residual_block_bound(cfg: &LipschitzConfig) -> f64 {
    let (g, c, a) = (cfg.gamma_bar, cfg.target_norm, cfg.slope);
    let inner = compose(&[g, cfg.dropout_bound(), c, a, g, c], Composition::Sequential);
    let mixed = compose(&[1.0 - cfg.alpha1, cfg.alpha1 * inner], Composition::Additive);
    compose(&[a, g, mixed], Composition::Sequential)
}

/// `L̄ = γ̄·c·a`.
pub fn post_fusion_bound(cfg: &LipschitzConfig) -> f64 {
    compose(&[cfg.gamma_bar, cfg.target_norm, cfg.slope], Composition::Sequential)
}

/// Bound of the fusion path carrying branch `j` into branch `i`.
///
/// Downsampling (`j < i`) chains `i − j` strided hops, all but the last
/// followed by the activation: `γ̄c·(aγ̄c)^{i−j−1}`. Upsampling (`j > i`)
/// interpolates by `2^{j−i}` per axis, so contributes `2^{j−i}`, times `γ̄c`
/// for the channel-matching conv and norm.
pub fn fuse_path_bound(cfg: &LipschitzConfig, i: usize, j: usize) -> Result<f64> {
    if i == j || i >= cfg.branches || j >= cfg.branches {
        return Err(Error::Domain(format!(
            "no fusion path {j} -> {i} among {} branches",
            cfg.branches
        )));
    }
    let gc = cfg.gamma_bar * cfg.target_norm;
    Ok(if j < i {
        gc * (cfg.slope * gc).powi((i - j - 1) as i32)
    } else {
        let interp = 2f64.powi((j - i) as i32);
        if cfg.upsample_includes_conv {
            interp * gc
        } else {
            interp
        }
    })
}

/// `sqrt(skip² + mix²·Σ (w·L)²)` for one fusion output row.
pub fn fusion_row_bound(skip: f64, mix: f64, terms: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let s: f64 = terms.into_iter().map(|(w, l)| (w * l) * (w * l)).sum();
    (skip * skip + mix * mix * s).sqrt()
}

/// `L̃ᵢ = sqrt((1−α₂)² + α₂²·Σ_{j≠i} (w_ij·L_fuse^{i,j})²)`.
pub fn fusion_branch_bound(cfg: &LipschitzConfig, i: usize) -> Result<f64> {
    let row = fusion_weights(cfg.branches, i);
    let terms = row
        .entries
        .iter()
        .map(|e| Ok((e.weight, fuse_path_bound(cfg, i, e.partner)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(fusion_row_bound(1.0 - cfg.alpha2, cfg.alpha2, terms))
}

/// `L = Ĥ · sqrt(Σ L̃ᵢ²) · L̄`.
pub fn network_bound(residual: f64, fusion: &[f64], post: f64) -> f64 {
    residual * fusion.iter().map(|l| l * l).sum::<f64>().sqrt() * post
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathBound {
    pub out: usize,
    pub input: usize,
    pub weight: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    /// Ĥ
    pub residual: f64,
    /// L̄
    pub post_fusion: f64,
    /// L̃ᵢ per output branch
    pub fusion: Vec<f64>,
    /// L
    pub overall: f64,
    pub paths: Vec<PathBound>,
}

impl BudgetReport {
    /// `sqrt(Σ L̃ᵢ²)`, the factor the fusion block contributes to `L`.
    pub fn fusion_factor(&self) -> f64 {
        self.fusion.iter().map(|l| l * l).sum::<f64>().sqrt()
    }

    pub fn is_contraction(&self) -> bool {
        self.overall < 1.0
    }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "L_hat   = {:.6}", self.residual)?;
        writeln!(f, "L_bar   = {:.6}", self.post_fusion)?;
        for (i, l) in self.fusion.iter().enumerate() {
            writeln!(f, "L_tilde[{}] = {:.6}", i + 1, l)?;
        }
        for p in &self.paths {
            writeln!(
                f,
                "L_fuse[{},{}] = {:.6}  (w = {:.5})",
                p.out + 1,
                p.input + 1,
                p.bound,
                p.weight
            )?;
        }
        write!(f, "L       = {:.6}", self.overall)
    }
}

/// Every intermediate of the closed-form bound.
pub fn overall_bound(cfg: &LipschitzConfig) -> Result<BudgetReport> {
    cfg.validate()?;
    let mut paths = Vec::new();
    let mut fusion = Vec::with_capacity(cfg.branches);
    for i in 0..cfg.branches {
        for e in fusion_weights(cfg.branches, i).entries {
            paths.push(PathBound {
                out: i,
                input: e.partner,
                weight: e.weight,
                bound: fuse_path_bound(cfg, i, e.partner)?,
            });
        }
        fusion.push(fusion_branch_bound(cfg, i)?);
    }
    let residual = residual_block_bound(cfg);
    let post_fusion = post_fusion_bound(cfg);
    Ok(BudgetReport {
        residual,
        post_fusion,
        overall: network_bound(residual, &fusion, post_fusion),
        fusion,
        paths,
    })
}

/// Smallest slope `a ∈ (0, 1]` whose bound reaches `target`, by bisection
/// (the bound is increasing in `a`). Returns 1 if even `a = 1` stays below.
pub fn calibrate_slope(cfg: &LipschitzConfig, target: f64) -> Result<f64> {
    let at = |a: f64| overall_bound(&LipschitzConfig { slope: a, ..*cfg }).map(|r| r.overall);
    if at(1.0)? <= target {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha1,
    Alpha2,
    TargetNorm,
    GammaBar,
    Slope,
    Dropout,
    Branches,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha1 => "alpha1",
            SweepParam::Alpha2 => "alpha2",
            SweepParam::TargetNorm => "c",
            SweepParam::GammaBar => "gamma_bar",
            SweepParam::Slope => "a",
            SweepParam::Dropout => "p",
            SweepParam::Branches => "n",
        }
    }

    /// `cfg` with this parameter replaced by `value`.
    pub fn set(self, cfg: &LipschitzConfig, value: f64) -> Result<LipschitzConfig> {
        let mut out = *cfg;
        match self {
            SweepParam::Alpha1 => out.alpha1 = value,
            SweepParam::Alpha2 => out.alpha2 = value,
            SweepParam::TargetNorm => out.target_norm = value,
            SweepParam::GammaBar => out.gamma_bar = value,
            SweepParam::Slope => out.slope = value,
            SweepParam::Dropout => out.dropout = value,
            SweepParam::Branches => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Domain(format!("branch count must be a positive integer, got {value}")));
                }
                out.branches = value as usize;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha1" => SweepParam::Alpha1,
            "alpha2" => SweepParam::Alpha2,
            "c" | "target_norm" => SweepParam::TargetNorm,
            "gamma_bar" => SweepParam::GammaBar,
            "a" | "slope" => SweepParam::Slope,
            "p" | "dropout" => SweepParam::Dropout,
            "n" | "branches" => SweepParam::Branches,
            other => return Err(Error::Config(format!("unknown sweep parameter '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub report: BudgetReport,
}

/// One bound evaluation per value, all other fields held fixed. Values
/// outside the parameter's domain are skipped with a warning.
pub fn sensitivity_sweep(cfg: &LipschitzConfig, param: SweepParam, values: &[f64]) -> Vec<SweepRow> {
    values
        .iter()
        .filter_map(|&value| {
            match param.set(cfg, value).and_then(|c| overall_bound(&c)) {
                Ok(report) => Some(SweepRow {
                    param,
                    value,
                    report,
                }),
                Err(e) => {
                    log::warn!("skipping {}={value}: {e}", param.name());
                    None
                }
            }
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "param,value,L_hat,L_bar,L_tilde_rms,L";

/// CSV with header `param,value,L_hat,L_bar,L_tilde_rms,L`, `%.6g` numbers.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.param.name(),
            format_g(r.value, 6),
            format_g(r.report.residual, 6),
            format_g(r.report.post_fusion, 6),
            format_g(r.report.fusion_factor(), 6),
            format_g(r.report.overall, 6)
        )?;
    }
    Ok(())
}

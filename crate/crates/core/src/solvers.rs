//! Fixed-point solvers: plain Banach iteration and type-II Anderson
//! acceleration, with per-iteration residual traces.
//!
//! Iteration `t` produces the iterate `z_t` and evaluates `f(z_t)`; the
//! residual recorded for `t` compares the two, and the solve stops at the
//! first `t` whose batch-mean residual is within tolerance. `z_0` itself is
//! evaluated once but never tested, so `nfes` counts the updates made.

use std::io::Write;
use std::time::{Duration, Instant};

use crate::numfmt::format_g;
use crate::tensors::reduce;
use crate::{Error, MultiscaleState, Real, Reduction, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Banach,
    Anderson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMetric {
    /// `‖f(z) − z‖ / ‖f(z)‖`
    Relative,
    /// `‖f(z) − z‖`
    Absolute,
}

impl ResidualMetric {
    pub fn name(self) -> &'static str {
        match self {
            ResidualMetric::Relative => "relative",
            ResidualMetric::Absolute => "absolute",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub tol: f64,
    pub metric: ResidualMetric,
    pub max_iter: usize,
    /// Anderson history length.
    pub memory: usize,
    /// Anderson ridge, relative to the smallest squared residual in the history.
    pub lambda: f64,
    /// Anderson damping β: weight on `f(z)` in the mixed update.
    pub damping: f64,
}

impl SolverConfig {
    /// Forward defaults: Anderson, tol 1e-3 relative, 18 iterations.
    pub fn forward() -> Self {
        Self {
            kind: SolverKind::Anderson,
            tol: 1e-3,
            metric: ResidualMetric::Relative,
            max_iter: 18,
            memory: 5,
            lambda: 1e-4,
            damping: 1.0,
        }
    }

    /// Backward defaults: as forward with 20 iterations.
    pub fn backward() -> Self {
        Self {
            max_iter: 20,
            ..Self::forward()
        }
    }

    pub fn banach(tol: f64, metric: ResidualMetric, max_iter: usize) -> Self {
        Self {
            kind: SolverKind::Banach,
            tol,
            metric,
            max_iter,
            ..Self::forward()
        }
    }

    pub fn anderson(tol: f64, metric: ResidualMetric, max_iter: usize) -> Self {
        Self {
            kind: SolverKind::Anderson,
            ..Self::banach(tol, metric, max_iter)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter < 1 || self.memory < 1 {
            return Err(Error::Config("max_iter and memory must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverReport<T> {
    pub z_star: MultiscaleState<T>,
    pub nfes: usize,
    /// Batch-mean residual per iteration.
    pub residual_trace: Vec<f64>,
    /// Largest per-sample residual per iteration.
    pub max_residual_trace: Vec<f64>,
    pub converged: bool,
    pub elapsed: Duration,
}

impl<T> SolverReport<T> {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Per-sample residuals of `fz` against `z`.
pub fn sample_residuals<T: Real>(
    fz: &MultiscaleState<T>,
    z: &MultiscaleState<T>,
    metric: ResidualMetric,
) -> Result<Vec<T>> {
    let diff = crate::tensors::axpy_state(T::one(), fz, -T::one(), z)?;
    let num = diff.sample_norms();
    Ok(match metric {
        ResidualMetric::Absolute => num,
        ResidualMetric::Relative => {
            let floor = T::lit(1e-12);
            num.iter()
                .zip(fz.sample_norms())
                .map(|(&n, d)| n / d.max(floor))
                .collect()
        }
    })
}

/// `‖fz − z‖ / max(‖fz‖, 1e-12)`, averaged over the batch.
pub fn relative_residual<T: Real>(fz: &MultiscaleState<T>, z: &MultiscaleState<T>) -> Result<T> {
    Ok(reduce(&sample_residuals(fz, z, ResidualMetric::Relative)?, Reduction::Mean))
}

/// `‖fz − z‖`, averaged over the batch.
pub fn absolute_residual<T: Real>(fz: &MultiscaleState<T>, z: &MultiscaleState<T>) -> Result<T> {
    Ok(reduce(&sample_residuals(fz, z, ResidualMetric::Absolute)?, Reduction::Mean))
}

struct Trace {
    mean: Vec<f64>,
    max: Vec<f64>,
}

impl Trace {
    fn record<T: Real>(&mut self, fz: &MultiscaleState<T>, z: &MultiscaleState<T>, metric: ResidualMetric) -> Result<f64> {
        let r = sample_residuals(fz, z, metric)?;
        let mean = reduce(&r, Reduction::Mean).as_f64();
        self.mean.push(mean);
        self.max.push(reduce(&r, Reduction::Max).as_f64());
        Ok(mean)
    }
}

fn evaluate<T: Real, F>(f: &mut F, z: &MultiscaleState<T>, iteration: usize) -> Result<MultiscaleState<T>>
where
    F: FnMut(&MultiscaleState<T>) -> Result<MultiscaleState<T>>,
{
    let fz = f(z)?;
    z.same_shape(&fz)?;
    if !fz.all_finite() {
        return Err(Error::Divergence {
            iteration,
            context: None,
            certificate: None,
        });
    }
    Ok(fz)
}

/// Iterate `z_{t+1} = f(z_t)`.
pub fn banach_solve<T: Real, F>(mut f: F, z0: &MultiscaleState<T>, cfg: &SolverConfig) -> Result<SolverReport<T>>
where
    F: FnMut(&MultiscaleState<T>) -> Result<MultiscaleState<T>>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = Trace { mean: vec![], max: vec![] };
    let mut z = z0.clone();
    let mut fz = evaluate(&mut f, &z, 0)?;
    let mut converged = false;
    for t in 1..=cfg.max_iter {
        z = fz;
        fz = evaluate(&mut f, &z, t)?;
        if trace.record(&fz, &z, cfg.metric)? <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SolverReport {
        z_star: z,
        nfes: trace.mean.len(),
        residual_trace: trace.mean,
        max_residual_trace: trace.max,
        converged,
        elapsed: start.elapsed(),
    })
}

/// Anderson mixing over the last `memory` pairs `(z_k, f(z_k))`.
///
/// Each sample gets its own coefficients `α` from
/// `min ‖Σ αₖ gₖ‖² + λ‖α‖²` subject to `Σ αₖ = 1`, with `gₖ = f(zₖ) − zₖ`.
/// The first update is a plain Banach step.
pub fn anderson_solve<T: Real, F>(mut f: F, z0: &MultiscaleState<T>, cfg: &SolverConfig) -> Result<SolverReport<T>>
where
    F: FnMut(&MultiscaleState<T>) -> Result<MultiscaleState<T>>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = Trace { mean: vec![], max: vec![] };
    let mut xs: Vec<MultiscaleState<T>> = Vec::with_capacity(cfg.memory);
    let mut fs: Vec<MultiscaleState<T>> = Vec::with_capacity(cfg.memory);
    let mut gs: Vec<MultiscaleState<T>> = Vec::with_capacity(cfg.memory);

    let mut z = z0.clone();
    let mut fz = evaluate(&mut f, &z, 0)?;
    let mut converged = false;
    for t in 1..=cfg.max_iter {
        push_history(cfg.memory, &mut xs, &mut fs, &mut gs, z, fz)?;
        z = if t == 1 {
            fs[0].clone()
        } else {
            mix(&xs, &fs, &gs, cfg)?
        };
        fz = evaluate(&mut f, &z, t)?;
        if trace.record(&fz, &z, cfg.metric)? <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SolverReport {
        z_star: z,
        nfes: trace.mean.len(),
        residual_trace: trace.mean,
        max_residual_trace: trace.max,
        converged,
        elapsed: start.elapsed(),
    })
}

fn push_history<T: Real>(
    memory: usize,
    xs: &mut Vec<MultiscaleState<T>>,
    fs: &mut Vec<MultiscaleState<T>>,
    gs: &mut Vec<MultiscaleState<T>>,
    z: MultiscaleState<T>,
    fz: MultiscaleState<T>,
) -> Result<()> {
    if xs.len() == memory {
        xs.remove(0);
        fs.remove(0);
        gs.remove(0);
    }
    gs.push(crate::tensors::axpy_state(T::one(), &fz, -T::one(), &z)?);
    xs.push(z);
    fs.push(fz);
    Ok(())
}

fn mix<T: Real>(
    xs: &[MultiscaleState<T>],
    fs: &[MultiscaleState<T>],
    gs: &[MultiscaleState<T>],
    cfg: &SolverConfig,
) -> Result<MultiscaleState<T>> {
    let k = gs.len();
    let batch = gs[0].batch();
    // gram[s][a][b] = <g_a, g_b> for sample s
    let mut gram = vec![vec![0.0f64; k * k]; batch];
    for a in 0..k {
        for b in a..k {
            let d = gs[a].sample_dots(&gs[b])?;
            for (s, v) in d.into_iter().enumerate() {
                gram[s][a * k + b] = v.as_f64();
                gram[s][b * k + a] = v.as_f64();
            }
        }
    }
    let beta = T::lit(cfg.damping);
    let mut out = xs[0].zeros_like();
    for (s, g) in gram.iter().enumerate() {
        let alpha = mixing_coefficients(g, k, cfg.lambda);
        for idx in 0..k {
            let a = T::lit(alpha[idx]);
            for (dst, (x, fx)) in out
                .branches_mut()
                .iter_mut()
                .zip(xs[idx].branches().iter().zip(fs[idx].branches()))
            {
                let d = dst.sample_mut(s);
                for ((o, &xv), &fv) in d.iter_mut().zip(x.sample(s)).zip(fx.sample(s)) {
                    *o += a * ((T::one() - beta) * xv + beta * fv);
                }
            }
        }
    }
    Ok(out)
}

/// Solve the bordered system `[0 1ᵀ; 1 G+λI] [μ; α] = [1; 0]`.
fn mixing_coefficients(gram: &[f64], k: usize, lambda: f64) -> Vec<f64> {
    // the smallest squared residual sets the scale, so the ridge stays
    // relevant as the history spans several orders of magnitude
    let scale = (0..k).map(|i| gram[i * k + i]).fold(f64::INFINITY, f64::min);
    if !(scale > 0.0) || !scale.is_finite() {
        let mut e = vec![0.0; k];
        e[k - 1] = 1.0;
        return e;
    }
    let ridge = lambda * scale;
    let n = k + 1;
    let mut m = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    rhs[0] = 1.0;
    for i in 1..n {
        m[i] = 1.0;
        m[i * n] = 1.0;
        for j in 1..n {
            m[i * n + j] = gram[(i - 1) * k + (j - 1)] / scale;
        }
        m[i * n + i] += ridge / scale;
    }
    match solve_dense(&mut m, &mut rhs, n) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => sol[1..].to_vec(),
        _ => {
            let mut e = vec![0.0; k];
            e[k - 1] = 1.0;
            e
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(m: &mut [f64], rhs: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a * n + col].abs().total_cmp(&m[b * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
            }
            rhs.swap(piv, col);
        }
        for r in col + 1..n {
            let factor = m[r * n + col] / m[col * n + col];
            if factor != 0.0 {
                for j in col..n {
                    m[r * n + j] -= factor * m[col * n + j];
                }
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| m[r * n + j] * x[j]).sum();
        x[r] = (rhs[r] - s) / m[r * n + r];
    }
    Some(x)
}

/// Dispatch on `cfg.kind`.
pub fn solve<T: Real, F>(f: F, z0: &MultiscaleState<T>, cfg: &SolverConfig) -> Result<SolverReport<T>>
where
    F: FnMut(&MultiscaleState<T>) -> Result<MultiscaleState<T>>,
{
    match cfg.kind {
        SolverKind::Banach => banach_solve(f, z0, cfg),
        SolverKind::Anderson => anderson_solve(f, z0, cfg),
    }
}

pub const TRACE_HEADER: &str = "solve_id,iter,metric,value";

/// Append `solve_id,iter,metric,value` rows for one report.
pub fn write_trace_rows<T, W: Write>(
    solve_id: &str,
    report: &SolverReport<T>,
    metric: ResidualMetric,
    mut out: W,
) -> std::io::Result<()> {
    for (i, r) in report.residual_trace.iter().enumerate() {
        writeln!(out, "{solve_id},{},{},{}", i + 1, metric.name(), format_g(*r, 6))?;
    }
    Ok(())
}

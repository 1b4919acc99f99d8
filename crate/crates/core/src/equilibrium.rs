//! The equilibrium contract: solve `z⋆ = f(z⋆; x)`, differentiate through
//! the fixed point by solving a second, linear fixed-point problem, or take
//! the Jacobian-free shortcut.
//!
//! The backward problem is `a = aJ + ∂ℓ/∂z⋆` with `J = ∂f/∂z` at `z⋆`. It is
//! contractive whenever the forward map is, with the same constant, since
//! `‖J‖₂` never exceeds the map's Lipschitz bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::solvers::{solve, SolverConfig, SolverReport};
use crate::tensors::axpy_state;
use crate::{Error, MultiscaleState, Real, Result, Tensor};

/// A parameterized map `z ↦ f(z)` with reverse-mode derivatives.
///
/// `Context` holds everything fixed for one solve (input, frozen dropout
/// masks); `Trace` holds the intermediates of one evaluation so repeated
/// VJPs at the same point skip the forward recomputation.
pub trait EquilibriumMap<T: Real> {
    type Context;
    type Trace;

    fn initial_state(&self, ctx: &Self::Context) -> Result<MultiscaleState<T>>;

    fn apply(&self, ctx: &Self::Context, z: &MultiscaleState<T>) -> Result<MultiscaleState<T>>;

    fn linearize(&self, ctx: &Self::Context, z: &MultiscaleState<T>) -> Result<Self::Trace>;

    /// `vᵀ ∂f/∂z` at the traced point.
    fn vjp_state(&self, ctx: &Self::Context, trace: &Self::Trace, v: &MultiscaleState<T>) -> Result<MultiscaleState<T>>;

    /// `vᵀ ∂f/∂θ` at the traced point, one cotangent per parameter tensor.
    fn vjp_params(&self, ctx: &Self::Context, trace: &Self::Trace, v: &MultiscaleState<T>) -> Result<Vec<Tensor<T>>>;

    /// Analytic Lipschitz bound of `f` in `z`, when one is known.
    fn certificate(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult<T> {
    pub z_star: MultiscaleState<T>,
    pub forward_report: SolverReport<T>,
}

#[derive(Debug, Clone)]
pub struct GradientResult<T> {
    pub param_grads: Vec<Tensor<T>>,
    /// Absent for the Jacobian-free shortcut.
    pub backward_report: Option<SolverReport<T>>,
    /// The solved row vector `a = ∂ℓ/∂z⋆ (I − J)⁻¹`.
    pub a_vector: MultiscaleState<T>,
}

impl<T> GradientResult<T> {
    pub fn backward_nfes(&self) -> usize {
        self.backward_report.as_ref().map_or(0, |r| r.nfes)
    }
}

/// Solve for `z⋆` from the map's initial state. The context, and with it any
/// dropout mask, stays fixed for the whole solve.
pub fn solve_forward<T: Real, M: EquilibriumMap<T>>(
    map: &M,
    ctx: &M::Context,
    solver: &SolverConfig,
) -> Result<EquilibriumResult<T>> {
    let z0 = map.initial_state(ctx)?;
    let report = solve(|z| map.apply(ctx, z), &z0, solver)?;
    Ok(EquilibriumResult {
        z_star: report.z_star.clone(),
        forward_report: report,
    })
}

/// Implicit gradient: iterate `a ← aJ + ∂ℓ/∂z⋆` from zero, then one
/// parameter VJP with cotangent `a`.
pub fn implicit_backward<T: Real, M: EquilibriumMap<T>>(
    map: &M,
    ctx: &M::Context,
    result: &EquilibriumResult<T>,
    loss_cotangent: &MultiscaleState<T>,
    solver: &SolverConfig,
) -> Result<GradientResult<T>> {
    result.z_star.same_shape(loss_cotangent)?;
    let trace = map.linearize(ctx, &result.z_star)?;
    let x0 = loss_cotangent.zeros_like();
    let report = solve(
        |x| {
            let vj = map.vjp_state(ctx, &trace, x)?;
            axpy_state(T::one(), &vj, T::one(), loss_cotangent)
        },
        &x0,
        solver,
    )
    .map_err(|e| e.with_certificate(map.certificate()))?;
    let a_vector = report.z_star.clone();
    let param_grads = map.vjp_params(ctx, &trace, &a_vector)?;
    Ok(GradientResult {
        param_grads,
        backward_report: Some(report),
        a_vector,
    })
}

/// Jacobian-free gradient: `(I − J)⁻¹` replaced by the identity.
pub fn jfb_backward<T: Real, M: EquilibriumMap<T>>(
    map: &M,
    ctx: &M::Context,
    result: &EquilibriumResult<T>,
    loss_cotangent: &MultiscaleState<T>,
) -> Result<GradientResult<T>> {
    result.z_star.same_shape(loss_cotangent)?;
    let trace = map.linearize(ctx, &result.z_star)?;
    let param_grads = map.vjp_params(ctx, &trace, loss_cotangent)?;
    Ok(GradientResult {
        param_grads,
        backward_report: None,
        a_vector: loss_cotangent.clone(),
    })
}

/// Largest singular value of `∂f/∂z` at `z`, treating the whole batch as
/// one vector.
///
/// Power iteration on `JᵀJ`: the forward product `Jv` is a central
/// difference of `f`, the transpose product is an exact VJP.
pub fn estimate_jacobian_norm<M: EquilibriumMap<f64>>(
    map: &M,
    ctx: &M::Context,
    z: &MultiscaleState<f64>,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if iters < 1 {
        return Err(Error::Domain("iters must be >= 1".into()));
    }
    let trace = map.linearize(ctx, z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..z.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v = z.from_flat_like(&flat)?;
    let h = 1e-6 * z.norm_sq_total().sqrt().max(1.0);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let n = v.norm_sq_total().sqrt();
        if n == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / n);
        let jv = jvp_central(map, ctx, z, &v, h)?;
        sigma = jv.norm_sq_total().sqrt();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        v = map.vjp_state(ctx, &trace, &jv)?;
        if !v.all_finite() || !sigma.is_finite() {
            return Err(Error::Numerical("non-finite Jacobian probe".into()));
        }
    }
    Ok(sigma)
}

fn jvp_central<M: EquilibriumMap<f64>>(
    map: &M,
    ctx: &M::Context,
    z: &MultiscaleState<f64>,
    v: &MultiscaleState<f64>,
    h: f64,
) -> Result<MultiscaleState<f64>> {
    let plus = map.apply(ctx, &axpy_state(1.0, z, h, v)?)?;
    let minus = map.apply(ctx, &axpy_state(1.0, z, -h, v)?)?;
    let d = axpy_state(0.5 / h, &plus, -0.5 / h, &minus)?;
    if !d.all_finite() {
        return Err(Error::Numerical("non-finite Jacobian probe".into()));
    }
    Ok(d)
}

/// `f(z) = A z + b` on a single flat branch, with `A` and `b` the
/// parameters. Shared by tests and by solver comparisons.
#[derive(Debug, Clone)]
pub struct AffineMap {
    /// Row-major `d × d`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() * b.len() {
            return Err(Error::shape(format!(
                "matrix of {} entries for a vector of {}",
                a.len(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

impl EquilibriumMap<f64> for AffineMap {
    /// Batch size.
    type Context = usize;
    type Trace = MultiscaleState<f64>;

    fn initial_state(&self, batch: &usize) -> Result<MultiscaleState<f64>> {
        MultiscaleState::flat(*batch, vec![0.0; batch * self.dim()])
    }

    fn apply(&self, _: &usize, z: &MultiscaleState<f64>) -> Result<MultiscaleState<f64>> {
        let d = self.dim();
        let t = z.branch(0);
        if t.sample_len() != d {
            return Err(Error::shape(format!("state of width {} for dimension {d}", t.sample_len())));
        }
        let mut out = Vec::with_capacity(t.numel());
        for s in 0..t.batch() {
            let v = t.sample(s);
            for i in 0..d {
                out.push(crate::tensors::dot(&self.a[i * d..(i + 1) * d], v) + self.b[i]);
            }
        }
        MultiscaleState::flat(t.batch(), out)
    }

    fn linearize(&self, _: &usize, z: &MultiscaleState<f64>) -> Result<MultiscaleState<f64>> {
        Ok(z.clone())
    }

    fn vjp_state(&self, _: &usize, _: &MultiscaleState<f64>, v: &MultiscaleState<f64>) -> Result<MultiscaleState<f64>> {
        let d = self.dim();
        let t = v.branch(0);
        let mut out = vec![0.0; t.numel()];
        for s in 0..t.batch() {
            let vs = t.sample(s);
            for i in 0..d {
                for j in 0..d {
                    out[s * d + j] += vs[i] * self.a[i * d + j];
                }
            }
        }
        MultiscaleState::flat(t.batch(), out)
    }

    /// `[∂A, ∂b] = [Σ_s v zᵀ, Σ_s v]`.
    fn vjp_params(&self, _: &usize, z: &MultiscaleState<f64>, v: &MultiscaleState<f64>) -> Result<Vec<Tensor<f64>>> {
        z.same_shape(v)?;
        let d = self.dim();
        let (zt, vt) = (z.branch(0), v.branch(0));
        let mut ga = vec![0.0; d * d];
        let mut gb = vec![0.0; d];
        for s in 0..zt.batch() {
            let (zs, vs) = (zt.sample(s), vt.sample(s));
            for i in 0..d {
                gb[i] += vs[i];
                for j in 0..d {
                    ga[i * d + j] += vs[i] * zs[j];
                }
            }
        }
        Ok(vec![Tensor::new(vec![d, d], ga)?, Tensor::new(vec![d], gb)?])
    }
}

//! Layer operations with forward evaluation, vector–Jacobian products and
//! analytic Lipschitz bounds.
//!
//! The free functions in the submodules are the kernels the model is built
//! from. [`OpSpec`] packages one operation together with its parameters so
//! each kind can be evaluated, differentiated and bounded uniformly.

pub mod conv;
pub mod fusion;
pub mod norm;
pub mod pointwise;
pub mod spectral;

pub use conv::{conv2d, conv2d_input_vjp, conv2d_param_vjp, ConvGeometry};
pub use fusion::{fusion_weights, FusionEntry, FusionRow, FusionWeights};
pub use norm::{clamp_affine, default_groups, group_norm, group_norm_vjp, norm_bound, NormKind};
pub use pointwise::{
    convex_combine, dropout, dropout_mask, scaled_relu, scaled_relu_vjp, upsample_nearest,
    upsample_nearest_vjp,
};
pub use spectral::{project_weights, spectral_norm, PowerState};

use crate::{Error, Mode, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    GroupNorm,
    MeanGroupNorm,
    Relu,
    ScaledRelu,
    Dropout,
    Conv,
    ConvStar,
    UpsampleNearest,
    ConvexCombine,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::GroupNorm,
        OpKind::MeanGroupNorm,
        OpKind::Relu,
        OpKind::ScaledRelu,
        OpKind::Dropout,
        OpKind::Conv,
        OpKind::ConvStar,
        OpKind::UpsampleNearest,
        OpKind::ConvexCombine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::GroupNorm => "GN",
            OpKind::MeanGroupNorm => "MGN",
            OpKind::Relu => "ReLU",
            OpKind::ScaledRelu => "SReLU",
            OpKind::Dropout => "Dropout",
            OpKind::Conv => "Conv",
            OpKind::ConvStar => "ConvStar",
            OpKind::UpsampleNearest => "UpsampleNN",
            OpKind::ConvexCombine => "ConvexCombine",
        }
    }
}

/// A convolution with its geometry.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geom: ConvGeometry,
}

/// One fully parameterized layer operation.
#[derive(Debug, Clone)]
pub enum OpSpec<T> {
    GroupNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        groups: usize,
        eps: f64,
    },
    MeanGroupNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        groups: usize,
    },
    Relu,
    ScaledRelu {
        slope: T,
    },
    /// Variational dropout; the mask is frozen for a whole solve.
    Dropout {
        rate: f64,
        mask: Option<Tensor<T>>,
    },
    /// Unconstrained convolution with its current power-iteration estimate.
    Conv {
        conv: ConvParams<T>,
        spectral_estimate: T,
    },
    /// Convolution whose kernel is kept inside `‖W‖₂ ≤ target`.
    ConvStar { conv: ConvParams<T>, target: T },
    UpsampleNearest { s: usize, t: usize },
    /// Acts on a pair stacked along the leading axis: the first half is `x`,
    /// the second `y`; the result is `(1 − α)x + αy`.
    ConvexCombine { alpha: T },
}

/// Cotangents of an op's parameters, in declaration order
/// (`[W, b]` for convolutions, `[γ, β]` for norms, empty otherwise).
pub type ParamGrads<T> = Vec<Tensor<T>>;

impl<T: Real> OpSpec<T> {
    /// Unconstrained convolution with its spectral norm estimated by `iters`
    /// power iterations.
    pub fn conv(conv: ConvParams<T>, iters: usize, seed: u64) -> Result<Self> {
        let mut st = PowerState::new(conv.weight.dims4()?.1, conv.geom, seed);
        let spectral_estimate = spectral_norm(&conv.weight, conv.geom, iters, &mut st)?;
        Ok(OpSpec::Conv {
            conv,
            spectral_estimate,
        })
    }

    /// Constrained convolution; the kernel is projected onto the `target` ball.
    pub fn conv_star(mut conv: ConvParams<T>, target: T, iters: usize, seed: u64) -> Result<Self> {
        if target <= T::zero() {
            return Err(Error::Domain(format!("target norm must be > 0, got {target}")));
        }
        let mut st = PowerState::new(conv.weight.dims4()?.1, conv.geom, seed);
        let (w, _) = project_weights(&conv.weight, target, conv.geom, iters, &mut st)?;
        conv.weight = w;
        Ok(OpSpec::ConvStar { conv, target })
    }

    pub fn kind(&self) -> OpKind {
        match self {
            OpSpec::GroupNorm { .. } => OpKind::GroupNorm,
            OpSpec::MeanGroupNorm { .. } => OpKind::MeanGroupNorm,
            OpSpec::Relu => OpKind::Relu,
            OpSpec::ScaledRelu { .. } => OpKind::ScaledRelu,
            OpSpec::Dropout { .. } => OpKind::Dropout,
            OpSpec::Conv { .. } => OpKind::Conv,
            OpSpec::ConvStar { .. } => OpKind::ConvStar,
            OpSpec::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            OpSpec::ConvexCombine { .. } => OpKind::ConvexCombine,
        }
    }

    /// Checks the hyperparameter domains.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        match self {
            OpSpec::GroupNorm { eps, .. } if *eps <= 0.0 => bad(format!("eps must be > 0, got {eps}")),
            OpSpec::ScaledRelu { slope } if !(*slope > T::zero() && *slope <= T::one()) => {
                bad(format!("slope must lie in (0, 1], got {slope}"))
            }
            OpSpec::Dropout { rate, .. } if !(0.0..1.0).contains(rate) => {
                bad(format!("dropout rate must lie in [0, 1), got {rate}"))
            }
            OpSpec::ConvStar { target, .. } if *target <= T::zero() => {
                bad(format!("target norm must be > 0, got {target}"))
            }
            OpSpec::ConvexCombine { alpha } if !(*alpha > T::zero() && *alpha < T::one()) => {
                bad(format!("alpha must lie in (0, 1), got {alpha}"))
            }
            OpSpec::UpsampleNearest { s, t } if *s == 0 || *t == 0 => bad("zero scale factor".into()),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, z: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.validate()?;
        match self {
            OpSpec::GroupNorm {
                gamma,
                beta,
                groups,
                eps,
            } => group_norm(z, gamma, beta, *groups, NormKind::Full { eps: *eps }),
            OpSpec::MeanGroupNorm {
                gamma,
                beta,
                groups,
            } => group_norm(z, gamma, beta, *groups, NormKind::MeanOnly),
            OpSpec::Relu => Ok(scaled_relu(z, T::one())),
            OpSpec::ScaledRelu { slope } => Ok(scaled_relu(z, *slope)),
            OpSpec::Dropout { rate, mask } => match mode {
                Mode::Eval => Ok(z.clone()),
                Mode::Train => dropout(z, frozen(mask)?, *rate),
            },
            OpSpec::Conv { conv, .. } | OpSpec::ConvStar { conv, .. } => {
                conv2d(z, &conv.weight, Some(&conv.bias), conv.geom)
            }
            OpSpec::UpsampleNearest { s, t } => upsample_nearest(z, *s, *t),
            OpSpec::ConvexCombine { alpha } => {
                let (x, y) = split_pair(z)?;
                convex_combine(*alpha, &x, &y)
            }
        }
    }

    /// `(Jᵀv, parameter cotangents)` at linearization point `z`.
    pub fn vjp(&self, z: &Tensor<T>, v: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ParamGrads<T>)> {
        self.validate()?;
        match self {
            OpSpec::GroupNorm {
                gamma, groups, eps, ..
            } => {
                let (gx, gg, gb) = group_norm_vjp(z, gamma, v, *groups, NormKind::Full { eps: *eps })?;
                Ok((gx, vec![gg, gb]))
            }
            OpSpec::MeanGroupNorm { gamma, groups, .. } => {
                let (gx, gg, gb) = group_norm_vjp(z, gamma, v, *groups, NormKind::MeanOnly)?;
                Ok((gx, vec![gg, gb]))
            }
            OpSpec::Relu => Ok((scaled_relu_vjp(z, T::one(), v)?, vec![])),
            OpSpec::ScaledRelu { slope } => Ok((scaled_relu_vjp(z, *slope, v)?, vec![])),
            OpSpec::Dropout { rate, mask } => {
                z.same_shape(v)?;
                match mode {
                    Mode::Eval => Ok((v.clone(), vec![])),
                    Mode::Train => Ok((dropout(v, frozen(mask)?, *rate)?, vec![])),
                }
            }
            OpSpec::Conv { conv, .. } | OpSpec::ConvStar { conv, .. } => {
                let gx = conv2d_input_vjp(v, &conv.weight, conv.geom)?;
                let (gw, gb) = conv2d_param_vjp(z, v, conv.weight.shape(), conv.geom)?;
                Ok((gx, vec![gw, gb]))
            }
            OpSpec::UpsampleNearest { s, t } => {
                let (b, c, h, w) = z.dims4()?;
                if v.shape() != [b, c, h * s, w * t] {
                    return Err(Error::shape(format!(
                        "cotangent {:?} does not match upsampled {:?}",
                        v.shape(),
                        [b, c, h * s, w * t]
                    )));
                }
                Ok((upsample_nearest_vjp(v, *s, *t)?, vec![]))
            }
            OpSpec::ConvexCombine { alpha } => {
                let (x, _) = split_pair(z)?;
                x.same_shape(v)?;
                let mut data = v.scale(T::one() - *alpha).into_data();
                data.extend(v.scale(*alpha).into_data());
                Ok((Tensor::new(z.shape().to_vec(), data)?, vec![]))
            }
        }
    }

    /// Analytic Lipschitz bound in the Euclidean norm.
    pub fn lipschitz_bound(&self) -> T {
        match self {
            OpSpec::GroupNorm { gamma, eps, .. } => norm_bound(gamma, NormKind::Full { eps: *eps }),
            OpSpec::MeanGroupNorm { gamma, .. } => norm_bound(gamma, NormKind::MeanOnly),
            OpSpec::Relu => T::one(),
            OpSpec::ScaledRelu { slope } => *slope,
            OpSpec::Dropout { rate, .. } => T::lit(1.0 / (1.0 - rate)),
            OpSpec::Conv {
                spectral_estimate, ..
            } => *spectral_estimate,
            OpSpec::ConvStar { target, .. } => *target,
            OpSpec::UpsampleNearest { s, t } => T::lit(((s * t) as f64).sqrt()),
            OpSpec::ConvexCombine { alpha } => {
                let a = *alpha;
                ((T::one() - a) * (T::one() - a) + a * a).sqrt()
            }
        }
    }
}

fn frozen<T>(mask: &Option<Tensor<T>>) -> Result<&Tensor<T>> {
    mask.as_ref()
        .ok_or_else(|| Error::shape("train-mode dropout needs a frozen mask"))
}

fn split_pair<T: Real>(z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let lead = z.shape()[0];
    if !lead.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "convex combination needs an even leading extent, got {lead}"
        )));
    }
    let mut shape = z.shape().to_vec();
    shape[0] = lead / 2;
    let half = z.numel() / 2;
    Ok((
        Tensor::new(shape.clone(), z.data()[..half].to_vec())?,
        Tensor::new(shape, z.data()[half..].to_vec())?,
    ))
}

//! Group normalization: the standard variance-normalizing form and the
//! mean-only form whose Jacobian per group is `diag(γ)(I − 11ᵀ/d)`.

use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// `γ (z − μ) + β`.
    MeanOnly,
    /// `γ (z − μ) / sqrt(σ² + ε) + β`.
    Full { eps: f64 },
}

/// Default group count for `channels`: `gcd(channels, 8)`.
pub fn default_groups(channels: usize) -> usize {
    let (mut a, mut b) = (channels, 8);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

struct Layout {
    batch: usize,
    channels: usize,
    groups: usize,
    per_group: usize,
    spatial: usize,
}

fn layout<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, groups: usize) -> Result<Layout> {
    let (batch, channels, h, w) = x.dims4()?;
    if groups == 0 || channels % groups != 0 {
        return Err(Error::shape(format!(
            "{channels} channels cannot be split into {groups} groups"
        )));
    }
    if gamma.numel() != channels {
        return Err(Error::shape(format!(
            "affine parameters have {} entries for {channels} channels",
            gamma.numel()
        )));
    }
    Ok(Layout {
        batch,
        channels,
        groups,
        per_group: channels / groups,
        spatial: h * w,
    })
}

impl Layout {
    /// Flat range of group `g` in sample `b`.
    fn group(&self, b: usize, g: usize) -> std::ops::Range<usize> {
        let len = self.per_group * self.spatial;
        let start = b * self.channels * self.spatial + g * len;
        start..start + len
    }

    fn channel_of(&self, g: usize, offset: usize) -> usize {
        g * self.per_group + offset / self.spatial
    }
}

fn stats<T: Real>(v: &[T], kind: NormKind) -> (T, T) {
    let n = T::lit(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let inv = match kind {
        NormKind::MeanOnly => T::one(),
        NormKind::Full { eps } => {
            let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            T::one() / (var + T::lit(eps)).sqrt()
        }
    };
    (mean, inv)
}

pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    kind: NormKind,
) -> Result<Tensor<T>> {
    let l = layout(x, gamma, groups)?;
    gamma.same_shape(beta)?;
    let mut out = x.zeros_like();
    for b in 0..l.batch {
        for g in 0..l.groups {
            let r = l.group(b, g);
            let (mean, inv) = stats(&x.data()[r.clone()], kind);
            for (k, i) in r.enumerate() {
                let c = l.channel_of(g, k);
                out.data_mut()[i] = gamma.data()[c] * (x.data()[i] - mean) * inv + beta.data()[c];
            }
        }
    }
    Ok(out)
}

/// Returns `(Jᵀ gy, ∂γ, ∂β)` at input `x`.
pub fn group_norm_vjp<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    groups: usize,
    kind: NormKind,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let l = layout(x, gamma, groups)?;
    x.same_shape(gy)?;
    let mut gx = x.zeros_like();
    let mut ggamma = gamma.zeros_like();
    let mut gbeta = gamma.zeros_like();
    let mut xhat = Vec::new();
    let mut gxhat = Vec::new();
    for b in 0..l.batch {
        for g in 0..l.groups {
            let r = l.group(b, g);
            let (mean, inv) = stats(&x.data()[r.clone()], kind);
            xhat.clear();
            gxhat.clear();
            for (k, i) in r.clone().enumerate() {
                let c = l.channel_of(g, k);
                let xh = (x.data()[i] - mean) * inv;
                let gv = gy.data()[i];
                ggamma.data_mut()[c] += gv * xh;
                gbeta.data_mut()[c] += gv;
                xhat.push(xh);
                gxhat.push(gamma.data()[c] * gv);
            }
            let n = T::lit(xhat.len() as f64);
            let mean_g = gxhat.iter().copied().sum::<T>() / n;
            match kind {
                NormKind::MeanOnly => {
                    for (k, i) in r.enumerate() {
                        gx.data_mut()[i] = gxhat[k] - mean_g;
                    }
                }
                NormKind::Full { .. } => {
                    let mean_gx = xhat.iter().zip(&gxhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (k, i) in r.enumerate() {
                        gx.data_mut()[i] = inv * (gxhat[k] - mean_g - xhat[k] * mean_gx);
                    }
                }
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Clamp each affine scale into `[−γ̄, γ̄]`.
pub fn clamp_affine<T: Real>(gamma: &Tensor<T>, gamma_bar: T) -> Tensor<T> {
    gamma.map(|g| g.max(-gamma_bar).min(gamma_bar))
}

/// Lipschitz bound of a group norm: `max|γ|` (mean-only) or `max|γ|/√ε`.
pub fn norm_bound<T: Real>(gamma: &Tensor<T>, kind: NormKind) -> T {
    let g = gamma.max_abs();
    match kind {
        NormKind::MeanOnly => g,
        NormKind::Full { eps } => g / T::lit(eps).sqrt(),
    }
}

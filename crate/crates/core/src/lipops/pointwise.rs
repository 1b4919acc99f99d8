//! Activation, dropout, nearest-neighbour upsampling and convex combination.

use rand::Rng;

use crate::{Error, Real, Result, Tensor};

/// `max{0, a·z}` elementwise; `a = 1` is plain ReLU.
pub fn scaled_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| (v * slope).max(T::zero()))
}

/// Subgradient at zero is taken as zero.
pub fn scaled_relu_vjp<T: Real>(x: &Tensor<T>, slope: T, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.same_shape(gy)?;
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > T::zero() { g * slope } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Draw a keep-mask: each entry is 1 with probability `1 − p`, else 0.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            T::one()
        }
    })
}

/// `1/(1−p) · m ⊙ z`. The map is linear, so it is its own VJP.
pub fn dropout<T: Real>(x: &Tensor<T>, mask: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
    x.same_shape(mask)
        .map_err(|e| Error::shape(format!("dropout mask: {e}")))?;
    let scale = T::lit(1.0 / (1.0 - p));
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| scale * m * v)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Replicate each pixel into an `s × t` block.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, s: usize, t: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * s, w * t);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    for (plane, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / s) * w..(oy / s + 1) * w];
            for (ox, o) in chunk[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *o = row[ox / t];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sum over each `s × t` block.
pub fn upsample_nearest_vjp<T: Real>(gy: &Tensor<T>, s: usize, t: usize) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = gy.dims4()?;
    if oh % s != 0 || ow % t != 0 {
        return Err(Error::shape(format!(
            "{oh}x{ow} cotangent is not a {s}x{t} upsample"
        )));
    }
    let (h, w) = (oh / s, ow / t);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let gd = gy.data();
    for (plane, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                chunk[(oy / s) * w + ox / t] += src[oy * ow + ox];
            }
        }
    }
    Ok(out)
}

/// `(1 − α)·x + α·y`.
pub fn convex_combine<T: Real>(alpha: T, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::lincomb(T::one() - alpha, x, alpha, y)
}

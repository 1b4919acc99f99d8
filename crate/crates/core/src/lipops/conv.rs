//! Direct 2-d convolution with zero padding, plus its two adjoints.

use crate::{Error, Real, Result, Tensor};

/// Stride / padding of a convolution together with the spatial extents of
/// its input. These fix the convolution as a linear operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub input: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, input: (usize, usize)) -> Self {
        Self {
            stride,
            padding,
            input,
        }
    }

    /// Size-preserving stride-1 geometry for an odd `k × k` kernel.
    pub fn same(k: usize, input: (usize, usize)) -> Self {
        Self::new(1, k / 2, input)
    }

    /// Output spatial extents for a `kh × kw` kernel.
    pub fn output(&self, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (h, w) = self.input;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + k - pad` lands
/// inside an input of length `len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Plan {
    batch: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Plan {
    fn new(x_shape: (usize, usize, usize, usize), w: &Tensor<impl Real>, geom: ConvGeometry) -> Result<Self> {
        let (batch, cin, h, wd) = x_shape;
        let (cout, wcin, kh, kw) = w.dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if (h, wd) != geom.input {
            return Err(Error::shape(format!(
                "input {h}x{wd} does not match conv geometry {:?}",
                geom.input
            )));
        }
        let (oh, ow) = geom.output(kh, kw)?;
        Ok(Self {
            batch,
            cin,
            cout,
            kh,
            kw,
            h,
            w: wd,
            oh,
            ow,
            stride: geom.stride,
            pad: geom.padding,
        })
    }

    /// Visits every (kernel tap, output row) pair that reads inside the input
    /// as `f(tap, oy, iy, ox_lo, ox_hi, kx)`; column `ox` reads `ox*stride + kx - pad`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for ky in 0..self.kh {
            let (ylo, yhi) = valid_range(ky, self.pad, self.stride, self.h, self.oh);
            for kx in 0..self.kw {
                let (xlo, xhi) = valid_range(kx, self.pad, self.stride, self.w, self.ow);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * self.stride + ky - self.pad;
                    f(ky * self.kw + kx, oy, iy, xlo, xhi, kx);
                }
            }
        }
    }
}

/// `y = W * x + b` for `x` of shape `(B, Cin, H, W)` and `W` of shape
/// `(Cout, Cin, kh, kw)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let p = Plan::new(x.dims4()?, weight, geom)?;
    if let Some(b) = bias {
        if b.numel() != p.cout {
            return Err(Error::shape(format!(
                "bias has {} entries for {} output channels",
                b.numel(),
                p.cout
            )));
        }
    }
    let mut out = Tensor::zeros(&[p.batch, p.cout, p.oh, p.ow]);
    let xd = x.data();
    let wd = weight.data();
    let taps = p.kh * p.kw;
    let od = out.data_mut();
    for b in 0..p.batch {
        for co in 0..p.cout {
            let obase = (b * p.cout + co) * p.oh * p.ow;
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                od[obase..obase + p.oh * p.ow].iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..p.cin {
                let xbase = (b * p.cin + ci) * p.h * p.w;
                let wbase = (co * p.cin + ci) * taps;
                p.for_each_tap(|tap, oy, iy, xlo, xhi, kx| {
                    let wv = wd[wbase + tap];
                    let orow = &mut od[obase + oy * p.ow..obase + (oy + 1) * p.ow];
                    let irow = &xd[xbase + iy * p.w..xbase + (iy + 1) * p.w];
                    if p.stride == 1 {
                        let off = xlo + kx - p.pad;
                        let n = xhi - xlo;
                        for (o, &i) in orow[xlo..xhi].iter_mut().zip(&irow[off..off + n]) {
                            *o += wv * i;
                        }
                    } else {
                        for ox in xlo..xhi {
                            orow[ox] += wv * irow[ox * p.stride + kx - p.pad];
                        }
                    }
                });
            }
        }
    }
    Ok(out)
}

/// Adjoint of the linear part of [`conv2d`] applied to `gy`: `Wᵀ gy`.
pub fn conv2d_input_vjp<T: Real>(
    gy: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (batch, _, _, _) = gy.dims4()?;
    let (_, cin, _, _) = weight.dims4()?;
    let p = Plan::new((batch, cin, geom.input.0, geom.input.1), weight, geom)?;
    check_out(gy, &p)?;
    let mut gx = Tensor::zeros(&[p.batch, p.cin, p.h, p.w]);
    let gd = gy.data();
    let wd = weight.data();
    let taps = p.kh * p.kw;
    let xd = gx.data_mut();
    for b in 0..p.batch {
        for co in 0..p.cout {
            let obase = (b * p.cout + co) * p.oh * p.ow;
            for ci in 0..p.cin {
                let xbase = (b * p.cin + ci) * p.h * p.w;
                let wbase = (co * p.cin + ci) * taps;
                p.for_each_tap(|tap, oy, iy, xlo, xhi, kx| {
                    let wv = wd[wbase + tap];
                    let orow = &gd[obase + oy * p.ow..obase + (oy + 1) * p.ow];
                    let irow = &mut xd[xbase + iy * p.w..xbase + (iy + 1) * p.w];
                    for ox in xlo..xhi {
                        irow[ox * p.stride + kx - p.pad] += wv * orow[ox];
                    }
                });
            }
        }
    }
    Ok(gx)
}

/// Cotangents of the kernel and bias of [`conv2d`] at input `x`.
pub fn conv2d_param_vjp<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    weight_shape: &[usize],
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut gw = Tensor::zeros(weight_shape);
    let p = Plan::new(x.dims4()?, &gw, geom)?;
    check_out(gy, &p)?;
    let mut gb = Tensor::zeros(&[p.cout]);
    let gd = gy.data();
    let xd = x.data();
    let taps = p.kh * p.kw;
    {
        let gwd = gw.data_mut();
        for b in 0..p.batch {
            for co in 0..p.cout {
                let obase = (b * p.cout + co) * p.oh * p.ow;
                for ci in 0..p.cin {
                    let xbase = (b * p.cin + ci) * p.h * p.w;
                    let wbase = (co * p.cin + ci) * taps;
                    p.for_each_tap(|tap, oy, iy, xlo, xhi, kx| {
                        let orow = &gd[obase + oy * p.ow..obase + (oy + 1) * p.ow];
                        let irow = &xd[xbase + iy * p.w..xbase + (iy + 1) * p.w];
                        let mut acc = T::zero();
                        for ox in xlo..xhi {
                            acc += orow[ox] * irow[ox * p.stride + kx - p.pad];
                        }
                        gwd[wbase + tap] += acc;
                    });
                }
            }
        }
    }
    let gbd = gb.data_mut();
    for b in 0..p.batch {
        for (co, g) in gbd.iter_mut().enumerate() {
            let obase = (b * p.cout + co) * p.oh * p.ow;
            *g += gd[obase..obase + p.oh * p.ow].iter().copied().sum::<T>();
        }
    }
    Ok((gw, gb))
}

fn check_out<T: Real>(gy: &Tensor<T>, p: &Plan) -> Result<()> {
    if gy.shape() != [p.batch, p.cout, p.oh, p.ow] {
        return Err(Error::shape(format!(
            "cotangent shape {:?}, expected {:?}",
            gy.shape(),
            [p.batch, p.cout, p.oh, p.ow]
        )));
    }
    Ok(())
}

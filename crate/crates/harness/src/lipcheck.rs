//! Empirical Lipschitz ratios against the analytic bounds.
//!
//! Each check draws random input pairs, half of them independent and half
//! a small perturbation apart (probing the local Jacobian), and reports the
//! largest observed `‖f(a) − f(b)‖ / ‖a − b‖` next to the bound.

use std::io::Write;

use ldeq_core::equilibrium::EquilibriumMap;
use ldeq_core::lipops::{dropout_mask, ConvGeometry, ConvParams, OpKind, OpSpec};
use ldeq_core::model::Model;
use ldeq_core::numfmt::format_g;
use ldeq_core::tensors::axpy_state;
use ldeq_core::{Mode, MultiscaleState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const TABLE_HEADER: &str = "check,empirical,analytic,ratio";

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub name: String,
    /// Largest observed ratio.
    pub empirical: f64,
    pub analytic: f64,
}

impl RatioRow {
    /// Empirical over analytic; at most 1 when the bound is sound.
    pub fn ratio(&self) -> f64 {
        self.empirical / self.analytic
    }
}

pub fn write_table<W: Write>(rows: &[RatioRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TABLE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.name,
            format_g(r.empirical, 6),
            format_g(r.analytic, 6),
            format_g(r.ratio(), 6)
        )?;
    }
    Ok(())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// A representative instance of `kind` with random parameters, and the
/// input shape it acts on.
pub fn sample_op(kind: OpKind, rng: &mut ChaCha8Rng) -> Result<(OpSpec<f64>, Vec<usize>)> {
    let x = vec![1, 4, 8, 8];
    let conv = |rng: &mut ChaCha8Rng, stride| ConvParams {
        weight: uniform(&[3, 4, 3, 3], -1.0, 1.0, rng),
        bias: uniform(&[3], -1.0, 1.0, rng),
        geom: ConvGeometry::new(stride, 1, (8, 8)),
    };
    let seed = rng.gen();
    Ok(match kind {
        OpKind::GroupNorm => (
            OpSpec::GroupNorm {
                gamma: uniform(&[4], -1.5, 1.5, rng),
                beta: uniform(&[4], -1.0, 1.0, rng),
                groups: 2,
                eps: 1e-5,
            },
            x,
        ),
        OpKind::MeanGroupNorm => (
            OpSpec::MeanGroupNorm {
                gamma: uniform(&[4], -1.5, 1.5, rng),
                beta: uniform(&[4], -1.0, 1.0, rng),
                groups: 2,
            },
            x,
        ),
        OpKind::Relu => (OpSpec::Relu, x),
        OpKind::ScaledRelu => (OpSpec::ScaledRelu { slope: 0.4 }, x),
        OpKind::Dropout => (
            OpSpec::Dropout {
                rate: 0.3,
                mask: Some(dropout_mask(&x, 0.3, rng)),
            },
            x,
        ),
        OpKind::Conv => (OpSpec::conv(conv(rng, 1), 500, seed)?, x),
        OpKind::ConvStar => (OpSpec::conv_star(conv(rng, 2), 2.0, 500, seed)?, x),
        OpKind::UpsampleNearest => (OpSpec::UpsampleNearest { s: 2, t: 3 }, x),
        OpKind::ConvexCombine => (OpSpec::ConvexCombine { alpha: 0.3 }, vec![2, 4, 8, 8]),
    })
}

/// Largest ratio of `op` over `pairs` random pairs.
pub fn op_ratio(op: &OpSpec<f64>, shape: &[usize], pairs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let a = uniform(shape, -1.0, 1.0, rng);
        let b = if k % 2 == 0 {
            uniform(shape, -1.0, 1.0, rng)
        } else {
            Tensor::lincomb(1.0, &a, 1e-4, &uniform(shape, -1.0, 1.0, rng))?
        };
        let den = Tensor::lincomb(1.0, &a, -1.0, &b)?.norm();
        let (fa, fb) = (op.apply(&a, Mode::Train)?, op.apply(&b, Mode::Train)?);
        worst = worst.max(Tensor::lincomb(1.0, &fa, -1.0, &fb)?.norm() / den);
    }
    Ok(worst)
}

/// One row per op kind.
pub fn op_ratios(pairs: usize, seed: u64) -> Result<Vec<RatioRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OpKind::ALL
        .iter()
        .map(|&kind| {
            let (op, shape) = sample_op(kind, &mut rng)?;
            Ok(RatioRow {
                name: kind.name().to_owned(),
                empirical: op_ratio(&op, &shape, pairs, &mut rng)?,
                analytic: op.lipschitz_bound(),
            })
        })
        .collect()
}

fn random_state(template: &MultiscaleState<f64>, scale: f64, rng: &mut ChaCha8Rng) -> Result<MultiscaleState<f64>> {
    let v: Vec<f64> = (0..template.numel()).map(|_| rng.gen_range(-scale..scale)).collect();
    Ok(template.from_flat_like(&v)?)
}

fn ratios(fa: &MultiscaleState<f64>, fb: &MultiscaleState<f64>, den: &[f64]) -> Result<f64> {
    let num = axpy_state(1.0, fa, -1.0, fb)?.sample_norms();
    Ok(num.iter().zip(den).map(|(n, d)| n / d).fold(0.0, f64::max))
}

/// Residual block, each fusion row, post-fusion block and the whole map
/// of `model`, against the bounds it certifies in `mode`. Pairs are
/// evaluated `chunk` at a time on random inputs.
pub fn model_ratios(model: &Model<f64>, pairs: usize, chunk: usize, mode: Mode, seed: u64) -> Result<Vec<RatioRow>> {
    let cfg = model.config();
    let n = cfg.branches();
    let bound = model.bound(mode);
    let mut worst = vec![0.0f64; n + 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < pairs {
        let b = chunk.min(pairs - done);
        let x = uniform(&[b, cfg.input_channels, cfg.height, cfg.width], 0.0, 1.0, &mut rng);
        let masks = model.draw_masks(b, &mut rng);
        let ctx = model.context(&x, mode, masks)?;
        let t = model.initial_state(&ctx)?;
        let za = random_state(&t, 1.0, &mut rng)?;
        let far = random_state(&t, 1.0, &mut rng)?;
        let near = axpy_state(1.0, &za, 1.0, &random_state(&t, 1e-4, &mut rng)?)?;
        // even samples pair with an independent state, odd ones with a nearby one
        let mut zb = far;
        for (k, dst) in zb.branches_mut().iter_mut().enumerate() {
            for s in (1..b).step_by(2) {
                dst.sample_mut(s).copy_from_slice(near.branch(k).sample(s));
            }
        }
        let den = axpy_state(1.0, &za, -1.0, &zb)?.sample_norms();
        worst[0] = worst[0].max(ratios(&model.residual_stage(&ctx, &za)?, &model.residual_stage(&ctx, &zb)?, &den)?);
        let (fa, fb) = (model.fusion_stage(&ctx, &za)?, model.fusion_stage(&ctx, &zb)?);
        for i in 0..n {
            let d = Tensor::lincomb(1.0, fa.branch(i), -1.0, fb.branch(i))?;
            for (s, den_s) in den.iter().enumerate() {
                let num = d.sample(s).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst[1 + i] = worst[1 + i].max(num / den_s);
            }
        }
        worst[n + 1] = worst[n + 1].max(ratios(&model.post_stage(&ctx, &za)?, &model.post_stage(&ctx, &zb)?, &den)?);
        worst[n + 2] = worst[n + 2].max(ratios(&model.apply(&ctx, &za)?, &model.apply(&ctx, &zb)?, &den)?);
        done += b;
    }
    let mut rows = vec![RatioRow {
        name: "residual".into(),
        empirical: worst[0],
        analytic: bound.residual,
    }];
    for i in 0..n {
        rows.push(RatioRow {
            name: format!("fusion[{}]", i + 1),
            empirical: worst[1 + i],
            analytic: bound.fusion[i],
        });
    }
    rows.push(RatioRow {
        name: "post_fusion".into(),
        empirical: worst[n + 1],
        analytic: bound.post_fusion,
    });
    rows.push(RatioRow {
        name: "f_theta".into(),
        empirical: worst[n + 2],
        analytic: bound.overall,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldeq_core::budget::LipschitzConfig;
    use ldeq_core::model::ModelConfig;

    #[test]
    fn op_rows_are_sound() {
        let rows = op_ratios(200, 3).unwrap();
        assert_eq!(rows.len(), OpKind::ALL.len());
        for r in &rows {
            assert!(r.ratio() <= 1.0 + 1e-9, "{r:?}");
        }
        let up = rows.iter().find(|r| r.name == OpKind::UpsampleNearest.name()).unwrap();
        assert!((up.empirical - 6f64.sqrt()).abs() < 1e-9 * 6f64.sqrt());
    }

    #[test]
    fn model_rows_are_sound() {
        let cfg = ModelConfig {
            channels: vec![2, 4],
            height: 8,
            width: 8,
            lip: LipschitzConfig {
                branches: 2,
                ..LipschitzConfig::default()
            },
            ..ModelConfig::default()
        };
        let m = Model::<f64>::build(&cfg).unwrap();
        let rows = model_ratios(&m, 64, 16, Mode::Train, 0).unwrap();
        assert_eq!(rows.len(), 2 + 3);
        for r in &rows {
            assert!(r.ratio() <= 1.0 + 1e-9, "{r:?}");
        }
        let mut out = Vec::new();
        write_table(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(TABLE_HEADER));
        assert_eq!(text.lines().count(), rows.len() + 1);
    }
}

//! Structural properties of the multiscale map: branch independence,
//! per-block bounds and certified contraction.

use ldeq_core::budget::{calibrate_slope, overall_bound, LipschitzConfig};
use ldeq_core::equilibrium::{estimate_jacobian_norm, implicit_backward, solve_forward, EquilibriumMap};
use ldeq_core::model::{Model, ModelConfig, ModelContext};
use ldeq_core::solvers::{ResidualMetric, SolverConfig};
use ldeq_core::{Mode, MultiscaleState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg3() -> ModelConfig {
    ModelConfig {
        channels: vec![2, 4, 4],
        height: 8,
        width: 8,
        lip: LipschitzConfig {
            branches: 3,
            slope: 1.0,
            ..LipschitzConfig::default()
        },
        seed: 5,
        ..ModelConfig::default()
    }
}

fn random_state(template: &MultiscaleState<f64>, rng: &mut ChaCha8Rng, scale: f64) -> MultiscaleState<f64> {
    let v: Vec<f64> = (0..template.numel()).map(|_| rng.gen_range(-scale..scale)).collect();
    template.from_flat_like(&v).unwrap()
}

fn context(m: &Model<f64>, batch: usize, rng: &mut ChaCha8Rng, mode: Mode) -> ModelContext<f64> {
    let c = m.config();
    let x = Tensor::from_fn(&[batch, c.input_channels, c.height, c.width], |_| rng.gen_range(0.0..1.0));
    let masks = m.draw_masks(batch, rng);
    m.context(&x, mode, masks).unwrap()
}

fn sample_ratios(
    fa: &MultiscaleState<f64>,
    fb: &MultiscaleState<f64>,
    a: &MultiscaleState<f64>,
    b: &MultiscaleState<f64>,
) -> Vec<f64> {
    let num = ldeq_core::tensors::axpy_state(1.0, fa, -1.0, fb).unwrap().sample_norms();
    let den = ldeq_core::tensors::axpy_state(1.0, a, -1.0, b).unwrap().sample_norms();
    num.iter().zip(den).map(|(n, d)| n / d).collect()
}

#[test]
fn residual_and_post_act_branchwise() {
    let m = Model::<f64>::build(&cfg3()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ctx = context(&m, 2, &mut rng, Mode::Train);
    let z = random_state(&m.initial_state(&ctx).unwrap(), &mut rng, 1.0);
    let base_res = m.residual_stage(&ctx, &z).unwrap();
    let base_post = m.post_stage(&ctx, &z).unwrap();
    for j in 0..3 {
        let mut zj = z.clone();
        zj.branches_mut()[j].scale_in_place(0.0);
        let res = m.residual_stage(&ctx, &zj).unwrap();
        let post = m.post_stage(&ctx, &zj).unwrap();
        for i in (0..3).filter(|&i| i != j) {
            assert_eq!(res.branch(i), base_res.branch(i));
            assert_eq!(post.branch(i), base_post.branch(i));
        }
    }
}

#[test]
fn fusion_rows_within_branch_bounds() {
    let cfg = cfg3();
    let m = Model::<f64>::build(&cfg).unwrap();
    let want = overall_bound(&cfg.lip).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ctx = context(&m, 500, &mut rng, Mode::Eval);
    let t = m.initial_state(&ctx).unwrap();
    let (a, b) = (random_state(&t, &mut rng, 1.0), random_state(&t, &mut rng, 1.0));
    let (fa, fb) = (m.fusion_stage(&ctx, &a).unwrap(), m.fusion_stage(&ctx, &b).unwrap());
    let den = ldeq_core::tensors::axpy_state(1.0, &a, -1.0, &b).unwrap().sample_norms();
    for i in 0..3 {
        let d = Tensor::lincomb(1.0, fa.branch(i), -1.0, fb.branch(i)).unwrap();
        for s in 0..500 {
            let num: f64 = d.sample(s).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num <= want.fusion[i] * den[s] * (1.0 + 1e-9));
        }
    }
}

#[test]
fn whole_map_within_certificate() {
    for mode in [Mode::Train, Mode::Eval] {
        let cfg = cfg3();
        let m = Model::<f64>::build(&cfg).unwrap();
        let l = m.bound(mode).overall;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = context(&m, 200, &mut rng, mode);
        let t = m.initial_state(&ctx).unwrap();
        let a = random_state(&t, &mut rng, 1.0);
        // half distant pairs, half near pairs probing the local Jacobian
        let mut b = random_state(&t, &mut rng, 1.0);
        let near = ldeq_core::tensors::axpy_state(1.0, &a, 1.0, &random_state(&t, &mut rng, 1e-4)).unwrap();
        for (k, dst) in b.branches_mut().iter_mut().enumerate() {
            for s in 100..200 {
                dst.sample_mut(s).copy_from_slice(near.branch(k).sample(s));
            }
        }
        let r = sample_ratios(&m.apply(&ctx, &a).unwrap(), &m.apply(&ctx, &b).unwrap(), &a, &b);
        let worst = r.iter().copied().fold(0.0, f64::max);
        assert!(worst <= l * (1.0 + 1e-6), "{worst} > {l}");
    }
}

#[test]
fn injection_leaves_bound_unchanged() {
    let cfg = cfg3();
    let m = Model::<f64>::build(&cfg).unwrap();
    let l = m.bound(Mode::Eval).overall;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ctx = context(&m, 100, &mut rng, Mode::Eval);
    let zero_x = m.eval_context(&ctx.x.zeros_like()).unwrap();
    let t = m.initial_state(&ctx).unwrap();
    let (a, b) = (random_state(&t, &mut rng, 1.0), random_state(&t, &mut rng, 1.0));
    for c in [&ctx, &zero_x] {
        let r = sample_ratios(&m.apply(c, &a).unwrap(), &m.apply(c, &b).unwrap(), &a, &b);
        assert!(r.iter().all(|&v| v <= l * (1.0 + 1e-9)));
    }
    // u(x) only shifts the residual pre-activation, so Ĥ holds for any x
    let h = overall_bound(&cfg.lip).unwrap().residual;
    for c in [&ctx, &zero_x] {
        let r = sample_ratios(&m.residual_stage(c, &a).unwrap(), &m.residual_stage(c, &b).unwrap(), &a, &b);
        assert!(r.iter().all(|&v| v <= h * (1.0 + 1e-9)));
    }
}

#[test]
fn certified_model_converges_and_backward_contracts() {
    let lip = LipschitzConfig {
        branches: 3,
        ..LipschitzConfig::default()
    };
    let a = calibrate_slope(&lip, 0.8).unwrap();
    let cfg = ModelConfig {
        lip: LipschitzConfig { slope: a, ..lip },
        ..cfg3()
    };
    let m = Model::<f64>::build(&cfg).unwrap();
    let l = m.bound(Mode::Train).overall;
    assert!((l - 0.8).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ctx = context(&m, 4, &mut rng, Mode::Train);
    let solver = SolverConfig::banach(1e-10, ResidualMetric::Absolute, 200);
    let r = solve_forward(&m, &ctx, &solver).unwrap();
    assert!(r.forward_report.converged);
    for w in r.forward_report.residual_trace.windows(2) {
        assert!(w[1] <= (l + 0.05) * w[0]);
    }
    let cot = random_state(&r.z_star, &mut rng, 1.0);
    let g = implicit_backward(&m, &ctx, &r, &cot, &solver).unwrap();
    let rep = g.backward_report.unwrap();
    assert!(rep.converged);
    for w in rep.residual_trace.windows(2) {
        assert!(w[1] <= (l + 0.05) * w[0]);
    }
    let j = estimate_jacobian_norm(&m, &ctx, &r.z_star, 20, 0).unwrap();
    assert!(j <= l * 1.001, "{j}");
}

#[test]
fn activation_pattern_tracks_signs() {
    let m = Model::<f64>::build(&cfg3()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ctx = context(&m, 2, &mut rng, Mode::Train);
    let z = random_state(&m.initial_state(&ctx).unwrap(), &mut rng, 1.0);
    let p = m.activation_pattern(&ctx, &z).unwrap();
    assert_eq!(p, m.activation_pattern(&ctx, &z).unwrap());
    assert!(p.iter().any(|&b| b) && p.iter().any(|&b| !b));
    let far = random_state(&z, &mut rng, 5.0);
    assert_ne!(p, m.activation_pattern(&ctx, &far).unwrap());
}

//! The training loop end to end on small synthetic problems.

use ldeq_harness::config::{parse_config, BackwardKind};
use ldeq_harness::data::load_dataset;
use ldeq_harness::metrics::read_metrics;
use ldeq_harness::train::{evaluate, train_on, StepOutcome, Trainer};
use ldeq_harness::RunConfig;

fn small(extra: &str) -> RunConfig {
    parse_config(&format!(
        "[model]\nchannels = 2,4\nheight = 8\nwidth = 8\nclasses = 3\ntarget_l = 0.8\n\
         [train]\nepochs = 1\nbatch_size = 8\nseed = 4\n[data]\nsamples = 48\n{extra}"
    ))
    .unwrap()
}

#[test]
fn first_loss_is_near_uniform() {
    let cfg = small("");
    let data = load_dataset(&cfg).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    let idx = data.sequential(cfg.batch_size).remove(0);
    let (x, y) = data.batch(&idx);
    match t.step(1, &x, &y).unwrap() {
        StepOutcome::Done { row, .. } => {
            let ln3 = 3f64.ln();
            assert!((row.loss - ln3).abs() < 0.2 * ln3, "loss {}", row.loss);
            assert_eq!(row.step, 1);
        }
        StepOutcome::Diverged(m) => panic!("{m}"),
    }
}

#[test]
fn one_epoch_converges_and_logs() {
    let cfg = small("");
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_on(&cfg, &data, Some(dir.path())).unwrap();
    let e = &out.epochs[0];
    assert_eq!((e.steps, e.divergent, e.unconverged), (6, 0, 0));
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.step, k + 1);
        assert!(r.fwd_nfes <= cfg.solver_fwd.max_iter);
        assert!(r.budget_l <= 1.0);
        assert!(r.bwd_nfes > 0);
    }
    assert!(dir.path().join("checkpoint").join("weights.bin").exists());
}

#[test]
fn jfb_skips_the_backward_solve() {
    let cfg = small("");
    let cfg = RunConfig {
        backward: BackwardKind::Jfb,
        ..cfg
    };
    let data = load_dataset(&cfg).unwrap();
    let out = train_on(&cfg, &data, None).unwrap();
    assert!(!out.rows.is_empty());
    assert!(out.rows.iter().all(|r| r.bwd_nfes == 0 && r.bwd_residual == 0.0));
}

#[test]
fn untrained_model_is_at_chance() {
    let cfg = small("samples = 300\n");
    let data = load_dataset(&cfg).unwrap();
    let model = Trainer::new(&cfg).unwrap().into_model();
    let a = evaluate(&model, &data, &cfg.solver_fwd, 32).unwrap();
    assert!((a.accuracy - 1.0 / 3.0).abs() <= 0.1, "accuracy {}", a.accuracy);
    let b = evaluate(&model, &data, &cfg.solver_fwd, 32).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.converged_fraction, 1.0);
}

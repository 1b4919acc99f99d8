//! Training and evaluation loops.
//!
//! Each step solves for `z⋆` with the batch's dropout masks frozen, takes
//! the cross-entropy of the classifier on `z⋆`, back-propagates through the
//! equilibrium (implicitly or Jacobian-free), applies Adam and re-projects
//! the constrained parameters.

use std::path::Path;
use std::time::Instant;

use ldeq_core::equilibrium::{implicit_backward, jfb_backward, solve_forward};
use ldeq_core::model::{cross_entropy, Model};
use ldeq_core::solvers::SolverConfig;
use ldeq_core::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{BackwardKind, RunConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::optim::Adam;

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Done {
        row: MetricsRow,
        correct: usize,
        fwd_converged: bool,
    },
    /// A solve produced non-finite values; the parameters are untouched.
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub divergent: usize,
    /// Completed steps whose forward solve hit the iteration cap.
    pub unconverged: usize,
    pub mean_loss: f64,
    /// Fraction of samples classified correctly during the epoch's steps.
    pub accuracy: f64,
    pub mean_fwd_nfes: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub model: Model<f32>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

pub struct Trainer {
    cfg: RunConfig,
    model: Model<f32>,
    opt: Adam<f32>,
    mask_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Model::build(&cfg.model)?;
        Ok(Self::from_model(cfg, model))
    }

    pub fn from_model(cfg: &RunConfig, model: Model<f32>) -> Self {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mask_rng.set_stream(0x6d61736b);
        Self {
            cfg: cfg.clone(),
            model,
            opt: Adam::new(cfg.lr),
            mask_rng,
            step: 0,
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    /// One optimisation step on a batch.
    pub fn step(&mut self, epoch: usize, x: &Tensor<f32>, labels: &[usize]) -> Result<StepOutcome> {
        let start = Instant::now();
        let masks = self.model.draw_masks(labels.len(), &mut self.mask_rng);
        let ctx = self.model.context(x, Mode::Train, masks)?;
        let fwd = match solve_forward(&self.model, &ctx, &self.cfg.solver_fwd) {
            Ok(r) => r,
            Err(e @ ldeq_core::Error::Divergence { .. }) => {
                return Ok(StepOutcome::Diverged(e.with_context("forward").to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let rep = &fwd.forward_report;
        if !rep.converged {
            log::debug!(
                "step {}: forward stopped at residual {:.3e} after {} iterations",
                self.step + 1,
                rep.final_residual(),
                rep.nfes
            );
        }
        let logits = self.model.classify(&fwd.z_star)?;
        let (loss, g_logits, correct) = cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Ok(StepOutcome::Diverged(format!("non-finite loss {loss}")));
        }
        let (gz, gw, gb) = self.model.classify_vjp(&fwd.z_star, &g_logits)?;
        let grads = match self.cfg.backward {
            BackwardKind::Implicit => implicit_backward(&self.model, &ctx, &fwd, &gz, &self.cfg.solver_bwd),
            BackwardKind::Jfb => jfb_backward(&self.model, &ctx, &fwd, &gz),
        };
        let mut grads = match grads {
            Ok(g) => g,
            Err(e @ ldeq_core::Error::Divergence { .. }) => {
                return Ok(StepOutcome::Diverged(e.with_context("backward").to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        if grads.param_grads.iter().any(|g| !g.all_finite()) {
            return Ok(StepOutcome::Diverged("non-finite gradient".into()));
        }
        let (hw, hb) = self.model.head_ids();
        grads.param_grads[hw] = gw;
        grads.param_grads[hb] = gb;
        self.opt.step(self.model.params_mut().tensors_mut(), &grads.param_grads);
        self.model.project_all()?;
        if !self.cfg.model.variant.constrain_conv {
            // keep the estimates behind the reported bound current
            self.model.refresh_estimates(self.cfg.model.step_iters)?;
        }
        self.step += 1;
        let (bwd_nfes, bwd_residual) = match &grads.backward_report {
            Some(r) => (r.nfes, r.final_residual()),
            None => (0, 0.0),
        };
        let row = MetricsRow {
            epoch,
            step: self.step,
            loss: f64::from(loss),
            accuracy: correct as f64 / labels.len() as f64,
            fwd_nfes: rep.nfes,
            bwd_nfes,
            fwd_residual: rep.final_residual(),
            bwd_residual,
            budget_l: self.model.bound(Mode::Train).overall,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok(StepOutcome::Done {
            row,
            correct,
            fwd_converged: rep.converged,
        })
    }
}

/// Train on `data`, appending to `<out>/metrics.csv` and rewriting
/// `<out>/checkpoint` after every epoch when `out` is given.
pub fn train_on(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let batches = data.batches(cfg.batch_size, cfg.seed, epoch);
        let mut s = EpochSummary {
            epoch,
            steps: batches.len(),
            divergent: 0,
            unconverged: 0,
            mean_loss: 0.0,
            accuracy: 0.0,
            mean_fwd_nfes: 0.0,
        };
        let (mut seen, mut correct_total, mut done) = (0usize, 0usize, 0usize);
        for idx in &batches {
            let (x, y) = data.batch(idx);
            match trainer.step(epoch, &x, &y)? {
                StepOutcome::Done {
                    row,
                    correct,
                    fwd_converged,
                } => {
                    if !fwd_converged {
                        s.unconverged += 1;
                    }
                    s.mean_loss += row.loss;
                    s.mean_fwd_nfes += row.fwd_nfes as f64;
                    seen += y.len();
                    correct_total += correct;
                    done += 1;
                    if let Some(w) = writer.as_mut() {
                        w.append(&row)?;
                    }
                    rows.push(row);
                }
                StepOutcome::Diverged(msg) => {
                    s.divergent += 1;
                    log::warn!("epoch {epoch}: skipping step, {msg}");
                }
            }
        }
        if 2 * s.divergent > s.steps {
            return Err(HarnessError::Aborted {
                epoch,
                divergent: s.divergent,
                steps: s.steps,
            });
        }
        if done > 0 {
            s.mean_loss /= done as f64;
            s.mean_fwd_nfes /= done as f64;
        }
        s.accuracy = if seen > 0 { correct_total as f64 / seen as f64 } else { 0.0 };
        if s.unconverged > 0 {
            log::warn!("epoch {epoch}: {} of {done} forward solves did not converge", s.unconverged);
        }
        log::info!(
            "epoch {epoch}: loss {:.4} accuracy {:.3} fwd nfes {:.2} L {:.4}",
            s.mean_loss,
            s.accuracy,
            s.mean_fwd_nfes,
            trainer.model().bound(Mode::Train).overall
        );
        if let Some(dir) = out {
            checkpoint::save(trainer.model(), cfg, &dir.join("checkpoint"))?;
        }
        epochs.push(s);
    }
    Ok(TrainOutcome {
        rows,
        epochs,
        model: trainer.into_model(),
    })
}

/// Load the configured data and train, writing into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    train_on(cfg, &data, Some(&cfg.out_dir))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean forward NFEs per batch solve.
    pub mean_nfes: f64,
    pub mean_residual: f64,
    pub converged_fraction: f64,
}

/// Dropout-free accuracy and solver statistics over `data`.
pub fn evaluate(model: &Model<f32>, data: &Dataset, solver: &SolverConfig, batch_size: usize) -> Result<EvalReport> {
    let (mut correct, mut nfes, mut res, mut conv, mut solves) = (0usize, 0.0, 0.0, 0usize, 0usize);
    for idx in data.sequential(batch_size) {
        let (x, y) = data.batch(&idx);
        let ctx = model.eval_context(&x)?;
        let r = solve_forward(model, &ctx, solver)?;
        let logits = model.classify(&r.z_star)?;
        correct += cross_entropy(&logits, &y)?.2;
        nfes += r.forward_report.nfes as f64;
        res += r.forward_report.final_residual();
        conv += usize::from(r.forward_report.converged);
        solves += 1;
    }
    let n = solves.max(1) as f64;
    Ok(EvalReport {
        samples: data.len(),
        accuracy: correct as f64 / data.len().max(1) as f64,
        mean_nfes: nfes / n,
        mean_residual: res / n,
        converged_fraction: conv as f64 / n,
    })
}

//! Optimisation: AdamW, the WSD schedule, the per-step loop and the
//! two-phase run drivers.

mod adamw;
mod config;
mod metrics;
mod run;
mod schedule;
mod sweep;

use std::time::Instant;

pub use adamw::{clip_grad_norm, global_norm, AdamW};
pub use config::{DataSpec, EvalSpec, RunConfig, SuperpositionSpec, TrainPlan};
pub use metrics::{first_difference, read_metrics, MetricsRecord, MetricsWriter};
pub use run::{load_corpora, run_ablation, run_two_phase, run_with_corpora, AblationKind, RunOutcome};
pub use schedule::wsd_lr;
pub use sweep::{run_sweep, SweepCell, SweepGrid, SweepReport};

use crate::checkpoint::{Checkpoint, StreamPosition};
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::losses::{attach_loss, BagWeighting, MceVariant, Phase};
use crate::model::{Ablation, ModelState};
use crate::tensor::{Graph, Scalar};

/// What one phase optimises.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub phase: Phase,
    pub ablation: Ablation,
    pub variant: MceVariant,
    pub weighting: BagWeighting,
}

impl Objective {
    /// Plain next-token training.
    pub fn next_token() -> Self {
        Objective {
            phase: Phase::Recovery,
            ablation: Ablation::None,
            variant: MceVariant::UniformSimplified,
            weighting: BagWeighting::Uniform,
        }
    }

    pub fn superposition(spec: &SuperpositionSpec) -> Self {
        Objective {
            phase: Phase::Superposition,
            ablation: spec.ablation,
            variant: spec.mce_variant,
            weighting: spec.weighting,
        }
    }

    /// Label written to the metrics log.
    pub fn loss_kind(&self) -> &'static str {
        match (self.phase, self.ablation) {
            (Phase::Recovery, _) | (_, Ablation::InputOnly | Ablation::None) => "ce",
            _ => match (self.variant, self.weighting) {
                (MceVariant::Alt, _) => "mce_alt",
                (MceVariant::UniformCorrected, _) => "mce_corrected",
                (_, BagWeighting::Uniform) => "mce",
                _ => "mce_weighted",
            },
        }
    }
}

/// Every step allocates and frees the same large activation buffers. glibc
/// hands blocks above its mmap threshold straight back to the kernel, so each
/// step would pay for fresh zeroed pages; keep them on the heap instead.
fn keep_freed_buffers() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        });
    }
}

/// Model, optimizer and data stream for one phase of training.
#[derive(Debug)]
pub struct Trainer<T> {
    pub model: ModelState<T>,
    pub opt: AdamW,
    pub plan: TrainPlan,
    pub objective: Objective,
    /// Completed steps (global across phases).
    pub step: usize,
    pub stream: BatchStream,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelState<T>, plan: TrainPlan, objective: Objective, stream: BatchStream) -> Self {
        keep_freed_buffers();
        let opt = AdamW::new(&model.params, plan.beta1, plan.beta2, plan.eps, plan.weight_decay);
        Trainer {
            model,
            opt,
            plan,
            objective,
            step: 0,
            stream: stream.wrapping(true),
            started: Instant::now(),
        }
    }

    /// Continue from a checkpoint. The stream is positioned where the
    /// checkpoint left off.
    pub fn resume(ckpt: Checkpoint<T>, plan: TrainPlan, objective: Objective, stream: BatchStream) -> Self {
        let mut t = Trainer::new(ckpt.model, plan, objective, stream);
        if let Some(opt) = ckpt.optimizer {
            t.opt = opt;
        }
        t.step = ckpt.step;
        t.stream
            .seek(ckpt.stream.cursor, ckpt.stream.epoch, ckpt.stream.tokens_consumed);
        t
    }

    pub fn with_clock(mut self, started: Instant) -> Self {
        self.started = started;
        self
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            phase: self.objective.phase,
            stream: StreamPosition {
                cursor: self.stream.cursor,
                epoch: self.stream.epoch,
                tokens_consumed: self.stream.tokens_consumed,
            },
            optimizer: Some(self.opt.clone()),
        }
    }

    /// Loss and parameter gradients on the next batch, without updating.
    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<T>>)> {
        let batch = self
            .stream
            .next_batch()
            .ok_or_else(|| Error::Data("data stream ended".into()))??;
        let o = self.objective;
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, &batch.inputs, o.ablation)?;
        let (root, report) = attach_loss(&mut g, fwd.logits, o.phase, &batch.labels, o.variant, o.weighting)?;
        g.backward(root)?;
        let grads = fwd
            .params
            .iter()
            .zip(&self.model.params)
            .map(|(&v, p)| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.numel()])
            })
            .collect();
        Ok((report.value, grads))
    }

    /// One optimisation step. Returns the metrics record for it.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let lr = wsd_lr(self.step, &self.plan);
        let (loss, mut grads) = self.loss_and_grads()?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
        }
        if let Some(c) = self.plan.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        self.opt.step(&mut self.model.params, &grads, lr)?;
        if !self.model.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after step {}",
                self.step
            )));
        }
        let rec = MetricsRecord {
            step: self.step,
            phase: self.objective.phase,
            loss_kind: self.objective.loss_kind().into(),
            loss,
            lr,
            data_tokens_seen: self.stream.tokens_consumed,
            wallclock: self.started.elapsed().as_secs_f64(),
            abort: None,
        };
        self.step += 1;
        Ok(rec)
    }
}

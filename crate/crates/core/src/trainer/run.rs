//! Two-phase run driver and ablation entry points.
//!
//! A run directory holds `config.toml` (the resolved config), `metrics.jsonl`,
//! `checkpoints/` and `summary.json`. Steps `[0, boundary)` superpose; the
//! boundary checkpoint is written to disk and the recovery phase starts from
//! the file, never from in-memory state.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{MetricsRecord, MetricsWriter, Objective, RunConfig, Trainer};
use crate::analysis::eval_ce;
use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, BatchLayout, Corpus};
use crate::error::{Error, Result};
use crate::losses::Phase;
use crate::model::{Ablation, ModelState};
use crate::tensor::{Precision, Scalar};

/// Summary written to `summary.json` and returned to callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub s: usize,
    pub r: f64,
    pub steps: usize,
    /// First recovery step.
    pub boundary: usize,
    /// Training loss of the last step.
    pub final_loss: f64,
    /// Next-token CE of the final model on the held-out tokens.
    pub final_eval_ce: f64,
    pub data_tokens_seen: u64,
    pub wallclock: f64,
}

impl RunOutcome {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("summary.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Variants of the superposition experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Full,
    InputOnly,
    OutputOnly,
    /// Full superposition, then fresh embedding and head at the boundary.
    ReinitIo,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(AblationKind::Full),
            "input_only" => Ok(AblationKind::InputOnly),
            "output_only" => Ok(AblationKind::OutputOnly),
            "reinit_io" => Ok(AblationKind::ReinitIo),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

/// Training and held-out corpora for `config`.
///
/// The held-out part is cut from the end of the corpus. With no held-out
/// tokens the training corpus doubles as the evaluation set.
pub fn load_corpora(config: &RunConfig) -> Result<(Arc<Corpus>, Arc<Corpus>)> {
    let corpus = config.data.load(None)?;
    if corpus.vocab_size > config.model.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model.vocab {}",
            corpus.vocab_size, config.model.vocab
        )));
    }
    if config.eval.holdout_tokens == 0 {
        let c = Arc::new(corpus);
        return Ok((c.clone(), c));
    }
    let (train, holdout) = corpus.split_holdout(config.eval.holdout_tokens)?;
    Ok((Arc::new(train), Arc::new(holdout)))
}

/// Load data per `config.data` and run.
pub fn run_two_phase(config: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let (train, holdout) = load_corpora(config)?;
    run_with_corpora(config, train, holdout, dir)
}

/// Switch `config` to the requested ablation and run it.
pub fn run_ablation(kind: AblationKind, config: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let mut c = config.clone();
    let (ablation, reinit) = match kind {
        AblationKind::Full => (Ablation::Full, false),
        AblationKind::InputOnly => (Ablation::InputOnly, false),
        AblationKind::OutputOnly => (Ablation::OutputOnly, false),
        AblationKind::ReinitIo => (Ablation::Full, true),
    };
    c.tst.ablation = ablation;
    c.tst.reinit_io = reinit;
    run_two_phase(&c, dir)
}

/// Run on already loaded corpora.
pub fn run_with_corpora(
    config: &RunConfig,
    train: Arc<Corpus>,
    holdout: Arc<Corpus>,
    dir: &Path,
) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    match config.plan.precision {
        Precision::Single => run_typed::<f32>(config, train, holdout, dir),
        Precision::Double => run_typed::<f64>(config, train, holdout, dir),
    }
}

/// Seed for the embedding/head redraw of the reinit ablation.
fn reinit_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn run_phase<T: Scalar>(
    trainer: &mut Trainer<T>,
    until: usize,
    log: &mut MetricsWriter,
    dir: &Path,
) -> Result<f64> {
    let mut last = f64::NAN;
    while trainer.step < until {
        match trainer.train_step() {
            Ok(rec) => {
                last = rec.loss;
                log.append(&rec)?;
            }
            Err(e) => {
                let rec = MetricsRecord {
                    step: trainer.step,
                    phase: trainer.objective.phase,
                    loss_kind: trainer.objective.loss_kind().into(),
                    loss: f64::NAN,
                    lr: super::wsd_lr(trainer.step, &trainer.plan),
                    data_tokens_seen: trainer.stream.tokens_consumed,
                    wallclock: 0.0,
                    abort: Some(e.to_string()),
                };
                // NaN is not representable in JSON; serde writes it as null.
                log.append(&rec).ok();
                trainer
                    .checkpoint()
                    .save(&dir.join("checkpoints").join("aborted.ckpt"))
                    .ok();
                return Err(e);
            }
        }
    }
    Ok(last)
}

fn run_typed<T: Scalar>(
    config: &RunConfig,
    train: Arc<Corpus>,
    holdout: Arc<Corpus>,
    dir: &Path,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let plan = &config.plan;
    let spec = &config.tst;
    let total = plan.total_steps;
    let boundary = spec.boundary(total);
    let ckpt_dir = dir.join("checkpoints");
    let mut log = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let mut final_loss = f64::NAN;

    let resume_from = if boundary > 0 {
        let model = ModelState::<T>::init(&config.model)?;
        let stream = make_batches(train.clone(), plan.batch_rows, plan.l_base, spec.layout())?;
        let mut tst = Trainer::new(model, plan.clone(), Objective::superposition(spec), stream)
            .with_clock(started);
        final_loss = run_phase(&mut tst, boundary, &mut log, dir)?;
        let path = ckpt_dir.join("boundary.ckpt");
        tst.checkpoint().save(&path)?;
        Some(path)
    } else {
        None
    };

    let stream = make_batches(train, plan.batch_rows, plan.l_base, BatchLayout::Standard)?;
    let mut rec = match resume_from {
        None => {
            let model = ModelState::<T>::init(&config.model)?;
            Trainer::new(model, plan.clone(), Objective::next_token(), stream)
        }
        Some(path) => {
            let mut ckpt = Checkpoint::<T>::load(&path)?;
            ckpt.phase = Phase::Recovery;
            let mut t = Trainer::resume(ckpt, plan.clone(), Objective::next_token(), stream);
            if plan.reset_moments {
                t.opt.reset_moments();
            }
            if spec.reinit_io {
                t.model.reinit_io(reinit_seed(plan.seed));
                let last = t.model.params.len() - 1;
                t.opt.reset_param(0);
                t.opt.reset_param(last);
            }
            t
        }
    }
    .with_clock(started);
    if rec.step < total {
        final_loss = run_phase(&mut rec, total, &mut log, dir)?;
    }
    rec.checkpoint().save(&ckpt_dir.join("final.ckpt"))?;

    let eval = eval_ce(&rec.model, &holdout, plan.l_base, config.eval.batch_rows)?;
    let outcome = RunOutcome {
        dir: dir.to_path_buf(),
        s: spec.s,
        r: spec.r,
        steps: rec.step,
        boundary,
        final_loss,
        final_eval_ce: eval,
        data_tokens_seen: rec.stream.tokens_consumed,
        wallclock: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

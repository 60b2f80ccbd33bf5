//! Run configuration: model, plan, superposition spec and data source.
//!
//! Configs are TOML. `--set a.b=value` overrides are applied to the parsed
//! tree before it is deserialised, so typos are caught by the same
//! unknown-field check as the file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, BatchLayout, Corpus};
use crate::error::{Error, Result};
use crate::losses::{BagWeighting, MceVariant};
use crate::model::{Ablation, ModelConfig};
use crate::tensor::Precision;

/// Optimisation schedule and batch geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub total_steps: usize,
    pub batch_rows: usize,
    /// Latent sequence length; data windows are `s` times longer while
    /// superposing.
    pub l_base: usize,
    pub peak_lr: f64,
    /// Defaults to `min(2000, total_steps / 10)`.
    pub warmup_steps: Option<usize>,
    pub decay_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    /// Zero the optimizer moments at the phase boundary.
    pub reset_moments: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            total_steps: 1000,
            batch_rows: 8,
            l_base: 64,
            peak_lr: 3e-3,
            warmup_steps: None,
            decay_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
            precision: Precision::Single,
            reset_moments: false,
        }
    }
}

impl TrainPlan {
    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| 2000.min(self.total_steps / 10))
    }

    /// Number of steps in the terminal decay.
    pub fn decay_steps(&self) -> usize {
        (self.decay_fraction * self.total_steps as f64).round() as usize
    }

    fn check(&self, errs: &mut Vec<String>) {
        if self.total_steps == 0 {
            errs.push("plan.total_steps must be >= 1".into());
        }
        if self.batch_rows == 0 || self.l_base == 0 {
            errs.push("plan.batch_rows and plan.l_base must be >= 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            errs.push("plan.peak_lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            errs.push("plan.decay_fraction must lie in [0, 1]".into());
        }
        if self.warmup() + self.decay_steps() > self.total_steps {
            errs.push(format!(
                "plan: warmup ({}) + decay ({}) exceed total_steps ({})",
                self.warmup(),
                self.decay_steps(),
                self.total_steps
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("plan.{name} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            errs.push("plan.eps must be positive and plan.weight_decay non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                errs.push("plan.grad_clip must be positive".into());
            }
        }
    }
}

/// What the superposition phase does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperpositionSpec {
    /// Bag size; 1 means no superposition.
    pub s: usize,
    /// Fraction of steps spent superposing.
    pub r: f64,
    pub weighting: BagWeighting,
    pub mce_variant: MceVariant,
    pub ablation: Ablation,
    /// Redraw the embedding and output head at the phase boundary.
    pub reinit_io: bool,
}

impl Default for SuperpositionSpec {
    fn default() -> Self {
        SuperpositionSpec {
            s: 1,
            r: 0.0,
            weighting: BagWeighting::Uniform,
            mce_variant: MceVariant::UniformSimplified,
            ablation: Ablation::Full,
            reinit_io: false,
        }
    }
}

impl SuperpositionSpec {
    /// `true` when the run is exactly a baseline run.
    pub fn is_baseline(&self) -> bool {
        self.s == 1 || self.r == 0.0 || self.ablation == Ablation::None
    }

    /// First recovery step: `round(r * total_steps)`, or 0 for a baseline.
    pub fn boundary(&self, total_steps: usize) -> usize {
        if self.is_baseline() {
            0
        } else {
            (self.r * total_steps as f64).round() as usize
        }
    }

    /// Batch layout of the superposition phase.
    pub fn layout(&self) -> BatchLayout {
        match self.ablation {
            _ if self.s == 1 => BatchLayout::Standard,
            Ablation::Full => BatchLayout::Superposed { s: self.s },
            Ablation::InputOnly => BatchLayout::InputOnly { s: self.s },
            Ablation::OutputOnly => BatchLayout::OutputOnly { s: self.s },
            Ablation::None => BatchLayout::Standard,
        }
    }

    fn check(&self, errs: &mut Vec<String>) {
        if self.s == 0 {
            errs.push("tst.s must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.r) {
            errs.push("tst.r must lie in [0, 1]".into());
        }
        if self.s > 0 {
            if let Err(e) = self.weighting.validate(self.s) {
                errs.push(format!("tst.weighting: {e}"));
            }
        }
        if self.reinit_io && self.is_baseline() {
            errs.push("tst.reinit_io needs a superposition phase (s > 1, r > 0)".into());
        }
        if self.mce_variant == MceVariant::UniformCorrected && self.weighting != BagWeighting::Uniform {
            errs.push("tst.mce_variant uniform_corrected requires uniform weighting".into());
        }
    }
}

/// Where the training tokens come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Sampled from a random Markov chain.
    Markov {
        order: usize,
        vocab: usize,
        length: usize,
        seed: u64,
        concentration: f64,
    },
    /// Binary token file.
    TokenFile { path: PathBuf },
    /// Raw bytes of a text file (vocabulary 256).
    TextFile { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Markov {
            order: 3,
            vocab: 64,
            length: 200_000,
            seed: 0,
            concentration: 0.2,
        }
    }
}

impl DataSpec {
    /// Load the corpus. Relative paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Corpus> {
        let resolve = |p: &Path| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        };
        match self {
            DataSpec::Markov {
                order,
                vocab,
                length,
                seed,
                concentration,
            } => data::synth_markov_corpus_with(*order, *vocab, *length, *seed, *concentration),
            DataSpec::TokenFile { path } => data::read_token_file(&resolve(path)),
            DataSpec::TextFile { path } => data::read_text_file(&resolve(path)),
        }
    }
}

/// Held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Tokens cut from the end of the corpus for evaluation.
    pub holdout_tokens: usize,
    /// Rows per evaluation forward pass.
    pub batch_rows: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            holdout_tokens: 20_000,
            batch_rows: 16,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub tst: SuperpositionSpec,
    pub data: DataSpec,
    pub eval: EvalSpec,
}

impl RunConfig {
    /// Collect every validation problem, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(Error::Config(e)) = self.model.validate() {
            errs.extend(e.split("; ").map(String::from));
        }
        self.plan.check(&mut errs);
        self.tst.check(&mut errs);
        if self.plan.l_base > self.model.max_len {
            errs.push(format!(
                "plan.l_base ({}) exceeds model.max_len ({})",
                self.plan.l_base, self.model.max_len
            ));
        }
        if let DataSpec::Markov { vocab, .. } = self.data {
            if vocab > self.model.vocab {
                errs.push(format!(
                    "data.vocab ({vocab}) exceeds model.vocab ({})",
                    self.model.vocab
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Apply `key=value` overrides in order (last wins).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o.as_ref())?;
        }
        toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

/// Parse the right-hand side of an override as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (leaf, parents) = path.split_last().expect("non-empty");
    let mut node = tree;
    for p in parents {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{key}`"))),
        };
    }
    let value = parse_value(raw.trim());
    node.insert((*leaf).to_string(), value);
    Ok(())
}

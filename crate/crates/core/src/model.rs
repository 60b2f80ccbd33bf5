//! Decoder-only transformer with untied embedding and output head.
//!
//! Blocks are pre-norm: RMS norm, causal multi-head attention with rotary
//! position encoding, RMS norm, gated (SiLU) MLP. The input path either looks
//! up one embedding per position or averages the embeddings of a bag of `s`
//! tokens into one latent position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenTensor;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which rotation index a latent position receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RopePositions {
    /// `0..l`, one index per latent position.
    #[default]
    Latent,
    /// `j * s`, the index of the first data token in bag `j`.
    DataStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Longest latent sequence the model accepts.
    pub max_len: usize,
    pub init_seed: u64,
    pub init_scale: f64,
    pub rope_base: f64,
    pub rope_positions: RopePositions,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab: 256,
            max_len: 256,
            init_seed: 0,
            init_scale: 1.0,
            rope_base: 10_000.0,
            rope_positions: RopePositions::Latent,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        } else if self.n_heads > 0 && (self.d_model / self.n_heads) % 2 != 0 {
            errs.push("model head dimension must be even for rotary encoding".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            errs.push("model.init_scale must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            errs.push("model.rope_base must exceed 1".into());
        }
        if !(self.norm_eps > 0.0) {
            errs.push("model.norm_eps must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `2 V d + n_layers (4 d^2 + 3 d d_ff + 2 d) + d`.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        2 * self.vocab * d + self.n_layers * (4 * d * d + 3 * d * self.d_ff + 2 * d) + d
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab);
        let mut specs = vec![("embed".to_string(), vec![v, d])];
        for i in 0..self.n_layers {
            for (name, shape) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm", vec![d]),
                ("w_gate", vec![d, f]),
                ("w_up", vec![d, f]),
                ("w_down", vec![f, d]),
            ] {
                specs.push((format!("layers.{i}.{name}"), shape));
            }
        }
        specs.push(("final_norm".into(), vec![d]));
        specs.push(("head".into(), vec![d, v]));
        specs
    }
}

/// Which ends of the model see bags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Superposed inputs, bagged targets.
    #[default]
    Full,
    /// Superposed inputs, single targets.
    InputOnly,
    /// Flat inputs, bagged targets.
    OutputOnly,
    /// Plain next-token model.
    None,
}

impl Ablation {
    /// Whether the forward pass expects folded `(B, l, s)` inputs.
    pub fn folded_inputs(self) -> bool {
        matches!(self, Ablation::Full | Ablation::InputOnly)
    }
}

const LAYER_PARAMS: usize = 9;

/// Model parameters. Stored flat in the order of [`ModelConfig::param_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, l, V]`.
    pub logits: Var,
    /// One handle per parameter, same order as [`ModelState::params`].
    pub params: Vec<Var>,
}

fn normal_matrix<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<T: Scalar> ModelState<T> {
    /// Draw a fresh model from `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let std = config.init_scale / (config.d_model as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (names, params) = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::new(shape.clone(), vec![T::one(); shape[0]]).expect("1-D")
                } else {
                    normal_matrix(shape, std, &mut rng)
                };
                (name, t)
            })
            .unzip();
        Ok(ModelState {
            config: config.clone(),
            names,
            params,
        })
    }

    /// Rebuild from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, got {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape), (got, t)) in specs.iter().zip(&named) {
            if name != got || *shape != t.shape {
                return Err(Error::Data(format!(
                    "parameter mismatch: expected {name} {shape:?}, got {got} {:?}",
                    t.shape
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(ModelState {
            config,
            names,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn embed_index(&self) -> usize {
        0
    }

    fn head_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Redraw the embedding table and the output head from `seed`; every other
    /// parameter is left untouched.
    pub fn reinit_io(&mut self, seed: u64) {
        let std = self.config.init_scale / (self.config.d_model as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in [self.embed_index(), self.head_index()] {
            let shape = self.params[i].shape.clone();
            self.params[i] = normal_matrix(shape, std, &mut rng);
        }
    }

    /// Input embeddings `[B*l, d]` for `(B, l, s)` bags or `(B, L)` tokens.
    ///
    /// Bags are averaged with `f64` accumulation; `s = 1` is a plain lookup.
    pub fn superpose_embed(&self, g: &mut Graph<T>, embed: Var, inputs: &TokenTensor) -> Result<Var> {
        let ids = inputs.ids()?;
        let s = if inputs.ndim() == 3 { inputs.shape[2] } else { 1 };
        if s == 1 {
            g.embedding(embed, &ids)
        } else {
            g.embedding_mean(embed, &ids, s)
        }
    }

    /// Build the forward graph. Returns `[B, l, V]` logits.
    pub fn forward(&self, g: &mut Graph<T>, inputs: &TokenTensor, ablation: Ablation) -> Result<Forward> {
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p)).collect();
        let logits = self.forward_with(g, &params, inputs, ablation)?;
        Ok(Forward { logits, params })
    }

    /// Forward pass over caller-supplied parameter nodes (in storage order).
    ///
    /// The values of `self.params` are ignored; only the config is used.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        inputs: &TokenTensor,
        ablation: Ablation,
    ) -> Result<Var> {
        let want = if ablation.folded_inputs() { 3 } else { 2 };
        if inputs.ndim() != want || params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{ablation:?} forward expects {want}-D inputs and {} params, got {:?} and {}",
                self.params.len(),
                inputs.shape,
                params.len()
            )));
        }
        let (b, l) = (inputs.shape[0], inputs.shape[1]);
        let s = if want == 3 { inputs.shape[2] } else { 1 };
        let cfg = &self.config;
        if l == 0 || b == 0 || s == 0 {
            return Err(Error::shape(format!("empty input {:?}", inputs.shape)));
        }
        if l > cfg.max_len {
            return Err(Error::contract(format!(
                "latent length {l} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let positions: Vec<usize> = match cfg.rope_positions {
            RopePositions::Latent => (0..l).collect(),
            RopePositions::DataStart => (0..l).map(|j| j * s).collect(),
        };

        let mut x = self.superpose_embed(g, params[0], inputs)?;
        for layer in 0..cfg.n_layers {
            let p = &params[1 + layer * LAYER_PARAMS..1 + (layer + 1) * LAYER_PARAMS];
            x = self.block(g, x, p, b, l, &positions)?;
        }
        let n = params.len();
        let h = g.rms_norm(x, params[n - 2], cfg.norm_eps)?;
        let logits = g.matmul(h, params[n - 1])?;
        g.reshape(logits, vec![b, l, cfg.vocab])
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &[Var],
        b: usize,
        l: usize,
        positions: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, h, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let [attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down] = p[..] else {
            unreachable!("layer slice has {LAYER_PARAMS} params");
        };

        let a = g.rms_norm(x, attn_norm, cfg.norm_eps)?;
        let mut heads = |w: Var, rotate: bool| -> Result<Var> {
            let t = g.matmul(a, w)?;
            let t = g.reshape(t, vec![b, l, h, hd])?;
            let t = if rotate {
                g.rope(t, positions, cfg.rope_base)?
            } else {
                t
            };
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, vec![b * h, l, hd])
        };
        let q = heads(wq, true)?;
        let k = heads(wk, true)?;
        let v = heads(wv, false)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::of_f64(1.0 / (hd as f64).sqrt()));
        let att = g.causal_softmax(scores)?;
        let o = g.bmm(att, v, false)?;
        let o = g.reshape(o, vec![b, h, l, hd])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, vec![b * l, d])?;
        let o = g.matmul(o, wo)?;
        let x = g.add(x, o)?;

        let m = g.rms_norm(x, mlp_norm, cfg.norm_eps)?;
        let gate = g.matmul(m, w_gate)?;
        let gate = g.silu(gate);
        let up = g.matmul(m, w_up)?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, w_down)?;
        g.add(x, down)
    }

    /// Logits `[B, l, V]` as a plain tensor.
    pub fn logits(&self, inputs: &TokenTensor, ablation: Ablation) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, inputs, ablation)?;
        let t = g.tensor(f.logits);
        Ok(Tensor {
            grad: None,
            requires_grad: false,
            ..t
        })
    }

    /// Autoregressive continuation of `prompt` by `n` tokens.
    ///
    /// Temperature 0 is greedy decoding; otherwise tokens are sampled from
    /// `softmax(z / temperature)` with a generator seeded by `seed`. The
    /// context is truncated to the last `max_len` tokens.
    pub fn generate(&self, prompt: &[u32], n: usize, temperature: f64, seed: u64) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Input("generate needs a non-empty prompt".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Input(format!("invalid temperature {temperature}")));
        }
        let vocab = self.config.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = prompt.to_vec();
        for _ in 0..n {
            let start = seq.len().saturating_sub(self.config.max_len);
            let ctx: Vec<i64> = seq[start..].iter().map(|&t| t as i64).collect();
            let len = ctx.len();
            let logits = self.logits(&TokenTensor::new(vec![1, len], ctx)?, Ablation::None)?;
            let last: Vec<f64> = logits.data[(len - 1) * vocab..]
                .iter()
                .map(|x| x.as_f64())
                .collect();
            let next = if temperature == 0.0 {
                argmax(&last)
            } else {
                sample_softmax(&last, temperature, &mut rng)
            };
            seq.push(next as u32);
        }
        Ok(seq[prompt.len()..].to_vec())
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn sample_softmax(z: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            vocab: 11,
            max_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_count_by_hand() {
        // V=11, d=8, ff=12, one layer: 2*11*8 + (4*64 + 3*8*12 + 16) + 8
        let cfg = tiny();
        assert_eq!(cfg.param_count(), 176 + 256 + 288 + 16 + 8);
        let m = ModelState::<f64>::init(&cfg).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_and_head_are_distinct() {
        let m = ModelState::<f64>::init(&tiny()).unwrap();
        let e = m.get("embed").unwrap();
        let h = m.get("head").unwrap();
        assert_eq!(e.shape, vec![11, 8]);
        assert_eq!(h.shape, vec![8, 11]);
        assert_ne!(e.data[..8], h.data[..8]);
    }

    #[test]
    fn forward_shape_and_mode_check() {
        let m = ModelState::<f64>::init(&tiny()).unwrap();
        let flat = TokenTensor::new(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let z = m.logits(&flat, Ablation::None).unwrap();
        assert_eq!(z.shape, vec![2, 3, 11]);
        assert!(matches!(
            m.logits(&flat, Ablation::Full),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reinit_keeps_interior() {
        let mut m = ModelState::<f64>::init(&tiny()).unwrap();
        let before = m.clone();
        m.reinit_io(99);
        let n = m.params.len();
        assert_eq!(m.params[1..n - 1], before.params[1..n - 1]);
        assert_ne!(m.params[0], before.params[0]);
        assert_ne!(m.params[n - 1], before.params[n - 1]);
    }

    #[test]
    fn generate_checks_prompt() {
        let m = ModelState::<f64>::init(&tiny()).unwrap();
        assert!(matches!(m.generate(&[], 3, 0.0, 0), Err(Error::Input(_))));
        let out = m.generate(&[1, 2], 20, 0.0, 0).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(out, m.generate(&[1, 2], 20, 0.0, 5).unwrap());
    }
}

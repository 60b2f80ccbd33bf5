use serde::Serialize;

use crate::losses::Phase;
use crate::model::ModelConfig;

/// Per-sequence training FLOPs of one step, split by component.
///
/// Forward multiply-accumulates count as 2 FLOPs; the backward pass is taken
/// as twice the forward, so every term carries a factor of 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    /// Q, K, V and output projections.
    pub attn_proj: f64,
    /// `Q Kᵀ` and attention-weighted values; quadratic in length.
    pub attn_scores: f64,
    pub mlp: f64,
    /// Embedding lookup, or the bag sum and scale when superposing.
    pub embed: f64,
    pub head: f64,
    pub total: f64,
}

/// Cost of one step at latent length `l_base`. The superposition phase runs
/// at the same latent length with bags of `s`; the recovery phase ignores `s`.
pub fn flops_per_step(config: &ModelConfig, l_base: usize, s: usize, phase: Phase) -> FlopsBreakdown {
    let (l, d, f, v) = (
        l_base as f64,
        config.d_model as f64,
        config.d_ff as f64,
        config.vocab as f64,
    );
    let layers = config.n_layers as f64;
    let bag = match phase {
        Phase::Superposition => s.max(1) as f64,
        Phase::Recovery => 1.0,
    };
    const TRAIN: f64 = 3.0;
    let attn_proj = TRAIN * layers * 2.0 * 4.0 * l * d * d;
    let attn_scores = TRAIN * layers * 2.0 * 2.0 * l * l * d;
    let mlp = TRAIN * layers * 2.0 * 3.0 * l * d * f;
    let embed = TRAIN * l * d * bag;
    let head = TRAIN * 2.0 * l * d * v;
    FlopsBreakdown {
        attn_proj,
        attn_scores,
        mlp,
        embed,
        head,
        total: attn_proj + attn_scores + mlp + embed + head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_of_one_costs_the_same() {
        let c = ModelConfig::default();
        assert_eq!(
            flops_per_step(&c, 64, 1, Phase::Superposition),
            flops_per_step(&c, 64, 1, Phase::Recovery)
        );
    }

    #[test]
    fn length_scaling() {
        let c = ModelConfig::default();
        let a = flops_per_step(&c, 64, 1, Phase::Recovery);
        let b = flops_per_step(&c, 128, 1, Phase::Recovery);
        assert_eq!(b.attn_scores, 4.0 * a.attn_scores);
        assert_eq!(b.mlp, 2.0 * a.mlp);
    }
}

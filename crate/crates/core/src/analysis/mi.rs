//! Plug-in mutual information between tokens `d` positions apart.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub max_distance: usize,
    /// Keep the `K` most frequent tokens and bucket the rest into one symbol.
    pub vocab_cap: Option<usize>,
    /// Moving-block bootstrap replicates for the standard error (0 = none).
    pub bootstrap: usize,
    pub seed: u64,
    /// A distance needs at least this many pairs per observed symbol.
    pub min_pairs_per_symbol: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            max_distance: 16,
            vocab_cap: None,
            bootstrap: 30,
            seed: 0,
            min_pairs_per_symbol: 10,
        }
    }
}

/// MI in nats for `d = 1..=D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCurve {
    pub distances: Vec<usize>,
    /// Plug-in estimate, NaN where the distance had too few pairs.
    pub mi: Vec<f64>,
    pub pairs: Vec<usize>,
    /// Bootstrap standard error (NaN without bootstrap).
    pub stderr: Vec<f64>,
    /// Miller–Madow bias estimate `(K_xy - K_x - K_y + 1) / 2n`; reported,
    /// not subtracted.
    pub bias: Vec<f64>,
    /// Estimate was negative through rounding and clipped to zero.
    pub clipped: Vec<bool>,
    pub insufficient: Vec<bool>,
}

impl MiCurve {
    /// `(d, mi)` points usable for fitting.
    pub fn valid_points(&self) -> (Vec<f64>, Vec<f64>) {
        self.distances
            .iter()
            .zip(&self.mi)
            .zip(&self.insufficient)
            .filter(|&((_, m), &bad)| !bad && m.is_finite())
            .map(|((&d, &m), _)| (d as f64, m))
            .unzip()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("distance,mi,stderr,bias,pairs,clipped,insufficient\n");
        for i in 0..self.distances.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.distances[i],
                self.mi[i],
                self.stderr[i],
                self.bias[i],
                self.pairs[i],
                self.clipped[i],
                self.insufficient[i]
            ));
        }
        s
    }
}

/// Joint counts of `(x[t], x[t+d])` for `t` in the given index blocks.
enum Joint {
    Dense(Vec<u32>),
    Sparse(HashMap<u64, u32>),
}

struct PairStats {
    mi: f64,
    n: usize,
    bias: f64,
}

fn pair_stats(x: &[u32], k: usize, d: usize, starts: &mut dyn Iterator<Item = (usize, usize)>) -> PairStats {
    let dense = k.saturating_mul(k) <= 1 << 22;
    let mut joint = if dense {
        Joint::Dense(vec![0u32; k * k])
    } else {
        Joint::Sparse(HashMap::new())
    };
    let mut ma = vec![0u64; k];
    let mut mb = vec![0u64; k];
    let mut n = 0usize;
    for (lo, hi) in starts {
        for t in lo..hi {
            let (a, b) = (x[t] as usize, x[t + d] as usize);
            match &mut joint {
                Joint::Dense(c) => c[a * k + b] += 1,
                Joint::Sparse(m) => *m.entry((a * k + b) as u64).or_default() += 1,
            }
            ma[a] += 1;
            mb[b] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return PairStats {
            mi: 0.0,
            n,
            bias: 0.0,
        };
    }
    let nf = n as f64;
    let mut mi = 0.0;
    let mut cells = 0usize;
    let mut term = |idx: usize, c: u32| {
        if c == 0 {
            return;
        }
        cells += 1;
        let (a, b) = (idx / k, idx % k);
        let c = c as f64;
        mi += c / nf * (c * nf / (ma[a] as f64 * mb[b] as f64)).ln();
    };
    match &joint {
        Joint::Dense(c) => c.iter().enumerate().for_each(|(i, &v)| term(i, v)),
        Joint::Sparse(m) => m.iter().for_each(|(&i, &v)| term(i as usize, v)),
    }
    let ka = ma.iter().filter(|&&c| c > 0).count();
    let kb = mb.iter().filter(|&&c| c > 0).count();
    let bias = (cells as f64 - ka as f64 - kb as f64 + 1.0) / (2.0 * nf);
    PairStats { mi, n, bias }
}

/// Map tokens to `0..K` by frequency rank, with one overflow bucket when the
/// vocabulary is capped. Returns the mapped stream and the symbol count.
fn remap(tokens: &[u32], cap: Option<usize>) -> (Vec<u32>, usize) {
    let mut freq: HashMap<u32, usize> = HashMap::new();
    for &t in tokens {
        *freq.entry(t).or_default() += 1;
    }
    let mut by_freq: Vec<(u32, usize)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = cap.unwrap_or(usize::MAX).min(by_freq.len());
    let index: HashMap<u32, u32> = by_freq[..keep]
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| (t, i as u32))
        .collect();
    let bucket = keep as u32;
    let mapped = tokens
        .iter()
        .map(|t| index.get(t).copied().unwrap_or(bucket))
        .collect();
    let k = if keep < by_freq.len() { keep + 1 } else { keep };
    (mapped, k)
}

/// Estimate `I(x_t ; x_{t+d})` for `d = 1..=max_distance`.
///
/// Each distance uses every available pair. The standard error comes from a
/// moving-block bootstrap over pair start positions with blocks of
/// `max(d, n^(1/3))` pairs.
pub fn estimate_mi(tokens: &[u32], cfg: &MiConfig) -> Result<MiCurve> {
    if cfg.max_distance == 0 {
        return Err(Error::Input("max_distance must be >= 1".into()));
    }
    if tokens.len() <= cfg.max_distance {
        return Err(Error::Input(format!(
            "{} tokens cannot give pairs at distance {}",
            tokens.len(),
            cfg.max_distance
        )));
    }
    if cfg.vocab_cap == Some(0) {
        return Err(Error::Input("vocab_cap must be >= 1".into()));
    }
    let (x, k) = remap(tokens, cfg.vocab_cap);
    let per_d = par::map_range(cfg.max_distance, |i| {
        let d = i + 1;
        let n = x.len() - d;
        let full = pair_stats(&x, k, d, &mut std::iter::once((0, n)));
        let insufficient = full.n < cfg.min_pairs_per_symbol * k;
        let stderr = if cfg.bootstrap > 1 && !insufficient {
            let block = d.max((n as f64).cbrt().ceil() as usize).min(n);
            let nblocks = n.div_ceil(block);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (d as u64).wrapping_mul(0x9e37_79b9));
            let reps: Vec<f64> = (0..cfg.bootstrap)
                .map(|_| {
                    let starts: Vec<usize> = (0..nblocks).map(|_| rng.random_range(0..=n - block)).collect();
                    let mut it = starts.into_iter().map(|s| (s, s + block));
                    pair_stats(&x, k, d, &mut it).mi
                })
                .collect();
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        (full, stderr, insufficient)
    });
    let mut curve = MiCurve {
        distances: (1..=cfg.max_distance).collect(),
        mi: vec![],
        pairs: vec![],
        stderr: vec![],
        bias: vec![],
        clipped: vec![],
        insufficient: vec![],
    };
    for (stats, se, bad) in per_d {
        let clipped = stats.mi < 0.0;
        curve.mi.push(if bad { f64::NAN } else { stats.mi.max(0.0) });
        curve.pairs.push(stats.n);
        curve.stderr.push(se);
        curve.bias.push(stats.bias);
        curve.clipped.push(clipped);
        curve.insufficient.push(bad);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn period_two_stream_has_full_information_at_even_distance() {
        let x: Vec<u32> = (0..10_000).map(|i| (i % 2) as u32).collect();
        let c = estimate_mi(
            &x,
            &MiConfig {
                max_distance: 4,
                bootstrap: 0,
                ..MiConfig::default()
            },
        )
        .unwrap();
        for (d, &m) in c.distances.iter().zip(&c.mi) {
            // H(unigram) = ln 2; odd distances are also deterministic here
            assert!((m - 2f64.ln()).abs() < 1e-6, "d={d}: {m}");
        }
    }

    #[test]
    fn iid_stream_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<u32> = (0..200_000).map(|_| rng.random_range(0..8)).collect();
        let c = estimate_mi(
            &x,
            &MiConfig {
                max_distance: 3,
                bootstrap: 0,
                ..MiConfig::default()
            },
        )
        .unwrap();
        for (m, b) in c.mi.iter().zip(&c.bias) {
            assert!(*m < 5.0 * b, "mi {m} bias {b}");
        }
    }

    #[test]
    fn capping_buckets_rare_tokens() {
        let x: Vec<u32> = (0..1000).map(|i| [0, 0, 0, 1, 2, 3][i % 6]).collect();
        let (m, k) = remap(&x, Some(1));
        assert_eq!(k, 2);
        assert!(m.iter().all(|&t| t < 2));
    }

    #[test]
    fn short_input_is_flagged_not_fabricated() {
        let x: Vec<u32> = (0..30).map(|i| (i * 7 % 13) as u32).collect();
        let c = estimate_mi(
            &x,
            &MiConfig {
                max_distance: 2,
                bootstrap: 0,
                ..MiConfig::default()
            },
        )
        .unwrap();
        assert!(c.insufficient.iter().all(|&b| b));
        assert!(c.mi.iter().all(|m| m.is_nan()));
    }
}

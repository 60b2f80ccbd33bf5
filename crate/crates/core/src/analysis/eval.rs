use crate::data::{Corpus, TokenTensor};
use crate::error::{Error, Result};
use crate::losses::ce_loss;
use crate::model::{Ablation, ModelState};
use crate::par;
use crate::tensor::Scalar;

/// Mean next-token cross-entropy over every non-overlapping window of
/// `l + 1` tokens in `corpus`, through the plain (`s = 1`) model path.
///
/// Batches of `batch_rows` windows are evaluated independently and summed in
/// order, so the result does not depend on threading.
pub fn eval_ce<T: Scalar>(model: &ModelState<T>, corpus: &Corpus, l: usize, batch_rows: usize) -> Result<f64> {
    if l == 0 || batch_rows == 0 {
        return Err(Error::Input("eval window and batch must be >= 1".into()));
    }
    let windows = corpus.len().saturating_sub(1) / l;
    if windows == 0 {
        return Err(Error::Input(format!(
            "held-out corpus of {} tokens is shorter than one window of {}",
            corpus.len(),
            l + 1
        )));
    }
    let batches = windows.div_ceil(batch_rows);
    let per_batch = par::map_range(batches, |bi| -> Result<(f64, usize)> {
        let rows = batch_rows.min(windows - bi * batch_rows);
        let mut inputs = Vec::with_capacity(rows * l);
        let mut labels = Vec::with_capacity(rows * l);
        for w in 0..rows {
            let start = (bi * batch_rows + w) * l;
            let toks = &corpus.tokens[start..start + l + 1];
            inputs.extend(toks[..l].iter().map(|&t| t as i64));
            labels.extend(toks[1..].iter().map(|&t| t as i64));
        }
        let x = TokenTensor::new(vec![rows, l], inputs)?;
        let z = model.logits(&x, Ablation::None)?;
        let out = ce_loss(&z, &labels)?;
        Ok((out.value() * (rows * l) as f64, rows * l))
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for r in per_batch {
        let (s, c) = r?;
        sum += s;
        n += c;
    }
    Ok(sum / n as f64)
}

//! Forward pass with full per-layer state capture.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{DeactivationMask, LayerWeights, TransformerWeights};

/// Small constant inside the RMS computation guarding against all-zero rows.
pub const RMS_EPS: f64 = 1e-6;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Row-wise RMS normalization with a learned gain.
pub fn rms_norm(x: &Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt();
        for (value, g) in row.iter_mut().zip(gain.iter()) {
            *value = *value / rms * g;
        }
    }
    out
}

/// In-place causal softmax: row `i` is a distribution over columns `0..=i`,
/// later columns are exactly zero.
pub(crate) fn causal_softmax_inplace(scores: &mut Array2<f64>) {
    let n = scores.nrows();
    for i in 0..n {
        let mut row = scores.row_mut(i);
        let visible = i + 1;
        let max = row
            .iter()
            .take(visible)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        }
        for j in 0..visible {
            row[j] /= sum;
        }
        for j in visible..n {
            row[j] = 0.0;
        }
    }
}

/// Attention sub-block applied to an already-normalized input `x`.
///
/// Returns the per-head probability matrices, the concatenated head
/// outputs (input to `wo`), and the residual-branch output.
pub(crate) fn attn_sub_forward(
    layer: &LayerWeights,
    x: &Array2<f64>,
    n_heads: usize,
    d_head: usize,
) -> (Vec<Array2<f64>>, Array2<f64>, Array2<f64>) {
    let l = x.nrows();
    let d_mid = n_heads * d_head;
    let q = x.dot(&layer.wq);
    let k = x.dot(&layer.wk);
    let v = x.dot(&layer.wv);
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let mut concat = Array2::zeros((l, d_mid));
    let mut probs = Vec::with_capacity(n_heads);
    for g in 0..n_heads {
        let lo = g * d_head;
        let hi = lo + d_head;
        let qg = q.slice(s![.., lo..hi]);
        let kg = k.slice(s![.., lo..hi]);
        let vg = v.slice(s![.., lo..hi]);
        let mut scores = qg.dot(&kg.t());
        scores.mapv_inplace(|s| s * inv_sqrt);
        causal_softmax_inplace(&mut scores);
        let cg = scores.dot(&vg);
        concat.slice_mut(s![.., lo..hi]).assign(&cg);
        probs.push(scores);
    }
    let attn_out = concat.dot(&layer.wo);
    (probs, concat, attn_out)
}

/// FFN sub-block applied to an already-normalized input `y`.
///
/// Returns the gated intermediate `h_ffn = silu(y·w_gate) ⊙ (y·w_up)` and
/// the residual-branch output `h_ffn·w_down`.
pub(crate) fn ffn_sub_forward(layer: &LayerWeights, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let gate = y.dot(&layer.w_gate);
    let up = y.dot(&layer.w_up);
    let mut h_ffn = gate;
    h_ffn.zip_mut_with(&up, |g, &u| *g = silu(*g) * u);
    let ffn_out = h_ffn.dot(&layer.w_down);
    (h_ffn, ffn_out)
}

/// Everything captured during one forward pass.
///
/// `h` holds the residual stream before each layer plus the final state,
/// so `h[i+1] - h[i] == attn_out[i] + ffn_out[i]` holds exactly.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    /// `n_layers + 1` residual-stream states, each `(l, d_model)`.
    pub h: Vec<Array2<f64>>,
    /// Normalized attention inputs per layer, `(l, d_model)`.
    pub attn_in: Vec<Array2<f64>>,
    /// Per layer, per head attention probabilities, `(l, l)`.
    pub attn_probs: Vec<Vec<Array2<f64>>>,
    /// Concatenated head outputs before `wo`, `(l, d_mid)`.
    pub attn_concat: Vec<Array2<f64>>,
    /// Attention residual-branch outputs, `(l, d_model)`.
    pub attn_out: Vec<Array2<f64>>,
    /// Normalized FFN inputs per layer, `(l, d_model)`.
    pub ffn_in: Vec<Array2<f64>>,
    /// Gated FFN intermediates, `(l, d_inter)`.
    pub h_ffn: Vec<Array2<f64>>,
    /// FFN residual-branch outputs, `(l, d_model)`.
    pub ffn_out: Vec<Array2<f64>>,
    /// `(l, vocab_size)` next-token logits.
    pub logits: Array2<f64>,
}

fn validate_tokens(weights: &TransformerWeights, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".to_string()));
    }
    if tokens.len() > weights.config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            weights.config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens
        .iter()
        .find(|&&t| t as usize >= weights.config.vocab_size)
    {
        return Err(Error::Input(format!(
            "token id {bad} out of range (vocab_size = {})",
            weights.config.vocab_size
        )));
    }
    Ok(())
}

/// Run the model over `tokens`, optionally with masked neurons treated as
/// zero, capturing all intermediate states.
pub fn forward(
    weights: &TransformerWeights,
    tokens: &[u32],
    mask: Option<&DeactivationMask>,
) -> Result<ForwardTrace> {
    validate_tokens(weights, tokens)?;

    // Masking is applied by physically zeroing a weight copy, so a masked
    // forward is bit-identical to a forward of pre-zeroed weights.
    let masked;
    let w = match mask {
        Some(m) if !m.is_empty() => {
            masked = weights.with_mask(m)?;
            &masked
        }
        _ => weights,
    };

    let config = &w.config;
    let l = tokens.len();
    let mut h = Array2::zeros((l, config.d_model));
    for (pos, &tok) in tokens.iter().enumerate() {
        let row = &w.tok_emb.row(tok as usize) + &w.pos_emb.row(pos);
        h.row_mut(pos).assign(&row);
    }

    let mut trace = ForwardTrace {
        tokens: tokens.to_vec(),
        h: Vec::with_capacity(config.n_layers + 1),
        attn_in: Vec::with_capacity(config.n_layers),
        attn_probs: Vec::with_capacity(config.n_layers),
        attn_concat: Vec::with_capacity(config.n_layers),
        attn_out: Vec::with_capacity(config.n_layers),
        ffn_in: Vec::with_capacity(config.n_layers),
        h_ffn: Vec::with_capacity(config.n_layers),
        ffn_out: Vec::with_capacity(config.n_layers),
        logits: Array2::zeros((0, 0)),
    };

    for layer in &w.layers {
        trace.h.push(h.clone());
        let x = rms_norm(&h, &layer.norm_attn);
        let (probs, concat, attn_out) = attn_sub_forward(layer, &x, config.n_heads, config.d_head);
        let h_mid = &h + &attn_out;

        let y = rms_norm(&h_mid, &layer.norm_ffn);
        let (h_ffn, ffn_out) = ffn_sub_forward(layer, &y);
        h = &h_mid + &ffn_out;

        trace.attn_in.push(x);
        trace.attn_probs.push(probs);
        trace.attn_concat.push(concat);
        trace.attn_out.push(attn_out);
        trace.ffn_in.push(y);
        trace.h_ffn.push(h_ffn);
        trace.ffn_out.push(ffn_out);
    }
    trace.h.push(h.clone());

    let z = rms_norm(&h, &w.final_norm);
    trace.logits = z.dot(&w.unembed);
    Ok(trace)
}

/// Sum of next-token negative log-likelihoods and the number of scored
/// positions (`len - 1`).
pub fn nll_sum(logits: &Array2<f64>, tokens: &[u32]) -> (f64, usize) {
    let positions = tokens.len() - 1;
    let mut total = 0.0;
    for p in 0..positions {
        let row = logits.row(p);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[tokens[p + 1] as usize];
    }
    (total, positions)
}

/// Mean next-token cross-entropy of already-computed logits.
pub fn ce_from_logits(logits: &Array2<f64>, tokens: &[u32]) -> f64 {
    let (total, positions) = nll_sum(logits, tokens);
    total / positions as f64
}

/// Mean next-token cross-entropy over positions `0..len-2`.
pub fn loss_ce(weights: &TransformerWeights, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Input(
            "cross-entropy needs a sequence of length at least 2".to_string(),
        ));
    }
    let trace = forward(weights, tokens, None)?;
    Ok(ce_from_logits(&trace.logits, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{test_config, MatrixKind, NeuronId, TransformerWeights};

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = TransformerWeights::init_random(test_config(), 1).unwrap();
        assert!(matches!(forward(&w, &[], None), Err(Error::Input(_))));
        assert!(matches!(forward(&w, &[0; 17], None), Err(Error::Input(_))));
        assert!(matches!(forward(&w, &[0, 11], None), Err(Error::Input(_))));
    }

    #[test]
    fn residual_identity_holds() {
        // d_model=8, 2 layers, l=5: h[i+1] - h[i] must equal the captured
        // sub-outputs exactly.
        let w = TransformerWeights::init_random(test_config(), 5).unwrap();
        let trace = forward(&w, &[1, 2, 3, 4, 5], None).unwrap();
        for i in 0..w.config.n_layers {
            let lhs = &trace.h[i + 1] - &trace.h[i];
            let rhs = &trace.attn_out[i] + &trace.ffn_out[i];
            assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let w = TransformerWeights::init_random(test_config(), 5).unwrap();
        let trace = forward(&w, &[1, 2, 3, 4, 5, 6, 7], None).unwrap();
        for probs in &trace.attn_probs {
            for head in probs {
                for (i, row) in head.rows().into_iter().enumerate() {
                    let sum: f64 = row.iter().take(i + 1).sum();
                    assert!((sum - 1.0).abs() <= 1e-9);
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn causality_holds() {
        let w = TransformerWeights::init_random(test_config(), 9).unwrap();
        let a = forward(&w, &[1, 2, 3, 4, 5, 6], None).unwrap();
        let b = forward(&w, &[1, 2, 3, 9, 5, 6], None).unwrap();
        // Changing position 3 must leave every captured state at positions
        // 0..3 untouched.
        for (ha, hb) in a.h.iter().zip(b.h.iter()) {
            let da = ha.slice(s![..3, ..]);
            let db = hb.slice(s![..3, ..]);
            let diff = (&da - &db).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12);
        }
        for (la, lb) in a
            .logits
            .slice(s![..3, ..])
            .rows()
            .into_iter()
            .zip(b.logits.slice(s![..3, ..]).rows())
        {
            assert!(la
                .iter()
                .zip(lb.iter())
                .all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }

    #[test]
    fn empty_mask_is_identity() {
        let w = TransformerWeights::init_random(test_config(), 2).unwrap();
        let tokens = [3, 1, 4, 1, 5];
        let plain = forward(&w, &tokens, None).unwrap();
        let masked = forward(&w, &tokens, Some(&DeactivationMask::new())).unwrap();
        assert_eq!(
            plain.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            masked
                .logits
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn masking_an_already_zero_neuron_changes_nothing() {
        let mut w = TransformerWeights::init_random(test_config(), 2).unwrap();
        let id = NeuronId::new(0, MatrixKind::Up, 7);
        w.zero_neuron(&id);
        let tokens = [3, 1, 4, 1, 5];
        let plain = forward(&w, &tokens, None).unwrap();
        let masked = forward(&w, &tokens, Some(&[id].into_iter().collect())).unwrap();
        assert_eq!(
            plain.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            masked
                .logits
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn mask_equals_physical_zeroing() {
        let w = TransformerWeights::init_random(test_config(), 4).unwrap();
        let mask: DeactivationMask = [
            NeuronId::new(0, MatrixKind::Q, 1),
            NeuronId::new(1, MatrixKind::Down, 10),
        ]
        .into_iter()
        .collect();
        let tokens = [1, 2, 3];
        let via_mask = forward(&w, &tokens, Some(&mask)).unwrap();
        let via_zero = forward(&w.with_mask(&mask).unwrap(), &tokens, None).unwrap();
        for (a, b) in via_mask.h.iter().zip(via_zero.h.iter()) {
            assert!(a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut w = TransformerWeights::init_random(test_config(), 6).unwrap();
        w.unembed.fill(0.0);
        let loss = loss_ce(&w, &[0, 1, 2, 3]).unwrap();
        assert_eq!(loss, (w.config.vocab_size as f64).ln());
    }

    #[test]
    fn loss_requires_two_tokens() {
        let w = TransformerWeights::init_random(test_config(), 6).unwrap();
        assert!(matches!(loss_ce(&w, &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn loss_matches_naive_reimplementation() {
        // Independent straightforward computation of the same quantity:
        // explicit softmax per position, no log-sum-exp shortcut.
        let w = TransformerWeights::init_random(test_config(), 3).unwrap();
        let tokens: Vec<u32> = (0..11).chain(0..5).collect();
        let loss = loss_ce(&w, &tokens).unwrap();

        let trace = forward(&w, &tokens, None).unwrap();
        let mut naive = 0.0;
        for p in 0..tokens.len() - 1 {
            let row = trace.logits.row(p);
            let exps: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            let prob = exps[tokens[p + 1] as usize] / sum;
            naive -= prob.ln();
        }
        naive /= (tokens.len() - 1) as f64;
        assert!(
            (loss - naive).abs() <= 1e-10,
            "loss {loss} vs naive {naive}"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let w = TransformerWeights::init_random(test_config(), 12).unwrap();
        let tokens = [5, 4, 3, 2, 1, 0, 6];
        let a = forward(&w, &tokens, None).unwrap();
        let b = forward(&w, &tokens, None).unwrap();
        assert_eq!(
            a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

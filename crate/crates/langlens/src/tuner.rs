//! Exact gradients and gradient-masked selective fine-tuning.
//!
//! Reverse-mode differentiation of the mean next-token cross-entropy is
//! written out by hand against the captured forward trace, so gradients
//! are exact up to rounding and checkable against central differences.
//!
//! Training is plain gradient descent. With a neuron set as gradient
//! mask, the update touches exactly the masked rows/columns of the seven
//! projection matrices and nothing else: unmasked coordinates are never
//! written, so they stay bit-identical. Embeddings, the unembedding, and
//! norm gains are never trainable under a mask.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::NeuronSet;
use crate::error::{Error, Result};
use crate::model::{
    ce_from_logits, forward, loss_ce, rms_norm, silu, ForwardTrace, MatrixKind, ModelConfig,
    NeuronId, TransformerWeights, RMS_EPS,
};
use crate::seeds::rng_for;

/// One gradient matrix per parameter matrix, shapes mirroring the model.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub unembed: Array2<f64>,
    pub final_norm: Array1<f64>,
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
    pub norm_attn: Array1<f64>,
    pub norm_ffn: Array1<f64>,
}

impl GradientBundle {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d_model = config.d_model;
        let d_mid = config.d_mid();
        let d_inter = config.d_inter;
        GradientBundle {
            tok_emb: Array2::zeros((config.vocab_size, d_model)),
            pos_emb: Array2::zeros((config.max_seq_len, d_model)),
            unembed: Array2::zeros((d_model, config.vocab_size)),
            final_norm: Array1::zeros(d_model),
            layers: (0..config.n_layers)
                .map(|_| LayerGrads {
                    wq: Array2::zeros((d_model, d_mid)),
                    wk: Array2::zeros((d_model, d_mid)),
                    wv: Array2::zeros((d_model, d_mid)),
                    wo: Array2::zeros((d_mid, d_model)),
                    w_gate: Array2::zeros((d_model, d_inter)),
                    w_up: Array2::zeros((d_model, d_inter)),
                    w_down: Array2::zeros((d_inter, d_model)),
                    norm_attn: Array1::zeros(d_model),
                    norm_ffn: Array1::zeros(d_model),
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &GradientBundle) {
        self.tok_emb += &other.tok_emb;
        self.pos_emb += &other.pos_emb;
        self.unembed += &other.unembed;
        self.final_norm += &other.final_norm;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
            a.w_gate += &b.w_gate;
            a.w_up += &b.w_up;
            a.w_down += &b.w_down;
            a.norm_attn += &b.norm_attn;
            a.norm_ffn += &b.norm_ffn;
        }
    }

    fn scale(&mut self, factor: f64) {
        self.tok_emb.mapv_inplace(|v| v * factor);
        self.pos_emb.mapv_inplace(|v| v * factor);
        self.unembed.mapv_inplace(|v| v * factor);
        self.final_norm.mapv_inplace(|v| v * factor);
        for layer in &mut self.layers {
            layer.wq.mapv_inplace(|v| v * factor);
            layer.wk.mapv_inplace(|v| v * factor);
            layer.wv.mapv_inplace(|v| v * factor);
            layer.wo.mapv_inplace(|v| v * factor);
            layer.w_gate.mapv_inplace(|v| v * factor);
            layer.w_up.mapv_inplace(|v| v * factor);
            layer.w_down.mapv_inplace(|v| v * factor);
            layer.norm_attn.mapv_inplace(|v| v * factor);
            layer.norm_ffn.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat_tensors()
            .iter()
            .all(|(_, data)| data.iter().all(|v| v.is_finite()))
    }

    /// All gradient tensors in the weights' canonical order.
    pub fn flat_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![
            (
                "tok_emb".to_string(),
                self.tok_emb.iter().copied().collect(),
            ),
            (
                "pos_emb".to_string(),
                self.pos_emb.iter().copied().collect(),
            ),
            (
                "unembed".to_string(),
                self.unembed.iter().copied().collect(),
            ),
            ("final_norm".to_string(), self.final_norm.to_vec()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.wq"), layer.wq.iter().copied().collect()));
            out.push((format!("layers.{i}.wk"), layer.wk.iter().copied().collect()));
            out.push((format!("layers.{i}.wv"), layer.wv.iter().copied().collect()));
            out.push((format!("layers.{i}.wo"), layer.wo.iter().copied().collect()));
            out.push((
                format!("layers.{i}.w_gate"),
                layer.w_gate.iter().copied().collect(),
            ));
            out.push((
                format!("layers.{i}.w_up"),
                layer.w_up.iter().copied().collect(),
            ));
            out.push((
                format!("layers.{i}.w_down"),
                layer.w_down.iter().copied().collect(),
            ));
            out.push((format!("layers.{i}.norm_attn"), layer.norm_attn.to_vec()));
            out.push((format!("layers.{i}.norm_ffn"), layer.norm_ffn.to_vec()));
        }
        out
    }
}

/// Row-wise RMS-norm backward. Returns the input gradient and adds the
/// gain gradient into `dgain`.
fn rms_backward(
    h: &Array2<f64>,
    gain: &Array1<f64>,
    dz: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = h.ncols() as f64;
    let mut dh = Array2::zeros(h.raw_dim());
    for (row_idx, h_row) in h.rows().into_iter().enumerate() {
        let dz_row = dz.row(row_idx);
        let r = (h_row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt();
        // dgain_j += dz_j * h_j / r
        for (j, g) in dgain.iter_mut().enumerate() {
            *g += dz_row[j] * h_row[j] / r;
        }
        // a = dz ⊙ gain; dh = a/r − h · (a·h) / (d·r³)
        let mut dot = 0.0;
        for j in 0..h_row.len() {
            dot += dz_row[j] * gain[j] * h_row[j];
        }
        let scale = dot / (d * r * r * r);
        let mut dh_row = dh.row_mut(row_idx);
        for j in 0..h_row.len() {
            dh_row[j] = dz_row[j] * gain[j] / r - h_row[j] * scale;
        }
    }
    dh
}

fn silu_prime(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Gradients of one sequence's mean cross-entropy; also returns the loss.
fn backward_sequence(weights: &TransformerWeights, trace: &ForwardTrace) -> (GradientBundle, f64) {
    let config = &weights.config;
    let tokens = &trace.tokens;
    let l = tokens.len();
    let positions = l - 1;
    let mut grads = GradientBundle::zeros(config);

    // d loss / d logits: (softmax − onehot(target)) / positions.
    let mut dlogits = Array2::zeros(trace.logits.raw_dim());
    for p in 0..positions {
        let row = trace.logits.row(p);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut drow = dlogits.row_mut(p);
        for (v, e) in drow.iter_mut().zip(&exps) {
            *v = e / sum / positions as f64;
        }
        drow[tokens[p + 1] as usize] -= 1.0 / positions as f64;
    }
    let loss = ce_from_logits(&trace.logits, tokens);

    // Unembedding and final norm.
    let h_last = &trace.h[config.n_layers];
    let z = rms_norm(h_last, &weights.final_norm);
    grads.unembed += &z.t().dot(&dlogits);
    let dz = dlogits.dot(&weights.unembed.t());
    let mut dh = rms_backward(h_last, &weights.final_norm, &dz, &mut grads.final_norm);

    let d_head = config.d_head;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    for i in (0..config.n_layers).rev() {
        let lw = &weights.layers[i];
        let lg = &mut grads.layers[i];
        let h = &trace.h[i];
        let x = &trace.attn_in[i];
        let y = &trace.ffn_in[i];
        let h_mid = h + &trace.attn_out[i];

        // FFN backward: h_next = h_mid + A·w_down, A = silu(G) ⊙ U.
        let d_ffn_out = &dh;
        let a = &trace.h_ffn[i];
        lg.w_down += &a.t().dot(d_ffn_out);
        let da = d_ffn_out.dot(&lw.w_down.t());
        let g_pre = y.dot(&lw.w_gate);
        let u_pre = y.dot(&lw.w_up);
        let mut du = da.clone();
        du.zip_mut_with(&g_pre, |v, &g| *v *= silu(g));
        let mut dg = da;
        dg.zip_mut_with(&u_pre, |v, &u| *v *= u);
        dg.zip_mut_with(&g_pre, |v, &g| *v *= silu_prime(g));
        lg.w_gate += &y.t().dot(&dg);
        lg.w_up += &y.t().dot(&du);
        let dy = dg.dot(&lw.w_gate.t()) + du.dot(&lw.w_up.t());
        let dh_mid_norm = rms_backward(&h_mid, &lw.norm_ffn, &dy, &mut lg.norm_ffn);
        let dh_mid = &dh + &dh_mid_norm;

        // Attention backward: h_mid = h + C·wo, C_g = P_g·V_g.
        let d_attn_out = &dh_mid;
        let c = &trace.attn_concat[i];
        lg.wo += &c.t().dot(d_attn_out);
        let dc = d_attn_out.dot(&lw.wo.t());

        let q = x.dot(&lw.wq);
        let k = x.dot(&lw.wk);
        let v = x.dot(&lw.wv);
        let mut dq = Array2::zeros((l, config.d_mid()));
        let mut dk = Array2::zeros((l, config.d_mid()));
        let mut dv = Array2::zeros((l, config.d_mid()));
        for g in 0..config.n_heads {
            let lo = g * d_head;
            let hi = lo + d_head;
            let probs = &trace.attn_probs[i][g];
            let vg = v.slice(s![.., lo..hi]);
            let dcg = dc.slice(s![.., lo..hi]);
            let dp = dcg.dot(&vg.t());
            dv.slice_mut(s![.., lo..hi]).assign(&probs.t().dot(&dcg));

            // Softmax backward per row under the causal mask; masked
            // entries have P = 0 and contribute nothing.
            let mut ds = Array2::zeros((l, l));
            for row in 0..l {
                let p_row = probs.row(row);
                let dp_row = dp.row(row);
                let dot: f64 = p_row
                    .iter()
                    .zip(dp_row.iter())
                    .map(|(&pv, &dv_)| pv * dv_)
                    .sum();
                let mut ds_row = ds.row_mut(row);
                for col in 0..=row {
                    ds_row[col] = p_row[col] * (dp_row[col] - dot) * inv_sqrt;
                }
            }
            let qg = q.slice(s![.., lo..hi]);
            let kg = k.slice(s![.., lo..hi]);
            dq.slice_mut(s![.., lo..hi]).assign(&ds.dot(&kg));
            dk.slice_mut(s![.., lo..hi]).assign(&ds.t().dot(&qg));
        }
        lg.wq += &x.t().dot(&dq);
        lg.wk += &x.t().dot(&dk);
        lg.wv += &x.t().dot(&dv);
        let dx = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        let dh_norm = rms_backward(h, &lw.norm_attn, &dx, &mut lg.norm_attn);
        dh = dh_mid + dh_norm;
    }

    // Embedding rows.
    for (pos, &tok) in tokens.iter().enumerate() {
        let dh_row = dh.row(pos);
        let mut tok_row = grads.tok_emb.row_mut(tok as usize);
        tok_row += &dh_row;
        let mut pos_row = grads.pos_emb.row_mut(pos);
        pos_row += &dh_row;
    }

    (grads, loss)
}

fn check_batch(batch: &[Vec<u32>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".to_string()));
    }
    for seq in batch {
        if seq.len() < 2 {
            return Err(Error::Input(
                "training sequences need at least 2 tokens".to_string(),
            ));
        }
    }
    Ok(())
}

/// Exact gradients of the batch's mean cross-entropy plus the loss.
/// Per-sequence work may run in parallel; the reduction is in sequence
/// index order, so the result is bit-deterministic.
pub fn grads_and_loss(
    weights: &TransformerWeights,
    batch: &[Vec<u32>],
) -> Result<(GradientBundle, f64)> {
    check_batch(batch)?;
    let per_seq: Vec<(GradientBundle, f64)> = batch
        .par_iter()
        .map(|seq| {
            let trace = forward(weights, seq, None)?;
            Ok(backward_sequence(weights, &trace))
        })
        .collect::<Result<_>>()?;

    let mut iter = per_seq.into_iter();
    let (mut total, mut loss) = iter.next().expect("batch checked non-empty");
    for (bundle, l) in iter {
        total.add_assign(&bundle);
        loss += l;
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((total, loss * scale))
}

/// Exact analytic gradients of the batch's mean cross-entropy.
pub fn grads(weights: &TransformerWeights, batch: &[Vec<u32>]) -> Result<GradientBundle> {
    grads_and_loss(weights, batch).map(|(g, _)| g)
}

/// Plain gradient-descent settings with an optional gradient mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// When present, only the masked neurons' rows/columns are updated.
    pub mask: Option<NeuronSet>,
    /// Restrict the mask to these matrix kinds (default: all kinds).
    pub kind_filter: Option<BTreeSet<MatrixKind>>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is accepted as the explicit null update.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: TransformerWeights,
    pub log: Vec<TrainLogEntry>,
}

/// Masked neurons grouped per layer and kind, with the kind filter
/// already applied.
fn mask_coordinates(config: &ModelConfig, cfg: &TrainConfig) -> Result<Option<Vec<NeuronId>>> {
    let Some(set) = &cfg.mask else {
        return Ok(None);
    };
    set.validate(config)?;
    let ids = set
        .members
        .iter()
        .filter(|id| {
            cfg.kind_filter
                .as_ref()
                .map(|kinds| kinds.contains(&id.kind))
                .unwrap_or(true)
        })
        .copied()
        .collect();
    Ok(Some(ids))
}

/// Subtract `lr · grad` over one neuron's row/column. Coordinates whose
/// update is exactly zero are left untouched so their bits never change.
fn apply_neuron_update(
    weights: &mut TransformerWeights,
    grads: &GradientBundle,
    id: &NeuronId,
    lr: f64,
) {
    let lw = &mut weights.layers[id.layer];
    let lg = &grads.layers[id.layer];
    let (w, g): (&mut Array2<f64>, &Array2<f64>) = match id.kind {
        MatrixKind::Q => (&mut lw.wq, &lg.wq),
        MatrixKind::K => (&mut lw.wk, &lg.wk),
        MatrixKind::V => (&mut lw.wv, &lg.wv),
        MatrixKind::O => (&mut lw.wo, &lg.wo),
        MatrixKind::Gate => (&mut lw.w_gate, &lg.w_gate),
        MatrixKind::Up => (&mut lw.w_up, &lg.w_up),
        MatrixKind::Down => (&mut lw.w_down, &lg.w_down),
    };
    if matches!(id.kind, MatrixKind::O | MatrixKind::Down) {
        let g_row = g.row(id.index);
        let mut w_row = w.row_mut(id.index);
        for (wv, gv) in w_row.iter_mut().zip(g_row.iter()) {
            let delta = lr * gv;
            if delta != 0.0 {
                *wv -= delta;
            }
        }
    } else {
        let g_col = g.column(id.index);
        let mut w_col = w.column_mut(id.index);
        for (wv, gv) in w_col.iter_mut().zip(g_col.iter()) {
            let delta = lr * gv;
            if delta != 0.0 {
                *wv -= delta;
            }
        }
    }
}

fn apply_full_update(weights: &mut TransformerWeights, grads: &GradientBundle, lr: f64) {
    fn upd2(w: &mut Array2<f64>, g: &Array2<f64>, lr: f64) {
        w.zip_mut_with(g, |wv, &gv| {
            let delta = lr * gv;
            if delta != 0.0 {
                *wv -= delta;
            }
        });
    }
    fn upd1(w: &mut Array1<f64>, g: &Array1<f64>, lr: f64) {
        w.zip_mut_with(g, |wv, &gv| {
            let delta = lr * gv;
            if delta != 0.0 {
                *wv -= delta;
            }
        });
    }
    upd2(&mut weights.tok_emb, &grads.tok_emb, lr);
    upd2(&mut weights.pos_emb, &grads.pos_emb, lr);
    upd2(&mut weights.unembed, &grads.unembed, lr);
    upd1(&mut weights.final_norm, &grads.final_norm, lr);
    for (lw, lg) in weights.layers.iter_mut().zip(&grads.layers) {
        upd2(&mut lw.wq, &lg.wq, lr);
        upd2(&mut lw.wk, &lg.wk, lr);
        upd2(&mut lw.wv, &lg.wv, lr);
        upd2(&mut lw.wo, &lg.wo, lr);
        upd2(&mut lw.w_gate, &lg.w_gate, lr);
        upd2(&mut lw.w_up, &lg.w_up, lr);
        upd2(&mut lw.w_down, &lg.w_down, lr);
        upd1(&mut lw.norm_attn, &lg.norm_attn, lr);
        upd1(&mut lw.norm_ffn, &lg.norm_ffn, lr);
    }
}

/// Plain gradient descent for `cfg.steps` updates. The batch order is a
/// seed-derived per-epoch shuffle; with a mask, only the masked
/// rows/columns change and everything else stays bit-identical.
pub fn train(
    weights: &TransformerWeights,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".to_string()));
    }
    let masked_ids = mask_coordinates(&weights.config, cfg)?;

    let mut current = weights.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut epoch = 0usize;
    let mut queue: Vec<usize> = Vec::new();

    for step in 0..cfg.steps {
        if queue.len() < cfg.batch_size.min(corpus.len()) {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng_for(cfg.seed, &format!("train/epoch/{epoch}")));
            epoch += 1;
            queue.extend(order);
        }
        let take = cfg.batch_size.min(queue.len());
        let batch: Vec<Vec<u32>> = queue.drain(..take).map(|i| corpus[i].clone()).collect();

        let (grads, loss) = grads_and_loss(&current, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss became non-finite ({loss})"),
            });
        }
        match &masked_ids {
            Some(ids) => {
                for id in ids {
                    apply_neuron_update(&mut current, &grads, id, cfg.learning_rate);
                }
            }
            None => apply_full_update(&mut current, &grads, cfg.learning_rate),
        }
        log.push(TrainLogEntry { step, loss });
    }

    Ok(TrainOutcome {
        weights: current,
        log,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Resolution floor of the central difference: the loss carries a few
/// ulps of rounding error, which the division by `2·FD_STEP` amplifies to
/// roughly `|loss| · 1e-16 / 1e-6 ≈ 1e-9`. Differences below this level
/// are not measurable by the numeric side.
pub const FD_ATOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn batch_loss(weights: &TransformerWeights, batch: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    for seq in batch {
        total += loss_ce(weights, seq)?;
    }
    Ok(total / batch.len() as f64)
}

/// Compare sampled analytic gradient coordinates against central finite
/// differences with step [`FD_STEP`].
///
/// The relative error divides by `max(|analytic|, |numeric|, floor)`
/// where `floor = FD_ATOL / tolerance`: coordinates whose gradients sit
/// at the numeric oracle's own resolution cannot be distinguished by it.
/// With `tolerance = 0` no floor applies and any discrepancy fails.
pub fn grad_check(
    weights: &TransformerWeights,
    batch: &[Vec<u32>],
    samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::Input("samples must be at least 1".to_string()));
    }
    check_batch(batch)?;
    let analytic = grads(weights, batch)?;
    let flat_grads = analytic.flat_tensors();
    let sizes: Vec<(String, usize)> = flat_grads
        .iter()
        .map(|(name, data)| (name.clone(), data.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    let samples = samples.min(total);

    let mut rng = rng_for(seed, "grad-check");
    let picked = rand::seq::index::sample(&mut rng, total, samples);

    let mut working = weights.clone();
    let mut entries = Vec::with_capacity(samples);
    for linear in picked.iter() {
        let (tensor, offset) = locate(&sizes, linear);
        let a = flat_grads
            .iter()
            .find(|(name, _)| name == &tensor)
            .expect("tensor exists")
            .1[offset];

        let original = get_param(&mut working, &tensor, offset);
        set_param(&mut working, &tensor, offset, original + FD_STEP);
        let plus = batch_loss(&working, batch)?;
        set_param(&mut working, &tensor, offset, original - FD_STEP);
        let minus = batch_loss(&working, batch)?;
        set_param(&mut working, &tensor, offset, original);

        let n = (plus - minus) / (2.0 * FD_STEP);
        let floor = if tolerance > 0.0 {
            FD_ATOL / tolerance
        } else {
            0.0
        };
        let denom = a.abs().max(n.abs()).max(floor);
        let diff = (a - n).abs();
        let rel_err = if diff == 0.0 {
            0.0
        } else if denom == 0.0 {
            f64::INFINITY
        } else {
            diff / denom
        };
        entries.push(GradCheckEntry {
            tensor,
            index: offset,
            analytic: a,
            numeric: n,
            rel_err,
        });
    }

    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let mean_rel_err = entries.iter().map(|e| e.rel_err).sum::<f64>() / entries.len() as f64;
    Ok(GradCheckReport {
        passed: max_rel_err <= tolerance,
        max_rel_err,
        mean_rel_err,
        tolerance,
        entries,
    })
}

fn locate(sizes: &[(String, usize)], mut linear: usize) -> (String, usize) {
    for (name, size) in sizes {
        if linear < *size {
            return (name.clone(), linear);
        }
        linear -= size;
    }
    unreachable!("linear index out of range");
}

fn with_param<R>(
    weights: &mut TransformerWeights,
    tensor: &str,
    f: impl FnOnce(&mut [f64]) -> R,
) -> R {
    fn slice2(a: &mut Array2<f64>) -> &mut [f64] {
        a.as_slice_mut().expect("standard layout")
    }
    fn slice1(a: &mut Array1<f64>) -> &mut [f64] {
        a.as_slice_mut().expect("standard layout")
    }
    match tensor {
        "tok_emb" => f(slice2(&mut weights.tok_emb)),
        "pos_emb" => f(slice2(&mut weights.pos_emb)),
        "unembed" => f(slice2(&mut weights.unembed)),
        "final_norm" => f(slice1(&mut weights.final_norm)),
        other => {
            let rest = other.strip_prefix("layers.").expect("layer tensor");
            let (idx, field) = rest.split_once('.').expect("layer tensor name");
            let layer = &mut weights.layers[idx.parse::<usize>().expect("layer index")];
            match field {
                "wq" => f(slice2(&mut layer.wq)),
                "wk" => f(slice2(&mut layer.wk)),
                "wv" => f(slice2(&mut layer.wv)),
                "wo" => f(slice2(&mut layer.wo)),
                "w_gate" => f(slice2(&mut layer.w_gate)),
                "w_up" => f(slice2(&mut layer.w_up)),
                "w_down" => f(slice2(&mut layer.w_down)),
                "norm_attn" => f(slice1(&mut layer.norm_attn)),
                "norm_ffn" => f(slice1(&mut layer.norm_ffn)),
                _ => unreachable!("unknown tensor {other}"),
            }
        }
    }
}

fn get_param(weights: &mut TransformerWeights, tensor: &str, offset: usize) -> f64 {
    with_param(weights, tensor, |s| s[offset])
}

fn set_param(weights: &mut TransformerWeights, tensor: &str, offset: usize, value: f64) {
    with_param(weights, tensor, |s| s[offset] = value);
}

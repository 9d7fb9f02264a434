//! A minimal, deterministic, 64-bit-float decoder-only transformer.
//!
//! The model is pre-norm with RMS normalization, multi-head causal
//! attention, and a SiLU-gated feed-forward block, so the residual stream
//! satisfies `h[i+1] = h[i] + attn_out[i] + ffn_out[i]` exactly. A
//! "neuron" is a single row or column of one parameter matrix; the
//! [`DeactivationMask`] names neurons to be treated as zero during a
//! forward pass.

mod forward;
mod io;

pub(crate) use forward::{attn_sub_forward, causal_softmax_inplace, ffn_sub_forward};
pub use forward::{
    ce_from_logits, forward, loss_ce, nll_sum, rms_norm, silu, ForwardTrace, RMS_EPS,
};
pub(crate) use io::{decode_container, encode_container};
pub use io::{
    load_weights, save_weights, save_weights_with_note, weights_from_bytes, weights_to_bytes,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Static shape of a toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_inter: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Concatenated head dimension: `n_heads * d_head`.
    pub fn d_mid(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_inter", self.d_inter),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_inter < self.d_model {
            return Err(Error::Config(format!(
                "d_inter ({}) must be at least d_model ({})",
                self.d_inter, self.d_model
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size ({}) must be at least 4",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Which parameter matrix a neuron lives in.
///
/// `Q`, `K`, `V`, `Gate`, `Up` neurons are columns of their matrix;
/// `O` and `Down` neurons are rows. Either way, deactivation zeroes the
/// named row or column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 7] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::O,
        MatrixKind::Gate,
        MatrixKind::Up,
        MatrixKind::Down,
    ];

    pub const ATTENTION: [MatrixKind; 4] =
        [MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O];

    pub const FFN: [MatrixKind; 3] = [MatrixKind::Gate, MatrixKind::Up, MatrixKind::Down];

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            MatrixKind::Q | MatrixKind::K | MatrixKind::V | MatrixKind::O
        )
    }

    pub fn is_ffn(self) -> bool {
        !self.is_attention()
    }

    /// Number of neurons of this kind per layer.
    pub fn dim(self, config: &ModelConfig) -> usize {
        if self.is_attention() {
            config.d_mid()
        } else {
            config.d_inter
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MatrixKind::Q => "Q",
            MatrixKind::K => "K",
            MatrixKind::V => "V",
            MatrixKind::O => "O",
            MatrixKind::Gate => "GATE",
            MatrixKind::Up => "UP",
            MatrixKind::Down => "DOWN",
        };
        f.write_str(name)
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "Q" => Ok(MatrixKind::Q),
            "K" => Ok(MatrixKind::K),
            "V" => Ok(MatrixKind::V),
            "O" => Ok(MatrixKind::O),
            "GATE" => Ok(MatrixKind::Gate),
            "UP" => Ok(MatrixKind::Up),
            "DOWN" => Ok(MatrixKind::Down),
            other => Err(Error::Input(format!("unknown matrix kind `{other}`"))),
        }
    }
}

/// Name of one row or column of one parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "NeuronIdRepr", into = "NeuronIdRepr")]
pub struct NeuronId {
    pub layer: usize,
    pub kind: MatrixKind,
    pub index: usize,
}

/// Wire form: a `(layer, kind, index)` triple.
#[derive(Serialize, Deserialize, Clone, Copy)]
struct NeuronIdRepr(usize, MatrixKind, usize);

impl From<NeuronIdRepr> for NeuronId {
    fn from(r: NeuronIdRepr) -> Self {
        NeuronId {
            layer: r.0,
            kind: r.1,
            index: r.2,
        }
    }
}

impl From<NeuronId> for NeuronIdRepr {
    fn from(n: NeuronId) -> Self {
        NeuronIdRepr(n.layer, n.kind, n.index)
    }
}

impl NeuronId {
    pub fn new(layer: usize, kind: MatrixKind, index: usize) -> Self {
        NeuronId { layer, kind, index }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::Input(format!(
                "neuron layer {} out of range (n_layers = {})",
                self.layer, config.n_layers
            )));
        }
        let bound = self.kind.dim(config);
        if self.index >= bound {
            return Err(Error::Input(format!(
                "neuron index {} out of range for kind {} (bound {})",
                self.index, self.kind, bound
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.layer, self.kind, self.index)
    }
}

/// A duplicate-free set of neurons to zero during a forward pass.
///
/// Applying a mask twice is the same as applying it once: deactivation
/// writes zeros, so the operation is idempotent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeactivationMask {
    neurons: BTreeSet<NeuronId>,
}

impl DeactivationMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NeuronId) {
        self.neurons.insert(id);
    }

    pub fn contains(&self, id: &NeuronId) -> bool {
        self.neurons.contains(id)
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NeuronId> {
        self.neurons.iter()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for id in &self.neurons {
            id.validate(config)?;
        }
        Ok(())
    }
}

impl FromIterator<NeuronId> for DeactivationMask {
    fn from_iter<I: IntoIterator<Item = NeuronId>>(iter: I) -> Self {
        DeactivationMask {
            neurons: iter.into_iter().collect(),
        }
    }
}

/// Tensor name -> (shape, row-major data), the exchange form used by the
/// file format.
pub type NamedTensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Per-layer parameter matrices.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// `(d_model, d_mid)` query/key/value projections.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// `(d_mid, d_model)` attention output projection.
    pub wo: Array2<f64>,
    /// `(d_model, d_inter)` gate and up projections.
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    /// `(d_inter, d_model)` down projection.
    pub w_down: Array2<f64>,
    /// RMS-norm gains for the attention and FFN sub-blocks.
    pub norm_attn: Array1<f64>,
    pub norm_ffn: Array1<f64>,
}

/// All parameters of one toy transformer.
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    /// `(vocab_size, d_model)` token embedding.
    pub tok_emb: Array2<f64>,
    /// `(max_seq_len, d_model)` learned positional table.
    pub pos_emb: Array2<f64>,
    /// `(d_model, vocab_size)` untied unembedding.
    pub unembed: Array2<f64>,
    /// Final RMS-norm gain.
    pub final_norm: Array1<f64>,
    pub layers: Vec<LayerWeights>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(normal.sample(rng));
    }
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

impl LayerWeights {
    /// Zero the row or column of this layer named by `(kind, index)`.
    pub fn zero_neuron(&mut self, kind: MatrixKind, index: usize) {
        match kind {
            MatrixKind::Q => self.wq.column_mut(index).fill(0.0),
            MatrixKind::K => self.wk.column_mut(index).fill(0.0),
            MatrixKind::V => self.wv.column_mut(index).fill(0.0),
            MatrixKind::O => self.wo.row_mut(index).fill(0.0),
            MatrixKind::Gate => self.w_gate.column_mut(index).fill(0.0),
            MatrixKind::Up => self.w_up.column_mut(index).fill(0.0),
            MatrixKind::Down => self.w_down.row_mut(index).fill(0.0),
        }
    }
}

impl TransformerWeights {
    /// Draw fresh weights from a fixed scheme: projections are Gaussian
    /// with standard deviation `0.02 / sqrt(d_model)`, embeddings with
    /// standard deviation `0.02`, norm gains start at one. The draw order
    /// is fixed (embeddings, unembedding, then layers in index order), so
    /// identical `(config, seed)` yields bit-identical weights.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng_for(seed, "weights/init");
        let std_emb = 0.02;
        let std_proj = 0.02 / (config.d_model as f64).sqrt();
        let d_model = config.d_model;
        let d_mid = config.d_mid();
        let d_inter = config.d_inter;

        let tok_emb = gaussian_matrix(&mut rng, config.vocab_size, d_model, std_emb);
        let pos_emb = gaussian_matrix(&mut rng, config.max_seq_len, d_model, std_emb);
        let unembed = gaussian_matrix(&mut rng, d_model, config.vocab_size, std_proj);
        let final_norm = Array1::ones(d_model);

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: gaussian_matrix(&mut rng, d_model, d_mid, std_proj),
                wk: gaussian_matrix(&mut rng, d_model, d_mid, std_proj),
                wv: gaussian_matrix(&mut rng, d_model, d_mid, std_proj),
                wo: gaussian_matrix(&mut rng, d_mid, d_model, std_proj),
                w_gate: gaussian_matrix(&mut rng, d_model, d_inter, std_proj),
                w_up: gaussian_matrix(&mut rng, d_model, d_inter, std_proj),
                w_down: gaussian_matrix(&mut rng, d_inter, d_model, std_proj),
                norm_attn: Array1::ones(d_model),
                norm_ffn: Array1::ones(d_model),
            });
        }

        Ok(TransformerWeights {
            config,
            tok_emb,
            pos_emb,
            unembed,
            final_norm,
            layers,
        })
    }

    /// Zero the row or column named by `id`.
    pub fn zero_neuron(&mut self, id: &NeuronId) {
        self.layers[id.layer].zero_neuron(id.kind, id.index);
    }

    /// A copy of the weights with every neuron in `mask` zeroed.
    pub fn with_mask(&self, mask: &DeactivationMask) -> Result<Self> {
        mask.validate(&self.config)?;
        let mut out = self.clone();
        for id in mask.iter() {
            out.zero_neuron(id);
        }
        Ok(out)
    }

    /// Check declared shapes and finiteness of every matrix.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape, data) in self.named_tensors() {
            let expected: usize = shape.iter().product();
            if data.len() != expected {
                return Err(Error::Config(format!(
                    "tensor {name} has {} values, expected {expected}",
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "tensor {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    /// Canonical `(name, shape)` listing for the serialized form.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d_model = config.d_model;
        let d_mid = config.d_mid();
        let d_inter = config.d_inter;
        let mut out = vec![
            ("tok_emb".to_string(), vec![config.vocab_size, d_model]),
            ("pos_emb".to_string(), vec![config.max_seq_len, d_model]),
            ("unembed".to_string(), vec![d_model, config.vocab_size]),
            ("final_norm".to_string(), vec![d_model]),
        ];
        for i in 0..config.n_layers {
            out.push((format!("layers.{i}.wq"), vec![d_model, d_mid]));
            out.push((format!("layers.{i}.wk"), vec![d_model, d_mid]));
            out.push((format!("layers.{i}.wv"), vec![d_model, d_mid]));
            out.push((format!("layers.{i}.wo"), vec![d_mid, d_model]));
            out.push((format!("layers.{i}.w_gate"), vec![d_model, d_inter]));
            out.push((format!("layers.{i}.w_up"), vec![d_model, d_inter]));
            out.push((format!("layers.{i}.w_down"), vec![d_inter, d_model]));
            out.push((format!("layers.{i}.norm_attn"), vec![d_model]));
            out.push((format!("layers.{i}.norm_ffn"), vec![d_model]));
        }
        out
    }

    /// All tensors in canonical order as `(name, shape, row-major data)`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        fn flat2(a: &Array2<f64>) -> Vec<f64> {
            a.iter().copied().collect()
        }
        fn flat1(a: &Array1<f64>) -> Vec<f64> {
            a.to_vec()
        }
        let mut out = vec![
            (
                "tok_emb".to_string(),
                vec![self.config.vocab_size, self.config.d_model],
                flat2(&self.tok_emb),
            ),
            (
                "pos_emb".to_string(),
                vec![self.config.max_seq_len, self.config.d_model],
                flat2(&self.pos_emb),
            ),
            (
                "unembed".to_string(),
                vec![self.config.d_model, self.config.vocab_size],
                flat2(&self.unembed),
            ),
            (
                "final_norm".to_string(),
                vec![self.config.d_model],
                flat1(&self.final_norm),
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let d_model = self.config.d_model;
            let d_mid = self.config.d_mid();
            let d_inter = self.config.d_inter;
            out.push((
                format!("layers.{i}.wq"),
                vec![d_model, d_mid],
                flat2(&layer.wq),
            ));
            out.push((
                format!("layers.{i}.wk"),
                vec![d_model, d_mid],
                flat2(&layer.wk),
            ));
            out.push((
                format!("layers.{i}.wv"),
                vec![d_model, d_mid],
                flat2(&layer.wv),
            ));
            out.push((
                format!("layers.{i}.wo"),
                vec![d_mid, d_model],
                flat2(&layer.wo),
            ));
            out.push((
                format!("layers.{i}.w_gate"),
                vec![d_model, d_inter],
                flat2(&layer.w_gate),
            ));
            out.push((
                format!("layers.{i}.w_up"),
                vec![d_model, d_inter],
                flat2(&layer.w_up),
            ));
            out.push((
                format!("layers.{i}.w_down"),
                vec![d_inter, d_model],
                flat2(&layer.w_down),
            ));
            out.push((
                format!("layers.{i}.norm_attn"),
                vec![d_model],
                flat1(&layer.norm_attn),
            ));
            out.push((
                format!("layers.{i}.norm_ffn"),
                vec![d_model],
                flat1(&layer.norm_ffn),
            ));
        }
        out
    }

    /// Rebuild weights from named tensors (inverse of [`named_tensors`]).
    ///
    /// [`named_tensors`]: TransformerWeights::named_tensors
    pub fn from_named_tensors(config: ModelConfig, mut tensors: NamedTensorMap) -> Result<Self> {
        fn take(tensors: &mut NamedTensorMap, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
            let (got_shape, data) = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if got_shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {got_shape:?}, manifest expects {shape:?}"
                )));
            }
            Ok(data)
        }
        fn take2(
            tensors: &mut NamedTensorMap,
            name: &str,
            rows: usize,
            cols: usize,
        ) -> Result<Array2<f64>> {
            let data = take(tensors, name, &[rows, cols])?;
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))
        }
        fn take1(tensors: &mut NamedTensorMap, name: &str, len: usize) -> Result<Array1<f64>> {
            Ok(Array1::from_vec(take(tensors, name, &[len])?))
        }

        config.validate()?;
        let d_model = config.d_model;
        let d_mid = config.d_mid();
        let d_inter = config.d_inter;
        let t = &mut tensors;

        let tok_emb = take2(t, "tok_emb", config.vocab_size, d_model)?;
        let pos_emb = take2(t, "pos_emb", config.max_seq_len, d_model)?;
        let unembed = take2(t, "unembed", d_model, config.vocab_size)?;
        let final_norm = take1(t, "final_norm", d_model)?;

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: take2(t, &format!("layers.{i}.wq"), d_model, d_mid)?,
                wk: take2(t, &format!("layers.{i}.wk"), d_model, d_mid)?,
                wv: take2(t, &format!("layers.{i}.wv"), d_model, d_mid)?,
                wo: take2(t, &format!("layers.{i}.wo"), d_mid, d_model)?,
                w_gate: take2(t, &format!("layers.{i}.w_gate"), d_model, d_inter)?,
                w_up: take2(t, &format!("layers.{i}.w_up"), d_model, d_inter)?,
                w_down: take2(t, &format!("layers.{i}.w_down"), d_inter, d_model)?,
                norm_attn: take1(t, &format!("layers.{i}.norm_attn"), d_model)?,
                norm_ffn: take1(t, &format!("layers.{i}.norm_ffn"), d_model)?,
            });
        }

        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("unknown tensor name {name}")));
        }

        Ok(TransformerWeights {
            config,
            tok_emb,
            pos_emb,
            unembed,
            final_norm,
            layers,
        })
    }

    /// Hex SHA-256 over the serialized weight bytes; used in provenance.
    pub fn model_hash(&self) -> String {
        seeds::sha256_hex(&weights_to_bytes(self))
    }

    /// Bit-level equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_equal(&self, other: &Self) -> bool {
        if self.config != other.config {
            return false;
        }
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.iter().zip(b.iter()).all(|((_, _, da), (_, _, db))| {
            da.len() == db.len()
                && da
                    .iter()
                    .zip(db.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_inter: 16,
        vocab_size: 11,
        max_seq_len: 16,
    }
}

//! Small pre-norm transformer encoder-decoder.
//!
//! The decoder exposes what debiasing needs: the per-step next-token
//! distribution, the final-layer hidden state, and one cross-attention
//! weight per source position, optionally restricted to a subset of the
//! source.

mod checkpoint;
mod params;

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::checkpoint::{load_archive, save_archive, Archive, Manifest, Stage, TensorEntry, MANIFEST_FILE};
pub use self::params::{Group, Param, ParameterStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamGrads, Var};
use crate::scalar::Scalar;
use crate::vocab::TokenId;

/// How per-head cross-attention weights collapse to one score per position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReduction {
    #[default]
    Mean,
    /// Element-wise max over heads, renormalized to sum to one.
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionReadout {
    /// Decoder layer to read; `None` means the last one.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub reduction: HeadReduction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub attention_readout: AttentionReadout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 128,
            max_source_len: 64,
            max_target_len: 32,
            vocab_size: 0,
            seed: 0,
            attention_readout: AttentionReadout::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(layer) = self.attention_readout.layer {
            if layer >= self.n_decoder_layers {
                return Err(Error::Config(format!(
                    "attention readout layer {layer} out of range for {} decoder layers",
                    self.n_decoder_layers
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayerIdx {
    norm1: NormIdx,
    attn: AttnIdx,
    norm2: NormIdx,
    ff: FfIdx,
}

#[derive(Clone, Debug)]
struct DecoderLayerIdx {
    norm1: NormIdx,
    self_attn: AttnIdx,
    norm2: NormIdx,
    cross_attn: AttnIdx,
    norm3: NormIdx,
    ff: FfIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    token_embedding: usize,
    encoder: Vec<EncoderLayerIdx>,
    encoder_norm: NormIdx,
    decoder: Vec<DecoderLayerIdx>,
    decoder_norm: NormIdx,
    out_w: usize,
    out_b: usize,
}

/// Encoder states for one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// `source_len × d_model`
    pub memory: Arc<Array2<T>>,
    /// `true` where the source position may be attended (not padding).
    pub source_mask: Vec<bool>,
}

impl<T> EncoderOutput<T> {
    pub fn source_len(&self) -> usize {
        self.source_mask.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput<T> {
    pub distribution: Array1<T>,
    /// Final decoder layer output at this step.
    pub hidden: Array1<T>,
    pub cross_attention: Array1<T>,
}

/// Restriction of decoder cross-attention to a subset of source positions.
#[derive(Clone, Copy, Debug)]
pub enum CrossMask<'a> {
    Full,
    /// The same mask for every decoder row.
    Shared(&'a [bool]),
    /// One mask per decoder row.
    PerRow(&'a [Vec<bool>]),
}

/// Tape handles produced by a decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// `T × d_model`, final decoder layer after its norm.
    pub hidden: Var,
    /// `T × vocab_size`
    pub logits: Var,
    /// Attention node of the readout layer's cross-attention.
    pub cross_attention: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParameterStore<T>,
    layout: Layout,
    positions: Arc<Array2<T>>,
}

fn sinusoid<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Scalar>(&mut self, rows: usize, cols: usize, limit: f64) -> Array2<T> {
        Array2::from_shape_fn((rows, cols), |_| T::from_f64_lossy(self.rng.gen_range(-limit..limit)))
    }

    fn xavier<T: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, limit)
    }
}

fn build_attn<T: Scalar>(
    store: &mut ParameterStore<T>,
    init: &mut Init,
    prefix: &str,
    group: Group,
    d: usize,
) -> AttnIdx {
    let mut w = |name: &str, init: &mut Init| store.push(format!("{prefix}.{name}"), group, init.xavier(d, d));
    let wq = w("wq", init);
    let wk = w("wk", init);
    let wv = w("wv", init);
    let wo = w("wo", init);
    let mut b = |name: &str| store.push(format!("{prefix}.{name}"), group, Array2::zeros((1, d)));
    AttnIdx { wq, bq: b("bq"), wk, bk: b("bk"), wv, bv: b("bv"), wo, bo: b("bo") }
}

fn build_norm<T: Scalar>(store: &mut ParameterStore<T>, prefix: &str, group: Group, d: usize) -> NormIdx {
    NormIdx {
        gain: store.push(format!("{prefix}.gain"), group, Array2::ones((1, d))),
        bias: store.push(format!("{prefix}.bias"), group, Array2::zeros((1, d))),
    }
}

fn build_ff<T: Scalar>(
    store: &mut ParameterStore<T>,
    init: &mut Init,
    prefix: &str,
    group: Group,
    d: usize,
    d_ff: usize,
) -> FfIdx {
    let w1 = store.push(format!("{prefix}.w1"), group, init.xavier(d, d_ff));
    let b1 = store.push(format!("{prefix}.b1"), group, Array2::zeros((1, d_ff)));
    let w2 = store.push(format!("{prefix}.w2"), group, init.xavier(d_ff, d));
    let b2 = store.push(format!("{prefix}.b2"), group, Array2::zeros((1, d)));
    FfIdx { w1, b1, w2, b2 }
}

fn build_layout<T: Scalar>(config: &ModelConfig, store: &mut ParameterStore<T>, init: &mut Init) -> Layout {
    let d = config.d_model;
    let token_embedding =
        store.push("embeddings.token", Group::Embeddings, init.uniform(config.vocab_size, d, 1.0));
    let encoder = (0..config.n_encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIdx {
                norm1: build_norm(store, &format!("{p}.norm1"), Group::Encoder, d),
                attn: build_attn(store, init, &format!("{p}.attn"), Group::Encoder, d),
                norm2: build_norm(store, &format!("{p}.norm2"), Group::Encoder, d),
                ff: build_ff(store, init, &format!("{p}.ff"), Group::Encoder, d, config.d_ff),
            }
        })
        .collect();
    let encoder_norm = build_norm(store, "encoder.norm", Group::Encoder, d);
    let decoder = (0..config.n_decoder_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIdx {
                norm1: build_norm(store, &format!("{p}.norm1"), Group::Decoder, d),
                self_attn: build_attn(store, init, &format!("{p}.self_attn"), Group::Decoder, d),
                norm2: build_norm(store, &format!("{p}.norm2"), Group::Decoder, d),
                cross_attn: build_attn(store, init, &format!("{p}.cross_attn"), Group::Decoder, d),
                norm3: build_norm(store, &format!("{p}.norm3"), Group::Decoder, d),
                ff: build_ff(store, init, &format!("{p}.ff"), Group::Decoder, d, config.d_ff),
            }
        })
        .collect();
    let decoder_norm = build_norm(store, "decoder.norm", Group::Decoder, d);
    let out_w = store.push("decoder.out.w", Group::Decoder, init.xavier(d, config.vocab_size));
    let out_b = store.push("decoder.out.b", Group::Decoder, Array2::zeros((1, config.vocab_size)));
    Layout { token_embedding, encoder, encoder_norm, decoder, decoder_norm, out_w, out_b }
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let mut params = ParameterStore::new();
        let layout = build_layout(&config, &mut params, &mut init);
        let len = config.max_source_len.max(config.max_target_len);
        let positions = Arc::new(sinusoid(len, config.d_model));
        Ok(Self { config, params, layout, positions })
    }

    /// Rebuilds a model around an existing parameter store with matching names and shapes.
    pub fn from_params(config: ModelConfig, params: ParameterStore<T>) -> Result<Self> {
        let template = Self::new(config)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (a, b) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.group != b.group || a.value.dim() != b.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.dim(),
                    a.name,
                    a.value.dim()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn set_trainable(&mut self, group: Group, trainable: bool) {
        self.params.set_trainable(group, trainable);
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            positions: Arc::new(self.positions.mapv(|x| U::from_f64_lossy(x.to_f64_lossy()))),
        }
    }

    fn p(&self, g: &mut Graph<T>, index: usize) -> Var {
        g.param_shared(index, self.params.shared(index), self.params.is_trainable(index))
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: usize, b: usize) -> Var {
        let w = self.p(g, w);
        let b = self.p(g, b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, idx: &NormIdx) -> Var {
        let gain = self.p(g, idx.gain);
        let bias = self.p(g, idx.bias);
        g.layer_norm(x, gain, bias)
    }

    fn feed_forward(&self, g: &mut Graph<T>, x: Var, idx: &FfIdx) -> Var {
        let h = self.linear(g, x, idx.w1, idx.b1);
        let h = g.relu(h);
        self.linear(g, h, idx.w2, idx.b2)
    }

    fn attend(
        &self,
        g: &mut Graph<T>,
        queries: Var,
        keys: Var,
        idx: &AttnIdx,
        allowed: Option<&Array2<bool>>,
    ) -> (Var, Var) {
        let q = self.linear(g, queries, idx.wq, idx.bq);
        let k = self.linear(g, keys, idx.wk, idx.bk);
        let v = self.linear(g, keys, idx.wv, idx.bv);
        let a = g.attention(q, k, v, self.config.n_heads, allowed);
        (self.linear(g, a, idx.wo, idx.bo), a)
    }

    fn embed(&self, g: &mut Graph<T>, ids: &[TokenId]) -> Var {
        let table = self.p(g, self.layout.token_embedding);
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = g.gather(table, &rows);
        let pos = self.positions.slice(ndarray::s![..ids.len(), ..]).to_owned();
        let pos = g.constant(pos);
        g.add(e, pos)
    }

    fn check_ids(&self, ids: &[TokenId], max: usize) -> Result<()> {
        if ids.len() > max {
            return Err(Error::Length { len: ids.len(), max });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Index { index: bad as usize, len: self.config.vocab_size });
        }
        Ok(())
    }

    /// Encoder pass on the tape; returns the `source_len × d_model` memory.
    pub fn encode_graph(&self, g: &mut Graph<T>, source: &[TokenId], pad: TokenId) -> Result<Var> {
        self.check_ids(source, self.config.max_source_len)?;
        if source.is_empty() {
            return Err(Error::Length { len: 0, max: self.config.max_source_len });
        }
        let valid: Vec<bool> = source.iter().map(|&t| t != pad).collect();
        let allowed = Array2::from_shape_fn((source.len(), source.len()), |(_, j)| valid[j]);
        let mut x = self.embed(g, source);
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, &layer.norm1);
            let (a, _) = self.attend(g, h, h, &layer.attn, Some(&allowed));
            x = g.add(x, a);
            let h = self.norm(g, x, &layer.norm2);
            let f = self.feed_forward(g, h, &layer.ff);
            x = g.add(x, f);
        }
        Ok(self.norm(g, x, &self.layout.encoder_norm))
    }

    /// Decoder pass over `input` (starting with BOS) against encoder `memory`.
    ///
    /// Row `t` of every output corresponds to predicting the token after
    /// `input[..=t]`. Cross-attention is limited to `source_mask` positions
    /// intersected with `cross`.
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        source_mask: &[bool],
        input: &[TokenId],
        cross: CrossMask<'_>,
    ) -> Result<DecoderVars> {
        self.check_ids(input, self.config.max_target_len)?;
        if input.is_empty() {
            return Err(Error::Length { len: 0, max: self.config.max_target_len });
        }
        let rows = input.len();
        let src = source_mask.len();
        if g.value(memory).nrows() != src {
            return Err(Error::Shape(format!(
                "memory has {} rows for a source of length {src}",
                g.value(memory).nrows()
            )));
        }
        let cross_allowed = cross_mask_matrix(source_mask, rows, cross)?;
        let causal = Array2::from_shape_fn((rows, rows), |(i, j)| j <= i);
        let readout = self.config.attention_readout.layer.unwrap_or(self.config.n_decoder_layers - 1);
        let mut x = self.embed(g, input);
        let mut cross_node = None;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm(g, x, &layer.norm1);
            let (a, _) = self.attend(g, h, h, &layer.self_attn, Some(&causal));
            x = g.add(x, a);
            let h = self.norm(g, x, &layer.norm2);
            let (a, raw) = self.attend(g, h, memory, &layer.cross_attn, Some(&cross_allowed));
            if l == readout {
                cross_node = Some(raw);
            }
            x = g.add(x, a);
            let h = self.norm(g, x, &layer.norm3);
            let f = self.feed_forward(g, h, &layer.ff);
            x = g.add(x, f);
        }
        let hidden = self.norm(g, x, &self.layout.decoder_norm);
        let logits = self.linear(g, hidden, self.layout.out_w, self.layout.out_b);
        Ok(DecoderVars { hidden, logits, cross_attention: cross_node.expect("readout layer exists") })
    }

    /// One score per source position for decoder row `row`.
    pub fn read_cross_attention(&self, g: &Graph<T>, vars: &DecoderVars, row: usize) -> Array1<T> {
        let probs = g.attention_probs(vars.cross_attention);
        let heads = T::from_usize(probs.len()).unwrap();
        match self.config.attention_readout.reduction {
            HeadReduction::Mean => {
                let mut acc = probs[0].row(row).to_owned();
                for p in &probs[1..] {
                    acc += &p.row(row);
                }
                acc / heads
            }
            HeadReduction::Max => {
                let mut acc = probs[0].row(row).to_owned();
                for p in &probs[1..] {
                    acc.zip_mut_with(&p.row(row), |a, &b| *a = a.max(b));
                }
                let total = acc.sum();
                acc / total
            }
        }
    }

    /// All readout rows as a `T × source_len` matrix.
    pub fn read_cross_attention_rows(&self, g: &Graph<T>, vars: &DecoderVars) -> Array2<T> {
        let rows = g.value(vars.hidden).nrows();
        let mut out = Array2::zeros((rows, g.attention_probs(vars.cross_attention)[0].ncols()));
        for r in 0..rows {
            out.row_mut(r).assign(&self.read_cross_attention(g, vars, r));
        }
        out
    }

    pub fn encode(&self, source: &[TokenId], pad: TokenId) -> Result<EncoderOutput<T>> {
        let mut g = Graph::new();
        let memory = self.encode_graph(&mut g, source, pad)?;
        Ok(EncoderOutput {
            memory: g.shared_value(memory),
            source_mask: source.iter().map(|&t| t != pad).collect(),
        })
    }

    fn step_outputs(&self, g: &mut Graph<T>, vars: &DecoderVars, rows: &[usize]) -> Vec<DecoderStepOutput<T>> {
        let probs = g.softmax(vars.logits);
        rows.iter()
            .map(|&r| DecoderStepOutput {
                distribution: g.value(probs).row(r).to_owned(),
                hidden: g.value(vars.hidden).row(r).to_owned(),
                cross_attention: self.read_cross_attention(g, vars, r),
            })
            .collect()
    }

    /// Next-token prediction after `prefix`, which must start with `bos`.
    pub fn decode_step(
        &self,
        enc: &EncoderOutput<T>,
        prefix: &[TokenId],
        bos: TokenId,
        attend_mask: Option<&[bool]>,
    ) -> Result<DecoderStepOutput<T>> {
        if prefix.first() != Some(&bos) {
            return Err(Error::Config("decoder prefix must begin with BOS".into()));
        }
        let mut g = Graph::new();
        let memory = g.constant_shared(Arc::clone(&enc.memory));
        let cross = attend_mask.map_or(CrossMask::Full, CrossMask::Shared);
        let vars = self.decode_graph(&mut g, memory, &enc.source_mask, prefix, cross)?;
        Ok(self.step_outputs(&mut g, &vars, &[prefix.len() - 1]).pop().unwrap())
    }

    /// One output per target token after BOS, all computed in a single pass.
    pub fn forward_teacher_forced(
        &self,
        source: &[TokenId],
        target: &[TokenId],
        bos: TokenId,
        eos: TokenId,
        pad: TokenId,
        attend_mask: Option<&[bool]>,
    ) -> Result<Vec<DecoderStepOutput<T>>> {
        if target.len() < 2 || target[0] != bos || target[target.len() - 1] != eos {
            return Err(Error::Config("target must be BOS ... EOS".into()));
        }
        self.check_ids(target, self.config.max_target_len)?;
        let enc = self.encode(source, pad)?;
        let mut g = Graph::new();
        let memory = g.constant_shared(Arc::clone(&enc.memory));
        let cross = attend_mask.map_or(CrossMask::Full, CrossMask::Shared);
        let input = &target[..target.len() - 1];
        let vars = self.decode_graph(&mut g, memory, &enc.source_mask, input, cross)?;
        let rows: Vec<usize> = (0..input.len()).collect();
        Ok(self.step_outputs(&mut g, &vars, &rows))
    }

    /// Gradients of the scalar built by `loss` over the trainable groups.
    pub fn loss_gradients<F>(&self, loss: F) -> Result<(T, ParamGrads<T>)>
    where
        F: FnOnce(&Self, &mut Graph<T>) -> Result<Var>,
    {
        let mut g = Graph::new();
        let l = loss(self, &mut g)?;
        let value = g.scalar(l);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {value}")));
        }
        Ok((value, g.backward(l)))
    }

    /// Summed token cross-entropy of `target[1..]` given `source` (teacher forcing).
    pub fn xent_graph(&self, g: &mut Graph<T>, source: &[TokenId], target: &[TokenId], pad: TokenId) -> Result<Var> {
        let memory = self.encode_graph(g, source, pad)?;
        let mask: Vec<bool> = source.iter().map(|&t| t != pad).collect();
        let input = &target[..target.len() - 1];
        let vars = self.decode_graph(g, memory, &mask, input, CrossMask::Full)?;
        let logp = g.log_softmax(vars.logits);
        let gold: Vec<usize> = target[1..].iter().map(|&t| t as usize).collect();
        let picked = g.pick_cols(logp, &gold);
        let total = g.sum(picked);
        Ok(g.scale(total, -T::one()))
    }
}

fn cross_mask_matrix(source_mask: &[bool], rows: usize, cross: CrossMask<'_>) -> Result<Array2<bool>> {
    let src = source_mask.len();
    let check = |m: &[bool]| -> Result<()> {
        if m.len() != src {
            return Err(Error::Shape(format!("attend mask of length {} for source length {src}", m.len())));
        }
        if !m.iter().zip(source_mask).any(|(&a, &b)| a && b) {
            return Err(Error::Partition("attend mask selects no source position".into()));
        }
        Ok(())
    };
    match cross {
        CrossMask::Full => Ok(Array2::from_shape_fn((rows, src), |(_, j)| source_mask[j])),
        CrossMask::Shared(m) => {
            check(m)?;
            Ok(Array2::from_shape_fn((rows, src), |(_, j)| source_mask[j] && m[j]))
        }
        CrossMask::PerRow(ms) => {
            if ms.len() != rows {
                return Err(Error::Shape(format!("{} row masks for {rows} decoder rows", ms.len())));
            }
            ms.iter().try_for_each(|m| check(m))?;
            Ok(Array2::from_shape_fn((rows, src), |(i, j)| source_mask[j] && ms[i][j]))
        }
    }
}

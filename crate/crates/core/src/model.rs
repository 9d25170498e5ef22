//! Pre-norm Transformer encoder-decoder over feature frames with
//! pluggable length count-down conditioning at the decoder input.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use lenctl_tensor::{Container, ContainerWriter, Graph, NodeId, ParamId, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthConditioning {
    None,
    LearnedEmbedding,
    SinusoidalCountdown,
}

impl LengthConditioning {
    pub fn is_conditioned(self) -> bool {
        self != Self::None
    }
}

impl fmt::Display for LengthConditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::LearnedEmbedding => "learned",
            Self::SinusoidalCountdown => "sinusoidal",
        })
    }
}

impl FromStr for LengthConditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "learned" | "learned_embedding" => Ok(Self::LearnedEmbedding),
            "sinusoidal" | "sinusoidal_countdown" => Ok(Self::SinusoidalCountdown),
            _ => Err(Error::Config(format!(
                "unknown conditioning `{s}` (expected none, learned or sinusoidal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest decoder input (start symbol plus content) accepted.
    pub max_len: usize,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
    pub conditioning: LengthConditioning,
    /// Largest remaining length with its own learned embedding row.
    pub max_trained_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            model_dim: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            vocab_size: 64,
            max_len: 256,
            dropout_rate: 0.1,
            label_smoothing: 0.1,
            conditioning: LengthConditioning::None,
            max_trained_length: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model config: {m}")));
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return bad(format!("model_dim {} must be positive and even", self.model_dim));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.num_heads));
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 || self.vocab_size <= EOS_ID as usize || self.max_len < 2 {
            return bad("feature_dim, ffn_dim, vocab_size and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("dropout_rate and label_smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting; returns `Ok(false)` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn p<T: FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
        }
        match key {
            "model_dim" => self.model_dim = p(key, value)?,
            "num_heads" => self.num_heads = p(key, value)?,
            "encoder_layers" => self.encoder_layers = p(key, value)?,
            "decoder_layers" => self.decoder_layers = p(key, value)?,
            "ffn_dim" => self.ffn_dim = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "dropout_rate" => self.dropout_rate = p(key, value)?,
            "conditioning" => self.conditioning = value.parse().map_err(|e: Error| e.to_string())?,
            "max_trained_length" => self.max_trained_length = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Sinusoidal encoding of position `i`: even dims `sin(i / 10000^(d/D))`,
/// odd dims `cos(i / 10000^((d-1)/D))`.
pub fn positional_encoding(i: usize, dim: usize) -> Vec<f64> {
    let x = i as f64;
    (0..dim)
        .map(|d| {
            let even = d - d % 2;
            let angle = x / 10000f64.powf(even as f64 / dim as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Backward length encoding at step `i` of a budget-`t` decode: the
/// positional encoding of the remaining allowance, clamped at zero.
pub fn length_encoding(t: usize, i: usize, dim: usize) -> Vec<f64> {
    positional_encoding(t.saturating_sub(i), dim)
}

fn encoding_matrix<T: Scalar>(positions: impl Iterator<Item = usize>, dim: usize) -> Tensor<T> {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in positions {
        data.extend(positional_encoding(p, dim).into_iter().map(T::lit));
        rows += 1;
    }
    Tensor::new(vec![rows, dim], data).expect("non-empty encoding matrix")
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LnIds,
    wqkv: ParamId,
    wo: ParamId,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LnIds,
    self_wqkv: ParamId,
    self_wo: ParamId,
    ln2: LnIds,
    cross_wq: ParamId,
    cross_wkv: ParamId,
    cross_wo: ParamId,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct LengthIds {
    table: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Parameter IDs; valid for any precision cast of the owning store.
#[derive(Debug, Clone)]
struct Layout {
    in_w: ParamId,
    in_b: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: LnIds,
    tok_emb: ParamId,
    length: Option<LengthIds>,
    decoder: Vec<DecoderLayer>,
    dec_ln: LnIds,
    out_w: ParamId,
    out_b: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), true)
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![n]), true)
    }

    fn ln(&mut self, name: &str, d: usize) -> LnIds {
        LnIds {
            gain: self.store.add(format!("{name}.gain"), Tensor::full(vec![d], 1.0), true),
            bias: self.zeros(format!("{name}.bias"), d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FfnIds {
        FfnIds {
            w1: self.weight(format!("{name}.w1"), d, f),
            b1: self.zeros(format!("{name}.b1"), f),
            w2: self.weight(format!("{name}.w2"), f, d),
            b2: self.zeros(format!("{name}.b2"), d),
        }
    }
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore<f32>, seed: u64) -> Layout {
    let d = cfg.model_dim;
    let mut init = Init {
        store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let in_w = init.weight("enc.in.w".into(), cfg.feature_dim, d);
    let in_b = init.zeros("enc.in.b".into(), d);
    let encoder = (0..cfg.encoder_layers)
        .map(|l| EncoderLayer {
            ln1: init.ln(&format!("enc.{l}.ln1"), d),
            wqkv: init.weight(format!("enc.{l}.attn.wqkv"), d, 3 * d),
            wo: init.weight(format!("enc.{l}.attn.wo"), d, d),
            ln2: init.ln(&format!("enc.{l}.ln2"), d),
            ffn: init.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn_dim),
        })
        .collect();
    let enc_ln = init.ln("enc.ln", d);
    let tok_emb = init.uniform("dec.tok_emb".into(), &[cfg.vocab_size, d], 1.0);
    let length = (cfg.conditioning == LengthConditioning::LearnedEmbedding).then(|| LengthIds {
        table: init.uniform("dec.len_emb".into(), &[cfg.max_trained_length + 1, d], 1.0),
        proj_w: init.weight("dec.len_proj.w".into(), 2 * d, d),
        proj_b: init.zeros("dec.len_proj.b".into(), d),
    });
    let decoder = (0..cfg.decoder_layers)
        .map(|l| DecoderLayer {
            ln1: init.ln(&format!("dec.{l}.ln1"), d),
            self_wqkv: init.weight(format!("dec.{l}.self.wqkv"), d, 3 * d),
            self_wo: init.weight(format!("dec.{l}.self.wo"), d, d),
            ln2: init.ln(&format!("dec.{l}.ln2"), d),
            cross_wq: init.weight(format!("dec.{l}.cross.wq"), d, d),
            cross_wkv: init.weight(format!("dec.{l}.cross.wkv"), d, 2 * d),
            cross_wo: init.weight(format!("dec.{l}.cross.wo"), d, d),
            ln3: init.ln(&format!("dec.{l}.ln3"), d),
            ffn: init.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn_dim),
        })
        .collect();
    let dec_ln = init.ln("dec.ln", d);
    let out_w = init.weight("dec.out.w".into(), d, cfg.vocab_size);
    let out_b = init.zeros("dec.out.b".into(), cfg.vocab_size);
    Layout {
        in_w,
        in_b,
        encoder,
        enc_ln,
        tok_emb,
        length,
        decoder,
        dec_ln,
        out_w,
        out_b,
    }
}

/// One teacher-forced training pair.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureSequence,
    /// Start symbol followed by the target content tokens.
    pub inputs: Vec<u32>,
    /// Target content tokens followed by EOS.
    pub targets: Vec<u32>,
    /// Remaining allowance fed at each decoder position: `t, t-1, ..., 0`.
    pub remaining: Vec<usize>,
}

impl Example {
    /// `content` excludes BOS/EOS/tags; `start` is BOS or a target tag.
    pub fn new(features: FeatureSequence, content: &[u32], start: u32) -> Self {
        let t = content.len();
        let mut inputs = Vec::with_capacity(t + 1);
        inputs.push(start);
        inputs.extend_from_slice(content);
        let mut targets = content.to_vec();
        targets.push(EOS_ID);
        Self {
            features,
            inputs,
            targets,
            remaining: (0..=t).map(|j| t - j).collect(),
        }
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }
}

/// Trainable parameters plus the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    pub params: ParamStore<f32>,
    layout: Layout,
}

pub const CHECKPOINT_KIND: &str = "lenctl-model";
const PARAM_PREFIX: &str = "param/";

fn features_tensor<T: Scalar>(f: &FeatureSequence) -> Tensor<T> {
    Tensor::new(
        vec![f.frames(), f.dim()],
        f.data().iter().map(|&v| T::lit(v as f64)).collect(),
    )
    .expect("validated feature sequence")
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
    let (w, b) = (g.param(w)?, g.param(b)?);
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, ln: &LnIds) -> Result<NodeId> {
    let (gain, bias) = (g.param(ln.gain)?, g.param(ln.bias)?);
    Ok(g.layer_norm(x, gain, bias)?)
}

fn drop<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    match rng {
        Some(r) if rate > 0.0 => Ok(g.dropout(x, rate, &mut **r)?),
        _ => Ok(x),
    }
}

fn ffn<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, p: &FfnIds) -> Result<NodeId> {
    let h = linear(g, x, p.w1, p.b1)?;
    let h = g.relu(h);
    linear(g, h, p.w2, p.b2)
}

/// Multi-head scaled dot-product attention over pre-projected q, k, v.
fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    causal: bool,
) -> Result<NodeId> {
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let s = g.matmul_t(qh, kh, true)?;
        let s = g.scale(s, scale);
        let p = g.softmax(s, causal)?;
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Ok(g.concat_cols(&outs)?)
    }
}

fn self_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    wqkv: ParamId,
    wo: ParamId,
    heads: usize,
    causal: bool,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    let w = g.param(wqkv)?;
    let qkv = g.matmul(x, w)?;
    let q = g.slice_cols(qkv, 0, d)?;
    let k = g.slice_cols(qkv, d, d)?;
    let v = g.slice_cols(qkv, 2 * d, d)?;
    let a = attention(g, q, k, v, heads, causal)?;
    let wo = g.param(wo)?;
    Ok(g.matmul(a, wo)?)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, seed);
        Ok(Self {
            config,
            seed,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn conditioning(&self) -> LengthConditioning {
        self.config.conditioning
    }

    /// Encoder memory `[frames, D]` as a graph node.
    pub fn encoder_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        features: &FeatureSequence,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        if features.dim() != cfg.feature_dim {
            return Err(Error::Model(format!(
                "feature dim {} does not match model feature_dim {}",
                features.dim(),
                cfg.feature_dim
            )));
        }
        let lay = &self.layout;
        let x = g.constant(features_tensor(features));
        let x = linear(g, x, lay.in_w, lay.in_b)?;
        let pe = g.constant(encoding_matrix(0..features.frames(), cfg.model_dim));
        let mut x = g.add(x, pe)?;
        x = drop(g, x, cfg.dropout_rate, &mut rng)?;
        for l in &lay.encoder {
            let h = layer_norm(g, x, &l.ln1)?;
            let a = self_attention(g, h, l.wqkv, l.wo, cfg.num_heads, false)?;
            let a = drop(g, a, cfg.dropout_rate, &mut rng)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, x, &l.ln2)?;
            let f = ffn(g, h, &l.ffn)?;
            let f = drop(g, f, cfg.dropout_rate, &mut rng)?;
            x = g.add(x, f)?;
        }
        layer_norm(g, x, &lay.enc_ln)
    }

    /// Decoder input rows: token embedding plus position, with the
    /// remaining allowance injected according to the conditioning mode.
    pub fn decoder_input_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[u32],
        remaining: &[usize],
    ) -> Result<NodeId> {
        let cfg = &self.config;
        if inputs.is_empty() {
            return Err(Error::Model("empty decoder prefix".into()));
        }
        if inputs.len() > cfg.max_len {
            return Err(Error::Model(format!(
                "decoder prefix of {} exceeds max_len {}",
                inputs.len(),
                cfg.max_len
            )));
        }
        if cfg.conditioning.is_conditioned() && remaining.len() != inputs.len() {
            return Err(Error::Model(format!(
                "{} remaining values for {} decoder positions",
                remaining.len(),
                inputs.len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Model(format!("token id {bad} outside vocabulary {}", cfg.vocab_size)));
        }
        let d = cfg.model_dim;
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let emb = g.param(self.layout.tok_emb)?;
        let mut x = g.gather(emb, &ids)?;
        match cfg.conditioning {
            LengthConditioning::None => {}
            LengthConditioning::LearnedEmbedding => {
                let p = self.layout.length.as_ref().expect("learned length params");
                let rows: Vec<usize> = remaining.iter().map(|&r| r.min(cfg.max_trained_length)).collect();
                let table = g.param(p.table)?;
                let le = g.gather(table, &rows)?;
                let cat = g.concat_cols(&[x, le])?;
                let h = linear(g, cat, p.proj_w, p.proj_b)?;
                x = g.relu(h);
            }
            LengthConditioning::SinusoidalCountdown => {
                let le = g.constant(encoding_matrix(remaining.iter().copied(), d));
                x = g.add(x, le)?;
            }
        }
        let pe = g.constant(encoding_matrix(0..inputs.len(), d));
        Ok(g.add(x, pe)?)
    }

    /// Logits `[positions, vocab]`, or only the last row when `last_only`.
    pub fn decoder_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        memory: NodeId,
        inputs: &[u32],
        remaining: &[usize],
        last_only: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let lay = &self.layout;
        let d = cfg.model_dim;
        let mut x = self.decoder_input_graph(g, inputs, remaining)?;
        x = drop(g, x, cfg.dropout_rate, &mut rng)?;
        for l in &lay.decoder {
            let h = layer_norm(g, x, &l.ln1)?;
            let a = self_attention(g, h, l.self_wqkv, l.self_wo, cfg.num_heads, true)?;
            let a = drop(g, a, cfg.dropout_rate, &mut rng)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, x, &l.ln2)?;
            let wq = g.param(l.cross_wq)?;
            let q = g.matmul(h, wq)?;
            let wkv = g.param(l.cross_wkv)?;
            let kv = g.matmul(memory, wkv)?;
            let k = g.slice_cols(kv, 0, d)?;
            let v = g.slice_cols(kv, d, d)?;
            let a = attention(g, q, k, v, cfg.num_heads, false)?;
            let wo = g.param(l.cross_wo)?;
            let a = g.matmul(a, wo)?;
            let a = drop(g, a, cfg.dropout_rate, &mut rng)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, x, &l.ln3)?;
            let f = ffn(g, h, &l.ffn)?;
            let f = drop(g, f, cfg.dropout_rate, &mut rng)?;
            x = g.add(x, f)?;
        }
        if last_only {
            x = g.gather(x, &[inputs.len() - 1])?;
        }
        let x = layer_norm(g, x, &lay.dec_ln)?;
        linear(g, x, lay.out_w, lay.out_b)
    }

    /// Label-smoothed teacher-forced loss for one example, scaled by
    /// `scale`. Dropout is active iff `rng` is given.
    pub fn loss_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ex: &Example,
        scale: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.loss_graph_smoothed(g, ex, self.config.label_smoothing, scale, rng)
    }

    /// As [`Model::loss_graph`] with an explicit label-smoothing rate.
    pub fn loss_graph_smoothed<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ex: &Example,
        smoothing: f64,
        scale: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let memory = self.encoder_graph(g, &ex.features, rng.as_deref_mut())?;
        let logits = self.decoder_graph(g, memory, &ex.inputs, &ex.remaining, false, rng)?;
        let targets: Vec<Option<usize>> = ex.targets.iter().map(|&t| Some(t as usize)).collect();
        Ok(g.cross_entropy(logits, &targets, smoothing, scale)?)
    }

    /// Eval-mode encoder output `[frames, D]`.
    pub fn encode_features(&self, features: &FeatureSequence) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.params);
        let m = self.encoder_graph(&mut g, features, None)?;
        Ok(g.value(m).clone())
    }

    /// Next-token logits after `prefix` (start symbol first) at step
    /// `i = prefix.len() - 1` of a budget-`t` decode.
    pub fn decode_step(&self, memory: &Tensor<f32>, prefix: &[u32], t: usize) -> Result<Vec<f32>> {
        let remaining: Vec<usize> = (0..prefix.len()).map(|j| t.saturating_sub(j)).collect();
        let mut g = Graph::new(&self.params);
        let m = g.constant(memory.clone());
        let logits = self.decoder_graph(&mut g, m, prefix, &remaining, true, None)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Eq. 1 fusion for a single row, exposed for inspection.
    pub fn length_embedding_input(&self, prev: &[f32], remaining: usize) -> Result<Vec<f32>> {
        let p = self
            .layout
            .length
            .as_ref()
            .ok_or_else(|| Error::Model("model has no learned length embedding".into()))?;
        let d = self.config.model_dim;
        if prev.len() != d {
            return Err(Error::Model(format!("previous-state vector has {} entries, expected {d}", prev.len())));
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(Tensor::new(vec![1, d], prev.to_vec())?);
        let table = g.param(p.table)?;
        let le = g.gather(table, &[remaining.min(self.config.max_trained_length)])?;
        let cat = g.concat_cols(&[x, le])?;
        let h = linear(&mut g, cat, p.proj_w, p.proj_b)?;
        let y = g.relu(h);
        Ok(g.value(y).data().to_vec())
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        Ok(self.params.id(name)?)
    }

    pub fn start_symbol(&self) -> u32 {
        BOS_ID
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "seed": self.seed,
        })
    }

    pub fn writer(&self, extra: serde_json::Value) -> ContainerWriter {
        let mut meta = self.metadata();
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut w = ContainerWriter::new(meta);
        w.add_store(PARAM_PREFIX, &self.params);
        w
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.writer(serde_json::Value::Null).write(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.metadata();
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Model("container is not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let seed = meta["seed"]
            .as_u64()
            .ok_or_else(|| Error::Model("checkpoint lacks a seed".into()))?;
        let mut model = Self::new(config, seed)?;
        c.load_into(PARAM_PREFIX, &mut model.params)?;
        if !model.params.all_finite() {
            return Err(Error::Model("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cond: LengthConditioning) -> Model {
        Model::new(
            ModelConfig {
                model_dim: 16,
                num_heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ffn_dim: 24,
                vocab_size: 12,
                max_len: 16,
                dropout_rate: 0.0,
                conditioning: cond,
                max_trained_length: 6,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn feats(frames: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(frames, 8, (0..frames * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pe_at_zero() {
        let pe = positional_encoding(0, 8);
        for (d, v) in pe.iter().enumerate() {
            assert_eq!(*v, if d % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn length_encoding_identities() {
        assert_eq!(length_encoding(5, 5, 16), positional_encoding(0, 16));
        assert_eq!(length_encoding(7, 3, 16), positional_encoding(4, 16));
        assert_eq!(length_encoding(3, 9, 16), positional_encoding(0, 16));
        assert!(length_encoding(10000, 0, 64).iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn config_validation() {
        for bad in [
            ModelConfig { model_dim: 15, num_heads: 1, ..ModelConfig::default() },
            ModelConfig { num_heads: 3, ..ModelConfig::default() },
            ModelConfig { dropout_rate: 1.0, ..ModelConfig::default() },
        ] {
            assert!(Model::new(bad, 0).is_err());
        }
        assert_eq!("learned".parse::<LengthConditioning>().unwrap(), LengthConditioning::LearnedEmbedding);
        assert!("x".parse::<LengthConditioning>().is_err());
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let m = tiny(LengthConditioning::None);
        assert_eq!(m.encode_features(&feats(1, 0)).unwrap().shape(), &[1, 16]);
        assert_eq!(m.encode_features(&feats(7, 0)).unwrap().shape(), &[7, 16]);
        let wrong = FeatureSequence::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(m.encode_features(&wrong).is_err());
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let m = tiny(LengthConditioning::None);
        let f = feats(4, 1);
        let mut swapped = f.data().to_vec();
        for c in 0..8 {
            swapped.swap(c, 8 + c);
        }
        let g = FeatureSequence::new(4, 8, swapped).unwrap();
        let (a, b) = (m.encode_features(&f).unwrap(), m.encode_features(&g).unwrap());
        // rows 0 and 1 trade inputs but keep their positions
        assert_ne!(a.row(0), b.row(1));
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn none_mode_ignores_budget() {
        let m = tiny(LengthConditioning::None);
        let mem = m.encode_features(&feats(5, 2)).unwrap();
        let a = m.decode_step(&mem, &[BOS_ID, 5, 6], 5).unwrap();
        let b = m.decode_step(&mem, &[BOS_ID, 5, 6], 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioned_modes_see_budget() {
        for cond in [LengthConditioning::LearnedEmbedding, LengthConditioning::SinusoidalCountdown] {
            let m = tiny(cond);
            let mem = m.encode_features(&feats(5, 2)).unwrap();
            let a = m.decode_step(&mem, &[BOS_ID, 5, 6], 3).unwrap();
            let b = m.decode_step(&mem, &[BOS_ID, 5, 6], 4).unwrap();
            assert_ne!(a, b, "{cond}");
        }
    }

    #[test]
    fn learned_embedding_clamps() {
        let m = tiny(LengthConditioning::LearnedEmbedding);
        let prev: Vec<f32> = (0..16).map(|i| i as f32 / 8.0 - 1.0).collect();
        let a = m.length_embedding_input(&prev, 6).unwrap();
        let b = m.length_embedding_input(&prev, 600).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(tiny(LengthConditioning::None).length_embedding_input(&prev, 1).is_err());
    }

    #[test]
    fn prefix_longer_than_max_len_rejected() {
        let m = tiny(LengthConditioning::None);
        let mem = m.encode_features(&feats(3, 2)).unwrap();
        assert!(m.decode_step(&mem, &vec![4; 17], 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(LengthConditioning::LearnedEmbedding);
        let bytes = m.writer(serde_json::json!({"note": 1})).to_bytes().unwrap();
        let back = Model::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.seed(), m.seed());
        for (id, e) in m.params.iter() {
            assert_eq!(back.params.get(id), &e.tensor);
        }
    }

    #[test]
    fn example_countdown() {
        let ex = Example::new(feats(2, 0), &[7, 8, 9], BOS_ID);
        assert_eq!(ex.inputs, vec![BOS_ID, 7, 8, 9]);
        assert_eq!(ex.targets, vec![7, 8, 9, EOS_ID]);
        assert_eq!(ex.remaining, vec![3, 2, 1, 0]);
    }
}

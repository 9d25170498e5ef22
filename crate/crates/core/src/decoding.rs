//! Budgeted autoregressive decoding with a length count-down.

use std::cmp::Ordering;

use lenctl_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::{MergeTable, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Allowed number of content tokens; EOS is free.
    pub budget: usize,
    pub beam_size: usize,
    /// Safety cap on content tokens when nothing else stops decoding.
    pub max_len: usize,
    /// Halt and append EOS once `budget` content tokens are emitted.
    pub forced_stop: bool,
    /// Beam scores divide by `len^alpha` when nonzero.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            budget: 0,
            beam_size: 1,
            max_len: 200,
            forced_stop: false,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Config("length_penalty must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Budget,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Content tokens, without start symbol or EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    pub stop: StopReason,
    /// Remaining allowance fed at each decoder step.
    pub countdown: Vec<usize>,
}

/// Next-token distribution given a content prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary after `prefix` (content
    /// tokens so far) under budget `t`. Banned tokens are `-inf`.
    fn log_probs(&self, prefix: &[u32], t: usize) -> Result<Vec<f64>>;
}

pub fn log_softmax(logits: &[f32], banned: &[u32]) -> Vec<f64> {
    let mut z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    for &b in banned {
        if let Some(v) = z.get_mut(b as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v - lse).collect()
}

/// A trained model bound to one utterance's encoder memory.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: Tensor<f32>,
    start: u32,
    banned: Vec<u32>,
}

impl<'m> ModelScorer<'m> {
    /// `banned` lists IDs never emitted (start symbols, padding, tags).
    pub fn new(model: &'m Model, features: &FeatureSequence, start: u32, banned: Vec<u32>) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.encode_features(features)?,
            start,
            banned,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&self, prefix: &[u32], t: usize) -> Result<Vec<f64>> {
        let mut full = Vec::with_capacity(prefix.len() + 1);
        full.push(self.start);
        full.extend_from_slice(prefix);
        let logits = self.model.decode_step(&self.memory, &full, t)?;
        Ok(log_softmax(&logits, &self.banned))
    }
}

/// IDs a decoder must never emit for a given tokenizer.
pub fn banned_ids(table: &MergeTable) -> Vec<u32> {
    let mut v = vec![BOS_ID, PAD_ID];
    v.extend(table.tag_ids());
    v
}

fn argmax(lp: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best as u32
}

fn budget_reached(cfg: &DecodeConfig, n: usize) -> Option<StopReason> {
    if cfg.forced_stop && n >= cfg.budget {
        Some(StopReason::Budget)
    } else if n >= cfg.max_len {
        Some(StopReason::MaxLen)
    } else {
        None
    }
}

pub fn decode_greedy<S: StepScorer>(s: &S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        stop: StopReason::MaxLen,
        countdown: Vec::new(),
    };
    loop {
        if let Some(stop) = budget_reached(cfg, h.tokens.len()) {
            h.finished = stop == StopReason::Budget;
            h.stop = stop;
            return Ok(h);
        }
        h.countdown.push(cfg.budget.saturating_sub(h.tokens.len()));
        let lp = s.log_probs(&h.tokens, cfg.budget)?;
        let tok = argmax(&lp);
        h.log_prob += lp[tok as usize];
        if tok == EOS_ID {
            h.finished = true;
            h.stop = StopReason::Eos;
            return Ok(h);
        }
        h.tokens.push(tok);
    }
}

fn score(h: &Hypothesis, alpha: f64) -> f64 {
    if alpha == 0.0 {
        h.log_prob
    } else {
        h.log_prob / ((h.tokens.len() + 1) as f64).powf(alpha)
    }
}

/// Best first: higher score, then shorter, then smaller token IDs.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    score(b, alpha)
        .total_cmp(&score(a, alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn decode_beam<S: StepScorer>(s: &S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        stop: StopReason::MaxLen,
        countdown: Vec::new(),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let mut cands: Vec<Hypothesis> = Vec::new();
        for h in alive.drain(..) {
            if let Some(stop) = budget_reached(cfg, h.tokens.len()) {
                done.push(Hypothesis {
                    finished: stop == StopReason::Budget,
                    stop,
                    ..h
                });
                continue;
            }
            let lp = s.log_probs(&h.tokens, cfg.budget)?;
            let mut countdown = h.countdown.clone();
            countdown.push(cfg.budget.saturating_sub(h.tokens.len()));
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let tok = tok as u32;
                let mut tokens = h.tokens.clone();
                let finished = tok == EOS_ID;
                if !finished {
                    tokens.push(tok);
                }
                cands.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished,
                    stop: if finished { StopReason::Eos } else { StopReason::MaxLen },
                    countdown: countdown.clone(),
                });
            }
        }
        // EOS before other tokens of equal score, then token order
        cands.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then(b.finished.cmp(&a.finished))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        for c in cands.into_iter().take(k) {
            if c.finished {
                done.push(c);
            } else {
                alive.push(c);
            }
        }
        if cfg.length_penalty == 0.0 {
            // log-probs only fall, so no live beam can overtake the best finished one
            if let Some(best) = done.iter().map(|h| h.log_prob).reduce(f64::max) {
                alive.retain(|h| h.log_prob >= best);
            }
        }
        if done.len() >= k {
            break;
        }
    }
    let pool = if done.is_empty() { &mut alive } else { &mut done };
    pool.sort_by(|a, b| rank(a, b, cfg.length_penalty));
    Ok(pool.swap_remove(0))
}

pub fn decode<S: StepScorer>(s: &S, cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.beam_size == 1 {
        decode_greedy(s, cfg)
    } else {
        decode_beam(s, cfg)
    }
}

/// Desired output length: the reference length, or the smaller of the
/// reference and a baseline output length.
pub fn choose_budget(reference_len: usize, baseline_len: Option<usize>) -> usize {
    baseline_len.map_or(reference_len, |b| b.min(reference_len))
}

/// One line of a hypothesis file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub text: String,
    pub token_count: usize,
    pub log_prob: f64,
    pub budget: usize,
}

pub fn hypotheses_to_string(records: &[HypothesisRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn hypotheses_from_str(text: &str) -> Result<Vec<HypothesisRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("hypothesis line {}: {e}", i + 1)))
        })
        .collect()
}

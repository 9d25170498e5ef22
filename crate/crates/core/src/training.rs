//! Teacher-forced training: base transcription, adaptation at a reduced
//! learning rate, and multilingual training over tagged pairs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lenctl_tensor::{Container, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TaggedPair, TokenRenderer, Utterance};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::tokenizer::{MergeTable, BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Adapt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub phase: Phase,
    pub base_lr: f64,
    /// Multiplies `base_lr` in the adapt phase.
    pub adapt_lr_factor: f64,
    pub warmup_steps: usize,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Held-out accuracy is measured every this many steps (0: never).
    pub eval_every: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            phase: Phase::Base,
            base_lr: 3e-4,
            adapt_lr_factor: 0.1,
            warmup_steps: 400,
            batch_size: 16,
            max_steps: 2000,
            seed: 1,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            clip_norm: 1.0,
            eval_every: 0,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training schedule: {m}")));
        if !(0.0..1.0).contains(&self.adapt_lr_factor) {
            return bad("adapt_lr_factor must lie in [0, 1)");
        }
        if !(self.base_lr >= 0.0) || self.batch_size == 0 {
            return bad("base_lr must be >= 0 and batch_size >= 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0");
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        match self.phase {
            Phase::Base => self.base_lr,
            Phase::Adapt => self.base_lr * self.adapt_lr_factor,
        }
    }

    /// Linear warmup to the peak, then inverse-square-root decay.
    /// `step` counts from 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        let factor = if self.warmup_steps == 0 {
            1.0
        } else if s <= w {
            s / w
        } else {
            (w / s).sqrt()
        };
        self.peak_lr() * factor
    }

    pub fn to_kv(&self) -> String {
        let phase = match self.phase {
            Phase::Base => "base",
            Phase::Adapt => "adapt",
        };
        let mut s = String::new();
        let _ = writeln!(s, "phase = {phase}");
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "adapt_lr_factor = {}", self.adapt_lr_factor);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
        }
        match key {
            "phase" => {
                self.phase = match value {
                    "base" => Phase::Base,
                    "adapt" => Phase::Adapt,
                    _ => return Err(format!("bad phase `{value}`")),
                }
            }
            "base_lr" => self.base_lr = p(key, value)?,
            "adapt_lr_factor" => self.adapt_lr_factor = p(key, value)?,
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "label_smoothing" => self.label_smoothing = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "epsilon" => self.epsilon = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("schedule line {}: expected key = value", n + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("schedule line {}: {e}", n + 1)))?;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean per-token label-smoothed loss of the batch.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Line-delimited step and eval records.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&serde_json::to_string(&serde_json::json!({"kind": "step", "step": r.step, "loss": r.loss, "lr": r.lr}))?);
            s.push('\n');
        }
        for r in &self.evals {
            s.push_str(&serde_json::to_string(&serde_json::json!({
                "kind": "eval", "step": r.step, "epoch": r.epoch, "token_accuracy": r.token_accuracy
            }))?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&serde_json::json!({"kind": "summary", "wall_clock_secs": self.wall_clock_secs}))?);
        s.push('\n');
        Ok(s)
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: usize,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor<f32>> = model
            .params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn update(&mut self, model: &mut Model, grads: &[Tensor<f32>], lr: f64, s: &TrainingSchedule) {
        self.t += 1;
        let (b1, b2) = (s.beta1 as f32, s.beta2 as f32);
        let c1 = 1.0 - s.beta1.powi(self.t as i32);
        let c2 = 1.0 - s.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (s.epsilon * c2.sqrt()) as f32;
        let ids: Vec<_> = model.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !model.params.is_trainable(id) {
                continue;
            }
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = model.params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Length-bucketed batches in a per-epoch shuffled order.
fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    batches.shuffle(&mut rng);
    batches
}

/// Teacher-forced argmax accuracy over target tokens, dropout off.
pub fn token_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let mut g = Graph::new(&model.params);
        let mem = model.encoder_graph(&mut g, &ex.features, None)?;
        let logits = model.decoder_graph(&mut g, mem, &ex.inputs, &ex.remaining, false, None)?;
        let l = g.value(logits);
        for (r, &tgt) in ex.targets.iter().enumerate() {
            let row = l.row(r);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hit += usize::from(best == tgt as usize);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("token accuracy over no targets".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Model, optimizer moments and progress: everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optim: Adam,
    /// Optimizer steps completed in this phase.
    pub step: usize,
    pub log: TrainLog,
}

const STATE_KIND: &str = "lenctl-train-state";

impl TrainState {
    pub fn new(model: Model) -> Self {
        let optim = Adam::new(&model);
        Self {
            model,
            optim,
            step: 0,
            log: TrainLog::default(),
        }
    }

    /// Runs optimizer steps until `until` (capped at `max_steps`);
    /// `on_step` sees the state after every step.
    pub fn run(
        &mut self,
        corpus: &[Example],
        schedule: &TrainingSchedule,
        held_out: Option<&[Example]>,
        until: usize,
        mut on_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        schedule.validate()?;
        let until = until.min(schedule.max_steps);
        if self.step >= until {
            return Ok(());
        }
        if corpus.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let lengths: Vec<usize> = corpus.iter().map(|e| e.features.frames()).collect();
        let per_epoch = corpus.len().div_ceil(schedule.batch_size);
        let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
        let start = Instant::now();
        while self.step < until {
            let epoch = self.step / per_epoch;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_batches(&lengths, schedule.batch_size, schedule.seed, epoch)));
            }
            let batch = &cached.as_ref().expect("batches").1[self.step % per_epoch];
            let tokens: usize = batch.iter().map(|&i| corpus[i].num_targets()).sum();
            let scale = 1.0 / tokens as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed_d20b);
            rng.set_stream(self.step as u64);
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut loss = 0.0;
            for &i in batch {
                let mut g = Graph::new(&self.model.params);
                let l = self
                    .model
                    .loss_graph_smoothed(&mut g, &corpus[i], schedule.label_smoothing, scale, Some(&mut rng))?;
                loss += g.value(l).item() as f64;
                let gr = g.backward(l)?.into_params();
                match &mut grads {
                    None => grads = Some(gr),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gr) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step + 1 });
            }
            let mut grads = grads.expect("non-empty batch");
            if schedule.clip_norm > 0.0 {
                let norm = grads.iter().map(|t| t.sum_sq() as f64).sum::<f64>().sqrt();
                if norm > schedule.clip_norm {
                    let c = (schedule.clip_norm / norm) as f32;
                    for t in &mut grads {
                        t.data_mut().iter_mut().for_each(|v| *v *= c);
                    }
                }
            }
            let lr = schedule.lr_at(self.step + 1);
            self.optim.update(&mut self.model, &grads, lr, schedule);
            self.step += 1;
            self.log.steps.push(StepRecord {
                step: self.step,
                loss,
                lr,
            });
            if let Some(h) = held_out {
                if schedule.eval_every > 0 && (self.step % schedule.eval_every == 0 || self.step == until) && !h.is_empty() {
                    self.log.evals.push(EvalRecord {
                        step: self.step,
                        epoch: self.step / per_epoch,
                        token_accuracy: token_accuracy(&self.model, h)?,
                    });
                }
            }
            on_step(self)?;
        }
        self.log.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "train_state": {
                "kind": STATE_KIND,
                "step": self.step,
                "adam_t": self.optim.t,
                "log": self.log,
            }
        });
        let mut w = self.model.writer(extra);
        for (k, (_, e)) in self.model.params.iter().enumerate() {
            w.add(format!("adam.m/{}", e.name), &self.optim.m[k], false);
            w.add(format!("adam.v/{}", e.name), &self.optim.v[k], false);
        }
        Ok(w.write(path)?)
    }

    /// Loads a saved state, or starts fresh moments from a plain model
    /// checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let model = Model::from_container(&c)?;
        let Some(st) = c.metadata().get("train_state") else {
            return Ok(Self::new(model));
        };
        if st.get("kind").and_then(|k| k.as_str()) != Some(STATE_KIND) {
            return Err(Error::Model("checkpoint carries an unknown train state".into()));
        }
        let mut optim = Adam::new(&model);
        for (k, (_, e)) in model.params.iter().enumerate() {
            optim.m[k] = c.tensor(&format!("adam.m/{}", e.name))?;
            optim.v[k] = c.tensor(&format!("adam.v/{}", e.name))?;
        }
        optim.t = st["adam_t"].as_u64().unwrap_or(0) as usize;
        Ok(Self {
            model,
            optim,
            step: st["step"].as_u64().unwrap_or(0) as usize,
            log: serde_json::from_value(st["log"].clone())?,
        })
    }
}

fn run_phase(
    model: Model,
    corpus: &[Example],
    schedule: &TrainingSchedule,
    held_out: Option<&[Example]>,
) -> Result<(Model, TrainLog)> {
    let mut st = TrainState::new(model);
    st.run(corpus, schedule, held_out, schedule.max_steps, |_| Ok(()))?;
    Ok((st.model, st.log))
}

/// Base training on verbatim targets.
pub fn train(
    model: Model,
    corpus: &[Example],
    schedule: &TrainingSchedule,
    held_out: Option<&[Example]>,
) -> Result<(Model, TrainLog)> {
    if schedule.phase != Phase::Base {
        return Err(Error::Config("train expects a base-phase schedule".into()));
    }
    run_phase(model, corpus, schedule, held_out)
}

/// Continued training of every parameter on compressed targets at
/// `base_lr * adapt_lr_factor`.
pub fn adapt(
    model: Model,
    corpus: &[Example],
    schedule: &TrainingSchedule,
    held_out: Option<&[Example]>,
) -> Result<(Model, TrainLog)> {
    if schedule.phase != Phase::Adapt {
        return Err(Error::Config("adapt expects an adapt-phase schedule".into()));
    }
    run_phase(model, corpus, schedule, held_out)
}

/// Training over tagged pairs; same-tag pairs are refused because the
/// same-tag direction must stay unseen.
pub fn train_multilingual(
    model: Model,
    corpus: &[(TaggedPair, Example)],
    schedule: &TrainingSchedule,
) -> Result<(Model, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Data("tagged corpus is empty".into()));
    }
    if let Some((p, _)) = corpus.iter().find(|(p, _)| p.source_tag == p.target_tag) {
        return Err(Error::Data(format!(
            "same-tag training pair {}->{} would leak the zero-shot direction",
            p.source_tag, p.target_tag
        )));
    }
    let examples: Vec<Example> = corpus.iter().map(|(_, e)| e.clone()).collect();
    run_phase(model, &examples, schedule, None)
}

fn content_ids(table: &MergeTable, text: &str) -> Vec<u32> {
    table.encode(text).into_ids().into_iter().filter(|&t| table.is_content(t)).collect()
}

/// Examples over verbatim or compressed targets, starting from BOS.
pub fn transcription_examples(utts: &[Utterance], table: &MergeTable, compressed: bool) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            let text = if compressed {
                u.compressed_text
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("{} has no compressed_text", u.id)))?
            } else {
                u.verbatim_text.as_str()
            };
            Ok(Example::new(u.features.clone(), &content_ids(table, text), BOS_ID))
        })
        .collect()
}

/// Source side: `[source tag, content.., EOS]` rendered as frames.
pub fn render_source(table: &MergeTable, renderer: &TokenRenderer, tag: &str, text: &str) -> Result<crate::data::FeatureSequence> {
    let tag_id = table
        .tag_id(tag)
        .ok_or_else(|| Error::Data(format!("tokenizer has no tag `{tag}`")))?;
    let mut ids = vec![tag_id];
    ids.extend(content_ids(table, text));
    ids.push(EOS_ID);
    renderer.render(&ids)
}

/// Tagged examples: the target tag replaces BOS as start symbol.
pub fn multilingual_examples(
    pairs: &[TaggedPair],
    table: &MergeTable,
    renderer: &TokenRenderer,
) -> Result<Vec<(TaggedPair, Example)>> {
    pairs
        .iter()
        .map(|p| {
            let src = render_source(table, renderer, &p.source_tag, &p.source_text)?;
            let start = table
                .tag_id(&p.target_tag)
                .ok_or_else(|| Error::Data(format!("tokenizer has no tag `{}`", p.target_tag)))?;
            Ok((p.clone(), Example::new(src, &content_ids(table, &p.target_text), start)))
        })
        .collect()
}

/// Distinct content-token IDs used by each of the given texts.
pub fn vocabulary_subset<S: AsRef<str>>(table: &MergeTable, texts: &[S]) -> BTreeSet<u32> {
    texts.iter().flat_map(|t| content_ids(table, t.as_ref())).collect()
}

//! Corpora: feature/text utterances, synthetic transcription and
//! compression tasks, and tagged multilingual pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Time-major frames of fixed dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Data(format!("feature sequence needs frames >= 1 and dim >= 1, got {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::Data(format!(
                "{} values for {frames} frames of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        B64.encode(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTags {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub verbatim_text: String,
    pub compressed_text: Option<String>,
    pub tags: Option<LanguageTags>,
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

impl Utterance {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.features.frames() == 0 {
            return Err(("features", "utterance has no frames".into()));
        }
        if let Some(c) = &self.compressed_text {
            let (cv, vv) = (word_count(c) as f64, word_count(&self.verbatim_text) as f64);
            if cv > vv * 1.1 {
                return Err((
                    "compressed_text",
                    format!("compressed length {cv} exceeds 1.1 x verbatim length {vv}"),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic acoustic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of word types, including fillers and paraphrase outputs.
    pub vocab_size: usize,
    pub num_fillers: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    /// Probability of a silent gap of 1..=frames_per_token noise frames
    /// after a word.
    pub pause_rate: f64,
    /// Standard deviation of frame noise.
    pub noise: f64,
    /// Probability that a position holds a filler word.
    pub filler_rate: f64,
    /// Number of bigram -> single-word rewrite rules (at most 5).
    pub paraphrase_rules: usize,
    /// Probability that a position starts a rule bigram.
    pub phrase_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub adapt: usize,
    pub dev: usize,
    pub test: usize,
    /// Seeds the word forms, rules and prototype frames.
    pub mapping_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            num_fillers: 4,
            feature_dim: 8,
            frames_per_token: 3,
            pause_rate: 0.0,
            noise: 0.3,
            filler_rate: 0.2,
            paraphrase_rules: 3,
            phrase_rate: 0.05,
            min_len: 5,
            max_len: 30,
            train: 2000,
            adapt: 1500,
            dev: 100,
            test: 200,
            mapping_seed: 17,
        }
    }
}

pub const MAX_PARAPHRASE_RULES: usize = 5;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth spec: {m}")));
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.filler_rate) {
            return bad(format!("filler_rate must be in [0, 1), got {}", self.filler_rate));
        }
        if !(0.0..1.0).contains(&self.pause_rate) {
            return bad(format!("pause_rate must be in [0, 1), got {}", self.pause_rate));
        }
        if !(0.0..1.0).contains(&self.phrase_rate) {
            return bad(format!("phrase_rate must be in [0, 1), got {}", self.phrase_rate));
        }
        if self.paraphrase_rules > MAX_PARAPHRASE_RULES {
            return bad(format!("at most {MAX_PARAPHRASE_RULES} paraphrase rules"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.feature_dim == 0 || self.frames_per_token == 0 {
            return bad("feature_dim and frames_per_token must be positive".into());
        }
        let content = self
            .vocab_size
            .checked_sub(self.num_fillers + self.paraphrase_rules)
            .unwrap_or(0);
        if content < 2.max(2 * self.paraphrase_rules) {
            return bad(format!(
                "vocab_size {} leaves too few content words after {} fillers and {} rule outputs",
                self.vocab_size, self.num_fillers, self.paraphrase_rules
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synth spec line {}: expected key = value", n + 1)))?;
            spec.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("synth spec line {}: {e}", n + 1)))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
        }
        match key {
            "vocab_size" => self.vocab_size = p(key, value)?,
            "num_fillers" => self.num_fillers = p(key, value)?,
            "feature_dim" => self.feature_dim = p(key, value)?,
            "frames_per_token" => self.frames_per_token = p(key, value)?,
            "pause_rate" => self.pause_rate = p(key, value)?,
            "noise" => self.noise = p(key, value)?,
            "filler_rate" => self.filler_rate = p(key, value)?,
            "paraphrase_rules" => self.paraphrase_rules = p(key, value)?,
            "phrase_rate" => self.phrase_rate = p(key, value)?,
            "min_len" => self.min_len = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "train" => self.train = p(key, value)?,
            "adapt" => self.adapt = p(key, value)?,
            "dev" => self.dev = p(key, value)?,
            "test" => self.test = p(key, value)?,
            "mapping_seed" => self.mapping_seed = p(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// `n` distinct two- or three-syllable words.
fn invent_words(n: usize, rng: &mut ChaCha8Rng, prefix: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.random_range(2..=3);
        let mut w = prefix.to_string();
        for _ in 0..syl {
            w.push(*CONSONANTS.choose(rng).expect("non-empty"));
            w.push(*VOWELS.choose(rng).expect("non-empty"));
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Word inventory and acoustic prototypes derived from a [`SynthSpec`].
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub words: Vec<String>,
    /// Word indices of filler words.
    pub fillers: Vec<usize>,
    /// `(left, right) -> replacement` word indices.
    pub rules: Vec<((usize, usize), usize)>,
    /// Word indices that may appear in verbatim text outside fillers.
    pub content: Vec<usize>,
    /// Per word, `frames_per_token x feature_dim` template frames.
    pub templates: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn from_spec(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.mapping_seed);
        let words = invent_words(spec.vocab_size, &mut rng, "");
        let fillers: Vec<usize> = (0..spec.num_fillers).collect();
        let outputs: Vec<usize> = (spec.num_fillers..spec.num_fillers + spec.paraphrase_rules).collect();
        let content: Vec<usize> = (spec.num_fillers + spec.paraphrase_rules..spec.vocab_size).collect();
        // rule bigrams use disjoint words so rewrites never overlap
        let mut pool = content.clone();
        for i in (1..pool.len()).rev() {
            let j = rng.random_range(0..=i);
            pool.swap(i, j);
        }
        let rules = outputs
            .iter()
            .enumerate()
            .map(|(r, &out)| ((pool[2 * r], pool[2 * r + 1]), out))
            .collect();
        let width = spec.frames_per_token * spec.feature_dim;
        let templates = (0..spec.vocab_size)
            .map(|_| (0..width).map(|_| gaussian(&mut rng) as f32).collect())
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            words,
            fillers,
            rules,
            content,
            templates,
            index,
        })
    }

    pub fn word_index(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn is_filler(&self, w: usize) -> bool {
        self.fillers.contains(&w)
    }

    /// Drops fillers, then rewrites rule bigrams left to right.
    pub fn compress(&self, words: &[usize]) -> Vec<usize> {
        let kept: Vec<usize> = words.iter().copied().filter(|&w| !self.is_filler(w)).collect();
        let mut out = Vec::with_capacity(kept.len());
        let mut i = 0;
        while i < kept.len() {
            let rule = (i + 1 < kept.len())
                .then(|| self.rules.iter().find(|((a, b), _)| *a == kept[i] && *b == kept[i + 1]))
                .flatten();
            match rule {
                Some((_, c)) => {
                    out.push(*c);
                    i += 2;
                }
                None => {
                    out.push(kept[i]);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn render_text(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.words[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Named splits of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Utterance>,
    pub adapt: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl SynthCorpus {
    pub fn splits(&self) -> [(&'static str, &[Utterance]); 4] {
        [
            ("train", &self.train),
            ("adapt", &self.adapt),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }
}

fn sample_words(lex: &Lexicon, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut words: Vec<usize> = Vec::with_capacity(len);
    while words.len() < len {
        if !lex.fillers.is_empty() && rng.random::<f64>() < spec.filler_rate {
            words.push(*lex.fillers.choose(rng).expect("fillers"));
            continue;
        }
        if !lex.rules.is_empty() && words.len() + 1 < len && rng.random::<f64>() < spec.phrase_rate {
            let ((a, b), _) = *lex.rules.choose(rng).expect("rules");
            words.push(a);
            words.push(b);
            continue;
        }
        let prev = words.last().copied();
        let w = loop {
            let w = *lex.content.choose(rng).expect("content words");
            if Some(w) != prev {
                break w;
            }
        };
        words.push(w);
    }
    if words.iter().all(|&w| lex.is_filler(w)) {
        words[0] = *lex.content.choose(rng).expect("content words");
    }
    words
}

fn render_frames(lex: &Lexicon, spec: &SynthSpec, words: &[usize], rng: &mut ChaCha8Rng) -> FeatureSequence {
    let (k, dim) = (spec.frames_per_token, spec.feature_dim);
    let mut data = Vec::with_capacity(words.len() * k * dim);
    for &w in words {
        for &v in &lex.templates[w] {
            data.push(v + (spec.noise * gaussian(rng)) as f32);
        }
        if spec.pause_rate > 0.0 && rng.random::<f64>() < spec.pause_rate {
            let n = rng.random_range(1..=k);
            data.extend((0..n * dim).map(|_| (spec.noise * gaussian(rng)) as f32));
        }
    }
    let frames = data.len() / dim;
    FeatureSequence::new(frames, dim, data).expect("consistent shape")
}

fn synth_split(lex: &Lexicon, spec: &SynthSpec, name: &str, count: usize, seed: u64, stream: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|i| {
            let words = sample_words(lex, spec, &mut rng);
            let features = render_frames(lex, spec, &words, &mut rng);
            Utterance {
                id: format!("{name}-{i:06}"),
                features,
                verbatim_text: lex.render_text(&words),
                compressed_text: None,
                tags: None,
            }
        })
        .collect()
}

/// Samples verbatim utterances (5-30 words by default) and renders each
/// word as `frames_per_token` noisy prototype frames.
pub fn synth_transcription(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    let lex = Lexicon::from_spec(spec)?;
    Ok(SynthCorpus {
        train: synth_split(&lex, spec, "train", spec.train, seed, 1),
        adapt: synth_split(&lex, spec, "adapt", spec.adapt, seed, 2),
        dev: synth_split(&lex, spec, "dev", spec.dev, seed, 3),
        test: synth_split(&lex, spec, "test", spec.test, seed, 4),
    })
}

/// Fills `compressed_text`: verbatim minus fillers, with rule bigrams
/// rewritten to their single-word paraphrase.
pub fn synth_compression(corpus: &[Utterance], spec: &SynthSpec) -> Result<Vec<Utterance>> {
    let lex = Lexicon::from_spec(spec)?;
    corpus
        .iter()
        .map(|u| {
            let words = u
                .verbatim_text
                .split_whitespace()
                .map(|w| {
                    lex.word_index(w)
                        .ok_or_else(|| Error::Data(format!("{}: word `{w}` not in the synthetic lexicon", u.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = u.clone();
            out.compressed_text = Some(lex.render_text(&lex.compress(&words)));
            Ok(out)
        })
        .collect()
}

/// One training or test pair for the multilingual text model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedPair {
    pub source_tag: String,
    pub target_tag: String,
    pub source_text: String,
    pub target_text: String,
}

/// Emits every listed direction over index-aligned parallel corpora.
pub fn tag_multilingual(
    corpora: &BTreeMap<String, Vec<String>>,
    directions: &[(String, String)],
) -> Result<Vec<TaggedPair>> {
    if corpora.len() < 2 {
        return Err(Error::Data(format!("need at least 2 language tags, got {}", corpora.len())));
    }
    let n = corpora.values().next().map_or(0, Vec::len);
    if corpora.values().any(|c| c.len() != n) {
        return Err(Error::Data("parallel corpora differ in length".into()));
    }
    let mut out = Vec::with_capacity(n * directions.len());
    for (src, tgt) in directions {
        if src == tgt {
            return Err(Error::Data(format!(
                "direction {src}->{tgt} pairs a tag with itself; same-tag pairs are reserved for zero-shot use"
            )));
        }
        let (s, t) = match (corpora.get(src), corpora.get(tgt)) {
            (Some(s), Some(t)) => (s, t),
            _ => return Err(Error::Data(format!("unknown tag in direction {src}->{tgt}"))),
        };
        for (a, b) in s.iter().zip(t) {
            out.push(TaggedPair {
                source_tag: src.clone(),
                target_tag: tgt.clone(),
                source_text: a.clone(),
                target_text: b.clone(),
            });
        }
    }
    Ok(out)
}

/// All ordered pairs of distinct tags.
pub fn cross_directions(tags: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for a in tags {
        for b in tags {
            if a != b {
                out.push((a.clone(), b.clone()));
            }
        }
    }
    out
}

/// Parallel corpora for synthetic languages that share one sentence
/// structure and differ by a bijective word cipher.
#[derive(Debug, Clone)]
pub struct CipherLanguages {
    /// Per tag, the surface form of each shared word index.
    pub lexicons: BTreeMap<String, Vec<String>>,
    pub corpora: BTreeMap<String, Vec<String>>,
}

impl CipherLanguages {
    pub fn generate(tags: &[String], words: usize, sentences: usize, len: (usize, usize), seed: u64) -> Result<Self> {
        if tags.len() < 2 || words < 2 || len.0 == 0 || len.0 > len.1 {
            return Err(Error::Config("cipher languages need >= 2 tags, >= 2 words and a valid length range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lexicons = BTreeMap::new();
        for (i, tag) in tags.iter().enumerate() {
            // a per-language onset letter keeps the vocabularies disjoint
            let onset = ['h', 'j', 'w', 'x', 'y', 'q', 'c'][i % 7];
            let prefix = format!("{onset}{}", if i >= 7 { (i / 7).to_string() } else { String::new() });
            lexicons.insert(tag.clone(), invent_words(words, &mut rng, &prefix));
        }
        let mut corpora: BTreeMap<String, Vec<String>> = tags.iter().map(|t| (t.clone(), Vec::new())).collect();
        for _ in 0..sentences {
            let n = rng.random_range(len.0..=len.1);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..words)).collect();
            for (tag, lex) in &lexicons {
                let s = idx.iter().map(|&i| lex[i].as_str()).collect::<Vec<_>>().join(" ");
                corpora.get_mut(tag).expect("tag").push(s);
            }
        }
        Ok(Self { lexicons, corpora })
    }

    /// Maps a sentence from one language's words to another's.
    pub fn cipher(&self, text: &str, from: &str, to: &str) -> Option<String> {
        let (src, dst) = (self.lexicons.get(from)?, self.lexicons.get(to)?);
        text.split_whitespace()
            .map(|w| src.iter().position(|x| x == w).map(|i| dst[i].clone()))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.join(" "))
    }
}

/// Deterministic frame rendering for token IDs, so text sources can feed
/// the feature encoder. Each ID maps to one fixed Gaussian frame.
#[derive(Debug, Clone)]
pub struct TokenRenderer {
    dim: usize,
    table: Vec<Vec<f32>>,
}

impl TokenRenderer {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab_size)
            .map(|_| (0..dim).map(|_| gaussian(&mut rng) as f32).collect())
            .collect();
        Self { dim, table }
    }

    pub fn render(&self, ids: &[u32]) -> Result<FeatureSequence> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            let row = self
                .table
                .get(i as usize)
                .ok_or_else(|| Error::Data(format!("token id {i} outside renderer table")))?;
            data.extend_from_slice(row);
        }
        FeatureSequence::new(ids.len(), self.dim, data)
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    frames: usize,
    features: String,
    verbatim_text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    compressed_text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tags: Option<&'a LanguageTags>,
}

/// Sidecar describing how a corpus file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub split: String,
    pub count: usize,
    pub seed: u64,
    pub spec: SynthSpec,
}

pub fn manifest_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn corpus_to_string(utts: &[Utterance]) -> Result<String> {
    let mut out = String::new();
    for u in utts {
        let rec = RecordOut {
            id: &u.id,
            frames: u.features.frames(),
            features: u.features.to_base64(),
            verbatim_text: &u.verbatim_text,
            compressed_text: u.compressed_text.as_deref(),
            tags: u.tags.as_ref(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, utts: &[Utterance], manifest: Option<&CorpusManifest>) -> Result<()> {
    fs::write(path, corpus_to_string(utts)?)?;
    if let Some(m) = manifest {
        fs::write(manifest_path(path), serde_json::to_string_pretty(m)? + "\n")?;
    }
    Ok(())
}

fn corpus_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Corpus {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_record(line_no: usize, line: &str) -> Result<Utterance> {
    let v: Value = serde_json::from_str(line).map_err(|e| corpus_err(line_no, "<record>", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| corpus_err(line_no, "<record>", "not a JSON object"))?;
    let get_str = |k: &str| -> Result<&str> {
        obj.get(k)
            .ok_or_else(|| corpus_err(line_no, k, "missing"))?
            .as_str()
            .ok_or_else(|| corpus_err(line_no, k, "not a string"))
    };
    let id = get_str("id")?.to_string();
    let frames = obj
        .get("frames")
        .ok_or_else(|| corpus_err(line_no, "frames", "missing"))?
        .as_u64()
        .ok_or_else(|| corpus_err(line_no, "frames", "not a non-negative integer"))? as usize;
    let bytes = B64
        .decode(get_str("features")?)
        .map_err(|e| corpus_err(line_no, "features", format!("bad base64: {e}")))?;
    if frames == 0 {
        return Err(corpus_err(line_no, "frames", "must be >= 1"));
    }
    if bytes.is_empty() || bytes.len() % (4 * frames) != 0 {
        return Err(corpus_err(
            line_no,
            "features",
            format!("{} bytes do not split into {frames} frames of f32", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let dim = data.len() / frames;
    let features = FeatureSequence::new(frames, dim, data).map_err(|e| corpus_err(line_no, "features", e.to_string()))?;
    let verbatim_text = get_str("verbatim_text")?.to_string();
    let compressed_text = match obj.get("compressed_text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(corpus_err(line_no, "compressed_text", "not a string")),
    };
    let tags = match obj.get("tags") {
        None | Some(Value::Null) => None,
        Some(t) => Some(
            serde_json::from_value::<LanguageTags>(t.clone())
                .map_err(|e| corpus_err(line_no, "tags", e.to_string()))?,
        ),
    };
    let u = Utterance {
        id,
        features,
        verbatim_text,
        compressed_text,
        tags,
    };
    u.validate().map_err(|(f, m)| corpus_err(line_no, f, m))?;
    Ok(u)
}

pub fn corpus_from_str(text: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(i + 1, line)?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Reads a line-delimited corpus, validating each record; sorted by id.
pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    corpus_from_str(&fs::read_to_string(path)?)
}

pub fn load_manifest(corpus: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(manifest_path(corpus))?)?)
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use lenctl::data::{
    load_corpus, save_corpus, synth_compression, synth_transcription, CorpusManifest, SynthSpec, Utterance,
};
use lenctl::decoding::{
    banned_ids, choose_budget, decode as run_decode, hypotheses_from_str, hypotheses_to_string, DecodeConfig,
    HypothesisRecord, ModelScorer,
};
use lenctl::metrics::{compression_histogram, histogram_rows, EvalItem, EvalReport};
use lenctl::model::{Example, Model, ModelConfig};
use lenctl::tokenizer::{learn_bpe as fit_bpe, MergeTable, BOS_ID};
use lenctl::training::{transcription_examples, Phase, TrainState, TrainingSchedule};
use lenctl::{Error, Result};

use crate::{BpeArgs, DecodeArgs, Desired, EvalArgs, Overrides, SynthArgs, Target, TrainArgs};

fn config_err(m: impl Into<String>) -> Error {
    Error::Config(m.into())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{what} `{}` does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) if !p.is_dir() => Err(config_err(format!("directory `{}` does not exist", p.display()))),
        _ => Ok(()),
    }
}

fn content_len(table: &MergeTable, text: &str) -> usize {
    table.count_content(table.encode(text).ids())
}

fn reference_text(u: &Utterance, target: Target) -> Result<&str> {
    match target {
        Target::Verbatim => Ok(&u.verbatim_text),
        Target::Compressed => u
            .compressed_text
            .as_deref()
            .ok_or_else(|| Error::Data(format!("{} has no compressed_text", u.id))),
    }
}

fn default_target(utts: &[Utterance]) -> Target {
    if !utts.is_empty() && utts.iter().all(|u| u.compressed_text.is_some()) {
        Target::Compressed
    } else {
        Target::Verbatim
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            require_file(p, "spec")?;
            SynthSpec::from_kv(&fs::read_to_string(p)?)?
        }
        None => {
            let s = SynthSpec::default();
            s.validate()?;
            s
        }
    };
    fs::create_dir_all(&a.out)?;
    let corpus = synth_transcription(&spec, a.seed)?;
    println!("split\tutterances\tmean_words\tmean_compressed_words\tmean_frames");
    for (name, utts) in corpus.splits() {
        let utts = synth_compression(utts, &spec)?;
        let manifest = CorpusManifest {
            split: name.to_string(),
            count: utts.len(),
            seed: a.seed,
            spec: spec.clone(),
        };
        save_corpus(&a.out.join(format!("{name}.jsonl")), &utts, Some(&manifest))?;
        let words = |t: &str| t.split_whitespace().count() as f64;
        println!(
            "{name}\t{}\t{:.2}\t{:.2}\t{:.1}",
            utts.len(),
            mean(utts.iter().map(|u| words(&u.verbatim_text))),
            mean(utts.iter().map(|u| words(u.compressed_text.as_deref().unwrap_or("")))),
            mean(utts.iter().map(|u| u.features.frames() as f64)),
        );
    }
    Ok(())
}

pub fn learn_bpe(a: BpeArgs) -> Result<()> {
    for p in &a.corpora {
        require_file(p, "corpus")?;
    }
    require_parent(&a.out)?;
    let mut texts = Vec::new();
    for p in &a.corpora {
        for u in load_corpus(p)? {
            texts.extend(u.compressed_text);
            texts.push(u.verbatim_text);
        }
    }
    let table = fit_bpe(&texts, a.merges, &a.tags)?;
    table.save(&a.out)?;
    println!(
        "learned {} merges over {} texts; vocabulary {}",
        table.merges().len(),
        texts.len(),
        table.vocab_size()
    );
    Ok(())
}

/// Reads `key = value` lines, routing each key to the model config or the
/// schedule.
fn read_config(text: &str, model: &mut ModelConfig, schedule: &mut TrainingSchedule) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("config line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let owned = model.set(k, v).map_err(|e| config_err(format!("config line {}: {e}", n + 1)))?;
        if !owned {
            schedule.set(k, v).map_err(|e| config_err(format!("config line {}: {e}", n + 1)))?;
        }
    }
    Ok(())
}

fn apply_overrides(o: &Overrides, model: &mut ModelConfig, s: &mut TrainingSchedule) -> Result<()> {
    macro_rules! over {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = &o.$field { $target.$field = v.clone(); })*
        };
    }
    over!(
        max_steps => s, base_lr => s, adapt_lr_factor => s, warmup_steps => s, batch_size => s,
        seed => s, label_smoothing => s, eval_every => s,
        model_dim => model, num_heads => model, encoder_layers => model, decoder_layers => model,
        ffn_dim => model, dropout_rate => model, max_trained_length => model,
    );
    if let Some(c) = &o.conditioning {
        model.conditioning = c.parse()?;
    }
    Ok(())
}

fn examples(utts: &[Utterance], table: &MergeTable, target: Target) -> Result<Vec<Example>> {
    transcription_examples(utts, table, target == Target::Compressed)
}

pub fn train(a: TrainArgs, adapt: bool) -> Result<()> {
    let mut model_cfg = ModelConfig::default();
    let mut schedule = TrainingSchedule::default();
    if let Some(p) = &a.config {
        require_file(p, "config")?;
        read_config(&fs::read_to_string(p)?, &mut model_cfg, &mut schedule)?;
    }
    apply_overrides(&a.overrides, &mut model_cfg, &mut schedule)?;
    schedule.phase = if adapt { Phase::Adapt } else { Phase::Base };
    schedule.validate()?;
    require_file(&a.corpus, "corpus")?;
    require_file(&a.tokenizer, "tokenizer")?;
    if let Some(d) = &a.dev {
        require_file(d, "dev corpus")?;
    }
    match (&a.init, adapt) {
        (Some(p), _) => require_file(p, "initial checkpoint")?,
        (None, true) => return Err(config_err("adapt needs --init <checkpoint>")),
        (None, false) => {}
    }
    require_parent(&a.out)?;

    let table = MergeTable::load(&a.tokenizer)?;
    let utts = load_corpus(&a.corpus)?;
    if utts.is_empty() {
        return Err(Error::Data(format!("corpus `{}` is empty", a.corpus.display())));
    }
    let target = a.target.unwrap_or(if adapt { Target::Compressed } else { Target::Verbatim });
    let train_ex = examples(&utts, &table, target)?;
    let dev_ex = match &a.dev {
        Some(p) => Some(examples(&load_corpus(p)?, &table, target)?),
        None => None,
    };

    let mut state = if a.resume && a.out.is_file() {
        let st = TrainState::load(&a.out)?;
        eprintln!("resuming from step {}", st.step);
        st
    } else if let Some(init) = &a.init {
        TrainState::new(Model::load(init)?)
    } else {
        model_cfg.vocab_size = table.vocab_size();
        model_cfg.feature_dim = utts[0].features.dim();
        model_cfg.label_smoothing = schedule.label_smoothing;
        TrainState::new(Model::new(model_cfg, schedule.seed)?)
    };
    let cfg = state.model.config();
    if cfg.vocab_size != table.vocab_size() {
        return Err(config_err(format!(
            "checkpoint vocabulary {} does not match tokenizer vocabulary {}",
            cfg.vocab_size,
            table.vocab_size()
        )));
    }
    if let Some(u) = utts.iter().find(|u| u.features.dim() != cfg.feature_dim) {
        return Err(Error::Data(format!(
            "{}: feature dim {} but the model expects {}",
            u.id,
            u.features.dim(),
            cfg.feature_dim
        )));
    }
    if let Some(e) = train_ex.iter().find(|e| e.inputs.len() > cfg.max_len) {
        return Err(Error::Data(format!(
            "target of {} tokens exceeds max_len {}",
            e.inputs.len(),
            cfg.max_len
        )));
    }

    let until = a.stop_after.unwrap_or(schedule.max_steps);
    let every = a.checkpoint_every;
    let out = a.out.clone();
    state.run(&train_ex, &schedule, dev_ex.as_deref(), until, |st| {
        if st.step % 100 == 0 {
            let last = &st.log.steps[st.log.steps.len() - 1];
            eprintln!("step {} loss {:.4} lr {:.2e}", st.step, last.loss, last.lr);
        }
        if every > 0 && st.step % every == 0 {
            st.save(&out)?;
        }
        Ok(())
    })?;
    state.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        s.into()
    });
    fs::write(&log_path, state.log.to_jsonl()?)?;

    let losses = state.log.losses();
    let window = losses.len().min(100);
    println!(
        "{} steps (phase {}) in {:.1}s",
        state.step,
        if adapt { "adapt" } else { "base" },
        state.log.wall_clock_secs
    );
    if window > 0 {
        println!(
            "loss: first {window} steps {:.4}, last {window} steps {:.4}",
            mean(losses[..window].iter().copied()),
            mean(losses[losses.len() - window..].iter().copied())
        );
    }
    if let Some(e) = state.log.evals.last() {
        println!("held-out token accuracy {:.4} at step {}", e.token_accuracy, e.step);
    }
    Ok(())
}

enum BudgetMode {
    Reference,
    MinBaseline,
    Fixed(usize),
}

fn parse_budget(s: &str) -> Result<BudgetMode> {
    match s {
        "ref" => Ok(BudgetMode::Reference),
        "min-baseline" => Ok(BudgetMode::MinBaseline),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|n| n.parse().ok())
            .map(BudgetMode::Fixed)
            .ok_or_else(|| config_err(format!("bad budget `{s}`; expected ref, min-baseline or fixed:N"))),
    }
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let mode = parse_budget(&a.budget)?;
    if a.beam == 0 {
        return Err(config_err("--beam must be at least 1"));
    }
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.tokenizer, "tokenizer")?;
    require_file(&a.corpus, "corpus")?;
    let baseline: Option<BTreeMap<String, usize>> = match (&mode, &a.baseline) {
        (BudgetMode::MinBaseline, None) => {
            return Err(config_err("--budget min-baseline needs --baseline <hypotheses>"))
        }
        (BudgetMode::MinBaseline, Some(p)) => {
            require_file(p, "baseline")?;
            Some(
                hypotheses_from_str(&fs::read_to_string(p)?)?
                    .into_iter()
                    .map(|r| (r.id, r.token_count))
                    .collect(),
            )
        }
        _ => None,
    };
    require_parent(&a.out)?;

    let table = MergeTable::load(&a.tokenizer)?;
    let model = Model::load(&a.checkpoint)?;
    if model.config().vocab_size != table.vocab_size() {
        return Err(config_err("checkpoint and tokenizer vocabularies differ"));
    }
    let utts = load_corpus(&a.corpus)?;
    let target = a.target.unwrap_or_else(|| default_target(&utts));
    let banned = banned_ids(&table);

    let mut budgets = Vec::with_capacity(utts.len());
    for u in &utts {
        let reference = content_len(&table, reference_text(u, target)?);
        budgets.push(match mode {
            BudgetMode::Reference => reference,
            BudgetMode::Fixed(n) => n,
            BudgetMode::MinBaseline => {
                let b = baseline.as_ref().expect("baseline loaded");
                let len = *b
                    .get(&u.id)
                    .ok_or_else(|| Error::Data(format!("baseline has no hypothesis for {}", u.id)))?;
                choose_budget(reference, Some(len))
            }
        });
    }

    let mut records = Vec::with_capacity(utts.len());
    for (u, &budget) in utts.iter().zip(&budgets) {
        let start = match &u.tags {
            Some(t) => table
                .tag_id(&t.target)
                .ok_or_else(|| Error::Data(format!("{}: tokenizer has no tag `{}`", u.id, t.target)))?,
            None => BOS_ID,
        };
        let scorer = ModelScorer::new(&model, &u.features, start, banned.clone())?;
        let cfg = DecodeConfig {
            budget,
            beam_size: a.beam,
            max_len: a.max_len,
            forced_stop: a.forced_stop,
            ..DecodeConfig::default()
        };
        let hyp = run_decode(&scorer, &cfg)?;
        records.push(HypothesisRecord {
            id: u.id.clone(),
            text: table.decode(&hyp.tokens)?,
            token_count: table.count_content(&hyp.tokens),
            log_prob: hyp.log_prob,
            budget,
        });
    }
    fs::write(&a.out, hypotheses_to_string(&records)?)?;

    let over = records.iter().filter(|r| r.token_count > r.budget).count();
    println!(
        "decoded {} utterances; mean output/budget {:.3}; over budget {}",
        records.len(),
        mean(records.iter().filter(|r| r.budget > 0).map(|r| r.token_count as f64 / r.budget as f64)),
        over
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.refs, "references")?;
    require_file(&a.hyps, "hypotheses")?;
    require_file(&a.tokenizer, "tokenizer")?;
    if a.bins == 0 {
        return Err(config_err("--bins must be positive"));
    }
    let table = MergeTable::load(&a.tokenizer)?;
    let refs = load_corpus(&a.refs)?;
    let hyps = hypotheses_from_str(&fs::read_to_string(&a.hyps)?)?;
    let ref_ids: BTreeSet<&str> = refs.iter().map(|u| u.id.as_str()).collect();
    let hyp_ids: BTreeSet<&str> = hyps.iter().map(|h| h.id.as_str()).collect();
    if hyp_ids.len() != hyps.len() {
        return Err(Error::Data("hypothesis file repeats an id".into()));
    }
    if ref_ids != hyp_ids {
        let missing: Vec<_> = ref_ids.difference(&hyp_ids).take(5).collect();
        let extra: Vec<_> = hyp_ids.difference(&ref_ids).take(5).collect();
        return Err(Error::Data(format!(
            "ids do not align: missing hypotheses {missing:?}, unknown hypotheses {extra:?}"
        )));
    }
    fs::create_dir_all(&a.out_dir)?;
    let target = a.target.unwrap_or_else(|| default_target(&refs));
    let by_id: BTreeMap<&str, &HypothesisRecord> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let mut items = Vec::with_capacity(refs.len());
    let mut verbatim_lens = Vec::with_capacity(refs.len());
    let mut target_lens = Vec::with_capacity(refs.len());
    for u in &refs {
        let h = by_id[u.id.as_str()];
        let reference = reference_text(u, target)?.to_string();
        let ref_len = content_len(&table, &reference);
        verbatim_lens.push(content_len(&table, &u.verbatim_text));
        target_lens.push(ref_len);
        items.push(EvalItem {
            id: u.id.clone(),
            reference,
            hypothesis: h.text.clone(),
            output_len: content_len(&table, &h.text),
            desired_len: match a.desired {
                Desired::Ref => ref_len,
                Desired::Budget => h.budget,
            },
        });
    }
    let report = EvalReport::compute(&items)?;
    let label = a.hyps.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let table_text = report.table(&label);
    print!("{table_text}");
    fs::write(a.out_dir.join("report.txt"), &table_text)?;
    fs::write(a.out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(a.out_dir.join("utterances.jsonl"), report.utterance_jsonl()?)?;
    let hist = compression_histogram(&verbatim_lens, &target_lens, a.bins, (0.5, 3.0))?;
    fs::write(a.out_dir.join("histogram.tsv"), histogram_rows(&hist))?;
    Ok(())
}

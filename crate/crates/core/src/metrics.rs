//! Word error rate, ROUGE-1/2/L, length ratio and compression histograms.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Case-folded whitespace words; punctuation stays attached.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level edit distance and reference length.
pub fn word_errors(reference: &str, hypothesis: &str) -> Result<(usize, usize)> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::Metric("WER of an empty reference".into()));
    }
    Ok((edit_distance(&r, &words(hypothesis)), r.len()))
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (e, n) = word_errors(reference, hypothesis)?;
    Ok(e as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        let p = if hyp == 0 { 0.0 } else { overlap as f64 / hyp as f64 };
        let r = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self { precision: p, recall: r, f1 }
    }
}

fn ngram_counts(w: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if w.len() >= n {
        for g in w.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

pub fn rouge_n(reference: &str, hypothesis: &str, n: usize) -> Result<Prf> {
    if !(1..=2).contains(&n) {
        return Err(Error::Metric(format!("ROUGE-{n} unsupported; use 1 or 2")));
    }
    let (r, h) = (words(reference), words(hypothesis));
    let (rc, hc) = (ngram_counts(&r, n), ngram_counts(&h, n));
    let overlap = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    let total = |w: &[String]| w.len().saturating_sub(n - 1);
    Ok(Prf::from_counts(overlap, total(&h), total(&r)))
}

/// Longest common subsequence length, linear memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(reference: &str, hypothesis: &str) -> Prf {
    let (r, h) = (words(reference), words(hypothesis));
    Prf::from_counts(lcs_len(&r, &h), h.len(), r.len())
}

/// Mean of per-utterance `output / desired`.
pub fn length_ratio(outputs: &[usize], desired: &[usize]) -> Result<f64> {
    if outputs.len() != desired.len() {
        return Err(Error::Metric(format!(
            "{} outputs but {} desired lengths",
            outputs.len(),
            desired.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Metric("length ratio of an empty corpus".into()));
    }
    if let Some(i) = desired.iter().position(|&d| d == 0) {
        return Err(Error::Metric(format!("desired length 0 at index {i}")));
    }
    let sum: f64 = outputs.iter().zip(desired).map(|(&o, &d)| o as f64 / d as f64).sum();
    Ok(sum / outputs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width bins over `[low, high)` of `transcription / target`.
/// Values outside the range land in the first or last bin.
pub fn compression_histogram(
    transcription_lens: &[usize],
    target_lens: &[usize],
    bins: usize,
    range: (f64, f64),
) -> Result<Vec<HistogramBin>> {
    if transcription_lens.len() != target_lens.len() {
        return Err(Error::Metric("histogram inputs differ in length".into()));
    }
    if bins == 0 || !(range.1 > range.0) {
        return Err(Error::Metric(format!("bad histogram layout: {bins} bins over {range:?}")));
    }
    let width = (range.1 - range.0) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            low: range.0 + b as f64 * width,
            high: range.0 + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for (&s, &t) in transcription_lens.iter().zip(target_lens) {
        let ratio = if t == 0 { f64::INFINITY } else { s as f64 / t as f64 };
        let b = ((ratio - range.0) / width).floor();
        let b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        out[b].count += 1;
    }
    Ok(out)
}

pub fn histogram_rows(h: &[HistogramBin]) -> String {
    let mut s = String::from("bin_low\tbin_high\tcount\n");
    for b in h {
        let _ = writeln!(s, "{:.4}\t{:.4}\t{}", b.low, b.high, b.count);
    }
    s
}

/// Inputs for one utterance of an evaluation.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub output_len: usize,
    pub desired_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub wer: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    pub output_len: usize,
    pub desired_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Corpus WER: total edits over total reference words.
    pub wer: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    pub length_ratio: f64,
    pub utterances: Vec<UtteranceScore>,
}

fn mean_prf(v: impl Iterator<Item = Prf>) -> Prf {
    let mut acc = Prf::default();
    let mut n = 0.0;
    for p in v {
        acc.precision += p.precision;
        acc.recall += p.recall;
        acc.f1 += p.f1;
        n += 1.0;
    }
    if n > 0.0 {
        acc.precision /= n;
        acc.recall /= n;
        acc.f1 /= n;
    }
    acc
}

impl EvalReport {
    pub fn compute(items: &[EvalItem]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Metric("evaluation over an empty corpus".into()));
        }
        let (mut edits, mut ref_words) = (0, 0);
        let mut utterances = Vec::with_capacity(items.len());
        for it in items {
            let (e, n) = word_errors(&it.reference, &it.hypothesis)
                .map_err(|e| Error::Metric(format!("{}: {e}", it.id)))?;
            edits += e;
            ref_words += n;
            utterances.push(UtteranceScore {
                id: it.id.clone(),
                wer: e as f64 / n as f64,
                rouge1: rouge_n(&it.reference, &it.hypothesis, 1)?,
                rouge2: rouge_n(&it.reference, &it.hypothesis, 2)?,
                rouge_l: rouge_l(&it.reference, &it.hypothesis),
                output_len: it.output_len,
                desired_len: it.desired_len,
            });
        }
        let outs: Vec<usize> = items.iter().map(|i| i.output_len).collect();
        let des: Vec<usize> = items.iter().map(|i| i.desired_len).collect();
        Ok(Self {
            wer: edits as f64 / ref_words as f64,
            rouge1: mean_prf(utterances.iter().map(|u| u.rouge1)),
            rouge2: mean_prf(utterances.iter().map(|u| u.rouge2)),
            rouge_l: mean_prf(utterances.iter().map(|u| u.rouge_l)),
            length_ratio: length_ratio(&outs, &des)?,
            utterances,
        })
    }

    /// Ratio, WER and ROUGE F1 columns in percent, ratio as a fraction.
    pub fn table(&self, label: &str) -> String {
        let mut s = format!("{:<16} {:>6} {:>6} {:>6} {:>6} {:>6}\n", "system", "Ratio", "WER", "R-1", "R-2", "R-L");
        let _ = writeln!(
            s,
            "{:<16} {:>6.2} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
            label,
            self.length_ratio,
            100.0 * self.wer,
            100.0 * self.rouge1.f1,
            100.0 * self.rouge2.f1,
            100.0 * self.rouge_l.f1
        );
        s
    }

    pub fn utterance_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for u in &self.utterances {
            s.push_str(&serde_json::to_string(u)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c", "a b c").unwrap(), 0.0);
        assert_eq!(wer("a b c", "").unwrap(), 1.0);
        assert_eq!(wer("A B", "a b").unwrap(), 0.0);
        assert!(wer("", "a").is_err());
        assert_eq!(wer("a", "b c d").unwrap(), 3.0);
    }

    #[test]
    fn rouge_examples() {
        let p = rouge_n("a b c", "a b", 1).unwrap();
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.precision, 1.0);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        let same = rouge_n("x y z", "x y z", 2).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n("a b", "c d", 1).unwrap(), Prf::default());
        assert_eq!(rouge_n("", "", 2).unwrap(), Prf::default());
        assert!(rouge_n("a", "a", 3).is_err());
    }

    #[test]
    fn rouge_clips_by_multiplicity() {
        let p = rouge_n("the cat", "the the the", 1).unwrap();
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.recall, 0.5);
    }

    #[test]
    fn rouge_l_examples() {
        let p = rouge_l("a b c d", "a c");
        assert_eq!((p.recall, p.precision), (0.5, 1.0));
    }

    #[test]
    fn length_ratio_examples() {
        assert_eq!(length_ratio(&[3, 4], &[3, 4]).unwrap(), 1.0);
        assert!((length_ratio(&[21], &[20]).unwrap() - 1.05).abs() < 1e-12);
        assert!(length_ratio(&[1], &[0]).is_err());
        assert!(length_ratio(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn histogram_single_bin_and_conservation() {
        let h = compression_histogram(&[4, 5, 6], &[4, 5, 6], 10, (0.5, 2.5)).unwrap();
        assert_eq!(h.iter().filter(|b| b.count > 0).count(), 1);
        let h = compression_histogram(&[1, 9, 30, 4], &[2, 3, 1, 0], 5, (0.5, 2.5)).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert!(histogram_rows(&h).starts_with("bin_low\tbin_high\tcount\n"));
    }

    #[test]
    fn report_of_identical_texts() {
        let items = vec![EvalItem {
            id: "u1".into(),
            reference: "a b c".into(),
            hypothesis: "a b c".into(),
            output_len: 3,
            desired_len: 3,
        }];
        let r = EvalReport::compute(&items).unwrap();
        assert_eq!(r.wer, 0.0);
        assert_eq!(r.rouge1.f1, 1.0);
        assert_eq!(r.rouge_l.f1, 1.0);
        assert_eq!(r.length_ratio, 1.0);
        assert!(r.table("x").contains("1.00"));
    }
}

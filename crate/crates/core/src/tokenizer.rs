//! Byte-pair-encoding subword tokenizer.
//!
//! Words are whitespace-separated; the final symbol of every word carries
//! an end-of-word marker so detokenization is unambiguous. IDs 0..=3 are
//! reserved for BOS, EOS, PAD and UNK, followed by language tags, base
//! characters, and merged symbols in merge order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

pub const END_OF_WORD: &str = "</w>";
const RESERVED: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];
const FILE_HEADER: &str = "#lenctl-bpe v1";

/// Symbol used for a language tag, e.g. `<lang:de>`.
pub fn tag_symbol(tag: &str) -> String {
    format!("<lang:{tag}>")
}

/// Token IDs, optionally framed by BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Validates that EOS is terminal and PAD only trails.
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(p) = ids.iter().position(|&i| i == EOS_ID) {
            if p + 1 != ids.len() && ids[p + 1..].iter().any(|&i| i != PAD_ID) {
                return Err(Error::Tokenizer(format!("EOS at position {p} is not terminal")));
            }
        }
        if let Some(p) = ids.iter().position(|&i| i == PAD_ID) {
            if ids[p..].iter().any(|&i| i != PAD_ID) {
                return Err(Error::Tokenizer(format!("PAD at position {p} precedes content")));
            }
        }
        Ok(Self { ids })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_bos(&self) -> bool {
        self.ids.first() == Some(&BOS_ID)
    }

    pub fn has_eos(&self) -> bool {
        self.ids.contains(&EOS_ID)
    }
}

/// Learned merges plus the symbol vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    num_tags: usize,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Merges every non-overlapping occurrence of `(left, right)`, scanning
/// left to right.
fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl MergeTable {
    fn build(merges: Vec<(String, String)>, vocab: Vec<String>, num_tags: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, s) in vocab.iter().enumerate() {
            if ids.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Tokenizer(format!("reserved slot {i} must hold `{r}`")));
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(Self {
            merges,
            ranks,
            vocab,
            ids,
            num_tags,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    pub fn tag_id(&self, tag: &str) -> Option<u32> {
        self.id_of(&tag_symbol(tag))
    }

    pub fn tag_ids(&self) -> std::ops::Range<u32> {
        NUM_RESERVED..NUM_RESERVED + self.num_tags as u32
    }

    pub fn is_tag(&self, id: u32) -> bool {
        self.tag_ids().contains(&id)
    }

    /// True for IDs that count toward a length budget.
    pub fn is_content(&self, id: u32) -> bool {
        !matches!(id, BOS_ID | EOS_ID | PAD_ID) && !self.is_tag(id)
    }

    /// Content tokens only: BOS, EOS, PAD and language tags are excluded.
    pub fn token_count(&self, tokens: &TokenSequence) -> usize {
        self.count_content(tokens.ids())
    }

    pub fn count_content(&self, ids: &[u32]) -> usize {
        ids.iter().filter(|&&i| self.is_content(i)).count()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut symbols, l, r);
        }
        out.extend(symbols.iter().map(|s| self.id_of(s).unwrap_or(UNK_ID)));
    }

    /// Content tokens of `text`, without BOS/EOS.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut ids);
        }
        TokenSequence { ids }
    }

    /// `[BOS] + tag? + encode(text) + [EOS]`.
    pub fn encode_framed(&self, text: &str, tag: Option<&str>) -> Result<TokenSequence> {
        let mut ids = vec![BOS_ID];
        if let Some(t) = tag {
            ids.push(
                self.tag_id(t)
                    .ok_or_else(|| Error::Tokenizer(format!("unknown language tag `{t}`")))?,
            );
        }
        ids.extend(self.encode(text).ids);
        ids.push(EOS_ID);
        Ok(TokenSequence { ids })
    }

    /// Detokenizes, dropping BOS/EOS/PAD and language tags.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let sym = self
                .symbol(id)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} out of range")))?;
            if !self.is_content(id) {
                continue;
            }
            if id == UNK_ID {
                out.push_str(sym);
                out.push(' ');
            } else if let Some(stem) = sym.strip_suffix(END_OF_WORD) {
                out.push_str(stem);
                out.push(' ');
            } else {
                out.push_str(sym);
            }
        }
        Ok(out.trim_end().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_HEADER}");
        let _ = writeln!(s, "#vocab {} tags {}", self.vocab.len(), self.num_tags);
        for sym in &self.vocab {
            let _ = writeln!(s, "{sym}");
        }
        let _ = writeln!(s, "#merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Tokenizer(format!("merge table line {line}: {m}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, FILE_HEADER)) => {}
            _ => return Err(bad(1, "missing header")),
        }
        let (ln, vocab_line) = lines.next().ok_or_else(|| bad(2, "missing vocab block"))?;
        let parts: Vec<&str> = vocab_line.split(' ').collect();
        let (n, tags) = match parts.as_slice() {
            ["#vocab", n, "tags", t] => (
                n.parse::<usize>().map_err(|_| bad(ln, "bad vocab size"))?,
                t.parse::<usize>().map_err(|_| bad(ln, "bad tag count"))?,
            ),
            _ => return Err(bad(ln, "expected `#vocab N tags K`")),
        };
        let mut vocab = Vec::with_capacity(n);
        for _ in 0..n {
            let (_, sym) = lines.next().ok_or_else(|| bad(ln, "vocab block truncated"))?;
            vocab.push(sym.to_string());
        }
        let (ln, merge_line) = lines.next().ok_or_else(|| bad(ln, "missing merges block"))?;
        let m: usize = merge_line
            .strip_prefix("#merges ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(ln, "expected `#merges M`"))?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let (ln, pair) = lines.next().ok_or_else(|| bad(ln, "merges block truncated"))?;
            let (l, r) = pair
                .split_once(' ')
                .ok_or_else(|| bad(ln, "merge needs two symbols"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        if let Some((ln, _)) = lines.next() {
            return Err(bad(ln, "trailing content"));
        }
        Self::build(merges, vocab, tags)
    }
}

/// Learns `num_merges` merges from whitespace-split `corpus` lines.
///
/// The most frequent adjacent pair is merged first; ties go to the
/// lexicographically smallest `(left, right)`. Learning stops early once
/// no pair remains.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize, tags: &[String]) -> Result<MergeTable> {
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Tokenizer("cannot learn merges from an empty corpus".into()));
    }

    let mut alphabet = BTreeSet::new();
    for w in word_freq.keys() {
        for c in w.chars() {
            alphabet.insert(c.to_string());
            alphabet.insert(format!("{c}{END_OF_WORD}"));
        }
    }

    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (word_symbols(w), f))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((l, r)) = best else { break };
        for (syms, _) in &mut words {
            apply_merge(syms, &l, &r);
        }
        merges.push((l, r));
    }

    let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut seen: BTreeSet<String> = vocab.iter().cloned().collect();
    for t in tags {
        let sym = tag_symbol(t);
        if seen.insert(sym.clone()) {
            vocab.push(sym);
        }
    }
    let num_tags = vocab.len() - RESERVED.len();
    for sym in alphabet.into_iter().chain(merges.iter().map(|(l, r)| format!("{l}{r}"))) {
        if seen.insert(sym.clone()) {
            vocab.push(sym);
        }
    }
    MergeTable::build(merges, vocab, num_tags)
}

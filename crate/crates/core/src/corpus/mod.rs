//! Text corpus handling: character vocabulary, tokenization, n-gram
//! dedup, and the member/nonmember/validation split.
//!
//! Tokenization is character-level. A token sequence keeps the raw text
//! verbatim alongside its token ids, so scoring paths that need original
//! bytes (compression ratios) never round-trip through the vocabulary.

pub mod io;
pub mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub type TokenId = usize;

/// Id of the reserved out-of-vocabulary token.
pub const UNK_ID: TokenId = 0;
/// Id of the reserved padding token used for short model contexts.
pub const PAD_ID: TokenId = 1;

const UNK_SYMBOL: char = '\u{fffd}';
const PAD_SYMBOL: char = '\u{0}';

/// Character vocabulary with two reserved leading symbols (UNK, PAD).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, TokenId>,
    lowercase_map: Vec<TokenId>,
}

/// Serialized as the bare non-reserved symbol string; everything else is
/// derived from it on load.
impl Serialize for Vocabulary {
    fn serialize<Se: serde::Serializer>(
        &self,
        serializer: Se,
    ) -> std::result::Result<Se::Ok, Se::Error> {
        serializer.serialize_str(&self.stored_symbols().iter().collect::<String>())
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let stored = String::deserialize(deserializer)?;
        let symbols: Vec<char> = stored.chars().collect();
        let mut seen = std::collections::BTreeSet::new();
        for &c in &symbols {
            if c == UNK_SYMBOL || c == PAD_SYMBOL || !seen.insert(c) {
                return Err(serde::de::Error::custom(format!(
                    "invalid vocabulary symbol {c:?}: reserved or repeated"
                )));
            }
        }
        Ok(Vocabulary::from_symbols(&symbols))
    }
}

impl Vocabulary {
    /// Build a vocabulary from corpus text: the sorted set of characters
    /// that occur, behind the two reserved symbols.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut chars = BTreeSet::new();
        for t in texts {
            chars.extend(t.chars());
        }
        let symbols: Vec<char> =
            chars.into_iter().filter(|c| *c != UNK_SYMBOL && *c != PAD_SYMBOL).collect();
        Vocabulary::from_symbols(&symbols)
    }

    /// Reconstruct a vocabulary from its non-reserved symbol list (the
    /// form checkpoints store). Order is preserved.
    pub fn from_symbols(symbols: &[char]) -> Vocabulary {
        let mut all = vec![UNK_SYMBOL, PAD_SYMBOL];
        all.extend_from_slice(symbols);
        let index = build_index(&all);
        let lowercase_map = build_lowercase_map(&all, &index);
        Vocabulary { symbols: all, index, lowercase_map }
    }

    /// The non-reserved symbols, in id order (for serialization).
    pub fn stored_symbols(&self) -> &[char] {
        &self.symbols[2..]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> char {
        self.symbols[id]
    }

    pub fn token_of(&self, c: char) -> TokenId {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Lowercase image of a token; identity where no in-vocabulary
    /// single-character lowering exists.
    pub fn lowercase_token(&self, id: TokenId) -> TokenId {
        self.lowercase_map[id]
    }

    /// Tokenize text. Out-of-vocabulary characters map to UNK while the
    /// raw text is preserved verbatim on the sequence.
    pub fn tokenize(&self, id: impl Into<String>, text: &str) -> Result<TokenSequence> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let tokens = text.chars().map(|c| self.token_of(c)).collect();
        Ok(TokenSequence { id: id.into(), raw_text: text.to_string(), tokens })
    }

    /// Lowercase a sequence, keeping tokens and raw text aligned.
    pub fn lowercase_sequence(&self, seq: &TokenSequence) -> TokenSequence {
        let tokens: Vec<TokenId> =
            seq.tokens.iter().map(|&t| self.lowercase_token(t)).collect();
        let raw_text = seq
            .raw_text
            .chars()
            .zip(&seq.tokens)
            .map(|(c, &t)| if t == UNK_ID { lower_char(c) } else { self.symbol(self.lowercase_token(t)) })
            .collect();
        TokenSequence { id: seq.id.clone(), raw_text, tokens }
    }
}

fn build_index(symbols: &[char]) -> HashMap<char, TokenId> {
    symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect()
}

fn build_lowercase_map(symbols: &[char], index: &HashMap<char, TokenId>) -> Vec<TokenId> {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if i == UNK_ID || i == PAD_ID {
                return i;
            }
            index.get(&lower_char(c)).copied().unwrap_or(i)
        })
        .collect()
}

/// Single-character lowercase, or identity when lowering would expand to
/// multiple characters (keeps token/char alignment exact).
fn lower_char(c: char) -> char {
    let mut it = c.to_lowercase();
    let first = it.next().unwrap_or(c);
    if it.next().is_none() {
        first
    } else {
        c
    }
}

/// A tokenized sample: ids over the vocabulary plus the verbatim text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub id: String,
    pub raw_text: String,
    pub tokens: Vec<TokenId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// All character n-grams of a text, one entry per occurrence position.
pub fn char_ngrams(text: &str, n: usize) -> Vec<String> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < n {
        return Vec::new();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

/// Set of n-grams occurring anywhere in the member texts.
#[derive(Debug, Clone)]
pub struct MemberNgrams {
    n: usize,
    set: HashSet<String>,
}

impl MemberNgrams {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, n: usize) -> MemberNgrams {
        let mut set = HashSet::new();
        for t in texts {
            set.extend(char_ngrams(t, n));
        }
        MemberNgrams { n, set }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, gram: &str) -> bool {
        self.set.contains(gram)
    }
}

/// Fraction of `text`'s character n-grams (counted per occurrence) that
/// appear anywhere in the member set.
pub fn ngram_overlap(text: &str, members: &MemberNgrams) -> Result<f64> {
    let grams = char_ngrams(text, members.n);
    if grams.is_empty() {
        return Err(Error::SequenceTooShort { len: text.chars().count(), need: members.n });
    }
    let hits = grams.iter().filter(|g| members.contains(g)).count();
    Ok(hits as f64 / grams.len() as f64)
}

/// Split sizes and dedup parameters; recorded verbatim in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub members: usize,
    pub nonmembers: usize,
    pub validation: usize,
    pub ngram: usize,
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            members: 1000,
            nonmembers: 1000,
            validation: 100,
            ngram: 13,
            max_overlap: 0.8,
            seed: 13,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.nonmembers == 0 {
            return Err(Error::InvalidConfig(
                "member and nonmember counts must be positive".into(),
            ));
        }
        if self.ngram == 0 {
            return Err(Error::InvalidConfig("ngram order must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(Error::InvalidConfig("max_overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Counters describing what the splitter consumed and rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub candidates_seen: usize,
    pub duplicates_skipped: usize,
    pub too_short_skipped: usize,
    pub overlap_discarded: usize,
}

/// The three disjoint sample sets plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipDataset {
    pub members: Vec<TokenSequence>,
    pub nonmembers: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    pub config: SplitConfig,
    pub stats: SplitStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Member,
    Nonmember,
    Validation,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Member => write!(f, "member"),
            Role::Nonmember => write!(f, "nonmember"),
            Role::Validation => write!(f, "validation"),
        }
    }
}

impl MembershipDataset {
    pub fn iter_roles(&self) -> impl Iterator<Item = (Role, &TokenSequence)> {
        self.members
            .iter()
            .map(|s| (Role::Member, s))
            .chain(self.nonmembers.iter().map(|s| (Role::Nonmember, s)))
            .chain(self.validation.iter().map(|s| (Role::Validation, s)))
    }
}

/// Outcome of a split: the dataset plus the unused remainder of the
/// shuffled candidate stream (deduplicated), available for disjoint
/// pretraining and reference pools.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub dataset: MembershipDataset,
    pub remainder: Vec<TokenSequence>,
}

/// Deterministically split a candidate pool into members, dedup-filtered
/// nonmembers, and validation samples.
///
/// Candidates are consumed in seeded shuffle order. Exact raw-text
/// duplicates are skipped; a nonmember candidate must keep its n-gram
/// overlap with the member set at or below `max_overlap` or it is
/// discarded outright. Validation samples are not overlap-filtered.
pub fn build_split(pool: &[TokenSequence], cfg: &SplitConfig) -> Result<SplitOutcome> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(cfg.seed, "split-shuffle")));

    let mut stats = SplitStats::default();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut stream = order.into_iter().filter_map(|i| {
        let seq = &pool[i];
        stats.candidates_seen += 1;
        if seq.raw_text.chars().count() < cfg.ngram {
            stats.too_short_skipped += 1;
            return None;
        }
        if !seen.insert(seq.raw_text.as_str()) {
            stats.duplicates_skipped += 1;
            return None;
        }
        Some(seq.clone())
    });

    let mut members = Vec::with_capacity(cfg.members);
    for _ in 0..cfg.members {
        match stream.next() {
            Some(seq) => members.push(seq),
            None => {
                return Err(Error::SplitCapacity {
                    role: "members",
                    requested: cfg.members,
                    survived: members.len(),
                })
            }
        }
    }

    let member_grams = MemberNgrams::build(members.iter().map(|s| s.raw_text.as_str()), cfg.ngram);

    let mut nonmembers = Vec::with_capacity(cfg.nonmembers);
    let mut overlap_discarded = 0usize;
    while nonmembers.len() < cfg.nonmembers {
        let Some(seq) = stream.next() else {
            return Err(Error::SplitCapacity {
                role: "nonmembers",
                requested: cfg.nonmembers,
                survived: nonmembers.len(),
            });
        };
        let overlap = ngram_overlap(&seq.raw_text, &member_grams)?;
        if overlap <= cfg.max_overlap {
            nonmembers.push(seq);
        } else {
            overlap_discarded += 1;
        }
    }

    let mut validation = Vec::with_capacity(cfg.validation);
    for _ in 0..cfg.validation {
        match stream.next() {
            Some(seq) => validation.push(seq),
            None => {
                return Err(Error::SplitCapacity {
                    role: "validation",
                    requested: cfg.validation,
                    survived: validation.len(),
                })
            }
        }
    }

    let remainder: Vec<TokenSequence> = stream.collect();
    stats.overlap_discarded = overlap_discarded;
    let dataset = MembershipDataset {
        members,
        nonmembers,
        validation,
        config: cfg.clone(),
        stats,
    };
    Ok(SplitOutcome { dataset, remainder })
}

/// Cut non-overlapping fixed-length character windows from documents and
/// shuffle the pooled windows with the given seed. Window ids are
/// `{doc_id}#{index}`; tail fragments shorter than `len` are dropped.
pub fn cut_windows(docs: &[(String, String)], len: usize, seed: u64) -> Vec<(String, String)> {
    assert!(len >= 1, "window length must be positive");
    let mut out = Vec::new();
    for (doc_id, text) in docs {
        let chars: Vec<char> = text.chars().collect();
        for (k, chunk) in chars.chunks_exact(len).enumerate() {
            out.push((format!("{doc_id}#{k}"), chunk.iter().collect::<String>()));
        }
    }
    out.shuffle(&mut seeds::rng(seeds::derive(seed, "window-shuffle")));
    out
}

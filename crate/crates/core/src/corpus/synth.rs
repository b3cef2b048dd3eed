//! Seeded synthetic corpus generator.
//!
//! Produces English-like documents from a fixed lexicon with a Zipf-like
//! frequency profile, per-document topic words, sentence casing, and
//! punctuation. The output has no membership signal of its own: windows
//! cut from it are exchangeable, so any attack advantage measured later
//! comes from training, not from the data. Generation is a pure function
//! of the config.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;

const LEXICON: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "was", "for", "on", "are", "with", "as", "at",
    "be", "this", "have", "from", "or", "one", "had", "by", "word", "but", "not", "what",
    "all", "were", "when", "your", "can", "said", "there", "use", "each", "which", "she",
    "how", "their", "will", "other", "about", "out", "many", "then", "them", "these",
    "some", "her", "would", "make", "like", "him", "into", "time", "has", "look", "two",
    "more", "write", "see", "number", "way", "could", "people", "than", "first", "water",
    "been", "call", "who", "oil", "its", "now", "find", "long", "down", "day", "did",
    "get", "come", "made", "may", "part", "over", "new", "sound", "take", "only",
    "little", "work", "know", "place", "year", "live", "back", "give", "most", "very",
    "after", "thing", "our", "just", "name", "good", "sentence", "man", "think", "say",
    "great", "where", "help", "through", "much", "before", "line", "right", "too",
    "mean", "old", "any", "same", "tell", "boy", "follow", "came", "want", "show",
    "also", "around", "form", "three", "small", "set", "put", "end", "does", "another",
    "well", "large", "must", "big", "even", "such", "because", "turn", "here", "why",
    "ask", "went", "men", "read", "need", "land", "different", "home", "move", "try",
    "kind", "hand", "picture", "again", "change", "off", "play", "spell", "air", "away",
    "animal", "house", "point", "page", "letter", "mother", "answer", "found", "study",
    "still", "learn", "should", "world", "high", "every", "near", "add", "food",
    "between", "own", "below", "country", "plant", "last", "school", "father", "keep",
    "tree", "never", "start", "city", "earth", "eye", "light", "thought", "head",
    "under", "story", "saw", "left", "few", "while", "along", "might", "close",
    "something", "seem", "next", "hard", "open", "example", "begin", "life", "always",
    "those", "both", "paper", "together", "got", "group", "often", "run", "important",
    "until", "children", "side", "feet", "car", "mile", "night", "walk", "white", "sea",
    "began", "grow", "took", "river", "four", "carry", "state", "once", "book", "hear",
    "stop", "without", "second", "later", "miss", "idea", "enough", "eat", "face",
    "watch", "far", "indian", "really", "almost", "let", "above", "girl", "sometimes",
    "mountain", "cut", "young", "talk", "soon", "list", "song", "being", "leave",
    "family", "music", "color", "stand", "sun", "question", "fish", "area", "mark",
    "dog", "horse", "bird", "problem", "complete", "room", "knew", "since", "ever",
    "piece", "told", "usually", "friend", "easy", "heard", "order", "red", "door",
    "sure", "become", "top", "ship", "across", "today", "during", "short", "better",
    "best", "however", "low", "hour", "black", "product", "happen", "measure",
    "remember", "early", "wave", "reach", "listen", "wind", "rock", "space", "covered",
    "fast", "several", "hold", "himself", "toward", "five", "step", "morning",
    "passed", "vowel", "true", "hundred", "against", "pattern", "numeral", "table",
    "north", "slowly", "money", "map", "farm", "pulled", "draw", "voice", "seen",
    "cold", "cried", "plan", "notice", "south", "sing", "war", "ground", "fall",
    "king", "town", "unit", "figure", "certain", "field", "travel", "wood", "fire",
    "upon",
];

const PROPER_NOUNS: &[&str] = &[
    "Alice", "Brook", "Carver", "Dalton", "Elm", "Fenwick", "Garnet", "Halden",
    "Ivers", "Juniper", "Kestrel", "Lowell", "Marlow", "Norwood", "Onyx", "Pemberton",
    "Quill", "Rowan", "Sutton", "Thorne", "Umber", "Vance", "Winslow", "Yarrow",
];

const TOPIC_WORDS: usize = 12;
const TOPIC_BOOST: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub documents: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { documents: 400, min_chars: 600, max_chars: 1400, seed: 11 }
    }
}

/// Generate `(id, text)` documents deterministically from the config.
/// Each document draws its own RNG stream, so document k is identical
/// regardless of how many documents are requested.
pub fn generate(cfg: &SynthConfig) -> Vec<(String, String)> {
    (0..cfg.documents)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive_indexed(cfg.seed, "synth-doc", i as u64));
            (format!("doc{i:05}"), document(cfg, &mut rng))
        })
        .collect()
}

fn document(cfg: &SynthConfig, rng: &mut impl Rng) -> String {
    // Zipf-like base frequencies with a per-document topic boost.
    let mut weights: Vec<f64> =
        (0..LEXICON.len()).map(|rank| 1.0 / (rank as f64 + 3.0)).collect();
    for _ in 0..TOPIC_WORDS {
        let w = rng.gen_range(0..LEXICON.len());
        weights[w] *= TOPIC_BOOST;
    }
    let dist = WeightedIndex::new(&weights).expect("weights are positive");

    let target = rng.gen_range(cfg.min_chars..=cfg.max_chars);
    let mut text = String::with_capacity(target + 80);
    while text.len() < target {
        if !text.is_empty() {
            text.push(' ');
        }
        sentence(&dist, rng, &mut text);
    }
    text
}

fn sentence(dist: &WeightedIndex<f64>, rng: &mut impl Rng, out: &mut String) {
    let n_words = rng.gen_range(4..=12);
    let comma_at =
        if n_words >= 6 && rng.gen_bool(0.35) { Some(rng.gen_range(2..n_words - 1)) } else { None };
    for w in 0..n_words {
        if w > 0 {
            out.push(' ');
        }
        if rng.gen_bool(0.06) {
            out.push_str(PROPER_NOUNS[rng.gen_range(0..PROPER_NOUNS.len())]);
        } else {
            let word = LEXICON[dist.sample(rng)];
            if w == 0 {
                let mut chars = word.chars();
                let first = chars.next().expect("lexicon words are non-empty");
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            } else {
                out.push_str(word);
            }
        }
        if comma_at == Some(w) {
            out.push(',');
        }
    }
    let roll: f64 = rng.gen();
    out.push(if roll < 0.8 {
        '.'
    } else if roll < 0.9 {
        '?'
    } else {
        '!'
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let a = generate(&SynthConfig { documents: 6, ..Default::default() });
        let b = generate(&SynthConfig { documents: 6, ..Default::default() });
        assert_eq!(a, b);
        let longer = generate(&SynthConfig { documents: 9, ..Default::default() });
        assert_eq!(&longer[..6], &a[..]);
    }

    #[test]
    fn documents_hit_length_and_charset_contract() {
        let cfg = SynthConfig { documents: 20, min_chars: 300, max_chars: 700, seed: 5 };
        for (_, text) in generate(&cfg) {
            assert!(text.len() >= 300);
            assert!(
                text.chars().all(|c| c.is_ascii_alphabetic()
                    || matches!(c, ' ' | '.' | ',' | '?' | '!')),
                "unexpected character in synthetic text"
            );
        }
    }

    #[test]
    fn casing_and_seed_variation_are_present() {
        let cfg = SynthConfig { documents: 10, ..Default::default() };
        let docs = generate(&cfg);
        let text: String = docs.iter().map(|(_, t)| t.as_str()).collect();
        assert!(text.chars().any(|c| c.is_ascii_uppercase()));
        assert!(text.chars().any(|c| c.is_ascii_lowercase()));
        let other = generate(&SynthConfig { seed: 12, ..cfg });
        assert_ne!(docs[0].1, other[0].1);
    }

    #[test]
    fn windows_are_plentiful_and_distinct() {
        let cfg = SynthConfig { documents: 120, ..Default::default() };
        let docs = generate(&cfg);
        let wins = crate::corpus::cut_windows(&docs, 128, 1);
        assert!(wins.len() > 700, "only {} windows", wins.len());
        let mut texts: Vec<&str> = wins.iter().map(|(_, t)| t.as_str()).collect();
        texts.sort_unstable();
        texts.dedup();
        assert_eq!(texts.len(), wins.len(), "windows must be distinct");
    }
}

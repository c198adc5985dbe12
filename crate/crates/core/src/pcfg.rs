//! Synthetic grammar for corpora: a small probabilistic phrase grammar with a
//! deterministic generator and a membership oracle.
//!
//! Paragraphs follow a fixed discourse shape — body sentences, one
//! "finally ..." wind-down, then a short closing that ends with `!` — so a
//! termination head has a learnable signal for where paragraphs stop.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::text::tokenize;

const DETERMINERS: &[&str] = &["the", "a"];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fox", "fish", "tree", "river", "stone", "house", "garden", "road",
    "cloud", "star", "book", "song", "child", "farmer", "sailor", "mountain", "valley",
];
const NAMES: &[&str] = &["mira", "tom", "elena", "kofi", "yuki", "omar", "lena", "ravi"];
const ADJECTIVES: &[&str] = &[
    "quick", "small", "bright", "quiet", "old", "young", "green", "tall", "gentle", "clever",
    "warm", "cold",
];
const TRANSITIVE: &[&str] = &[
    "sees", "finds", "follows", "carries", "paints", "watches", "greets", "builds", "holds",
    "chases",
];
const INTRANSITIVE: &[&str] = &[
    "runs", "sleeps", "sings", "waits", "jumps", "smiles", "dreams", "wanders",
];
const ADVERBS: &[&str] = &["slowly", "quietly", "gladly", "often", "together", "alone"];
const PREPOSITIONS: &[&str] = &["near", "with", "under", "over", "beside"];
const CLOSINGS: &[&[&str]] = &[
    &["the", "story", "ends"],
    &["that", "is", "all"],
    &["we", "rest", "now"],
    &["the", "day", "is", "done"],
];
const WINDDOWN_MARKER: &str = "finally";

pub const MIN_SENTENCE_TOKENS: usize = 3;
pub const MAX_SENTENCE_TOKENS: usize = 20;

/// Sentence roles inside a paragraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SentenceKind {
    Body,
    Winddown,
    Closing,
}

/// Generator plus oracle for the toy grammar.
pub struct ToyGrammar {
    /// Probability that a clause gets an "and" extension.
    pub extend_prob: f64,
}

impl Default for ToyGrammar {
    fn default() -> Self {
        ToyGrammar { extend_prob: 0.55 }
    }
}

impl ToyGrammar {
    fn noun_phrase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
        if rng.gen_bool(0.3) {
            out.push(pick(rng, NAMES));
        } else {
            out.push(pick(rng, DETERMINERS));
            let adjectives = match rng.gen_range(0..100) {
                0..=49 => 0,
                50..=84 => 1,
                _ => 2,
            };
            for _ in 0..adjectives {
                out.push(pick(rng, ADJECTIVES));
            }
            out.push(pick(rng, NOUNS));
        }
    }

    fn verb_phrase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
        match rng.gen_range(0..100) {
            0..=34 => {
                out.push(pick(rng, TRANSITIVE));
                self.noun_phrase(rng, out);
            }
            35..=59 => {
                out.push(pick(rng, TRANSITIVE));
                self.noun_phrase(rng, out);
                out.push(pick(rng, PREPOSITIONS));
                self.noun_phrase(rng, out);
            }
            60..=69 => {
                out.push(pick(rng, INTRANSITIVE));
            }
            70..=84 => {
                out.push(pick(rng, INTRANSITIVE));
                out.push(pick(rng, ADVERBS));
            }
            _ => {
                out.push(pick(rng, INTRANSITIVE));
                out.push(pick(rng, PREPOSITIONS));
                self.noun_phrase(rng, out);
            }
        }
    }

    fn clause(&self, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
        self.noun_phrase(rng, out);
        self.verb_phrase(rng, out);
    }

    fn body_words(&self, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
        loop {
            let mut words = Vec::new();
            self.clause(rng, &mut words);
            if rng.gen_bool(self.extend_prob) {
                words.push("and");
                self.clause(rng, &mut words);
            }
            // +1 for the end punctuation token
            if words.len() + 1 <= MAX_SENTENCE_TOKENS {
                return words;
            }
        }
    }

    /// One rendered sentence of the given kind, delimiter attached.
    pub fn sentence(&self, kind: SentenceKind, rng: &mut ChaCha8Rng) -> String {
        match kind {
            SentenceKind::Body => {
                let words = self.body_words(rng);
                let end = if rng.gen_bool(0.85) { "." } else { "?" };
                format!("{}{}", words.join(" "), end)
            }
            SentenceKind::Winddown => loop {
                let mut words = vec![WINDDOWN_MARKER];
                self.clause(rng, &mut words);
                if words.len() + 1 <= MAX_SENTENCE_TOKENS {
                    return format!("{}.", words.join(" "));
                }
            },
            SentenceKind::Closing => {
                let phrase = CLOSINGS[rng.gen_range(0..CLOSINGS.len())];
                format!("{}!", phrase.join(" "))
            }
        }
    }

    /// A sentence drawn from the paragraph mixture, for sentence-level
    /// training corpora.
    pub fn mixed_sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let kind = match rng.gen_range(0..100) {
            0..=69 => SentenceKind::Body,
            70..=84 => SentenceKind::Winddown,
            _ => SentenceKind::Closing,
        };
        self.sentence(kind, rng)
    }

    /// Body sentences, one wind-down, one closing, joined with spaces.
    pub fn paragraph(&self, rng: &mut ChaCha8Rng) -> String {
        let body = rng.gen_range(1..=3);
        let mut sentences = Vec::with_capacity(body + 2);
        for _ in 0..body {
            sentences.push(self.sentence(SentenceKind::Body, rng));
        }
        sentences.push(self.sentence(SentenceKind::Winddown, rng));
        sentences.push(self.sentence(SentenceKind::Closing, rng));
        sentences.join(" ")
    }

    pub fn sentence_corpus(&self, count: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.mixed_sentence(&mut rng)).collect()
    }

    pub fn paragraph_corpus(&self, count: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.paragraph(&mut rng)).collect()
    }

    /// Membership oracle over the word-level token form of one sentence
    /// (delimiter included).
    pub fn is_valid_sentence(&self, text: &str) -> bool {
        let tokens = tokenize(text);
        if tokens.len() < MIN_SENTENCE_TOKENS || tokens.len() > MAX_SENTENCE_TOKENS {
            return false;
        }
        let (body, end) = tokens.split_at(tokens.len() - 1);
        let words: Vec<&str> = body.iter().map(|s| s.as_str()).collect();
        match end[0].as_str() {
            "." => parse_statement(&words) || parse_winddown(&words),
            "?" => parse_statement(&words),
            "!" => CLOSINGS.iter().any(|c| *c == words.as_slice()),
            _ => false,
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list[rng.gen_range(0..list.len())]
}

fn parse_statement(words: &[&str]) -> bool {
    match try_clause(words) {
        Some(rest) if rest.is_empty() => true,
        Some(rest) => {
            rest.first() == Some(&"and")
                && matches!(try_clause(&rest[1..]), Some(tail) if tail.is_empty())
        }
        None => false,
    }
}

fn parse_winddown(words: &[&str]) -> bool {
    words.first() == Some(&WINDDOWN_MARKER)
        && matches!(try_clause(&words[1..]), Some(rest) if rest.is_empty())
}

/// Parse one clause prefix; returns the unconsumed tail on success.
fn try_clause<'a>(words: &'a [&'a str]) -> Option<&'a [&'a str]> {
    let rest = try_noun_phrase(words)?;
    try_verb_phrase(rest)
}

fn try_noun_phrase<'a>(words: &'a [&'a str]) -> Option<&'a [&'a str]> {
    let first = words.first()?;
    if NAMES.contains(first) {
        return Some(&words[1..]);
    }
    if !DETERMINERS.contains(first) {
        return None;
    }
    let mut i = 1;
    while i < words.len() && ADJECTIVES.contains(&words[i]) && i <= 2 {
        i += 1;
    }
    if i < words.len() && NOUNS.contains(&words[i]) {
        Some(&words[i + 1..])
    } else {
        None
    }
}

fn try_verb_phrase<'a>(words: &'a [&'a str]) -> Option<&'a [&'a str]> {
    let first = words.first()?;
    if TRANSITIVE.contains(first) {
        let rest = try_noun_phrase(&words[1..])?;
        if let Some(&prep) = rest.first() {
            if PREPOSITIONS.contains(&prep) {
                return try_noun_phrase(&rest[1..]);
            }
        }
        return Some(rest);
    }
    if INTRANSITIVE.contains(first) {
        let rest = &words[1..];
        match rest.first() {
            Some(w) if ADVERBS.contains(w) => Some(&rest[1..]),
            Some(w) if PREPOSITIONS.contains(w) => try_noun_phrase(&rest[1..]),
            _ => Some(rest),
        }
    } else {
        None
    }
}

/// Sanity statistics over a sentence list: (mean token length, min, max).
pub fn length_stats(sentences: &[String]) -> (f64, usize, usize) {
    let lens: Vec<usize> = sentences.iter().map(|s| tokenize(s).len()).collect();
    let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
    (mean, *lens.iter().min().unwrap(), *lens.iter().max().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generated_sentences_stay_in_bounds_and_validate() {
        let g = ToyGrammar::default();
        let sentences = g.sentence_corpus(500, 42);
        let (mean, min, max) = length_stats(&sentences);
        assert!(min >= MIN_SENTENCE_TOKENS, "min {min}");
        assert!(max <= MAX_SENTENCE_TOKENS, "max {max}");
        assert!((7.0..=13.0).contains(&mean), "mean {mean}");
        for s in &sentences {
            assert!(g.is_valid_sentence(s), "generator produced invalid {s:?}");
        }
    }

    #[test]
    fn paragraph_mean_sentence_length_is_near_ten() {
        let g = ToyGrammar::default();
        let paragraphs = g.paragraph_corpus(300, 7);
        let mut tokens = 0usize;
        let mut sentences = 0usize;
        for p in &paragraphs {
            for span in crate::text::segment(p) {
                tokens += tokenize(span.text).len();
                sentences += 1;
            }
        }
        let mean = tokens as f64 / sentences as f64;
        assert!((8.0..=12.0).contains(&mean), "mean sentence length {mean}");
    }

    #[test]
    fn paragraphs_end_with_winddown_then_closing() {
        let g = ToyGrammar::default();
        for p in g.paragraph_corpus(50, 3) {
            let spans = crate::text::segment(&p);
            assert!(spans.len() >= 3);
            let tokens_last = tokenize(spans.last().unwrap().text);
            assert_eq!(tokens_last.last().unwrap(), "!");
            let winddown = tokenize(spans[spans.len() - 2].text);
            assert_eq!(winddown[0], WINDDOWN_MARKER);
        }
    }

    #[test]
    fn oracle_rejects_garbage() {
        let g = ToyGrammar::default();
        assert!(!g.is_valid_sentence("the the the."));
        assert!(!g.is_valid_sentence("runs mira."));
        assert!(!g.is_valid_sentence("mira runs"));
        assert!(!g.is_valid_sentence("xyzzy dog runs."));
        assert!(g.is_valid_sentence("mira runs."));
        assert!(g.is_valid_sentence("the quick cat sees a dog near the river."));
        assert!(g.is_valid_sentence("finally tom sleeps."));
        assert!(g.is_valid_sentence("that is all!"));
    }

    #[test]
    fn vocabulary_stays_small() {
        let g = ToyGrammar::default();
        let mut words = HashSet::new();
        for s in g.sentence_corpus(2000, 1) {
            for t in tokenize(&s) {
                words.insert(t);
            }
        }
        assert!(words.len() <= 120, "vocab grew to {}", words.len());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let g = ToyGrammar::default();
        assert_eq!(g.paragraph_corpus(5, 9), g.paragraph_corpus(5, 9));
        assert_ne!(g.paragraph_corpus(5, 9), g.paragraph_corpus(5, 10));
    }
}

//! Sentence segmentation, word-level vocabulary, and corpus ingestion.
//!
//! Segmentation splits after each of `, . ? !`; the delimiter stays with the
//! preceding span and following whitespace starts the next span, so the spans
//! of a paragraph concatenate back to it byte-for-byte.
//!
//! Tokenization is word-level: lowercased alphanumeric runs, with every other
//! non-whitespace character emitted as its own single-character token.
//! Detokenization joins tokens with single spaces; byte-exact surface
//! reconstruction is not promised once text has been tokenized.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Hard cap on tokens per sentence.
pub const MAX_SENTENCE_TOKENS: usize = 64;
/// Hard cap on sentences per paragraph.
pub const MAX_PARAGRAPH_SENTENCES: usize = 64;

const DELIMITERS: [char; 4] = [',', '.', '?', '!'];

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
const SPECIAL_NAMES: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// One sentence slice of a paragraph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceSpan<'a> {
    pub text: &'a str,
    pub byte_start: usize,
    pub byte_end: usize,
}

/// Split a paragraph after each delimiter character. Empty input gives an
/// empty list; otherwise spans are non-empty and concatenate to the input.
pub fn segment(paragraph: &str) -> Vec<SentenceSpan<'_>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, ch) in paragraph.char_indices() {
        if DELIMITERS.contains(&ch) {
            let end = i + ch.len_utf8();
            spans.push(SentenceSpan {
                text: &paragraph[start..end],
                byte_start: start,
                byte_end: end,
            });
            start = end;
        }
    }
    if start < paragraph.len() {
        spans.push(SentenceSpan {
            text: &paragraph[start..],
            byte_start: start,
            byte_end: paragraph.len(),
        });
    }
    spans
}

/// Word-level tokens of a string: lowercased alphanumeric runs plus
/// single-character tokens for any other non-whitespace character.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token ids of one sentence; never empty, never longer than the cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Corpus-derived token inventory with fixed special ids 0..3.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    token_of: Vec<String>,
}

impl Vocabulary {
    /// Build from id-ordered tokens (specials excluded; they are prepended).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_of: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        token_of.extend(tokens);
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, t) in token_of.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { id_of, token_of })
    }

    /// Count word-level token frequencies over the corpus files and keep the
    /// `max_size - 4` most frequent, ties broken lexicographically.
    pub fn build<P: AsRef<Path>>(corpus_paths: &[P], max_size: usize) -> Result<Self> {
        if max_size <= 4 {
            return Err(Error::Vocab(format!(
                "max_size must exceed the 4 specials, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for path in corpus_paths {
            let file = File::open(path.as_ref())?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                for tok in tokenize(&line) {
                    saw_any = true;
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        if !saw_any {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 4);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
    }

    pub fn size(&self) -> usize {
        self.token_of.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.token_of
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::IdOutOfRange {
                id,
                vocab_size: self.size(),
            })
    }

    /// Encode one sentence span to ids. Over-length sentences are rejected,
    /// not truncated; the caller decides whether to skip or re-split.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        if tokens.len() > MAX_SENTENCE_TOKENS {
            return Err(Error::OverLength {
                len: tokens.len(),
                max: MAX_SENTENCE_TOKENS,
            });
        }
        Ok(TokenSequence {
            ids: tokens.iter().map(|t| self.id(t)).collect(),
        })
    }

    /// Canonical detokenization: tokens joined by single spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        if ids.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.token(id)?);
        }
        Ok(parts.join(" "))
    }

    /// Write as newline-delimited tokens in id order; the first four lines are
    /// the specials header.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = String::with_capacity(self.token_of.len() * 8);
        for t in &self.token_of {
            out.push_str(t);
            out.push('\n');
        }
        let mut file = File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        let mut lines = text.lines();
        for expected in SPECIAL_NAMES {
            match lines.next() {
                Some(got) if got == expected => {}
                other => {
                    return Err(Error::Vocab(format!(
                        "bad specials header: expected {expected:?}, got {other:?}"
                    )))
                }
            }
        }
        Self::from_tokens(lines.map(|s| s.to_string()).collect())
    }
}

/// Paragraphs of a newline-delimited UTF-8 corpus file: blank lines skipped,
/// paragraphs longer than [`MAX_PARAGRAPH_SENTENCES`] split at the sentence
/// boundary into consecutive chunks.
pub fn load_paragraphs<P: AsRef<Path>>(path: P) -> Result<ParagraphReader> {
    let file = File::open(path.as_ref())?;
    Ok(ParagraphReader {
        lines: BufReader::new(file).lines(),
        pending: Vec::new(),
    })
}

pub struct ParagraphReader {
    lines: std::io::Lines<BufReader<File>>,
    pending: Vec<String>,
}

impl Iterator for ParagraphReader {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(chunk) = self.pending.pop() {
                return Some(Ok(chunk));
            }
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let mut chunks = split_paragraph_cap(&line);
            chunks.reverse();
            self.pending = chunks;
        }
    }
}

/// Split a paragraph into chunks of at most [`MAX_PARAGRAPH_SENTENCES`]
/// sentences each, preserving content exactly.
pub fn split_paragraph_cap(paragraph: &str) -> Vec<String> {
    let spans = segment(paragraph);
    if spans.len() <= MAX_PARAGRAPH_SENTENCES {
        return vec![paragraph.to_string()];
    }
    spans
        .chunks(MAX_PARAGRAPH_SENTENCES)
        .map(|chunk| {
            let start = chunk.first().unwrap().byte_start;
            let end = chunk.last().unwrap().byte_end;
            paragraph[start..end].to_string()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn segment_keeps_single_sentence_whole() {
        let spans = segment("What's your name?");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "What's your name?");
    }

    #[test]
    fn segment_splits_after_comma_with_space_on_next_span() {
        let spans = segment("Hello, my dear friend");
        let texts: Vec<_> = spans.iter().map(|s| s.text).collect();
        assert_eq!(texts, vec!["Hello,", " my dear friend"]);
    }

    #[test]
    fn segment_without_delimiter_is_one_span() {
        let spans = segment("abc");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "abc");
    }

    #[test]
    fn segment_empty_input_is_empty() {
        assert!(segment("").is_empty());
    }

    #[test]
    fn segment_concatenation_reconstructs() {
        let p = "Hahaha.. and you? well! ok, fine";
        let joined: String = segment(p).iter().map(|s| s.text).collect();
        assert_eq!(joined, p);
        for s in segment(p) {
            assert!(!s.text.is_empty());
        }
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("What's your name?"), vec!["what", "'", "s", "your", "name", "?"]);
        assert_eq!(tokenize("Hello,"), vec!["hello", ","]);
    }

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            ["hello", ",", "a", "b"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_decode_canonical_round_trip() {
        let v = tiny_vocab();
        let seq = v.encode("Hello,").unwrap();
        assert_eq!(seq.ids, vec![v.id("hello"), v.id(",")]);
        let text = v.decode(&seq.ids).unwrap();
        assert_eq!(text, "hello ,");
        // canonical closure: re-encoding the decoded form is a fixed point
        let seq2 = v.encode(&text).unwrap();
        assert_eq!(seq2.ids, seq.ids);
    }

    #[test]
    fn out_of_vocabulary_maps_to_unk() {
        let v = tiny_vocab();
        let seq = v.encode("zebra").unwrap();
        assert_eq!(seq.ids, vec![UNK]);
        assert_eq!(v.decode(&seq.ids).unwrap(), "<unk>");
    }

    #[test]
    fn decode_empty_ids_errors() {
        let v = tiny_vocab();
        assert!(matches!(v.decode(&[]), Err(Error::EmptyTokenSequence)));
    }

    #[test]
    fn encode_rejects_over_length() {
        let v = tiny_vocab();
        let long = vec!["a"; MAX_SENTENCE_TOKENS + 1].join(" ");
        assert!(matches!(v.encode(&long), Err(Error::OverLength { .. })));
        let ok = vec!["a"; MAX_SENTENCE_TOKENS].join(" ");
        assert_eq!(v.encode(&ok).unwrap().len(), MAX_SENTENCE_TOKENS);
    }

    #[test]
    fn vocab_build_ranks_by_frequency_then_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "a a b\n").unwrap();
        let v = Vocabulary::build(&[&path], 6).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);

        // equal frequency: lexicographic order decides
        std::fs::write(&path, "b a\n").unwrap();
        let v = Vocabulary::build(&[&path], 6).unwrap();
        assert!(v.id("a") < v.id("b"));
    }

    #[test]
    fn vocab_truncates_and_maps_oov_to_unk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let mut f = File::create(&path).unwrap();
        // 200 distinct words, word i repeated (200 - i) times
        for i in 0..200 {
            for _ in 0..(200 - i) {
                write!(f, "w{i:03} ").unwrap();
            }
        }
        writeln!(f).unwrap();
        drop(f);
        let v = Vocabulary::build(&[&path], 100).unwrap();
        assert_eq!(v.size(), 100);
        assert_eq!(v.id("w000"), 4);
        assert_eq!(v.id("w199"), UNK);
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vocab");
        let v = tiny_vocab();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.id("hello"), v.id("hello"));
        assert_eq!(loaded.token(0).unwrap(), "<bos>");
    }

    #[test]
    fn paragraphs_skip_blank_lines_and_split_long_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let long: String = (0..70).map(|i| format!("s{i}.")).collect();
        std::fs::write(&path, format!("one. two.\n\n{long}\n")).unwrap();
        let paras: Vec<String> = load_paragraphs(&path)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(paras.len(), 3);
        assert_eq!(paras[0], "one. two.");
        assert_eq!(segment(&paras[1]).len(), 64);
        assert_eq!(segment(&paras[2]).len(), 6);
        assert_eq!(format!("{}{}", paras[1], paras[2]), long);
    }

    #[test]
    fn paragraph_count_matches_nonblank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let mut f = File::create(&path).unwrap();
        let mut expected = 0;
        for i in 0..1000 {
            if i % 7 == 0 {
                writeln!(f).unwrap();
            } else {
                writeln!(f, "line {i} content.").unwrap();
                expected += 1;
            }
        }
        drop(f);
        let n = load_paragraphs(&path).unwrap().count();
        assert_eq!(n, expected);
    }
}

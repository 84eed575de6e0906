//! Corpus ingestion: text with an explicit alphabet, flat token streams,
//! and synthetic categorical data.
//!
//! Text handling is deliberately strict.  The alphabet is a JSON object
//! mapping single characters to dense token ids `0..m-1`; it must cover
//! every character in the input, including whitespace and newlines, and
//! the first uncovered character aborts the load with its byte offset.
//! Sources are concatenated into one flat stream and then cut into
//! fixed-length chunks; a trailing remainder shorter than one chunk is
//! dropped.

use std::collections::BTreeMap;
use std::path::Path;

use gdds_core::oracle::DataDistribution;
use gdds_core::rng::position_stream;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("alphabet: {reason}")]
    BadAlphabet { reason: String },
    #[error("character {ch:?} at byte offset {offset} is not in the alphabet")]
    UnknownChar { ch: char, offset: usize },
    #[error("token {token} out of range for vocabulary of {m}")]
    TokenOutOfRange { token: u32, m: usize },
    #[error("chunk length must be positive")]
    BadChunk,
    #[error("corpus is empty after chunking ({tokens} tokens, chunk {chunk})")]
    Empty { tokens: usize, chunk: usize },
    #[error("bad distribution: {0}")]
    BadDistribution(String),
}

/// Character-level alphabet with dense ids `0..m-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    forward: BTreeMap<char, u32>,
    inverse: Vec<char>,
}

impl Alphabet {
    /// Parse the JSON object form, e.g. `{"a": 0, "b": 1}`.  Keys must be
    /// single characters and ids must cover `0..m-1` with no repeats.
    pub fn from_json_str(s: &str) -> Result<Alphabet, CorpusError> {
        let raw: BTreeMap<String, u32> =
            serde_json::from_str(s).map_err(|e| CorpusError::BadAlphabet {
                reason: format!("not a JSON object of character to id: {e}"),
            })?;
        if raw.is_empty() {
            return Err(CorpusError::BadAlphabet {
                reason: "alphabet is empty".into(),
            });
        }
        let mut forward = BTreeMap::new();
        let mut inverse = vec![None::<char>; raw.len()];
        for (key, id) in raw {
            let mut chars = key.chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(CorpusError::BadAlphabet {
                        reason: format!("key {key:?} is not a single character"),
                    })
                }
            };
            let size = inverse.len();
            let slot =
                inverse
                    .get_mut(id as usize)
                    .ok_or_else(|| CorpusError::BadAlphabet {
                        reason: format!("id {id} out of range for {size} entries"),
                    })?;
            if slot.is_some() {
                return Err(CorpusError::BadAlphabet {
                    reason: format!("id {id} assigned twice"),
                });
            }
            *slot = Some(ch);
            if forward.insert(ch, id).is_some() {
                return Err(CorpusError::BadAlphabet {
                    reason: format!("character {ch:?} assigned twice"),
                });
            }
        }
        let inverse: Vec<char> = inverse.into_iter().map(|c| c.expect("dense ids")).collect();
        Ok(Alphabet { forward, inverse })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Alphabet, CorpusError> {
        Alphabet::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Number of characters, which is also the data vocabulary size.
    pub fn size(&self) -> usize {
        self.inverse.len()
    }

    pub fn token_of(&self, ch: char) -> Option<u32> {
        self.forward.get(&ch).copied()
    }

    pub fn char_of(&self, token: u32) -> Option<char> {
        self.inverse.get(token as usize).copied()
    }

    /// Map tokens back to text.  Ids outside the alphabet (for example a
    /// trailing mask id) render as U+FFFD.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.char_of(t).unwrap_or('\u{FFFD}'))
            .collect()
    }
}

/// A rectangular token corpus over vocabulary `0..m-1`.
///
/// `m` may exceed the largest observed token, e.g. when an absorbing
/// kernel appends a mask id that never occurs in clean data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    m: usize,
    sequences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn new(m: usize, sequences: Vec<Vec<u32>>) -> Result<Corpus, CorpusError> {
        for seq in &sequences {
            for &t in seq {
                if t as usize >= m {
                    return Err(CorpusError::TokenOutOfRange { token: t, m });
                }
            }
        }
        Ok(Corpus { m, sequences })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn flat(&self) -> Vec<u32> {
        self.sequences.iter().flatten().copied().collect()
    }

    /// Widen the vocabulary, e.g. to make room for a mask id.
    pub fn with_vocab(mut self, m: usize) -> Result<Corpus, CorpusError> {
        if m < self.m {
            let worst = self.flat().into_iter().max().unwrap_or(0);
            if worst as usize >= m {
                return Err(CorpusError::TokenOutOfRange { token: worst, m });
            }
        }
        self.m = m;
        Ok(self)
    }
}

fn chunk_flat(m: usize, flat: Vec<u32>, chunk: usize) -> Result<Corpus, CorpusError> {
    if chunk == 0 {
        return Err(CorpusError::BadChunk);
    }
    let total = flat.len();
    let sequences: Vec<Vec<u32>> = flat.chunks_exact(chunk).map(|c| c.to_vec()).collect();
    if sequences.is_empty() {
        return Err(CorpusError::Empty {
            tokens: total,
            chunk,
        });
    }
    Corpus::new(m, sequences)
}

/// Tokenize text under an alphabet and cut it into fixed-length chunks.
pub fn corpus_from_text(
    text: &str,
    alphabet: &Alphabet,
    chunk: usize,
) -> Result<Corpus, CorpusError> {
    let mut flat = Vec::with_capacity(text.len());
    for (offset, ch) in text.char_indices() {
        match alphabet.token_of(ch) {
            Some(t) => flat.push(t),
            None => return Err(CorpusError::UnknownChar { ch, offset }),
        }
    }
    chunk_flat(alphabet.size(), flat, chunk)
}

/// Load a text file and chunk it under an alphabet.
pub fn corpus_from_text_file(
    path: impl AsRef<Path>,
    alphabet: &Alphabet,
    chunk: usize,
) -> Result<Corpus, CorpusError> {
    corpus_from_text(&std::fs::read_to_string(path)?, alphabet, chunk)
}

/// Chunk a flat token stream (e.g. from a `TOK1` file).
pub fn corpus_from_tokens(m: usize, flat: Vec<u32>, chunk: usize) -> Result<Corpus, CorpusError> {
    chunk_flat(m, flat, chunk)
}

/// Draw `count` sequences of `length` i.i.d. tokens from a categorical
/// distribution.  Cell `(j, l)` uses the `(seed, j, l)` position stream,
/// so the corpus is identical under any execution order or worker count.
pub fn corpus_from_categorical(
    qdata: &DataDistribution,
    count: usize,
    length: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if count == 0 || length == 0 {
        return Err(CorpusError::Empty {
            tokens: count * length,
            chunk: length.max(1),
        });
    }
    let mut sequences = Vec::with_capacity(count);
    for j in 0..count {
        let mut seq = Vec::with_capacity(length);
        for l in 0..length {
            let mut rng = position_stream(seed, j as u32, l as u32);
            seq.push(qdata.sample(&mut rng));
        }
        sequences.push(seq);
    }
    Corpus::new(qdata.len(), sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Alphabet {
        Alphabet::from_json_str(r#"{"a": 0, "b": 1}"#).expect("alphabet")
    }

    #[test]
    fn abab_chunks_into_two_pairs() {
        let corpus = corpus_from_text("abab", &ab(), 2).expect("corpus");
        assert_eq!(corpus.m(), 2);
        assert_eq!(corpus.sequences(), &[vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn trailing_remainder_is_dropped() {
        let corpus = corpus_from_text("ababa", &ab(), 2).expect("corpus");
        assert_eq!(corpus.sequences(), &[vec![0, 1], vec![0, 1]]);
        let corpus = corpus_from_text("ab", &ab(), 2).expect("corpus");
        assert_eq!(corpus.len(), 1);
    }

    #[test]
    fn unknown_character_reports_its_byte_offset() {
        // The offending character sits after a multi-byte one, so the
        // byte offset differs from the character index.
        let alphabet =
            Alphabet::from_json_str(r#"{"a": 0, "é": 1}"#).expect("alphabet");
        match corpus_from_text("a\u{e9}x", &alphabet, 1) {
            Err(CorpusError::UnknownChar { ch: 'x', offset: 3 }) => {}
            other => panic!("expected UnknownChar at offset 3, got {other:?}"),
        }
    }

    #[test]
    fn alphabet_rejects_malformed_tables() {
        assert!(Alphabet::from_json_str("{}").is_err());
        assert!(Alphabet::from_json_str(r#"{"ab": 0}"#).is_err());
        assert!(Alphabet::from_json_str(r#"{"a": 0, "b": 2}"#).is_err());
        assert!(Alphabet::from_json_str(r#"{"a": 0, "b": 0}"#).is_err());
        assert!(Alphabet::from_json_str(r#"[1, 2]"#).is_err());
    }

    #[test]
    fn alphabet_round_trips_text() {
        let alphabet = ab();
        let corpus = corpus_from_text("abba", &alphabet, 4).expect("corpus");
        assert_eq!(alphabet.detokenize(&corpus.sequences()[0]), "abba");
        assert_eq!(alphabet.detokenize(&[0, 9]), "a\u{FFFD}");
    }

    #[test]
    fn empty_after_chunking_is_an_error() {
        match corpus_from_text("a", &ab(), 2) {
            Err(CorpusError::Empty { tokens: 1, chunk: 2 }) => {}
            other => panic!("expected Empty, got {other:?}"),
        }
        assert!(matches!(
            corpus_from_tokens(4, vec![0, 1], 0),
            Err(CorpusError::BadChunk)
        ));
    }

    #[test]
    fn token_corpus_validates_range() {
        assert!(corpus_from_tokens(3, vec![0, 2, 1, 2], 2).is_ok());
        assert!(matches!(
            corpus_from_tokens(2, vec![0, 2], 2),
            Err(CorpusError::TokenOutOfRange { token: 2, m: 2 })
        ));
    }

    #[test]
    fn categorical_corpus_is_deterministic() {
        let qdata = DataDistribution::from_weights(&[3.0, 2.0, 1.0]).expect("qdata");
        let a = corpus_from_categorical(&qdata, 8, 16, 5).expect("corpus");
        let b = corpus_from_categorical(&qdata, 8, 16, 5).expect("corpus");
        let c = corpus_from_categorical(&qdata, 8, 16, 6).expect("corpus");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 8);
        assert!(a.sequences().iter().all(|s| s.len() == 16));
    }

    #[test]
    fn categorical_frequencies_match_probabilities() {
        // Five-sigma binomial check per token at one million draws.
        let probs = [0.5, 0.3, 0.15, 0.05];
        let qdata = DataDistribution::new(probs.to_vec()).expect("qdata");
        let corpus = corpus_from_categorical(&qdata, 1000, 1000, 42).expect("corpus");
        let flat = corpus.flat();
        let n = flat.len() as f64;
        let mut counts = [0u64; 4];
        for &t in &flat {
            counts[t as usize] += 1;
        }
        for (t, &p) in probs.iter().enumerate() {
            let sigma = (p * (1.0 - p) / n).sqrt();
            let err = (counts[t] as f64 / n - p).abs();
            assert!(
                err < 5.0 * sigma,
                "token {t}: frequency off by {err}, sigma {sigma}"
            );
        }
    }

    #[test]
    fn vocab_widening_checks_existing_tokens() {
        let corpus = corpus_from_tokens(3, vec![0, 1, 2, 0], 2).expect("corpus");
        let widened = corpus.clone().with_vocab(4).expect("widen");
        assert_eq!(widened.m(), 4);
        assert!(corpus.with_vocab(2).is_err());
    }
}

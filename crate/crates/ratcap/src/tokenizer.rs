//! Byte pair encoding over a byte-level alphabet.
//!
//! Text is lowercased, whitespace-collapsed and pre-split into words (with a
//! leading-space convention) and punctuation runs before merging, so encode
//! is total on arbitrary input and decode restores normalized text exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Special ids plus the 256 byte tokens; merges get ids above this.
const BASE_VOCAB: usize = 3 + 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("target vocabulary size {target} below minimum {min}")]
    TargetTooSmall { target: usize, min: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bijective token table with fixed special ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

impl Vocabulary {
    fn base() -> Vocabulary {
        let mut id_to_token = vec![Vec::new(); 3];
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], id_to_token.len() as u32);
            id_to_token.push(vec![b]);
        }
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    fn push(&mut self, token: Vec<u8>) -> u32 {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &[u8]) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&[u8]> {
        self.id_to_token.get(id as usize).map(|t| t.as_slice())
    }
}

/// Ordered merge rules; rank order is application order.
#[derive(Debug, Clone, Default)]
pub struct MergeTable {
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    rank: HashMap<(Vec<u8>, Vec<u8>), usize>,
}

impl MergeTable {
    fn push(&mut self, left: Vec<u8>, right: Vec<u8>) {
        self.rank
            .insert((left.clone(), right.clone()), self.merges.len());
        self.merges.push((left, right));
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }
}

/// A complete (possibly still-growing) token id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    /// False when the corpus ran out of pairs before the target size.
    pub target_reached: bool,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub merges: MergeTable,
}

impl Tokenizer {
    /// Greedy most-frequent-pair BPE training. Ties break lexicographically,
    /// so training is deterministic for a given corpus.
    pub fn train<S: AsRef<str>>(
        corpus: &[S],
        target_vocab_size: usize,
    ) -> Result<(Tokenizer, TrainReport), TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        if target_vocab_size < BASE_VOCAB {
            return Err(TokenizerError::TargetTooSmall {
                target: target_vocab_size,
                min: BASE_VOCAB,
            });
        }
        let mut vocab = Vocabulary::base();
        let mut merges = MergeTable::default();

        // Pre-token symbol sequences with multiplicities.
        let mut words: HashMap<Vec<Vec<u8>>, u64> = HashMap::new();
        for text in corpus {
            for pretoken in pretokenize(&normalize(text.as_ref())) {
                let symbols: Vec<Vec<u8>> = pretoken.iter().map(|b| vec![*b]).collect();
                if !symbols.is_empty() {
                    *words.entry(symbols).or_insert(0) += 1;
                }
            }
        }

        while vocab.len() < target_vocab_size {
            let mut pair_counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            // Highest count wins; ties go to the lexicographically smallest
            // pair, independent of hash iteration order.
            let best = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((left, right), _count)) = best else {
                break;
            };
            let mut merged = left.clone();
            merged.extend_from_slice(&right);
            vocab.push(merged.clone());
            merges.push(left.clone(), right.clone());

            let mut next: HashMap<Vec<Vec<u8>>, u64> = HashMap::new();
            for (symbols, count) in words {
                let replaced = merge_pair(&symbols, &left, &right, &merged);
                *next.entry(replaced).or_insert(0) += count;
            }
            words = next;
        }

        let report = TrainReport {
            target_reached: vocab.len() >= target_vocab_size,
            vocab_size: vocab.len(),
        };
        Ok((Tokenizer { vocab, merges }, report))
    }

    /// Encode normalized text, wrap in BOS/EOS and truncate to `max_len`
    /// keeping EOS last.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must fit BOS and EOS");
        let mut ids = vec![BOS];
        for pretoken in pretokenize(&normalize(text)) {
            for symbol in self.apply_merges(&pretoken) {
                ids.push(
                    self.vocab
                        .id_of(&symbol)
                        .expect("byte-level alphabet makes every symbol known"),
                );
            }
        }
        ids.push(EOS);
        if ids.len() > max_len {
            ids.truncate(max_len - 1);
            ids.push(EOS);
        }
        TokenSequence { ids }
    }

    /// Inverse of encode modulo truncation; specials are stripped.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in &seq.ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            let token = self
                .vocab
                .token_of(id)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    vocab: self.vocab.len(),
                })?;
            bytes.extend_from_slice(token);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn apply_merges(&self, pretoken: &[u8]) -> Vec<Vec<u8>> {
        let mut symbols: Vec<Vec<u8>> = pretoken.iter().map(|b| vec![*b]).collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for (i, pair) in symbols.windows(2).enumerate() {
                if let Some(&rank) = self
                    .merges
                    .rank
                    .get(&(pair[0].clone(), pair[1].clone()))
                {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = self.merges.merges[rank].clone();
            let mut merged = left.clone();
            merged.extend_from_slice(&right);
            symbols = merge_pair(&symbols, &left, &right, &merged);
        }
        symbols
    }

    // ── Persistence ──────────────────────────────────────────────────

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ratcap-bpe v1 {}", self.vocab.len());
        for (rank, (left, right)) in self.merges.merges.iter().enumerate() {
            let _ = writeln!(out, "{rank}\t{}\t{}", escape(left), escape(right));
        }
        for (id, token) in self.vocab.id_to_token.iter().enumerate() {
            let label = match id as u32 {
                PAD => "<PAD>".to_string(),
                BOS => "<BOS>".to_string(),
                EOS => "<EOS>".to_string(),
                _ => escape(token),
            };
            let _ = writeln!(out, "{id}\t{label}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Tokenizer, TokenizerError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Malformed("empty file".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some("ratcap-bpe") || parts.next() != Some("v1") {
            return Err(TokenizerError::Malformed(format!(
                "unexpected header: {header}"
            )));
        }
        let vocab_size: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TokenizerError::Malformed("bad vocab size".into()))?;

        let mut merges = MergeTable::default();
        let mut vocab = Vocabulary::base();
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.len() {
                3 => {
                    let left = unescape(fields[1])?;
                    let right = unescape(fields[2])?;
                    let mut merged = left.clone();
                    merged.extend_from_slice(&right);
                    vocab.push(merged);
                    merges.push(left, right);
                }
                2 => {
                    // Token lines just validate against the rebuilt table.
                    let id: u32 = fields[0]
                        .parse()
                        .map_err(|_| TokenizerError::Malformed(format!("bad id: {line}")))?;
                    if id >= 3 && id < BASE_VOCAB as u32 {
                        continue;
                    }
                }
                _ => {
                    return Err(TokenizerError::Malformed(format!(
                        "unparseable line: {line}"
                    )))
                }
            }
        }
        if vocab.len() != vocab_size {
            return Err(TokenizerError::Malformed(format!(
                "header says {vocab_size} tokens, reconstructed {}",
                vocab.len()
            )));
        }
        Ok(Tokenizer { vocab, merges })
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer, TokenizerError> {
        Tokenizer::from_text(&std::fs::read_to_string(path)?)
    }
}

fn merge_pair(
    symbols: &[Vec<u8>],
    left: &[u8],
    right: &[u8],
    merged: &[u8],
) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged.to_vec());
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Lowercase and collapse whitespace runs; recorded as the corpus
/// normalization so retrieval, metrics and training all agree on text form.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        for lc in c.to_lowercase() {
            out.push(lc);
        }
    }
    out
}

/// Split normalized text into merge units: words carry their leading space,
/// punctuation characters stand alone.
fn pretokenize(text: &str) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    let mut space_pending = false;
    for c in text.chars() {
        if c == ' ' {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            space_pending = true;
        } else if c.is_alphanumeric() {
            if current.is_empty() && space_pending {
                current.push(b' ');
                space_pending = false;
            }
            let mut buf = [0u8; 4];
            current.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            let mut piece = Vec::new();
            if space_pending {
                piece.push(b' ');
                space_pending = false;
            }
            let mut buf = [0u8; 4];
            piece.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            out.push(piece);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Graphic ASCII except `<` stays literal; everything else becomes `<0xNN>`.
fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'<' {
            out.push(b as char);
        } else {
            let _ = write!(out, "<0x{b:02X}>");
        }
    }
    out
}

fn unescape(text: &str) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if i + 5 < bytes.len() && &bytes[i + 1..i + 3] == b"0x" && bytes[i + 5] == b'>' {
                let hex = std::str::from_utf8(&bytes[i + 3..i + 5])
                    .ok()
                    .and_then(|h| u8::from_str_radix(h, 16).ok())
                    .ok_or_else(|| TokenizerError::Malformed(format!("bad escape in {text}")))?;
                out.push(hex);
                i += 6;
            } else {
                return Err(TokenizerError::Malformed(format!("bad escape in {text}")));
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn single_symbol_corpus_learns_the_obvious_merge() {
        let (tok, report) = Tokenizer::train(&["aaaa"], BASE_VOCAB + 1).unwrap();
        assert!(report.target_reached);
        assert_eq!(tok.merges.merges[0], (b"a".to_vec(), b"a".to_vec()));
    }

    #[test]
    fn empty_strings_contribute_nothing() {
        let (tok, _) = Tokenizer::train(&["", "ab", ""], BASE_VOCAB + 1).unwrap();
        assert_eq!(tok.merges.len(), 1);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = ["low", "lower", "lowest"];
        // Independent brute-force pair count over byte pairs of each word.
        let mut counts: HashMap<(u8, u8), u32> = HashMap::new();
        for w in &corpus {
            let b = w.as_bytes();
            for i in 0..b.len() - 1 {
                *counts.entry((b[i], b[i + 1])).or_insert(0) += 1;
            }
        }
        let max = counts.values().max().copied().unwrap();
        let mut best: Vec<(u8, u8)> = counts
            .into_iter()
            .filter(|(_, c)| *c == max)
            .map(|(p, _)| p)
            .collect();
        best.sort();

        let (tok, _) = Tokenizer::train(&corpus, BASE_VOCAB + 1).unwrap();
        let (l, r) = &tok.merges.merges[0];
        assert_eq!((l[0], r[0]), best[0]);
    }

    #[test]
    fn empty_string_encodes_to_frame_only() {
        let (tok, _) = Tokenizer::train(&["abc"], BASE_VOCAB).unwrap();
        assert_eq!(tok.encode("", 40).ids, vec![BOS, EOS]);
    }

    #[test]
    fn roundtrip_on_training_corpus() {
        let corpus = [
            "a red ball on the table",
            "two green cubes, stacked",
            "the blue ball near a box",
        ];
        let (tok, _) = Tokenizer::train(&corpus, BASE_VOCAB + 40).unwrap();
        for s in &corpus {
            let seq = tok.encode(s, 64);
            assert_eq!(tok.decode(&seq).unwrap(), normalize(s), "for {s}");
        }
    }

    #[test]
    fn long_input_truncates_to_max_len_with_trailing_eos() {
        let (tok, _) = Tokenizer::train(&["xyz"], BASE_VOCAB).unwrap();
        let long: String = std::iter::repeat("x").take(400).collect();
        let seq = tok.encode(&long, 40);
        assert_eq!(seq.ids.len(), 40);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(seq.ids[0], BOS);
    }

    #[test]
    fn decode_strips_padding() {
        let (tok, _) = Tokenizer::train(&["cat"], BASE_VOCAB + 2).unwrap();
        let mut ids = tok.encode("cat", 40).ids;
        ids.push(PAD);
        ids.push(PAD);
        assert_eq!(tok.decode(&TokenSequence { ids }).unwrap(), "cat");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let (tok, _) = Tokenizer::train(&["cat"], BASE_VOCAB).unwrap();
        let bad = TokenSequence {
            ids: vec![BOS, 9999, EOS],
        };
        assert!(matches!(
            tok.decode(&bad),
            Err(TokenizerError::IdOutOfRange { id: 9999, .. })
        ));
    }

    #[test]
    fn unattainable_target_flags_warning() {
        let (_, report) = Tokenizer::train(&["ab"], BASE_VOCAB + 500).unwrap();
        assert!(!report.target_reached);
        assert!(report.vocab_size < BASE_VOCAB + 500);
    }

    #[test]
    fn encode_is_deterministic_and_ids_in_range() {
        let corpus = ["some words to merge", "more words to merge"];
        let (tok, _) = Tokenizer::train(&corpus, BASE_VOCAB + 30).unwrap();
        let a = tok.encode("words to merge", 40);
        let b = tok.encode("words to merge", 40);
        assert_eq!(a, b);
        assert!(a.ids.iter().all(|&id| (id as usize) < tok.vocab.len()));
    }

    #[test]
    fn roundtrip_random_sentences() {
        let vocab_words = [
            "red", "green", "blue", "ball", "cube", "box", "a", "the", "two", "near", "on",
        ];
        let corpus: Vec<String> = (0..40)
            .map(|i| {
                let mut rng = ChaCha20Rng::seed_from_u64(i);
                (0..6)
                    .map(|_| vocab_words[rng.gen_range(0..vocab_words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let (tok, _) = Tokenizer::train(&corpus, BASE_VOCAB + 60).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(999);
        let mut mismatches = 0;
        for _ in 0..1000 {
            let s: String = (0..rng.gen_range(1..8))
                .map(|_| vocab_words[rng.gen_range(0..vocab_words.len())])
                .collect::<Vec<_>>()
                .join(" ");
            let seq = tok.encode(&s, 64);
            if tok.decode(&seq).unwrap() != normalize(&s) {
                mismatches += 1;
            }
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn serialization_roundtrip_preserves_encoding() {
        let corpus = ["a red ball, near the box!", "two green cubes."];
        let (tok, _) = Tokenizer::train(&corpus, BASE_VOCAB + 25).unwrap();
        let reloaded = Tokenizer::from_text(&tok.to_text()).unwrap();
        for s in &corpus {
            assert_eq!(tok.encode(s, 40), reloaded.encode(s, 40));
        }
        assert_eq!(tok.vocab.len(), reloaded.vocab.len());
    }

    #[test]
    fn punctuation_splits_and_survives_roundtrip() {
        let (tok, _) = Tokenizer::train(&["hello, world!"], BASE_VOCAB + 10).unwrap();
        let seq = tok.encode("Hello,   World!", 40);
        assert_eq!(tok.decode(&seq).unwrap(), "hello, world!");
    }
}

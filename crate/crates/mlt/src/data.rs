//! Corpus ingestion, tokenization, and deterministic batch sampling.
//!
//! The default tokenizer is byte-level (vocabulary 256). Pre-tokenized
//! corpora with larger vocabularies can be supplied as a flat binary file of
//! little-endian u32 ids behind a small header.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &[u8]) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> Vec<u8>;
}

/// Identity tokenizer: one byte, one token.
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        256
    }

    fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        text.iter().map(|&b| b as TokenId).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().map(|&id| id as u8).collect()
    }
}

const TOKEN_FILE_MAGIC: u32 = u32::from_le_bytes(*b"MLTK");
const TOKEN_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TokenStream {
    ids: Vec<TokenId>,
    vocab_size: usize,
}

impl TokenStream {
    pub fn new(ids: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty token stream".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary ({vocab_size})"
            )));
        }
        Ok(TokenStream { ids, vocab_size })
    }

    /// Byte-level tokenization of a raw corpus.
    pub fn tokenize(text: &[u8]) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let tok = ByteTokenizer;
        TokenStream::new(tok.encode(text), tok.vocab_size())
    }

    pub fn with_tokenizer(tok: &dyn Tokenizer, text: &[u8]) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        TokenStream::new(tok.encode(text), tok.vocab_size())
    }

    /// Reads a pre-tokenized corpus: 16-byte header (magic, version,
    /// vocab_size, count as little-endian u32) followed by `count` u32 ids.
    pub fn from_token_file(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut header = [0u8; 16];
        file.read_exact(&mut header)?;
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
        if word(0) != TOKEN_FILE_MAGIC {
            return Err(Error::Input(format!("{}: not a token file", path.display())));
        }
        if word(1) != TOKEN_FILE_VERSION {
            return Err(Error::Input(format!(
                "{}: unsupported token file version {}",
                path.display(),
                word(1)
            )));
        }
        let vocab_size = word(2) as usize;
        let count = word(3) as usize;
        let mut raw = vec![0u8; count * 4];
        file.read_exact(&mut raw)?;
        let ids: Vec<TokenId> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TokenStream::new(ids, vocab_size)
    }

    pub fn write_token_file(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.ids.len() * 4);
        out.extend_from_slice(&TOKEN_FILE_MAGIC.to_le_bytes());
        out.extend_from_slice(&TOKEN_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }
}

/// One micro-batch: `batch` rows of `seq` inputs and their shifted targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn tokens(&self) -> u64 {
        (self.batch * self.seq) as u64
    }
}

/// Deterministic batch sampler: `(seed, corpus, batch, seq)` fully determine
/// the infinite batch sequence. Window offsets are drawn uniformly with
/// replacement. Cloning forks the state, replaying the upcoming draws.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    rng: ChaCha8Rng,
    pub batch: usize,
    pub seq: usize,
    pub seed: u64,
}

impl BatchCursor {
    pub fn new(seed: u64, batch: usize, seq: usize) -> Self {
        BatchCursor {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            seq,
            seed,
        }
    }

    pub fn next_batch(&mut self, stream: &TokenStream) -> Result<Batch> {
        let seq = self.seq;
        if stream.len() <= seq + 1 {
            return Err(Error::Input(format!(
                "stream of {} tokens too short for sequence length {seq}",
                stream.len()
            )));
        }
        let max_offset = stream.len() - seq - 1;
        let mut inputs = Vec::with_capacity(self.batch * seq);
        let mut targets = Vec::with_capacity(self.batch * seq);
        for _ in 0..self.batch {
            let o = self.rng.gen_range(0..=max_offset);
            inputs.extend_from_slice(&stream.ids()[o..o + seq]);
            targets.extend_from_slice(&stream.ids()[o + 1..o + seq + 1]);
        }
        Ok(Batch {
            inputs,
            targets,
            batch: self.batch,
            seq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_tokenizer_identity() {
        let tok = ByteTokenizer;
        assert_eq!(tok.encode(b"AB"), vec![65, 66]);
        assert_eq!(tok.decode(&[65, 66]), b"AB".to_vec());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(TokenStream::tokenize(b""), Err(Error::Input(_))));
    }

    #[test]
    fn batches_are_shifted_windows() {
        let stream = TokenStream::new((0..10).collect(), 16).unwrap();
        let mut cursor = BatchCursor::new(0, 4, 3);
        let b = cursor.next_batch(&stream).unwrap();
        for row in 0..b.batch {
            for t in 0..b.seq {
                // targets are inputs shifted by one; ids are consecutive here
                assert_eq!(b.targets[row * b.seq + t], b.inputs[row * b.seq + t] + 1);
                if t + 1 < b.seq {
                    assert_eq!(b.targets[row * b.seq + t], b.inputs[row * b.seq + t + 1]);
                }
            }
        }
    }

    #[test]
    fn explicit_window_semantics() {
        // offset 2 in [0..10) with seq 3 gives inputs [2,3,4], targets [3,4,5]
        let stream = TokenStream::new((0..10).collect(), 16).unwrap();
        let o = 2;
        let seq = 3;
        assert_eq!(&stream.ids()[o..o + seq], &[2, 3, 4]);
        assert_eq!(&stream.ids()[o + 1..o + seq + 1], &[3, 4, 5]);
    }

    #[test]
    fn cursor_is_deterministic_and_forkable() {
        let stream = TokenStream::tokenize(b"the quick brown fox jumps over the lazy dog").unwrap();
        let mut a = BatchCursor::new(42, 2, 5);
        let mut b = BatchCursor::new(42, 2, 5);
        for _ in 0..10 {
            assert_eq!(a.next_batch(&stream).unwrap(), b.next_batch(&stream).unwrap());
        }
        let mut fork = a.clone();
        for _ in 0..5 {
            assert_eq!(a.next_batch(&stream).unwrap(), fork.next_batch(&stream).unwrap());
        }
        let mut c = BatchCursor::new(43, 2, 5);
        let differs = (0..10).any(|_| {
            c.next_batch(&stream).unwrap() != b.next_batch(&stream).unwrap()
        });
        assert!(differs);
    }

    #[test]
    fn stream_too_short_is_an_error() {
        let stream = TokenStream::new(vec![1, 2, 3, 4], 8).unwrap();
        let mut cursor = BatchCursor::new(0, 1, 3);
        assert!(matches!(cursor.next_batch(&stream), Err(Error::Input(_))));
        let mut ok = BatchCursor::new(0, 1, 2);
        ok.next_batch(&stream).unwrap();
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tok");
        let stream = TokenStream::new(vec![7, 0, 50256, 123], 50257).unwrap();
        stream.write_token_file(&path).unwrap();
        let back = TokenStream::from_token_file(&path).unwrap();
        assert_eq!(back.ids(), stream.ids());
        assert_eq!(back.vocab_size(), 50257);
    }

    #[test]
    fn token_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tok");
        std::fs::write(&path, b"not a token file at all").unwrap();
        assert!(TokenStream::from_token_file(&path).is_err());
    }

    #[test]
    fn reference_token_budget() {
        // 32 sequences x 256 tokens x 32 accumulated micro-batches
        let per_micro = 32u64 * 256;
        assert_eq!(per_micro * 32, 262_144);
    }
}

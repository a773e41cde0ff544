//! Token corpora and random window batches.
//!
//! Corpus files start with the magic `XTC1`, followed by the vocabulary size
//! as a little-endian `u32`, the token count as a little-endian `u64` and the
//! token ids as little-endian `u32`.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::binio::{write_atomic, Reader};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"XTC1";

/// Token ids of the binary counting corpus.
pub const ZERO: u32 = 0;
pub const ONE: u32 = 1;
pub const SEMICOLON: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u32>,
    vocab_size: usize,
    source: String,
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, source: impl Into<String>) -> Result<Self> {
        if let Some((offset, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id: id.into(),
                offset,
                vocab_size,
            });
        }
        Ok(Self {
            tokens,
            vocab_size,
            source: source.into(),
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Fails unless at least one window of `context_len + 1` tokens exists.
    pub fn check_window(&self, context_len: usize) -> Result<()> {
        if self.len() < context_len + 1 {
            return Err(Error::CorpusTooShort {
                len: self.len(),
                needed: context_len + 1,
            });
        }
        Ok(())
    }
}

/// Every integer in `[0, 2^n_bits)` in ascending order, written in binary
/// without leading zeros and terminated by `;`.
pub fn gen_binary_corpus(n_bits: u32) -> Result<Corpus> {
    if n_bits == 0 || n_bits > 32 {
        return Err(Error::Config(format!(
            "n_bits must be in 1..=32, got {n_bits}"
        )));
    }
    let count = 1u64 << n_bits;
    let mut tokens = Vec::new();
    for n in 0..count {
        let width = (64 - n.leading_zeros()).max(1);
        for bit in (0..width).rev() {
            tokens.push(((n >> bit) & 1) as u32);
        }
        tokens.push(SEMICOLON);
    }
    Corpus::new(tokens, 3, format!("binary counting 0..2^{n_bits}"))
}

/// Renders binary-corpus ids as text (`0`, `1`, `;`).
pub fn binary_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            ZERO => '0',
            ONE => '1',
            SEMICOLON => ';',
            _ => '?',
        })
        .collect()
}

/// Parses `0`, `1` and `;` into binary-corpus ids, skipping whitespace.
pub fn binary_tokens(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '0' => Ok(ZERO),
            '1' => Ok(ONE),
            ';' => Ok(SEMICOLON),
            other => Err(Error::Config(format!(
                "binary text may only contain 0, 1 and ;, found {other:?}"
            ))),
        })
        .collect()
}

pub fn encode_token_stream(corpus: &Corpus, w: &mut dyn Write) -> Result<()> {
    let vocab = u32::try_from(corpus.vocab_size)
        .map_err(|_| Error::Unsupported(format!("vocabulary of {} ids", corpus.vocab_size)))?;
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&vocab.to_le_bytes())?;
    w.write_all(&(corpus.len() as u64).to_le_bytes())?;
    for t in &corpus.tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_token_stream(corpus: &Corpus, path: &Path) -> Result<()> {
    write_atomic(path, |w| encode_token_stream(corpus, w))
}

/// Loads a corpus file, requiring its header vocabulary to equal
/// `declared_vocab` and every id to be below it.
pub fn load_token_stream(path: &Path, declared_vocab: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    decode_token_stream(path, &bytes, declared_vocab)
}

pub fn decode_token_stream(path: &Path, bytes: &[u8], declared_vocab: usize) -> Result<Corpus> {
    let mut r = Reader::new(path, bytes);
    r.magic(CORPUS_MAGIC)?;
    let vocab = r.u32("vocabulary size")? as usize;
    if vocab != declared_vocab {
        return Err(Error::VocabMismatch {
            path: r.path(),
            expected: declared_vocab,
            found: vocab,
        });
    }
    let count = r.count("token count")?;
    let need = count
        .checked_mul(4)
        .ok_or_else(|| r.malformed(format!("token count {count} is too large")))?;
    let raw = r.take(need, "token ids")?;
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    let tokens: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    // one input and one target at minimum
    if tokens.len() < 2 {
        return Err(Error::CorpusTooShort {
            len: tokens.len(),
            needed: 2,
        });
    }
    Corpus::new(tokens, vocab, path.display().to_string())
}

/// `batch` windows of `seq_len` inputs and their next-token targets, stored
/// sequence-major: element `(b, i)` lives at `b * seq_len + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub seq_len: usize,
    pub batch: usize,
    pub starts: Vec<usize>,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn input(&self, b: usize, i: usize) -> usize {
        self.inputs[b * self.seq_len + i]
    }

    pub fn target(&self, b: usize, i: usize) -> usize {
        self.targets[b * self.seq_len + i]
    }

    /// Inputs and targets reordered time-major (`i * batch + b`).
    pub fn time_major(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.seq_len * self.batch;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..self.seq_len {
            for b in 0..self.batch {
                inputs.push(self.input(b, i));
                targets.push(self.target(b, i));
            }
        }
        (inputs, targets)
    }
}

/// Draws window starts uniformly from `[0, len - seq_len - 1]`.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    seq_len: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Batch> {
    if seq_len == 0 {
        return Err(Error::EmptySequence);
    }
    corpus.check_window(seq_len)?;
    let last = corpus.len() - seq_len - 1;
    let tokens = corpus.tokens();
    let mut out = Batch {
        seq_len,
        batch,
        starts: Vec::with_capacity(batch),
        inputs: Vec::with_capacity(batch * seq_len),
        targets: Vec::with_capacity(batch * seq_len),
    };
    for _ in 0..batch {
        let s = rng.random_range(0..=last);
        out.starts.push(s);
        out.inputs
            .extend(tokens[s..s + seq_len].iter().map(|&t| t as usize));
        out.targets
            .extend(tokens[s + 1..s + seq_len + 1].iter().map(|&t| t as usize));
    }
    Ok(out)
}

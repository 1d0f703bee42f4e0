//! Token-level embedding construction, deterministic toy encoders, and the
//! binary embedding file format.
//!
//! A query embedding is the row-wise concatenation of image tokens and text
//! tokens; documents are plain token matrices. The toy encoders stand in for
//! a real multimodal encoder: each token row is a seeded hash-derived unit
//! vector, so equal inputs produce bit-identical embeddings on every
//! platform.
//!
//! # Embedding file layout (version 1, little-endian)
//!
//! ```text
//! magic      4 bytes  "LIRE"
//! version    u16      1
//! dim        u32      columns per token row
//! sequences  u32      number of sequences
//! per sequence:
//!   id_len   u32      byte length of the UTF-8 id
//!   id       id_len bytes
//!   tokens   u32      number of token rows
//!   values   tokens * dim * f32, row-major
//! ```
//!
//! Values are stored in single precision and widened to `f64` on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::CountingReader;
use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"LIRE";
pub const EMBEDDING_VERSION: u16 = 1;

// Guards against absurd allocations when reading corrupt files.
const MAX_ID_BYTES: u32 = 1 << 20;
const MAX_VALUES_PER_SEQUENCE: u64 = 1 << 28;

/// Token-level query embedding: image token rows followed by text token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub tokens: Mat,
    pub image_token_count: usize,
    pub text_token_count: usize,
    pub query_id: String,
}

/// Token-level document embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentEmbedding {
    pub tokens: Mat,
    pub doc_id: String,
}

impl DocumentEmbedding {
    pub fn new(doc_id: impl Into<String>, tokens: Mat) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Contract("document embedding has no tokens".into()));
        }
        Ok(Self {
            tokens,
            doc_id: doc_id.into(),
        })
    }
}

impl QueryEmbedding {
    /// Ingest a whole token matrix when the image/text split is unknown
    /// (e.g. sequences loaded from an embedding file). All rows are treated
    /// as text tokens.
    pub fn from_tokens(query_id: impl Into<String>, tokens: Mat) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Contract("query embedding has no tokens".into()));
        }
        Ok(Self {
            text_token_count: tokens.rows(),
            image_token_count: 0,
            tokens,
            query_id: query_id.into(),
        })
    }
}

/// Concatenate image tokens and text tokens into a [`QueryEmbedding`].
pub fn build_query_embedding(
    image_tokens: &Mat,
    text_tokens: &Mat,
    query_id: impl Into<String>,
) -> Result<QueryEmbedding> {
    if image_tokens.rows() == 0 && text_tokens.rows() == 0 {
        return Err(Error::Contract("query has no tokens at all".into()));
    }
    if image_tokens.rows() > 0
        && text_tokens.rows() > 0
        && image_tokens.cols() != text_tokens.cols()
    {
        return Err(Error::Dimension(format!(
            "image tokens have {} columns, text tokens have {}",
            image_tokens.cols(),
            text_tokens.cols()
        )));
    }
    let tokens = Mat::vstack(image_tokens, text_tokens)?;
    Ok(QueryEmbedding {
        tokens,
        image_token_count: image_tokens.rows(),
        text_token_count: text_tokens.rows(),
        query_id: query_id.into(),
    })
}

/// Configuration for the deterministic toy encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    /// Embedding dimension `h`; must be at least 2.
    pub dim: usize,
    /// Token rows emitted per word (images emit 4x this).
    #[serde(default = "default_tokens_per_word")]
    pub tokens_per_word: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra hashing salt, independent of the seed.
    #[serde(default)]
    pub salt: u64,
}

fn default_tokens_per_word() -> usize {
    1
}

impl ToyEncoderConfig {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let config = Self {
            dim,
            tokens_per_word: 1,
            seed,
            salt: 0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "toy encoder dimension must be >= 2, got {}",
                self.dim
            )));
        }
        if self.tokens_per_word == 0 {
            return Err(Error::Config("tokens_per_word must be >= 1".into()));
        }
        Ok(())
    }
}

/// FNV-1a over domain-separated inputs; the per-token seed for row vectors.
fn token_hash(domain: &str, unit: &str, rep: u64, config: &ToyEncoderConfig) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = FNV_OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
    };
    eat(&config.seed.to_le_bytes());
    eat(&config.salt.to_le_bytes());
    eat(domain.as_bytes());
    eat(&[0]);
    eat(unit.as_bytes());
    eat(&[0]);
    eat(&rep.to_le_bytes());
    hash
}

fn unit_row(hash: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash);
    let mut row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dot(&row, &row).sqrt();
    if norm == 0.0 {
        row[0] = 1.0;
    } else {
        for v in &mut row {
            *v /= norm;
        }
    }
    row
}

/// Encode text as one unit token row per whitespace-separated word
/// (times `tokens_per_word`). Rows depend only on the word itself, not its
/// position, so reordering words permutes rows without changing them.
pub fn toy_encode_text(text: &str, config: &ToyEncoderConfig) -> Result<Mat> {
    config.validate()?;
    let mut rows = Vec::new();
    for word in text.split_whitespace() {
        for rep in 0..config.tokens_per_word {
            rows.push(unit_row(token_hash("txt", word, rep as u64, config), config.dim));
        }
    }
    if rows.is_empty() {
        return Ok(Mat::zeros(0, config.dim));
    }
    Mat::from_rows(&rows)
}

/// Encode an image descriptor as a fixed block of `4 * tokens_per_word`
/// unit token rows. An empty descriptor still yields the full block and
/// acts as a blank-image sentinel.
pub fn toy_encode_image(descriptor: &str, config: &ToyEncoderConfig) -> Result<Mat> {
    config.validate()?;
    let count = 4 * config.tokens_per_word;
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|i| unit_row(token_hash("img", descriptor, i as u64, config), config.dim))
        .collect();
    Mat::from_rows(&rows)
}

/// One line of the knowledge-base JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbDocument {
    pub doc_id: String,
    pub text: String,
}

/// Load the knowledge base: JSONL, one `{"doc_id": ..., "text": ...}` per line.
pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<Vec<KbDocument>> {
    let raw = std::fs::read_to_string(path.as_ref())?;
    let mut docs = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: KbDocument = serde_json::from_str(line).map_err(|e| {
            Error::Config(format!(
                "{}:{}: invalid knowledge-base line: {e}",
                path.as_ref().display(),
                lineno + 1
            ))
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Write sequences of `(id, token matrix)` to an embedding file.
///
/// Every non-empty matrix must have exactly `dim` columns. Values are
/// truncated to single precision.
pub fn write_embedding_file(
    path: impl AsRef<Path>,
    dim: usize,
    sequences: &[(String, Mat)],
) -> Result<()> {
    for (id, tokens) in sequences {
        if tokens.rows() > 0 && tokens.cols() != dim {
            return Err(Error::Dimension(format!(
                "sequence {id:?} has {} columns, file dimension is {dim}",
                tokens.cols()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(sequences.len() as u32).to_le_bytes())?;
    for (id, tokens) in sequences {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&(tokens.rows() as u32).to_le_bytes())?;
        for &v in tokens.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an embedding file back into `(dim, sequences)` with values widened
/// to `f64`.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(usize, Vec<(String, Mat)>)> {
    let mut r = CountingReader::new(BufReader::new(File::open(path.as_ref())?));
    r.expect_magic(EMBEDDING_MAGIC)?;
    r.expect_version(EMBEDDING_VERSION)?;
    let dim = r.read_u32()? as usize;
    let seq_count = r.read_u32()?;
    let mut sequences = Vec::with_capacity(seq_count as usize);
    for _ in 0..seq_count {
        let id = r.read_string(MAX_ID_BYTES)?;
        let token_count = r.read_u32()?;
        let value_count = u64::from(token_count) * dim as u64;
        if value_count > MAX_VALUES_PER_SEQUENCE {
            return Err(r.fail(format!(
                "implausible payload: {token_count} tokens of dimension {dim}"
            )));
        }
        let data = r.read_f32_values(value_count as usize)?;
        sequences.push((id, Mat::new(token_count as usize, dim, data)?));
    }
    r.expect_eof()?;
    Ok((dim, sequences))
}

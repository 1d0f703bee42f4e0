//! Late-interaction relevance scoring and the trainable compression head.
//!
//! Relevance between a query and a document is the MaxSim score: for every
//! query token take the highest dot product against any document token, then
//! sum those maxima. Both sides are first projected into a lower-dimensional
//! space by a two-layer perceptron (the compression head) whose rows are
//! L2-normalized by default, so token similarities are cosines and scores
//! are bounded by the query token count.
//!
//! Training uses the in-batch contrastive objective: each query's positive
//! document is scored against the positives of every other query in the
//! batch, and the loss is the summed negative log-softmax of the positive
//! score. Gradients are exact, with each MaxSim max routed entirely to the
//! argmax document token (ties to the lowest index), and are checked against
//! the central-difference oracle in `numerics`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::CountingReader;
use crate::embed::{DocumentEmbedding, QueryEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, l2_normalize_rows, mlp_backward, mlp_forward, GradBundle, Mat, MlpParams,
};

pub const HEAD_MAGIC: &[u8; 4] = b"LIRH";
pub const HEAD_VERSION: u16 = 1;

/// The trainable projection from encoder space `h` to retrieval space `h'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionHead {
    pub params: MlpParams,
    pub normalize_output: bool,
}

impl CompressionHead {
    /// Wrap existing parameters; the head must strictly reduce dimension.
    pub fn new(params: MlpParams, normalize_output: bool) -> Result<Self> {
        if params.output_dim() >= params.input_dim() {
            return Err(Error::Dimension(format!(
                "compression head must reduce dimension: {} -> {}",
                params.input_dim(),
                params.output_dim()
            )));
        }
        Ok(Self {
            params,
            normalize_output,
        })
    }

    /// Seeded random initialization with explicit dimensions.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        normalize_output: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale1 = (1.0 / input_dim as f64).sqrt();
        let w1 = Mat::new(
            input_dim,
            hidden_dim,
            (0..input_dim * hidden_dim)
                .map(|_| rng.gen_range(-scale1..scale1))
                .collect(),
        )?;
        let scale2 = (1.0 / hidden_dim as f64).sqrt();
        let w2 = Mat::new(
            hidden_dim,
            output_dim,
            (0..hidden_dim * output_dim)
                .map(|_| rng.gen_range(-scale2..scale2))
                .collect(),
        )?;
        let params = MlpParams::new(w1, vec![0.0; hidden_dim], w2, vec![0.0; output_dim])?;
        Self::new(params, normalize_output)
    }

    /// Initialization with the default widths: hidden `m = h`,
    /// output `h' = max(1, h/2)`.
    pub fn with_default_dims(input_dim: usize, seed: u64) -> Result<Self> {
        Self::init(input_dim, input_dim, (input_dim / 2).max(1), true, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.params.output_dim()
    }
}

/// A scored (query, document) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub value: f64,
    pub query_id: String,
    pub doc_id: String,
}

/// Project a token matrix through the head; rows are L2-normalized when the
/// head's `normalize_output` flag is set.
pub fn compress(head: &CompressionHead, emb: &Mat) -> Result<Mat> {
    if emb.rows() == 0 {
        return Ok(Mat::zeros(0, head.output_dim()));
    }
    let (y, _) = mlp_forward(&head.params, emb)?;
    Ok(if head.normalize_output {
        l2_normalize_rows(&y)
    } else {
        y
    })
}

/// MaxSim relevance: sum over query tokens of the maximum dot product
/// against any document token.
///
/// Empty matrices are rejected: a zero-score sentinel for empty documents
/// would silently outrank real documents with negative scores.
pub fn max_sim(query: &Mat, doc: &Mat) -> Result<f64> {
    if query.rows() == 0 {
        return Err(Error::Contract("max_sim: empty query".into()));
    }
    if doc.rows() == 0 {
        return Err(Error::Contract("max_sim: empty document".into()));
    }
    if query.cols() != doc.cols() {
        return Err(Error::Dimension(format!(
            "max_sim: query dim {} vs document dim {}",
            query.cols(),
            doc.cols()
        )));
    }
    let mut total = 0.0;
    for i in 0..query.rows() {
        let q = query.row(i);
        let mut best = f64::NEG_INFINITY;
        for j in 0..doc.rows() {
            let s = dot(q, doc.row(j));
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    Ok(total)
}

/// Per-query contrastive loss: negative log-softmax of the positive score
/// among all candidate scores, computed with max-subtraction.
pub fn contrastive_loss(scores: &[f64], positive: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("contrastive_loss: no candidates".into()));
    }
    if positive >= scores.len() {
        return Err(Error::Contract(format!(
            "contrastive_loss: positive index {} out of {} candidates",
            positive,
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("contrastive_loss: non-finite score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[positive])
}

/// A batch of queries with their aligned positive documents; the positives
/// of the other queries serve as each query's negatives.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    queries: Vec<QueryEmbedding>,
    positives: Vec<DocumentEmbedding>,
}

impl TrainBatch {
    pub fn new(queries: Vec<QueryEmbedding>, positives: Vec<DocumentEmbedding>) -> Result<Self> {
        if queries.len() != positives.len() {
            return Err(Error::Contract(format!(
                "batch has {} queries but {} positives",
                queries.len(),
                positives.len()
            )));
        }
        if queries.len() < 2 {
            return Err(Error::Contract(
                "in-batch negatives require at least 2 queries".into(),
            ));
        }
        let mut seen = HashSet::new();
        for doc in &positives {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(Error::Contract(format!(
                    "duplicate positive doc_id {:?} in batch",
                    doc.doc_id
                )));
            }
        }
        Ok(Self { queries, positives })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[QueryEmbedding] {
        &self.queries
    }

    pub fn positives(&self) -> &[DocumentEmbedding] {
        &self.positives
    }
}

struct CompressedWithCache {
    raw: Mat,
    normalized: Mat,
    cache: crate::numerics::MlpCache,
}

fn compress_with_cache(head: &CompressionHead, emb: &Mat) -> Result<CompressedWithCache> {
    let (raw, cache) = mlp_forward(&head.params, emb)?;
    let normalized = if head.normalize_output {
        l2_normalize_rows(&raw)
    } else {
        raw.clone()
    };
    Ok(CompressedWithCache {
        raw,
        normalized,
        cache,
    })
}

/// Gradient of row normalization: for `y = v/|v|`,
/// `dv = (dy - y*(y . dy)) / |v|`. Zero rows pass the gradient through.
fn normalize_backward(raw: &Mat, normalized: &Mat, d_normalized: &Mat) -> Mat {
    let mut out = Vec::with_capacity(raw.data().len());
    for r in 0..raw.rows() {
        let v = raw.row(r);
        let y = normalized.row(r);
        let dy = d_normalized.row(r);
        let norm = dot(v, v).sqrt();
        if norm == 0.0 {
            out.extend_from_slice(dy);
        } else {
            let proj = dot(y, dy);
            out.extend(dy.iter().zip(y).map(|(g, yi)| (g - yi * proj) / norm));
        }
    }
    Mat::from_parts(raw.rows(), raw.cols(), out)
}

/// Forward-only evaluation of the batch objective: the sum over queries of
/// [`contrastive_loss`] with the other queries' positives as negatives.
pub fn batch_contrastive_loss(batch: &TrainBatch, head: &CompressionHead) -> Result<f64> {
    let compressed_queries: Vec<Mat> = batch
        .queries
        .iter()
        .map(|q| compress(head, &q.tokens))
        .collect::<Result<_>>()?;
    let compressed_docs: Vec<Mat> = batch
        .positives
        .iter()
        .map(|d| compress(head, &d.tokens))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (qi, q) in compressed_queries.iter().enumerate() {
        let scores: Vec<f64> = compressed_docs
            .iter()
            .map(|d| max_sim(q, d))
            .collect::<Result<_>>()?;
        total += contrastive_loss(&scores, qi)?;
    }
    Ok(total)
}

/// Exact gradient of [`batch_contrastive_loss`] with respect to the head
/// parameters, with each MaxSim max routed to the argmax document token
/// (ties broken toward the lowest index).
pub fn contrastive_grad(batch: &TrainBatch, head: &CompressionHead) -> Result<(f64, GradBundle)> {
    let n = batch.len();
    let queries: Vec<CompressedWithCache> = batch
        .queries
        .iter()
        .map(|q| compress_with_cache(head, &q.tokens))
        .collect::<Result<_>>()?;
    let docs: Vec<CompressedWithCache> = batch
        .positives
        .iter()
        .map(|d| compress_with_cache(head, &d.tokens))
        .collect::<Result<_>>()?;

    // Score every (query, candidate) pair, remembering which document token
    // won each query token's max.
    let mut scores = vec![vec![0.0; n]; n];
    let mut argmax = vec![vec![Vec::new(); n]; n];
    for (qi, q) in queries.iter().enumerate() {
        for (di, d) in docs.iter().enumerate() {
            let qs = &q.normalized;
            let ds = &d.normalized;
            if ds.rows() == 0 {
                return Err(Error::Contract("empty document in batch".into()));
            }
            let mut total = 0.0;
            let mut winners = Vec::with_capacity(qs.rows());
            for i in 0..qs.rows() {
                let row = qs.row(i);
                let mut best = f64::NEG_INFINITY;
                let mut best_j = 0;
                for j in 0..ds.rows() {
                    let s = dot(row, ds.row(j));
                    if s > best {
                        best = s;
                        best_j = j;
                    }
                }
                total += best;
                winners.push(best_j);
            }
            scores[qi][di] = total;
            argmax[qi][di] = winners;
        }
    }

    // Softmax gradient per query: dL/dr[q][d] = p[q][d] - [d == q].
    let mut total_loss = 0.0;
    let mut d_queries: Vec<Mat> = queries
        .iter()
        .map(|q| Mat::zeros(q.normalized.rows(), q.normalized.cols()))
        .collect();
    let mut d_docs: Vec<Mat> = docs
        .iter()
        .map(|d| Mat::zeros(d.normalized.rows(), d.normalized.cols()))
        .collect();
    for qi in 0..n {
        total_loss += contrastive_loss(&scores[qi], qi)?;
        let max = scores[qi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores[qi].iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for di in 0..n {
            let g = exps[di] / denom - if di == qi { 1.0 } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            let q_norm = &queries[qi].normalized;
            let d_norm = &docs[di].normalized;
            let dims = q_norm.cols();
            for i in 0..q_norm.rows() {
                let j = argmax[qi][di][i];
                for c in 0..dims {
                    let dq = d_queries[qi].get(i, c) + g * d_norm.get(j, c);
                    d_queries[qi].set(i, c, dq);
                    let dd = d_docs[di].get(j, c) + g * q_norm.get(i, c);
                    d_docs[di].set(j, c, dd);
                }
            }
        }
    }

    // Back through normalization and the shared head for every matrix.
    let mut grads = GradBundle::zeros_like(&head.params);
    let all = queries.iter().zip(d_queries).chain(docs.iter().zip(d_docs));
    for (compressed, d_normalized) in all {
        let dy = if head.normalize_output {
            normalize_backward(&compressed.raw, &compressed.normalized, &d_normalized)
        } else {
            d_normalized
        };
        let (_, bundle) = mlp_backward(&head.params, &compressed.cache, &dy)?;
        grads.add_assign(&bundle);
    }
    Ok((total_loss, grads))
}

/// Training hyperparameters for [`train_head`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Hidden width; defaults to the input dimension.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    /// Output dimension; defaults to half the input dimension.
    #[serde(default)]
    pub output_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub normalize_output: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            learning_rate,
            seed,
            hidden_dim: None,
            output_dim: None,
            normalize_output: true,
        }
    }
}

const MAX_BATCH_DRAWS: usize = 100;

fn draw_batch(
    dataset: &[(QueryEmbedding, DocumentEmbedding)],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    for _ in 0..MAX_BATCH_DRAWS {
        let picked = rand::seq::index::sample(rng, dataset.len(), batch_size);
        let mut seen = HashSet::new();
        if picked
            .iter()
            .all(|i| seen.insert(dataset[i].1.doc_id.as_str()))
        {
            let queries = picked.iter().map(|i| dataset[i].0.clone()).collect();
            let positives = picked.iter().map(|i| dataset[i].1.clone()).collect();
            return TrainBatch::new(queries, positives);
        }
    }
    Err(Error::Config(format!(
        "could not draw a batch of {batch_size} examples with distinct positive doc_ids"
    )))
}

/// Train a fresh compression head with plain SGD over in-batch contrastive
/// batches.
///
/// Deterministic given the seed. Returns the head (rounded to checkpoint
/// precision, so saving and reloading it is lossless) and the per-step mean
/// loss per query.
pub fn train_head(
    dataset: &[(QueryEmbedding, DocumentEmbedding)],
    config: &TrainConfig,
) -> Result<(CompressionHead, Vec<f64>)> {
    if config.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    if dataset.len() < config.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} examples, need at least batch_size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let input_dim = dataset[0].0.tokens.cols();
    let hidden_dim = config.hidden_dim.unwrap_or(input_dim);
    let output_dim = config.output_dim.unwrap_or((input_dim / 2).max(1));
    let mut head = CompressionHead::init(
        input_dim,
        hidden_dim,
        output_dim,
        config.normalize_output,
        config.seed,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut trace = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = draw_batch(dataset, config.batch_size, &mut rng)?;
        let (loss, grads) = contrastive_grad(&batch, &head)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss became {loss}"),
            });
        }
        trace.push(loss / batch.len() as f64);
        head.params.sgd_step(&grads, config.learning_rate)?;
    }
    head.params = head.params.round_to_f32();
    Ok((head, trace))
}

/// Fraction of queries whose own positive wins the in-batch argmax by
/// MaxSim, evaluated over consecutive chunks of `batch_size`.
pub fn in_batch_accuracy(
    dataset: &[(QueryEmbedding, DocumentEmbedding)],
    head: &CompressionHead,
    batch_size: usize,
) -> Result<f64> {
    if batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in dataset.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let docs: Vec<Mat> = chunk
            .iter()
            .map(|(_, d)| compress(head, &d.tokens))
            .collect::<Result<_>>()?;
        for (q, positive) in chunk {
            let compressed = compress(head, &q.tokens)?;
            let mut best = f64::NEG_INFINITY;
            let mut best_di = 0;
            for (di, d) in docs.iter().enumerate() {
                let s = max_sim(&compressed, d)?;
                if s > best {
                    best = s;
                    best_di = di;
                }
            }
            if chunk[best_di].1.doc_id == positive.doc_id {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config("no chunks of at least 2 examples".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Write a head checkpoint (magic `LIRH`, single-precision parameters).
pub fn save_head(path: impl AsRef<Path>, head: &CompressionHead) -> Result<()> {
    let p = &head.params;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(HEAD_MAGIC)?;
    w.write_all(&HEAD_VERSION.to_le_bytes())?;
    w.write_all(&(p.input_dim() as u32).to_le_bytes())?;
    w.write_all(&(p.hidden_dim() as u32).to_le_bytes())?;
    w.write_all(&(p.output_dim() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(head.normalize_output)])?;
    for &v in p
        .w1
        .data()
        .iter()
        .chain(&p.b1)
        .chain(p.w2.data())
        .chain(&p.b2)
    {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load a head checkpoint written by [`save_head`].
pub fn load_head(path: impl AsRef<Path>) -> Result<CompressionHead> {
    let mut r = CountingReader::new(BufReader::new(File::open(path.as_ref())?));
    r.expect_magic(HEAD_MAGIC)?;
    r.expect_version(HEAD_VERSION)?;
    let h = r.read_u32()? as usize;
    let m = r.read_u32()? as usize;
    let out = r.read_u32()? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let normalize_output = flag[0] != 0;
    let w1 = Mat::new(h, m, r.read_f32_values(h * m)?)?;
    let b1 = r.read_f32_values(m)?;
    let w2 = Mat::new(m, out, r.read_f32_values(m * out)?)?;
    let b2 = r.read_f32_values(out)?;
    r.expect_eof()?;
    CompressionHead::new(MlpParams::new(w1, b1, w2, b2)?, normalize_output)
}

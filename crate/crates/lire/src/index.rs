//! Centroid-based token index for accelerated late-interaction retrieval.
//!
//! Document tokens are clustered with k-means (k-means++ seeding, fixed
//! iteration count). A query probes the `n_probe` nearest centroids per
//! query token, unions the documents owning any token in those cells, and
//! re-scores every candidate with exact MaxSim against the full stored
//! embeddings — the centroids only generate candidates, never scores. With
//! `n_probe` equal to the centroid count the result is identical to an
//! exhaustive scan.
//!
//! Stored token values and centroids are rounded to single precision at
//! build time, matching the on-disk layout, so a persistence roundtrip is
//! bit-exact and retrieval results are identical before and after.
//!
//! # Index directory layout (version 1, little-endian)
//!
//! ```text
//! meta.json       version, dimension, counts, config echo
//! centroids.bin   magic "LIRC", version u16, k u32, dim u32, k*dim f32
//! postings.bin    magic "LIRP", version u16, k u32,
//!                 per centroid: count u32, count * (doc u32, row u32)
//! docs.bin        magic "LIRD", version u16, doc_count u32, dim u32,
//!                 per doc: id_len u32, id bytes, tokens u32, tokens*dim f32
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::CountingReader;
use crate::embed::DocumentEmbedding;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::retrieval::{max_sim, RelevanceScore};

pub const CENTROIDS_MAGIC: &[u8; 4] = b"LIRC";
pub const POSTINGS_MAGIC: &[u8; 4] = b"LIRP";
pub const DOCS_MAGIC: &[u8; 4] = b"LIRD";
pub const INDEX_VERSION: u16 = 1;

const MAX_ID_BYTES: u32 = 1 << 20;
const MAX_COUNT: u32 = 1 << 26;

/// Build-time parameters for [`build_index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Number of centroids `K_c`.
    pub centroids: usize,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    /// Centroids probed per query token.
    #[serde(default = "default_n_probe")]
    pub n_probe: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_kmeans_iters() -> usize {
    10
}

fn default_n_probe() -> usize {
    4
}

impl IndexConfig {
    pub fn new(centroids: usize, seed: u64) -> Self {
        Self {
            centroids,
            kmeans_iters: default_kmeans_iters(),
            n_probe: default_n_probe().min(centroids),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids == 0 {
            return Err(Error::Config("centroid count must be at least 1".into()));
        }
        if self.n_probe == 0 || self.n_probe > self.centroids {
            return Err(Error::Config(format!(
                "n_probe must be in 1..={}, got {}",
                self.centroids, self.n_probe
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Posting {
    doc: u32,
    row: u32,
}

/// Immutable centroid index over compressed document embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidIndex {
    dim: usize,
    centroids: Mat,
    postings: Vec<Vec<Posting>>,
    docs: Vec<DocumentEmbedding>,
    config: IndexConfig,
}

impl CentroidIndex {
    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Number of indexed documents.
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    /// Retrieval-space dimension (0 for an empty index).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn centroids(&self) -> &Mat {
        &self.centroids
    }

    /// Stored documents, sorted by doc_id.
    pub fn docs(&self) -> &[DocumentEmbedding] {
        &self.docs
    }

    fn token_count(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.rows()).sum()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties resolve to the lowest index.
fn nearest_centroid(token: &[f64], centroids: &Mat) -> usize {
    let mut best = f64::INFINITY;
    let mut best_c = 0;
    for c in 0..centroids.rows() {
        let d2 = squared_distance(token, centroids.row(c));
        if d2 < best {
            best = d2;
            best_c = c;
        }
    }
    best_c
}

/// k-means++ seeding followed by a fixed number of Lloyd iterations.
/// Empty clusters keep their previous position. Deterministic given the
/// seed.
fn kmeans(tokens: &[&[f64]], dim: usize, k: usize, iters: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroid_rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);

    let first = rng.gen_range(0..tokens.len());
    centroid_rows.push(tokens[first].to_vec());
    chosen.push(first);
    let mut best_d2: Vec<f64> = tokens
        .iter()
        .map(|t| squared_distance(t, tokens[first]))
        .collect();
    while centroid_rows.len() < k {
        let total: f64 = best_d2.iter().sum();
        let next = if total > 0.0 {
            // Sample proportionally to squared distance from the chosen set.
            let mut target = rng.gen_range(0.0..total);
            let mut picked = tokens.len() - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                if target < w {
                    picked = i;
                    break;
                }
                target -= w;
            }
            picked
        } else {
            // Every token coincides with a centroid; duplicate points
            // deterministically.
            (0..tokens.len())
                .find(|i| !chosen.contains(i))
                .unwrap_or(0)
        };
        chosen.push(next);
        centroid_rows.push(tokens[next].to_vec());
        for (i, t) in tokens.iter().enumerate() {
            let d2 = squared_distance(t, tokens[next]);
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }

    let mut centroids = Mat::from_rows(&centroid_rows).expect("seeded rows share dim");
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for t in tokens {
            let c = nearest_centroid(t, &centroids);
            counts[c] += 1;
            for (j, v) in t.iter().enumerate() {
                sums[c * dim + j] += v;
            }
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                next.set(c, j, sums[c * dim + j] / counts[c] as f64);
            }
        }
        if next == centroids {
            break;
        }
        centroids = next;
    }
    centroids
}

/// Cluster all document tokens and build the inverted postings.
///
/// Documents are stored sorted by doc_id with token values rounded to
/// single precision (the on-disk precision). An empty corpus yields a
/// valid empty index.
pub fn build_index(docs: &[DocumentEmbedding], config: &IndexConfig) -> Result<CentroidIndex> {
    config.validate()?;
    if docs.is_empty() {
        return Ok(CentroidIndex {
            dim: 0,
            centroids: Mat::zeros(0, 0),
            postings: Vec::new(),
            docs: Vec::new(),
            config: config.clone(),
        });
    }

    let dim = docs[0].tokens.cols();
    for d in docs {
        if d.tokens.cols() != dim {
            return Err(Error::Dimension(format!(
                "document {:?} has dimension {}, expected {}",
                d.doc_id,
                d.tokens.cols(),
                dim
            )));
        }
    }
    let mut sorted: Vec<DocumentEmbedding> = docs
        .iter()
        .map(|d| DocumentEmbedding {
            doc_id: d.doc_id.clone(),
            tokens: d.tokens.round_to_f32(),
        })
        .collect();
    sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    for pair in sorted.windows(2) {
        if pair[0].doc_id == pair[1].doc_id {
            return Err(Error::Contract(format!(
                "duplicate doc_id {:?} in corpus",
                pair[0].doc_id
            )));
        }
    }

    let total_tokens: usize = sorted.iter().map(|d| d.tokens.rows()).sum();
    if total_tokens < config.centroids {
        return Err(Error::Config(format!(
            "{} tokens cannot seed {} centroids",
            total_tokens, config.centroids
        )));
    }

    let token_refs: Vec<&[f64]> = sorted
        .iter()
        .flat_map(|d| (0..d.tokens.rows()).map(|r| d.tokens.row(r)))
        .collect();
    let centroids = kmeans(
        &token_refs,
        dim,
        config.centroids,
        config.kmeans_iters,
        config.seed,
    )
    .round_to_f32();

    let mut postings = vec![Vec::new(); config.centroids];
    for (doc_idx, doc) in sorted.iter().enumerate() {
        for row in 0..doc.tokens.rows() {
            let c = nearest_centroid(doc.tokens.row(row), &centroids);
            postings[c].push(Posting {
                doc: doc_idx as u32,
                row: row as u32,
            });
        }
    }

    Ok(CentroidIndex {
        dim,
        centroids,
        postings,
        docs: sorted,
        config: config.clone(),
    })
}

/// Top-k retrieval with the index's configured `n_probe`.
pub fn retrieve_topk(
    index: &CentroidIndex,
    query_id: &str,
    query: &Mat,
    k: usize,
) -> Result<Vec<RelevanceScore>> {
    retrieve_topk_with_probe(index, query_id, query, k, index.config.n_probe)
}

/// Top-k retrieval with an explicit probe width.
///
/// Candidates are the documents owning any token in the `n_probe` nearest
/// centroids of any query token; each candidate is re-scored with exact
/// MaxSim. Ties in score break by ascending doc_id. Returns at most
/// `min(k, candidates)` results; an empty index yields an empty list.
pub fn retrieve_topk_with_probe(
    index: &CentroidIndex,
    query_id: &str,
    query: &Mat,
    k: usize,
    n_probe: usize,
) -> Result<Vec<RelevanceScore>> {
    if k == 0 {
        return Err(Error::Contract("retrieve_topk: k must be at least 1".into()));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    if query.rows() == 0 {
        return Err(Error::Contract("retrieve_topk: empty query".into()));
    }
    if query.cols() != index.dim {
        return Err(Error::Dimension(format!(
            "query dimension {} does not match index dimension {}",
            query.cols(),
            index.dim
        )));
    }
    if n_probe == 0 || n_probe > index.config.centroids {
        return Err(Error::Config(format!(
            "n_probe must be in 1..={}, got {n_probe}",
            index.config.centroids
        )));
    }

    let mut candidates: BTreeSet<u32> = BTreeSet::new();
    let mut by_distance: Vec<(f64, usize)> = Vec::with_capacity(index.centroids.rows());
    for qi in 0..query.rows() {
        let token = query.row(qi);
        by_distance.clear();
        for c in 0..index.centroids.rows() {
            by_distance.push((squared_distance(token, index.centroids.row(c)), c));
        }
        by_distance.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, c) in by_distance.iter().take(n_probe) {
            for posting in &index.postings[c] {
                candidates.insert(posting.doc);
            }
        }
    }

    let mut ranked: Vec<(String, f64)> = Vec::with_capacity(candidates.len());
    for doc_idx in candidates {
        let doc = &index.docs[doc_idx as usize];
        ranked.push((doc.doc_id.clone(), max_sim(query, &doc.tokens)?));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked
        .into_iter()
        .map(|(doc_id, value)| RelevanceScore {
            value,
            query_id: query_id.to_string(),
            doc_id,
        })
        .collect())
}

/// Softmax over the retained top-k scores (temperature 1).
pub fn retrieval_probabilities(scores: &[f64]) -> Result<Vec<f64>> {
    retrieval_probabilities_with_temperature(scores, 1.0)
}

/// Softmax over scores at the given temperature.
pub fn retrieval_probabilities_with_temperature(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("no scores to normalize".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite retrieval score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    version: u16,
    dim: usize,
    doc_count: usize,
    token_count: usize,
    config: IndexConfig,
}

/// Write the index as a directory (`meta.json`, `centroids.bin`,
/// `postings.bin`, `docs.bin`).
pub fn save_index(dir: impl AsRef<Path>, index: &CentroidIndex) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let meta = IndexMeta {
        version: INDEX_VERSION,
        dim: index.dim,
        doc_count: index.docs.len(),
        token_count: index.token_count(),
        config: index.config.clone(),
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;

    let mut w = BufWriter::new(File::create(dir.join("centroids.bin"))?);
    w.write_all(CENTROIDS_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&(index.centroids.rows() as u32).to_le_bytes())?;
    w.write_all(&(index.dim as u32).to_le_bytes())?;
    for &v in index.centroids.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("postings.bin"))?);
    w.write_all(POSTINGS_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&(index.postings.len() as u32).to_le_bytes())?;
    for list in &index.postings {
        w.write_all(&(list.len() as u32).to_le_bytes())?;
        for p in list {
            w.write_all(&p.doc.to_le_bytes())?;
            w.write_all(&p.row.to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("docs.bin"))?);
    w.write_all(DOCS_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&(index.docs.len() as u32).to_le_bytes())?;
    w.write_all(&(index.dim as u32).to_le_bytes())?;
    for doc in &index.docs {
        w.write_all(&(doc.doc_id.len() as u32).to_le_bytes())?;
        w.write_all(doc.doc_id.as_bytes())?;
        w.write_all(&(doc.tokens.rows() as u32).to_le_bytes())?;
        for &v in doc.tokens.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load an index directory written by [`save_index`].
pub fn load_index(dir: impl AsRef<Path>) -> Result<CentroidIndex> {
    let dir = dir.as_ref();
    let meta: IndexMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.version != INDEX_VERSION {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "meta.json declares version {}, expected {INDEX_VERSION}",
                meta.version
            ),
        });
    }
    meta.config.validate()?;

    // centroids.bin
    let mut r = CountingReader::new(BufReader::new(File::open(dir.join("centroids.bin"))?));
    r.expect_magic(CENTROIDS_MAGIC)?;
    r.expect_version(INDEX_VERSION)?;
    let k = r.read_u32()? as usize;
    let dim = r.read_u32()? as usize;
    if dim != meta.dim {
        return Err(r.fail(format!(
            "centroid dimension {dim} disagrees with meta.json ({})",
            meta.dim
        )));
    }
    let centroids = Mat::new(k, dim, r.read_f32_values(k * dim)?)?;
    r.expect_eof()?;

    // docs.bin (before postings so posting targets can be validated)
    let mut r = CountingReader::new(BufReader::new(File::open(dir.join("docs.bin"))?));
    r.expect_magic(DOCS_MAGIC)?;
    r.expect_version(INDEX_VERSION)?;
    let doc_count = r.read_u32()?;
    if doc_count as usize != meta.doc_count {
        return Err(r.fail(format!(
            "docs.bin declares {doc_count} documents, meta.json says {}",
            meta.doc_count
        )));
    }
    let docs_dim = r.read_u32()? as usize;
    if docs_dim != meta.dim {
        return Err(r.fail(format!(
            "document dimension {docs_dim} disagrees with meta.json ({})",
            meta.dim
        )));
    }
    let mut docs = Vec::with_capacity(doc_count as usize);
    for _ in 0..doc_count {
        let doc_id = r.read_string(MAX_ID_BYTES)?;
        let tokens = r.read_u32()?;
        if tokens > MAX_COUNT {
            return Err(r.fail(format!("implausible token count {tokens}")));
        }
        let data = r.read_f32_values(tokens as usize * docs_dim)?;
        docs.push(DocumentEmbedding {
            doc_id,
            tokens: Mat::new(tokens as usize, docs_dim, data)?,
        });
    }
    r.expect_eof()?;

    // postings.bin
    let mut r = CountingReader::new(BufReader::new(File::open(dir.join("postings.bin"))?));
    r.expect_magic(POSTINGS_MAGIC)?;
    r.expect_version(INDEX_VERSION)?;
    let posting_k = r.read_u32()? as usize;
    if posting_k != k {
        return Err(r.fail(format!(
            "postings.bin declares {posting_k} centroids, centroids.bin has {k}"
        )));
    }
    let mut postings = Vec::with_capacity(posting_k);
    for _ in 0..posting_k {
        let count = r.read_u32()?;
        if count > MAX_COUNT {
            return Err(r.fail(format!("implausible posting count {count}")));
        }
        let mut list = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let doc = r.read_u32()?;
            let row = r.read_u32()?;
            if doc as usize >= docs.len() || row as usize >= docs[doc as usize].tokens.rows() {
                return Err(r.fail(format!("posting ({doc}, {row}) points outside the doc store")));
            }
            list.push(Posting { doc, row });
        }
        postings.push(list);
    }
    r.expect_eof()?;

    let index = CentroidIndex {
        dim: meta.dim,
        centroids,
        postings,
        docs,
        config: meta.config,
    };
    if index.token_count() != meta.token_count {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "doc store holds {} tokens, meta.json says {}",
                index.token_count(),
                meta.token_count
            ),
        });
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_doc(doc_id: &str, rows: &[Vec<f64>]) -> DocumentEmbedding {
        DocumentEmbedding::new(doc_id, Mat::from_rows(rows).unwrap()).unwrap()
    }

    fn random_docs(n: usize, dim: usize, seed: u64) -> Vec<DocumentEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let rows = rng.gen_range(1..5);
                let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                DocumentEmbedding::new(format!("doc-{i:03}"), Mat::new(rows, dim, data).unwrap())
                    .unwrap()
            })
            .collect()
    }

    /// Brute-force oracle: score every document with an independent
    /// triple-loop MaxSim, sort by (score desc, doc_id asc), truncate.
    fn exhaustive_scan(
        docs: &[DocumentEmbedding],
        query: &Mat,
        k: usize,
    ) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = docs
            .iter()
            .map(|d| {
                let mut total = 0.0;
                for i in 0..query.rows() {
                    let mut best = f64::NEG_INFINITY;
                    for j in 0..d.tokens.rows() {
                        let mut s = 0.0;
                        for c in 0..query.cols() {
                            s += query.get(i, c) * d.tokens.get(j, c);
                        }
                        if s > best {
                            best = s;
                        }
                    }
                    total += best;
                }
                (d.doc_id.clone(), total)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    #[test]
    fn degenerate_k_equals_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let docs: Vec<DocumentEmbedding> = (0..6)
            .map(|i| {
                let data = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                DocumentEmbedding::new(format!("d{i}"), Mat::new(1, 4, data).unwrap()).unwrap()
            })
            .collect();
        let config = IndexConfig {
            centroids: 6,
            kmeans_iters: 10,
            n_probe: 1,
            seed: 5,
        };
        let index = build_index(&docs, &config).unwrap();
        // With k = n over distinct points, every token sits exactly on its
        // assigned centroid.
        for (c, list) in index.postings.iter().enumerate() {
            for p in list {
                let token = index.docs[p.doc as usize].tokens.row(p.row as usize);
                assert_eq!(squared_distance(token, index.centroids.row(c)), 0.0);
            }
        }
    }

    #[test]
    fn separated_clusters_partition_documents() {
        // Cluster A sits at +e1, cluster B at -e1.
        let mut docs = Vec::new();
        for i in 0..4 {
            let jitter = 0.01 * i as f64;
            docs.push(unit_doc(
                &format!("a{i}"),
                &[vec![1.0, jitter], vec![1.0, -jitter]],
            ));
            docs.push(unit_doc(
                &format!("b{i}"),
                &[vec![-1.0, jitter], vec![-1.0, -jitter]],
            ));
        }
        let config = IndexConfig {
            centroids: 2,
            kmeans_iters: 10,
            n_probe: 1,
            seed: 1,
        };
        let index = build_index(&docs, &config).unwrap();
        for list in &index.postings {
            let mut prefixes: Vec<char> = list
                .iter()
                .map(|p| {
                    index.docs[p.doc as usize]
                        .doc_id
                        .chars()
                        .next()
                        .unwrap()
                })
                .collect();
            prefixes.dedup();
            assert!(prefixes.len() <= 1, "mixed cluster: {prefixes:?}");
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_centroids() {
        let docs = random_docs(20, 4, 8);
        let config = IndexConfig::new(5, 42);
        let a = build_index(&docs, &config).unwrap();
        let b = build_index(&docs, &config).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a, b);
    }

    #[test]
    fn full_probe_equals_exhaustive_scan() {
        let docs = random_docs(30, 4, 17);
        let config = IndexConfig {
            centroids: 6,
            kmeans_iters: 10,
            n_probe: 6,
            seed: 9,
        };
        let index = build_index(&docs, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let q = Mat::new(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let got = retrieve_topk(&index, "q", &q, 10).unwrap();
            let expected = exhaustive_scan(index.docs(), &q, 10);
            assert_eq!(got.len(), expected.len());
            for (g, (id, score)) in got.iter().zip(&expected) {
                assert_eq!(&g.doc_id, id);
                assert!((g.value - score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn candidate_set_grows_with_probe_width() {
        let docs = random_docs(25, 4, 30);
        let config = IndexConfig {
            centroids: 8,
            kmeans_iters: 10,
            n_probe: 1,
            seed: 2,
        };
        let index = build_index(&docs, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = Mat::new(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut previous: BTreeSet<String> = BTreeSet::new();
        for probe in 1..=8 {
            let ids: BTreeSet<String> = retrieve_topk_with_probe(&index, "q", &q, 100, probe)
                .unwrap()
                .into_iter()
                .map(|r| r.doc_id)
                .collect();
            assert!(previous.is_subset(&ids), "probe {probe} lost candidates");
            previous = ids;
        }
        assert_eq!(previous.len(), 25);
    }

    #[test]
    fn oversized_k_returns_everything_sorted() {
        let docs = random_docs(7, 3, 12);
        let index = build_index(&docs, &IndexConfig::new(3, 0)).unwrap();
        let q = Mat::new(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let got = retrieve_topk_with_probe(&index, "q", &q, 1000, 3).unwrap();
        assert_eq!(got.len(), 7);
        for pair in got.windows(2) {
            assert!(pair[0].value >= pair[1].value);
        }
    }

    #[test]
    fn self_retrieval_scores_query_length() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let docs = vec![
            unit_doc("target", &[e(0), e(1), e(2)]),
            unit_doc("other", &[e(3)]),
        ];
        let index = build_index(&docs, &IndexConfig::new(2, 7)).unwrap();
        let q = Mat::from_rows(&[e(0), e(1), e(2)]).unwrap();
        let got = retrieve_topk_with_probe(&index, "q", &q, 1, 2).unwrap();
        assert_eq!(got[0].doc_id, "target");
        assert_eq!(got[0].value, 3.0);
    }

    #[test]
    fn empty_index_returns_empty_results() {
        let index = build_index(&[], &IndexConfig::new(4, 0)).unwrap();
        assert!(index.is_empty());
        let q = Mat::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(retrieve_topk(&index, "q", &q, 5).unwrap().is_empty());
    }

    #[test]
    fn too_few_tokens_is_a_configuration_error() {
        let docs = vec![unit_doc("only", &[vec![1.0, 0.0]])];
        assert!(matches!(
            build_index(&docs, &IndexConfig::new(5, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let docs = vec![
            unit_doc("same", &[vec![1.0, 0.0]]),
            unit_doc("same", &[vec![0.0, 1.0]]),
        ];
        assert!(matches!(
            build_index(&docs, &IndexConfig::new(1, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn persistence_roundtrip_preserves_retrieval() {
        let dir = tempfile::tempdir().unwrap();
        let docs = random_docs(15, 4, 44);
        let index = build_index(&docs, &IndexConfig::new(4, 3)).unwrap();
        save_index(dir.path(), &index).unwrap();
        let loaded = load_index(dir.path()).unwrap();
        assert_eq!(loaded, index);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Mat::new(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let before = retrieve_topk(&index, "q", &q, 5).unwrap();
        let after = retrieve_topk(&loaded, "q", &q, 5).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_index_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let index = build_index(&[], &IndexConfig::new(4, 0)).unwrap();
        save_index(dir.path(), &index).unwrap();
        let loaded = load_index(dir.path()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded, index);
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let docs = random_docs(5, 3, 1);
        let index = build_index(&docs, &IndexConfig::new(2, 0)).unwrap();
        save_index(dir.path(), &index).unwrap();
        let meta_path = dir.path().join("meta.json");
        let tampered = std::fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        std::fs::write(&meta_path, tampered).unwrap();
        assert!(matches!(
            load_index(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_docs_bin_names_an_offset() {
        let dir = tempfile::tempdir().unwrap();
        let docs = random_docs(5, 3, 2);
        let index = build_index(&docs, &IndexConfig::new(2, 0)).unwrap();
        save_index(dir.path(), &index).unwrap();
        let path = dir.path().join("docs.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_index(dir.path()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn probabilities_worked_examples() {
        assert_eq!(retrieval_probabilities(&[3.0]).unwrap(), vec![1.0]);

        let p = retrieval_probabilities(&[1.0, 1.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);

        let p = retrieval_probabilities(&[2.0, 0.0]).unwrap();
        let e2 = 2.0f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = retrieval_probabilities(&scores).unwrap();
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn probabilities_reject_bad_input() {
        assert!(matches!(
            retrieval_probabilities(&[]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            retrieval_probabilities(&[f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            retrieval_probabilities_with_temperature(&[1.0], 0.0),
            Err(Error::Contract(_))
        ));
    }
}

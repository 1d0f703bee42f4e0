//! End-to-end experiment orchestration.
//!
//! [`run_experiment`] wires the whole pipeline: load the dataset and
//! knowledge base, produce or ingest embeddings, train or load the
//! compression head, build the centroid index, answer every question
//! through the reflective gate, and aggregate metrics. Every stage failure
//! is annotated with the stage name and any partially written outputs are
//! removed, so reruns never see stale state.
//!
//! Outputs under `output_dir`: `metrics.json`, `trace.jsonl` (one
//! [`ReflectiveTrace`] per question, dataset order), and `head.lirh` when
//! the head was trained rather than loaded. Runs are deterministic given
//! the configured seeds and a mock generator: identical configs produce
//! byte-identical reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{
    build_query_embedding, load_knowledge_base, read_embedding_file, toy_encode_image,
    toy_encode_text, DocumentEmbedding, QueryEmbedding, ToyEncoderConfig,
};
use crate::error::{Error, Result};
use crate::generation::{Generator, MockGenerator, RemoteGenerator, RemoteGeneratorConfig};
use crate::index::{build_index, retrieve_topk, CentroidIndex, IndexConfig};
use crate::metrics::{exact_match, load_dataset, prr_at_k, vqa_score, MetricsReport, QaExample};
use crate::reflection::reflective_answer;
use crate::retrieval::{compress, load_head, save_head, train_head, CompressionHead, TrainConfig};
use crate::generation::GenerationContext;

/// Where embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Encode questions, image descriptors, and documents with the
    /// deterministic toy encoders.
    Toy(ToyEncoderConfig),
    /// Ingest externally produced embedding files.
    Files { queries: PathBuf, docs: PathBuf },
}

/// Where the compression head comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSource {
    Checkpoint(PathBuf),
    Train(TrainConfig),
}

/// Which generator answers questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSelection {
    /// Path to a mock-table JSON file.
    Mock(PathBuf),
    Remote(RemoteGeneratorConfig),
}

impl GeneratorSelection {
    pub fn build(&self) -> Result<Box<dyn Generator>> {
        Ok(match self {
            GeneratorSelection::Mock(path) => Box::new(MockGenerator::from_file(path)?),
            GeneratorSelection::Remote(config) => Box::new(RemoteGenerator::new(config.clone())?),
        })
    }
}

fn default_k() -> usize {
    5
}

fn default_gate_threshold() -> f64 {
    0.5
}

/// Full experiment description; the JSON config file mirrors this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub knowledge_base: PathBuf,
    pub embeddings: EmbeddingSource,
    pub head: HeadSource,
    pub index: IndexConfig,
    /// Documents retrieved per triggered question.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_gate_threshold")]
    pub gate_threshold: f64,
    pub generator: GeneratorSelection,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(path.as_ref())?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::Config(format!(
                "gate threshold must be in [0, 1], got {}",
                self.gate_threshold
            )));
        }
        self.index.validate()?;
        if let EmbeddingSource::Toy(toy) = &self.embeddings {
            toy.validate()?;
        }
        if let GeneratorSelection::Remote(remote) = &self.generator {
            remote.validate()?;
        }
        Ok(())
    }
}

/// Removes the files it tracks on drop unless the run committed.
struct OutputGuard {
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            committed: false,
        }
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.files {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        already @ Error::Stage { .. } => already,
        other => Error::stage(name, other),
    })
}

/// Embeddings for the run: one query embedding per dataset example (same
/// order) and one document embedding per knowledge-base entry.
struct RunEmbeddings {
    queries: Vec<QueryEmbedding>,
    docs: Vec<DocumentEmbedding>,
}

fn embed_inputs(
    source: &EmbeddingSource,
    dataset: &[QaExample],
    kb: &[crate::embed::KbDocument],
) -> Result<RunEmbeddings> {
    match source {
        EmbeddingSource::Toy(toy) => {
            let queries = dataset
                .iter()
                .map(|example| {
                    let image = toy_encode_image(&example.image_descriptor, toy)?;
                    let text = toy_encode_text(&example.question, toy)?;
                    build_query_embedding(&image, &text, example.query_id.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let docs = kb
                .iter()
                .map(|doc| {
                    let tokens = toy_encode_text(&doc.text, toy).and_then(|tokens| {
                        if tokens.rows() == 0 {
                            Err(Error::Contract(format!(
                                "document {:?} has no encodable text",
                                doc.doc_id
                            )))
                        } else {
                            Ok(tokens)
                        }
                    })?;
                    DocumentEmbedding::new(doc.doc_id.clone(), tokens)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RunEmbeddings { queries, docs })
        }
        EmbeddingSource::Files { queries, docs } => {
            let (_, query_seqs) = read_embedding_file(queries)?;
            let by_id: HashMap<&str, &crate::numerics::Mat> = query_seqs
                .iter()
                .map(|(id, tokens)| (id.as_str(), tokens))
                .collect();
            let queries = dataset
                .iter()
                .map(|example| {
                    let tokens = by_id.get(example.query_id.as_str()).ok_or_else(|| {
                        Error::Config(format!(
                            "query {:?} missing from the embedding file",
                            example.query_id
                        ))
                    })?;
                    QueryEmbedding::from_tokens(example.query_id.clone(), (*tokens).clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, doc_seqs) = read_embedding_file(docs)?;
            let doc_by_id: HashMap<&str, &crate::numerics::Mat> = doc_seqs
                .iter()
                .map(|(id, tokens)| (id.as_str(), tokens))
                .collect();
            let docs = kb
                .iter()
                .map(|doc| {
                    let tokens = doc_by_id.get(doc.doc_id.as_str()).ok_or_else(|| {
                        Error::Config(format!(
                            "document {:?} missing from the embedding file",
                            doc.doc_id
                        ))
                    })?;
                    DocumentEmbedding::new(doc.doc_id.clone(), (*tokens).clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RunEmbeddings { queries, docs })
        }
    }
}

/// Pair each query with the embedding of its first gold document.
pub fn training_pairs(
    dataset: &[QaExample],
    queries: &[QueryEmbedding],
    docs: &[DocumentEmbedding],
) -> Result<Vec<(QueryEmbedding, DocumentEmbedding)>> {
    let doc_by_id: HashMap<&str, &DocumentEmbedding> =
        docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    dataset
        .iter()
        .zip(queries)
        .map(|(example, query)| {
            let gold = example.gold_doc_ids.first().ok_or_else(|| {
                Error::Config(format!(
                    "question {:?} has no gold document for head training",
                    example.query_id
                ))
            })?;
            let doc = doc_by_id.get(gold.as_str()).ok_or_else(|| {
                Error::Config(format!(
                    "gold document {gold:?} for question {:?} is not in the knowledge base",
                    example.query_id
                ))
            })?;
            Ok((query.clone(), (*doc).clone()))
        })
        .collect()
}

fn resolve_head(
    source: &HeadSource,
    dataset: &[QaExample],
    embeddings: &RunEmbeddings,
    guard: &mut OutputGuard,
    output_dir: &Path,
) -> Result<CompressionHead> {
    match source {
        HeadSource::Checkpoint(path) => load_head(path),
        HeadSource::Train(train_config) => {
            let pairs = training_pairs(dataset, &embeddings.queries, &embeddings.docs)?;
            let (head, _) = train_head(&pairs, train_config)?;
            let path = guard.track(output_dir.join("head.lirh"));
            save_head(&path, &head)?;
            Ok(head)
        }
    }
}

/// Retrieval evaluation pass, independent of the reflective gate: ranked
/// ids per question at depth `k`.
fn retrieval_pass(
    index: &CentroidIndex,
    head: &CompressionHead,
    queries: &[QueryEmbedding],
    k: usize,
) -> Result<Vec<Vec<String>>> {
    queries
        .iter()
        .map(|query| {
            let compressed = compress(head, &query.tokens)?;
            Ok(retrieve_topk(index, &query.query_id, &compressed, k)?
                .into_iter()
                .map(|r| r.doc_id)
                .collect())
        })
        .collect()
}

/// Run the full pipeline and write `metrics.json` and `trace.jsonl`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let mut guard = OutputGuard::new();
    let report = run_stages(config, &mut guard)?;
    guard.committed = true;
    Ok(report)
}

fn run_stages(config: &ExperimentConfig, guard: &mut OutputGuard) -> Result<MetricsReport> {
    let dataset = stage("load-dataset", load_dataset(&config.dataset))?;
    if dataset.is_empty() {
        return Err(Error::stage(
            "load-dataset",
            Error::Config("dataset is empty".into()),
        ));
    }
    let mut seen = HashSet::new();
    for example in &dataset {
        if !seen.insert(example.query_id.as_str()) {
            return Err(Error::stage(
                "load-dataset",
                Error::Contract(format!("duplicate query_id {:?}", example.query_id)),
            ));
        }
    }
    let kb = stage("load-knowledge-base", load_knowledge_base(&config.knowledge_base))?;
    let doc_texts: HashMap<String, String> = kb
        .iter()
        .map(|d| (d.doc_id.clone(), d.text.clone()))
        .collect();

    let embeddings = stage("embed", embed_inputs(&config.embeddings, &dataset, &kb))?;
    let head = stage(
        "head",
        resolve_head(&config.head, &dataset, &embeddings, guard, &config.output_dir),
    )?;

    let compressed_docs = stage(
        "index",
        embeddings
            .docs
            .iter()
            .map(|doc| {
                Ok(DocumentEmbedding {
                    doc_id: doc.doc_id.clone(),
                    tokens: compress(&head, &doc.tokens)?,
                })
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    let index = stage("index", build_index(&compressed_docs, &config.index))?;

    let generator = stage("generator", config.generator.build())?;

    // Retrieval metrics run over every question regardless of the gate.
    let ranked_ids = stage(
        "retrieval-eval",
        retrieval_pass(&index, &head, &embeddings.queries, config.k),
    )?;
    let mut prr_sums: BTreeMap<usize, f64> = (1..=config.k).map(|k| (k, 0.0)).collect();
    for (example, ids) in dataset.iter().zip(&ranked_ids) {
        for depth in 1..=config.k {
            let texts: Vec<String> = ids
                .iter()
                .take(depth)
                .filter_map(|id| doc_texts.get(id).cloned())
                .collect();
            let hit = stage("retrieval-eval", prr_at_k(&texts, &example.answers))?;
            *prr_sums.get_mut(&depth).expect("depth key") += f64::from(hit);
        }
    }

    let mut traces = Vec::with_capacity(dataset.len());
    for (example, query) in dataset.iter().zip(&embeddings.queries) {
        let ctx = GenerationContext::bare(
            example.query_id.clone(),
            example.question.clone(),
            example.image_descriptor.clone(),
        );
        let trace = stage(
            "answer",
            reflective_answer(
                generator.as_ref(),
                &head,
                &index,
                query,
                &ctx,
                &doc_texts,
                config.k,
                config.gate_threshold,
            ),
        )?;
        traces.push(trace);
    }

    let n = dataset.len() as f64;
    let mut em_sum = 0.0;
    let mut vqa_sum = 0.0;
    let mut triggered = 0usize;
    for (example, trace) in dataset.iter().zip(&traces) {
        em_sum += f64::from(stage(
            "aggregate",
            exact_match(&trace.final_answer, &example.answers),
        )?);
        vqa_sum += stage("aggregate", vqa_score(&trace.final_answer, &example.answers))?;
        if trace.retrieval_triggered {
            triggered += 1;
        }
    }
    let report = MetricsReport {
        em_mean: em_sum / n,
        vqa_mean: vqa_sum / n,
        prr_at_k: prr_sums.into_iter().map(|(k, sum)| (k, sum / n)).collect(),
        n_questions: dataset.len(),
        retrieval_trigger_rate: triggered as f64 / n,
    };
    stage("aggregate", report.validate())?;

    let trace_path = guard.track(config.output_dir.join("trace.jsonl"));
    let mut lines = String::new();
    for trace in &traces {
        lines.push_str(&serde_json::to_string(trace)?);
        lines.push('\n');
    }
    stage("write-outputs", std::fs::write(&trace_path, lines).map_err(Error::Io))?;
    let metrics_path = guard.track(config.output_dir.join("metrics.json"));
    stage(
        "write-outputs",
        std::fs::write(&metrics_path, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(Error::Io),
    )?;
    Ok(report)
}

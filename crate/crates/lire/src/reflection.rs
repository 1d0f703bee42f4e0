//! Reflective answering: training losses with late-join scheduling and the
//! adaptive inference gate.
//!
//! During training the generator learns to answer without documents while
//! predicting a binary label for whether its own answer is correct; the
//! reflection loss joins the objective only from the configured step
//! onward. At inference the model answers on its own first and triggers
//! retrieval-augmented generation only when its self-reflection probability
//! falls below the gate threshold; otherwise the self answer stands and the
//! index is never touched.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::QueryEmbedding;
use crate::error::{Error, Result};
use crate::generation::{
    rag_loss, sample_target_answer, select_answer, AnswerCandidate, GenerationContext, Generator,
};
use crate::index::{retrieval_probabilities, retrieve_topk, CentroidIndex};
use crate::metrics::exact_match;
use crate::retrieval::{compress, CompressionHead};

/// Binary self-reflection label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReflectionLabel {
    Correct,
    Incorrect,
}

/// Schedule for reflective training.
///
/// The reflection loss is included at steps `t >= join_step`. A
/// `join_step` of 0 includes it from the start; a value above
/// `total_steps` disables it entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveTrainConfig {
    pub total_steps: usize,
    pub join_step: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ReflectiveTrainConfig {
    /// Default late join at the midpoint, `ceil(total_steps / 2)`.
    pub fn new(total_steps: usize, seed: u64) -> Self {
        Self {
            total_steps,
            join_step: total_steps.div_ceil(2),
            seed,
        }
    }

    pub fn with_join_step(mut self, join_step: usize) -> Self {
        self.join_step = join_step;
        self
    }
}

/// Label the predicted answer against the human answer set, under the same
/// normalization the metrics use: Correct exactly when exact match is 1.
pub fn make_reflection_label(predicted: &str, answers: &[String]) -> Result<ReflectionLabel> {
    Ok(if exact_match(predicted, answers)? == 1 {
        ReflectionLabel::Correct
    } else {
        ReflectionLabel::Incorrect
    })
}

/// Binary cross-entropy of a correctness probability against the label.
/// Zero exactly when the probability equals the label indicator; infinite
/// for a certain wrong prediction.
pub fn binary_cross_entropy(correct_prob: f64, label: ReflectionLabel) -> Result<f64> {
    if !(0.0..=1.0).contains(&correct_prob) {
        return Err(Error::Contract(format!(
            "probability must be in [0, 1], got {correct_prob}"
        )));
    }
    Ok(match label {
        ReflectionLabel::Correct => -correct_prob.ln(),
        ReflectionLabel::Incorrect => -(1.0 - correct_prob).ln(),
    })
}

/// Components of the self-reflective loss at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectiveLossParts {
    pub generation: f64,
    /// Present only once the step has reached the join step.
    pub reflection: Option<f64>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    (seed ^ (step as u64)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Self-reflective losses at training step `t`.
///
/// The generation part scores a sampled target answer without documents;
/// once `t >= join_step` the binary cross-entropy of the self-reflection
/// against the constructed label is added.
pub fn reflective_losses(
    gen: &dyn Generator,
    ctx: &GenerationContext,
    answers: &[String],
    step: usize,
    config: &ReflectiveTrainConfig,
) -> Result<(f64, ReflectiveLossParts)> {
    if step == 0 || step > config.total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside 1..={}",
            config.total_steps
        )));
    }
    if ctx.document.is_some() {
        return Err(Error::Contract(
            "reflective losses score the query without documents".into(),
        ));
    }
    let target = sample_target_answer(answers, step_seed(config.seed, step))?;
    let generation = rag_loss(gen, ctx, &target)?;

    let reflection = if step >= config.join_step {
        let (self_answer, _) = gen.generate(ctx)?;
        let label = make_reflection_label(&self_answer, answers)?;
        let prob = gen.reflect(ctx, &self_answer)?;
        Some(binary_cross_entropy(prob, label)?)
    } else {
        None
    };

    let total = generation + reflection.unwrap_or(0.0);
    Ok((
        total,
        ReflectiveLossParts {
            generation,
            reflection,
        },
    ))
}

/// The full objective is the plain unweighted sum of the retrieval,
/// retrieval-augmented generation, and self-reflective losses.
pub fn joint_loss(retrieval: f64, rag: f64, self_reflective: f64) -> f64 {
    retrieval + rag + self_reflective
}

/// Audit record of one reflective answering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveTrace {
    pub query_id: String,
    pub self_answer: String,
    pub predicted_label: ReflectionLabel,
    pub correct_prob: f64,
    pub retrieval_triggered: bool,
    pub final_answer: String,
    pub retrieved_doc_ids: Vec<String>,
}

/// Answer a query through the reflective gate.
///
/// The generator first answers without documents and reflects on its own
/// answer. A correctness probability at or above `threshold` closes the
/// gate: the self answer is final and the index is never consulted. Below
/// the threshold, the top-k documents are retrieved, one answer is
/// generated per document, and the joint-probability argmax wins. If
/// retrieval produces no candidates (empty index), the self answer stands.
///
/// Errors are annotated with the stage that failed.
pub fn reflective_answer(
    gen: &dyn Generator,
    head: &CompressionHead,
    index: &CentroidIndex,
    query: &QueryEmbedding,
    ctx: &GenerationContext,
    doc_texts: &HashMap<String, String>,
    k: usize,
    threshold: f64,
) -> Result<ReflectiveTrace> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!(
            "gate threshold must be in [0, 1], got {threshold}"
        )));
    }
    if ctx.document.is_some() {
        return Err(Error::Contract(
            "reflective answering starts from a document-free context".into(),
        ));
    }
    if ctx.query_id != query.query_id {
        return Err(Error::Contract(format!(
            "context query_id {:?} does not match embedding query_id {:?}",
            ctx.query_id, query.query_id
        )));
    }

    let (self_answer, _) = gen
        .generate(ctx)
        .map_err(|e| Error::stage("self-answer", e))?;
    let correct_prob = gen
        .reflect(ctx, &self_answer)
        .map_err(|e| Error::stage("reflect", e))?;
    if !(0.0..=1.0).contains(&correct_prob) {
        return Err(Error::stage(
            "reflect",
            Error::Contract(format!("correct_prob {correct_prob} outside [0, 1]")),
        ));
    }

    if correct_prob >= threshold {
        return Ok(ReflectiveTrace {
            query_id: query.query_id.clone(),
            self_answer: self_answer.clone(),
            predicted_label: ReflectionLabel::Correct,
            correct_prob,
            retrieval_triggered: false,
            final_answer: self_answer,
            retrieved_doc_ids: Vec::new(),
        });
    }

    let compressed = compress(head, &query.tokens).map_err(|e| Error::stage("retrieval", e))?;
    let ranked = retrieve_topk(index, &query.query_id, &compressed, k)
        .map_err(|e| Error::stage("retrieval", e))?;
    if ranked.is_empty() {
        return Ok(ReflectiveTrace {
            query_id: query.query_id.clone(),
            self_answer: self_answer.clone(),
            predicted_label: ReflectionLabel::Incorrect,
            correct_prob,
            retrieval_triggered: true,
            final_answer: self_answer,
            retrieved_doc_ids: Vec::new(),
        });
    }

    let scores: Vec<f64> = ranked.iter().map(|r| r.value).collect();
    let probabilities =
        retrieval_probabilities(&scores).map_err(|e| Error::stage("retrieval", e))?;
    let mut candidates = Vec::with_capacity(ranked.len());
    for (rank, prob) in ranked.iter().zip(probabilities) {
        let text = doc_texts.get(&rank.doc_id).ok_or_else(|| {
            Error::stage(
                "retrieval",
                Error::Config(format!("no text for retrieved doc {:?}", rank.doc_id)),
            )
        })?;
        let doc_ctx = ctx.clone().with_document(rank.doc_id.clone(), text.clone());
        let (answer, generation_log_prob) = gen
            .generate(&doc_ctx)
            .map_err(|e| Error::stage("generation", e))?;
        candidates.push(
            AnswerCandidate::new(
                answer,
                Some(rank.doc_id.clone()),
                prob.ln(),
                generation_log_prob,
            )
            .map_err(|e| Error::stage("generation", e))?,
        );
    }
    let (final_answer, _) = select_answer(&candidates).map_err(|e| Error::stage("rerank", e))?;

    Ok(ReflectiveTrace {
        query_id: query.query_id.clone(),
        self_answer,
        predicted_label: ReflectionLabel::Incorrect,
        correct_prob,
        retrieval_triggered: true,
        final_answer,
        retrieved_doc_ids: ranked.into_iter().map(|r| r.doc_id).collect(),
    })
}

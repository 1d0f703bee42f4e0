//! Dataset types, answer normalization, and the evaluation metrics.
//!
//! One shared normalization feeds every metric: lowercase, trim, collapse
//! whitespace, strip leading/trailing punctuation per word, and drop
//! standalone articles. Exact match is binary membership in the answer set;
//! VQAScore grants partial credit as `min(occurrences / 3, 1)`; PRR@K marks
//! a question covered when any normalized answer appears as a substring of
//! any of its top-K retrieved document texts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dataset question: JSONL, one object per line.
///
/// `answers` is a multiset — repeated strings represent annotator
/// agreement and drive VQAScore's partial credit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub query_id: String,
    pub question: String,
    #[serde(default)]
    pub image_descriptor: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold_doc_ids: Vec<String>,
}

impl QaExample {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Contract(format!(
                "question {:?} has an empty answer set",
                self.query_id
            )));
        }
        if self.question.is_empty() {
            return Err(Error::Contract(format!(
                "question {:?} has empty question text",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// Load a dataset: JSONL, one [`QaExample`] per line.
pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Vec<QaExample>> {
    let raw = std::fs::read_to_string(path.as_ref())?;
    let mut examples = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let example: QaExample = serde_json::from_str(line).map_err(|e| {
            Error::Config(format!(
                "{}:{}: invalid dataset line: {e}",
                path.as_ref().display(),
                lineno + 1
            ))
        })?;
        example.validate()?;
        examples.push(example);
    }
    Ok(examples)
}

/// Canonicalize an answer string: lowercase, collapse whitespace runs,
/// strip leading/trailing punctuation from each word, drop standalone
/// articles ("a", "an", "the"). Words that reduce to nothing vanish.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut words = Vec::new();
    for word in lowered.split_whitespace() {
        let trimmed = word.trim_matches(|c: char| c.is_ascii_punctuation());
        if trimmed.is_empty() {
            continue;
        }
        if matches!(trimmed, "a" | "an" | "the") {
            continue;
        }
        words.push(trimmed);
    }
    words.join(" ")
}

/// Occurrences of the normalized answer among the normalized set.
fn occurrences(answer: &str, answer_set: &[String]) -> usize {
    let needle = normalize_answer(answer);
    answer_set
        .iter()
        .filter(|s| normalize_answer(s) == needle)
        .count()
}

/// 1 if the normalized answer occurs at least once in the normalized
/// answer set, else 0.
pub fn exact_match(answer: &str, answer_set: &[String]) -> Result<u8> {
    if answer_set.is_empty() {
        return Err(Error::Contract("exact_match: empty answer set".into()));
    }
    Ok(u8::from(occurrences(answer, answer_set) >= 1))
}

/// Partial-credit score `min(occurrences / 3, 1)` over the normalized
/// answer multiset.
pub fn vqa_score(answer: &str, answer_set: &[String]) -> Result<f64> {
    if answer_set.is_empty() {
        return Err(Error::Contract("vqa_score: empty answer set".into()));
    }
    Ok((occurrences(answer, answer_set) as f64 / 3.0).min(1.0))
}

/// Light normalization for document text: lowercase plus whitespace
/// collapse. Substring matching against punctuation-stripped answers would
/// be too strict on the document side.
fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Pseudo-relevance recall indicator: 1 if any normalized answer appears
/// as a substring of any retrieved document text.
///
/// Answers that normalize to the empty string are skipped — an empty
/// needle would match everything.
pub fn prr_at_k(retrieved_texts: &[String], answer_set: &[String]) -> Result<u8> {
    if retrieved_texts.is_empty() {
        return Ok(0);
    }
    if answer_set.is_empty() {
        return Err(Error::Contract("prr_at_k: empty answer set".into()));
    }
    let needles: Vec<String> = answer_set
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();
    for text in retrieved_texts {
        let haystack = normalize_text(text);
        if needles.iter().any(|needle| haystack.contains(needle)) {
            return Ok(1);
        }
    }
    Ok(0)
}

/// Aggregate metrics over one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em_mean: f64,
    pub vqa_mean: f64,
    /// PRR@K per K, over the retrieval evaluation pass.
    pub prr_at_k: BTreeMap<usize, f64>,
    pub n_questions: usize,
    /// Fraction of questions whose reflective gate opened.
    pub retrieval_trigger_rate: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.em_mean, self.vqa_mean, self.retrieval_trigger_rate];
        if rates
            .iter()
            .chain(self.prr_at_k.values())
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::Contract("metrics report rate outside [0, 1]".into()));
        }
        if self.vqa_mean > self.em_mean + 1e-12 {
            return Err(Error::Contract(format!(
                "vqa_mean {} exceeds em_mean {}",
                self.vqa_mean, self.em_mean
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_rule_application() {
        assert_eq!(normalize_answer(" The  Dog! "), "dog");
        assert_eq!(normalize_answer("New York"), "new york");
        // Internal hyphen kept; the article rule applies to standalone
        // words only.
        assert_eq!(normalize_answer("a-frame"), "a-frame");
        assert_eq!(normalize_answer("an apple a day"), "apple day");
        assert_eq!(normalize_answer("!!!"), "");
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn exact_match_worked_examples() {
        let s = set(&["dog", "dog", "cat"]);
        assert_eq!(exact_match("dog", &s).unwrap(), 1);
        assert_eq!(exact_match("fish", &s).unwrap(), 0);
        assert_eq!(exact_match("Dog", &set(&["dog"])).unwrap(), 1);
    }

    #[test]
    fn vqa_score_worked_examples() {
        let s = set(&["dog", "dog", "dog", "cat"]);
        assert_eq!(vqa_score("dog", &s).unwrap(), 1.0);
        let s2 = set(&["dog", "dog", "cat"]);
        assert!((vqa_score("dog", &s2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_score("fish", &s2).unwrap(), 0.0);
    }

    #[test]
    fn vqa_counts_normalized_occurrences() {
        let s = set(&["The Dog", "dog!", "DOG", "cat"]);
        assert_eq!(vqa_score("dog", &s).unwrap(), 1.0);
    }

    #[test]
    fn prr_worked_examples() {
        let answers = set(&["paris"]);
        let docs = set(&["The Eiffel Tower stands in Paris, the capital."]);
        assert_eq!(prr_at_k(&docs, &answers).unwrap(), 1);

        let no_match = set(&["This text mentions nothing relevant."]);
        assert_eq!(prr_at_k(&no_match, &answers).unwrap(), 0);

        // Pluralization passes because the singular is a substring.
        let ski = set(&["ski pole"]);
        let ski_docs = set(&["Most ski poles are made of aluminum."]);
        assert_eq!(prr_at_k(&ski_docs, &ski).unwrap(), 1);
    }

    #[test]
    fn prr_skips_answers_that_normalize_to_nothing() {
        let answers = set(&["the", "zebra"]);
        let docs = set(&["completely unrelated text"]);
        assert_eq!(prr_at_k(&docs, &answers).unwrap(), 0);
    }

    #[test]
    fn prr_empty_retrieval_scores_zero() {
        assert_eq!(prr_at_k(&[], &set(&["x"])).unwrap(), 0);
    }

    #[test]
    fn prr_monotone_in_k() {
        let answers = set(&["needle"]);
        let ranked = set(&[
            "nothing here",
            "still nothing",
            "a needle in a haystack",
            "more filler",
        ]);
        let mut previous = 0;
        for k in 1..=ranked.len() {
            let value = prr_at_k(&ranked[..k], &answers).unwrap();
            assert!(value >= previous);
            previous = value;
        }
    }

    #[test]
    fn metrics_invariant_to_case_and_whitespace() {
        let s = set(&["  Great   Wall "]);
        assert_eq!(exact_match("great wall", &s).unwrap(), 1);
        assert_eq!(vqa_score("GREAT WALL", &s).unwrap(), 1.0 / 3.0);
        let docs = set(&["THE GREAT   WALL OF CHINA"]);
        assert_eq!(prr_at_k(&docs, &s).unwrap(), 1);
    }

    #[test]
    fn vqa_never_exceeds_em_fuzzed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let vocab = ["dog", "cat", "Dog!", "the dog", "fish", "bird", ""];
        for _ in 0..10_000 {
            let n = rng.gen_range(1..8);
            let answer_set: Vec<String> = (0..n)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                .collect();
            let answer = vocab[rng.gen_range(0..vocab.len())];
            let em = exact_match(answer, &answer_set).unwrap() as f64;
            let vqa = vqa_score(answer, &answer_set).unwrap();
            assert!(vqa <= em + 1e-15, "vqa {vqa} > em {em} for {answer:?}");
        }
    }

    #[test]
    fn dataset_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            "{\"query_id\":\"q1\",\"question\":\"what animal\",\"image_descriptor\":\"a dog\",\
             \"answers\":[\"dog\",\"puppy\"],\"gold_doc_ids\":[\"d1\"]}\n",
        )
        .unwrap();
        let examples = load_dataset(&path).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].answers.len(), 2);

        std::fs::write(
            &path,
            "{\"query_id\":\"q1\",\"question\":\"x\",\"answers\":[]}\n",
        )
        .unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn report_validation_catches_violations() {
        let mut report = MetricsReport {
            em_mean: 0.5,
            vqa_mean: 0.4,
            prr_at_k: BTreeMap::from([(1, 0.2), (5, 0.9)]),
            n_questions: 10,
            retrieval_trigger_rate: 0.3,
        };
        report.validate().unwrap();
        report.vqa_mean = 0.7;
        assert!(report.validate().is_err());
    }
}

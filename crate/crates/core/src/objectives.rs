//! Training objectives evaluated as log-probability sums over a backend.
//!
//! - recall loss: mean over supervision pairs of the negative log-likelihood of
//!   each rendered `head | tail` line given the recall prompt;
//! - reason loss, in two readings: `joint-context` scores the gold label after one
//!   prompt holding every demonstration; `literal-sum` scores it after each
//!   single-demonstration prompt and takes `-log` of the summed probabilities;
//! - joint loss: recall + reason;
//! - marginal relation scores: a mixture over pairs of per-pair relation
//!   distributions, weighted by the pairs' renormalized generation priors.
//!
//! All values are in nats. Accumulation runs in sorted key order so results do
//! not depend on input order beyond floating-point identity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::lm_backend::{BackendError, LanguageModel};
use crate::pair_index::PairKey;
use crate::prompting::{format_pair_line, Templates};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("recall loss needs at least one supervision pair")]
    EmptyPairs,
    #[error("reason loss needs at least one demonstration")]
    EmptyDemonstrations,
    #[error("relation scoring needs at least one label")]
    EmptySchema,
    #[error("relation scoring needs at least one mixture component")]
    EmptyMixture,
    #[error("backend cannot score continuations")]
    ScoringUnsupported,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonMode {
    #[default]
    JointContext,
    LiteralSum,
}

impl std::str::FromStr for ReasonMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint-context" => Ok(ReasonMode::JointContext),
            "literal-sum" => Ok(ReasonMode::LiteralSum),
            other => Err(format!("unknown reason-loss mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLogProb {
    pub head: String,
    pub tail: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallScore {
    pub loss: f64,
    /// In input order.
    pub per_pair: Vec<PairLogProb>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recall_loss: f64,
    pub reason_loss: f64,
    pub joint_loss: f64,
    pub per_pair: Vec<PairLogProb>,
    pub mode: ReasonMode,
}

/// One line of a loss report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub example_id: String,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

/// Distribution over a finite label set, in label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDistribution {
    pub scores: Vec<LabelScore>,
    pub normalized: bool,
}

impl RelationDistribution {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.label == label).map(|s| s.score)
    }

    /// Highest-scoring label; ties go to the earlier label.
    pub fn argmax(&self) -> Option<&str> {
        let mut best: Option<&LabelScore> = None;
        for s in &self.scores {
            if best.is_none_or(|b| s.score > b.score) {
                best = Some(s);
            }
        }
        best.map(|s| s.label.as_str())
    }
}

/// A supervision or recalled pair, its generation log-prior, and the
/// demonstration it retrieves.
#[derive(Debug, Clone)]
pub struct MixtureComponent<'a> {
    pub pair: PairKey,
    pub prior_logprob: f64,
    pub demo: &'a Example,
}

/// `log Σ exp(x)`, stable for large magnitudes.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Evaluates objectives against one backend and template set.
pub struct Scorer<'a> {
    backend: &'a dyn LanguageModel,
    templates: &'a Templates,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn LanguageModel, templates: &'a Templates) -> Self {
        Self { backend, templates }
    }

    fn ensure_scoring(&self) -> Result<(), ObjectiveError> {
        if self.backend.capabilities().score {
            Ok(())
        } else {
            Err(ObjectiveError::ScoringUnsupported)
        }
    }

    /// Log-probability of each pair line under the recall prompt for `k = |pairs|`.
    pub fn pair_logprobs(&self, example: &Example, pairs: &[PairKey]) -> Result<Vec<f64>, ObjectiveError> {
        self.ensure_scoring()?;
        let prompt = self.templates.render_recall(example, pairs.len());
        pairs
            .iter()
            .map(|p| {
                let line = format_pair_line(&p.head, &p.tail);
                Ok(self.backend.score(&prompt.text, &line)?.sum())
            })
            .collect()
    }

    pub fn recall_loss(&self, example: &Example, pairs: &[PairKey]) -> Result<RecallScore, ObjectiveError> {
        if pairs.is_empty() {
            return Err(ObjectiveError::EmptyPairs);
        }
        let logprobs = self.pair_logprobs(example, pairs)?;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| pairs[a].cmp(&pairs[b]));
        let total: f64 = order.iter().map(|&i| logprobs[i]).sum();
        let loss = -total / pairs.len() as f64;
        let per_pair = pairs
            .iter()
            .zip(&logprobs)
            .map(|(p, &logprob)| PairLogProb {
                head: p.head.clone(),
                tail: p.tail.clone(),
                logprob,
            })
            .collect();
        Ok(RecallScore { loss, per_pair })
    }

    fn label_logprob(&self, example: &Example, demos: &[&Example], label: &str) -> Result<f64, ObjectiveError> {
        let prompt = self.templates.render_reason(example, demos);
        Ok(self.backend.score(&prompt.text, label)?.sum())
    }

    /// Negative log-likelihood of `gold` given the demonstrations.
    ///
    /// `literal-sum` takes `-log` of a sum of per-demonstration probabilities,
    /// which is not a probability itself; it can be negative when several
    /// demonstrations each make `gold` likely.
    pub fn reason_loss(
        &self,
        example: &Example,
        demos: &[&Example],
        gold: &str,
        mode: ReasonMode,
    ) -> Result<f64, ObjectiveError> {
        if demos.is_empty() {
            return Err(ObjectiveError::EmptyDemonstrations);
        }
        self.ensure_scoring()?;
        match mode {
            ReasonMode::JointContext => Ok(-self.label_logprob(example, demos, gold)?),
            ReasonMode::LiteralSum => {
                let mut per_demo = demos
                    .iter()
                    .map(|d| Ok((d.id.as_str(), self.label_logprob(example, &[d], gold)?)))
                    .collect::<Result<Vec<_>, ObjectiveError>>()?;
                per_demo.sort_by(|a, b| a.0.cmp(b.0));
                let values: Vec<f64> = per_demo.into_iter().map(|(_, v)| v).collect();
                Ok(-log_sum_exp(&values))
            }
        }
    }

    pub fn joint_loss(
        &self,
        example: &Example,
        pairs: &[PairKey],
        demos: &[&Example],
        gold: &str,
        mode: ReasonMode,
    ) -> Result<LossBreakdown, ObjectiveError> {
        if demos.is_empty() {
            return Err(ObjectiveError::EmptyDemonstrations);
        }
        let recall = self.recall_loss(example, pairs)?;
        let reason_loss = self.reason_loss(example, demos, gold, mode)?;
        Ok(LossBreakdown {
            recall_loss: recall.loss,
            reason_loss,
            joint_loss: recall.loss + reason_loss,
            per_pair: recall.per_pair,
            mode,
        })
    }

    /// Per-label distribution after a single-demonstration reason prompt,
    /// renormalized over `labels`.
    pub fn conditional_relation_scores(
        &self,
        example: &Example,
        demo: &Example,
        labels: &[String],
    ) -> Result<Vec<f64>, ObjectiveError> {
        let logits = labels
            .iter()
            .map(|l| self.label_logprob(example, &[demo], l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(softmax(&logits))
    }

    /// Mixture of per-pair relation distributions weighted by the pairs' priors,
    /// renormalized over the supplied components.
    pub fn marginal_relation_scores(
        &self,
        example: &Example,
        components: &[MixtureComponent<'_>],
        labels: &[String],
    ) -> Result<RelationDistribution, ObjectiveError> {
        if labels.is_empty() {
            return Err(ObjectiveError::EmptySchema);
        }
        if components.is_empty() {
            return Err(ObjectiveError::EmptyMixture);
        }
        self.ensure_scoring()?;
        let mut order: Vec<usize> = (0..components.len()).collect();
        order.sort_by(|&a, &b| {
            components[a]
                .pair
                .cmp(&components[b].pair)
                .then_with(|| components[a].demo.id.cmp(&components[b].demo.id))
        });
        let priors: Vec<f64> = order.iter().map(|&i| components[i].prior_logprob).collect();
        let weights = softmax(&priors);

        let mut mixture = vec![0.0; labels.len()];
        for (&i, w) in order.iter().zip(weights) {
            let cond = self.conditional_relation_scores(example, components[i].demo, labels)?;
            for (m, c) in mixture.iter_mut().zip(cond) {
                *m += w * c;
            }
        }
        let total: f64 = mixture.iter().sum();
        Ok(RelationDistribution {
            scores: labels
                .iter()
                .zip(mixture)
                .map(|(l, s)| LabelScore {
                    label: l.clone(),
                    score: s / total,
                })
                .collect(),
            normalized: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;
    use crate::lm_backend::{Fallback, Matcher, Rule, ScriptedBackend, ScriptedSpec};
    use crate::prompting::Templates;
    use proptest::prelude::*;

    fn ex(id: &str, h: &str, t: &str, rel: &str) -> Example {
        Example {
            id: id.into(),
            tokens: format!("{h} near {t}").split(' ').map(String::from).collect(),
            head: Mention::new(h),
            tail: Mention::new(t),
            relation: rel.into(),
        }
    }

    fn key(h: &str, t: &str) -> PairKey {
        PairKey {
            head: h.into(),
            tail: t.into(),
        }
    }

    #[test]
    fn uniform_recall_loss_is_mean_token_count_times_ln_v() {
        let backend = ScriptedBackend::new(ScriptedSpec::uniform(4)).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let e = ex("e", "CMU", "Pittsburgh", "located_in");
        // 3 tokens and 4 tokens.
        let r = s.recall_loss(&e, &[key("A", "B"), key("New York", "NY")]).unwrap();
        let expected = 0.5 * (3.0 + 4.0) * 4f64.ln();
        assert!((r.loss - expected).abs() < 1e-12);
        assert_eq!(r.per_pair.len(), 2);
        assert!((r.per_pair[0].logprob + 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn recall_loss_with_explicitly_tokenized_pairs() {
        // Pair lines tokenized by the rule into 3 and 2 tokens, each at -ln 4.
        let ln4 = 4f64.ln();
        let spec = ScriptedSpec {
            rules: vec![
                Rule::new(Matcher::Any, "A | B").with_logprobs(vec![-ln4; 3]),
                Rule::new(Matcher::Any, "C | D")
                    .with_tokens(vec!["C |".into(), " D".into()])
                    .with_logprobs(vec![-ln4; 2]),
            ],
            ..Default::default()
        };
        let backend = ScriptedBackend::new(spec).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let e = ex("e", "x", "y", "r");
        let r = s.recall_loss(&e, &[key("A", "B"), key("C", "D")]).unwrap();
        assert!((r.loss - 3.4657).abs() < 1e-4, "{}", r.loss);
    }

    #[test]
    fn single_pair_recall_loss_sums_rule_logprobs() {
        let spec = ScriptedSpec {
            rules: vec![Rule::new(Matcher::Any, "A | B")
                .with_tokens(vec!["A |".into(), " B".into()])
                .with_logprobs(vec![-0.1, -0.2])],
            ..Default::default()
        };
        let backend = ScriptedBackend::new(spec).unwrap();
        let t = Templates::default();
        let r = Scorer::new(&backend, &t)
            .recall_loss(&ex("e", "x", "y", "r"), &[key("A", "B")])
            .unwrap();
        assert!((r.loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn recall_loss_requires_pairs() {
        let backend = ScriptedBackend::new(ScriptedSpec::uniform(4)).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        assert!(matches!(
            s.recall_loss(&ex("e", "x", "y", "r"), &[]),
            Err(ObjectiveError::EmptyPairs)
        ));
    }

    #[test]
    fn uniform_reason_loss_joint_context() {
        let backend = ScriptedBackend::new(ScriptedSpec::uniform(4)).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let e = ex("e", "CMU", "Pittsburgh", "located in");
        let d = ex("d", "MIT", "Cambridge", "located in");
        let loss = s.reason_loss(&e, &[&d], "located in", ReasonMode::JointContext).unwrap();
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((loss - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn literal_sum_of_two_demos() {
        let spec = ScriptedSpec {
            rules: vec![Rule::new(Matcher::Any, "located_in").with_logprobs(vec![-1.0])],
            ..Default::default()
        };
        let backend = ScriptedBackend::new(spec).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let e = ex("e", "CMU", "Pittsburgh", "located_in");
        let d1 = ex("d1", "MIT", "Cambridge", "located_in");
        let d2 = ex("d2", "Yale", "New Haven", "located_in");
        let loss = s
            .reason_loss(&e, &[&d1, &d2], "located_in", ReasonMode::LiteralSum)
            .unwrap();
        assert!((loss - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((loss - 0.3069).abs() < 1e-4);
    }

    #[test]
    fn joint_loss_is_additive_and_rejects_empty_demos() {
        let backend = ScriptedBackend::new(ScriptedSpec::uniform(4)).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let e = ex("e", "CMU", "Pittsburgh", "located in");
        let d = ex("d", "MIT", "Cambridge", "located in");
        let pairs = [key("A", "B"), key("C", "D E")];
        let b = s.joint_loss(&e, &pairs, &[&d], "located in", ReasonMode::JointContext).unwrap();
        assert_eq!(b.joint_loss, b.recall_loss + b.reason_loss);
        assert!((b.recall_loss - 3.5 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            s.joint_loss(&e, &pairs, &[], "located in", ReasonMode::JointContext),
            Err(ObjectiveError::EmptyDemonstrations)
        ));
    }

    fn marginal_fixture() -> (ScriptedBackend, Example, Example, Example) {
        let t = Templates::default();
        let e = ex("e", "CMU", "Pittsburgh", "r1");
        let d1 = ex("d1", "MIT", "Cambridge", "r1");
        let d2 = ex("d2", "Yale", "New Haven", "r2");
        let p1 = t.render_reason(&e, &[&d1]).text;
        let p2 = t.render_reason(&e, &[&d2]).text;
        let half = 0.5f64.ln();
        let spec = ScriptedSpec {
            rules: vec![
                // Demo 1: r1 certain, r2 negligible.
                Rule::new(Matcher::Exact(p1.clone()), "r1").with_logprobs(vec![0.0]),
                Rule::new(Matcher::Exact(p1), "r2").with_logprobs(vec![-60.0]),
                // Demo 2: r1 and r2 equally likely.
                Rule::new(Matcher::Exact(p2.clone()), "r1").with_logprobs(vec![half]),
                Rule::new(Matcher::Exact(p2), "r2").with_logprobs(vec![half]),
            ],
            fallback: Fallback::default(),
            max_context: None,
        };
        (ScriptedBackend::new(spec).unwrap(), e, d1, d2)
    }

    #[test]
    fn marginal_mixture_hand_computed() {
        let (backend, e, d1, d2) = marginal_fixture();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let labels = vec!["r1".to_string(), "r2".to_string()];
        let comps = [
            MixtureComponent { pair: key("MIT", "Cambridge"), prior_logprob: 0.6f64.ln(), demo: &d1 },
            MixtureComponent { pair: key("Yale", "New Haven"), prior_logprob: 0.4f64.ln(), demo: &d2 },
        ];
        let dist = s.marginal_relation_scores(&e, &comps, &labels).unwrap();
        assert!((dist.get("r1").unwrap() - 0.8).abs() < 1e-12);
        assert!((dist.get("r2").unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(dist.argmax(), Some("r1"));

        // Rescaling priors by a constant factor leaves the mixture unchanged.
        let scaled = [
            MixtureComponent { prior_logprob: 0.6f64.ln() - 7.0, ..comps[0].clone() },
            MixtureComponent { prior_logprob: 0.4f64.ln() - 7.0, ..comps[1].clone() },
        ];
        let again = s.marginal_relation_scores(&e, &scaled, &labels).unwrap();
        assert!((again.get("r1").unwrap() - 0.8).abs() < 1e-12);

        let single = s.marginal_relation_scores(&e, &comps[1..], &labels).unwrap();
        assert!((single.get("r1").unwrap() - 0.5).abs() < 1e-12);

        assert!(matches!(
            s.marginal_relation_scores(&e, &comps, &[]),
            Err(ObjectiveError::EmptySchema)
        ));
    }

    #[test]
    fn uniform_backend_gives_uniform_distribution() {
        let backend = ScriptedBackend::new(ScriptedSpec::uniform(7)).unwrap();
        let t = Templates::default();
        let s = Scorer::new(&backend, &t);
        let e = ex("e", "a", "b", "x");
        let d = ex("d", "c", "d", "x");
        let labels: Vec<String> = ["x", "y", "z_w"].iter().map(|s| s.to_string()).collect();
        let comps = [MixtureComponent { pair: key("c", "d"), prior_logprob: -3.0, demo: &d }];
        let dist = s.marginal_relation_scores(&e, &comps, &labels).unwrap();
        for l in &dist.scores {
            assert!((l.score - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn duplicating_pairs_leaves_recall_loss_unchanged(
            words in prop::collection::vec(("[a-z]{1,4}( [a-z]{1,4}){0,2}", "[a-z]{1,4}"), 1..6),
            v in 2u32..40,
        ) {
            let backend = ScriptedBackend::new(ScriptedSpec::uniform(v)).unwrap();
            let t = Templates::default();
            let s = Scorer::new(&backend, &t);
            let e = ex("e", "x", "y", "r");
            let pairs: Vec<PairKey> = words.iter().map(|(h, t)| key(h, t)).collect();
            let doubled: Vec<PairKey> = pairs.iter().chain(pairs.iter()).cloned().collect();
            let a = s.recall_loss(&e, &pairs).unwrap().loss;
            let b = s.recall_loss(&e, &doubled).unwrap().loss;
            prop_assert!(a >= 0.0 && a.is_finite());
            // Recall prompts differ in k, but the uniform backend ignores the prompt.
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

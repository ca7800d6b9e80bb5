//! Fixtures and brute-force reference implementations shared by test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use groundre::corpus::{Corpus, Example, Mention, Schema};
use groundre::pair_index::Grounding;
use rand::Rng;

pub fn example(id: &str, head: &str, tail: &str, relation: &str) -> Example {
    Example {
        id: id.into(),
        tokens: format!("{head} , {tail}").split(' ').filter(|s| !s.is_empty()).map(String::from).collect(),
        head: Mention::new(head),
        tail: Mention::new(tail),
        relation: relation.into(),
    }
}

pub fn corpus(schema: Vec<String>, na: &str, splits: Vec<(&str, Vec<Example>)>) -> Corpus {
    Corpus {
        schema: Schema::new(schema, na).unwrap(),
        splits: splits.into_iter().map(|(n, v)| (n.to_string(), v)).collect::<BTreeMap<_, _>>(),
    }
}

pub fn relation_names(n: usize) -> Vec<String> {
    (0..n).map(|r| format!("rel_{r}")).collect()
}

/// Entity surface with random spacing and case so normalization matters.
pub fn entity<R: Rng>(rng: &mut R, vocab: usize) -> String {
    let id = rng.random_range(0..vocab);
    let word = if rng.random_bool(0.2) { "ent" } else { "Ent" };
    let gap = if rng.random_bool(0.2) { "   " } else { " " };
    let pad = if rng.random_bool(0.1) { " " } else { "" };
    format!("{pad}{word}{gap}{id}{pad}")
}

/// Random train split: heads and tails from a `vocab`-sized entity pool.
pub fn random_train<R: Rng>(rng: &mut R, n: usize, vocab: usize, relations: &[String]) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let h = entity(rng, vocab);
            let t = entity(rng, vocab);
            let r = &relations[rng.random_range(0..relations.len())];
            Example {
                id: format!("x{i}"),
                tokens: vec!["w".into()],
                head: Mention::new(h),
                tail: Mention::new(t),
                relation: r.clone(),
            }
        })
        .collect()
}

/// Reference normalization: whitespace runs collapse, ends trim, optional lowercase.
pub fn brute_norm(s: &str, case_fold: bool) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if case_fold {
        collapsed.to_lowercase()
    } else {
        collapsed
    }
}

/// Linear scan for examples whose normalized pair equals the query's.
pub fn brute_retrieve<'a>(examples: &'a [Example], head: &str, tail: &str, case_fold: bool) -> Vec<&'a Example> {
    let (h, t) = (brute_norm(head, case_fold), brute_norm(tail, case_fold));
    examples
        .iter()
        .filter(|e| brute_norm(&e.head.text, case_fold) == h && brute_norm(&e.tail.text, case_fold) == t)
        .collect()
}

pub fn brute_classify(examples: &[Example], head: &str, tail: &str) -> Grounding {
    if !brute_retrieve(examples, head, tail, false).is_empty() {
        return Grounding::PairGrounded;
    }
    let known = |s: &str| {
        let s = brute_norm(s, false);
        examples
            .iter()
            .any(|e| brute_norm(&e.head.text, false) == s || brute_norm(&e.tail.text, false) == s)
    };
    match (known(head), known(tail)) {
        (true, true) => Grounding::EntitiesGroundedPairNot,
        (false, false) => Grounding::Ungrounded,
        _ => Grounding::OneEntityGrounded,
    }
}

/// Counts, precision, recall and F1 straight from the confusion table.
pub fn brute_micro_f1(gold: &[String], pred: &[String], na: &str) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        match (g.as_str() == na, p.as_str() == na) {
            (true, true) => {}
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {
                if g == p {
                    tp += 1;
                } else {
                    fp += 1;
                    fn_ += 1;
                }
            }
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// `|observed - n p| <= z sqrt(n p (1 - p))`.
pub fn within_binomial(observed: usize, n: usize, p: f64, z: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (observed as f64 - mean).abs() <= z * sd
}

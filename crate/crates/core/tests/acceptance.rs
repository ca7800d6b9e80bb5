//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use groundre::corpus::{Corpus, Example};
use groundre::evaluation::{micro_f1, Labeled, ValidnessReport};
use groundre::lm_backend::{Matcher, Rule, RuleUse, ScriptedBackend, ScriptedSpec};
use groundre::objectives::{ReasonMode, Scorer};
use groundre::pair_index::{build_index, EntityPair, NormConfig, PairIndex, PairKey};
use groundre::pipeline::{run_split, Mode, PipelineConfig, ValidnessBuckets};
use groundre::prompting::{format_pair_line, Templates};
use groundre::rng;
use groundre::tuning_emitter::{instances, write_task, EmitConfig, NoiseConfig, Task};
use rand::seq::IndexedRandom;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(elapsed < budget, format!("took {elapsed:?}, budget {budget:?}"))
}

fn words<R: Rng>(r: &mut R, prefix: &str, max: usize) -> String {
    (0..r.random_range(1..=max))
        .map(|i| format!("{prefix}{}w{i}", r.random_range(0..1000)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn objective_oracle() -> Outcome {
    let start = Instant::now();
    let t = Templates::default();
    let mut r = rng::stream(1, "acceptance", "objective");
    let trials = 300;
    for _ in 0..trials {
        let v: u32 = r.random_range(2..=64);
        let backend = ScriptedBackend::new(ScriptedSpec::uniform(v)).unwrap();
        let scorer = Scorer::new(&backend, &t);
        let ln_v = (v as f64).ln();

        let pairs: Vec<PairKey> = (0..r.random_range(1..=6))
            .map(|_| PairKey::new(&words(&mut r, "h", 4), &words(&mut r, "t", 4), &NormConfig::default()))
            .collect();
        let e = example("q", "Query head", "query tail", "x");
        let got = scorer.recall_loss(&e, &pairs).map_err(|e| e.to_string())?.loss;
        let mut distinct = pairs.clone();
        distinct.sort();
        distinct.dedup();
        let mean_tokens = distinct
            .iter()
            .map(|p| format_pair_line(&p.head, &p.tail).split_whitespace().count() as f64)
            .sum::<f64>()
            / distinct.len() as f64;
        check((got - mean_tokens * ln_v).abs() < 1e-9, format!("recall V={v}: {got} vs {}", mean_tokens * ln_v))?;

        let label = words(&mut r, "l", 3);
        let demos: Vec<Example> = (0..r.random_range(1..=5))
            .map(|i| example(&format!("d{i}"), "Demo head", "demo tail", &label))
            .collect();
        let refs: Vec<&Example> = demos.iter().collect();
        let got = scorer.reason_loss(&e, &refs, &label, ReasonMode::JointContext).map_err(|e| e.to_string())?;
        let want = label.split_whitespace().count() as f64 * ln_v;
        check((got - want).abs() < 1e-9, format!("reason V={v}: {got} vs {want}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{trials} random vocabularies in {:?}", start.elapsed()))
}

fn literal_sum_fidelity() -> Outcome {
    let start = Instant::now();
    let t = Templates::default();
    let mut r = rng::stream(2, "acceptance", "literal-sum");
    let mut worst = 0f64;
    for i in 0..1000 {
        let label_tokens = r.random_range(1..=3);
        let label = (0..label_tokens).map(|k| format!("g{k}")).collect::<Vec<_>>().join(" ");
        let e = example(&format!("q{i}"), "Q", "R", &label);
        let demos: Vec<Example> = (0..r.random_range(1..=8))
            .map(|j| example(&format!("d{j}"), &format!("D{j}"), "E", &label))
            .collect();
        let refs: Vec<&Example> = demos.iter().collect();
        let label_lps: Vec<Vec<f64>> = refs
            .iter()
            .map(|_| (0..label_tokens).map(|_| -r.random_range(0.0..8.0)).collect())
            .collect();
        let rules = refs
            .iter()
            .zip(&label_lps)
            .map(|(d, lps)| {
                Rule::new(Matcher::Exact(t.render_reason(&e, &[d]).text), label.clone())
                    .with_logprobs(lps.clone())
                    .only(RuleUse::Score)
            })
            .collect();
        let backend = ScriptedBackend::new(ScriptedSpec { rules, ..Default::default() }).map_err(|e| e.to_string())?;
        let loss = Scorer::new(&backend, &t)
            .reason_loss(&e, &refs, &label, ReasonMode::LiteralSum)
            .map_err(|e| e.to_string())?;
        let naive = -label_lps.iter().map(|lps| lps.iter().sum::<f64>().exp()).sum::<f64>().ln();
        worst = worst.max((loss - naive).abs());
    }
    check(worst < 1e-9, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 instances, max deviation {worst:e}, {:?}", start.elapsed()))
}

fn retrieval_equivalence() -> Outcome {
    let mut retrieve_time = Duration::ZERO;
    let mut ungrounded = 0usize;
    for c in 0..100u64 {
        let mut r = rng::stream(c, "acceptance", "retrieval");
        let n = r.random_range(1..=10_000);
        let vocab = r.random_range(5..=400);
        let relations = relation_names(r.random_range(1..=8));
        let train = random_train(&mut r, n, vocab, &relations);
        let case_fold = r.random_bool(0.5);
        let corpus = corpus(relations, "NA", vec![("train", train.clone())]);
        let idx = build_index(&corpus, "train", NormConfig { case_fold }).map_err(|e| e.to_string())?;

        let normalized: Vec<(String, String)> = train
            .iter()
            .map(|e| (brute_norm(&e.head.text, case_fold), brute_norm(&e.tail.text, case_fold)))
            .collect();
        for _ in 0..1000 {
            let (h, t) = if r.random_bool(0.5) {
                let e = &train[r.random_range(0..train.len())];
                let respace = |s: &str| format!(" {} ", s.split_whitespace().collect::<Vec<_>>().join("  "));
                let h = if case_fold { e.head.text.to_uppercase() } else { e.head.text.clone() };
                (respace(&h), respace(&e.tail.text))
            } else {
                // A widened vocabulary makes part of these ungrounded.
                (entity(&mut r, vocab + vocab / 4 + 1), entity(&mut r, vocab + vocab / 4 + 1))
            };
            let query = EntityPair::new(h.clone(), t.clone());
            let clock = Instant::now();
            let got = idx.retrieve(&query);
            retrieve_time += clock.elapsed();

            let key = (brute_norm(&h, case_fold), brute_norm(&t, case_fold));
            let want: Vec<&str> = normalized
                .iter()
                .zip(&train)
                .filter(|(k, _)| **k == key)
                .map(|(_, e)| e.id.as_str())
                .collect();
            ungrounded += usize::from(want.is_empty());
            let got: Vec<&str> = got.iter().map(|e| e.id.as_str()).collect();
            check(got == want, format!("corpus {c}, query {h:?}/{t:?}: {got:?} vs {want:?}"))?;
        }
    }
    within(retrieve_time, Duration::from_secs(30))?;
    Ok(format!("100 corpora x 1000 queries ({ungrounded} ungrounded), retrieval {retrieve_time:?}"))
}

/// `per` training examples with distinct pairs per relation, plus `tests`
/// test examples per relation.
fn synthetic(rels: usize, per: usize, tests: usize) -> Corpus {
    let relations = relation_names(rels);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, rel) in relations.iter().enumerate() {
        for i in 0..per {
            train.push(example(&format!("tr{r}_{i}"), &format!("H{r}_{i}"), &format!("T{r}_{i}"), rel));
        }
        for i in 0..tests {
            test.push(example(&format!("te{r}_{i}"), &format!("Q{r}_{i}"), &format!("R{r}_{i}"), rel));
        }
    }
    corpus(relations, "NA", vec![("train", train), ("test", test)])
}

fn recall_match(e: &Example) -> Matcher {
    Matcher::Contains(format!("Head: {}\nTail: {}\n\nOutput format", e.head.text, e.tail.text))
}

/// Recalls `k` training pairs of relation `pick(gold)` for each test example
/// and echoes the gold relation when reasoning.
fn oracle_backend(c: &Corpus, k: usize, pick: impl Fn(usize) -> usize) -> ScriptedBackend {
    let rels = c.schema.relations.len();
    let mut r = rng::stream(3, "acceptance", "oracle");
    let mut rules = Vec::new();
    for e in c.split("test").unwrap() {
        let gold = c.schema.relations.iter().position(|x| *x == e.relation).unwrap();
        let source = pick(gold) % rels;
        let pool: Vec<&Example> = c.split("train").unwrap().iter().filter(|t| t.relation == c.schema.relations[source]).collect();
        let lines: Vec<String> = pool
            .choose_multiple(&mut r, k)
            .map(|t| format_pair_line(&t.head.text, &t.tail.text))
            .collect();
        rules.push(Rule::new(recall_match(e), lines.join("\n")).only(RuleUse::Generate));
        rules.push(
            Rule::new(Matcher::Suffix(format!("Head: {}\nTail: {}\nRelation: ", e.head.text, e.tail.text)), e.relation.clone())
                .only(RuleUse::Generate),
        );
    }
    ScriptedBackend::new(ScriptedSpec { rules, ..ScriptedSpec::uniform(16) }).unwrap()
}

fn predict(backend: &ScriptedBackend, c: &Corpus, idx: &PairIndex, mode: Mode, parallelism: usize) -> Result<Vec<u8>, String> {
    let cfg = PipelineConfig { mode, parallelism, ..Default::default() };
    let mut out = Vec::new();
    run_split(backend, idx, &Templates::default(), &c.schema, c.split("test").unwrap(), &cfg, |rec| {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(out)
}

fn f1_of(c: &Corpus, jsonl: &[u8]) -> Result<f64, String> {
    let predicted: Vec<String> = jsonl
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice::<serde_json::Value>(l).unwrap()["predicted"].as_str().unwrap().to_string())
        .collect();
    let test = c.split("test").unwrap();
    check(predicted.len() == test.len(), "missing records")?;
    let gold: Vec<Labeled> = test.iter().map(|e| Labeled { id: &e.id, label: &e.relation }).collect();
    let pred: Vec<Labeled> = test.iter().zip(&predicted).map(|(e, p)| Labeled { id: &e.id, label: p }).collect();
    Ok(micro_f1(&gold, &pred, "NA").map_err(|e| e.to_string())?.f1)
}

fn end_to_end_oracle() -> Outcome {
    let k = 5;
    let c = synthetic(6, 8, 12);
    let idx = build_index(&c, "train", NormConfig::default()).unwrap();
    let gold = oracle_backend(&c, k, |g| g);
    let mut details = Vec::new();
    for mode in [Mode::MajorityVote, Mode::Icl] {
        let serial = predict(&gold, &c, &idx, mode, 1)?;
        let parallel = predict(&gold, &c, &idx, mode, 8)?;
        check(serial == parallel, format!("{mode:?}: parallelism changed the output"))?;
        let f1 = f1_of(&c, &serial)?;
        check(f1 == 1.0, format!("{mode:?}: f1 {f1}"))?;
        details.push(format!("{mode:?} f1=1"));
    }
    let wrong = oracle_backend(&c, k, |g| g + 1);
    let serial = predict(&wrong, &c, &idx, Mode::MajorityVote, 1)?;
    check(serial == predict(&wrong, &c, &idx, Mode::MajorityVote, 8)?, "parallelism changed the output")?;
    let f1 = f1_of(&c, &serial)?;
    check(f1 == 0.0, format!("different-relation f1 {f1}"))?;
    details.push("different-relation f1=0".into());
    Ok(details.join(", "))
}

fn validness_arithmetic() -> Outcome {
    let report = |valid: usize, total: usize| {
        ValidnessReport::from_buckets(
            0,
            ValidnessBuckets { pair_grounded: valid, ungrounded: total - valid, ..Default::default() },
        )
        .ratio_percent
    };
    let a = report(13_023, 13_585);
    let b = report(73_482, 77_545);
    check(a == "95.86%" && b == "94.76%", format!("{a}, {b}"))?;

    let c = synthetic(11, 6, 247);
    check(c.split("test").unwrap().len() == 2717, "fixture size")?;
    let idx = build_index(&c, "train", NormConfig::default()).unwrap();
    let lines: Vec<String> = (0..5).map(|i| format_pair_line(&format!("H0_{i}"), &format!("T1_{i}"))).collect();
    let backend = ScriptedBackend::new(ScriptedSpec {
        rules: vec![Rule::new(Matcher::Any, lines.join("\n"))],
        ..Default::default()
    })
    .unwrap();
    let cfg = PipelineConfig { mode: Mode::MajorityVote, parallelism: 4, ..Default::default() };
    let summary = run_split(&backend, &idx, &Templates::default(), &c.schema, c.split("test").unwrap(), &cfg, |_| Ok(()))
        .map_err(|e| e.to_string())?;
    let audited = summary.validness.total();
    check(audited == 13_585, format!("{audited} audited pairs"))?;
    Ok(format!("{a}, {b}, {audited} audited pairs over {} records", summary.records))
}

fn noise_statistics() -> Outcome {
    let c = synthetic(10, 1000, 0);
    let idx = build_index(&c, "train", NormConfig::default()).unwrap();
    let cfg = EmitConfig { k: 5, seed: 2024, noise: NoiseConfig { p_noise: 0.5 } };
    let mut emitted = 0usize;
    let mut noised = 0usize;
    let mut hist = [0usize; 6];
    let mut shared = 0usize;
    for item in instances(Task::Reason, &idx, &Templates::default(), &cfg) {
        let inst = item.map_err(|s| format!("skipped {}", s.example_id))?;
        emitted += 1;
        check(inst.meta.demonstration_ids.len() == 5, "shortfall in fixture")?;
        if inst.meta.noised {
            noised += 1;
            hist[inst.meta.k_star] += 1;
        }
        let source = &idx.example(&inst.example_id).unwrap().relation;
        for &slot in &inst.meta.distractor_slots {
            let d = idx.example(&inst.meta.demonstration_ids[slot]).unwrap();
            shared += usize::from(&d.relation == source);
        }
    }
    check(emitted == 10_000, format!("{emitted} instances"))?;
    check(within_binomial(noised, emitted, 0.5, 3.0), format!("noised {noised}/{emitted}"))?;
    check(hist[0] == 0, "noised instance with k*=0")?;
    for (k_star, &count) in hist.iter().enumerate().skip(1) {
        check(within_binomial(count, noised, 0.2, 3.0), format!("k*={k_star}: {count}/{noised}"))?;
    }
    check(shared == 0, format!("{shared} same-relation distractors"))?;
    Ok(format!("noised {noised}/{emitted}, k* counts {:?}, same-relation distractors 0", &hist[1..]))
}

fn metric_oracle() -> Outcome {
    let mut r = rng::stream(4, "acceptance", "metric");
    let labels = ["NA", "a", "b", "c"];
    let mut edge = 0usize;
    for case in 0..100_000 {
        let n = r.random_range(0..=12);
        // Every tenth list is drawn from NA only.
        let pool: &[&str] = if case % 10 == 0 { &labels[..1] } else { &labels };
        let gold: Vec<String> = (0..n).map(|_| pool.choose(&mut r).unwrap().to_string()).collect();
        let pred: Vec<String> = (0..n).map(|_| pool.choose(&mut r).unwrap().to_string()).collect();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let g: Vec<Labeled> = ids.iter().zip(&gold).map(|(id, l)| Labeled { id, label: l }).collect();
        let p: Vec<Labeled> = ids.iter().zip(&pred).map(|(id, l)| Labeled { id, label: l }).collect();
        let got = micro_f1(&g, &p, "NA").map_err(|e| e.to_string())?;
        let (bp, br, bf) = brute_micro_f1(&gold, &pred, "NA");
        if got.counts.predicted_non_na == 0 || got.counts.gold_non_na == 0 {
            edge += 1;
        }
        let ok = (got.precision - bp).abs() < 1e-12 && (got.recall - br).abs() < 1e-12 && (got.f1 - bf).abs() < 1e-12;
        check(ok, format!("case {case}: {got:?} vs ({bp}, {br}, {bf})"))?;
    }
    Ok(format!("100000 lists, {edge} with a zero denominator"))
}

fn reproducibility() -> Outcome {
    let c = synthetic(5, 9, 10);
    let idx = build_index(&c, "train", NormConfig::default()).unwrap();
    let backend = oracle_backend(&c, 5, |g| g);
    for mode in [Mode::Icl, Mode::MajorityVote, Mode::Marginal] {
        let runs = [
            predict(&backend, &c, &idx, mode, 1)?,
            predict(&backend, &c, &idx, mode, 1)?,
            predict(&backend, &c, &idx, mode, 8)?,
        ];
        check(runs[0] == runs[1] && runs[0] == runs[2], format!("{mode:?} predictions differ"))?;
    }
    let t = Templates::default();
    let cfg = EmitConfig { k: 5, seed: 9, noise: NoiseConfig::default() };
    for task in [Task::Recall, Task::Reason] {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let sa = write_task(task, &idx, &t, &cfg, &mut a).map_err(|e| e.to_string())?;
        let sb = write_task(task, &idx, &t, &cfg, &mut b).map_err(|e| e.to_string())?;
        check(a == b && sa.sha256 == sb.sha256 && !a.is_empty(), format!("{task:?} tuning files differ"))?;
    }
    Ok("predictions in three modes and both tuning files byte-identical".into())
}

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("objective oracle", objective_oracle),
        ("literal-sum fidelity", literal_sum_fidelity),
        ("retrieval equivalence", retrieval_equivalence),
        ("validness arithmetic", validness_arithmetic),
        ("end-to-end oracle", end_to_end_oracle),
        ("noise statistics", noise_statistics),
        ("metric oracle", metric_oracle),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

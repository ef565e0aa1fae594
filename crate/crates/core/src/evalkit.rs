//! Coverage and sampling-rate metrics, the uniform head-sampling baseline,
//! and a seeded synthetic workload generator (see [`synth`]).

pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{Decision, Reason};
use crate::error::{Error, Result};

/// Ground-truth trace ids a sampler is expected to capture, each tagged with
/// the kind of anomaly that earned it the label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    labels: BTreeMap<String, String>,
    /// Free-form note about where the labels came from.
    pub source: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    trace_id: String,
    kind: String,
}

impl LabelSet {
    pub fn new(source: impl Into<String>) -> LabelSet {
        LabelSet { labels: BTreeMap::new(), source: source.into() }
    }

    /// Adds a label; the first kind recorded for an id wins. Returns whether
    /// the id was new.
    pub fn insert(&mut self, trace_id: impl Into<String>, kind: impl Into<String>) -> bool {
        let mut fresh = false;
        self.labels.entry(trace_id.into()).or_insert_with(|| {
            fresh = true;
            kind.into()
        });
        fresh
    }

    pub fn contains(&self, trace_id: &str) -> bool {
        self.labels.contains_key(trace_id)
    }

    pub fn kind_of(&self, trace_id: &str) -> Option<&str> {
        self.labels.get(trace_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.labels.iter().map(|(id, kind)| (id.as_str(), kind.as_str()))
    }

    pub fn from_jsonl<R: Read>(reader: R, source: impl Into<String>) -> Result<LabelSet> {
        let mut set = LabelSet::new(source);
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LabelLine = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: idx + 1, source: e })?;
            set.insert(parsed.trace_id, parsed.kind);
        }
        Ok(set)
    }

    pub fn from_jsonl_file(path: &Path) -> Result<LabelSet> {
        let file = std::fs::File::open(path)?;
        LabelSet::from_jsonl(file, path.display().to_string())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (trace_id, kind) in &self.labels {
            let line = serde_json::to_string(&LabelLine {
                trace_id: trace_id.clone(),
                kind: kind.clone(),
            })
            .expect("label serialization cannot fail");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Sampled/decided tallies for one decision reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonBreakdown {
    pub decided: u64,
    pub sampled: u64,
}

/// The evaluation summary: how much of the labeled ground truth was captured
/// and at what overall sampling cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub coverage: f64,
    pub sampling_rate: f64,
    pub observed: u64,
    pub sampled: u64,
    pub labeled: u64,
    pub labeled_sampled: u64,
    pub by_reason: BTreeMap<String, ReasonBreakdown>,
}

/// Computes coverage (captured labels over all labels; vacuously 1.0 with no
/// labels) and sampling rate (sampled over observed; 0 on an empty log).
/// Pure: the result is invariant under permutation of the decision lines.
pub fn evaluate(decisions: &[Decision], labels: &LabelSet) -> EvalReport {
    let mut sampled_ids: BTreeSet<&str> = BTreeSet::new();
    let mut sampled = 0u64;
    let mut by_reason: BTreeMap<String, ReasonBreakdown> = BTreeMap::new();
    for d in decisions {
        let slot = by_reason.entry(reason_key(d.reason)).or_default();
        slot.decided += 1;
        if d.sampled {
            sampled += 1;
            slot.sampled += 1;
            sampled_ids.insert(&d.trace_id);
        }
    }
    let labeled_sampled =
        labels.iter().filter(|(id, _)| sampled_ids.contains(id)).count() as u64;
    let observed = decisions.len() as u64;
    let labeled = labels.len() as u64;
    EvalReport {
        coverage: if labeled == 0 { 1.0 } else { labeled_sampled as f64 / labeled as f64 },
        sampling_rate: if observed == 0 { 0.0 } else { sampled as f64 / observed as f64 },
        observed,
        sampled,
        labeled,
        labeled_sampled,
        by_reason,
    }
}

fn reason_key(reason: Reason) -> String {
    match reason {
        Reason::PmcBudget => "PMC_BUDGET",
        Reason::OmcRare => "OMC_RARE",
        Reason::NewOmc => "NEW_OMC",
    }
    .to_string()
}

/// Reads a decision log (one JSON object per line), reporting the offending
/// line number on parse failure.
pub fn read_decision_log<R: Read>(reader: R) -> Result<Vec<Decision>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Decision = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, source: e })?;
        out.push(d);
    }
    Ok(out)
}

pub fn read_decision_log_file(path: &Path) -> Result<Vec<Decision>> {
    let file = std::fs::File::open(path)?;
    read_decision_log(file)
}

/// Head-sampling baseline: each id is kept independently with probability
/// `budget`, drawn from a seeded generator in list order.
pub fn uniform_baseline(trace_ids: &[String], budget: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::InvalidParams(format!(
            "budget must lie in [0, 1], got {budget}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(trace_ids
        .iter()
        .filter(|_| rng.gen_bool(budget))
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(id: &str, sampled: bool, reason: Reason) -> Decision {
        Decision {
            trace_id: id.to_string(),
            sampled,
            reason,
            probability: if sampled { 1.0 } else { 0.0 },
            cluster_id: 0,
            tick: 0.0,
        }
    }

    #[test]
    fn hand_counted_nested_sets() {
        // 3 labeled ⊂ 7 sampled ⊂ 20 observed
        let mut decisions = Vec::new();
        for i in 0..20 {
            decisions.push(decision(&format!("t{i}"), i < 7, Reason::NewOmc));
        }
        let mut labels = LabelSet::new("test");
        for i in 0..3 {
            labels.insert(format!("t{i}"), "synthetic");
        }
        let r = evaluate(&decisions, &labels);
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.sampling_rate, 0.35);
        assert_eq!((r.observed, r.sampled, r.labeled, r.labeled_sampled), (20, 7, 3, 3));
    }

    #[test]
    fn perfect_coverage_at_table_scale() {
        // all 624 labeled traces among 744 sampled out of 31 814 observed
        let mut decisions = Vec::new();
        for i in 0..31_814 {
            let sampled = i < 744;
            let reason = if sampled { Reason::OmcRare } else { Reason::PmcBudget };
            decisions.push(decision(&format!("t{i}"), sampled, reason));
        }
        let mut labels = LabelSet::new("test");
        for i in 0..624 {
            labels.insert(format!("t{i}"), "fault");
        }
        let r = evaluate(&decisions, &labels);
        assert_eq!(r.coverage, 1.0);
        assert!((r.sampling_rate - 0.0234).abs() < 1e-4, "rate {}", r.sampling_rate);
    }

    #[test]
    fn zero_sampled_zero_rate() {
        let decisions = vec![decision("a", false, Reason::PmcBudget)];
        let mut labels = LabelSet::new("test");
        labels.insert("a", "fault");
        let r = evaluate(&decisions, &labels);
        assert_eq!(r.coverage, 0.0);
        assert_eq!(r.sampling_rate, 0.0);
    }

    #[test]
    fn empty_labels_mean_vacuous_coverage() {
        let decisions = vec![decision("a", true, Reason::NewOmc)];
        let r = evaluate(&decisions, &LabelSet::new("none"));
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.sampling_rate, 1.0);
    }

    #[test]
    fn labels_missing_from_log_count_as_uncovered() {
        let decisions = vec![decision("a", true, Reason::NewOmc)];
        let mut labels = LabelSet::new("test");
        labels.insert("a", "fault");
        labels.insert("ghost", "fault");
        let r = evaluate(&decisions, &labels);
        assert_eq!(r.coverage, 0.5);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let mut decisions: Vec<Decision> = (0..30)
            .map(|i| {
                let reason = match i % 3 {
                    0 => Reason::PmcBudget,
                    1 => Reason::OmcRare,
                    _ => Reason::NewOmc,
                };
                decision(&format!("t{i}"), i % 4 == 0, reason)
            })
            .collect();
        let mut labels = LabelSet::new("test");
        labels.insert("t0", "fault");
        labels.insert("t8", "fault");
        let before = evaluate(&decisions, &labels);
        decisions.reverse();
        decisions.swap(3, 17);
        assert_eq!(evaluate(&decisions, &labels), before);
    }

    #[test]
    fn label_dedupe_keeps_first_kind() {
        let mut labels = LabelSet::new("test");
        assert!(labels.insert("a", "first"));
        assert!(!labels.insert("a", "second"));
        assert_eq!(labels.kind_of("a"), Some("first"));
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn labels_roundtrip_through_jsonl() {
        let mut labels = LabelSet::new("roundtrip");
        labels.insert("b", "truncation");
        labels.insert("a", "latency-spike");
        let mut buf = Vec::new();
        labels.write_jsonl(&mut buf).unwrap();
        let back = LabelSet::from_jsonl(&buf[..], "roundtrip").unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn decision_log_parse_error_names_the_line() {
        let text = b"{\"trace_id\":\"a\",\"sampled\":true,\"reason\":\"NEW_OMC\",\"probability\":1.0,\"cluster_id\":0,\"tick\":0.0}\nnot json\n";
        match read_decision_log(&text[..]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn uniform_baseline_edges_and_binomial_center() {
        let ids: Vec<String> = (0..100_000).map(|i| format!("t{i}")).collect();
        assert_eq!(uniform_baseline(&ids, 1.0, 1).unwrap().len(), ids.len());
        assert!(uniform_baseline(&ids, 0.0, 1).unwrap().is_empty());
        let got = uniform_baseline(&ids, 0.01, 7).unwrap().len() as f64;
        let sigma = (100_000.0f64 * 0.01 * 0.99).sqrt();
        assert!((got - 1000.0).abs() <= 5.0 * sigma, "count {got}");
        assert!(uniform_baseline(&ids, 1.5, 1).is_err());
    }

    #[test]
    fn uniform_baseline_is_seed_deterministic() {
        let ids: Vec<String> = (0..500).map(|i| format!("t{i}")).collect();
        assert_eq!(
            uniform_baseline(&ids, 0.2, 9).unwrap(),
            uniform_baseline(&ids, 0.2, 9).unwrap()
        );
        assert_ne!(
            uniform_baseline(&ids, 0.2, 9).unwrap(),
            uniform_baseline(&ids, 0.2, 10).unwrap()
        );
    }
}

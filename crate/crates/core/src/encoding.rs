//! Trace → sparse vector encoding.
//!
//! Each node contributes its call path (the span-type sequence from the root
//! down to it) as a dimension, valued by the order of magnitude of the
//! node's duration. Two traces agree on a dimension exactly when they share
//! the call path at a comparable latency scale; everything absent is an
//! implicit zero, so the vectors stay as sparse as the traces are small.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::trace_model::Trace;

/// Joins span types into a call-path key. Span types containing it are
/// rejected so keys stay unambiguous.
pub const PATH_SEPARATOR: &str = "→";

/// Order-of-magnitude bucket of a duration in microseconds, offset so that
/// presence is always distinguishable from absence: bucket(d) =
/// floor(log10(max(d, 1))) + 1 ≥ 1. Computed as a decimal digit count to
/// dodge float boundary trouble at exact powers of ten.
pub fn bucket_duration(duration_us: u64) -> u32 {
    let mut d = duration_us.max(1);
    let mut digits = 0u32;
    while d > 0 {
        d /= 10;
        digits += 1;
    }
    digits
}

/// A root-to-node span-type sequence. Ordering and equality go through the
/// joined key, which determines the components uniquely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallPath {
    components: Vec<String>,
    key: String,
}

impl CallPath {
    pub fn new(components: Vec<String>) -> Result<CallPath> {
        assert!(!components.is_empty(), "call path needs at least one component");
        for c in &components {
            if c.contains(PATH_SEPARATOR) {
                return Err(Error::IllegalSpanType(c.clone()));
            }
        }
        let key = components.join(PATH_SEPARATOR);
        Ok(CallPath { components, key })
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn key(&self) -> &str {
        &self.key
    }
}

impl PartialOrd for CallPath {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CallPath {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Sparse encoding of one trace: path key → duration bucket. Entries are
/// keyed in lexicographic path order, which fixes iteration order for
/// everything downstream.
#[derive(Debug, Clone)]
pub struct SparseTraceVector {
    pub trace_id: String,
    pub entries: BTreeMap<CallPath, u32>,
}

impl SparseTraceVector {
    /// Cosine similarity against another sparse vector (absent entries are
    /// zeros). Zero-norm vectors are defined as similarity 0.
    pub fn cosine(&self, other: &SparseTraceVector) -> f64 {
        let mut dot = 0f64;
        for (p, &v) in &self.entries {
            if let Some(&w) = other.entries.get(p) {
                dot += v as f64 * w as f64;
            }
        }
        let na: f64 = self.entries.values().map(|&v| (v as f64).powi(2)).sum();
        let nb: f64 = other.entries.values().map(|&v| (v as f64).powi(2)).sum();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Enumerate (call path, bucket) pairs, one per node, in BFS order with the
/// tree's deterministic child ordering. Duplicate paths (same-type siblings)
/// are *not* collapsed here; [`encode_trace`] does that.
pub fn extract_call_paths(trace: &Trace) -> Result<Vec<(CallPath, u32)>> {
    let mut paths: Vec<Option<CallPath>> = vec![None; trace.nodes.len()];
    let mut out = Vec::with_capacity(trace.nodes.len());
    for i in trace.bfs_order() {
        let node = &trace.nodes[i];
        let span_type = node.span_type();
        let parent_components = paths[i]
            .as_ref()
            .map(|p: &CallPath| p.components().to_vec())
            .unwrap_or_default();
        let mut components = parent_components;
        components.push(span_type);
        let path = CallPath::new(components)?;
        for &c in &node.children {
            paths[c] = Some(path.clone());
        }
        out.push((path, bucket_duration(node.duration_us)));
    }
    Ok(out)
}

/// Encode a trace as a sparse vector. Same-type siblings map to one key;
/// the slowest occurrence wins (max bucket) so the worst latency at a call
/// site is what the vector reflects.
pub fn encode_trace(trace: &Trace) -> Result<SparseTraceVector> {
    let mut entries: BTreeMap<CallPath, u32> = BTreeMap::new();
    for (path, bucket) in extract_call_paths(trace)? {
        let e = entries.entry(path).or_insert(0);
        *e = (*e).max(bucket);
    }
    Ok(SparseTraceVector {
        trace_id: trace.trace_id.clone(),
        entries,
    })
}

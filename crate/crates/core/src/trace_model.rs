//! Span records and trace-tree assembly.
//!
//! Spans arrive as independent JSONL records and are grouped by `trace_id`
//! into trees. Assembly is defensive: orphaned spans are adopted under the
//! root (flagged), extra parentless spans are adopted likewise, and traces
//! with duplicate span ids or cyclic parent links are rejected and counted
//! rather than aborting the stream.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

/// One span as it appears on the wire. Unknown fields are ignored; a null or
/// absent `parent_span_id` marks a root span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub trace_id: String,
    pub span_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_span_id: Option<String>,
    pub service: String,
    pub operation: String,
    pub start_us: u64,
    pub duration_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

impl SpanRecord {
    /// Span identity used for structural encoding: `service:operation`.
    /// Operation names alone collide across services too often to be useful.
    pub fn span_type(&self) -> String {
        format!("{}:{}", self.service, self.operation)
    }
}

/// A node of an assembled trace tree. `adopted` marks spans that were not in
/// their declared position (orphaned or extra-root) and were re-parented
/// under the root.
#[derive(Debug, Clone)]
pub struct SpanNode {
    pub span_id: String,
    pub service: String,
    pub operation: String,
    pub start_us: u64,
    pub duration_us: u64,
    pub status: Option<String>,
    pub adopted: bool,
    pub children: Vec<usize>,
}

impl SpanNode {
    pub fn span_type(&self) -> String {
        format!("{}:{}", self.service, self.operation)
    }
}

/// An assembled trace: an arena of nodes plus the root index. Children are
/// kept sorted by (span_type, start_us, span_id) so traversal order — and
/// everything derived from it — is deterministic.
#[derive(Debug, Clone)]
pub struct Trace {
    pub trace_id: String,
    pub nodes: Vec<SpanNode>,
    pub root: usize,
}

impl Trace {
    pub fn span_count(&self) -> usize {
        self.nodes.len()
    }

    /// Node indices in breadth-first order from the root, children in their
    /// sorted order.
    pub fn bfs_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(self.root);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            queue.extend(self.nodes[i].children.iter().copied());
        }
        order
    }

    /// Re-serialize to span records (BFS order). Adopted spans are emitted
    /// with the root as their parent, so one round trip reaches a fixed
    /// point: re-assembling the output reproduces this tree exactly.
    pub fn to_span_records(&self) -> Vec<SpanRecord> {
        let mut parent_of: Vec<Option<usize>> = vec![None; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &c in &n.children {
                parent_of[c] = Some(i);
            }
        }
        self.bfs_order()
            .into_iter()
            .map(|i| {
                let n = &self.nodes[i];
                SpanRecord {
                    trace_id: self.trace_id.clone(),
                    span_id: n.span_id.clone(),
                    parent_span_id: parent_of[i].map(|p| self.nodes[p].span_id.clone()),
                    service: n.service.clone(),
                    operation: n.operation.clone(),
                    start_us: n.start_us,
                    duration_us: n.duration_us,
                    status: n.status.clone(),
                }
            })
            .collect()
    }
}

/// Why a whole trace was dropped during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    EmptySpanId,
    DuplicateSpanId,
    CyclicParentage,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::EmptySpanId => write!(f, "empty span id"),
            RejectReason::DuplicateSpanId => write!(f, "duplicate span id"),
            RejectReason::CyclicParentage => write!(f, "cyclic parentage"),
        }
    }
}

/// Build a trace tree from the spans collected for one trace id.
///
/// Root selection: the parentless span with the earliest `start_us`
/// (ties: lexicographic span id). Remaining parentless spans and spans whose
/// parent id is unknown are adopted under the root with `adopted = true`.
/// If no span is parentless, orphans stand in as root candidates; if there
/// are none of those either, every parent resolves and the links necessarily
/// contain a cycle.
pub fn build_trace(
    trace_id: String,
    spans: Vec<SpanRecord>,
) -> std::result::Result<Trace, RejectReason> {
    debug_assert!(!spans.is_empty());
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        if s.span_id.is_empty() {
            return Err(RejectReason::EmptySpanId);
        }
        if index.insert(s.span_id.as_str(), i).is_some() {
            return Err(RejectReason::DuplicateSpanId);
        }
    }

    // Resolved parent index per span; None = declared root, or orphan.
    let mut parent: Vec<Option<usize>> = spans
        .iter()
        .map(|s| {
            s.parent_span_id
                .as_deref()
                .and_then(|p| index.get(p).copied())
        })
        .collect();

    // Cycle check on resolved links (covers self-parent spans). Adoption
    // below only re-points spans at the root, which cannot introduce cycles.
    let mut state = vec![0u8; spans.len()]; // 0 new, 1 on current chain, 2 done
    let mut chain = Vec::new();
    for start in 0..spans.len() {
        if state[start] != 0 {
            continue;
        }
        let mut cur = Some(start);
        chain.clear();
        while let Some(i) = cur {
            match state[i] {
                1 => return Err(RejectReason::CyclicParentage),
                2 => break,
                _ => {
                    state[i] = 1;
                    chain.push(i);
                    cur = parent[i];
                }
            }
        }
        for &i in &chain {
            state[i] = 2;
        }
    }

    let parentless: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, s)| s.parent_span_id.is_none())
        .map(|(i, _)| i)
        .collect();
    let orphans: Vec<usize> = (0..spans.len())
        .filter(|&i| spans[i].parent_span_id.is_some() && parent[i].is_none())
        .collect();
    let candidates = if parentless.is_empty() {
        &orphans
    } else {
        &parentless
    };
    let root = *candidates
        .iter()
        .min_by_key(|&&i| (spans[i].start_us, spans[i].span_id.as_str()))
        .expect("cycle check rules out traces without a root candidate");

    let mut adopted = vec![false; spans.len()];
    for i in 0..spans.len() {
        if i != root && parent[i].is_none() {
            parent[i] = Some(root);
            adopted[i] = true;
        }
    }

    let mut nodes: Vec<SpanNode> = spans
        .into_iter()
        .zip(adopted)
        .map(|(s, adopted)| SpanNode {
            span_id: s.span_id,
            service: s.service,
            operation: s.operation,
            start_us: s.start_us,
            duration_us: s.duration_us,
            status: s.status,
            adopted,
            children: Vec::new(),
        })
        .collect();
    for i in 0..nodes.len() {
        if let Some(p) = parent[i] {
            nodes[p].children.push(i);
        }
    }
    let keys: Vec<(String, u64, String)> = nodes
        .iter()
        .map(|n| (n.span_type(), n.start_us, n.span_id.clone()))
        .collect();
    for n in &mut nodes {
        n.children.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    }

    Ok(Trace {
        trace_id,
        nodes,
        root,
    })
}

/// Counters kept while assembling a stream.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AssemblyStats {
    pub spans_seen: u64,
    pub traces_emitted: u64,
    pub rejected_cycles: u64,
    pub rejected_duplicate_ids: u64,
    pub rejected_empty_ids: u64,
    pub orphans_adopted: u64,
    pub extra_roots_adopted: u64,
    /// High-water marks; stay O(active window), not O(stream), when a
    /// completion timeout is set.
    pub max_active_traces: usize,
    pub max_buffered_spans: usize,
}

impl AssemblyStats {
    pub fn rejected_total(&self) -> u64 {
        self.rejected_cycles + self.rejected_duplicate_ids + self.rejected_empty_ids
    }

    fn count_reject(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::EmptySpanId => self.rejected_empty_ids += 1,
            RejectReason::DuplicateSpanId => self.rejected_duplicate_ids += 1,
            RejectReason::CyclicParentage => self.rejected_cycles += 1,
        }
    }
}

/// A released trace plus (optionally) the raw input lines it was built from,
/// in arrival order, for verbatim pass-through of sampled traces.
#[derive(Debug)]
pub struct AssembledTrace {
    pub trace: Trace,
    pub raw_lines: Vec<String>,
}

struct TraceBuffer {
    spans: Vec<SpanRecord>,
    raw_lines: Vec<String>,
    last_touch: u64,
}

// Completed traces wait in a heap so release order follows root start time.
struct Completed(AssembledTrace);

impl Completed {
    fn key(&self) -> (u64, &str) {
        let t = &self.0.trace;
        (t.nodes[t.root].start_us, t.trace_id.as_str())
    }
}

impl PartialEq for Completed {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Completed {}
impl PartialOrd for Completed {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Completed {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Groups spans into traces on the fly.
///
/// With `completion_timeout_us = Some(t)`, a trace is considered complete
/// once no span for it has arrived within `t` of stream time (stream time =
/// max `start_us` seen), and buffers stay bounded by the active window. With
/// `None`, everything is held until [`TraceAssembler::finish`] — end-of-file
/// grouping. Either way all spans of a trace must be in the same input.
pub struct TraceAssembler {
    completion_timeout_us: Option<u64>,
    retain_raw: bool,
    active: HashMap<String, TraceBuffer>,
    expiry: BinaryHeap<Reverse<(u64, String)>>, // (deadline, trace_id), lazily stale
    completed: BinaryHeap<Reverse<Completed>>,
    stream_time: u64,
    buffered_spans: usize,
    pub stats: AssemblyStats,
}

impl TraceAssembler {
    pub fn new(completion_timeout_us: Option<u64>, retain_raw: bool) -> Self {
        TraceAssembler {
            completion_timeout_us,
            retain_raw,
            active: HashMap::new(),
            expiry: BinaryHeap::new(),
            completed: BinaryHeap::new(),
            stream_time: 0,
            buffered_spans: 0,
            stats: AssemblyStats::default(),
        }
    }

    /// Add one span. Returns any traces released by this arrival, in
    /// (root start_us, trace_id) order.
    pub fn push(&mut self, record: SpanRecord, raw: Option<&str>) -> Vec<AssembledTrace> {
        self.stats.spans_seen += 1;
        self.stream_time = self.stream_time.max(record.start_us);
        let trace_id = record.trace_id.clone();
        let buf = self.active.entry(trace_id.clone()).or_insert(TraceBuffer {
            spans: Vec::new(),
            raw_lines: Vec::new(),
            last_touch: 0,
        });
        buf.spans.push(record);
        if self.retain_raw {
            if let Some(line) = raw {
                buf.raw_lines.push(line.to_string());
            }
        }
        buf.last_touch = self.stream_time;
        let last_touch = buf.last_touch;
        self.buffered_spans += 1;
        self.stats.max_buffered_spans = self.stats.max_buffered_spans.max(self.buffered_spans);
        self.stats.max_active_traces = self.stats.max_active_traces.max(self.active.len());

        if let Some(timeout) = self.completion_timeout_us {
            self.expiry
                .push(Reverse((last_touch.saturating_add(timeout), trace_id)));
            self.release_expired(timeout)
        } else {
            Vec::new()
        }
    }

    fn release_expired(&mut self, timeout: u64) -> Vec<AssembledTrace> {
        while let Some(Reverse((deadline, id))) = self.expiry.peek() {
            if *deadline > self.stream_time {
                break;
            }
            let (deadline, id) = (*deadline, id.clone());
            self.expiry.pop();
            // Stale entry if the trace was touched again after this was queued.
            let still_due = self
                .active
                .get(&id)
                .is_some_and(|b| b.last_touch.saturating_add(timeout) == deadline);
            if still_due {
                let buf = self.active.remove(&id).unwrap();
                self.finalize(id, buf);
            }
        }
        let watermark = self.stream_time.saturating_sub(timeout);
        let mut out = Vec::new();
        while let Some(Reverse(c)) = self.completed.peek() {
            if c.key().0 > watermark {
                break;
            }
            let Reverse(c) = self.completed.pop().unwrap();
            out.push(c.0);
        }
        out
    }

    fn finalize(&mut self, trace_id: String, buf: TraceBuffer) {
        self.buffered_spans -= buf.spans.len();
        // The adopted flag alone does not say *why*; recover orphan vs
        // extra-root counts from the raw records before they are consumed.
        let ids: std::collections::HashSet<&str> =
            buf.spans.iter().map(|s| s.span_id.as_str()).collect();
        let orphans = buf
            .spans
            .iter()
            .filter(|s| s.parent_span_id.as_deref().is_some_and(|p| !ids.contains(p)))
            .count() as u64;
        let parentless = buf
            .spans
            .iter()
            .filter(|s| s.parent_span_id.is_none())
            .count() as u64;
        match build_trace(trace_id, buf.spans) {
            Ok(trace) => {
                self.stats.traces_emitted += 1;
                if parentless > 0 {
                    self.stats.orphans_adopted += orphans;
                    self.stats.extra_roots_adopted += parentless - 1;
                } else {
                    // An orphan stood in as root.
                    self.stats.orphans_adopted += orphans.saturating_sub(1);
                }
                self.completed.push(Reverse(Completed(AssembledTrace {
                    trace,
                    raw_lines: buf.raw_lines,
                })));
            }
            Err(reason) => self.stats.count_reject(reason),
        }
    }

    /// Flush everything still buffered, sorted by (root start_us, trace_id).
    pub fn finish(&mut self) -> Vec<AssembledTrace> {
        let mut ids: Vec<String> = self.active.keys().cloned().collect();
        ids.sort();
        for id in ids {
            let buf = self.active.remove(&id).unwrap();
            self.finalize(id, buf);
        }
        let mut out = Vec::new();
        while let Some(Reverse(c)) = self.completed.pop() {
            out.push(c.0);
        }
        out
    }
}

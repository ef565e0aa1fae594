//! Seeded synthetic workload generator: a catalog of service-call tree
//! shapes with lognormal span durations, replayed as interleaved JSONL span
//! streams, plus exact-quota fault injection with ground-truth labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::evalkit::LabelSet;
use crate::trace_model::SpanRecord;

/// One span slot in a topology. `parent` indexes an earlier slot; slot 0 is
/// the root. `mu_log10` is the mean of log10(duration_us).
#[derive(Debug, Clone)]
pub struct SpanTemplate {
    pub service: String,
    pub operation: String,
    pub parent: Option<usize>,
    pub mu_log10: f64,
}

/// A reusable trace shape. Every emitted trace of this topology has the same
/// call-path structure; only durations and timestamps vary.
#[derive(Debug, Clone)]
pub struct Topology {
    pub spans: Vec<SpanTemplate>,
}

impl Topology {
    /// Balanced service-call tree: `size` spans, each child attached to
    /// slot (j−1)/branching (branching 1 gives a call chain). Span types are
    /// unique within the topology and the root type is unique per `tag`.
    pub fn tree(tag: &str, size: usize, branching: usize) -> Topology {
        let mut spans = Vec::with_capacity(size);
        for j in 0..size {
            let (service, operation) = if j == 0 {
                (format!("gw-{tag}"), "entry".to_string())
            } else {
                (format!("svc-{tag}-{}", j % 3), format!("op{j}"))
            };
            spans.push(SpanTemplate {
                service,
                operation,
                parent: if j == 0 { None } else { Some((j - 1) / branching.max(1)) },
                // mid-decade keeps duration buckets stable under jitter; the
                // menu spreads spans across decades the way a real fleet
                // mixes caches, services, and batch calls
                mu_log10: [4.5, 1.5, 3.5, 2.5, 5.5][j % 5],
            });
        }
        Topology { spans }
    }
}

/// Everything the generator needs besides the seed.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    /// Shapes present in both splits.
    pub topologies: Vec<Topology>,
    /// Shapes withheld from the train split; their first test occurrence is
    /// labeled.
    pub unseen_topologies: Vec<Topology>,
    pub train_count: usize,
    pub test_count: usize,
    /// Fraction of test traces that receive an injected fault. The quota is
    /// exact: round(fraction × test_count) traces, kinds cycled in order
    /// latency-spike, structure-new, truncation.
    pub anomaly_fraction: f64,
    /// Mean of the exponential inter-trace arrival gap.
    pub mean_gap_us: f64,
    /// Stddev of log10(duration_us) around each template's mean.
    pub sigma_log10: f64,
    /// Probability that a (non-fault) test trace uses an unseen topology.
    pub unseen_weight: f64,
    /// Timestamp of the first trace, microseconds.
    pub start_us: u64,
}

impl Default for GeneratorConfig {
    fn default() -> GeneratorConfig {
        let shapes = [(5usize, 2usize), (6, 1), (7, 3), (8, 2), (9, 1), (11, 3), (14, 2), (18, 2)];
        let topologies = shapes
            .iter()
            .enumerate()
            .map(|(t, &(n, branching))| {
                let tag = char::from(b'a' + t as u8).to_string();
                Topology::tree(&tag, n, branching)
            })
            .collect();
        GeneratorConfig {
            topologies,
            unseen_topologies: vec![Topology::tree("u1", 7, 1), Topology::tree("u2", 12, 4)],
            train_count: 1_000,
            test_count: 50_000,
            anomaly_fraction: 0.01,
            mean_gap_us: 50_000.0,
            sigma_log10: 0.12,
            unseen_weight: 0.005,
            start_us: 1_700_000_000_000_000,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.topologies.is_empty() {
            return Err(Error::InvalidSpec("at least one topology is required".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::InvalidSpec(format!(
                "anomaly_fraction must lie in [0, 1], got {}",
                self.anomaly_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.unseen_weight) {
            return Err(Error::InvalidSpec(format!(
                "unseen_weight must lie in [0, 1], got {}",
                self.unseen_weight
            )));
        }
        if !(self.mean_gap_us > 0.0) {
            return Err(Error::InvalidSpec("mean_gap_us must be positive".into()));
        }
        if !(self.sigma_log10 >= 0.0) {
            return Err(Error::InvalidSpec("sigma_log10 must be non-negative".into()));
        }
        for topo in self.topologies.iter().chain(&self.unseen_topologies) {
            if topo.spans.is_empty() {
                return Err(Error::InvalidSpec("empty topology".into()));
            }
            if topo.spans[0].parent.is_some() {
                return Err(Error::InvalidSpec("slot 0 must be the root".into()));
            }
            for (j, s) in topo.spans.iter().enumerate().skip(1) {
                match s.parent {
                    Some(p) if p < j => {}
                    _ => {
                        return Err(Error::InvalidSpec(format!(
                            "slot {j} must reference an earlier parent"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which fault an anomalous trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    /// One span's duration × 100 — two decade boundaries, guaranteeing the
    /// duration bucket moves by exactly 2 — with the added wait propagated
    /// into every enclosing span.
    LatencySpike,
    /// A span with a globally fresh span type grafted under a random parent.
    StructureNew,
    /// A random non-root subtree dropped (falls back to a spike when the
    /// trace has a single span).
    Truncation,
}

impl Fault {
    const CYCLE: [Fault; 3] = [Fault::LatencySpike, Fault::StructureNew, Fault::Truncation];

    fn label(self) -> &'static str {
        match self {
            Fault::LatencySpike => "latency-spike",
            Fault::StructureNew => "structure-new",
            Fault::Truncation => "truncation",
        }
    }
}

/// Label kind for the first sighting of a topology the train split never
/// produced.
pub const UNSEEN_TOPOLOGY_KIND: &str = "unseen-topology";

/// Generated corpus: span JSONL lines for both splits plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub labels: LabelSet,
}

impl SynthDataset {
    pub fn write_files(
        &self,
        train_path: &std::path::Path,
        test_path: &std::path::Path,
        labels_path: &std::path::Path,
    ) -> Result<()> {
        std::fs::write(train_path, self.train.join("\n") + "\n")?;
        std::fs::write(test_path, self.test.join("\n") + "\n")?;
        let mut labels = Vec::new();
        self.labels.write_jsonl(&mut labels)?;
        std::fs::write(labels_path, labels)?;
        Ok(())
    }
}

/// Emits the train and test splits for `seed`. Deterministic: the output is
/// a pure function of (config, seed). Trace ids are `tr-…` / `te-…` with the
/// zero-padded emission index; anomalies hit exactly
/// round(anomaly_fraction × test_count) test traces.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(1.0 / cfg.mean_gap_us)
        .map_err(|e| Error::InvalidSpec(format!("bad gap distribution: {e}")))?;

    let quota = (cfg.anomaly_fraction * cfg.test_count as f64).round() as usize;
    let mut fault_at: Vec<Option<Fault>> = vec![None; cfg.test_count];
    if quota > 0 {
        let mut picked = rand::seq::index::sample(&mut rng, cfg.test_count, quota).into_vec();
        picked.sort_unstable();
        for (rank, idx) in picked.into_iter().enumerate() {
            fault_at[idx] = Some(Fault::CYCLE[rank % Fault::CYCLE.len()]);
        }
    }

    let mut labels = LabelSet::new(format!("synthetic seed {seed}"));
    let mut seen_in_train = vec![false; cfg.topologies.len()];
    let mut seen_in_test = vec![false; cfg.topologies.len() + cfg.unseen_topologies.len()];
    let mut fresh_types = 0u64;

    let mut clock = cfg.start_us;
    let mut train = Vec::with_capacity(cfg.train_count * 8);
    for i in 0..cfg.train_count {
        clock += rng.sample(gap).round().max(1.0) as u64;
        let t = rng.gen_range(0..cfg.topologies.len());
        seen_in_train[t] = true;
        let id = format!("tr-{i:08}");
        emit_trace(&mut rng, &cfg.topologies[t], &id, clock, cfg.sigma_log10, None, &mut fresh_types, &mut train)?;
    }

    let mut test = Vec::with_capacity(cfg.test_count * 8);
    for i in 0..cfg.test_count {
        clock += rng.sample(gap).round().max(1.0) as u64;
        let fault = fault_at[i];
        // faults are injected into cataloged shapes only; unseen topologies
        // are their own anomaly class
        let (topo, topo_slot) = if fault.is_none()
            && !cfg.unseen_topologies.is_empty()
            && rng.gen_bool(cfg.unseen_weight)
        {
            let u = rng.gen_range(0..cfg.unseen_topologies.len());
            (&cfg.unseen_topologies[u], cfg.topologies.len() + u)
        } else {
            let t = rng.gen_range(0..cfg.topologies.len());
            (&cfg.topologies[t], t)
        };
        let id = format!("te-{i:08}");
        if let Some(f) = fault {
            labels.insert(&id, f.label());
        } else if !seen_in_test[topo_slot] {
            let unseen = topo_slot >= cfg.topologies.len() || !seen_in_train[topo_slot];
            if unseen {
                labels.insert(&id, UNSEEN_TOPOLOGY_KIND);
            }
        }
        seen_in_test[topo_slot] = true;
        emit_trace(&mut rng, topo, &id, clock, cfg.sigma_log10, fault, &mut fresh_types, &mut test)?;
    }

    Ok(SynthDataset { train, test, labels })
}

/// Writes one trace's spans (root first) as JSONL onto `out`.
fn emit_trace(
    rng: &mut ChaCha8Rng,
    topo: &Topology,
    trace_id: &str,
    trace_start: u64,
    sigma: f64,
    fault: Option<Fault>,
    fresh_types: &mut u64,
    out: &mut Vec<String>,
) -> Result<()> {
    let n = topo.spans.len();
    let mut durations: Vec<u64> = topo
        .spans
        .iter()
        .map(|s| {
            let z: f64 = StandardNormal.sample(rng);
            10f64.powf(s.mu_log10 + sigma * z).round().max(1.0) as u64
        })
        .collect();

    // Child offsets come from the fault-free durations: an injected stall
    // lands at the tail of the slow span, after its children have started.
    // That keeps every trace's span timestamps compact, so the assembly
    // window stays small no matter what faults do to durations.
    let mut starts = vec![trace_start; n];
    for j in 1..n {
        let p = topo.spans[j].parent.expect("validated: non-root slots have parents");
        let offset = (durations[p] as f64 * rng.gen_range(0.05..0.5)).round() as u64;
        starts[j] = starts[p] + offset.max(1);
    }

    let mut dropped = vec![false; n];
    let mut injected: Option<(usize, SpanTemplate)> = None;
    match fault {
        Some(Fault::LatencySpike) => {
            let k = rng.gen_range(0..n);
            let extra = durations[k].saturating_mul(99);
            durations[k] = durations[k].saturating_add(extra);
            // synchronous call chains: a slow span inflates every enclosing
            // span by the same wait
            let mut up = topo.spans[k].parent;
            while let Some(p) = up {
                durations[p] = durations[p].saturating_add(extra);
                up = topo.spans[p].parent;
            }
        }
        Some(Fault::Truncation) if n > 1 => {
            let k = rng.gen_range(1..n);
            dropped[k] = true;
            // templates reference earlier slots, so one forward pass closes
            // the dropped subtree
            for j in k + 1..n {
                if let Some(p) = topo.spans[j].parent {
                    dropped[j] = dropped[p];
                }
            }
        }
        Some(Fault::Truncation) => {
            durations[0] = durations[0].saturating_mul(100);
        }
        Some(Fault::StructureNew) => {
            let parent = rng.gen_range(0..n);
            let c = *fresh_types;
            *fresh_types += 1;
            injected = Some((
                parent,
                SpanTemplate {
                    service: format!("faultsvc-{c}"),
                    operation: "injected".to_string(),
                    parent: Some(parent),
                    mu_log10: 3.5,
                },
            ));
        }
        None => {}
    }

    for j in 0..n {
        if dropped[j] {
            continue;
        }
        let s = &topo.spans[j];
        let record = SpanRecord {
            trace_id: trace_id.to_string(),
            span_id: format!("{trace_id}.{j}"),
            parent_span_id: s.parent.map(|p| format!("{trace_id}.{p}")),
            service: s.service.clone(),
            operation: s.operation.clone(),
            start_us: starts[j],
            duration_us: durations[j],
            status: None,
        };
        out.push(serde_json::to_string(&record).expect("span serialization cannot fail"));
    }
    if let Some((parent, s)) = injected {
        let z: f64 = StandardNormal.sample(rng);
        let duration = 10f64.powf(s.mu_log10 + sigma * z).round().max(1.0) as u64;
        let offset = (durations[parent] as f64 * rng.gen_range(0.05..0.5)).round() as u64;
        let record = SpanRecord {
            trace_id: trace_id.to_string(),
            span_id: format!("{trace_id}.x"),
            parent_span_id: Some(format!("{trace_id}.{parent}")),
            service: s.service,
            operation: s.operation,
            start_us: starts[parent] + offset.max(1),
            duration_us: duration,
            status: None,
        };
        out.push(serde_json::to_string(&record).expect("span serialization cannot fail"));
    }
    Ok(())
}

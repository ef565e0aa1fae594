//! End-to-end streaming orchestration: parse span JSONL, assemble trace
//! trees, encode → sketch → decide, emit decision logs and sampled traces,
//! and persist/restore the whole model between runs.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{
    bootstrap, ClockMode, PersistedSampler, SamplerParams, SamplerState, DEFAULT_MIN_PTS,
};
use crate::encoding::encode_trace;
use crate::error::{Error, Result};
use crate::sketch::{HasherState, SketchHasher, DEFAULT_P_MAX, DEFAULT_SKETCH_LENGTH};
use crate::trace_model::{SpanRecord, Trace, TraceAssembler};

pub const STATE_VERSION: u32 = 1;

/// How long (stream time, µs) a trace may sit idle before it is considered
/// complete. 30 s of silence is far beyond any span-flush delay we care
/// about, yet keeps memory bounded by the active window instead of the file.
pub const DEFAULT_COMPLETION_TIMEOUT_US: u64 = 30_000_000;

/// The one on-disk artifact: hasher registry + sampler snapshot, versioned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistedState {
    pub version: u32,
    pub hasher: HasherState,
    pub sampler: PersistedSampler,
}

/// Everything `bootstrap`/`run` need besides the input files.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sketch_length: usize,
    pub p_max: usize,
    pub hasher_seed: u64,
    pub skip_first_token: bool,
    pub params: SamplerParams,
    pub clock: ClockMode,
    /// Neighborhood radius for the bootstrap scan; defaults to 2ε.
    pub dbscan_eps: Option<f64>,
    pub min_pts: usize,
    pub completion_timeout_us: Option<u64>,
    /// Suppress rare-branch sampling whenever the running rate exceeds the
    /// budget (off by default: rare traces may exceed B by design).
    pub hard_budget_cap: bool,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            sketch_length: DEFAULT_SKETCH_LENGTH,
            p_max: DEFAULT_P_MAX,
            hasher_seed: 42,
            skip_first_token: false,
            params: SamplerParams::default(),
            clock: ClockMode::Timestamp,
            dbscan_eps: None,
            min_pts: DEFAULT_MIN_PTS,
            completion_timeout_us: Some(DEFAULT_COMPLETION_TIMEOUT_US),
            hard_budget_cap: false,
        }
    }
}

/// What the bootstrap pass saw and built.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub spans: u64,
    pub traces: u64,
    pub pmcs: usize,
    pub omcs: usize,
    pub warnings: Vec<String>,
}

/// What a streaming pass saw and decided.
#[derive(Debug, Clone, Serialize)]
pub struct StreamReport {
    pub spans: u64,
    pub traces: u64,
    pub sampled: u64,
    pub rejected_spans: u64,
    pub orphans_adopted: u64,
    pub extra_roots_adopted: u64,
    /// High-water mark of spans buffered at once — the streaming memory
    /// guarantee is that this tracks the active window, not the file size.
    pub max_buffered_spans: u64,
}

fn parse_span(line: &str, number: usize) -> Result<SpanRecord> {
    serde_json::from_str(line).map_err(|e| Error::Parse { line: number, source: e })
}

fn root_start(trace: &Trace) -> u64 {
    trace.nodes[trace.root].start_us
}

/// Builds the model from a fault-free training stream: every assembled trace
/// is encoded and sketched, then a density scan over the sketches seeds the
/// initial clusters.
pub fn run_bootstrap<R: Read>(
    input: R,
    cfg: &PipelineConfig,
) -> Result<(SketchHasher, SamplerState, BootstrapReport)> {
    let mut hasher = SketchHasher::new(cfg.sketch_length, cfg.p_max, cfg.hasher_seed)?
        .with_skip_first_token(cfg.skip_first_token);
    let mut assembler = TraceAssembler::new(None, false);
    for (idx, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        assembler.push(parse_span(&line, idx + 1)?, None);
    }
    let mut sketches = Vec::new();
    for assembled in assembler.finish() {
        let vector = encode_trace(&assembled.trace)?;
        sketches.push(hasher.sketch_vector(&vector));
    }
    let mut sampler =
        bootstrap(&sketches, cfg.params.clone(), cfg.clock, cfg.dbscan_eps, cfg.min_pts)?;
    sampler.hard_budget_cap = cfg.hard_budget_cap;

    let mut warnings = Vec::new();
    if sketches.is_empty() {
        warnings.push("training stream produced no traces; starting empty".to_string());
    }
    let report = BootstrapReport {
        spans: assembler.stats.spans_seen,
        traces: sketches.len() as u64,
        pmcs: sampler.pmc_count(),
        omcs: sampler.omc_count(),
        warnings,
    };
    Ok((hasher, sampler, report))
}

/// Streams a span file through the model: one decision line per assembled
/// trace (in root-start order within the completion window), sampled traces
/// copied verbatim — every input line of a kept trace, none of a dropped
/// one. The caller persists `hasher`/`sampler` afterwards if the run should
/// be resumable.
pub fn run_stream<R: Read>(
    input: R,
    hasher: &mut SketchHasher,
    sampler: &mut SamplerState,
    completion_timeout_us: Option<u64>,
    mut decisions_out: impl Write,
    mut sampled_out: impl Write,
) -> Result<StreamReport> {
    let mut assembler = TraceAssembler::new(completion_timeout_us, true);
    let mut traces = 0u64;
    let mut sampled_count = 0u64;
    let mut process = |batch: Vec<crate::trace_model::AssembledTrace>,
                       hasher: &mut SketchHasher,
                       sampler: &mut SamplerState,
                       decisions_out: &mut dyn Write,
                       sampled_out: &mut dyn Write|
     -> Result<()> {
        for assembled in batch {
            let vector = encode_trace(&assembled.trace)?;
            let sketch = hasher.sketch_vector(&vector);
            let decision = sampler.observe(&sketch, root_start(&assembled.trace))?;
            traces += 1;
            if decision.sampled {
                sampled_count += 1;
                for raw in &assembled.raw_lines {
                    writeln!(sampled_out, "{raw}")?;
                }
            }
            let line = serde_json::to_string(&decision)
                .expect("decision serialization cannot fail");
            writeln!(decisions_out, "{line}")?;
        }
        Ok(())
    };

    for (idx, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_span(&line, idx + 1)?;
        let released = assembler.push(record, Some(&line));
        process(released, hasher, sampler, &mut decisions_out, &mut sampled_out)?;
    }
    process(assembler.finish(), hasher, sampler, &mut decisions_out, &mut sampled_out)?;
    decisions_out.flush()?;
    sampled_out.flush()?;

    Ok(StreamReport {
        spans: assembler.stats.spans_seen,
        traces,
        sampled: sampled_count,
        rejected_spans: assembler.stats.rejected_total(),
        orphans_adopted: assembler.stats.orphans_adopted,
        extra_roots_adopted: assembler.stats.extra_roots_adopted,
        max_buffered_spans: assembler.stats.max_buffered_spans as u64,
    })
}

pub fn save_state(
    path: &Path,
    hasher: &SketchHasher,
    sampler: &SamplerState,
) -> Result<()> {
    let state = PersistedState {
        version: STATE_VERSION,
        hasher: hasher.to_state(),
        sampler: sampler.to_persisted(),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &state)
        .map_err(|e| Error::StateFormat(e.to_string()))?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<(SketchHasher, SamplerState)> {
    let file = std::fs::File::open(path)?;
    let state: PersistedState = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::StateFormat(e.to_string()))?;
    if state.version != STATE_VERSION {
        return Err(Error::StateVersionMismatch {
            found: state.version,
            expected: STATE_VERSION,
        });
    }
    Ok((
        SketchHasher::from_state(&state.hasher)?,
        SamplerState::from_persisted(state.sampler)?,
    ))
}

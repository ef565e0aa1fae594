//! Evolving micro-cluster model over unit-embedded sketches, and the
//! sampling decision it drives.
//!
//! Clusters carry exponentially fading statistics (w, cf1, cf2) under
//! f(Δt) = 2^(−λ·Δt), applied lazily at touch time. Potential micro-clusters
//! (PMCs) summarize recurring trace shapes — traces landing there are
//! sampled under the budget; outlier micro-clusters (OMCs) catch rare
//! shapes, which are always sampled, and graduate to PMC once their faded
//! weight reaches α. Periodically (every T_p ticks) PMCs whose weight has
//! faded below α are dropped. OMCs are never dropped: forgetting a rare
//! shape would make its next occurrence look new again, which is exactly
//! the signal being preserved.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch::{unit_embed, Sketch};

pub const DEFAULT_BUDGET: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 0.25;
pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_MIN_PTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "PMC")]
    Pmc,
    #[serde(rename = "OMC")]
    Omc,
}

/// Fading cluster summary. Center cf1/w is invariant under decay (both
/// scale by the same factor), so only merges move it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MicroCluster {
    pub id: u64,
    pub role: Role,
    pub w: f64,
    pub cf1: Vec<f64>,
    pub cf2: f64,
    pub last_update: f64,
}

impl MicroCluster {
    pub fn singleton(id: u64, role: Role, point: &[f64], t: f64) -> MicroCluster {
        MicroCluster {
            id,
            role,
            w: 1.0,
            cf1: point.to_vec(),
            cf2: 1.0,
            last_update: t,
        }
    }

    /// Apply the fading to time `t`. Refuses to run time backwards — the
    /// caller's clock is monotone and a violation means corrupted state.
    pub fn decay_to(&mut self, t: f64, lambda: f64) -> Result<()> {
        if t < self.last_update {
            return Err(Error::TimeReversal {
                t,
                last_update: self.last_update,
            });
        }
        let f = (-lambda * (t - self.last_update)).exp2();
        self.w *= f;
        self.cf2 *= f;
        for x in &mut self.cf1 {
            *x *= f;
        }
        self.last_update = t;
        Ok(())
    }

    /// Absorb a unit point at time `t`: decay, then w+1, cf1+s, cf2+1.
    pub fn merge(&mut self, point: &[f64], t: f64, lambda: f64) -> Result<()> {
        self.decay_to(t, lambda)?;
        self.w += 1.0;
        self.cf2 += 1.0;
        for (x, s) in self.cf1.iter_mut().zip(point) {
            *x += s;
        }
        Ok(())
    }

    pub fn center(&self) -> Vec<f64> {
        self.cf1.iter().map(|x| x / self.w).collect()
    }

    /// RMS distance of the faded mass from the center:
    /// √(cf2/w − ‖cf1/w‖²), clamped at 0 against rounding.
    pub fn radius(&self) -> f64 {
        let cc: f64 = self.cf1.iter().map(|x| x * x).sum();
        (self.cf2 / self.w - cc / (self.w * self.w)).max(0.0).sqrt()
    }

    /// Squared Euclidean distance from a point to the center. Decay never
    /// moves the center, so no fading is needed here.
    pub fn dist2_to(&self, point: &[f64]) -> f64 {
        let mut ss = 0.0;
        let mut sc = 0.0;
        let mut cc = 0.0;
        for (s, c) in point.iter().zip(&self.cf1) {
            ss += s * s;
            sc += s * c;
            cc += c * c;
        }
        (ss - 2.0 * sc / self.w + cc / (self.w * self.w)).max(0.0)
    }

    /// Radius this cluster *would* have after absorbing `point` at `t`,
    /// without committing the merge. Pure algebra on the faded statistics —
    /// no clone of cf1.
    pub fn candidate_radius(&self, point: &[f64], t: f64, lambda: f64) -> Result<f64> {
        if t < self.last_update {
            return Err(Error::TimeReversal {
                t,
                last_update: self.last_update,
            });
        }
        let f = (-lambda * (t - self.last_update)).exp2();
        let w = self.w * f + 1.0;
        let cf2 = self.cf2 * f + 1.0;
        let mut cc = 0.0;
        let mut cs = 0.0;
        let mut ss = 0.0;
        for (c, s) in self.cf1.iter().zip(point) {
            cc += c * c;
            cs += c * s;
            ss += s * s;
        }
        let cf1_norm2 = f * f * cc + 2.0 * f * cs + ss;
        Ok((cf2 / w - cf1_norm2 / (w * w)).max(0.0).sqrt())
    }
}

/// How observation time maps to decay ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Trace root timestamps, scaled by `time_unit` seconds per tick.
    /// The first observed trace pins tick 0.
    Timestamp,
    /// Every observation advances the clock by one tick, regardless of
    /// timestamps. Useful for replay experiments.
    Logical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerParams {
    /// Target sampling probability for recurring traces (B).
    pub budget: f64,
    /// Decay rate (λ): weights halve every 1/λ ticks.
    pub lambda: f64,
    /// PMC weight threshold (α).
    pub alpha: f64,
    /// Merge radius (ε) in unit-embedding space.
    pub epsilon: f64,
    /// Seconds of trace time per tick (timestamp clock only).
    pub time_unit: f64,
    /// Seed for the budget-sampling coin flips.
    pub rng_seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            budget: DEFAULT_BUDGET,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            time_unit: 1.0,
            rng_seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParams(format!(
                "lambda must be > 0 (got {})",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Error::InvalidParams(format!(
                "budget must be in [0, 1] (got {})",
                self.budget
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParams(format!(
                "epsilon must be > 0 (got {})",
                self.epsilon
            )));
        }
        if !(self.time_unit > 0.0) {
            return Err(Error::InvalidParams(format!(
                "time_unit must be > 0 (got {})",
                self.time_unit
            )));
        }
        Ok(())
    }
}

/// Ticks between periodic PMC checks: ⌈(1/λ)·log₂(α/(α−1))⌉ — the shortest
/// interval over which a weight-α PMC left alone is guaranteed to fade
/// below α. A hair of relative noise is shaved before the ceiling so exact
/// ratios (e.g. α = 4/3) don't round up an extra tick.
pub fn prune_interval(lambda: f64, alpha: f64) -> Result<u64> {
    if !(alpha > 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParams(format!(
            "lambda must be > 0 (got {lambda})"
        )));
    }
    let v = (alpha / (alpha - 1.0)).log2() / lambda;
    let t = (v - 1e-9 * v.abs().max(1.0)).ceil().max(1.0);
    Ok(t as u64)
}

/// Why a trace was (or wasn't) kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reason {
    /// Merged into a PMC: recurring shape, budget coin decides.
    #[serde(rename = "PMC_BUDGET")]
    PmcBudget,
    /// Merged into an OMC: shape seen before but still rare.
    #[serde(rename = "OMC_RARE")]
    OmcRare,
    /// No cluster close enough: first sighting of this shape.
    #[serde(rename = "NEW_OMC")]
    NewOmc,
}

/// One line of the decision log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decision {
    pub trace_id: String,
    pub sampled: bool,
    pub reason: Reason,
    pub probability: f64,
    pub cluster_id: u64,
    pub tick: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerCounters {
    pub observed: u64,
    pub sampled: u64,
    pub pmc_budget: u64,
    pub pmc_budget_sampled: u64,
    pub omc_rare: u64,
    pub omc_rare_sampled: u64,
    pub new_omc: u64,
    pub new_omc_sampled: u64,
}

/// Serialized form of [`SamplerState`]. The RNG is stored as its stream
/// position; the stream itself is regenerated from `params.rng_seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistedSampler {
    pub params: SamplerParams,
    pub clock: ClockMode,
    pub now: f64,
    pub next_prune_at: f64,
    pub tick_origin_us: Option<u64>,
    pub hard_budget_cap: bool,
    pub next_cluster_id: u64,
    pub rng_word_pos: String,
    pub counters: SamplerCounters,
    pub clusters: Vec<MicroCluster>,
}

/// Full sampler: cluster set, clock, counters, decision RNG.
#[derive(Debug)]
pub struct SamplerState {
    pub params: SamplerParams,
    pub clock: ClockMode,
    pub clusters: Vec<MicroCluster>,
    pub next_cluster_id: u64,
    pub now: f64,
    pub next_prune_at: f64,
    pub tick_origin_us: Option<u64>,
    /// When set, rare-shape decisions (OMC/new) are suppressed whenever the
    /// running sample rate already exceeds the budget. Off by default: rare
    /// traces are the point of the exercise, and the budget is meant for
    /// the recurring mass.
    pub hard_budget_cap: bool,
    pub counters: SamplerCounters,
    /// Cluster-distance evaluations, one per (observation, cluster) pair —
    /// cost accounting for the O((#PMC + #OMC)·L) observe bound.
    pub distance_ops: u64,
    rng: ChaCha8Rng,
}

impl SamplerState {
    pub fn new_empty(params: SamplerParams, clock: ClockMode) -> Result<SamplerState> {
        params.validate()?;
        let tp = prune_interval(params.lambda, params.alpha)? as f64;
        let rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        Ok(SamplerState {
            params,
            clock,
            clusters: Vec::new(),
            next_cluster_id: 0,
            now: 0.0,
            next_prune_at: tp,
            tick_origin_us: None,
            hard_budget_cap: false,
            counters: SamplerCounters::default(),
            distance_ops: 0,
            rng,
        })
    }

    pub fn pmc_count(&self) -> usize {
        self.clusters.iter().filter(|c| c.role == Role::Pmc).count()
    }

    pub fn omc_count(&self) -> usize {
        self.clusters.iter().filter(|c| c.role == Role::Omc).count()
    }

    fn tick_for(&mut self, start_us: u64) -> f64 {
        match self.clock {
            ClockMode::Logical => self.now + 1.0,
            ClockMode::Timestamp => {
                let origin = *self.tick_origin_us.get_or_insert(start_us);
                (start_us as i64 - origin as i64) as f64 / (self.params.time_unit * 1e6)
            }
        }
    }

    /// Nearest cluster of `role` by center distance; ties go to the lowest
    /// cluster id.
    fn nearest(&mut self, role: Role, point: &[f64]) -> Option<usize> {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, c) in self.clusters.iter().enumerate() {
            if c.role != role {
                continue;
            }
            self.distance_ops += 1;
            let d2 = c.dist2_to(point);
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d2 < bd || (d2 == bd && c.id < bid),
            };
            if better {
                best = Some((d2, c.id, i));
            }
        }
        best.map(|(_, _, i)| i)
    }

    /// Budget probability for a trace that just merged into a PMC of faded
    /// weight `w_star`: B·(1 − w*/Σw), the sum running over all PMC weights
    /// faded to `now` — including the merged cluster itself, so a lone PMC
    /// yields exactly 0. Clamped to [0, B].
    pub fn sampling_probability(&self, w_star: f64) -> Result<f64> {
        let mut sum = 0.0;
        let mut any = false;
        for c in &self.clusters {
            if c.role != Role::Pmc {
                continue;
            }
            any = true;
            sum += c.w * (-self.params.lambda * (self.now - c.last_update)).exp2();
        }
        if !any {
            return Err(Error::NoPmc);
        }
        let b = self.params.budget;
        Ok((b * (1.0 - w_star / sum)).clamp(0.0, b))
    }

    /// Decay every PMC to `now` and drop those strictly below α. OMCs are
    /// left alone. Returns the removed cluster ids and schedules the next
    /// check; after a stream gap the schedule jumps by whole multiples of
    /// T_p (intermediate checks would have removed the same clusters —
    /// weights only fade between observations).
    pub fn periodic_prune(&mut self) -> Result<Vec<u64>> {
        let (lambda, alpha) = (self.params.lambda, self.params.alpha);
        let now = self.now;
        for c in &mut self.clusters {
            if c.role == Role::Pmc {
                c.decay_to(now, lambda)?;
            }
        }
        let mut removed = Vec::new();
        self.clusters.retain(|c| {
            if c.role == Role::Pmc && c.w < alpha {
                removed.push(c.id);
                false
            } else {
                true
            }
        });
        let tp = prune_interval(lambda, alpha)? as f64;
        self.next_prune_at += tp;
        if self.next_prune_at <= now {
            let skipped = ((now - self.next_prune_at) / tp).floor() + 1.0;
            self.next_prune_at += skipped * tp;
        }
        Ok(removed)
    }

    /// One trace: advance the clock, run any due prune, then try in order —
    /// nearest PMC (budget-sampled), nearest OMC (always sampled, may
    /// promote), fresh OMC (always sampled). A merge happens only if the
    /// cluster would still fit in radius ε after absorbing the point.
    pub fn observe(&mut self, sketch: &Sketch, start_us: u64) -> Result<Decision> {
        let point = unit_embed(sketch);
        if let Some(c) = self.clusters.first() {
            if c.cf1.len() != point.len() {
                return Err(Error::DimensionMismatch {
                    got: point.len(),
                    expected: c.cf1.len(),
                });
            }
        }
        let t = self.tick_for(start_us);
        if t > self.now {
            self.now = t;
        }
        if self.now >= self.next_prune_at {
            self.periodic_prune()?;
        }
        let (lambda, alpha, eps) = (self.params.lambda, self.params.alpha, self.params.epsilon);
        let now = self.now;

        if let Some(i) = self.nearest(Role::Pmc, &point) {
            if self.clusters[i].candidate_radius(&point, now, lambda)? <= eps {
                self.clusters[i].merge(&point, now, lambda)?;
                let id = self.clusters[i].id;
                let w_star = self.clusters[i].w;
                let p = self.sampling_probability(w_star)?;
                let coin: f64 = self.rng.gen();
                let sampled = coin < p;
                return Ok(self.record(sketch, Reason::PmcBudget, sampled, p, id));
            }
        }
        if let Some(i) = self.nearest(Role::Omc, &point) {
            if self.clusters[i].candidate_radius(&point, now, lambda)? <= eps {
                self.clusters[i].merge(&point, now, lambda)?;
                if self.clusters[i].w >= alpha {
                    self.clusters[i].role = Role::Pmc;
                }
                let id = self.clusters[i].id;
                return Ok(self.record(sketch, Reason::OmcRare, true, 1.0, id));
            }
        }
        let id = self.next_cluster_id;
        self.next_cluster_id += 1;
        self.clusters
            .push(MicroCluster::singleton(id, Role::Omc, &point, now));
        Ok(self.record(sketch, Reason::NewOmc, true, 1.0, id))
    }

    fn record(
        &mut self,
        sketch: &Sketch,
        reason: Reason,
        mut sampled: bool,
        probability: f64,
        cluster_id: u64,
    ) -> Decision {
        if self.hard_budget_cap && reason != Reason::PmcBudget && sampled {
            let would = self.counters.sampled as f64 + 1.0;
            let seen = self.counters.observed as f64 + 1.0;
            if would > self.params.budget * seen {
                sampled = false;
            }
        }
        self.counters.observed += 1;
        if sampled {
            self.counters.sampled += 1;
        }
        match reason {
            Reason::PmcBudget => {
                self.counters.pmc_budget += 1;
                if sampled {
                    self.counters.pmc_budget_sampled += 1;
                }
            }
            Reason::OmcRare => {
                self.counters.omc_rare += 1;
                if sampled {
                    self.counters.omc_rare_sampled += 1;
                }
            }
            Reason::NewOmc => {
                self.counters.new_omc += 1;
                if sampled {
                    self.counters.new_omc_sampled += 1;
                }
            }
        }
        Decision {
            trace_id: sketch.trace_id.clone(),
            sampled,
            reason,
            probability,
            cluster_id,
            tick: self.now,
        }
    }

    pub fn to_persisted(&self) -> PersistedSampler {
        PersistedSampler {
            params: self.params.clone(),
            clock: self.clock,
            now: self.now,
            next_prune_at: self.next_prune_at,
            tick_origin_us: self.tick_origin_us,
            hard_budget_cap: self.hard_budget_cap,
            next_cluster_id: self.next_cluster_id,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            counters: self.counters.clone(),
            clusters: self.clusters.clone(),
        }
    }

    pub fn from_persisted(p: PersistedSampler) -> Result<SamplerState> {
        p.params.validate()?;
        let word_pos: u128 = p
            .rng_word_pos
            .parse()
            .map_err(|_| Error::StateFormat(format!("bad rng position {:?}", p.rng_word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.params.rng_seed);
        rng.set_word_pos(word_pos);
        if let Some(first) = p.clusters.first() {
            let dim = first.cf1.len();
            if p.clusters.iter().any(|c| c.cf1.len() != dim) {
                return Err(Error::StateFormat("inconsistent cluster dimensions".into()));
            }
        }
        Ok(SamplerState {
            params: p.params,
            clock: p.clock,
            clusters: p.clusters,
            next_cluster_id: p.next_cluster_id,
            now: p.now,
            next_prune_at: p.next_prune_at,
            tick_origin_us: p.tick_origin_us,
            hard_budget_cap: p.hard_budget_cap,
            counters: p.counters,
            distance_ops: 0,
            rng,
        })
    }
}

/// Plain DBSCAN: inclusive ε-neighborhoods, core points have ≥ min_pts
/// neighbors (counting themselves), border points join the first cluster
/// that reaches them, everything else is noise (None). Cluster ids follow
/// discovery order, so output is deterministic in input order.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let eps2 = eps * eps;
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| dist2(&points[i], &points[j]) <= eps2).collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0usize;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = neighbors(i);
        if nb.len() < min_pts {
            continue; // noise unless a later cluster claims it as border
        }
        let cid = next_cluster;
        next_cluster += 1;
        labels[i] = Some(cid);
        let mut queue: VecDeque<usize> = nb.into();
        while let Some(j) = queue.pop_front() {
            if let Some(existing) = labels[j] {
                if existing != cid {
                    continue; // border point already owned
                }
            } else {
                labels[j] = Some(cid);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nbj = neighbors(j);
            if nbj.len() >= min_pts {
                queue.extend(nbj);
            }
        }
    }
    labels
}

/// Seed a sampler from a batch of training sketches: DBSCAN the unit
/// embeddings, each cluster becomes a PMC (w = member count), each noise
/// point an OMC of weight 1. Everything starts at tick 0.
pub fn bootstrap(
    sketches: &[Sketch],
    params: SamplerParams,
    clock: ClockMode,
    dbscan_eps: Option<f64>,
    min_pts: usize,
) -> Result<SamplerState> {
    let mut state = SamplerState::new_empty(params, clock)?;
    if sketches.is_empty() {
        return Ok(state);
    }
    let eps = dbscan_eps.unwrap_or(2.0 * state.params.epsilon);
    let len0 = sketches[0].len();
    for s in sketches {
        if s.len() != len0 {
            return Err(Error::LengthMismatch { a: len0, b: s.len() });
        }
    }
    let points: Vec<Vec<f64>> = sketches.iter().map(unit_embed).collect();
    let labels = dbscan(&points, eps, min_pts);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut w = vec![0f64; n_clusters];
    let mut cf1 = vec![vec![0f64; len0]; n_clusters];
    for (p, l) in points.iter().zip(&labels) {
        if let Some(c) = *l {
            w[c] += 1.0;
            for (acc, x) in cf1[c].iter_mut().zip(p) {
                *acc += x;
            }
        }
    }
    for c in 0..n_clusters {
        let id = state.next_cluster_id;
        state.next_cluster_id += 1;
        state.clusters.push(MicroCluster {
            id,
            role: Role::Pmc,
            w: w[c],
            cf1: std::mem::take(&mut cf1[c]),
            cf2: w[c],
            last_update: 0.0,
        });
    }
    for (p, l) in points.iter().zip(&labels) {
        if l.is_none() {
            let id = state.next_cluster_id;
            state.next_cluster_id += 1;
            state
                .clusters
                .push(MicroCluster::singleton(id, Role::Omc, p, 0.0));
        }
    }
    Ok(state)
}

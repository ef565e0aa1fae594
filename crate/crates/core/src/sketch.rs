//! Streaming locality-sensitive sketching of sparse trace vectors.
//!
//! A sketch is L sign bits, one per hash function. Each function projects
//! the sparse vector onto a pseudo-random ±1 direction and keeps the sign;
//! two sketches then agree on a bit with probability 1 − θ/π for vectors at
//! angle θ, so Hamming agreement estimates cosine similarity.
//!
//! The ±1 value a function assigns to a call path comes from a multilinear
//! hash over the path's tokens: with per-function random 64-bit integers
//! m_0..m_p and a registry int(·) numbering tokens 1, 2, 3, … in first-seen
//! order, the function computes m_0 + Σ_i m_{c(i)}·int(t_i) in wrapping
//! 64-bit arithmetic and keeps the sign bit. The sign is the value's *top*
//! bit: in multiply-shift hashing the high-order bits are the strongly
//! universal ones (the low bit degenerates to token parities, which would
//! make distinct paths collide systematically). New paths extend the
//! registry without touching any previously computed value — that is what
//! lets the sketch space grow with the stream.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{CallPath, SparseTraceVector};
use crate::error::{Error, Result};

pub const DEFAULT_SKETCH_LENGTH: usize = 100;
pub const DEFAULT_P_MAX: usize = 64;

/// Joins consecutive path components into one token when a path is longer
/// than `p_max`. Non-printable, so joined tokens cannot collide with span
/// types that appear on the wire.
pub const CHUNK_JOINER: char = '\u{1f}';

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Split an over-long path into at most `p_max` tokens: consecutive groups
/// of g = ⌈len/p_max⌉ components, the last possibly smaller. Paths within
/// the limit pass through one component per token.
pub fn chunk_path(path: &CallPath, p_max: usize) -> Vec<String> {
    let comps = path.components();
    if comps.len() <= p_max {
        return comps.to_vec();
    }
    let g = comps.len().div_ceil(p_max);
    comps
        .chunks(g)
        .map(|group| {
            let mut s = String::with_capacity(group.iter().map(|c| c.len() + 1).sum());
            for (i, c) in group.iter().enumerate() {
                if i > 0 {
                    s.push(CHUNK_JOINER);
                }
                s.push_str(c);
            }
            s
        })
        .collect()
}

/// Expected probability that one sketch bit agrees for two vectors with the
/// given cosine similarity.
pub fn sign_agreement_probability(cosine: f64) -> f64 {
    1.0 - cosine.clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

#[derive(Debug, Clone, Default)]
struct TokenRegistry {
    map: HashMap<String, u64>,
    tokens: Vec<String>, // assignment order; int(token) = index + 1
}

impl TokenRegistry {
    fn intern(&mut self, token: &str) -> u64 {
        if let Some(&id) = self.map.get(token) {
            return id;
        }
        let id = (self.tokens.len() + 1) as u64;
        self.tokens.push(token.to_string());
        self.map.insert(token.to_string(), id);
        id
    }
}

/// An L-bit signature of one trace vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub trace_id: String,
    sketch_length: usize,
    words: Vec<u64>,
    /// Raw projection values, kept only when the hasher is asked to
    /// (diagnostics; the bits alone drive clustering).
    pub projection: Option<Vec<f64>>,
}

impl Sketch {
    pub fn len(&self) -> usize {
        self.sketch_length
    }

    pub fn is_empty(&self) -> bool {
        self.sketch_length == 0
    }

    pub fn bit(&self, l: usize) -> bool {
        debug_assert!(l < self.sketch_length);
        self.words[l / 64] >> (l % 64) & 1 == 1
    }

    pub fn hamming(&self, other: &Sketch) -> Result<u32> {
        if self.sketch_length != other.sketch_length {
            return Err(Error::LengthMismatch {
                a: self.sketch_length,
                b: other.sketch_length,
            });
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }

    /// Dense packing: exactly ⌈L/8⌉ bytes, little-endian bit order.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let n = self.sketch_length.div_ceil(8);
        let mut out = vec![0u8; n];
        for (i, b) in out.iter_mut().enumerate() {
            *b = (self.words[i / 8] >> (8 * (i % 8))) as u8;
        }
        out
    }

    pub fn from_packed_bytes(bytes: &[u8], sketch_length: usize, trace_id: String) -> Result<Sketch> {
        if bytes.len() != sketch_length.div_ceil(8) {
            return Err(Error::LengthMismatch {
                a: bytes.len() * 8,
                b: sketch_length,
            });
        }
        let mut words = vec![0u64; words_for(sketch_length)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        // Mask padding so equality and Hamming stay well defined.
        if sketch_length % 64 != 0 {
            let last = words.len() - 1;
            words[last] &= (1u64 << (sketch_length % 64)) - 1;
        }
        Ok(Sketch {
            trace_id,
            sketch_length,
            words,
            projection: None,
        })
    }
}

/// Fraction of agreeing bits — the similarity estimate two sketches carry.
pub fn estimate_similarity(a: &Sketch, b: &Sketch) -> Result<f64> {
    let h = a.hamming(b)?;
    Ok((a.sketch_length as f64 - h as f64) / a.sketch_length as f64)
}

/// Embed a sketch on the unit sphere: bit l → ±1/√L. Squared Euclidean
/// distance between two embeddings is 4·H/L for H differing bits, which is
/// the geometry the clustering layer works in.
pub fn unit_embed(sketch: &Sketch) -> Vec<f64> {
    let scale = 1.0 / (sketch.sketch_length as f64).sqrt();
    (0..sketch.sketch_length)
        .map(|l| if sketch.bit(l) { scale } else { -scale })
        .collect()
}

/// Serializable hasher identity: the random matrix is regenerated from the
/// seed, never stored; the registry is stored in assignment order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HasherState {
    pub seed: u64,
    pub sketch_length: usize,
    pub p_max: usize,
    #[serde(default)]
    pub skip_first_token: bool,
    pub tokens: Vec<String>,
}

/// The L-function hash family plus the growing token registry.
///
/// Sketching mutates the hasher (new tokens get registered), so concurrent
/// use requires external serialization of registration; already-assigned
/// ints are immutable, which keeps every previously computed sketch valid.
#[derive(Debug)]
pub struct SketchHasher {
    sketch_length: usize,
    p_max: usize,
    seed: u64,
    /// When set, the first token of every path is left out of the hash sum
    /// (the constant term still applies). Single-component paths then all
    /// hash identically per function — kept only for compatibility with
    /// deployments that ran that way; leave off.
    skip_first_token: bool,
    retain_projection: bool,
    /// Row-major L×(p_max+1) matrix of random 64-bit multipliers; column 0
    /// is the constant term, column j ≥ 1 pairs with a token position.
    matrix: Vec<u64>,
    registry: TokenRegistry,
    /// Token-hash operations performed, L per (entry, token) pair — cost
    /// accounting for the O(n·L·k) sketching bound.
    pub hash_ops: u64,
}

impl SketchHasher {
    pub fn new(sketch_length: usize, p_max: usize, seed: u64) -> Result<SketchHasher> {
        if sketch_length == 0 {
            return Err(Error::InvalidParams("sketch_length must be ≥ 1".into()));
        }
        if p_max == 0 {
            return Err(Error::InvalidParams("p_max must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Draw order (function-major, column-minor) is part of the hasher's
        // identity: reseeding must reproduce the same family bit for bit.
        let matrix = (0..sketch_length * (p_max + 1))
            .map(|_| rng.next_u64())
            .collect();
        Ok(SketchHasher {
            sketch_length,
            p_max,
            seed,
            skip_first_token: false,
            retain_projection: false,
            matrix,
            registry: TokenRegistry::default(),
            hash_ops: 0,
        })
    }

    pub fn with_skip_first_token(mut self, on: bool) -> SketchHasher {
        self.skip_first_token = on;
        self
    }

    pub fn set_retain_projection(&mut self, on: bool) {
        self.retain_projection = on;
    }

    pub fn sketch_length(&self) -> usize {
        self.sketch_length
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn registry_len(&self) -> usize {
        self.registry.tokens.len()
    }

    /// Matrix column paired with token position `i` (0-based), or None when
    /// the token does not participate in the sum.
    fn column_for(&self, i: usize) -> Option<usize> {
        if self.skip_first_token {
            if i == 0 {
                None
            } else {
                Some(i)
            }
        } else {
            Some(i + 1)
        }
    }

    fn row(&self, l: usize) -> &[u64] {
        let stride = self.p_max + 1;
        &self.matrix[l * stride..(l + 1) * stride]
    }

    /// The ±1 value function `l` assigns to `path`. Registers any unseen
    /// tokens as a side effect.
    pub fn hash_path(&mut self, l: usize, path: &CallPath) -> i8 {
        debug_assert!(l < self.sketch_length);
        let tokens = chunk_path(path, self.p_max);
        let ids: Vec<u64> = tokens.iter().map(|t| self.registry.intern(t)).collect();
        let row = self.row(l);
        let mut acc = row[0];
        for (i, &id) in ids.iter().enumerate() {
            if let Some(col) = self.column_for(i) {
                acc = acc.wrapping_add(row[col].wrapping_mul(id));
            }
        }
        self.hash_ops += tokens.len() as u64;
        if acc >> 63 == 1 {
            1
        } else {
            -1
        }
    }

    /// Sketch a sparse vector: project each present entry onto all L
    /// directions (bucket-weighted), keep projection signs. sign(0) = +1.
    pub fn sketch_vector(&mut self, v: &SparseTraceVector) -> Sketch {
        let len = self.sketch_length;
        let words = words_for(len);
        let mut projection = vec![0i64; len];
        for (path, &bucket) in &v.entries {
            let tokens = chunk_path(path, self.p_max);
            let ids: Vec<u64> = tokens.iter().map(|t| self.registry.intern(t)).collect();
            self.hash_ops += (len * tokens.len()) as u64;
            let b = bucket as i64;
            for (l, p) in projection.iter_mut().enumerate() {
                let row = self.row(l);
                let mut acc = row[0];
                for (i, &id) in ids.iter().enumerate() {
                    if let Some(col) = self.column_for(i) {
                        acc = acc.wrapping_add(row[col].wrapping_mul(id));
                    }
                }
                if acc >> 63 == 1 {
                    *p += b;
                } else {
                    *p -= b;
                }
            }
        }
        let mut bits = vec![0u64; words];
        for (l, &p) in projection.iter().enumerate() {
            if p >= 0 {
                bits[l / 64] |= 1u64 << (l % 64);
            }
        }
        Sketch {
            trace_id: v.trace_id.clone(),
            sketch_length: len,
            words: bits,
            projection: self
                .retain_projection
                .then(|| projection.iter().map(|&p| p as f64).collect()),
        }
    }

    pub fn to_state(&self) -> HasherState {
        HasherState {
            seed: self.seed,
            sketch_length: self.sketch_length,
            p_max: self.p_max,
            skip_first_token: self.skip_first_token,
            tokens: self.registry.tokens.clone(),
        }
    }

    pub fn from_state(state: &HasherState) -> Result<SketchHasher> {
        let mut h = SketchHasher::new(state.sketch_length, state.p_max, state.seed)?
            .with_skip_first_token(state.skip_first_token);
        for t in &state.tokens {
            h.registry.intern(t);
        }
        Ok(h)
    }
}

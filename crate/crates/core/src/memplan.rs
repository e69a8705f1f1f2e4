//! Byte model for the chunk-to-segment lookup table that chunked ring
//! attention materialises at compile time, plus a search for chunk sizes that
//! keep it under a budget.
//!
//! The table has shape `P x 1 x nq x nkv x S` with 32-bit integer elements,
//! where `nq` and `nkv` are the per-device query and KV chunk counts. The unit
//! axis is a broadcast axis and contributes nothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element width of the lookup table (32-bit integers). Fixed by the
/// observed tensor type; not a tuning knob.
pub const LOOKUP_ELEMENT_BYTES: u64 = 4;

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("{what} {divisor} does not divide {extent}")]
    NotDividing {
        what: &'static str,
        divisor: u64,
        extent: u64,
    },
    #[error("byte count overflows 64 bits")]
    Overflow,
    #[error("plans differ in {0}; comparison needs the same devices and sequence length")]
    Mismatch(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkPlan {
    devices: u64,
    seq_len: u64,
    q_chunk: u64,
    kv_chunk: u64,
}

impl ChunkPlan {
    pub fn new(devices: u64, seq_len: u64, q_chunk: u64, kv_chunk: u64) -> Result<Self, PlanError> {
        for (value, name) in [
            (devices, "devices"),
            (seq_len, "seq_len"),
            (q_chunk, "q_chunk"),
            (kv_chunk, "kv_chunk"),
        ] {
            if value == 0 {
                return Err(PlanError::Zero(name));
            }
        }
        if !seq_len.is_multiple_of(devices) {
            return Err(PlanError::NotDividing {
                what: "devices",
                divisor: devices,
                extent: seq_len,
            });
        }
        let per_device = seq_len / devices;
        for (chunk, what) in [(q_chunk, "q_chunk"), (kv_chunk, "kv_chunk")] {
            if !per_device.is_multiple_of(chunk) {
                return Err(PlanError::NotDividing {
                    what,
                    divisor: chunk,
                    extent: per_device,
                });
            }
        }
        Ok(Self {
            devices,
            seq_len,
            q_chunk,
            kv_chunk,
        })
    }

    pub fn devices(&self) -> u64 {
        self.devices
    }

    pub fn seq_len(&self) -> u64 {
        self.seq_len
    }

    pub fn q_chunk(&self) -> u64 {
        self.q_chunk
    }

    pub fn kv_chunk(&self) -> u64 {
        self.kv_chunk
    }

    pub fn per_device(&self) -> u64 {
        self.seq_len / self.devices
    }

    pub fn q_chunks(&self) -> u64 {
        self.per_device() / self.q_chunk
    }

    pub fn kv_chunks(&self) -> u64 {
        self.per_device() / self.kv_chunk
    }

    /// `[P, 1, nq, nkv, S]`
    pub fn lookup_table_shape(&self) -> [u64; 5] {
        [self.devices, 1, self.q_chunks(), self.kv_chunks(), self.seq_len]
    }
}

/// `P * nq * nkv * S * 4`.
pub fn lookup_table_bytes(plan: &ChunkPlan) -> Result<u64, PlanError> {
    plan.lookup_table_shape()
        .iter()
        .try_fold(LOOKUP_ELEMENT_BYTES, |acc, &dim| acc.checked_mul(dim))
        .ok_or(PlanError::Overflow)
}

/// A named extra memory term for the coarse additive model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTerm {
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub devices: u64,
    pub seq_len: u64,
    pub q_chunk: u64,
    pub kv_chunk: u64,
    pub per_device: u64,
    pub q_chunks: u64,
    pub kv_chunks: u64,
    pub lookup_table_shape: [u64; 5],
    pub lookup_table_bytes: u64,
    pub lookup_table_gib: String,
    pub terms: Vec<MemoryTerm>,
    pub total_bytes: u64,
    pub budget_bytes: Option<u64>,
    pub fits: bool,
}

pub fn memory_report(
    plan: &ChunkPlan,
    extra_terms: &[MemoryTerm],
    budget_bytes: Option<u64>,
) -> Result<MemoryReport, PlanError> {
    let lookup = lookup_table_bytes(plan)?;
    let mut terms = vec![MemoryTerm {
        name: "lookup_table".to_string(),
        bytes: lookup,
    }];
    terms.extend_from_slice(extra_terms);
    let total_bytes = terms
        .iter()
        .try_fold(0u64, |acc, t| acc.checked_add(t.bytes))
        .ok_or(PlanError::Overflow)?;
    Ok(MemoryReport {
        devices: plan.devices,
        seq_len: plan.seq_len,
        q_chunk: plan.q_chunk,
        kv_chunk: plan.kv_chunk,
        per_device: plan.per_device(),
        q_chunks: plan.q_chunks(),
        kv_chunks: plan.kv_chunks(),
        lookup_table_shape: plan.lookup_table_shape(),
        lookup_table_bytes: lookup,
        lookup_table_gib: format_gib(lookup),
        terms,
        total_bytes,
        budget_bytes,
        fits: budget_bytes.is_none_or(|b| total_bytes <= b),
    })
}

pub fn format_gib(bytes: u64) -> String {
    format!("{:.3} GiB", bytes as f64 / GIB as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConstraints {
    pub min_q_chunk: u64,
    pub max_q_chunk: Option<u64>,
    pub min_kv_chunk: u64,
    pub max_kv_chunk: Option<u64>,
    pub power_of_two: bool,
}

impl Default for ChunkConstraints {
    fn default() -> Self {
        Self {
            min_q_chunk: 1,
            max_q_chunk: None,
            min_kv_chunk: 1,
            max_kv_chunk: None,
            power_of_two: true,
        }
    }
}

impl ChunkConstraints {
    fn admits(&self, chunk: u64, min: u64, max: Option<u64>) -> bool {
        chunk >= min && max.is_none_or(|m| chunk <= m) && (!self.power_of_two || chunk.is_power_of_two())
    }
}

fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut i = 1;
    while i * i <= n {
        if n.is_multiple_of(i) {
            small.push(i);
            if i != n / i {
                large.push(n / i);
            }
        }
        i += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Smallest `(q_chunk, kv_chunk)`, compared lexicographically, whose lookup
/// table fits `budget_bytes`. `None` when nothing fits.
pub fn search_chunk_plan(
    devices: u64,
    seq_len: u64,
    budget_bytes: u64,
    constraints: &ChunkConstraints,
) -> Result<Option<ChunkPlan>, PlanError> {
    if devices == 0 {
        return Err(PlanError::Zero("devices"));
    }
    if budget_bytes == 0 {
        return Err(PlanError::Zero("budget"));
    }
    if seq_len == 0 || !seq_len.is_multiple_of(devices) {
        return Err(PlanError::NotDividing {
            what: "devices",
            divisor: devices,
            extent: seq_len,
        });
    }
    let chunks = divisors(seq_len / devices);
    for &q in chunks
        .iter()
        .filter(|&&q| constraints.admits(q, constraints.min_q_chunk, constraints.max_q_chunk))
    {
        // Bytes only shrink as kv_chunk grows, so the first fit is the smallest.
        for &kv in chunks
            .iter()
            .filter(|&&kv| constraints.admits(kv, constraints.min_kv_chunk, constraints.max_kv_chunk))
        {
            let plan = ChunkPlan::new(devices, seq_len, q, kv)?;
            if lookup_table_bytes(&plan).is_ok_and(|b| b <= budget_bytes) {
                return Ok(Some(plan));
            }
        }
    }
    Ok(None)
}

/// Lookup-table comparison of two plans over the same devices and sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub baseline: MemoryReport,
    pub candidate: MemoryReport,
    /// `baseline - candidate`; positive when the candidate saves memory.
    pub lookup_table_delta_bytes: i128,
    pub lookup_table_delta_gib: String,
    pub lookup_table_ratio: f64,
    pub note: String,
}

pub const SCENARIO_NOTE: &str = "Covers the lookup-table tensor only. Whole-graph peak \
    pre-allocation differences also include buffers outside this model and are not reproduced here.";

pub fn scenario_report(baseline: &ChunkPlan, candidate: &ChunkPlan) -> Result<ScenarioComparison, PlanError> {
    if baseline.devices != candidate.devices {
        return Err(PlanError::Mismatch("devices"));
    }
    if baseline.seq_len != candidate.seq_len {
        return Err(PlanError::Mismatch("seq_len"));
    }
    let a = memory_report(baseline, &[], None)?;
    let b = memory_report(candidate, &[], None)?;
    let delta = i128::from(a.lookup_table_bytes) - i128::from(b.lookup_table_bytes);
    let sign = if delta < 0 { "-" } else { "" };
    Ok(ScenarioComparison {
        lookup_table_delta_bytes: delta,
        lookup_table_delta_gib: format!("{sign}{}", format_gib(delta.unsigned_abs() as u64)),
        lookup_table_ratio: a.lookup_table_bytes as f64 / b.lookup_table_bytes as f64,
        note: SCENARIO_NOTE.to_string(),
        baseline: a,
        candidate: b,
    })
}

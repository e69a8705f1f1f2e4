//! Desk-scale blockwise and ring-scheduled attention with causal and
//! intra-document (segment id) masking.
//!
//! Every path here runs in f64. [`exact_attention`] is the dense reference;
//! [`blockwise_attention`] and [`ring_attention`] stream over KV chunks with an
//! online (running-max) softmax and must agree with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttentionError {
    #[error("matrix data has {got} elements, expected {rows}x{cols}")]
    BadMatrix { rows: usize, cols: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("segment ids must be non-decreasing (position {0})")]
    SegmentsNotSorted(usize),
    #[error("segment lengths sum to {got}, sequence has {expected} tokens")]
    SegmentLengthMismatch { expected: usize, got: usize },
    #[error("segment lengths must be positive")]
    EmptySegment,
    #[error("chunk size {chunk} does not divide {extent}")]
    ChunkNotDividing { chunk: usize, extent: usize },
    #[error("device count {devices} does not divide sequence length {seq_len}")]
    DevicesNotDividing { devices: usize, seq_len: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        if data.len() != rows * cols {
            return Err(AttentionError::BadMatrix {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// `max |self - reference| / max |reference|`.
    pub fn relative_error(&self, reference: &Matrix) -> f64 {
        self.max_abs_diff(reference) / reference.max_abs().max(f64::MIN_POSITIVE)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Q, K, V of shape `(S, d)` plus one segment id per token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProblem {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    segment_ids: Vec<u32>,
    scale: f64,
    causal: bool,
}

impl AttentionProblem {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, segment_ids: Vec<u32>) -> Result<Self, AttentionError> {
        let (s, d) = (q.rows, q.cols);
        if s == 0 {
            return Err(AttentionError::Zero("sequence length"));
        }
        if d == 0 {
            return Err(AttentionError::Zero("head dimension"));
        }
        if (k.rows, k.cols) != (s, d) || (v.rows, v.cols) != (s, d) {
            return Err(AttentionError::ShapeMismatch(format!(
                "q {}x{}, k {}x{}, v {}x{}",
                s, d, k.rows, k.cols, v.rows, v.cols
            )));
        }
        if segment_ids.len() != s {
            return Err(AttentionError::ShapeMismatch(format!(
                "{} segment ids for {} tokens",
                segment_ids.len(),
                s
            )));
        }
        if let Some(pos) = segment_ids.windows(2).position(|w| w[1] < w[0]) {
            return Err(AttentionError::SegmentsNotSorted(pos + 1));
        }
        Ok(Self {
            q,
            k,
            v,
            segment_ids,
            scale: 1.0 / (d as f64).sqrt(),
            causal: true,
        })
    }

    /// Random problem with entries uniform in `[-1, 1)`.
    pub fn random(
        seq_len: usize,
        head_dim: usize,
        segment_lengths: &[usize],
        seed: u64,
    ) -> Result<Self, AttentionError> {
        let segment_ids = segment_ids_from_lengths(segment_lengths, seq_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = || {
            let data = (0..seq_len * head_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Matrix::from_vec(seq_len, head_dim, data)
        };
        let (q, k, v) = (fill()?, fill()?, fill()?);
        Self::new(q, k, v, segment_ids)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols
    }

    pub fn segment_ids(&self) -> &[u32] {
        &self.segment_ids
    }

    pub fn values(&self) -> &Matrix {
        &self.v
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    /// Whether query `i` may attend to key `j`. Self-attention is always legal.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        i == j || ((!self.causal || j <= i) && self.segment_ids[i] == self.segment_ids[j])
    }

    fn score(&self, i: usize, j: usize) -> f64 {
        let dot: f64 = self.q.row(i).iter().zip(self.k.row(j)).map(|(a, b)| a * b).sum();
        dot * self.scale
    }

    /// True if no pair in the query range can see any key in the KV range.
    /// Relies on segment ids being sorted.
    fn block_fully_masked(&self, q: &std::ops::Range<usize>, kv: &std::ops::Range<usize>) -> bool {
        if self.causal && kv.start > q.end - 1 {
            return true;
        }
        let (q_lo, q_hi) = (self.segment_ids[q.start], self.segment_ids[q.end - 1]);
        let (k_lo, k_hi) = (self.segment_ids[kv.start], self.segment_ids[kv.end - 1]);
        k_hi < q_lo || q_hi < k_lo
    }
}

/// Expands per-document lengths into sorted segment ids.
pub fn segment_ids_from_lengths(lengths: &[usize], seq_len: usize) -> Result<Vec<u32>, AttentionError> {
    if lengths.is_empty() {
        return Ok(vec![0; seq_len]);
    }
    if lengths.contains(&0) {
        return Err(AttentionError::EmptySegment);
    }
    let total: usize = lengths.iter().sum();
    if total != seq_len {
        return Err(AttentionError::SegmentLengthMismatch {
            expected: seq_len,
            got: total,
        });
    }
    Ok(lengths
        .iter()
        .enumerate()
        .flat_map(|(id, &len)| std::iter::repeat_n(id as u32, len))
        .collect())
}

/// Dense attention weights `(S, S)`; masked entries are exactly zero.
pub fn attention_weights(p: &AttentionProblem) -> Matrix {
    let s = p.seq_len();
    let mut w = Matrix::zeros(s, s);
    for i in 0..s {
        let scores: Vec<(usize, f64)> = (0..s)
            .filter(|&j| p.allowed(i, j))
            .map(|j| (j, p.score(i, j)))
            .collect();
        let max = scores.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = scores.iter().map(|&(_, x)| (x - max).exp()).sum();
        let row = w.row_mut(i);
        for (j, x) in scores {
            row[j] = (x - max).exp() / denom;
        }
    }
    w
}

/// Reference softmax attention with causal and cross-document masking.
pub fn exact_attention(p: &AttentionProblem) -> Matrix {
    let w = attention_weights(p);
    let (s, d) = (p.seq_len(), p.head_dim());
    let mut out = Matrix::zeros(s, d);
    for i in 0..s {
        let row = out.row_mut(i);
        for j in 0..s {
            let weight = w.get(i, j);
            if weight != 0.0 {
                for (o, v) in row.iter_mut().zip(p.v.row(j)) {
                    *o += weight * v;
                }
            }
        }
    }
    out
}

/// Running softmax state for one query row.
#[derive(Debug, Clone)]
struct RowState {
    max: f64,
    denom: f64,
    acc: Vec<f64>,
    scores: Vec<(usize, f64)>,
}

impl RowState {
    fn new(d: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            denom: 0.0,
            acc: vec![0.0; d],
            scores: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub computed: usize,
    pub skipped: usize,
}

/// Folds the keys in `kv` into the running state of every query in `q`.
fn absorb_block(
    p: &AttentionProblem,
    q: std::ops::Range<usize>,
    kv: std::ops::Range<usize>,
    states: &mut [RowState],
    q_offset: usize,
    record: bool,
) -> bool {
    if p.block_fully_masked(&q, &kv) {
        return false;
    }
    let mut block = Vec::with_capacity(kv.len());
    for i in q {
        block.clear();
        block.extend(
            kv.clone()
                .filter(|&j| p.allowed(i, j))
                .map(|j| (j, p.score(i, j))),
        );
        if block.is_empty() {
            continue;
        }
        let state = &mut states[i - q_offset];
        let block_max = block.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
        let new_max = state.max.max(block_max);
        let correction = if state.max == f64::NEG_INFINITY {
            0.0
        } else {
            (state.max - new_max).exp()
        };
        state.denom *= correction;
        state.acc.iter_mut().for_each(|a| *a *= correction);
        for &(j, x) in &block {
            let e = (x - new_max).exp();
            state.denom += e;
            for (a, v) in state.acc.iter_mut().zip(p.v.row(j)) {
                *a += e * v;
            }
        }
        state.max = new_max;
        if record {
            state.scores.extend_from_slice(&block);
        }
    }
    true
}

fn check_divides(chunk: usize, extent: usize) -> Result<(), AttentionError> {
    if chunk == 0 {
        return Err(AttentionError::Zero("chunk size"));
    }
    if !extent.is_multiple_of(chunk) {
        return Err(AttentionError::ChunkNotDividing { chunk, extent });
    }
    Ok(())
}

fn finish_rows(states: &[RowState], out: &mut Matrix, row_offset: usize) {
    for (r, state) in states.iter().enumerate() {
        let row = out.row_mut(row_offset + r);
        for (o, a) in row.iter_mut().zip(&state.acc) {
            *o = a / state.denom;
        }
    }
}

fn finish_weights(states: &[RowState], weights: &mut Matrix, row_offset: usize) {
    for (r, state) in states.iter().enumerate() {
        let row = weights.row_mut(row_offset + r);
        for &(j, x) in &state.scores {
            row[j] = (x - state.max).exp() / state.denom;
        }
    }
}

/// Online-softmax attention over `(q_chunk, kv_chunk)` tiles of the full
/// sequence.
pub fn blockwise_attention(
    p: &AttentionProblem,
    q_chunk: usize,
    kv_chunk: usize,
) -> Result<Matrix, AttentionError> {
    let s = p.seq_len();
    check_divides(q_chunk, s)?;
    check_divides(kv_chunk, s)?;
    let mut out = Matrix::zeros(s, p.head_dim());
    for q_start in (0..s).step_by(q_chunk) {
        let mut states = vec![RowState::new(p.head_dim()); q_chunk];
        for kv_start in (0..s).step_by(kv_chunk) {
            absorb_block(
                p,
                q_start..q_start + q_chunk,
                kv_start..kv_start + kv_chunk,
                &mut states,
                q_start,
                false,
            );
        }
        finish_rows(&states, &mut out, q_start);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingMesh {
    pub devices: usize,
    pub q_chunk: usize,
    pub kv_chunk: usize,
}

impl RingMesh {
    pub fn new(devices: usize, q_chunk: usize, kv_chunk: usize) -> Self {
        Self {
            devices,
            q_chunk,
            kv_chunk,
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<usize, AttentionError> {
        if self.devices == 0 {
            return Err(AttentionError::Zero("device count"));
        }
        if !seq_len.is_multiple_of(self.devices) {
            return Err(AttentionError::DevicesNotDividing {
                devices: self.devices,
                seq_len,
            });
        }
        let per_device = seq_len / self.devices;
        check_divides(self.q_chunk, per_device)?;
        check_divides(self.kv_chunk, per_device)?;
        Ok(per_device)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingStep {
    pub step: usize,
    pub device: usize,
    /// Device whose KV partition is resident on `device` during this step.
    pub kv_origin: usize,
    pub blocks: BlockCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub after_step: usize,
    pub from: usize,
    pub to: usize,
    pub kv_origin: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingTrace {
    pub devices: usize,
    pub steps: Vec<RingStep>,
    pub transfers: Vec<Transfer>,
}

impl RingTrace {
    pub fn transfer_count(&self) -> usize {
        self.transfers.len()
    }

    /// `schedule[step][device]` is the KV origin processed there.
    pub fn schedule(&self) -> Vec<Vec<usize>> {
        let mut grid = vec![vec![0; self.devices]; self.devices];
        for s in &self.steps {
            grid[s.step][s.device] = s.kv_origin;
        }
        grid
    }

    pub fn block_totals(&self) -> BlockCounts {
        self.steps
            .iter()
            .fold(BlockCounts::default(), |acc, s| BlockCounts {
                computed: acc.computed + s.blocks.computed,
                skipped: acc.skipped + s.blocks.skipped,
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingOutput {
    pub output: Matrix,
    pub trace: RingTrace,
    /// Effective weights reconstructed from the scores each device actually
    /// absorbed; pairs never absorbed are exactly zero.
    pub weights: Option<Matrix>,
}

/// Simulates ring attention: device `r` keeps query partition `r` and, at
/// step `s`, processes KV partition `(r - s) mod P`, then passes it to
/// `r + 1`. Devices run one after another in index order, so the result is
/// bit-stable across runs.
pub fn ring_attention(p: &AttentionProblem, mesh: &RingMesh) -> Result<RingOutput, AttentionError> {
    run_ring(p, mesh, false)
}

pub fn ring_attention_with_weights(
    p: &AttentionProblem,
    mesh: &RingMesh,
) -> Result<RingOutput, AttentionError> {
    run_ring(p, mesh, true)
}

fn run_ring(p: &AttentionProblem, mesh: &RingMesh, record: bool) -> Result<RingOutput, AttentionError> {
    let per_device = mesh.validate(p.seq_len())?;
    let devices = mesh.devices;
    let d = p.head_dim();
    let mut states: Vec<Vec<RowState>> = (0..devices).map(|_| vec![RowState::new(d); per_device]).collect();
    // resident[r] = origin of the KV partition currently held by device r
    let mut resident: Vec<usize> = (0..devices).collect();
    let mut steps = Vec::with_capacity(devices * devices);
    let mut transfers = Vec::with_capacity(devices * devices.saturating_sub(1));

    for step in 0..devices {
        for device in 0..devices {
            let origin = resident[device];
            let q_base = device * per_device;
            let kv_base = origin * per_device;
            let mut blocks = BlockCounts::default();
            for q_start in (q_base..q_base + per_device).step_by(mesh.q_chunk) {
                for kv_start in (kv_base..kv_base + per_device).step_by(mesh.kv_chunk) {
                    let hit = absorb_block(
                        p,
                        q_start..q_start + mesh.q_chunk,
                        kv_start..kv_start + mesh.kv_chunk,
                        &mut states[device],
                        q_base,
                        record,
                    );
                    if hit {
                        blocks.computed += 1;
                    } else {
                        blocks.skipped += 1;
                    }
                }
            }
            steps.push(RingStep {
                step,
                device,
                kv_origin: origin,
                blocks,
            });
        }
        if step + 1 < devices {
            for (from, &kv_origin) in resident.iter().enumerate() {
                transfers.push(Transfer {
                    after_step: step,
                    from,
                    to: (from + 1) % devices,
                    kv_origin,
                });
            }
            resident.rotate_right(1);
        }
    }

    let s = p.seq_len();
    let mut output = Matrix::zeros(s, d);
    let mut weights = record.then(|| Matrix::zeros(s, s));
    for (device, dev_states) in states.iter().enumerate() {
        finish_rows(dev_states, &mut output, device * per_device);
        if let Some(w) = weights.as_mut() {
            finish_weights(dev_states, w, device * per_device);
        }
    }
    Ok(RingOutput {
        output,
        trace: RingTrace {
            devices,
            steps,
            transfers,
        },
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DospLimits {
    pub ring_dosp: usize,
    pub all_to_all_dosp: usize,
}

/// Degree of sequence parallelism reachable by ring attention (every device)
/// versus head-transposing all-to-all schemes (capped by the KV head count).
pub fn dosp_limits(kv_heads: usize, devices: usize) -> DospLimits {
    DospLimits {
        ring_dosp: devices,
        all_to_all_dosp: devices.min(kv_heads),
    }
}

use super::client::{CompletionClient, CompletionRequest};
use super::{generate_case, random_payload, score, NiahCase, NiahError, Verdict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Identifies one trial of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub length: usize,
    pub depth: f64,
    pub trial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub payload_digits: usize,
    pub max_tokens: u32,
    /// Maximum number of requests in flight.
    pub concurrency: usize,
}

impl GridSpec {
    pub fn new(lengths: Vec<usize>, depths: Vec<f64>, trials: usize) -> Self {
        Self {
            lengths,
            depths,
            trials,
            seed: 0,
            payload_digits: 7,
            max_tokens: 32,
            concurrency: 4,
        }
    }

    /// Seed shared by every depth of one (length, trial) pair, so that depth
    /// only moves the needle within the same filler.
    pub fn trial_seed(&self, length_index: usize, trial: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64((length_index as u64) << 32 | trial as u64))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub length: usize,
    pub depth: f64,
    pub trial: usize,
    pub seed: u64,
    pub expected: String,
    pub answer: Option<String>,
    pub verdict: Option<Verdict>,
    pub matched_prefix_len: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub length: usize,
    pub depth: f64,
    pub trials: usize,
    pub exact: usize,
    pub truncated: usize,
    pub wrong: usize,
    pub empty: usize,
    pub errors: usize,
    pub exact_rate: f64,
    pub truncated_rate: f64,
    pub wrong_rate: f64,
    pub empty_rate: f64,
    /// Last error seen in this cell, if any trial failed.
    pub error: Option<String>,
}

impl GridCell {
    fn tally(length: usize, depth: f64, records: &[&TrialRecord]) -> Self {
        let count = |v| records.iter().filter(|r| r.verdict == Some(v)).count();
        let trials = records.len();
        let rate = |n: usize| {
            if trials == 0 {
                0.0
            } else {
                n as f64 / trials as f64
            }
        };
        let (exact, truncated, wrong, empty) = (
            count(Verdict::Exact),
            count(Verdict::Truncated),
            count(Verdict::Wrong),
            count(Verdict::Empty),
        );
        Self {
            length,
            depth,
            trials,
            exact,
            truncated,
            wrong,
            empty,
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            exact_rate: rate(exact),
            truncated_rate: rate(truncated),
            wrong_rate: rate(wrong),
            empty_rate: rate(empty),
            error: records.iter().rev().find_map(|r| r.error.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// `cells[length_index][depth_index]`
    pub cells: Vec<Vec<GridCell>>,
    pub details: Vec<TrialRecord>,
}

impl GridReport {
    /// Exact-recall matrix: one row per length, one column per depth. Cells
    /// where every trial failed print `error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length");
        for d in &self.depths {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
        for row in &self.cells {
            out.push_str(&row[0].length.to_string());
            for cell in row {
                if cell.trials > 0 && cell.errors == cell.trials {
                    out.push_str(",error");
                } else {
                    out.push_str(&format!(",{}", cell.exact_rate));
                }
            }
            out.push('\n');
        }
        out
    }
}

struct Job {
    length_index: usize,
    depth_index: usize,
    trial: usize,
}

fn run_trial(spec: &GridSpec, job: &Job, client: &dyn CompletionClient) -> TrialRecord {
    let length = spec.lengths[job.length_index];
    let depth = spec.depths[job.depth_index];
    let seed = spec.trial_seed(job.length_index, job.trial);
    let payload = random_payload(&mut ChaCha8Rng::seed_from_u64(seed), spec.payload_digits);
    let mut record = TrialRecord {
        length,
        depth,
        trial: job.trial,
        seed,
        expected: payload.clone(),
        answer: None,
        verdict: None,
        matched_prefix_len: 0,
        error: None,
    };
    let generated = match generate_case(&NiahCase::new(length, depth, payload, seed)) {
        Ok(g) => g,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let request = CompletionRequest {
        prompt: &generated.prompt,
        max_tokens: spec.max_tokens,
        cell: CellKey {
            length,
            depth,
            trial: job.trial,
        },
    };
    match client.complete(&request) {
        Ok(answer) => {
            // Payload is a validated digit string, so scoring cannot fail.
            let result = score(&generated.expected, &answer).expect("generated payload is digits");
            record.verdict = Some(result.verdict);
            record.matched_prefix_len = result.matched_prefix_len;
            record.answer = Some(answer);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Runs every `(length, depth, trial)` combination against `client`.
///
/// Up to `spec.concurrency` requests run at once. Failures are recorded in the
/// affected cell and never abort the grid. Output order follows the input
/// order regardless of completion order.
pub fn run_grid(spec: &GridSpec, client: &dyn CompletionClient) -> Result<GridReport, NiahError> {
    if spec.lengths.is_empty() || spec.depths.is_empty() || spec.trials == 0 {
        return Err(NiahError::EmptyGrid);
    }
    if let Some(&bad) = spec.depths.iter().find(|d| !(0.0..=100.0).contains(*d)) {
        return Err(NiahError::BadDepth(bad));
    }
    let mut jobs = Vec::new();
    for length_index in 0..spec.lengths.len() {
        for depth_index in 0..spec.depths.len() {
            for trial in 0..spec.trials {
                jobs.push(Job {
                    length_index,
                    depth_index,
                    trial,
                });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let workers = spec.concurrency.clamp(1, jobs.len());
    let mut done: Vec<(usize, TrialRecord)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(job) = jobs.get(i) else { break };
                        local.push((i, run_trial(spec, job, client)));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("grid worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    let details: Vec<TrialRecord> = done.into_iter().map(|(_, r)| r).collect();

    let per_length = spec.depths.len() * spec.trials;
    let cells = spec
        .lengths
        .iter()
        .enumerate()
        .map(|(li, &length)| {
            spec.depths
                .iter()
                .enumerate()
                .map(|(di, &depth)| {
                    let start = li * per_length + di * spec.trials;
                    let records: Vec<&TrialRecord> = details[start..start + spec.trials].iter().collect();
                    GridCell::tally(length, depth, &records)
                })
                .collect()
        })
        .collect();

    Ok(GridReport {
        lengths: spec.lengths.clone(),
        depths: spec.depths.clone(),
        trials: spec.trials,
        seed: spec.seed,
        cells,
        details,
    })
}

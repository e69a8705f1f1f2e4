//! Phased long-context training recipes as validated manifests.
//!
//! Token counts are integers. "300K", "600K", "512K" and similar figures are
//! decimal thousands (300,000 tokens) unless a phase says otherwise in its
//! provenance notes.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SUBTOTAL_TOLERANCE: f64 = 0.05;
pub const MIX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeqLen {
    Exact(u64),
    Range { min: u64, max: u64 },
}

impl SeqLen {
    fn is_valid(&self) -> bool {
        match *self {
            SeqLen::Exact(n) => n > 0,
            SeqLen::Range { min, max } => min > 0 && min <= max,
        }
    }
}

impl fmt::Display for SeqLen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeqLen::Exact(n) => write!(f, "{n}"),
            SeqLen::Range { min, max } => write!(f, "{min}-{max}"),
        }
    }
}

/// One slice of a phase's data: sequences of a given length, sized either by
/// count or by token subtotal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub seq_len: SeqLen,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_subtotal: Option<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl SequenceSpec {
    pub fn by_count(seq_len: u64, count: u64) -> Self {
        Self {
            seq_len: SeqLen::Exact(seq_len),
            sequence_count: Some(count),
            token_subtotal: None,
            note: String::new(),
        }
    }

    pub fn by_tokens(seq_len: SeqLen, tokens: u64) -> Self {
        Self {
            seq_len,
            sequence_count: None,
            token_subtotal: Some(tokens),
            note: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// Tokens in this slice, recomputed from count x length when sized by
    /// count. `None` for counted ranges, whose size is not determined.
    pub fn tokens(&self) -> Option<u64> {
        match (self.sequence_count, self.token_subtotal, self.seq_len) {
            (Some(count), None, SeqLen::Exact(len)) => count.checked_mul(len),
            (None, Some(tokens), _) => Some(tokens),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    ContinualPretraining,
    SupervisedFinetuning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub id: String,
    pub order: u32,
    pub kind: PhaseKind,
    pub token_budget: u64,
    pub sequences: Vec<SequenceSpec>,
    /// Source category -> fraction. Empty when the mix is not specified.
    #[serde(default)]
    pub mix: BTreeMap<String, f64>,
    pub rope_theta: f64,
    /// Allowed relative gap between the budget and the sum of slices.
    #[serde(default = "default_tolerance")]
    pub subtotal_tolerance: f64,
    pub purpose: String,
    #[serde(default)]
    pub provenance: Vec<String>,
}

fn default_tolerance() -> f64 {
    DEFAULT_SUBTOTAL_TOLERANCE
}

impl PhasePlan {
    pub fn sequence_tokens(&self) -> u64 {
        self.sequences.iter().filter_map(SequenceSpec::tokens).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub after_phase: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeManifest {
    pub schema: u32,
    pub base_model: String,
    pub phases: Vec<PhasePlan>,
    #[serde(default)]
    pub checkpoints: Vec<Checkpoint>,
}

impl RecipeManifest {
    pub fn phase(&self, id: &str) -> Option<&PhasePlan> {
        self.phases.iter().find(|p| p.id == id)
    }

    /// Token budget summed over continual-pretraining phases.
    pub fn pretraining_tokens(&self) -> u64 {
        self.phases
            .iter()
            .filter(|p| p.kind == PhaseKind::ContinualPretraining)
            .map(|p| p.token_budget)
            .sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.phases.iter().map(|p| p.token_budget).sum()
    }
}

const K: u64 = 1_000;
const M: u64 = 1_000_000;

/// The four-phase context-extension recipe for a 7B base model.
pub fn reference_recipe() -> RecipeManifest {
    let mix = [("code", 0.70), ("papers", 0.10), ("web", 0.15), ("books", 0.05)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    RecipeManifest {
        schema: SCHEMA_VERSION,
        base_model: "mistralai/Mistral-7B-Instruct-v0.2".into(),
        phases: vec![
            PhasePlan {
                id: "1".into(),
                order: 1,
                kind: PhaseKind::ContinualPretraining,
                token_budget: 1_200 * M,
                sequences: vec![
                    SequenceSpec::by_tokens(SeqLen::Exact(300 * K), 640 * M),
                    SequenceSpec::by_tokens(SeqLen::Exact(600 * K), 560 * M),
                ],
                mix,
                rope_theta: 25_000_000.0,
                subtotal_tolerance: DEFAULT_SUBTOTAL_TOLERANCE,
                purpose: "progressive long-context pretraining on organically long documents".into(),
                provenance: vec![
                    "0.64B tokens as 300K-token sequences, 0.56B as 600K-token sequences".into(),
                    "mix applies at phase level; per-length mix is not specified".into(),
                    "recall degraded beyond 300K tokens after this phase".into(),
                ],
            },
            PhasePlan {
                id: "2a".into(),
                order: 2,
                kind: PhaseKind::ContinualPretraining,
                token_budget: 180 * M,
                sequences: vec![SequenceSpec::by_tokens(SeqLen::Exact(600 * K), 180 * M)],
                mix: BTreeMap::new(),
                rope_theta: 75_000_000.0,
                subtotal_tolerance: DEFAULT_SUBTOTAL_TOLERANCE,
                purpose: "raise theta to fix degradation beyond 300K tokens".into(),
                provenance: vec!["theta raised from 25M to 75M; endpoint depths degraded afterwards".into()],
            },
            PhasePlan {
                id: "2b".into(),
                order: 3,
                kind: PhaseKind::ContinualPretraining,
                token_budget: 260 * M,
                sequences: vec![SequenceSpec::by_tokens(
                    SeqLen::Range {
                        min: 32 * K,
                        max: 80 * K,
                    },
                    260 * M,
                )],
                mix: BTreeMap::new(),
                rope_theta: 75_000_000.0,
                subtotal_tolerance: DEFAULT_SUBTOTAL_TOLERANCE,
                purpose: "shorter sequences under the new theta to repair endpoint recall".into(),
                provenance: vec!["0.26B tokens of 32K-80K sequences".into()],
            },
            PhasePlan {
                id: "3".into(),
                order: 4,
                kind: PhaseKind::ContinualPretraining,
                token_budget: 200 * M,
                sequences: vec![
                    SequenceSpec::by_count(80 * K, 1_200).with_note("published subtotal 96M"),
                    SequenceSpec::by_count(256 * K, 300).with_note("published subtotal 77M"),
                    SequenceSpec::by_count(512 * K, 30).with_note("published subtotal 15M"),
                ],
                mix: BTreeMap::new(),
                rope_theta: 75_000_000.0,
                // Counts x decimal lengths give 188.16M against a rounded 0.2B budget.
                subtotal_tolerance: 0.06,
                purpose: "balanced long-context pretraining after the float32 RoPE fix".into(),
                provenance: vec![
                    "budget published as 0.2B; slices sum to 188.16M with decimal lengths".into(),
                ],
            },
            PhasePlan {
                id: "4".into(),
                order: 5,
                kind: PhaseKind::SupervisedFinetuning,
                token_budget: 22 * M,
                sequences: vec![SequenceSpec::by_tokens(
                    SeqLen::Range {
                        min: 64 * K,
                        max: 512 * K,
                    },
                    22 * M,
                )
                .with_note("synthetic long documents built from question-answer pairs")],
                mix: BTreeMap::new(),
                rope_theta: 75_000_000.0,
                subtotal_tolerance: DEFAULT_SUBTOTAL_TOLERANCE,
                purpose: "long-context supervised fine-tuning".into(),
                provenance: vec!["22M-token SFT set".into()],
            },
        ],
        checkpoints: vec![
            Checkpoint {
                after_phase: "1".into(),
                name: "long-context-300k".into(),
            },
            Checkpoint {
                after_phase: "4".into(),
                name: "long-context-512k".into(),
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub phase: Option<String>,
    pub field: String,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.phase {
            Some(p) => write!(f, "phase {p}: ")?,
            None => f.write_str("manifest: ")?,
        }
        write!(
            f,
            "{} expected {}, got {}",
            self.field, self.expected, self.actual
        )
    }
}

/// Checks every manifest invariant. Empty means valid.
pub fn validate(manifest: &RecipeManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |phase: Option<&str>, field: &str, expected: String, actual: String| {
        out.push(Violation {
            phase: phase.map(str::to_string),
            field: field.to_string(),
            expected,
            actual,
        })
    };

    if manifest.schema != SCHEMA_VERSION {
        push(
            None,
            "schema",
            SCHEMA_VERSION.to_string(),
            manifest.schema.to_string(),
        );
    }
    if manifest.phases.is_empty() {
        push(None, "phases", "at least one phase".into(), "none".into());
    }

    for p in &manifest.phases {
        let id = Some(p.id.as_str());
        if p.token_budget == 0 {
            push(id, "token_budget", "> 0".into(), "0".into());
        }
        if !(p.rope_theta.is_finite() && p.rope_theta > 0.0) {
            push(id, "rope_theta", "positive".into(), p.rope_theta.to_string());
        }
        if !(0.0..1.0).contains(&p.subtotal_tolerance) {
            push(
                id,
                "subtotal_tolerance",
                "in [0, 1)".into(),
                p.subtotal_tolerance.to_string(),
            );
        }
        if !p.mix.is_empty() {
            let sum: f64 = p.mix.values().sum();
            if (sum - 1.0).abs() > MIX_TOLERANCE {
                push(id, "mix", "fractions summing to 1".into(), format!("sum {sum}"));
            }
            for (source, &frac) in &p.mix {
                if !(0.0..=1.0).contains(&frac) {
                    push(id, &format!("mix.{source}"), "in [0, 1]".into(), frac.to_string());
                }
            }
        }
        if p.sequences.is_empty() {
            push(id, "sequences", "at least one entry".into(), "none".into());
        }
        for (i, s) in p.sequences.iter().enumerate() {
            let field = format!("sequences[{i}]");
            if !s.seq_len.is_valid() {
                push(
                    id,
                    &format!("{field}.seq_len"),
                    "positive length".into(),
                    s.seq_len.to_string(),
                );
            }
            match (s.sequence_count, s.token_subtotal) {
                (Some(_), Some(_)) | (None, None) => push(
                    id,
                    &field,
                    "exactly one of sequence_count or token_subtotal".into(),
                    format!("count {:?}, subtotal {:?}", s.sequence_count, s.token_subtotal),
                ),
                (Some(_), None) if !matches!(s.seq_len, SeqLen::Exact(_)) => push(
                    id,
                    &field,
                    "sequence_count with an exact seq_len".into(),
                    format!("range {}", s.seq_len),
                ),
                _ => {}
            }
        }
        if p.token_budget > 0 && !p.sequences.is_empty() {
            let total = p.sequence_tokens();
            let gap = (total as f64 - p.token_budget as f64).abs() / p.token_budget as f64;
            if gap > p.subtotal_tolerance {
                push(
                    id,
                    "sequences",
                    format!(
                        "subtotals within {}% of {}",
                        p.subtotal_tolerance * 100.0,
                        p.token_budget
                    ),
                    format!("{total} ({:.2}% off)", gap * 100.0),
                );
            }
        }
    }

    for w in manifest.phases.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.order <= a.order {
            push(
                Some(&b.id),
                "order",
                format!("> {} (phase {})", a.order, a.id),
                b.order.to_string(),
            );
        }
        if b.rope_theta < a.rope_theta {
            push(
                Some(&b.id),
                "rope_theta",
                format!(">= {} (phase {})", a.rope_theta, a.id),
                b.rope_theta.to_string(),
            );
        }
    }

    for c in &manifest.checkpoints {
        if manifest.phase(&c.after_phase).is_none() {
            push(
                None,
                "checkpoints",
                format!("known phase for {}", c.name),
                c.after_phase.clone(),
            );
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest violates {} invariant(s): {}", .0.len(), join(.0))]
    Invalid(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Canonical JSON: keys sorted, two-space indent, trailing newline.
pub fn emit_manifest(manifest: &RecipeManifest) -> String {
    // serde_json's Map is ordered by key without the preserve_order feature.
    let value = serde_json::to_value(manifest).expect("manifest serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    text
}

pub fn load_manifest(text: &str) -> Result<RecipeManifest, RecipeError> {
    let manifest: RecipeManifest = serde_json::from_str(text)?;
    let violations = validate(&manifest);
    if !violations.is_empty() {
        return Err(RecipeError::Invalid(violations));
    }
    Ok(manifest)
}

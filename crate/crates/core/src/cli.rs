//! Command-line front end.
//!
//! Every subcommand writes JSON (or CSV where the output is a table) to
//! stdout. Exit codes: 0 success, 1 domain error (JSON error object on
//! stderr), 2 usage error.

use crate::memplan::{self, ChunkConstraints, ChunkPlan, MemoryTerm};
use crate::niah::{
    self, ClientError, CompletionClient, EchoNeedleClient, EndpointAdapter, FixtureClient, GridSpec,
    HttpClient, NiahCase, RetryPolicy, TruncatingClient,
};
use crate::recipe::{self, RecipeManifest};
use crate::ringsim::{self, AttentionProblem, RingMesh};
use crate::rope::{self, PlanOptions, RopeConfig};
use crate::softnum;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use std::ffi::OsString;
use std::io::Write;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
pub const ENDPOINT_ENV: &str = "LONGCTX_ENDPOINT";

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (schema 1)");

#[derive(Debug, Parser)]
#[command(name = "longctx", version = VERSION, about = "Long-context training mechanics toolkit")]
pub struct Cli {
    /// Omit the `timestamp` field from JSON output.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count distinct 16-bit values among integer positions 0..limit.
    Census {
        #[arg(long)]
        limit: u64,
    },
    /// Classify RoPE theta candidates against the lower bound for a context length.
    RopePlan {
        #[arg(long)]
        context_len: u64,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<f64>,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = rope::DEFAULT_IN_BAND_RATIO)]
        in_band_ratio: f64,
    },
    /// Per-pair wavelengths and completeness for one RoPE configuration.
    RopeReport {
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long)]
        max_position: u64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run ring attention on a random problem and compare with the exact oracle.
    Ringsim(RingsimArgs),
    /// Lookup-table memory report for one chunk plan.
    Memplan {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        budget: Option<u64>,
        /// Additional named memory term, as name=bytes. Repeatable.
        #[arg(long = "term", value_parser = parse_term)]
        terms: Vec<MemoryTerm>,
    },
    /// Smallest chunk sizes whose lookup table fits a budget.
    MemplanSearch(SearchArgs),
    /// Generate one needle-in-a-haystack case.
    NiahGen {
        /// Target prompt length in tokens.
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 50.0)]
        depth: f64,
        /// Needle digits; drawn from the seed when omitted.
        #[arg(long)]
        payload: Option<String>,
        #[arg(long, default_value_t = 7)]
        digits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a model answer against the expected needle.
    NiahScore {
        #[arg(long)]
        expected: String,
        #[arg(long)]
        answer: String,
    },
    /// Run a length x depth recall grid against a completion client.
    NiahGrid(GridArgs),
    /// Training recipe manifests.
    Recipe {
        #[command(subcommand)]
        action: RecipeAction,
    },
}

#[derive(Debug, Args)]
struct RingsimArgs {
    #[arg(long)]
    seq_len: usize,
    #[arg(long)]
    devices: usize,
    #[arg(long)]
    q_chunk: usize,
    #[arg(long)]
    kv_chunk: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Document lengths, comma separated, summing to seq-len.
    #[arg(long, value_delimiter = ',')]
    segments: Vec<usize>,
    /// Disable the causal mask.
    #[arg(long)]
    no_causal: bool,
    /// Write the effective attention-weight matrix to this CSV file.
    #[arg(long)]
    weights_csv: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    devices: u64,
    #[arg(long)]
    seq_len: u64,
    #[arg(long)]
    q_chunk: u64,
    #[arg(long)]
    kv_chunk: u64,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    devices: u64,
    #[arg(long)]
    seq_len: u64,
    #[arg(long)]
    budget: u64,
    #[arg(long, default_value_t = 1)]
    min_q_chunk: u64,
    #[arg(long)]
    max_q_chunk: Option<u64>,
    #[arg(long, default_value_t = 1)]
    min_kv_chunk: u64,
    #[arg(long)]
    max_kv_chunk: Option<u64>,
    /// Consider every divisor, not just powers of two.
    #[arg(long)]
    any_divisor: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stub {
    Echo,
    Truncate,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,25,50,75,100")]
    depths: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Completion endpoint URL. Falls back to LONGCTX_ENDPOINT.
    #[arg(long, conflicts_with_all = ["stub", "fixture"])]
    endpoint: Option<String>,
    /// Built-in stub client instead of an endpoint.
    #[arg(long, value_enum, conflicts_with = "fixture")]
    stub: Option<Stub>,
    /// Recorded responses file.
    #[arg(long)]
    fixture: Option<std::path::PathBuf>,
    /// Request/response mapping for non-native completion APIs.
    #[arg(long)]
    adapter: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 32)]
    max_tokens: u32,
    #[arg(long, default_value_t = 7)]
    digits: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the per-trial JSON detail log here.
    #[arg(long)]
    detail_out: Option<std::path::PathBuf>,
}

#[derive(Debug, Subcommand)]
enum RecipeAction {
    /// Phase summary of a manifest.
    Show {
        #[arg(long)]
        manifest: Option<std::path::PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Check a manifest's invariants. Exits 1 when any are violated.
    Validate {
        #[arg(long)]
        manifest: Option<std::path::PathBuf>,
    },
    /// Print the canonical manifest.
    Emit {
        #[arg(long)]
        manifest: Option<std::path::PathBuf>,
    },
}

fn parse_term(s: &str) -> Result<MemoryTerm, String> {
    let (name, bytes) = s.split_once('=').ok_or("expected name=bytes")?;
    if name.is_empty() {
        return Err("term name is empty".into());
    }
    let bytes = bytes.parse().map_err(|e| format!("bad byte count: {e}"))?;
    Ok(MemoryTerm {
        name: name.to_string(),
        bytes,
    })
}

/// Failure of a well-formed command.
#[derive(Debug)]
pub struct DomainError {
    pub kind: &'static str,
    pub message: String,
}

impl DomainError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"kind": self.kind, "message": self.message}})
    }
}

macro_rules! domain_from {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for DomainError {
            fn from(e: $ty) -> Self {
                DomainError::new($kind, e)
            }
        })*
    };
}

domain_from! {
    rope::RopeError => "rope",
    ringsim::AttentionError => "ringsim",
    memplan::PlanError => "memplan",
    niah::NiahError => "niah",
    ClientError => "client",
    recipe::RecipeError => "recipe",
    std::io::Error => "io",
}

enum Output {
    Json(Value),
    /// JSON printed as-is, without a timestamp.
    Canonical(String),
    Csv(String),
}

fn to_json(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn read(path: &std::path::Path) -> Result<String, DomainError> {
    std::fs::read_to_string(path).map_err(|e| DomainError::new("io", format!("{}: {e}", path.display())))
}

fn load_recipe(path: Option<&std::path::Path>) -> Result<RecipeManifest, DomainError> {
    match path {
        None => Ok(recipe::reference_recipe()),
        Some(p) => {
            let text = read(p)?;
            let manifest = serde_json::from_str(&text).map_err(recipe::RecipeError::from)?;
            Ok(manifest)
        }
    }
}

fn ringsim(a: &RingsimArgs) -> Result<Output, DomainError> {
    let problem =
        AttentionProblem::random(a.seq_len, a.head_dim, &a.segments, a.seed)?.with_causal(!a.no_causal);
    let mesh = RingMesh::new(a.devices, a.q_chunk, a.kv_chunk);
    let ring = ringsim::ring_attention_with_weights(&problem, &mesh)?;
    let exact = ringsim::exact_attention(&problem);
    let weights = ring.weights.as_ref().expect("weights requested");
    let mut cross = 0.0f64;
    for i in 0..a.seq_len {
        for j in 0..a.seq_len {
            if problem.segment_ids()[i] != problem.segment_ids()[j] {
                cross = cross.max(weights.get(i, j).abs());
            }
        }
    }
    if let Some(path) = &a.weights_csv {
        std::fs::write(path, weights.to_csv())
            .map_err(|e| DomainError::new("io", format!("{}: {e}", path.display())))?;
    }
    let segments = if a.segments.is_empty() {
        vec![a.seq_len]
    } else {
        a.segments.clone()
    };
    Ok(Output::Json(json!({
        "seq_len": a.seq_len,
        "head_dim": a.head_dim,
        "devices": a.devices,
        "q_chunk": a.q_chunk,
        "kv_chunk": a.kv_chunk,
        "seed": a.seed,
        "causal": !a.no_causal,
        "segments": segments,
        "max_abs_error_vs_oracle": ring.output.max_abs_diff(&exact),
        "max_relative_error_vs_oracle": ring.output.relative_error(&exact),
        "max_cross_document_weight": cross,
        "transfers": ring.trace.transfer_count(),
        "schedule": ring.trace.schedule(),
        "blocks": ring.trace.block_totals(),
    })))
}

fn niah_grid(a: &GridArgs) -> Result<Output, DomainError> {
    let mut spec = GridSpec::new(a.lengths.clone(), a.depths.clone(), a.trials);
    spec.seed = a.seed;
    spec.concurrency = a.concurrency;
    spec.max_tokens = a.max_tokens;
    spec.payload_digits = a.digits;

    let endpoint = a.endpoint.clone().or_else(|| {
        if a.stub.is_some() || a.fixture.is_some() {
            None
        } else {
            std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())
        }
    });
    let client: Box<dyn CompletionClient> = match (a.stub, &a.fixture, endpoint) {
        (Some(Stub::Echo), _, _) => Box::new(EchoNeedleClient),
        (Some(Stub::Truncate), _, _) => Box::new(TruncatingClient),
        (None, Some(path), _) => Box::new(FixtureClient::from_json(&read(path)?)?),
        (None, None, Some(url)) => {
            let adapter = match &a.adapter {
                Some(path) => EndpointAdapter::from_json(&read(path)?)?,
                None => EndpointAdapter::default(),
            };
            Box::new(HttpClient::new(
                url,
                adapter,
                RetryPolicy::default(),
                Duration::from_secs(a.timeout_secs),
            ))
        }
        (None, None, None) => {
            return Err(DomainError::new(
                "niah",
                format!("no client configured: pass --endpoint, --stub or --fixture, or set {ENDPOINT_ENV}"),
            ))
        }
    };
    let report = niah::run_grid(&spec, client.as_ref())?;
    if let Some(path) = &a.detail_out {
        let text = serde_json::to_string_pretty(&report.details).expect("details serialize");
        std::fs::write(path, text + "\n")
            .map_err(|e| DomainError::new("io", format!("{}: {e}", path.display())))?;
    }
    Ok(match a.format {
        Format::Csv => Output::Csv(report.to_csv()),
        Format::Json => Output::Json(to_json(&report)),
    })
}

fn recipe_summary_csv(m: &RecipeManifest) -> String {
    let mut out = String::from("id,order,kind,token_budget,sequence_tokens,rope_theta\n");
    for p in &m.phases {
        let kind = to_json(p.kind);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.id,
            p.order,
            kind.as_str().unwrap_or_default(),
            p.token_budget,
            p.sequence_tokens(),
            p.rope_theta
        ));
    }
    out
}

fn recipe_summary(m: &RecipeManifest) -> Value {
    let phases: Vec<Value> = m
        .phases
        .iter()
        .map(|p| {
            json!({
                "id": p.id,
                "order": p.order,
                "kind": p.kind,
                "token_budget": p.token_budget,
                "sequence_tokens": p.sequence_tokens(),
                "rope_theta": p.rope_theta,
                "purpose": p.purpose,
            })
        })
        .collect();
    json!({
        "schema": m.schema,
        "base_model": m.base_model,
        "phases": phases,
        "pretraining_tokens": m.pretraining_tokens(),
        "total_tokens": m.total_tokens(),
        "checkpoints": m.checkpoints,
    })
}

fn dispatch(cli: &Cli) -> Result<Output, DomainError> {
    Ok(match &cli.command {
        Command::Census { limit } => Output::Json(to_json(softnum::census_report(*limit))),
        Command::RopePlan {
            context_len,
            candidates,
            head_dim,
            in_band_ratio,
        } => {
            let opts = PlanOptions {
                head_dim: *head_dim,
                in_band_ratio: *in_band_ratio,
            };
            Output::Json(to_json(rope::plan_theta(*context_len, candidates, &opts)?))
        }
        Command::RopeReport {
            theta,
            head_dim,
            max_position,
            format,
        } => {
            let report = rope::rotation_report(&RopeConfig::new(*theta, *head_dim, *max_position)?);
            match format {
                Format::Csv => Output::Csv(report.to_csv()),
                Format::Json => Output::Json(to_json(&report)),
            }
        }
        Command::Ringsim(a) => ringsim(a)?,
        Command::Memplan { plan, budget, terms } => {
            let plan = ChunkPlan::new(plan.devices, plan.seq_len, plan.q_chunk, plan.kv_chunk)?;
            Output::Json(to_json(memplan::memory_report(&plan, terms, *budget)?))
        }
        Command::MemplanSearch(a) => {
            let constraints = ChunkConstraints {
                min_q_chunk: a.min_q_chunk,
                max_q_chunk: a.max_q_chunk,
                min_kv_chunk: a.min_kv_chunk,
                max_kv_chunk: a.max_kv_chunk,
                power_of_two: !a.any_divisor,
            };
            let plan = memplan::search_chunk_plan(a.devices, a.seq_len, a.budget, &constraints)?;
            let report = plan
                .map(|p| memplan::memory_report(&p, &[], Some(a.budget)))
                .transpose()?;
            Output::Json(json!({ "plan": report }))
        }
        Command::NiahGen {
            length,
            depth,
            payload,
            digits,
            seed,
        } => {
            let payload = match payload {
                Some(p) => p.clone(),
                None => niah::random_payload(&mut ChaCha8Rng::seed_from_u64(*seed), *digits),
            };
            Output::Json(to_json(niah::generate_case(&NiahCase::new(
                *length, *depth, payload, *seed,
            ))?))
        }
        Command::NiahScore { expected, answer } => Output::Json(to_json(niah::score(expected, answer)?)),
        Command::NiahGrid(a) => niah_grid(a)?,
        Command::Recipe { action } => match action {
            RecipeAction::Show { manifest, format } => {
                let m = load_recipe(manifest.as_deref())?;
                match format {
                    Format::Csv => Output::Csv(recipe_summary_csv(&m)),
                    Format::Json => Output::Json(recipe_summary(&m)),
                }
            }
            RecipeAction::Validate { manifest } => {
                let m = load_recipe(manifest.as_deref())?;
                let violations = recipe::validate(&m);
                if !violations.is_empty() {
                    return Err(recipe::RecipeError::Invalid(violations).into());
                }
                Output::Json(json!({"valid": true, "violations": []}))
            }
            RecipeAction::Emit { manifest } => {
                Output::Canonical(recipe::emit_manifest(&load_recipe(manifest.as_deref())?))
            }
        },
    })
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn render(output: Output, with_timestamp: bool) -> String {
    match output {
        Output::Json(mut value) => {
            if with_timestamp {
                if let Value::Object(map) = &mut value {
                    map.insert("timestamp".into(), json!(timestamp()));
                }
            }
            let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
            text.push('\n');
            text
        }
        Output::Canonical(text) | Output::Csv(text) => text,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(output) => {
            let text = render(output, !cli.no_timestamp);
            match out.write_all(text.as_bytes()) {
                Ok(()) => 0,
                Err(_) => 1,
            }
        }
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json());
            1
        }
    }
}

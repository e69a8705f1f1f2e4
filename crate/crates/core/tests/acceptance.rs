//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use longctx::memplan::{lookup_table_bytes, ChunkPlan};
use longctx::niah::{self, generate_case, run_grid, EchoNeedleClient, GridSpec, NiahCase, Verdict};
use longctx::recipe::{emit_manifest, reference_recipe, validate, PhaseKind};
use longctx::ringsim::{self, AttentionProblem, RingMesh};
use longctx::rope::{self, relative_score, rotate, RopeConfig};
use longctx::softnum::{distinct_integer_census, round_to_reduced16, PrecisionMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn theta_bounds() -> Outcome {
    let a = rope::theta_lower_bound(262_144);
    let b = rope::theta_lower_bound(524_288);
    ensure((2.75e7..=2.85e7).contains(&a), || format!("bound(262144) = {a}"))?;
    ensure((8.5e7..=8.7e7).contains(&b), || format!("bound(524288) = {b}"))?;
    Ok(format!("bound(262144) = {a:.4e}, bound(524288) = {b:.4e}"))
}

fn lookup_table_memory() -> Outcome {
    let base = lookup_table_bytes(&ChunkPlan::new(8, 524_288, 1024, 2048).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let doubled = lookup_table_bytes(&ChunkPlan::new(8, 524_288, 2048, 4096).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(base == 34_359_738_368, || format!("got {base} bytes"))?;
    ensure(doubled * 4 == base, || {
        format!("doubled chunks give {doubled} bytes")
    })?;
    Ok(format!("{base} bytes, {doubled} after doubling both chunks"))
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

fn random_segments(rng: &mut ChaCha8Rng, seq_len: usize) -> Vec<usize> {
    let mut lengths = Vec::new();
    let mut left = seq_len;
    while left > 0 {
        let len = match rng.random_range(0..4) {
            0 => 1,
            1 => rng.random_range(1..=left.min(8)),
            _ => rng.random_range(1..=left),
        };
        lengths.push(len);
        left -= len;
    }
    lengths
}

fn ring_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let lengths: Vec<usize> = (1..=256).filter(|s| divisors(*s).len() >= 3).collect();
    let mut worst = 0.0f64;
    let mut max_devices = 0;
    for case in 0..200 {
        let seq_len = lengths[rng.random_range(0..lengths.len())];
        let head_dim = rng.random_range(1..=32);
        let devices_opts = divisors(seq_len);
        let devices = devices_opts[rng.random_range(0..devices_opts.len())];
        let chunks = divisors(seq_len / devices);
        let q_chunk = chunks[rng.random_range(0..chunks.len())];
        let kv_chunk = chunks[rng.random_range(0..chunks.len())];
        let segments = random_segments(&mut rng, seq_len);
        let causal = rng.random_range(0..4) != 0;
        let problem = AttentionProblem::random(seq_len, head_dim, &segments, rng.random())
            .map_err(|e| e.to_string())?
            .with_causal(causal);
        let ring = ringsim::ring_attention_with_weights(&problem, &RingMesh::new(devices, q_chunk, kv_chunk))
            .map_err(|e| e.to_string())?;
        let exact = ringsim::exact_attention(&problem);
        let err = ring.output.relative_error(&exact);
        ensure(err <= 1e-6, || {
            format!("case {case}: S={seq_len} d={head_dim} P={devices} cq={q_chunk} ckv={kv_chunk} rel err {err:e}")
        })?;
        let w = ring.weights.expect("weights recorded");
        let ids = problem.segment_ids();
        for i in 0..seq_len {
            for j in 0..seq_len {
                if ids[i] != ids[j] && w.get(i, j) != 0.0 {
                    return Err(format!(
                        "case {case}: cross-document weight {} at ({i},{j})",
                        w.get(i, j)
                    ));
                }
            }
        }
        worst = worst.max(err);
        max_devices = max_devices.max(devices);
    }
    Ok(format!("200 problems, worst relative error {worst:.2e}, up to {max_devices} devices, cross-document weights 0"))
}

/// Census of an f32-route enumeration, independent of the closed form used
/// by `distinct_integer_census`.
fn enumerate_reduced16(limit: u64) -> usize {
    (0..limit)
        .map(|p| round_to_reduced16(p as f32).to_bits())
        .collect::<HashSet<_>>()
        .len()
}

fn precision_collapse() -> Outcome {
    let cfg = RopeConfig::new(10_000.0, 64, 1 << 25)
        .map_err(|e| e.to_string())?
        .with_precision(PrecisionMode::Reduced16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at_256 = rotate(&v, 256, &cfg).map_err(|e| e.to_string())?;
    let at_257 = rotate(&v, 257, &cfg).map_err(|e| e.to_string())?;
    ensure(at_256 == at_257, || {
        "positions 256 and 257 rotate differently".into()
    })?;
    let at_258 = rotate(&v, 258, &cfg).map_err(|e| e.to_string())?;
    ensure(at_258 != at_256, || "position 258 should be representable".into())?;
    let class: Vec<u64> = (299_008..=300_000).collect();
    let first = rotate(&v, class[0], &cfg).map_err(|e| e.to_string())?;
    for &p in &class {
        ensure(rotate(&v, p, &cfg).map_err(|e| e.to_string())? == first, || {
            format!("position {p} leaves the collision class of 299008")
        })?;
    }

    let census = distinct_integer_census(524_288);
    let enumerated = enumerate_reduced16(524_288);
    ensure(census == 1665, || {
        format!("census(524288) = {census}, frozen oracle 1665")
    })?;
    ensure(enumerated as u64 == census, || {
        format!("enumeration gives {enumerated}, census {census}")
    })?;

    let full = RopeConfig::new(10_000.0, 64, 1 << 25).map_err(|e| e.to_string())?;
    let mut prev = -1.0;
    for p in 0..(1u64 << 24) {
        let e = full.effective_position(p);
        if e != p as f64 || e <= prev {
            return Err(format!("Full32 position {p} rounds to {e}"));
        }
        prev = e;
    }
    Ok(format!(
        "256 and 257 collide, 299008..=300000 collapse to one rotation, census(524288) = {census}, 2^24 positions exact in Full32"
    ))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let head_dim = 2 * rng.random_range(1..=64);
        let theta = [1e4, 5e5, 2.5e7, 7.5e7][rng.random_range(0..4)];
        let cfg = RopeConfig::new(theta, head_dim, 1 << 24).map_err(|e| e.to_string())?;
        let q: Vec<f64> = (0..head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = rng.random_range(0..1u64 << 22);
        let n = rng.random_range(0..1u64 << 22);
        let s = rng.random_range(0..(1u64 << 24) - m.max(n));
        let a = relative_score(&q, &k, m, n, &cfg).map_err(|e| e.to_string())?;
        let b = relative_score(&q, &k, m + s, n + s, &cfg).map_err(|e| e.to_string())?;
        let rel = (a - b).abs() / (norm(&q) * norm(&k));
        ensure(rel <= 1e-5, || {
            format!("case {case}: m={m} n={n} s={s} rel {rel:e}")
        })?;
        worst = worst.max(rel);
    }

    let reduced = RopeConfig::new(10_000.0, 128, 1 << 20)
        .map_err(|e| e.to_string())?
        .with_precision(PrecisionMode::Reduced16);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (m, n, s) = (100u64, 0u64, 300_000u64);
    let near = relative_score(&q, &q, m, n, &reduced).map_err(|e| e.to_string())?;
    let far = relative_score(&q, &q, m + s, n + s, &reduced).map_err(|e| e.to_string())?;
    let violation = (near - far).abs() / (norm(&q) * norm(&q));
    ensure(violation > 1e-3, || {
        format!("Reduced16 violation only {violation:e}")
    })?;
    Ok(format!(
        "1000 Full32 cases, worst {worst:.2e}; Reduced16 (m,n)=(100,0) shifted by 300000 deviates by {violation:.3}"
    ))
}

fn recipe_manifest() -> Outcome {
    let r = reference_recipe();
    let v = validate(&r);
    ensure(v.is_empty(), || format!("{} violations: {v:?}", v.len()))?;
    let pretraining: u64 = r
        .phases
        .iter()
        .filter(|p| p.kind == PhaseKind::ContinualPretraining)
        .map(|p| p.token_budget)
        .sum();
    ensure(pretraining <= 2_000_000_000, || {
        format!("{pretraining} pretraining tokens")
    })?;
    let golden = include_str!("golden/recipe_manifest.json");
    ensure(emit_manifest(&r) == golden, || {
        "emitted manifest differs from golden file".into()
    })?;
    ensure(emit_manifest(&r) == emit_manifest(&reference_recipe()), || {
        "emission not stable".into()
    })?;
    Ok(format!(
        "0 violations, {pretraining} pretraining tokens, golden manifest byte-identical"
    ))
}

fn niah_harness() -> Outcome {
    let case = NiahCase::new(8_000, 50.0, "7418118", 2024);
    let a = serde_json::to_vec(&generate_case(&case).map_err(|e| e.to_string())?).unwrap();
    let b = serde_json::to_vec(&generate_case(&case).map_err(|e| e.to_string())?).unwrap();
    ensure(a == b, || "generation is not deterministic".into())?;

    let r = niah::score("7418118", "The special magic number is 741811.").map_err(|e| e.to_string())?;
    ensure(r.verdict == Verdict::Truncated, || {
        format!("verdict {:?}", r.verdict)
    })?;

    let spec = GridSpec::new(vec![500, 2_000, 8_000], vec![0.0, 25.0, 50.0, 75.0, 100.0], 3);
    let report = run_grid(&spec, &EchoNeedleClient).map_err(|e| e.to_string())?;
    let cells: Vec<_> = report.cells.iter().flatten().collect();
    ensure(cells.iter().all(|c| c.exact_rate == 1.0), || {
        "echo grid below 100% exact".into()
    })?;
    Ok(format!(
        "byte-identical generation, 7418118 vs 741811 is truncated, echo grid {} cells 100% exact",
        cells.len()
    ))
}

fn dosp_rule() -> Outcome {
    let mut checked = 0;
    for kv_heads in 1..=64 {
        for devices in 1..=512 {
            let l = ringsim::dosp_limits(kv_heads, devices);
            ensure(
                l.ring_dosp == devices && l.all_to_all_dosp == devices.min(kv_heads),
                || format!("kv_heads={kv_heads} devices={devices}: {l:?}"),
            )?;
            checked += 1;
        }
    }
    let eight_kv_heads = ringsim::dosp_limits(8, 256);
    ensure(
        eight_kv_heads.ring_dosp == 256 && eight_kv_heads.all_to_all_dosp == 8,
        || format!("{eight_kv_heads:?}"),
    )?;
    Ok(format!("{checked} (kv_heads, devices) pairs"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("theta lower bound", theta_bounds),
        ("lookup-table memory", lookup_table_memory),
        ("ring attention oracle equivalence", ring_oracle_equivalence),
        ("16-bit position collapse", precision_collapse),
        ("RoPE shift invariance", shift_invariance),
        ("recipe manifest", recipe_manifest),
        ("NIAH harness", niah_harness),
        ("sequence-parallel degree rule", dosp_rule),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name} [{secs:.2}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name} [{secs:.2}s]: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

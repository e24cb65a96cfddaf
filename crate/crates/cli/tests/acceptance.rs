//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line, and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use cetsim_core::calibration::{compute_cost, sensing_accuracy, total_latency, total_latency_for};
use cetsim_core::controller::{feasible_variants, select_mode, SelectionRequest};
use cetsim_core::protocols::{payloads_for, run_round, DefenseConfig, RoundContext, Session};
use cetsim_core::semantics::{minmax_normalize, normalize_iq, unit_sphere_pad, AttackKind, AttackSpec, CodecSet};
use cetsim_core::{
    rng_stream, CalibrationTable, LinkClass, Mode, ModeVariant, NodeId, NodeKind, Payloads, RngStream,
    Scenario, Topology,
};
use num_complex::Complex64;
use rand::Rng;

// Tolerances and limits, pinned.
const ANCHOR_TOL: f64 = 0.001;
const GFM_UPLINK_MIN_S: f64 = 0.300;
const GFM_TOTAL_MIN_S: f64 = 0.340;
const PIM_TOTAL_RANGE_S: (f64, f64) = (0.005, 0.010);
const SPEEDUP_RANGE: (f64, f64) = (6.5, 7.5);
const NIGHT_CRM_GAP: f64 = 0.05;
const ORACLE_TOL: f64 = 1e-9;
const TIGHT_BUDGET_S: f64 = 0.020;
const SNR_GRID: [f64; 6] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0];
const FAST_LIMIT: Duration = Duration::from_secs(1);
const DETERMINISM_LIMIT: Duration = Duration::from_secs(30);
const ATTACK_LIMIT: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn payloads() -> Payloads {
    let p = cetsim_core::netmodel::TEXT_FRAME_BYTES;
    payloads_for(&CodecSet::defaults(), p, p)
}

fn c1_table2() -> Outcome {
    let start = Instant::now();
    let table = CalibrationTable::builtin();
    let golden = [
        (ModeVariant::PimPi, 4.15e+00, 2.40e+01, 7.27e+00),
        (ModeVariant::PimPc, 9.45e+00, 1.05e+02, 3.22e+01),
        (ModeVariant::PimPm, 7.30e+00, 1.89e+01, 5.51e+00),
        (ModeVariant::CrmPic, 9.45e+00, 1.07e+02, 3.11e+01),
        (ModeVariant::CrmPim, 7.31e+00, 2.46e+01, 1.33e+01),
        (ModeVariant::CrmPcm, 8.46e+00, 1.06e+02, 3.42e+01),
        (ModeVariant::Gfm, 1.26e+01, 1.07e+02, 3.82e+01),
    ];
    let mut checked = 0;
    for (v, f, m, l) in golden {
        let c = compute_cost(v, &table).map_err(|e| e.to_string())?;
        for (name, got, want) in [("flops", c.flops_g, f), ("memory", c.memory_mb, m), ("latency", c.inference_ms, l)] {
            ensure(got == want, || format!("{v} {name}: {got} != {want}"))?;
            checked += 1;
        }
    }
    within(start.elapsed(), FAST_LIMIT)?;
    Ok(format!("{checked} values exact"))
}

fn c2_latency() -> Outcome {
    let start = Instant::now();
    let topo = Topology::default_cet();
    let table = CalibrationTable::builtin();
    let p = payloads();
    let lat = |v| total_latency(v, &topo, &table, &p).map_err(|e| e.to_string());
    let gfm = lat(ModeVariant::Gfm)?;
    ensure(gfm.transmission_s > GFM_UPLINK_MIN_S, || format!("GFM transmission {} s", gfm.transmission_s))?;
    ensure(gfm.total_s > GFM_TOTAL_MIN_S, || format!("GFM total {} s", gfm.total_s))?;
    let mut notes = vec![format!("GFM {:.1} ms", gfm.total_s * 1e3)];
    for v in [ModeVariant::PimPm, ModeVariant::PimPi] {
        let l = lat(v)?;
        ensure((PIM_TOTAL_RANGE_S.0..=PIM_TOTAL_RANGE_S.1).contains(&l.total_s), || {
            format!("{v} total {} s", l.total_s)
        })?;
        notes.push(format!("{v} {:.2} ms", l.total_s * 1e3));
    }
    within(start.elapsed(), FAST_LIMIT)?;
    Ok(notes.join(", "))
}

fn c3_speedup() -> Outcome {
    let table = CalibrationTable::builtin();
    let g = compute_cost(ModeVariant::Gfm, &table).map_err(|e| e.to_string())?;
    let p = compute_cost(ModeVariant::PimPm, &table).map_err(|e| e.to_string())?;
    let ratio = g.inference_ms / p.inference_ms;
    ensure((SPEEDUP_RANGE.0..=SPEEDUP_RANGE.1).contains(&ratio), || format!("ratio {ratio}"))?;
    Ok(format!("GFM/PIM(P+M) inference = {ratio:.3}"))
}

fn c4_anchor() -> Outcome {
    let table = CalibrationTable::builtin();
    let a = sensing_accuracy(ModeVariant::Gfm, Scenario::Daytime, 25.0, &table).map_err(|e| e.to_string())?;
    ensure((a - 0.769).abs() <= ANCHOR_TOL, || format!("accuracy {a}"))?;
    Ok(format!("GFM Daytime 25 dB = {a:.6}"))
}

fn c5_ordering() -> Outcome {
    let start = Instant::now();
    let table = CalibrationTable::builtin();
    let acc = |v, s, snr| sensing_accuracy(v, s, snr, &table).expect("builtin covers all variants");
    let mut n = 0;
    for s in Scenario::ALL {
        for v in ModeVariant::ALL {
            for w in SNR_GRID.windows(2) {
                ensure(acc(v, s, w[1]) > acc(v, s, w[0]), || format!("{v} {s} not increasing at {} dB", w[1]))?;
                n += 1;
            }
        }
        for snr in SNR_GRID {
            for crm in ModeVariant::of_mode(Mode::Crm) {
                ensure(acc(ModeVariant::Gfm, s, snr) >= acc(crm, s, snr), || format!("GFM < {crm} at {s} {snr} dB"))?;
                n += 1;
                for pim in ModeVariant::of_mode(Mode::Pim).filter(|p| p.modalities().is_subset(crm.modalities())) {
                    ensure(acc(crm, s, snr) >= acc(pim, s, snr), || format!("{crm} < {pim} at {s} {snr} dB"))?;
                    n += 1;
                }
            }
        }
    }
    for snr in SNR_GRID {
        let (day, night) = (acc(ModeVariant::PimPi, Scenario::Daytime, snr), acc(ModeVariant::PimPi, Scenario::Nighttime, snr));
        ensure(night < day, || format!("PIM(P+I) night {night} >= day {day} at {snr} dB"))?;
        let gap = acc(ModeVariant::Gfm, Scenario::Nighttime, snr) - acc(ModeVariant::CrmPim, Scenario::Nighttime, snr);
        ensure(gap.abs() <= NIGHT_CRM_GAP, || format!("night CRM(P+I+M) gap {gap} at {snr} dB"))?;
        n += 2;
    }
    within(start.elapsed(), FAST_LIMIT)?;
    Ok(format!("{n} assertions"))
}

fn c6_determinism() -> Outcome {
    let start = Instant::now();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_cetsim"))
            .args(["simulate", "--config", config, "--out"])
            .arg(&out)
            .args(["--seed", "42"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        outputs.push(std::fs::read(out.join("results.csv")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "results.csv differs between runs".into())?;
    let rows = outputs[0].iter().filter(|b| **b == b'\n').count() - 1;
    ensure(rows >= 1000, || format!("only {rows} rounds"))?;
    within(start.elapsed(), DETERMINISM_LIMIT)?;
    Ok(format!("{rows} rows byte-identical"))
}

fn random_topology(rng: &mut RngStream) -> Topology {
    let mut topo = Topology::default_cet();
    let links: Vec<_> = topo.links().iter().map(|l| (l.endpoints, l.class)).collect();
    for ((a, b), class) in links {
        if rng.random_bool(0.3) {
            topo.set_link_up(a, b, class, false);
        }
    }
    topo
}

fn random_request(rng: &mut RngStream, topo: &Topology, budget: f64) -> SelectionRequest {
    let terminal = NodeId(rng.random_range(2..5));
    let scenario = if rng.random_bool(0.5) { Scenario::Daytime } else { Scenario::Nighttime };
    let floor = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.9) };
    SelectionRequest::for_terminal(topo, terminal, budget, floor, scenario, rng.random_range(-5.0..30.0))
}

fn log_budget(rng: &mut RngStream) -> f64 {
    10f64.powf(rng.random_range(-3.0..0.0))
}

fn c7_controller() -> Outcome {
    let table = CalibrationTable::builtin();
    let p = payloads();
    let mut rng = rng_stream("acceptance/controller", 7);
    let mut selected = 0;
    for i in 0..1000 {
        let topo = random_topology(&mut rng);
        let budget = log_budget(&mut rng);
        let req = random_request(&mut rng, &topo, budget);
        let t = req.terminal.expect("terminal set");
        let Ok(s) = select_mode(&req, &topo, &table, &p) else { continue };
        selected += 1;
        ensure(feasible_variants(&req).contains(&s.variant), || format!("request {i}: {} not feasible", s.variant))?;
        ensure(s.total_latency_s <= budget, || format!("request {i}: over budget"))?;
        if !req.link_state.cloud_reachable {
            ensure(s.variant != ModeVariant::Gfm, || format!("request {i}: GFM with cloud down"))?;
            if !req.link_state.edge_reachable {
                ensure(s.variant.mode() == Mode::Pim, || format!("request {i}: {} with no infrastructure", s.variant))?;
            }
        }
        let planned = total_latency_for(s.variant, &topo, &table, &p, Some(t)).map_err(|e| e.to_string())?;
        ensure(planned.total_s == s.total_latency_s, || format!("request {i}: latency mismatch"))?;
    }
    let default_topo = Topology::default_cet();
    for i in 0..200 {
        let req = random_request(&mut rng, &default_topo, TIGHT_BUDGET_S);
        let s = select_mode(&req, &default_topo, &table, &p).map_err(|e| format!("tight budget {i}: {e}"))?;
        ensure(s.variant.mode() == Mode::Pim, || format!("tight budget {i}: chose {}", s.variant))?;
    }
    for i in 0..500 {
        let topo = if i % 2 == 0 { Topology::default_cet() } else { random_topology(&mut rng) };
        let (a, b) = (log_budget(&mut rng), log_budget(&mut rng));
        let small = random_request(&mut rng, &topo, a.min(b));
        let mut large = small.clone();
        large.latency_budget_s = a.max(b);
        if let Ok(s1) = select_mode(&small, &topo, &table, &p) {
            let s2 = select_mode(&large, &topo, &table, &p).map_err(|e| format!("pair {i}: larger budget failed: {e}"))?;
            ensure(s2.predicted_accuracy >= s1.predicted_accuracy, || {
                format!("pair {i}: {} -> {}", s1.variant, s2.variant)
            })?;
        }
    }
    Ok(format!("1000 requests ({selected} selected), 200 tight budgets, 500 nested pairs"))
}

struct AttackRun<'a> {
    variant: ModeVariant,
    kind: AttackKind,
    defenses: DefenseConfig,
    label: &'a str,
}

fn mean_accuracy(run: &AttackRun<'_>, rounds: u32) -> Result<f64, String> {
    let topo = Topology::default_cet();
    let table = CalibrationTable::builtin();
    let codecs = CodecSet::defaults();
    let attacks = [AttackSpec::new(run.kind, 0.5, 0.5)];
    let mut ctx = RoundContext::new(&topo, &table, &codecs, Scenario::Daytime, 25.0);
    ctx.attacks = &attacks;
    ctx.defenses = run.defenses.clone();
    let mut session = Session::new(&ctx.defenses);
    let mut sum = 0.0;
    for r in 0..rounds {
        // Same streams for both arms, so the attack draws line up.
        let stream = rng_stream(&format!("acceptance/{:?}/{r}", run.kind), 8);
        let res = run_round(run.variant, &ctx, &mut session, &stream).map_err(|e| format!("{}: {e}", run.label))?;
        sum += res.accuracy;
    }
    Ok(sum / rounds as f64)
}

fn c8_attacks() -> Outcome {
    let start = Instant::now();
    let on = DefenseConfig::default();
    let arms = [
        (
            ModeVariant::Gfm,
            AttackKind::SemanticTamper,
            DefenseConfig { watermark_detection_prob: 0.9, ..on.clone() },
            DefenseConfig { watermark_detection_prob: 0.0, ..on.clone() },
        ),
        (
            ModeVariant::CrmPim,
            AttackKind::MaliciousRelay,
            DefenseConfig { directive_verify_prob: 1.0, ..on.clone() },
            DefenseConfig { directive_verify_prob: 0.0, ..on.clone() },
        ),
        (
            ModeVariant::PimPm,
            AttackKind::CrossModalMislead,
            DefenseConfig { consistency_detection_prob: 0.8, reputation: true, ..on.clone() },
            DefenseConfig { consistency_detection_prob: 0.0, reputation: false, ..on.clone() },
        ),
    ];
    let mut notes = Vec::new();
    for (variant, kind, defended, open) in arms {
        let hi = mean_accuracy(&AttackRun { variant, kind, defenses: defended, label: "defended" }, 2000)?;
        let lo = mean_accuracy(&AttackRun { variant, kind, defenses: open, label: "undefended" }, 2000)?;
        ensure(hi - lo > 0.0, || format!("{kind:?}: defended {hi} <= undefended {lo}"))?;
        notes.push(format!("{kind:?} {hi:.4} > {lo:.4}"));
    }
    within(start.elapsed(), ATTACK_LIMIT)?;
    Ok(notes.join(", "))
}

fn oracle_minmax(xs: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let filled: Vec<f64> = xs.iter().map(|x| if x.is_finite() { *x } else { mean }).collect();
    let mut sorted = filled.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    filled
        .iter()
        .map(|x| if hi == lo { 0.0 } else { (x - lo) / (hi - lo) })
        .collect()
}

fn oracle_sphere(pts: &[[f64; 3]], target: usize) -> Vec<[f64; 3]> {
    let n = pts.len() as f64;
    let c: Vec<f64> = (0..3).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let centered: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let mut norms: Vec<f64> = centered.iter().map(|p| p[0].hypot(p[1]).hypot(p[2])).collect();
    norms.sort_by(f64::total_cmp);
    let r = *norms.last().expect("non-empty");
    let mut out: Vec<[f64; 3]> = centered
        .iter()
        .map(|p| if r == 0.0 { [0.0; 3] } else { [p[0] / r, p[1] / r, p[2] / r] })
        .collect();
    while out.len() < target {
        out.push([0.0; 3]);
    }
    out
}

fn oracle_iq(iq: &[Complex64]) -> Vec<Complex64> {
    let peak = iq.iter().map(|z| z.re.hypot(z.im)).fold(0.0, f64::max);
    iq.iter().map(|z| Complex64::new(z.re / peak, z.im / peak)).collect()
}

fn c9_oracles() -> Outcome {
    let mut rng = rng_stream("acceptance/oracles", 9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(1..64);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let xs: Vec<f64> = (0..len)
            .map(|i| if i > 0 && rng.random_bool(0.1) { f64::NAN } else { rng.random_range(-1.0..1.0) * scale })
            .collect();
        let got = minmax_normalize(&xs).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(oracle_minmax(&xs)) {
            worst = worst.max((g - w).abs());
        }

        let pts: Vec<[f64; 3]> = (0..len)
            .map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..1.0) * scale))
            .collect();
        let target = len + rng.random_range(0..16);
        let got = unit_sphere_pad(&pts, target).map_err(|e| e.to_string())?;
        let want = oracle_sphere(&pts, target);
        ensure(got.len() == want.len(), || "pad length".into())?;
        for (g, w) in got.iter().zip(&want) {
            for k in 0..3 {
                worst = worst.max((g[k] - w[k]).abs());
            }
        }

        let iq: Vec<Complex64> = (0..len)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0) * scale, rng.random_range(-1.0..1.0) * scale))
            .collect();
        if iq.iter().all(|z| z.norm() == 0.0) {
            continue;
        }
        let got = normalize_iq(&iq).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(oracle_iq(&iq)) {
            worst = worst.max((g - w).norm());
        }
    }
    ensure(worst < ORACLE_TOL, || format!("max deviation {worst:e}"))?;
    Ok(format!("300 inputs, max deviation {worst:.1e}"))
}

fn c10_traces() -> Outcome {
    let topo = Topology::default_cet();
    let table = CalibrationTable::builtin();
    let codecs = CodecSet::defaults();
    let attacks = [
        AttackSpec::new(AttackKind::SemanticTamper, 0.3, 0.5),
        AttackSpec::new(AttackKind::MaliciousRelay, 0.3, 0.5),
        AttackSpec::new(AttackKind::CrossModalMislead, 0.3, 0.5),
    ];
    let mut total = 0;
    for mode in [Mode::Gfm, Mode::Crm, Mode::Pim] {
        let variants: Vec<ModeVariant> = ModeVariant::of_mode(mode).collect();
        for r in 0..100u32 {
            let v = variants[r as usize % variants.len()];
            let scenario = Scenario::ALL[r as usize % 2];
            let mut ctx = RoundContext::new(&topo, &table, &codecs, scenario, (r % 6) as f64 * 5.0);
            if r % 2 == 1 {
                ctx.attacks = &attacks;
            }
            let mut session = Session::new(&ctx.defenses);
            let res = run_round(v, &ctx, &mut session, &rng_stream(&format!("acceptance/trace/{v}/{r}"), 10))
                .map_err(|e| e.to_string())?;
            let kinds: BTreeSet<NodeKind> = res.trace.events().iter().filter_map(|e| topo.kind(e.node)).collect();
            let links: BTreeSet<String> = res
                .trace
                .events()
                .iter()
                .filter_map(|e| e.detail_field("link").map(str::to_string))
                .collect();
            let d2d = links.contains(&LinkClass::PeerD2D.to_string());
            let ok = match mode {
                Mode::Gfm => kinds.contains(&NodeKind::Cloud) && !d2d,
                Mode::Crm => kinds.contains(&NodeKind::Edge) && !kinds.contains(&NodeKind::Cloud),
                Mode::Pim => !kinds.contains(&NodeKind::Edge) && !kinds.contains(&NodeKind::Cloud),
            };
            ensure(ok, || format!("{v} round {r}: nodes {kinds:?}, links {links:?}"))?;
            total += 1;
        }
    }
    Ok(format!("{total} traces conform"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 compute cost golden values", c1_table2),
        ("2 latency budgets", c2_latency),
        ("3 inference speedup", c3_speedup),
        ("4 accuracy anchor", c4_anchor),
        ("5 accuracy ordering properties", c5_ordering),
        ("6 simulate determinism", c6_determinism),
        ("7 controller properties", c7_controller),
        ("8 attack/defense direction", c8_attacks),
        ("9 preprocessing oracles", c9_oracles),
        ("10 trace structure", c10_traces),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(note) => println!("PASS criterion {name} ({secs:.2}s): {note}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits nonzero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use aspire_core::engine::{run, ConsumePolicy, EventBody, Mode, RunConfig, RunOutput, SetConfig};
use aspire_core::experiment::{execute, parse_config};
use aspire_core::metrics::attack_success_rate;
use aspire_core::models::LabeledDataset;
use aspire_core::simulator::{backdoor_test_set, inject_faults, time_ratio, Backdoor, DelayModel, FaultSpec};
use aspire_core::uncertainty::{solve_cutting_plane_lp, CdNormSet};
use common::fd::random_problem;
use common::lp::{oracle, random_instance};
use common::runs::{convex_task, heterogeneous_task, tuned_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_ok(cfg: &RunConfig, data: &[LabeledDataset], delay: &DelayModel) -> Result<RunOutput, String> {
    run(cfg, data, delay).map_err(|e| e.to_string())
}

fn final_worst(out: &RunOutput) -> f64 {
    out.metrics.last().unwrap().worst_loss
}

fn lp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let (f, q, pt, gamma) = random_instance(&mut rng, 5);
        let set = CdNormSet::new(q.clone(), pt.clone(), gamma, 1.0 / q.len() as f64).map_err(|e| e.to_string())?;
        let p = solve_cutting_plane_lp(&f, &set).map_err(|e| e.to_string())?;
        ensure(set.contains(&p), || format!("case {case}: infeasible solution"))?;
        let got: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
        let err = (got - oracle(&f, &q, &pt, gamma)).abs();
        worst = worst.max(err);
        ensure(err <= 1e-8, || format!("case {case}: objective off by {err:e}"))?;
    }
    Ok(format!("500 instances, max objective error {worst:.1e}"))
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut block, mut central) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let problem = random_problem(&mut rng);
        block = block.max(problem.max_block_error());
        central = central.max(problem.max_central_error());
    }
    ensure(block <= 1e-4 && central <= 1e-4, || format!("relative errors {block:e} / {central:e}"))?;
    Ok(format!("50 states, max relative error {block:.1e} (distributed) {central:.1e} (centralized)"))
}

fn convergence() -> Outcome {
    let cfg = RunConfig { t_max: 5000, ..tuned_config(0) };
    let out = run_ok(&cfg, &convex_task(0), &DelayModel::default())?;
    let t_eps = out.t_eps.ok_or_else(|| format!("gap {:.3e} after 5000 iterations", out.metrics.last().unwrap().gap))?;
    let mut best = f64::INFINITY;
    for row in out.metrics.iter().take_while(|r| r.t <= t_eps) {
        ensure(row.gap < best, || format!("running minimum stalls at t = {} (gap {:.3e})", row.t, row.gap))?;
        best = row.gap;
    }
    Ok(format!("gap {best:.2e} at t = {t_eps}, running minimum strictly decreasing over {} checkpoints", out.metrics.iter().filter(|r| r.t <= t_eps).count()))
}

fn heterogeneous_run(mode: Mode, gamma: f64, seed: u64) -> Result<RunOutput, String> {
    let cfg = RunConfig { mode, t_max: 3000, set: SetConfig { gamma, ..SetConfig::default() }, ..tuned_config(seed) };
    run_ok(&cfg, &heterogeneous_task(seed), &DelayModel::default())
}

fn robustness_tradeoff() -> Outcome {
    let gammas = [0.0, 0.5, 1.0, 2.0];
    let mut lines = Vec::new();
    for seed in 0..5 {
        let losses = gammas
            .iter()
            .map(|&g| heterogeneous_run(Mode::AspireEase, g, seed).map(|o| final_worst(&o)))
            .collect::<Result<Vec<_>, _>>()?;
        ensure(losses.windows(2).all(|w| w[1] <= w[0] + 1e-4), || format!("seed {seed}: {losses:.4?}"))?;
        lines.push(format!("{:.3}->{:.3}", losses[0], losses[3]));
    }
    Ok(format!("worst loss non-increasing in gamma on 5 seeds ({})", lines.join(", ")))
}

fn worst_case_improvement() -> Outcome {
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in 0..5 {
        let ease = final_worst(&heterogeneous_run(Mode::AspireEase, 1.0, seed)?);
        let mix = final_worst(&heterogeneous_run(Mode::MixEven, 1.0, seed)?);
        if ease <= mix {
            wins += 1;
        }
        margins.push(format!("{ease:.3}/{mix:.3}"));
    }
    ensure(wins == 5, || format!("{wins}/5 wins ({})", margins.join(", ")))?;
    Ok(format!("5/5 seed wins, ease/mix_even worst loss {}", margins.join(", ")))
}

fn ease_vs_cp() -> Outcome {
    let mut details = Vec::new();
    for seed in 0..5 {
        let ease = heterogeneous_run(Mode::AspireEase, 1.0, seed)?;
        let cp = heterogeneous_run(Mode::AspireCp, 1.0, seed)?;
        ensure(ease.peak_planes <= cp.peak_planes && ease.plane_iterations < cp.plane_iterations, || {
            format!(
                "seed {seed}: peak {} vs {}, plane-iterations {} vs {}",
                ease.peak_planes, cp.peak_planes, ease.plane_iterations, cp.plane_iterations
            )
        })?;
        details.push(format!("{}/{} peak, {}/{}", ease.peak_planes, cp.peak_planes, ease.plane_iterations, cp.plane_iterations));
    }
    Ok(format!("ease/cp on 5 seeds: {}", details.join("; ")))
}

fn timing_model() -> Outcome {
    let data = convex_task(0);
    let small: Vec<LabeledDataset> = data[..3].to_vec();
    let delays = vec![1.0, 2.0, 4.0];
    let base = RunConfig { t1: 0, stop_at_eps: false, metric_every: 1_000_000, ..RunConfig::default() };
    let async_cfg = RunConfig { s: 1, tau: 16, t_max: 7000, consume: ConsumePolicy::ExactlyS, ..base.clone() };
    let sync_cfg = RunConfig { mode: Mode::Sync, t_max: 500, ..base.clone() };
    let per_worker = DelayModel::PerWorker { delays: delays.clone() };
    let a = run_ok(&async_cfg, &small, &per_worker)?;
    let s = run_ok(&sync_cfg, &small, &per_worker)?;
    let simulated = a.vtime / s.vtime;
    let predicted = time_ratio(a.iterations as f64, s.iterations as f64, 1, &delays);
    ensure((simulated - predicted).abs() <= 1e-9, || format!("simulated {simulated} vs predicted {predicted}"))?;

    let equal = DelayModel::Constant { delay: 2.0 };
    let a = run_ok(&RunConfig { s: 3, tau: 3, t_max: 400, ..base.clone() }, &small, &equal)?;
    let s = run_ok(&RunConfig { mode: Mode::Sync, t_max: 400, ..base }, &small, &equal)?;
    let degenerate = a.vtime / s.vtime;
    let formula = time_ratio(400.0, 400.0, 3, &[2.0; 3]);
    ensure(degenerate == 1.0 && formula == 1.0, || format!("equal delays gave {degenerate} / {formula}"))?;
    Ok(format!("ratio {simulated} matches prediction {predicted}; equal-delay ratio exactly 1"))
}

fn adversary_suppression() -> Outcome {
    let backdoor = Backdoor { trigger_feature: 0, trigger_value: 4.0, target_label: 0, fraction: 0.3 };
    let faults = FaultSpec { malicious: vec![0], beta: 5.0, backdoor: Some(backdoor.clone()) };
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in 0..5 {
        let clean = convex_task(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let (data, _) = inject_faults(&clean, &faults, &mut rng).map_err(|e| e.to_string())?;
        let test_set = backdoor_test_set(&clean, &backdoor).map_err(|e| e.to_string())?;
        let prior = [0.5, 1.0, 1.0, 1.0].map(|x| x / 3.5).to_vec();
        let set = SetConfig { gamma: 1.0, prior: Some(prior), width_scale: 0.5, ..SetConfig::default() };
        let base = RunConfig { t_max: 3000, faults: faults.clone(), set, ..tuned_config(seed) };
        let measure = |mode| -> Result<(f64, f64), String> {
            let out = run_ok(&RunConfig { mode, ..base.clone() }, &data, &DelayModel::default())?;
            let rate = attack_success_rate(&out.z, &out.spec, &test_set, 0).map_err(|e| e.to_string())?;
            Ok((out.metrics.last().unwrap().mal_weight, rate))
        };
        let (w_ease, r_ease) = measure(Mode::AspireEase)?;
        let (w_mix, r_mix) = measure(Mode::MixEven)?;
        if w_ease < w_mix && r_ease < r_mix {
            wins += 1;
        }
        details.push(format!("{w_ease:.3}/{w_mix:.3} weight {r_ease:.3}/{r_mix:.3} attack"));
    }
    ensure(wins >= 4, || format!("{wins}/5 seeds ({})", details.join("; ")))?;
    Ok(format!("{wins}/5 seeds, ease/mix_even: {}", details.join("; ")))
}

fn check_trace(out: &RunOutput, cfg: &RunConfig, n: usize) -> Result<usize, String> {
    let b = cfg.bounds;
    let mut prev: Option<(Vec<u64>, Vec<u64>)> = None;
    let mut pending_add: Vec<u64> = Vec::new();
    let mut pending_drop: Vec<u64> = Vec::new();
    let mut checked = 0;
    for e in &out.trace {
        match &e.body {
            EventBody::WorkerUpdate { stale_t, .. } => {
                ensure(e.t - stale_t <= cfg.tau, || format!("t = {}: update from {stale_t} exceeds tau", e.t))?;
            }
            EventBody::MasterIteration { active, staleness, w, phi, plane_ids, duals, extents, .. } => {
                checked += 1;
                ensure(staleness.iter().all(|&s| s < cfg.tau), || format!("t = {}: staleness {staleness:?}", e.t))?;
                if let Some((w0, phi0)) = &prev {
                    for j in (0..n).filter(|j| !active.contains(j)) {
                        ensure(w[j] == w0[j] && phi[j] == phi0[j], || format!("t = {}: inactive worker {j} moved", e.t))?;
                    }
                }
                ensure(plane_ids.len() == duals.len() && plane_ids.len() <= cfg.max_planes, || {
                    format!("t = {}: {} ids for {} duals", e.t, plane_ids.len(), duals.len())
                })?;
                let mut sorted = plane_ids.clone();
                sorted.dedup();
                ensure(sorted.len() == plane_ids.len(), || format!("t = {}: repeated plane id", e.t))?;
                ensure(pending_add.iter().all(|id| plane_ids.contains(id)), || format!("t = {}: added plane missing", e.t))?;
                ensure(pending_drop.iter().all(|id| !plane_ids.contains(id)), || format!("t = {}: pruned plane kept", e.t))?;
                pending_add.clear();
                pending_drop.clear();
                let inside = extents.w <= b.alpha1
                    && extents.z <= b.alpha1
                    && (0.0..=b.alpha2).contains(&extents.h)
                    && extents.lambda_min >= 0.0
                    && extents.lambda_max <= b.alpha3
                    && extents.phi <= b.alpha4;
                ensure(inside, || format!("t = {}: box violated {extents:?}", e.t))?;
                prev = Some((w.clone(), phi.clone()));
            }
            EventBody::PlaneAdded { id, .. } => pending_add.push(*id),
            EventBody::PlanesPruned { ids } => pending_drop.extend(ids),
            EventBody::PlaneBroadcast { master, workers } => {
                ensure(workers.iter().all(|w| w == master), || format!("t = {}: worker plane lists differ", e.t))?;
            }
            _ => {}
        }
    }
    Ok(checked)
}

fn protocol_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut total = 0;
    for case in 0..10 {
        let data = if rng.random_bool(0.5) { convex_task(case) } else { heterogeneous_task(case) };
        let n = data.len();
        let delay = if rng.random_bool(0.5) {
            DelayModel::Lognormal { mu: 1.0, sigma: rng.random_range(0.2..1.5) }
        } else {
            DelayModel::PerWorker { delays: (0..n).map(|_| rng.random_range(0.5..4.0)).collect() }
        };
        let cfg = RunConfig {
            mode: if rng.random_bool(0.5) { Mode::AspireEase } else { Mode::AspireCp },
            s: rng.random_range(1..=n),
            tau: rng.random_range(1..=5),
            k: rng.random_range(2..=10),
            max_planes: rng.random_range(2..=6),
            t_max: 1500,
            t1: 1000,
            batch_size: if rng.random_bool(0.5) { Some(32) } else { None },
            consume: if rng.random_bool(0.5) { ConsumePolicy::AllQueued } else { ConsumePolicy::ExactlyS },
            set: SetConfig { gamma: rng.random_range(0.0..2.0), ..SetConfig::default() },
            ..tuned_config(case)
        };
        let out = run_ok(&cfg, &data, &delay)?;
        total += check_trace(&out, &cfg, n).map_err(|e| format!("run {case}: {e}"))?;
    }
    Ok(format!("10 randomized runs, {total} master iterations scanned"))
}

fn determinism() -> Outcome {
    let manifest = env!("CARGO_MANIFEST_DIR");
    let text = std::fs::read_to_string(format!("{manifest}/../../configs/toy.json")).map_err(|e| e.to_string())?;
    let golden = std::fs::read(format!("{manifest}/../cli/tests/golden/toy_metrics.csv")).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = dir.path().display().to_string();
        let (config, resolved) = parse_config(&text, &[("out".into(), out)]).map_err(|e| e.to_string())?;
        execute(&config, &resolved).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(dir.path().join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], || "repeated runs differ".into())?;
    ensure(outputs[0] == golden, || "metrics differ from the committed golden file".into())?;
    Ok(format!("two runs byte-identical to the golden file ({} bytes)", golden.len()))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "LP oracle equivalence", Duration::from_secs(10), lp_oracle),
        (2, "gradient suite", Duration::from_secs(30), gradient_suite),
        (3, "convergence", Duration::from_secs(60), convergence),
        (4, "robustness tradeoff", Duration::from_secs(180), robustness_tradeoff),
        (5, "worst-case improvement", Duration::from_secs(180), worst_case_improvement),
        (6, "EASE vs CP", Duration::from_secs(180), ease_vs_cp),
        (7, "timing model", Duration::from_secs(5), timing_model),
        (8, "adversary suppression", Duration::from_secs(180), adversary_suppression),
        (9, "protocol invariants", Duration::from_secs(120), protocol_invariants),
        (10, "determinism", Duration::from_secs(30), determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({elapsed:.1?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({elapsed:.1?}) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

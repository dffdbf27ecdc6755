//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gating criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use distfid::backends::{
    BackendConfig, Family, GenerationRequest, PlanPolicy, QuotaEmission, SyntheticSpec,
};
use distfid::dist::{make_distribution, render_prompt, Alphabet, PromptSpec, TaskDistribution};
use distfid::extract::{restrict_and_normalize, ExtractError, StepDistribution, StepRecord, TopEntry};
use distfid::harness::{
    classify, quota_analysis, run_cell, temperature_sweep, Classification, RunOptions, Thresholds,
};
use distfid::layers::{layer_convergence, step_function_trace, up_layer, LayerProbeTrace, UpLayer};
use distfid::metrics::{atvd, atvd_step, delta_pass, hamming_diversity, pearson_r};

type Outcome = Result<String, String>;

/// Monte-Carlo p99 of per-trial (100 samples) and pooled (1000 samples)
/// ATVD for the extreme task.
static ORACLE: std::sync::OnceLock<(f64, f64)> = std::sync::OnceLock::new();

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn alphabet(n: u32) -> Alphabet {
    Alphabet::numeric(1, n).unwrap()
}

fn extreme() -> TaskDistribution {
    make_distribution(alphabet(4), vec![0.1, 0.7, 0.1, 0.1]).unwrap()
}

fn flat() -> TaskDistribution {
    make_distribution(alphabet(9), vec![0.1, 0.1, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1]).unwrap()
}

fn opts() -> RunOptions {
    RunOptions::default()
}

fn metric_oracles() -> Outcome {
    let a = atvd(&[0.5, 0.5], &[0.7, 0.3]).map_err(|e| e.to_string())?;
    check((a - 0.2).abs() <= 1e-15, format!("atvd = {a}"))?;

    let task = make_distribution(alphabet(2), vec![0.5, 0.5]).unwrap();
    let step = StepDistribution::new(0, vec![0.7, 0.3]);
    let s = atvd_step(&[step.clone()], &task).map_err(|e| e.to_string())?;
    check(s == atvd(task.probs(), &step.probs).unwrap(), format!("atvd_step at T=1 = {s}"))?;

    let h = hamming_diversity(&[1, 2], &[1, 2, 2]);
    check((h - 1.0 / 3.0).abs() <= 1e-15, format!("hamming = {h}"))?;

    let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.37).collect();
    let up: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
    let down: Vec<f64> = xs.iter().map(|x| -0.5 * x + 7.0).collect();
    let r1 = pearson_r(&xs, &up).unwrap();
    let r2 = pearson_r(&xs, &down).unwrap();
    check((r1 - 1.0).abs() <= 1e-12 && (r2 + 1.0).abs() <= 1e-12, format!("r = {r1}, {r2}"))?;

    let d = delta_pass(0.5, 0.7).unwrap().value;
    let want = 0.7f64.exp() - 0.5f64.exp();
    check((d - want).abs() <= 1e-12, format!("delta_pass = {d}"))?;
    Ok(format!("atvd={a} hamming={h:.6} r=({r1},{r2}) dpass={d:.12}"))
}

/// Per-trial and pooled ATVD percentiles of i.i.d. multinomial draws from
/// `probs`, from an RNG independent of the synthetic backends.
fn mc_atvd_p99(probs: &[f64], samples: usize, reps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = probs.len();
    let mut vals: Vec<f64> = (0..reps)
        .map(|_| {
            let mut counts = vec![0usize; n];
            for _ in 0..samples {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = n - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                counts[k] += 1;
            }
            counts
                .iter()
                .zip(probs)
                .map(|(c, p)| (*c as f64 / samples as f64 - p).abs())
                .sum::<f64>()
                / n as f64
        })
        .collect();
    vals.sort_by(f64::total_cmp);
    vals[(reps as f64 * 0.99) as usize - 1]
}

fn synthetic_e() -> Outcome {
    let task = extreme();
    let cfg = BackendConfig::synthetic("syn-e", SyntheticSpec::new(Family::E).with_seed(7));
    let cell = run_cell(&cfg, "extreme", &PromptSpec::simulated(task.clone()), 10, &opts()).map_err(|e| e.to_string())?;
    check(cell.aggregate.trials == 10, "not all trials usable")?;
    let e = cell.aggregate.mean.e_score;
    check((e - 0.7).abs() <= 1e-12, format!("e_score = {e}"))?;
    let mut worst: f64 = 0.0;
    for t in cell.usable_trials() {
        let m = &t.metrics.as_ref().unwrap().scalars;
        check(m.atvd_task_token <= 1e-12, format!("{}: atvd_task_token = {}", t.trial_id, m.atvd_task_token))?;
        worst = worst.max(m.atvd_task_result);
    }
    let pooled = atvd(&cell.pooled_result, task.probs()).unwrap();
    let (p99_trial, p99_pooled) = *ORACLE.get().expect("oracle computed before criteria");
    let detail = format!(
        "e={e:.12} worst trial atvd={worst:.4} pooled={pooled:.4}; MC p99 trial={p99_trial:.4} pooled={p99_pooled:.4}"
    );
    check(worst <= 0.05, format!("per-trial atvd_task_result {worst} > 0.05 ({detail})"))?;
    check(pooled <= 0.02, format!("pooled atvd_task_result {pooled} > 0.02 ({detail})"))?;
    Ok(detail)
}

fn synthetic_d() -> Outcome {
    let th = Thresholds::default();
    let d = BackendConfig::synthetic("syn-d", SyntheticSpec::new(Family::D).with_seed(7));
    let cell = run_cell(&d, "flat", &PromptSpec::simulated(flat()), 10, &opts()).map_err(|e| e.to_string())?;
    let m = &cell.aggregate.mean;
    check((m.e_score - 1.0).abs() <= 1e-12, format!("D flat e_score = {}", m.e_score))?;
    let gap = m.atvd_step - m.atvd_task_token;
    check(gap >= 0.1, format!("atvd_step - atvd_task_token = {gap}"))?;
    check(classify(&cell, &flat(), &th) == Classification::D, "D cell not classified D")?;

    let big = run_cell(
        &d,
        "extreme",
        &PromptSpec::simulated(extreme()).with_sample_count(100),
        100,
        &opts(),
    )
    .map_err(|e| e.to_string())?;
    let steps: Vec<StepDistribution> = big.usable_trials().flat_map(|t| t.step_distributions()).collect();
    check(steps.len() == 10_000, format!("{} steps", steps.len()))?;
    let s = atvd_step(&steps, &extreme()).unwrap();
    check((s - 0.24).abs() <= 0.02, format!("extreme atvd_step = {s}"))?;

    let e = BackendConfig::synthetic("syn-e", SyntheticSpec::new(Family::E).with_seed(7));
    let ecell = run_cell(&e, "flat", &PromptSpec::simulated(flat()), 10, &opts()).map_err(|e| e.to_string())?;
    check(ecell.classification == Classification::E, "E cell not classified E")?;
    Ok(format!(
        "flat e={:.3} gap={gap:.4} class={}; extreme atvd_step over 10000 steps={s:.4}; E class={}",
        m.e_score, cell.classification, ecell.classification
    ))
}

fn quota() -> Outcome {
    let task = make_distribution(alphabet(4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let mut spec = SyntheticSpec::new(Family::Quota).with_seed(7);
    spec.lambda = 0.5;
    spec.emission = QuotaEmission::LargestDeficit;
    let cfg = BackendConfig::synthetic("syn-quota", spec);
    let prompt = PromptSpec::simulated(task.clone()).with_sample_count(200);
    let cell = run_cell(&cfg, "q", &prompt, 10, &opts()).map_err(|e| e.to_string())?;

    let built = cfg.build().map_err(|e| e.to_string())?;
    let rendered = render_prompt(&prompt).unwrap();
    let mut clamps = 0;
    for r in 0..10 {
        let t = built
            .generate(&GenerationRequest {
                trial_id: format!("syn-quota/q/{r}"),
                prompt: rendered.clone(),
                target: Some(task.clone()),
                sample_count: 200,
            })
            .map_err(|e| e.to_string())?;
        clamps += t.meta.floor_clamps.unwrap_or(0);
    }
    check(clamps == 0, format!("floor bound {clamps} times"))?;

    let trials: Vec<_> = cell.usable_trials().cloned().collect();
    let q = quota_analysis(&trials, &task).map_err(|e| e.to_string())?;
    let (r, slope) = (q.pooled.r().unwrap_or(f64::NAN), q.pooled.slope().unwrap_or(f64::NAN));
    check(q.pairs >= 1000, format!("{} step pairs", q.pairs))?;
    check(r >= 0.9, format!("pooled r = {r}"))?;
    check((slope - 0.5).abs() <= 0.05, format!("slope = {slope}"))?;

    let d = BackendConfig::synthetic("syn-d", SyntheticSpec::new(Family::D).with_seed(7));
    let dcell = run_cell(&d, "extreme", &PromptSpec::simulated(extreme()), 10, &opts()).map_err(|e| e.to_string())?;
    let dtrials: Vec<_> = dcell.usable_trials().cloned().collect();
    let dq = quota_analysis(&dtrials, &extreme()).map_err(|e| e.to_string())?;
    let dr = dq.pooled.r().unwrap_or(f64::NAN);
    check(dr.abs() <= 0.1, format!("D null r = {dr}"))?;
    Ok(format!(
        "quota: pairs={} r={r:.4} slope={slope:.4} clamps=0; D iid null: pairs={} r={dr:.4}",
        q.pairs, dq.pairs
    ))
}

fn step_record() -> impl Strategy<Value = (StepRecord, usize)> {
    let pool = ["1", "2", "3", "4", "a", "b", ",", " ", "x", "yy", "\n", "5"];
    (1usize..=5, prop::collection::vec((0usize..pool.len(), -20.0f64..0.0), 1..=5)).prop_map(move |(k, raw)| {
        let mut seen = std::collections::HashSet::new();
        let top: Vec<TopEntry> = raw
            .into_iter()
            .filter(|(i, _)| seen.insert(*i))
            .take(k)
            .map(|(i, lp)| TopEntry::new(pool[i], lp))
            .collect();
        let sampled = top[0].token.clone();
        (StepRecord::new(0, sampled, top), k)
    })
}

fn topk_fallback() -> Outcome {
    let alpha = alphabet(4);
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 1000,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let counter = std::cell::Cell::new(0usize);
    let all_missing = std::cell::Cell::new(0usize);
    runner
        .run(&step_record(), |(step, _)| {
            counter.set(counter.get() + 1);
            let present: Vec<bool> = alpha
                .symbols()
                .iter()
                .map(|s| step.top_entries.iter().any(|e| e.token == s.token_text))
                .collect();
            match restrict_and_normalize(&step, &alpha) {
                Ok(d) => {
                    prop_assert!(present.iter().any(|p| *p));
                    let sum: f64 = d.probs.iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {}", sum);
                    for (p, here) in d.probs.iter().zip(&present) {
                        if !here {
                            prop_assert_eq!(*p, 0.0);
                        } else {
                            prop_assert!(*p > 0.0);
                        }
                    }
                }
                Err(ExtractError::AllMissing { .. }) => {
                    all_missing.set(all_missing.get() + 1);
                    prop_assert!(present.iter().all(|p| !p));
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{} cases passed, {} of them with no alphabet token",
        counter.get(),
        all_missing.get()
    ))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                pending.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, jobs) in dirs.iter().zip(["1", "4"]) {
        let out = Command::new(env!("CARGO_BIN_EXE_distfid"))
            .args(["run", "--config"])
            .arg(fixture("demo.toml"))
            .args(["--seed", "7", "--jobs", jobs, "--out"])
            .arg(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        check(
            out.status.success(),
            format!("run --jobs {jobs} failed: {}", String::from_utf8_lossy(&out.stderr)),
        )?;
    }
    let (a, b) = (files_under(dirs[0].path()), files_under(dirs[1].path()));
    check(a == b, "output file sets differ")?;
    let mut compared = 0;
    for f in &a {
        if f == Path::new("manifest.json") {
            continue;
        }
        let x = std::fs::read(dirs[0].path().join(f)).unwrap();
        let y = std::fs::read(dirs[1].path().join(f)).unwrap();
        check(x == y, format!("{} differs between --jobs 1 and --jobs 4", f.display()))?;
        compared += 1;
    }
    Ok(format!("{compared} files byte-identical across --jobs 1/4 (manifest.json timing excluded)"))
}

fn layer_probe() -> Outcome {
    let labels: Vec<String> = ["1", "2", "3", "4"].map(String::from).to_vec();
    for jump in 1..=31 {
        let t = step_function_trace(32, 10, labels.clone(), jump, 1, 30.0);
        let up = up_layer(&t, 0.5).map_err(|e| e.to_string())?;
        check(
            up.per_step.iter().all(|u| *u == UpLayer::At(jump)),
            format!("jump {jump}: {:?}", up.per_step[0]),
        )?;
    }
    let task = extreme();
    let matched: Vec<f64> = task.probs().iter().map(|p| p.ln() + 3.0).collect();
    let logits: Vec<Vec<Vec<f64>>> = (0..32)
        .map(|l| {
            (0..10)
                .map(|_| if l >= 20 { matched.clone() } else { vec![0.0; 4] })
                .collect()
        })
        .collect();
    let t = LayerProbeTrace::new("m", "p", labels, (0..10).collect(), logits).unwrap();
    let c = layer_convergence(&t, &task).map_err(|e| e.to_string())?;
    let tail = c.mean_curve[20..].iter().copied().fold(0.0, f64::max);
    check(tail <= 1e-12, format!("tail = {tail}"))?;
    Ok(format!("jump layers 1..31 recovered on 32 layers; convergence tail max={tail:e}"))
}

fn temperature() -> Outcome {
    let grid = [0.5, 1.0, 2.0];
    let spec = PromptSpec::simulated(extreme());
    let e = BackendConfig::synthetic("syn-e", SyntheticSpec::new(Family::E).with_seed(7));
    let mut dspec = SyntheticSpec::new(Family::D).with_seed(7);
    dspec.epsilon = 0.02;
    dspec.plan_policy = PlanPolicy::IidDraw;
    let d = BackendConfig::synthetic("syn-d", dspec);
    let se = temperature_sweep(&e, "extreme", &spec, &grid, 10, &opts()).map_err(|e| e.to_string())?;
    let sd = temperature_sweep(&d, "extreme", &spec, &grid, 10, &opts()).map_err(|e| e.to_string())?;
    let ev: Vec<f64> = se.points.iter().map(|p| p.e_score_mean).collect();
    let dv: Vec<f64> = sd.points.iter().map(|p| p.e_score_mean).collect();
    check(ev.windows(2).all(|w| w[1] < w[0]), format!("E not strictly decreasing: {ev:?}"))?;
    let (de, dd) = (ev[0] - ev[2], dv[0] - dv[2]);
    check(de > dd, format!("E drop {de} <= D drop {dd}"))?;
    Ok(format!(
        "E {:.4}/{:.4}/{:.4} (drop {de:.4}); D {:.4}/{:.4}/{:.4} (drop {dd:.4})",
        ev[0], ev[1], ev[2], dv[0], dv[1], dv[2]
    ))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("metric oracles", Duration::from_secs(1), metric_oracles),
        ("synthetic E on extreme task", Duration::from_secs(10), synthetic_e),
        ("synthetic D and D/E classification", Duration::from_secs(10), synthetic_d),
        ("quota regression and D null", Duration::from_secs(10), quota),
        ("top-k fallback property suite", Duration::from_secs(5), topk_fallback),
        ("run determinism across --jobs", Duration::from_secs(30), determinism),
        ("layer-probe up-layer recovery", Duration::from_secs(5), layer_probe),
        ("temperature sweep E vs D", Duration::from_secs(10), temperature),
    ];
    let t0 = Instant::now();
    let probs = [0.1, 0.7, 0.1, 0.1];
    let oracle = (
        mc_atvd_p99(&probs, 100, 10_000, 0xACCE),
        mc_atvd_p99(&probs, 1000, 10_000, 0xACCF),
    );
    ORACLE.set(oracle).unwrap();
    println!(
        "ORACLE Monte-Carlo, 10000 reps, extreme task ({:.2?}): p99 per-trial atvd={:.4}, p99 pooled atvd={:.4}",
        t0.elapsed(),
        oracle.0,
        oracle.1
    );

    let mut failed = 0;
    for (name, limit, f) in criteria {
        let t0 = Instant::now();
        let res = f();
        let took = t0.elapsed();
        let over = if took > limit {
            format!(" [over {:.0?} budget]", limit)
        } else {
            String::new()
        };
        match res {
            Ok(detail) => println!("PASS {name} ({took:.2?}){over}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({took:.2?}){over}: {why}");
            }
        }
    }
    println!("SKIP live endpoint integration (not gating; needs a logprobs-capable endpoint)");
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Run with `cargo test -p embinvert --test acceptance`. Exits non-zero if
//! any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use embinvert::experiments::{self, ExperimentName, ExperimentParams, ExperimentSpec, Outcome, MANIFEST};
use embinvert_core::gradsuite;
use embinvert_core::invert::{Init, OptimizerKind};
use embinvert_core::objective::{laplacian, tv_value_grad};
use embinvert_core::pyramid::{build, collapse};
use embinvert_core::{Rng, Tensor};

const THREADS: usize = 2;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn within(limit_secs: u64, elapsed: Duration) -> (bool, String) {
    (elapsed <= Duration::from_secs(limit_secs), format!("{:.1}s of {limit_secs}s", elapsed.as_secs_f64()))
}

fn gradient_oracles() -> Result<Verdict> {
    let start = Instant::now();
    let outcomes = gradsuite::run(0xACCE, 5)?;
    let (fast, time) = within(120, start.elapsed());
    let mut names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
    names.dedup();
    let mut worst_op = 0.0f64;
    let mut worst_chain = 0.0f64;
    for o in &outcomes {
        if o.name.contains("chain") {
            worst_chain = worst_chain.max(o.rel_err);
        } else {
            worst_op = worst_op.max(o.rel_err);
        }
    }
    let instances_ok = names.iter().all(|n| outcomes.iter().filter(|o| o.name == *n).count() >= 5);
    let passed = instances_ok && worst_op < 1e-5 && worst_chain < 1e-4 && fast;
    Ok(verdict(
        passed,
        format!("{} checks x 5 instances, worst op {worst_op:.2e}, worst chain {worst_chain:.2e}, {time}", names.len()),
    ))
}

fn tv_laplacian_identity() -> Result<Verdict> {
    let mut rng = Rng::new(0x7A7A);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = Tensor::from_fn(&[32, 32, 3], |_| rng.uniform())?;
        let (_, g) = tv_value_grad(&p, 2.0)?;
        worst = worst.max(g.add(&laplacian(&p)?.scale(2.0)?)?.max_abs());
    }
    Ok(verdict(worst <= 1e-10, format!("max |grad_TV + 2 lap p| = {worst:.2e} over 20 images")))
}

fn pyramid_reconstruction() -> Result<Verdict> {
    let mut rng = Rng::new(0xB00D);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = Tensor::from_fn(&[32, 32, 3], |_| rng.uniform())?;
        for levels in 1..=3 {
            worst = worst.max(collapse(&build(&p, levels)?)?.max_abs_diff(&p)?);
        }
    }
    Ok(verdict(worst <= 1e-12, format!("max reconstruction error {worst:.2e} over 20 images x 3 depths")))
}

/// Runs an experiment into `dir`, returning its outcome and wall time.
fn experiment(spec: &ExperimentSpec, dir: &Path) -> Result<(Outcome, Duration)> {
    let start = Instant::now();
    let outcome = experiments::run(spec, dir, THREADS)?;
    Ok((outcome, start.elapsed()))
}

fn asymptotics(dir: &Path) -> Result<Verdict> {
    let spec = ExperimentSpec::defaults(ExperimentName::Asymptotics);
    let ExperimentParams::Asymptotics(p) = &spec.params else { unreachable!() };
    ensure!(
        p.tv_weights == [1e2, 1e3, 1e4] && p.alpha == 2.0 && p.halving_tolerance == 0.1,
        "unexpected pinned params"
    );
    let (Outcome::Asymptotics(o), elapsed) = experiment(&spec, dir)? else { unreachable!() };
    let (fast, time) = within(300, elapsed);
    let errors: Vec<String> = o.report.rows.iter().map(|r| format!("{:.2e}", r.relative_error)).collect();
    let ratios: Vec<String> = o.scaling_ratios.iter().map(|r| format!("{r:.3}")).collect();
    Ok(verdict(
        o.max_dc_error <= 1e-6 && o.halves && o.errors_decrease && fast,
        format!(
            "DC error {:.1e}, |dp| w ratios [{}], relative errors [{}], {time}",
            o.max_dc_error,
            ratios.join(", "),
            errors.join(", ")
        ),
    ))
}

fn set1(dir: &Path) -> Result<Verdict> {
    let spec = ExperimentSpec::defaults(ExperimentName::Set1);
    let ExperimentParams::Set1(p) = &spec.params else { unreachable!() };
    ensure!(
        p.targets == 10
            && p.cos_threshold == 0.9
            && p.setup.iterations == 500
            && p.setup.init == Init::Guide
            && p.setup.job().optimizer == OptimizerKind::Adam
            && p.regularization.tv_weight > 0.0
            && p.regularization.guiding_weight > 0.0,
        "unexpected pinned params"
    );
    let (Outcome::Set1(o), elapsed) = experiment(&spec, dir)? else { unreachable!() };
    let (fast, time) = within(600, elapsed);
    let min = o.cos_to_target.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(verdict(
        o.above_threshold >= 8 && fast,
        format!("{}/10 targets reach cos >= 0.9 (min {min:.3}), {time}", o.above_threshold),
    ))
}

fn tv_sweep(dir: &Path) -> Result<Verdict> {
    let spec = ExperimentSpec::defaults(ExperimentName::TvSweep);
    let ExperimentParams::TvSweep(p) = &spec.params else { unreachable!() };
    ensure!(p.targets == 5 && p.tv_weights.len() == 4, "unexpected pinned params");
    let (Outcome::TvSweep(o), elapsed) = experiment(&spec, dir)? else { unreachable!() };
    let count = o.monotone.iter().filter(|m| **m).count();
    Ok(verdict(
        count * 2 > o.monotone.len(),
        format!(
            "{count}/{} targets non-decreasing over w_TV {:?}, {:.0}s",
            o.monotone.len(),
            o.tv_weights,
            elapsed.as_secs_f64()
        ),
    ))
}

fn scaling(dir: &Path) -> Result<Verdict> {
    let spec = ExperimentSpec::defaults(ExperimentName::Scaling);
    let ExperimentParams::Scaling(p) = &spec.params else { unreachable!() };
    ensure!(p.targets == 3 && p.scales == [1.0, 2.0, 4.0, 8.0], "unexpected pinned params");
    let (Outcome::Scaling(o), elapsed) = experiment(&spec, dir)? else { unreachable!() };
    let count = o.monotone.iter().filter(|m| **m).count();
    Ok(verdict(
        count * 2 > o.monotone.len(),
        format!(
            "{count}/{} targets non-decreasing over s {:?}, {:.0}s",
            o.monotone.len(),
            o.scales,
            elapsed.as_secs_f64()
        ),
    ))
}

fn filter_table(dir: &Path) -> Result<Verdict> {
    let spec = ExperimentSpec::defaults(ExperimentName::FilterTable);
    let ExperimentParams::FilterTable(p) = &spec.params else { unreachable!() };
    ensure!(p.filters == [8, 16, 32] && p.decoder_seeds.len() == 3, "unexpected pinned params");
    let (Outcome::FilterTable(o), elapsed) = experiment(&spec, dir)? else { unreachable!() };
    let count = o.monotone.iter().filter(|m| **m).count();
    let mean_col = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
    let losses: Vec<String> = (0..o.filters.len()).map(|j| format!("{:.4}", mean_col(&o.mean_loss, j))).collect();
    let cos: Vec<String> = (0..o.filters.len()).map(|j| format!("{:.3}", mean_col(&o.mean_cos, j))).collect();
    Ok(verdict(
        count * 2 > o.monotone.len(),
        format!(
            "{count}/{} seeds non-increasing; <L> [{}], <cos> [{}], {:.0}s",
            o.monotone.len(),
            losses.join(", "),
            cos.join(", "),
            elapsed.as_secs_f64()
        ),
    ))
}

fn scatter(dir: &Path) -> Result<(Verdict, Verdict)> {
    let spec = ExperimentSpec::defaults(ExperimentName::Scatter);
    let ExperimentParams::Scatter(p) = &spec.params else { unreachable!() };
    ensure!(p.embeddings == 30 && p.budget.steps == 2000 && p.budget.batch == 8, "unexpected pinned params");
    let (Outcome::Scatter(o), elapsed) = experiment(&spec, dir)? else { unreachable!() };
    let (fast, time) = within(900, elapsed);
    let progress = o.final_validation / o.initial_validation;
    let training = verdict(
        progress <= 0.5 && fast,
        format!("validation {:.4} -> {:.4} ({progress:.3}x), {time}", o.initial_validation, o.final_validation),
    );
    let r = &o.report;
    let below = (r.iterative_below * r.points.len() as f64).round() as usize;
    let property = verdict(
        r.points.len() == 30 && r.ratio >= 0.95 && r.iterative_below >= 0.7,
        format!("ff/iter ratio {:.3}, iterative below on {below}/{} points", r.ratio, r.points.len()),
    );
    Ok((training, property))
}

/// Replays each experiment from the manifest it wrote and compares every file.
fn determinism(runs: &[&Path], scratch: &Path) -> Result<Verdict> {
    let mut compared = 0usize;
    let mut mismatched = Vec::new();
    let mut names = Vec::new();
    for (k, first) in runs.iter().enumerate() {
        let spec = ExperimentSpec::read_manifest(&first.join(MANIFEST))?;
        names.push(format!("{:?}", spec.params.name()));
        let replay = scratch.join(format!("replay_{k}"));
        experiments::run(&spec, &replay, 1)?;
        let a = files(first)?;
        let b = files(&replay)?;
        ensure!(!a.is_empty(), "{} produced no files", first.display());
        if a.iter().map(|(p, _)| p).ne(b.iter().map(|(p, _)| p)) {
            mismatched.push(format!("{}: file sets differ", first.display()));
            continue;
        }
        for ((path, x), (_, y)) in a.iter().zip(&b) {
            compared += 1;
            if x != y {
                mismatched.push(path.clone());
            }
        }
    }
    Ok(verdict(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{compared} files byte-identical on replay of {}", names.join(", "))
        } else {
            format!("differences in {}", mismatched.join(", "))
        },
    ))
}

fn files(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root)?.to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

fn report(id: usize, title: &str, result: Result<Verdict>) -> bool {
    match result {
        Ok(v) => {
            println!("[{}] criterion {id}: {title}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
            v.passed
        }
        Err(e) => {
            println!("[FAIL] criterion {id}: {title}: error: {e:#}");
            false
        }
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let dir = |name: &str| scratch.path().join(name);
    let mut passed = vec![report(1, "gradient oracle suite", gradient_oracles())];
    passed.push(report(2, "TV gradient equals -2 x Laplacian", tv_laplacian_identity()));
    passed.push(report(3, "stationary-state asymptotics", asymptotics(&dir("asymptotics"))));
    passed.push(report(4, "pyramid perfect reconstruction", pyramid_reconstruction()));
    passed.push(report(5, "iterative reconstruction quality", set1(&dir("set1"))));
    passed.push(report(6, "TV sweep distance trend", tv_sweep(&dir("tv_sweep"))));
    passed.push(report(7, "target scaling trend", scaling(&dir("scaling"))));
    let (training, property) = match scatter(&dir("scatter")) {
        Ok((t, p)) => (Ok(t), Ok(p)),
        Err(e) => (Err(anyhow::anyhow!("{e:#}")), Err(e)),
    };
    passed.push(report(8, "decoder training progress", training));
    passed.push(report(9, "filter count trend", filter_table(&dir("filter_table"))));
    passed.push(report(10, "feed-forward vs iterative loss", property));

    let guided = dir("guided_frames");
    let replay = experiment(&ExperimentSpec::defaults(ExperimentName::GuidedFrames), &guided).and_then(|_| {
        let candidates = [dir("asymptotics"), dir("set1"), dir("tv_sweep"), guided.clone()];
        let runs: Vec<&Path> = candidates.iter().map(|p| p.as_path()).filter(|p| p.join(MANIFEST).exists()).collect();
        ensure!(runs.len() == candidates.len(), "an earlier experiment left no artifacts");
        determinism(&runs, scratch.path())
    });
    passed.push(report(11, "experiment replay is byte-identical", replay));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {}/{} criteria passed", passed.len() - failed, passed.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

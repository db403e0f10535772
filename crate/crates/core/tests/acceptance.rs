//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use chordfit_core::bench::{component_breakdown, scaling_bounds, scaling_from_totals, speedup};
use chordfit_core::certest::{compare, generate_reference, ToleranceSpec};
use chordfit_core::chordio::{parse_discharge, split_chords};
use chordfit_core::dispatch::{
    chord_tasks, effective_concurrency, emit_batch_script, run_parallel, run_serial, simulate,
    ByteSize, ClusterConfig, Dilated, FitRunner, NoOp,
};
use chordfit_core::lmfit::{jacobian, lm_fit, FitOptions, FitTimers};
use chordfit_core::pipeline::fit_chord;
use chordfit_core::spectra::{
    eval_model, ion_properties, synthesize, GaussianLine, LineReference, Noise, SpectralModel,
    Spectrum, WavelengthGrid,
};
use common::*;
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn jacobian_correctness() -> Verdict {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (model, x) = random_model_on_grid(&mut r);
        let sigma: Vec<f64> = (0..x.len()).map(|_| r.random_range(0.5..5.0)).collect();
        let grid = WavelengthGrid::new(x.clone()).unwrap();
        let counts = eval_model(&model, &grid).unwrap();
        let spec = Spectrum::new(grid, counts, sigma.clone()).unwrap();
        let analytic = jacobian(&model, &spec).unwrap();
        let fd = fd_jacobian(&model, &x, &sigma);
        let scale = fd.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut diff: f64 = 0.0;
        for (i, row) in fd.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                diff = diff.max((analytic[(i, p)] - v).abs());
            }
        }
        worst = worst.max(diff / scale);
    }
    verdict(worst <= 1e-6, format!("worst relative max-norm {worst:.2e} over 100 models"))
}

fn noiseless_recovery() -> Verdict {
    let mut r = rng(515);
    let grid = WavelengthGrid::linspace(499.0, 501.0, 100).unwrap();
    let n = grid.len() as f64;
    let (mut worst_rel, mut worst_chi2): (f64, f64) = (0.0, 0.0);
    let mut monotone = true;
    for _ in 0..50 {
        let truth = SpectralModel::constant(r.random_range(1.0..50.0)).with_line(GaussianLine::new(
            r.random_range(50.0..5000.0),
            r.random_range(499.6..500.4),
            r.random_range(0.1..0.3),
        ));
        let spec = synthesize(&truth, &grid, Noise::None, 0).unwrap();
        let mut init = truth.clone();
        init.baseline[0] *= 1.1;
        init.lines[0].amplitude *= 1.1;
        init.lines[0].width *= 1.1;
        init.lines[0].center += 0.1 * grid.span();
        let fit = lm_fit(&spec, &init, &FitOptions::default()).unwrap();
        for (g, w) in fit.model.params().iter().zip(truth.params()) {
            worst_rel = worst_rel.max((g - w).abs() / w.abs());
        }
        worst_chi2 = worst_chi2.max(fit.chi2);
        monotone &= fit.chi2_trace.windows(2).all(|w| w[1] < w[0]);
    }
    verdict(
        worst_rel <= 1e-6 && worst_chi2 < 1e-10 * n && monotone,
        format!("worst rel {worst_rel:.2e}, worst chi2 {worst_chi2:.2e}, traces decreasing: {monotone}"),
    )
}

fn statistical_sanity() -> Verdict {
    let l0 = 529.05;
    let reference = LineReference::new(l0, 1.1178e10, 0.0).unwrap();
    let grid = WavelengthGrid::linspace(l0 - 1.0, l0 + 1.0, 100).unwrap();
    let mu = l0 + 0.1;
    let make = |center: f64| {
        SpectralModel::constant(20.0).with_line(GaussianLine::new(1000.0, center, 0.12))
    };
    let mut centers = Vec::new();
    let mut flips = 0;
    let opts = FitOptions::default();
    for seed in 0..200u64 {
        let fit_one = |center: f64| {
            let truth = make(center);
            let spec = synthesize(&truth, &grid, Noise::SqrtGaussian, seed).unwrap();
            let mut init = truth.clone();
            init.lines[0].amplitude *= 1.1;
            init.lines[0].width *= 1.1;
            lm_fit(&spec, &init, &opts).unwrap()
        };
        let a = fit_one(mu);
        let b = fit_one(2.0 * l0 - mu);
        centers.push(a.model.lines[0].center);
        let va = ion_properties(&a.model.lines[0], &reference).unwrap().velocity;
        let vb = ion_properties(&b.model.lines[0], &reference).unwrap().velocity;
        if va.signum() == -vb.signum() && va != 0.0 {
            flips += 1;
        }
    }
    let n = centers.len() as f64;
    let mean = centers.iter().sum::<f64>() / n;
    let sd = (centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    let z = (mean - mu).abs() / se;
    verdict(
        z <= 3.0 && flips == 200,
        format!("mean mu offset {:.2} standard errors, velocity sign flips {flips}/200", z),
    )
}

fn determinism_regression() -> Verdict {
    let input = synthetic_discharge(64, 5, 163100);
    let serial = tempfile::tempdir().unwrap();
    let parallel = tempfile::tempdir().unwrap();
    let reference = tempfile::tempdir().unwrap();
    split_chords(&input, serial.path()).unwrap();
    split_chords(&input, parallel.path()).unwrap();
    let runner = FitRunner::default();
    let s = run_serial(&chord_tasks(serial.path(), 64), &runner).unwrap();
    generate_reference(serial.path(), reference.path(), false).unwrap();
    let cfg = ClusterConfig::new(1, 8);
    let p = run_parallel(&chord_tasks(parallel.path(), 64), &cfg, &runner).unwrap();
    let report = compare(reference.path(), parallel.path(), &ToleranceSpec::exact()).unwrap();
    let dev = report.max_abs_deviation();
    verdict(
        report.pass && dev == 0.0 && !s.any_failed() && !p.any_failed(),
        format!(
            "{} files compared on {} workers, max deviation {dev:e}, violations {}",
            report.compared,
            p.concurrency_limit,
            report.violation_count()
        ),
    )
}

fn splitter_round_trip() -> Verdict {
    let input = synthetic_discharge(64, 2, 5);
    let text = input.to_text();
    let parsed = parse_discharge(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = split_chords(&parsed, dir.path()).unwrap();
    let mut equal = files.len() == 64;
    let mut stanza_bytes = 0;
    for (k, f) in files.iter().enumerate() {
        let body = fs::read_to_string(f).unwrap();
        let one = parse_discharge(&body).unwrap();
        equal &= one.chords.len() == 1 && one.chords[0] == parsed.chords[k];
        stanza_bytes += body.len() - parsed.header.len();
    }
    let conserved = stanza_bytes + parsed.header.len() == text.len();
    verdict(
        equal && conserved,
        format!("{} files, blocks equal: {equal}, bytes conserved: {conserved}", files.len()),
    )
}

fn speedup_replay() -> Verdict {
    let s1 = speedup(1016.0, 51.0).unwrap();
    let s2 = speedup(1010.0, 51.0).unwrap();
    let b = scaling_from_totals(1016.0, 30.0, 64, 48, None).unwrap();
    let ok = (s1 * 10.0).round() == 199.0
        && (s2 * 10.0).round() == 198.0
        && b.lower_bound_makespan == 30.0
        && (b.ideal_speedup - 33.9).abs() <= 0.1;
    verdict(
        ok,
        format!(
            "speedup(1016,51) = {s1:.3}, speedup(1010,51) = {s2:.3}, lower bound {} s, ideal {:.3}",
            b.lower_bound_makespan, b.ideal_speedup
        ),
    )
}

fn simulator_oracle() -> Verdict {
    let a = simulate(&[30.0, 1.0, 1.0, 1.0], 2).makespan;
    let b = simulate(&[1.0; 8], 4).makespan;
    let mut r = rng(7);
    let mut bound_ok = true;
    let mut single_wave = 0;
    for _ in 0..500 {
        let n = r.random_range(1..40);
        let p = r.random_range(1..48);
        let d: Vec<f64> = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
        let m = simulate(&d, p).makespan;
        let lb = scaling_bounds(&d, p, None).unwrap().lower_bound_makespan;
        bound_ok &= m >= lb - 1e-9 * lb.max(1.0);
        if p >= n {
            single_wave += 1;
            bound_ok &= m == lb;
        }
    }
    verdict(
        a == 30.0 && b == 2.0 && bound_ok,
        format!("[30,1,1,1]/2 -> {a}, 8x[1]/4 -> {b}, 500 random cases bounded: {bound_ok} ({single_wave} single-wave)"),
    )
}

fn scheduling_fidelity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(8);
    let mut tasks = chord_tasks(dir.path(), 64);
    for t in &mut tasks {
        t.sim_duration = Some(Duration::from_millis(r.random_range(50..=500)));
    }
    let cfg = ClusterConfig::new(1, 8);
    let serial = run_serial(&tasks, &Dilated(NoOp)).unwrap();
    let par = run_parallel(&tasks, &cfg, &Dilated(NoOp)).unwrap();
    let predicted = simulate(&par.durations(), 8).makespan;
    let fidelity = (par.makespan_s - predicted).abs() / predicted;
    let observed = speedup(serial.makespan_s, par.makespan_s).unwrap();
    let ideal = scaling_bounds(&serial.durations(), 8, None).unwrap().ideal_speedup;
    verdict(
        fidelity <= 0.25 && observed >= 0.75 * ideal,
        format!(
            "makespan {:.3} s vs simulated {predicted:.3} s ({:.1}%), speedup {observed:.2} vs ideal {ideal:.2}",
            par.makespan_s,
            100.0 * fidelity
        ),
    )
}

fn resource_model() -> Verdict {
    let two_nodes = ClusterConfig::new(2, 24).with_memory(ByteSize::gib(1), ByteSize::gib(1));
    let c48 = effective_concurrency(&two_nodes).unwrap();
    let small = ClusterConfig::new(1, 4).with_memory(ByteSize::gib(1), ByteSize::gib(2));
    let c2 = effective_concurrency(&small).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut tasks = chord_tasks(dir.path(), 8);
    for t in &mut tasks {
        t.sim_duration = Some(Duration::from_millis(60));
    }
    let report = run_parallel(&tasks, &small, &Dilated(NoOp)).unwrap();
    let peak = report.peak_concurrency();
    verdict(
        c48 == 48 && c2 == 2 && peak == 2,
        format!("2x24 at 1G/1G -> {c48}; 4 cores at 1G/core with 2G tasks -> {c2}, observed peak overlap {peak}"),
    )
}

const LISTING: &str = "#!/bin/bash
#SBATCH -p gpus
#SBATCH --array=1-64
#SBATCH --cpus-per-task=1
#SBATCH -n 1
#SBATCH --ntasks-per-node=24
#SBATCH --mem-per-cpu=1G

srun time cerfit < chord $SLURM_ARRAY_TASK_ID.in \\
>& fit_$SLURM_ARRAY_TASK_ID.out
";

fn batch_script() -> Verdict {
    let cfg = ClusterConfig::new(2, 24).with_memory(ByteSize::gib(1), ByteSize::gib(1));
    let s = emit_batch_script(64, &cfg, "gpus");
    let other = emit_batch_script(64, &cfg, "debug");
    let only_partition_differs = s
        .lines()
        .zip(other.lines())
        .filter(|(a, b)| a != b)
        .all(|(a, _)| a.starts_with("#SBATCH -p "));
    verdict(
        s == LISTING && only_partition_differs,
        format!("{} bytes, identical to listing: {}", s.len(), s == LISTING),
    )
}

fn component_breakdown_check() -> Verdict {
    let input = synthetic_discharge(4, 3, 11);
    let mut timers = Vec::new();
    for block in &input.chords {
        for f in fit_chord(block, &FitOptions::default()) {
            timers.extend(f.result.map(|r| r.timers));
        }
    }
    let real = component_breakdown(&timers).unwrap();
    let parts = [real.model_eval, real.linear_solve, real.other];
    let in_range = parts.iter().all(|f| (0.0..=1.0).contains(f));
    let sums = (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
    let synthetic = FitTimers {
        model_eval_seconds: 16.0,
        linear_solve_seconds: 10.0,
        total_seconds: 100.0,
        n_model_evals: 1,
    };
    let s = component_breakdown([&synthetic]).unwrap();
    let exact = s.model_eval == 0.16 && s.linear_solve == 0.10;
    verdict(
        in_range && sums && exact,
        format!(
            "real fits model {:.3} solve {:.3} other {:.3}; synthetic {{{}, {}}}",
            real.model_eval, real.linear_solve, real.other, s.model_eval, s.linear_solve
        ),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, f64, Check); 11] = [
        ("jacobian correctness", 5.0, jacobian_correctness),
        ("noiseless recovery", 10.0, noiseless_recovery),
        ("statistical sanity", 30.0, statistical_sanity),
        ("determinism / regression", 60.0, determinism_regression),
        ("splitter round trip", 1.0, splitter_round_trip),
        ("speedup replay", 1.0, speedup_replay),
        ("simulator oracle", 5.0, simulator_oracle),
        ("scheduling fidelity", 60.0, scheduling_fidelity),
        ("resource model", 10.0, resource_model),
        ("batch script", 1.0, batch_script),
        ("component breakdown", 5.0, component_breakdown_check),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = check();
        let secs = t.elapsed().as_secs_f64();
        let pass = v.pass && secs < *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "acceptance {:>2} {:<26} {}  {} [{secs:.2} s, budget {budget} s]",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!("acceptance: {}/{} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

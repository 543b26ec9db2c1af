//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p augdyn --test acceptance -- 1 7 9`.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use augdyn::augmentation::{augment_dataset, permuted_noise_correlation, CorrelationBound};
use augdyn::baselines::{
    baseline_report, cutoffs, impossibility_params, linear_impossibility_probe, linear_view_accuracy, mean_linear,
    tensor_view_accuracy, witness_samples, LinearKind, Separability,
};
use augdyn::diagnostics::{check_ginit, GinitTolerances};
use augdyn::distribution::{generate_dataset, materialize, DistParams, SamplingMode};
use augdyn::harness::{
    cutoff_transition, dataset_seed, fit_scaling, init_seed, run_scenario, sweep, test_seed, Assertion,
    RunRecord, ScenarioName, ScenarioSpec, SweepAxis,
};
use augdyn::network::{gradient, init_weights, Model};
use augdyn::rng::{self, Domain};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn failed_names(list: &[Assertion]) -> Vec<&str> {
    list.iter().filter(|a| !a.pass).map(|a| a.name.as_str()).collect()
}

// ---------------------------------------------------------------- gradient

fn psi_ref(z: f64, q: u32) -> f64 {
    let qf = f64::from(q);
    if z > 1.0 {
        z - (qf - 1.0) / qf
    } else if z < -1.0 {
        z + (qf - 1.0) / qf
    } else {
        z.signum() * z.abs().powi(q as i32) / qf
    }
}

/// Dense reference loss on materialized patches.
fn dense_loss(weights: &[f64], channels: usize, d: usize, q: u32, patches: &[(f64, Vec<Vec<f64>>)]) -> f64 {
    let mut total = 0.0;
    for (y, rows) in patches {
        let mut f = 0.0;
        for c in 0..channels {
            let w = &weights[c * d..(c + 1) * d];
            for x in rows {
                f += psi_ref(w.iter().zip(x).map(|(a, b)| a * b).sum(), q);
            }
        }
        total += (1.0 + (-y * f).exp()).ln();
    }
    total / patches.len() as f64
}

fn criterion_1() -> Outcome {
    const H: f64 = 1e-5;
    let (d, n, channels) = (32usize, 4usize, 3usize);
    let mut worst = 0.0f64;
    let mut excluded = 0usize;
    let mut checked = 0usize;
    let mut saturated_seen = 0usize;
    for inst in 0..50u64 {
        let q = if inst % 2 == 0 { 3 } else { 5 };
        let mut r = rng::stream(inst, Domain::Misc, 0);
        let mut params = DistParams::two_patch(d, vec![0.5, 0.3, 0.2], r.random_range(0.5..2.0));
        params.num_patches = 4;
        params.alpha = r.random_range(0.0..0.4);
        params.sigma_zeta = r.random_range(0.0..0.5);
        let ds = generate_dataset(&params, n, SamplingMode::Iid, inst).expect("dataset");
        let mut model = init_weights(channels, d, q, r.random_range(0.1..0.8), inst + 100);
        // scale a few weights up so some pre-activations land on the linear branch
        for w in model.weights.iter_mut().step_by(5) {
            *w *= 4.0;
        }
        let patches: Vec<(f64, Vec<Vec<f64>>)> = ds.samples.iter().map(|s| (s.label(), materialize(s, &params))).collect();
        let analytic = gradient(&model, &ds).expect("gradient");

        let mut diff_sq = 0.0;
        let mut norm_a = 0.0;
        let mut norm_f = 0.0;
        for c in 0..channels {
            let w = model.channel(c).to_vec();
            for j in 0..d {
                let near_knot = patches.iter().flat_map(|(_, rows)| rows).any(|x| {
                    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                    (z.abs() - 1.0).abs() <= H * x[j].abs() * 1.01
                });
                if near_knot {
                    excluded += 1;
                    continue;
                }
                let idx = c * d + j;
                let bumped = |delta: f64| {
                    let mut m: Model = model.clone();
                    m.weights[idx] += delta;
                    dense_loss(&m.weights, channels, d, q, &patches)
                };
                let fd = (bumped(H) - bumped(-H)) / (2.0 * H);
                diff_sq += (analytic[idx] - fd).powi(2);
                norm_a += analytic[idx].powi(2);
                norm_f += fd.powi(2);
                checked += 1;
            }
        }
        saturated_seen += usize::from(patches.iter().flat_map(|(_, rows)| rows).any(|x| {
            (0..channels).any(|c| model.channel(c).iter().zip(x).map(|(a, b)| a * b).sum::<f64>().abs() > 1.0)
        }));
        let rel = diff_sq.sqrt() / norm_a.sqrt().max(norm_f.sqrt()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    outcome(
        worst <= 1e-6 && checked > 0,
        format!(
            "worst relative error {worst:.2e} over 50 instances ({checked} coordinates, {excluded} near a knot excluded, \
             {saturated_seen} instances reach the linear branch)"
        ),
    )
}

// ---------------------------------------------------------------- init

fn criterion_2() -> Outcome {
    let params = DistParams::two_patch(4096, vec![0.25; 4], 2.0);
    let sigma_0 = ScenarioSpec::preset(ScenarioName::Thm1).train.sigma_0;
    let seeds = 200u64;
    let (mut iid_ok, mut aug_ok) = (0usize, 0usize);
    let mut failing: BTreeMap<String, usize> = BTreeMap::new();
    for s in 0..seeds {
        let ds = generate_dataset(&params, 16, SamplingMode::Stratified, dataset_seed(s)).expect("dataset");
        let aug = augment_dataset(&ds).expect("augmentation");
        let model = init_weights(12, 4096, 3, sigma_0, init_seed(s));
        for (data, counter) in [(&ds, &mut iid_ok), (&aug, &mut aug_ok)] {
            let rep = check_ginit(&model, data, sigma_0, GinitTolerances::default());
            if rep.pass {
                *counter += 1;
            }
            for c in rep.conditions.iter().filter(|c| !c.pass) {
                *failing.entry(c.name.clone()).or_default() += 1;
            }
        }
    }
    let need = (0.95 * seeds as f64).ceil() as usize;
    outcome(
        iid_ok >= need && aug_ok >= need,
        format!("all five conditions hold on {iid_ok}/{seeds} iid and {aug_ok}/{seeds} augmented seeds (need {need}); misses {failing:?}"),
    )
}

// ---------------------------------------------------------------- thm1 / thm2

struct TheoremRuns {
    thm1: Vec<RunRecord>,
    thm2: Vec<RunRecord>,
    spec: ScenarioSpec,
}

fn theorem_runs() -> TheoremRuns {
    let spec = ScenarioSpec::preset(ScenarioName::Thm1);
    let thm1 = run_scenario(&spec, jobs()).expect("thm1 runs");
    let thm2 = run_scenario(&ScenarioSpec::preset(ScenarioName::Thm2), jobs()).expect("thm2 runs");
    TheoremRuns { thm1, thm2, spec }
}

fn criterion_3(runs: &TheoremRuns) -> Outcome {
    let spec = &runs.spec;
    let q = spec.model.q as i32;
    let noise_power = spec.dist.sigma_xi.powi(q);
    let n = spec.n as f64;
    let minor_ok = spec.dist.rho[1..].iter().all(|r| n * r < noise_power);
    let regime = minor_ok && noise_power < n;
    let mut lines = vec![format!("n*rho_k = {:.2} < sigma_xi^q = {noise_power:.3} < n = {n}: {regime}", n * spec.dist.rho[1])];
    let mut pass = regime && runs.thm1.len() == 3;
    for r in &runs.thm1 {
        let core: Vec<&Assertion> = r.assertions.iter().filter(|a| a.name != "noise_growth_envelope").collect();
        let ok = core.iter().all(|a| a.pass);
        pass &= ok;
        let err = r.arm("iid").and_then(|a| a.pooled_error(1..spec.dist.num_features));
        let total = r.arm("iid").and_then(|a| a.test.as_ref()).map(|t| t.error());
        lines.push(format!(
            "seed {}: stop {:?}, minor error {:.3}, total error {:.3}{}",
            r.seed,
            r.primary_stop_time(),
            err.unwrap_or(f64::NAN),
            total.unwrap_or(f64::NAN),
            if ok { String::new() } else { format!(", failed {:?}", core.iter().filter(|a| !a.pass).map(|a| &a.name).collect::<Vec<_>>()) }
        ));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_4(runs: &TheoremRuns) -> Outcome {
    let mut pass = runs.thm2.len() == 3;
    let mut lines = Vec::new();
    for r in &runs.thm2 {
        let core: Vec<&Assertion> = r.assertions.iter().filter(|a| a.name != "feature_growth_envelope").collect();
        let matched = runs.thm1.iter().find(|t| t.seed == r.seed).and_then(RunRecord::primary_stop_time);
        let same_iid = r.arm("iid").and_then(|a| a.stop_time) == matched;
        let ok = core.iter().all(|a| a.pass) && same_iid;
        pass &= ok;
        let aug = r.arm("aug");
        lines.push(format!(
            "seed {}: stop aug {:?} vs unaugmented {:?}, error {:.4}, {}{}",
            r.seed,
            aug.and_then(|a| a.stop_time),
            matched,
            aug.and_then(|a| a.test.as_ref()).map_or(f64::NAN, |t| t.error()),
            core.iter().find(|a| a.name == "samples_feature_learned").map_or("", |a| a.detail.as_str()),
            if ok { String::new() } else { format!(", failed {:?}", failed_names(&r.assertions)) }
        ));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_11(runs: &TheoremRuns) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for r in &runs.thm1 {
        let spec = &r.spec;
        let Some(env) = r.arm("iid").and_then(|a| a.envelope.as_ref()) else {
            pass = false;
            lines.push(format!("thm1 seed {}: no envelope", r.seed));
            continue;
        };
        let block = &env.noise_growth;
        pass &= block.checked > 0 && block.compliance >= 0.95 && spec.monitor.is_some_and(|b| b.lo == 0.1 && b.hi == 10.0);
        lines.push(format!("thm1 seed {} noise {:.4} of {}", r.seed, block.compliance, block.checked));
    }
    for r in &runs.thm2 {
        let Some(env) = r.arm("aug").and_then(|a| a.envelope.as_ref()) else {
            pass = false;
            lines.push(format!("thm2 seed {}: no envelope", r.seed));
            continue;
        };
        let block = &env.feature_growth;
        pass &= block.checked > 0 && block.compliance >= 0.95;
        lines.push(format!("thm2 seed {} feature {:.4} of {}", r.seed, block.compliance, block.checked));
    }
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------- scaling

fn criterion_5() -> Outcome {
    let base = ScenarioSpec::preset(ScenarioName::Scaling);
    let q = f64::from(base.model.q);
    let mut thm2 = base.clone();
    thm2.options.augment = true;
    let mut thm2_k = thm2.clone();
    thm2_k.n = 8;
    thm2_k.options.minor_count = None;
    let cases: [(&str, &ScenarioSpec, SweepAxis, Vec<f64>, f64, f64); 4] = [
        ("n", &base, SweepAxis::N, vec![24.0, 48.0, 96.0, 192.0], 1.0, 0.25),
        ("sigma_xi", &base, SweepAxis::SigmaXi, vec![1.4, 1.75, 2.2, 2.75], -q, 0.25 * q),
        ("sigma_0", &thm2, SweepAxis::Sigma0, vec![0.015, 0.03, 0.06, 0.12], -(q - 2.0), 0.25 * (q - 2.0)),
        ("K", &thm2_k, SweepAxis::K, vec![2.0, 4.0, 8.0, 16.0], 1.0, 0.25),
    ];
    let mut pass = true;
    let mut lines = Vec::new();
    for (label, spec, axis, grid, target, tol) in cases {
        match sweep(spec, axis, &grid, jobs()).and_then(|res| fit_scaling(&res.records, axis).map(|f| (f, res.failures.len()))) {
            Ok((fit, failures)) => {
                let ok = (fit.slope - target).abs() <= tol && fit.r_squared >= 0.9 && failures == 0;
                pass &= ok;
                lines.push(format!(
                    "{label}: slope {:.3} (target {target:+.2} +- {tol:.2}), R^2 {:.3}",
                    fit.slope, fit.r_squared
                ));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("{label}: {e}"));
            }
        }
    }
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------- linear baselines

fn criterion_6() -> Outcome {
    let spec = ScenarioSpec::preset(ScenarioName::Cutoff);
    let rho_cut = cutoffs(spec.dist.sigma_xi, spec.n, spec.dist.d, spec.model.q).rho_cut_linear;
    let grid: Vec<f64> = (0..6).map(|i| rho_cut * 10f64.powf(-1.0 + 0.4 * f64::from(i))).collect();
    let res = sweep(&spec, SweepAxis::Rho2, &grid, jobs()).expect("cutoff sweep");
    let tr = cutoff_transition(&res.records).expect("transition");
    let pts: Vec<String> = tr.points.iter().map(|(x, a)| format!("{x:.4}:{a:.3}")).collect();
    outcome(
        tr.pass(),
        format!("rho_cut {:.4}, midpoint {:?}, view-2 accuracy {}", tr.rho_cut, tr.midpoint.map(|m| (m * 1e4).round() / 1e4), pts.join(" ")),
    )
}

fn criterion_7() -> Outcome {
    let params = DistParams::two_patch(2048, vec![0.5, 0.5], 2.0);
    let mut good = 0;
    let mut worst_kkt = 0.0f64;
    let mut worst_cos = 1.0f64;
    for s in 0..20u64 {
        let ds = generate_dataset(&params, 8, SamplingMode::Stratified, dataset_seed(s)).expect("dataset");
        let rep = baseline_report(&ds, LinearKind::MaxmarginOracle, 3, 100, test_seed(s)).expect("oracle");
        let kkt = rep.oracle_kkt_residual.unwrap_or(f64::INFINITY);
        let cos = rep.oracle_cosine.unwrap_or(f64::NAN);
        worst_kkt = worst_kkt.max(kkt);
        worst_cos = worst_cos.min(cos);
        good += usize::from(kkt <= 1e-6 && cos >= 0.95);
    }
    outcome(good > 10, format!("{good}/20 seeds agree; worst cosine {worst_cos:.4}, worst KKT residual {worst_kkt:.2e}"))
}

fn criterion_8() -> Outcome {
    let params = DistParams::two_patch(4096, vec![0.5, 0.5], 16.0);
    let n = 400;
    let cut = cutoffs(params.sigma_xi, n, params.d, 3);
    let rho_2 = params.rho[1];
    let ds = generate_dataset(&params, n, SamplingMode::Stratified, dataset_seed(1)).expect("dataset");
    let lin = linear_view_accuracy(&mean_linear(&ds), &params, 1, 2000, test_seed(1)).expect("linear");
    let ten = tensor_view_accuracy(&ds, 3, 1, 2000, test_seed(1)).expect("tensor");
    let window = cut.rho_cut_linear < rho_2 && rho_2 < cut.rho_cut_tensor;
    outcome(
        window && lin >= 0.9 && ten <= 0.6,
        format!(
            "rho_cut(1) {:.3} < rho_2 {rho_2} < rho_cut(3) {:.3}; mean predictor {lin:.3}, cubic tensor {ten:.3} on view 2",
            cut.rho_cut_linear, cut.rho_cut_tensor
        ),
    )
}

fn criterion_9() -> Outcome {
    let params = impossibility_params(64, 8, vec![0.5, 0.5], 0.25, 0.1, 0.5);
    let samples = witness_samples(&params, 1).expect("witness samples");
    let rep = linear_impossibility_probe(&params, &samples, 3, 5000).expect("probe");
    let mut cells: BTreeMap<(usize, usize), (bool, bool)> = BTreeMap::new();
    for s in &samples {
        let e = cells.entry((s.p_star, s.k_star)).or_default();
        if s.feature_noise_mass() > 1.0 {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    let mixed_cells = cells.values().filter(|(hi, lo)| *hi && *lo).count();
    let infeasible = matches!(rep.separability, Separability::Infeasible { .. });
    let linear_fails = infeasible || rep.best_linear_error > 0.0;
    let pass = rep.witness_error == 0.0 && rep.witness_margin_bound > 0.0 && mixed_cells > 0 && linear_fails;
    outcome(
        pass,
        format!(
            "witness error {}, margin bound {:.4}, min witness margin {:.4}; {mixed_cells}/{} cells mix heavy and light samples; \
             separability {}, best linear error {:.4}",
            rep.witness_error,
            rep.witness_margin_bound,
            rep.witness_min_margin,
            cells.len(),
            if infeasible { "infeasible" } else { "not refuted" },
            rep.best_linear_error
        ),
    )
}

fn criterion_10() -> Outcome {
    let params = DistParams::two_patch(4096, vec![0.25; 4], 2.0);
    let bound = CorrelationBound { c: 3.0, delta: 1.0 / 200.0, level: 0.99 };
    let mut pass = true;
    let mut parts = Vec::new();
    for shift in 1..params.num_features {
        let st = permuted_noise_correlation(&params, shift, 1000, 10 + shift as u64, bound).expect("correlation");
        let limit = 3.0 * params.sigma_xi.powi(2) * ((200f64).ln() / params.d as f64).sqrt();
        pass &= st.q99 <= limit;
        parts.push(format!("T_{shift}: q99 {:.4}", st.q99));
    }
    let limit = 3.0 * params.sigma_xi.powi(2) * ((200f64).ln() / params.d as f64).sqrt();
    outcome(pass, format!("{} vs bound {limit:.4}", parts.join(", ")))
}

// ---------------------------------------------------------------- dataset-level scenarios

fn scenario_lines(name: ScenarioName) -> Outcome {
    let spec = ScenarioSpec::preset(name);
    let records = run_scenario(&spec, jobs()).expect("scenario runs");
    let mut pass = records.len() == 3;
    let mut lines = Vec::new();
    for r in &records {
        pass &= r.passed();
        lines.push(format!("seed {}: {}", r.seed, r.assertions.iter().map(|a| a.detail.as_str()).collect::<Vec<_>>().join(", ")));
    }
    outcome(pass, format!("sigma_xi {}; {}", spec.dist.sigma_xi, lines.join("; ")))
}

fn main() -> ExitCode {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut record = |k: u32, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("[{}] criterion {k:>2} ({secs:.0}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, o, secs));
    };

    for (k, f) in [
        (1u32, criterion_1 as fn() -> Outcome),
        (2, criterion_2),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ] {
        if run(k) {
            record(k, &mut || f());
        }
    }
    if run(3) || run(4) || run(11) {
        let t = Instant::now();
        let runs = theorem_runs();
        println!("(theorem scenarios trained in {:.0}s)", t.elapsed().as_secs_f64());
        for (k, f) in [(3u32, criterion_3 as fn(&TheoremRuns) -> Outcome), (4, criterion_4), (11, criterion_11)] {
            if run(k) {
                record(k, &mut || f(&runs));
            }
        }
    }
    if run(5) {
        record(5, &mut criterion_5);
    }
    if run(12) {
        record(12, &mut || scenario_lines(ScenarioName::Unbalanced));
    }
    if run(13) {
        record(13, &mut || scenario_lines(ScenarioName::AugVsIid));
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use dualenkf_cli::config::ExperimentConfig;
use dualenkf_cli::experiments::run_experiment_pendulum;
use dualenkf_cli::output::{RunDir, MANIFEST};
use dualenkf_core::closed_loop::{objective_from_costs, run_rollouts, LinearFeedback};
use dualenkf_core::diagnostics::{
    convergence_curve, dual_consistency, mean_std, poisson_check, FieldScale,
};
use dualenkf_core::dual_enkf::run_dual_enkf;
use dualenkf_core::gauss_approx::run_ga_enkf;
use dualenkf_core::models::{make_smd_model, scalar_lq, LqInstance, SmdParams, SystemModel};
use dualenkf_core::policy::{gain_known_b, gain_model_free, ExactDrift, SimulatedDrift};
use dualenkf_core::riccati::{integrate_dre, solve_are};
use dualenkf_core::{
    DMatrix, DVector, EnkfOptions, GainSchedule, HamiltonianOracle, Objective, Prop2Mode,
    SnapshotMode,
};
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn objectives() -> [Objective; 3] {
    [
        Objective::Soc,
        Objective::rsc(0.5).unwrap(),
        Objective::rsc(-0.5).unwrap(),
    ]
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let (lti, cost) = scalar_lq(1.0).unwrap();
    let lqg =
        solve_are(&Objective::Soc, &lti, &cost, 1e-12, 1e3).map_err(|e| e.to_string())?[(0, 0)];
    let leqg = solve_are(&Objective::rsc(0.5).unwrap(), &lti, &cost, 1e-12, 1e3)
        .map_err(|e| e.to_string())?[(0, 0)];
    let mut worst = 0.0f64;
    let (smd_lti, smd_cost) = make_smd_model(&SmdParams::default()).unwrap();
    for obj in objectives() {
        for (l, c) in [(&lti, &cost), (&smd_lti, &smd_cost)] {
            let sol = integrate_dre(&obj, l, c, 5.0, 1e-3).map_err(|e| e.to_string())?;
            worst = worst.max(dual_consistency(&sol));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let e1 = (lqg - 1.0).abs();
    let e2 = (leqg - 2f64.sqrt()).abs();
    check(
        e1 < 1e-8 && e2 < 1e-8 && worst < 1e-6 && elapsed < 1.0,
        format!("|P-1|={e1:.1e} |P-sqrt2|={e2:.1e} dual={worst:.1e} time={elapsed:.2}s"),
    )
}

fn ac2() -> Outcome {
    let (lti, cost) = scalar_lq(1.0).unwrap();
    let mut worst = 0.0f64;
    let mut weakest_perturbed = f64::INFINITY;
    for obj in objectives() {
        let p = solve_are(&obj, &lti, &cost, 1e-12, 1e3).map_err(|e| e.to_string())?[(0, 0)];
        let s = 1.0 / (obj.kappa() * p);
        let w = 8.0 * s.sqrt();
        let base = poisson_check(&obj, &lti, &cost, s, 1e-3, w, FieldScale::default())
            .map_err(|e| e.to_string())?;
        let pert = poisson_check(
            &obj,
            &lti,
            &cost,
            s,
            1e-3,
            w,
            FieldScale {
                interaction: 1.1,
                correction: 1.1,
            },
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(base.interaction).max(base.correction);
        weakest_perturbed = weakest_perturbed.min(pert.interaction.max(pert.correction));
    }
    check(
        worst < 1e-4 && weakest_perturbed > 1e-2,
        format!("max residual={worst:.2e} min perturbed={weakest_perturbed:.3e}"),
    )
}

fn ac3() -> Outcome {
    let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for obj in objectives() {
        let inst = LqInstance::new(lti.clone(), cost.clone(), obj).map_err(|e| e.to_string())?;
        let curve = convergence_curve(&inst, &[100, 1000, 10000], 10, 5.0, 1e-2, 0)
            .map_err(|e| e.to_string())?;
        let errs: Vec<f64> = curve.points.iter().map(|p| p.mean_relative_error).collect();
        ok &= errs[1] < 0.15 && curve.is_strictly_decreasing();
        parts.push(format!(
            "{}: {:.4}/{:.4}/{:.4}",
            obj.label(),
            errs[0],
            errs[1],
            errs[2]
        ));
    }
    check(ok, parts.join(" "))
}

/// `|mean(a) - mean(b)|` and the pooled standard error of the difference.
fn pooled(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let se = (sa * sa / a.len() as f64 + sb * sb / b.len() as f64).sqrt();
    ((ma - mb).abs(), se)
}

fn ac4() -> Outcome {
    let (lti, cost) = scalar_lq(1.0).unwrap();
    let run = |mode: Prop2Mode| -> Result<Vec<f64>, String> {
        (0..20u64)
            .into_par_iter()
            .map(|seed| {
                let options = EnkfOptions {
                    prop2: mode,
                    snapshots: SnapshotMode::None,
                    record_gains: false,
                };
                run_dual_enkf(
                    &lti,
                    &cost,
                    &Objective::Soc,
                    5.0,
                    1e-2,
                    1000,
                    seed,
                    &options,
                )
                .map(|t| t.initial().cov[(0, 0)])
                .map_err(|e| e.to_string())
            })
            .collect()
    };
    let reduced = run(Prop2Mode::Auto)?;
    let default = run(Prop2Mode::Off)?;
    let (diff, se) = pooled(&reduced, &default);
    check(
        diff < 3.0 * se,
        format!("|diff|={diff:.2e} 3SE={:.2e}", 3.0 * se),
    )
}

fn ac5() -> Outcome {
    let (lti, cost) = scalar_lq(1.0).unwrap();
    let obj = Objective::Soc;
    let (horizon, dt, x0) = (5.0, 1e-2, DVector::from_element(1, 1.0));
    let sol = integrate_dre(&obj, &lti, &cost, horizon, dt).map_err(|e| e.to_string())?;
    let riccati = GainSchedule {
        times: sol.times.clone(),
        ktilde: sol.p.clone(),
        gains: None,
    };
    let options = EnkfOptions {
        snapshots: SnapshotMode::None,
        record_gains: true,
        ..Default::default()
    };
    let enkf = run_dual_enkf(&lti, &cost, &obj, horizon, dt, 1000, 0, &options)
        .map_err(|e| e.to_string())?
        .gains
        .expect("gains recorded");
    let cost_of = |s: GainSchedule| -> Result<f64, String> {
        let policy = LinearFeedback::new(s.with_known_b(&lti, &cost).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let outs = run_rollouts(&lti, &policy, &cost, &x0, horizon, dt, 500, 1)
            .map_err(|e| e.to_string())?;
        let costs: Vec<f64> = outs.iter().map(|o| o.cost).collect();
        Ok(objective_from_costs(&costs, &obj)
            .map_err(|e| e.to_string())?
            .value)
    };
    let ratio = cost_of(enkf)? / cost_of(riccati)?;

    // Model-free gain on the spring-mass-damper, at the Riccati curvature.
    let (smd, smd_cost) = make_smd_model(&SmdParams::default()).unwrap();
    let p = solve_are(&obj, &smd, &smd_cost, 1e-10, 1e3).map_err(|e| e.to_string())?;
    let k = gain_known_b(&p, &smd, &smd_cost).map_err(|e| e.to_string())?;
    let model: Arc<dyn SystemModel> = Arc::new(smd.clone());
    let mut exact = HamiltonianOracle::from_model(
        ExactDrift::new(model.clone()),
        GainSchedule::constant(p.clone()),
        smd_cost.clone(),
        1,
    );
    let noisy_drift =
        SimulatedDrift::new(model, 1e-3, 10_000, 11, true).map_err(|e| e.to_string())?;
    let mut noisy = HamiltonianOracle::from_model(
        noisy_drift,
        GainSchedule::constant(p.clone()),
        smd_cost.clone(),
        10_000,
    );
    let mut exact_err = 0.0f64;
    let mut noisy_err = 0.0f64;
    for x in [[1.0, 0.0], [0.3, -0.7], [-2.0, 1.5]] {
        let x = DVector::from_row_slice(&x);
        let reference = &k * &x;
        let scale = reference.norm();
        let u = gain_model_free(&x, &mut exact, &smd_cost, 0.0).map_err(|e| e.to_string())?;
        exact_err = exact_err.max((u - &reference).norm() / scale);
        let u = gain_model_free(&x, &mut noisy, &smd_cost, 0.0).map_err(|e| e.to_string())?;
        noisy_err = noisy_err.max((u - &reference).norm() / scale);
    }
    check(
        ratio <= 1.10 && exact_err < 1e-12 && noisy_err < 0.05,
        format!(
            "cost ratio={ratio:.4} exact rel err={exact_err:.1e} noisy rel err={noisy_err:.1e}"
        ),
    )
}

fn ac6() -> Outcome {
    let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for obj in objectives() {
        let options = EnkfOptions {
            snapshots: SnapshotMode::None,
            ..Default::default()
        };
        let runs: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..20u64)
            .into_par_iter()
            .map(|seed| -> Result<_, String> {
                let lq = run_dual_enkf(&lti, &cost, &obj, 5.0, 1e-2, 500, seed, &options)
                    .map_err(|e| e.to_string())?;
                let ga = run_ga_enkf(&lti, &cost, &obj, 5.0, 1e-2, 500, 1000 + seed, &options)
                    .map_err(|e| e.to_string())?;
                Ok((lq.initial().cov.clone(), ga.initial().cov.clone()))
            })
            .collect::<Result<_, _>>()?;
        let mut worst = 0.0f64;
        for i in 0..2 {
            for j in i..2 {
                let a: Vec<f64> = runs.iter().map(|r| r.0[(i, j)]).collect();
                let b: Vec<f64> = runs.iter().map(|r| r.1[(i, j)]).collect();
                let (diff, se) = pooled(&a, &b);
                worst = worst.max(diff / se);
            }
        }
        ok &= worst < 3.0;
        parts.push(format!("{} max|diff|/SE={worst:.2}", obj.label()));
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig::default();
    let mut out = RunDir::create(dir.path(), cfg.output.format).map_err(|e| e.to_string())?;
    let records = run_experiment_pendulum(&cfg, &mut out).map_err(|e| e.to_string())?;
    for r in &records {
        let pass = if r.variant == "zero" {
            r.stabilized_fraction < 0.8
        } else {
            r.stabilized_fraction >= 0.8
        };
        ok &= pass;
        parts.push(format!("{} {}/{}", r.variant, r.stabilized, r.rollouts));
    }
    ok &= records.iter().any(|r| r.variant == "zero") && records.len() == 4;
    check(ok, parts.join(" "))
}

fn ac7() -> Outcome {
    let (lti, cost) = scalar_lq(1.0).unwrap();
    let obj = Objective::Soc;
    let sol = integrate_dre(&obj, &lti, &cost, 5.0, 1e-2).map_err(|e| e.to_string())?;
    let schedule = GainSchedule {
        times: sol.times,
        ktilde: sol.p,
        gains: None,
    }
    .with_known_b(&lti, &cost)
    .map_err(|e| e.to_string())?;
    let policy = LinearFeedback::new(schedule).map_err(|e| e.to_string())?;
    let x0 = DVector::from_element(1, 1.0);
    let outs =
        run_rollouts(&lti, &policy, &cost, &x0, 5.0, 1e-2, 500, 3).map_err(|e| e.to_string())?;
    let costs: Vec<f64> = outs.iter().map(|o| o.cost).collect();
    let thetas = [-2.0, -1.0, -0.5, -0.1, -1e-6, 1e-6, 0.1, 0.5, 1.0, 2.0];
    let values: Vec<f64> = thetas
        .iter()
        .map(|&t| objective_from_costs(&costs, &Objective::rsc(t).unwrap()).map(|e| e.value))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    let soc = objective_from_costs(&costs, &obj)
        .map_err(|e| e.to_string())?
        .value;
    let rel = (values[5] - soc).abs() / soc.abs();
    check(
        monotone && rel < 1e-3,
        format!("monotone={monotone} |J(1e-6)-J_soc|/J_soc={rel:.1e}"),
    )
}

fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, fs::read(&path).unwrap());
    }
    out
}

fn manifest_without_dir(path: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_file(path).unwrap();
    cfg.output.dir = PathBuf::new();
    cfg
}

fn ac8() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dualenkf");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = root.path().join("small.toml");
    fs::write(
        &config,
        "[enkf]\nparticles = 200\nhorizon = 2.0\n\n[rollout]\nrollouts = 50\nhorizon = 2.0\n\n\
         [smd]\nseeds = 2\n\n[pendulum]\nparticles = 100\nrollouts = 20\nsim_horizon = 2.0\nsaved_paths = 2\n\n\
         [diagnose]\nparticle_counts = [50, 100]\nseeds = 2\n",
    )
    .map_err(|e| e.to_string())?;
    let runs: &[(&str, &[&str])] = &[
        ("riccati", &[]),
        ("enkf", &["--snapshots", "full"]),
        ("ga-enkf", &["--system", "smd", "--model", "custom"]),
        ("rollout", &["--system", "scalar"]),
        ("diagnose", &["--check", "convergence"]),
        ("diagnose", &["--check", "poisson", "--system", "scalar"]),
        ("smd", &["--format", "json"]),
        ("pendulum", &[]),
    ];
    let mut mismatches = Vec::new();
    for (k, (cmd, extra)) in runs.iter().enumerate() {
        let first = root.path().join(format!("run{k}"));
        let second = root.path().join(format!("replay{k}"));
        let status = Command::new(bin)
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .args(*extra)
            .arg("--output")
            .arg(&first)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "{cmd} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        let replay = Command::new(bin)
            .arg(cmd)
            .arg("--config")
            .arg(first.join(MANIFEST))
            .arg("--output")
            .arg(&second)
            .output()
            .map_err(|e| e.to_string())?;
        if !replay.status.success() {
            return Err(format!(
                "{cmd} replay failed: {}",
                String::from_utf8_lossy(&replay.stderr)
            ));
        }
        let a = read_dir_files(&first);
        let b = read_dir_files(&second);
        if a.keys().ne(b.keys()) {
            mismatches.push(format!("{cmd}: file sets differ"));
            continue;
        }
        for (name, bytes) in &a {
            let same = if name == MANIFEST {
                manifest_without_dir(&first.join(name)) == manifest_without_dir(&second.join(name))
            } else {
                bytes == &b[name]
            };
            if !same {
                mismatches.push(format!("{cmd}/{name}"));
            }
        }
    }
    check(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} runs replayed byte-identically", runs.len())
        } else {
            format!("mismatch: {}", mismatches.join(", "))
        },
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC1", ac1),
        ("AC2", ac2),
        ("AC3", ac3),
        ("AC4", ac4),
        ("AC5", ac5),
        ("AC6", ac6),
        ("AC7", ac7),
        ("AC8", ac8),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{name} PASS {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{name} FAIL {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

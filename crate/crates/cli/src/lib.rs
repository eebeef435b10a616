//! Experiment harness for `dojo-core`: scenario runs, synthetic datasets and
//! system identification.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod scenarios;
pub mod sysid;

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use dojo_core::ipsolver::SolverOptions;
use dojo_core::mech::{ConeMode, Mechanism};
use dojo_core::models;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{Scenario, ScenarioConfig};
use report::{write_table, write_text, Report};
use sysid::{FitOptions, SysidParams, Triplet};

/// Exit status of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success = 0,
    AssertionFailure = 1,
    SolverFailure = 2,
    InvalidInput = 3,
}

/// Maps an error to its exit status: solver failures anywhere in the chain
/// are reported as such, everything else is an input problem.
pub fn classify(err: &anyhow::Error) -> Outcome {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dojo_core::Error>() {
            if matches!(e, dojo_core::Error::Solver { .. } | dojo_core::Error::AtStep { .. }) {
                return Outcome::SolverFailure;
            }
        }
    }
    Outcome::InvalidInput
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.scenario {
        Scenario::BoxDrop => scenarios::box_drop(cfg),
        Scenario::BoxSlide => scenarios::box_slide(cfg),
        Scenario::ChainFloat => scenarios::chain_float(cfg),
        Scenario::GradSweep => scenarios::grad_sweep(cfg),
        Scenario::Sysid => {
            let data = gen_data(cfg)?;
            let dataset = cfg.output_dir.join("dataset.csv");
            let mut report = fit(cfg, &data)?;
            report.files.insert(0, dataset);
            Ok(report)
        }
    }
}

/// Sysid solves use tighter tolerances than the defaults so that the loss is
/// smooth well below the parameter changes of the last iterations.
fn sysid_solver(cfg: &ScenarioConfig) -> SolverOptions {
    cfg.solver_or(SolverOptions {
        r_tol: 1e-8,
        kappa_tol: 1e-8,
        ..Default::default()
    })
}

/// True box for data generation: the configured mechanism file, or a box of
/// the configured mass and size with its eight vertices in contact.
pub fn sysid_truth(cfg: &ScenarioConfig) -> Result<Mechanism> {
    let s = &cfg.sysid;
    let mech = match cfg.mechanism(cfg.h)? {
        Some(m) => m,
        None => {
            let size = Vector3::from(s.size);
            models::box_on_floor(s.mass, &size, &models::box_corners(&size), s.friction, ConeMode::Nonlinear, models::gravity(), cfg.h)?
        }
    };
    SysidParams::of(&mech)?;
    Ok(mech)
}

/// Generates the synthetic toss dataset and writes `dataset.csv`.
pub fn gen_data(cfg: &ScenarioConfig) -> Result<Vec<Triplet>> {
    cfg.validate()?;
    let truth = sysid_truth(cfg)?;
    let data = sysid::make_synthetic_dataset(&truth, cfg.sysid.n_traj, cfg.steps, cfg.seed, cfg.sysid.noise_std, &sysid_solver(cfg))?;
    let path = cfg.output_dir.join("dataset.csv");
    let out = report::create(&path)?;
    sysid::write_dataset(out, &data)?;
    Ok(data)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Triplet>> {
    sysid::read_dataset(path)
}

/// Fits from a perturbed initial guess and checks recovery against the
/// configured truth.
pub fn fit(cfg: &ScenarioConfig, data: &[Triplet]) -> Result<Report> {
    let s = &cfg.sysid;
    let truth_mech = sysid_truth(cfg)?;
    let truth = SysidParams::of(&truth_mech)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let theta0 = truth.perturbed(&mut rng, s.perturbation);
    let opts = FitOptions {
        weights: s.weights,
        max_gn_iters: s.max_gn_iters,
        kappa_grad: s.kappa_grad,
        solver: sysid_solver(cfg),
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let result = sysid::sysid_fit(data, &truth_mech, &theta0, &opts)?;
    let elapsed = t0.elapsed().as_secs_f64();

    let mut report = Report::new("sysid");
    let (cf_err, vert_err) = result.params.relative_errors(&truth);
    let worst = vert_err.iter().copied().fold(0.0, f64::max);
    report.check(
        format!("friction within {:.0}%", 100.0 * s.tolerance),
        cf_err < s.tolerance,
        format!("ĉ_f = {:.6}, true {:.6}, error {:.2e}", result.params.c_f, truth.c_f, cf_err),
    );
    report.check(
        format!("all vertices within {:.0}%", 100.0 * s.tolerance),
        worst < s.tolerance,
        format!("largest relative error {worst:.2e}"),
    );
    let losses: Vec<f64> = result.trace.iter().map(|t| t.loss).collect();
    report.check("loss non-increasing", losses.windows(2).all(|w| w[1] <= w[0]), format!("{} iterations", result.trace.len() - 1));
    report.value("triplets", data.len() as f64);
    report.value("final_loss", *losses.last().unwrap());
    report.value("runtime_s", elapsed);

    let rows: Vec<Vec<f64>> = result
        .trace
        .iter()
        .map(|t| {
            vec![
                t.iteration as f64,
                t.loss,
                t.lambda,
                t.step_norm,
                t.gradient_norm,
                t.friction_curvature,
                t.min_eigenvalue,
                t.skipped as f64,
            ]
        })
        .collect();
    let trace = cfg.output_dir.join("sysid_trace.csv");
    write_table(
        &trace,
        &["iteration", "loss", "lambda", "step_norm", "gradient_norm", "friction_curvature", "min_eigenvalue", "skipped"],
        &rows,
    )?;
    let summary = cfg.output_dir.join("sysid_result.json");
    let json = serde_json::json!({
        "initial": theta0,
        "fitted": result.params,
        "truth": truth,
        "friction_error": cf_err,
        "vertex_errors": vert_err,
        "converged": result.converged,
    });
    let mut out = report::create(&summary)?;
    serde_json::to_writer_pretty(&mut out, &json)?;
    out.flush()?;
    let script = cfg.output_dir.join("sysid.gp");
    write_text(
        &script,
        &report::gnuplot_script("sysid_loss.png", "iteration", "loss", true, &[("sysid_trace.csv".into(), 2, "loss".into())]),
    )?;
    report.files.extend([trace, summary, script]);
    Ok(report)
}

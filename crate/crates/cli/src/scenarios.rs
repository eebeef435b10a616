//! Desk-scale experiments: penetration, friction-cone drift, conservation and
//! gradient smoothing.

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use dojo_core::contact::assemble_ncp;
use dojo_core::diff::implicit_step_gradients;
use dojo_core::dynamics::BodyInput;
use dojo_core::ipsolver::{self, SolverOptions};
use dojo_core::mech::{BodyConfig, ConeMode, JointKind, Mechanism};
use dojo_core::models::{self, ChainSpec};
use dojo_core::quat::UnitQuaternion;
use dojo_core::sim::{init_from_velocity, simulate, SimOptions, SimState, Trajectory};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Axis, ScenarioConfig};
use crate::report::{create, gnuplot_script, write_table, write_text, Report};

fn tolerances(tol: f64) -> SolverOptions {
    SolverOptions {
        r_tol: tol,
        kappa_tol: tol,
        ..Default::default()
    }
}

fn sim_options(solver: SolverOptions) -> SimOptions {
    SimOptions {
        solver,
        ..Default::default()
    }
}

/// File-name tag for a timestep, e.g. `0.01` → `h0.01`.
fn h_tag(h: f64) -> String {
    format!("h{h}")
}

/// Box from the configured mechanism file or the standard 0.5 m cube, with
/// every contact set to `friction` and `mode`.
pub fn box_mechanism(cfg: &ScenarioConfig, friction: Option<f64>, mode: ConeMode, h: f64) -> Result<Mechanism> {
    let base = match cfg.mechanism(h)? {
        Some(m) => m,
        None => models::unit_box(friction.unwrap_or(0.5), mode, h)?,
    };
    let mut desc = base.to_desc();
    for c in &mut desc.contacts {
        c.cone_mode = mode;
        if let Some(f) = friction {
            c.friction = f;
        }
    }
    Ok(Mechanism::from_desc(desc)?)
}

/// Lowest contact point height of a body at the origin with orientation `q`.
fn lowest_offset(mech: &Mechanism, q: &UnitQuaternion) -> f64 {
    mech.contacts
        .iter()
        .map(|c| q.rotate(&c.offset).z - c.radius)
        .fold(f64::INFINITY, f64::min)
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = create(path)?;
    traj.write_csv(&mut out)?;
    Ok(())
}

/// Drops the box from rest and records the penetration at each timestep.
pub fn box_drop(cfg: &ScenarioConfig) -> Result<Report> {
    let mut report = Report::new("box_drop");
    let p = &cfg.drop;
    let duration = cfg.steps as f64 * cfg.h;
    let opts = sim_options(cfg.solver_or(tolerances(1e-8)));
    let mut series = Vec::new();
    for &h in &p.timesteps {
        let mech = box_mechanism(cfg, Some(p.friction), cfg.cone_mode, h)?;
        let q = UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), p.tilt);
        let z = vec![BodyConfig::new(Vector3::new(0.0, 0.0, p.height - lowest_offset(&mech, &q)), q)];
        let steps = (duration / h).round().max(1.0) as usize;
        let t0 = Instant::now();
        let traj = simulate(&mech, &SimState::at_rest(z), |_, _| vec![BodyInput::default()], steps, &opts)?;
        let elapsed = t0.elapsed().as_secs_f64();

        let rows: Vec<Vec<f64>> = traj
            .diagnostics
            .iter()
            .enumerate()
            .map(|(k, d)| vec![(k + 1) as f64 * h, d.min_phi, traj.configs[k][0].p.z])
            .collect();
        let file = cfg.output_dir.join(format!("drop_{}.csv", h_tag(h)));
        write_table(&file, &["time", "min_phi", "pz"], &rows)?;
        series.push((file.file_name().unwrap().to_string_lossy().into_owned(), 2, format!("h = {h}")));
        report.files.push(file);

        let min_phi = traj.min_phi();
        let last = traj.diagnostics.last().expect("at least one step");
        let n = traj.len();
        let speed = (traj.config(n)[0].p - traj.config(n - 1)[0].p).norm() / h;
        report.check(format!("min_phi ≥ −1e-6 at h = {h}"), min_phi >= -1e-6, format!("min φ = {min_phi:.3e}"));
        report.check(
            format!("|φ| ≤ 1e-6 at rest at h = {h}"),
            last.min_phi.abs() <= 1e-6 && speed < 1e-3,
            format!("final φ = {:.3e}, speed = {speed:.3e} m/s", last.min_phi),
        );
        report.value(format!("runtime_{}", h_tag(h)), elapsed);
    }
    let script = cfg.output_dir.join("drop.gp");
    write_text(&script, &gnuplot_script("drop.png", "time [s]", "min φ [m]", false, &series))?;
    report.files.push(script);
    Ok(report)
}

/// Result of one sliding run.
#[derive(Clone, Debug)]
pub struct SlideRun {
    pub trajectory: Trajectory,
    /// Final displacement normal to the initial heading, m.
    pub lateral_drift: f64,
    /// Largest angle between friction and the reversed slip velocity over
    /// contacts slipping faster than 1e-4 m/s, rad.
    pub max_friction_angle: f64,
}

pub fn slide_run(cfg: &ScenarioConfig, mode: ConeMode, heading: f64) -> Result<SlideRun> {
    let p = &cfg.slide;
    let mech = box_mechanism(cfg, Some(p.friction), mode, cfg.h)?;
    let q = UnitQuaternion::identity();
    let z = [BodyConfig::new(Vector3::new(0.0, 0.0, -lowest_offset(&mech, &q)), q)];
    let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let st = init_from_velocity(&mech, &z, &[dir * p.speed], &[Vector3::zeros()])?;
    let opts = sim_options(cfg.solver_or(tolerances(1e-10)));
    let traj = simulate(&mech, &st, |_, _| vec![BodyInput::default()], cfg.steps, &opts)?;
    let normal = Vector3::new(-heading.sin(), heading.cos(), 0.0);
    let moved = traj.config(traj.len())[0].p - z[0].p;
    let mut worst = 0.0f64;
    for contacts in &traj.contacts {
        for c in contacts {
            if c.slip.norm() > 1e-4 && c.friction.norm() > 0.0 {
                worst = worst.max(angle(&c.friction, &-c.slip));
            }
        }
    }
    Ok(SlideRun {
        trajectory: traj,
        lateral_drift: moved.dot(&normal).abs(),
        max_friction_angle: worst,
    })
}

fn angle(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x * b.y - a.y * b.x).abs().atan2(a.dot(b))
}

/// Slides the box with the nonlinear and linearized cones from the same
/// initial velocity and compares the sideways drift.
pub fn box_slide(cfg: &ScenarioConfig) -> Result<Report> {
    let mut report = Report::new("box_slide");
    let heading = cfg.slide.heading;
    let mut summary = String::from("mode,heading,lateral_drift,max_friction_angle\n");
    let mut runs = Vec::new();
    for mode in [ConeMode::Nonlinear, ConeMode::Linearized] {
        let run = slide_run(cfg, mode, heading)?;
        let name = mode_name(mode);
        let file = cfg.output_dir.join(format!("slide_{name}.csv"));
        write_trajectory(&file, &run.trajectory)?;
        report.files.push(file);
        summary.push_str(&format!("{name},{heading:.16e},{:.16e},{:.16e}\n", run.lateral_drift, run.max_friction_angle));
        runs.push(run);
    }
    let (nl, lin) = (&runs[0], &runs[1]);
    report.check("nonlinear lateral drift < 1e-6 m", nl.lateral_drift < 1e-6, format!("{:.3e} m", nl.lateral_drift));
    report.check("linearized lateral drift > 1e-3 m", lin.lateral_drift > 1e-3, format!("{:.3e} m", lin.lateral_drift));
    report.check(
        "nonlinear friction antiparallel to slip within 1e-3 rad",
        nl.max_friction_angle < 1e-3,
        format!("{:.3e} rad", nl.max_friction_angle),
    );
    report.value("lateral_drift_nonlinear", nl.lateral_drift);
    report.value("lateral_drift_linearized", lin.lateral_drift);
    report.value("max_friction_angle_nonlinear", nl.max_friction_angle);

    if let Some(extra) = cfg.slide.extra_heading {
        for mode in [ConeMode::Nonlinear, ConeMode::Linearized] {
            let run = slide_run(cfg, mode, extra)?;
            let name = mode_name(mode);
            summary.push_str(&format!("{name},{extra:.16e},{:.16e},{:.16e}\n", run.lateral_drift, run.max_friction_angle));
            report.value(format!("lateral_drift_{name}_extra_heading"), run.lateral_drift);
        }
    }
    let file = cfg.output_dir.join("slide_summary.csv");
    write_text(&file, &summary)?;
    report.files.push(file);

    let script = cfg.output_dir.join("slide.gp");
    let gp = "set datafile separator ','\n\
              set terminal pngcairo size 900,600\n\
              set output 'slide.png'\n\
              set xlabel 'x [m]'\nset ylabel 'y [m]'\nset size ratio -1\n\
              plot 'slide_nonlinear.csv' skip 1 using 3:4 with lines title 'nonlinear cone', \\\n     \
              'slide_linearized.csv' skip 1 using 3:4 with lines title 'linearized cone'\n";
    write_text(&script, gp)?;
    report.files.push(script);
    Ok(report)
}

fn mode_name(mode: ConeMode) -> &'static str {
    match mode {
        ConeMode::Nonlinear => "nonlinear",
        ConeMode::Linearized => "linearized",
    }
}

/// Conservation measurements over the unforced part of a chain run.
#[derive(Clone, Debug)]
pub struct ChainRun {
    pub h: f64,
    pub trajectory: Trajectory,
    /// First unforced diagnostics index.
    pub coast_start: usize,
    pub linear_drift: f64,
    pub angular_drift: f64,
    /// Least-squares energy slope per step divided by the mean energy.
    pub energy_slope: f64,
    pub energy_peak_to_peak: f64,
    pub energy_mean: f64,
}

pub fn floating_chain(links: usize, radius: f64, h: f64) -> ChainSpec {
    ChainSpec {
        links,
        length: 0.5,
        mass: 1.0,
        radius,
        kind: JointKind::Revolute,
        base: None,
        contacts: Vec::new(),
        friction: 0.0,
        gravity: Vector3::zeros(),
        timestep: h,
    }
}

fn relative_drift(xs: &[Vector3<f64>]) -> f64 {
    let x0 = xs[0];
    xs.iter().map(|x| (x - x0).norm()).fold(0.0, f64::max) / x0.norm()
}

/// Slope of the least-squares line through `(k, y_k)`.
fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub fn chain_run(cfg: &ScenarioConfig, h: f64, solver: &SolverOptions) -> Result<ChainRun> {
    let p = &cfg.chain;
    let spec = floating_chain(p.links, p.radius, h);
    let mech = spec.build()?;
    let active = (p.actuation / h).round() as usize;
    let coast = (p.coast / h).round().max(2.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hi = p.input_max;
    let controller = |k: usize, _: &SimState| -> Vec<BodyInput> {
        (0..p.links)
            .map(|_| {
                if k < active {
                    let mut u = || Vector3::from_fn(|_, _| rng.random_range(0.0..=hi));
                    BodyInput { f: u(), tau: u() }
                } else {
                    BodyInput::default()
                }
            })
            .collect()
    };
    let traj = simulate(&mech, &SimState::at_rest(spec.straight()), controller, active + coast, &sim_options(solver.clone()))?;
    let d = &traj.diagnostics[active..];
    let lin: Vec<_> = d.iter().map(|x| x.linear_momentum).collect();
    let ang: Vec<_> = d.iter().map(|x| x.angular_momentum).collect();
    let e: Vec<f64> = d.iter().map(|x| x.energy).collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let (lo, up) = e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    Ok(ChainRun {
        h,
        coast_start: active,
        linear_drift: relative_drift(&lin),
        angular_drift: relative_drift(&ang),
        energy_slope: ls_slope(&e) / mean,
        energy_peak_to_peak: up - lo,
        energy_mean: mean,
        trajectory: traj,
    })
}

/// Free-floating chain: random actuation, then an unforced coast over which
/// momentum drift and energy oscillation are measured.
pub fn chain_float(cfg: &ScenarioConfig) -> Result<Report> {
    let mut report = Report::new("chain_float");
    let solver = cfg.solver_or(tolerances(1e-12));
    let mut runs = Vec::new();
    let mut series = Vec::new();
    let mut summary = Vec::new();
    for &h in &cfg.chain.timesteps {
        let run = chain_run(cfg, h, &solver)?;
        let d = &run.trajectory.diagnostics;
        let (l0, a0) = (d[run.coast_start].linear_momentum, d[run.coast_start].angular_momentum);
        let rows: Vec<Vec<f64>> = d
            .iter()
            .enumerate()
            .map(|(k, x)| {
                vec![
                    (k + 1) as f64 * h,
                    x.energy,
                    (x.linear_momentum - l0).norm() / l0.norm(),
                    (x.angular_momentum - a0).norm() / a0.norm(),
                ]
            })
            .collect();
        let file = cfg.output_dir.join(format!("chain_{}.csv", h_tag(h)));
        write_table(&file, &["time", "energy", "linear_drift", "angular_drift"], &rows)?;
        let name = file.file_name().unwrap().to_string_lossy().into_owned();
        series.push((name, 2, format!("h = {h}")));
        report.files.push(file);
        summary.push(vec![h, run.linear_drift, run.angular_drift, run.energy_slope, run.energy_peak_to_peak]);
        report.check(
            format!("momentum drift < 1e-8 at h = {h}"),
            run.linear_drift < 1e-8 && run.angular_drift < 1e-8,
            format!("linear {:.3e}, angular {:.3e}", run.linear_drift, run.angular_drift),
        );
        report.check(
            format!("energy slope < 1e-8·mean per step at h = {h}"),
            run.energy_slope.abs() < 1e-8,
            format!("{:.3e}", run.energy_slope),
        );
        runs.push(run);
    }
    runs.sort_by(|a, b| b.h.total_cmp(&a.h));
    let shrinking = runs.windows(2).all(|w| w[1].energy_peak_to_peak < w[0].energy_peak_to_peak);
    let listing: Vec<String> = runs.iter().map(|r| format!("{}: {:.3e}", r.h, r.energy_peak_to_peak)).collect();
    report.check("energy oscillation shrinks with h", shrinking, listing.join(", "));

    let file = cfg.output_dir.join("chain_summary.csv");
    write_table(&file, &["h", "linear_drift", "angular_drift", "energy_slope", "energy_peak_to_peak"], &summary)?;
    report.files.push(file);
    let script = cfg.output_dir.join("chain.gp");
    write_text(&script, &gnuplot_script("chain_energy.png", "time [s]", "energy [J]", false, &series))?;
    report.files.push(script);
    Ok(report)
}

/// `∂p₊/∂f` along `axis` for the resting box pushed with `force`, at `kappa`.
pub fn push_gradient(mech: &Mechanism, axis: Axis, force: f64, kappa: f64) -> Result<f64> {
    let q = UnitQuaternion::identity();
    let z = vec![BodyConfig::new(Vector3::new(0.0, 0.0, -lowest_offset(mech, &q)), q)];
    let a = axis.index();
    let mut f = Vector3::zeros();
    f[a] = force;
    let problem = assemble_ncp(mech, &z, &z, &[BodyInput::force(f)])?;
    let opts = SolverOptions {
        kappa_grad: Some(kappa),
        ..Default::default()
    };
    let res = ipsolver::solve(&problem, &problem.initial_point(None), &opts)?;
    if !res.converged() {
        return Err(res.to_error().into());
    }
    Ok(implicit_step_gradients(&problem, &res, kappa)?.d_u[(a, a)])
}

/// Gradient of the one-step displacement of a resting box with respect to
/// the applied force, swept across the force that breaks contact or sticking.
pub fn grad_sweep(cfg: &ScenarioConfig) -> Result<Report> {
    let mut report = Report::new("grad_sweep");
    let s = &cfg.sweep;
    let mech = box_mechanism(cfg, Some(s.friction), cfg.cone_mode, cfg.h)?;
    let m = mech.bodies[0].mass;
    let weight = m * mech.gravity.norm();
    let threshold = match s.axis {
        Axis::Z => weight,
        Axis::X => s.friction * weight,
    };
    let forces: Vec<f64> = (0..s.samples)
        .map(|k| s.force_min + (s.force_max - s.force_min) * k as f64 / (s.samples - 1) as f64)
        .collect();
    let mut columns = Vec::new();
    for &kappa in &s.kappas {
        let g = forces
            .iter()
            .map(|&f| push_gradient(&mech, s.axis, f, kappa))
            .collect::<Result<Vec<f64>>>()?;
        columns.push(g);
    }
    let free = cfg.h * cfg.h / m;
    let rows: Vec<Vec<f64>> = forces
        .iter()
        .enumerate()
        .map(|(i, &f)| std::iter::once(f).chain(columns.iter().map(|c| c[i] / free)).collect())
        .collect();
    let names: Vec<String> = s.kappas.iter().map(|k| format!("kappa_{k:e}")).collect();
    let mut header = vec!["force"];
    header.extend(names.iter().map(String::as_str));
    let file = cfg.output_dir.join("grad_sweep.csv");
    write_table(&file, &header, &rows)?;
    report.files.push(file);

    for (k, &kappa) in s.kappas.iter().enumerate() {
        let pre: Vec<f64> = forces.iter().zip(&columns[k]).filter(|(f, _)| **f < threshold).map(|(_, g)| *g).collect();
        let diffs: Vec<f64> = pre.windows(2).map(|w| w[1] - w[0]).collect();
        let monotone = diffs.iter().all(|&d| d >= 0.0) || diffs.iter().all(|&d| d <= 0.0);
        if kappa == 1e-2 {
            report.check("κ = 1e-2 gradient monotone below the threshold", monotone, format!("{} samples", pre.len()));
        } else {
            report.value(format!("monotone_kappa_{kappa:e}"), f64::from(u8::from(monotone)));
        }
        report.value(format!("gradient_at_zero_force_kappa_{kappa:e}"), columns[k][0] / free);
    }
    let series: Vec<_> = names
        .iter()
        .enumerate()
        .map(|(k, n)| ("grad_sweep.csv".to_string(), k + 2, n.replace('_', " ")))
        .collect();
    let script = cfg.output_dir.join("grad_sweep.gp");
    write_text(&script, &gnuplot_script("grad_sweep.png", "force [N]", "∂Δ/∂f · m/h²", false, &series))?;
    report.files.push(script);
    Ok(report)
}

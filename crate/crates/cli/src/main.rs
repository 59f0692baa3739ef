use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use dcmg_roa_core::certify::{certify_network, certify_point, Certificate, CertifyOptions};
use dcmg_roa_core::conic::Tolerances;
use dcmg_roa_core::netmodel::{build_dynamics, parse_network, HalfWidth, NetworkSpec};
use dcmg_roa_core::report::{
    self, check_pairing, CertifyReport, ClassCounts, InputFile, RunManifest, SimulationReport,
    SimulationRow, SynthesisReport, Timings,
};
use dcmg_roa_core::sim::{self, Classification, SimOptions};
use dcmg_roa_core::steadystate::{self, run_algorithm1};
use dcmg_roa_core::{Error, Result};

/// Transient-stability certification and stability-constrained dispatch
/// for DC microgrids with constant power loads.
#[derive(Parser, Debug)]
#[command(name = "dcmg-roa", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Network description (JSON).
    #[arg(long, global = true)]
    network: Option<PathBuf>,
    /// Operating-box half-widths: `current,voltage`, one value per state,
    /// or a JSON file holding either form.
    #[arg(long = "box", global = true)]
    halfwidth: Option<String>,
    /// Run the numerics on the per-unit model.
    #[arg(long, global = true)]
    per_unit: bool,
    /// Solver tolerance profile.
    #[arg(long, value_enum, default_value_t = TolProfile::Default, global = true)]
    tol: TolProfile,
    /// Output directory.
    #[arg(long, default_value = ".", global = true)]
    #[serde(skip)]
    out: PathBuf,
    /// Worker threads for parallel sweeps (0 = all cores).
    #[arg(long, default_value_t = 0, global = true)]
    #[serde(skip)]
    jobs: usize,
    /// Seed for sampled box vertices.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum TolProfile {
    Default,
    Tight,
    Loose,
}

impl TolProfile {
    fn tolerances(self) -> Tolerances {
        let base = Tolerances::default();
        match self {
            TolProfile::Default => base,
            TolProfile::Tight => Tolerances {
                gap: 1e-10,
                residual: 1e-10,
                psd: 1e-9,
                ..base
            },
            TolProfile::Loose => Tolerances {
                gap: 1e-6,
                residual: 1e-6,
                psd: 1e-6,
                ..base
            },
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify the operating box and write the certificate with its voltage floor.
    Certify,
    /// Floor-constrained dispatch from a certificate.
    Synthesize(SynthesizeArgs),
    /// Simulate the nonlinear dynamics from box vertices.
    Simulate(SimulateArgs),
    /// Classify a 2-D grid of initial states (two-state networks).
    Roa2d(Roa2dArgs),
    /// Re-run the pipeline while sweeping one network parameter.
    Sensitivity(SensitivityArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SynthesizeArgs {
    /// Certificate written by `certify`; without it the plain OPF is solved.
    #[arg(long)]
    certificate: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimulateArgs {
    /// Setpoints in the network's units; synthesised when omitted.
    #[arg(long, value_delimiter = ',')]
    setpoints: Option<Vec<f64>>,
    /// Certificate: enables Lyapunov tracing and falsification checks.
    #[arg(long)]
    certificate: Option<PathBuf>,
    /// Number of sampled vertices when the box has too many to enumerate.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Horizon in seconds.
    #[arg(long, default_value_t = 0.5)]
    t_max: f64,
    /// Write one CSV per trajectory.
    #[arg(long)]
    trajectories: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Roa2dArgs {
    /// Setpoint in the network's units; synthesised when omitted.
    #[arg(long)]
    setpoint: Option<f64>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 41)]
    points: usize,
    /// Grid half-extent in multiples of the box half-width.
    #[arg(long, default_value_t = 3.0)]
    window: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum Param {
    /// Magnitude of every CPL (W).
    Cpl,
    /// Shunt resistance at every CPL bus (Ω).
    Czl,
    /// Inductance of every source branch (H).
    Inductance,
    /// Capacitance at every bus (F).
    Capacitance,
    /// Current half-width of the operating box.
    BoxCurrent,
    /// Voltage half-width of the operating box.
    BoxVoltage,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SensitivityArgs {
    #[arg(long, value_enum)]
    param: Param,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Also search the simulation-based borderline setpoint (single source).
    #[arg(long)]
    borderline: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.common.jobs > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.jobs)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Certify => cmd_certify(c),
        Command::Synthesize(a) => cmd_synthesize(c, a),
        Command::Simulate(a) => cmd_simulate(c, a),
        Command::Roa2d(a) => cmd_roa2d(c, a),
        Command::Sensitivity(a) => cmd_sensitivity(c, a),
    }
}

struct Loaded {
    spec: NetworkSpec,
    inputs: Vec<InputFile>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))
}

fn load(c: &Common) -> Result<Loaded> {
    let path = c
        .network
        .as_ref()
        .ok_or_else(|| Error::Schema("--network is required".into()))?;
    let bytes = read(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Error::Schema(format!("{} is not UTF-8", path.display())))?;
    let mut spec = parse_network(&text)?;
    let mut inputs = vec![InputFile::new(path, &bytes)];
    if let Some(b) = &c.halfwidth {
        let (hw, file) = parse_box(b)?;
        spec.operating_halfwidth = hw;
        inputs.extend(file);
    }
    if c.per_unit {
        spec.per_unit = true;
    }
    spec.validate()?;
    Ok(Loaded { spec, inputs })
}

fn parse_box(arg: &str) -> Result<(HalfWidth, Option<InputFile>)> {
    let path = Path::new(arg);
    if path.is_file() {
        let bytes = read(path)?;
        let hw: HalfWidth = serde_json::from_slice(&bytes)?;
        return Ok((hw, Some(InputFile::new(path, &bytes))));
    }
    let values = arg
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Schema(format!("--box: {e}")))?;
    Ok(match values.as_slice() {
        [current, voltage] => (
            HalfWidth::Uniform {
                current: *current,
                voltage: *voltage,
            },
            None,
        ),
        _ => (HalfWidth::States(values), None),
    })
}

fn load_certificate(path: &Path, inputs: &mut Vec<InputFile>) -> Result<Certificate> {
    let bytes = read(path)?;
    inputs.push(InputFile::new(path, &bytes));
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Schema(format!("{} is not UTF-8", path.display())))?;
    Certificate::from_json(&text)
}

fn options(c: &Common) -> CertifyOptions {
    CertifyOptions {
        tol: c.tol.tolerances(),
        ..CertifyOptions::default()
    }
}

fn manifest<A: Serialize>(
    command: &str,
    c: &Common,
    args: &A,
    inputs: Vec<InputFile>,
) -> RunManifest {
    RunManifest::new(command, inputs, json!({ "common": c, "args": args }))
}

fn cmd_certify(c: &Common) -> Result<()> {
    let Loaded { spec, inputs } = load(c)?;
    let t = Instant::now();
    let (cert, ct) = certify_network(&spec, &options(c))?;
    let total = t.elapsed().as_secs_f64();

    let report = CertifyReport::new(manifest("certify", c, &json!({}), inputs), &cert);
    let mut timings = Timings::new("certify");
    timings.record("line_search", ct.line_search);
    for (k, p) in ct.probes.iter().enumerate() {
        timings.record(&format!("probe_{k:02}_beta_{:.6}", p.beta), p.seconds);
    }
    timings.record("support", ct.support);
    timings.record("floor", ct.floor);
    timings.record("total", total);
    report::write_text(&c.out, "certificate.json", &(cert.to_json()? + "\n"))?;
    report::write_json(&c.out, "certify_report.json", &report)?;
    report::write_json(&c.out, "certify_timings.json", &timings)?;

    println!(
        "beta = {:.6}{}",
        cert.beta,
        if cert.beta_capped { " (cap)" } else { "" }
    );
    for (bus, f) in cert.cpl_buses.iter().zip(cert.floor_volts()) {
        println!("floor[{bus}] = {f:.4} V");
    }
    eprintln!(
        "line search {:.3} s ({} probes), support {:.4} s, floor {:.6} s",
        ct.line_search,
        ct.probes.len(),
        ct.support,
        ct.floor
    );
    Ok(())
}

fn cmd_synthesize(c: &Common, a: &SynthesizeArgs) -> Result<()> {
    let Loaded { spec, mut inputs } = load(c)?;
    let working = spec.working()?;
    let tol = c.tol.tolerances();
    let t = Instant::now();
    let result = match &a.certificate {
        Some(path) => {
            let cert = load_certificate(path, &mut inputs)?;
            check_pairing(&spec, &cert)?;
            steadystate::solve_synthesis(&working, &cert, &tol)?
        }
        None => steadystate::solve_opf(&working, &tol)?,
    };
    let mut timings = Timings::new("synthesize");
    timings.record("synthesis", t.elapsed().as_secs_f64());

    let report = SynthesisReport::new(
        manifest("synthesize", c, a, inputs),
        spec.fingerprint(),
        result,
    );
    report::write_json(&c.out, "synthesis_report.json", &report)?;
    report::write_json(&c.out, "synthesis_timings.json", &timings)?;
    let ids = source_ids(&spec);
    for (id, u) in ids.iter().zip(&report.setpoints_volts) {
        println!("u[{id}] = {u:.4} V");
    }
    println!(
        "objective = {:.6}, relaxation {:?} (residual {:.2e})",
        report.result.objective, report.result.relaxation, report.result.relaxation_residual
    );
    Ok(())
}

fn source_ids(spec: &NetworkSpec) -> Vec<String> {
    spec.buses
        .iter()
        .filter(|b| b.has_source)
        .map(|b| b.id.clone())
        .collect()
}

/// Setpoints in working units: converted from the user's values, or
/// synthesised through the full pipeline.
fn resolve_setpoints(
    spec: &NetworkSpec,
    given: Option<Vec<f64>>,
    c: &Common,
) -> Result<DVector<f64>> {
    let working = spec.working()?;
    let scale = working.voltage_scale() / spec.voltage_scale();
    match given {
        Some(u) => {
            if u.len() != spec.n_sources() {
                return Err(Error::Dimension(format!(
                    "{} setpoints given for {} sources",
                    u.len(),
                    spec.n_sources()
                )));
            }
            Ok(DVector::from_iterator(
                u.len(),
                u.into_iter().map(|v| v / scale),
            ))
        }
        None => Ok(run_algorithm1(spec, &options(c))?.1.point.u_vector()),
    }
}

fn cmd_simulate(c: &Common, a: &SimulateArgs) -> Result<()> {
    let Loaded { spec, mut inputs } = load(c)?;
    let working = spec.working()?;
    let cert = match &a.certificate {
        Some(path) => {
            let cert = load_certificate(path, &mut inputs)?;
            check_pairing(&spec, &cert)?;
            Some(cert)
        }
        None => None,
    };
    let u = resolve_setpoints(&spec, a.setpoints.clone(), c)?;
    let t = Instant::now();
    let pt = steadystate::power_flow(&working, &u)?;
    let x_e = pt.x_vector();
    let m = build_dynamics(&working);
    let hw = working.halfwidth_vector();
    let starts = if m.n() <= 12 {
        sim::box_vertices(&x_e, &hw)
    } else {
        sim::sampled_vertices(&x_e, &hw, a.samples, c.seed)
    };
    let opts = SimOptions {
        t_max: a.t_max,
        record: a.trajectories || cert.is_some(),
        ..SimOptions::for_network(&working)
    };
    let runs = sim::sweep(&m, &m.p_load, &u, &x_e, &starts, &opts)?;
    let p = cert.as_ref().map(|c| c.p_matrix());

    let mut counts = ClassCounts::default();
    let mut rows = Vec::with_capacity(runs.len());
    for (k, tr) in runs.iter().enumerate() {
        counts.add(tr.status);
        let lyap = p
            .as_ref()
            .map(|p| sim::lyapunov_trace(tr, p, &x_e).max_forward_difference);
        rows.push(SimulationRow::new(k, tr, lyap));
        if a.trajectories {
            report::write_text(
                &c.out,
                &format!("trajectory_{k:04}.csv"),
                &sim::trajectory_csv(tr),
            )?;
        }
    }
    let mut timings = Timings::new("simulate");
    timings.record("sweep", t.elapsed().as_secs_f64());

    let mut csv = String::from("index,status,final_distance,steps,lyapunov_increase\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.9e},{},{}\n",
            r.index,
            status_name(r.status),
            r.final_distance,
            r.steps,
            r.lyapunov_increase
                .map_or(String::new(), |v| format!("{v:.6e}"))
        ));
    }
    let report = SimulationReport {
        manifest: manifest("simulate", c, a, inputs),
        network_fingerprint: spec.fingerprint(),
        setpoints: u.iter().copied().collect(),
        counts,
        rows,
    };
    report::write_text(&c.out, "simulation.csv", &csv)?;
    report::write_json(&c.out, "simulation_report.json", &report)?;
    report::write_json(&c.out, "simulation_timings.json", &timings)?;
    println!(
        "{} runs: {} converged, {} diverged, {} undecided",
        counts.total(),
        counts.converged,
        counts.diverged,
        counts.undecided
    );

    // a certified equilibrium must attract the whole box with decreasing V
    if let Some(cert) = &cert {
        if certify_point(cert, &pt.v_load_vector()) {
            let worst = report
                .rows
                .iter()
                .filter_map(|r| r.lyapunov_increase)
                .fold(f64::NEG_INFINITY, f64::max);
            if counts.converged != counts.total() || worst > 1e-9 {
                return Err(Error::Falsified(format!(
                    "certified equilibrium: {} of {} runs failed to converge, max Lyapunov increase {worst:.3e}",
                    counts.total() - counts.converged,
                    counts.total()
                )));
            }
        } else {
            eprintln!(
                "note: setpoints violate the certificate's voltage floor; no falsification check"
            );
        }
    }
    Ok(())
}

fn status_name(c: Classification) -> &'static str {
    match c {
        Classification::Converged => "converged",
        Classification::Diverged => "diverged",
        Classification::Undecided => "undecided",
    }
}

fn cmd_roa2d(c: &Common, a: &Roa2dArgs) -> Result<()> {
    let Loaded { spec, inputs } = load(c)?;
    let working = spec.working()?;
    let u = resolve_setpoints(&spec, a.setpoint.map(|s| vec![s]), c)?;
    let t = Instant::now();
    let pt = steadystate::power_flow(&working, &u)?;
    let x_e = pt.x_vector();
    let m = build_dynamics(&working);
    let opts = SimOptions {
        record: false,
        ..SimOptions::for_network(&working)
    };
    let grid = sim::roa_grid_2d(
        &m,
        &m.p_load,
        &u,
        &x_e,
        &working.halfwidth_vector(),
        a.points,
        a.window,
        &opts,
    )?;
    let mut timings = Timings::new("roa2d");
    timings.record("grid", t.elapsed().as_secs_f64());

    let mut boundary = String::from("x0,x1\n");
    for [x0, x1] in &grid.boundary {
        boundary.push_str(&format!("{x0:.9e},{x1:.9e}\n"));
    }
    let [conv, div, und] = grid.counts();
    let summary = json!({
        "manifest": manifest("roa2d", c, a, inputs),
        "network_fingerprint": spec.fingerprint(),
        "setpoint": u[0],
        "equilibrium": x_e.iter().copied().collect::<Vec<_>>(),
        "counts": { "converged": conv, "diverged": div, "undecided": und },
        "box_inside": grid.box_inside,
    });
    report::write_text(&c.out, "roa_grid.csv", &sim::grid_csv(&grid))?;
    report::write_text(&c.out, "roa_boundary.csv", &boundary)?;
    report::write_json(&c.out, "roa_report.json", &summary)?;
    report::write_json(&c.out, "roa_timings.json", &timings)?;
    println!(
        "{conv} converged, {div} diverged, {und} undecided; box inside region: {}",
        grid.box_inside
    );
    Ok(())
}

fn apply_param(spec: &NetworkSpec, param: Param, value: f64) -> Result<NetworkSpec> {
    let mut s = spec.clone();
    match param {
        Param::Cpl => s
            .buses
            .iter_mut()
            .filter(|b| b.has_cpl)
            .for_each(|b| b.cpl_power = Some(-value.abs())),
        Param::Czl => s
            .buses
            .iter_mut()
            .filter(|b| b.has_cpl)
            .for_each(|b| b.shunt_resistance = Some(value)),
        Param::Inductance => s
            .buses
            .iter_mut()
            .filter(|b| b.has_source)
            .for_each(|b| b.source_inductance = Some(value)),
        Param::Capacitance => s.buses.iter_mut().for_each(|b| b.capacitance = value),
        Param::BoxCurrent | Param::BoxVoltage => {
            let HalfWidth::Uniform { current, voltage } = &mut s.operating_halfwidth else {
                return Err(Error::Schema(
                    "box sweeps need a per-class (current, voltage) half-width".into(),
                ));
            };
            if param == Param::BoxCurrent {
                *current = value;
            } else {
                *voltage = value;
            }
        }
    }
    s.validate()?;
    Ok(s)
}

#[derive(Serialize)]
struct SensitivityRow {
    value: f64,
    status: String,
    beta: Option<f64>,
    floor_volts: Vec<f64>,
    setpoints_volts: Vec<f64>,
    objective: Option<f64>,
    borderline_volts: Option<f64>,
    relative_difference: Option<f64>,
}

fn sensitivity_row(spec: &NetworkSpec, value: f64, c: &Common, borderline: bool) -> SensitivityRow {
    let mut row = SensitivityRow {
        value,
        status: "ok".into(),
        beta: None,
        floor_volts: vec![],
        setpoints_volts: vec![],
        objective: None,
        borderline_volts: None,
        relative_difference: None,
    };
    match run_algorithm1(spec, &options(c)) {
        Ok((cert, synth, _)) => {
            row.beta = Some(cert.beta);
            row.floor_volts = cert.floor_volts();
            row.setpoints_volts = synth
                .point
                .u
                .iter()
                .map(|u| u * synth.voltage_scale)
                .collect();
            row.objective = Some(synth.objective);
        }
        Err(e) => row.status = e.to_string(),
    }
    if borderline {
        let found = spec.working().and_then(|w| {
            let scale = w.voltage_scale();
            sim::borderline_design(&w, None, 0.01 / scale, &SimOptions::for_network(&w))
                .map(|b| b.u_min * scale)
        });
        match found {
            Ok(ub) => {
                row.borderline_volts = Some(ub);
                row.relative_difference = row
                    .setpoints_volts
                    .first()
                    .and_then(|&u| sim::relative_difference(u, ub).ok());
            }
            Err(e) if row.status == "ok" => row.status = format!("borderline: {e}"),
            Err(_) => {}
        }
    }
    row
}

fn cmd_sensitivity(c: &Common, a: &SensitivityArgs) -> Result<()> {
    let Loaded { spec, inputs } = load(c)?;
    let specs = a
        .values
        .iter()
        .map(|&v| apply_param(&spec, a.param, v))
        .collect::<Result<Vec<_>>>()?;
    let t = Instant::now();
    let rows: Vec<SensitivityRow> = specs
        .par_iter()
        .zip(&a.values)
        .map(|(s, &v)| sensitivity_row(s, v, c, a.borderline))
        .collect();
    let mut timings = Timings::new("sensitivity");
    timings.record("sweep", t.elapsed().as_secs_f64());

    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.6}"))
            .collect::<Vec<_>>()
            .join(";")
    };
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    let mut csv = String::from(
        "value,status,beta,min_floor_volts,setpoints_volts,objective,borderline_volts,relative_difference\n",
    );
    for r in &rows {
        let min_floor = r.floor_volts.iter().copied().reduce(f64::min);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.value,
            if r.status == "ok" { "ok" } else { "failed" },
            opt(r.beta),
            opt(min_floor),
            join(&r.setpoints_volts),
            opt(r.objective),
            opt(r.borderline_volts),
            opt(r.relative_difference),
        ));
        println!(
            "{:?} = {}: u = [{}] V{}",
            a.param,
            r.value,
            join(&r.setpoints_volts),
            if r.status == "ok" {
                String::new()
            } else {
                format!(" ({})", r.status)
            }
        );
    }
    let report = json!({
        "manifest": manifest("sensitivity", c, a, inputs),
        "network_fingerprint": spec.fingerprint(),
        "rows": rows,
    });
    report::write_text(&c.out, "sensitivity.csv", &csv)?;
    report::write_json(&c.out, "sensitivity_report.json", &report)?;
    report::write_json(&c.out, "sensitivity_timings.json", &timings)?;
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use memctrl::config::{Config, ConfigError};
use memctrl::device::{quasi_static_sweep_with, DeviceState};
use memctrl::grid::Grid;
use memctrl::io::{matrix_csv, parse_matrix, parse_vector, provenance_header, CsvError};
use memctrl::network::{memristors, vmm, CellDevice};
use memctrl::programming::{map_weights, program_array, CellOutcome};
use memctrl::transient::{cell_pulse_schedule, read_pulse_schedule, run_transient, CellPulse, StimulusSchedule, WriteMode};

const TOOL: &str = "memctrl";

/// Regulated 2T1R memristor crossbar simulator.
#[derive(Debug, Parser)]
#[command(name = TOOL, version)]
struct Cli {
    /// Configuration files, applied in order.
    #[arg(long = "config", global = true)]
    configs: Vec<PathBuf>,
    /// `key=value` overrides applied after every file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Replace existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Triangular voltage sweep of one device: writes sweep.csv.
    Sweep(SweepArgs),
    /// Read, RESET, read, SET, read on one cell: writes pulse.csv.
    Pulse(PulseArgs),
    /// Program a weight matrix: writes program_report.csv and states.csv.
    Program(ProgramArgs),
    /// Multiply an input vector with the array: writes vmm.csv.
    Vmm(VmmArgs),
    /// Periodic reads of the whole array: writes transient.csv.
    Transient(TransientArgs),
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    rate: Option<f64>,
    /// Positive peak; also the negative peak unless --vmin is given.
    #[arg(long)]
    vmax: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    vmin: Option<f64>,
}

#[derive(Debug, Args)]
struct PulseArgs {
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, default_value_t = 0)]
    col: usize,
    /// Same timing with every drive at zero.
    #[arg(long)]
    zero: bool,
    #[arg(long)]
    dt_max: Option<f64>,
    /// Pulse width; each pulse sits in a period twice as long.
    #[arg(long, default_value_t = 1e-3)]
    width: f64,
}

#[derive(Debug, Args)]
struct ProgramArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Starting `n_disc` matrix; all cells HRS when omitted.
    #[arg(long)]
    states: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VmmArgs {
    /// `n_disc` matrix.
    #[arg(long, conflicts_with = "resistances", required_unless_present = "resistances")]
    states: Option<PathBuf>,
    /// Fixed resistor matrix in ohms, in place of memristors.
    #[arg(long)]
    resistances: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct TransientArgs {
    #[arg(long)]
    states: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    reads: usize,
    #[arg(long, default_value_t = 1e-3)]
    width: f64,
    #[arg(long, default_value_t = 2e-3)]
    period: f64,
    #[arg(long)]
    dt_max: Option<f64>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    for path in &cli.configs {
        cfg.apply_text(&read_text(path)?, &path.display().to_string())?;
    }
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    Ok(cfg)
}

/// Output sink that refuses to replace files unless forced.
struct Outputs<'a> {
    dir: &'a Path,
    force: bool,
    header: String,
}

impl Outputs<'_> {
    fn check(&self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            return Err(CliError::Usage(format!("{} exists; pass --force to replace it", path.display())));
        }
        Ok(path)
    }

    fn write(&self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.check(name)?;
        fs::create_dir_all(self.dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", self.dir.display())))?;
        fs::write(&path, format!("{}{body}", self.header))
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn load_states(path: Option<&Path>, cfg: &Config) -> Result<Grid<DeviceState>, CliError> {
    match path {
        Some(p) => {
            let m = parse_matrix(&read_text(p)?, &p.display().to_string())?;
            let states = m.map(|&n| DeviceState::new(n));
            if let Some(((r, c), s)) = states.iter().find(|(_, s)| !s.is_valid(&cfg.device)) {
                return Err(CliError::Usage(format!("state ({r}, {c}) = {} outside the model bounds", s.n_disc)));
            }
            Ok(states)
        }
        None => Ok(Grid::filled(cfg.array.n_rows, cfg.array.n_cols, DeviceState::hrs(&cfg.device))),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli)?;
    let command_name = match &cli.command {
        Command::Sweep(_) => "sweep",
        Command::Pulse(_) => "pulse",
        Command::Program(_) => "program",
        Command::Vmm(_) => "vmm",
        Command::Transient(_) => "transient",
    };
    // Command-line arguments fold into the configuration so that they are
    // covered by the hash.
    match &cli.command {
        Command::Sweep(a) => {
            if let Some(r) = a.rate {
                cfg.sweep.rate = r;
            }
            if let Some(v) = a.vmax {
                cfg.sweep.v_pos = v;
                cfg.sweep.v_neg = -v;
            }
            if let Some(v) = a.vmin {
                cfg.sweep.v_neg = v;
            }
        }
        Command::Pulse(PulseArgs { dt_max: Some(d), .. }) | Command::Transient(TransientArgs { dt_max: Some(d), .. }) => {
            cfg.transient.dt_max = *d;
        }
        _ => {}
    }
    cfg.validate()?;
    let extra = vec![("command", command_name.to_string())];
    let out = Outputs {
        dir: &cli.out,
        force: cli.force,
        header: provenance_header(TOOL, env!("CARGO_PKG_VERSION"), &cfg.canonical_text(), &extra),
    };
    match &cli.command {
        Command::Sweep(_) => cmd_sweep(&cfg, &out),
        Command::Pulse(a) => cmd_pulse(&cfg, a, &out),
        Command::Program(a) => cmd_program(&mut cfg, a, &out),
        Command::Vmm(a) => cmd_vmm(&mut cfg, a, &out),
        Command::Transient(a) => cmd_transient(&cfg, a, &out),
    }
}

fn cmd_sweep(cfg: &Config, out: &Outputs) -> Result<(), CliError> {
    out.check("sweep.csv")?;
    let p = &cfg.device;
    let s = &cfg.sweep;
    let trace = quasi_static_sweep_with(0.0, &[s.v_neg, s.v_pos, 0.0], s.rate, p, DeviceState::hrs(p), &cfg.sweep_options())
        .map_err(numerical)?;
    let mut body = String::from("v,i,n_disc\n");
    for pt in &trace {
        body.push_str(&format!("{:e},{:e},{:e}\n", pt.v, pt.i, pt.state.n_disc));
    }
    out.write("sweep.csv", &body)
}

fn cmd_pulse(cfg: &Config, a: &PulseArgs, out: &Outputs) -> Result<(), CliError> {
    out.check("pulse.csv")?;
    let v_read = cfg.program.v_read;
    let seq = [
        CellPulse::Read(v_read),
        CellPulse::Write(WriteMode::VoltageReset, cfg.program.reset_amplitude),
        CellPulse::Read(v_read),
        CellPulse::Write(WriteMode::VoltageSet, cfg.program.set_amplitude),
        CellPulse::Read(v_read),
    ];
    let period = 2.0 * a.width;
    let schedule = if a.zero {
        StimulusSchedule::idle(seq.len() as f64 * period)
    } else {
        cell_pulse_schedule(&cfg.array, a.row, a.col, &seq, a.width, period, &cfg.frontend)
            .map_err(|e| CliError::Usage(e.to_string()))?
    };
    let start = Grid::filled(cfg.array.n_rows, cfg.array.n_cols, DeviceState::lrs(&cfg.device));
    let rec = run_transient(&schedule, &cfg.array, &start, &cfg.device, &cfg.transient).map_err(numerical)?;
    let n = rec.final_states[(a.row, a.col)].n_disc;
    println!("final n_disc at ({}, {}): {n:e}", a.row, a.col);
    out.write("pulse.csv", &rec.to_csv())
}

fn cmd_program(cfg: &mut Config, a: &ProgramArgs, out: &Outputs) -> Result<(), CliError> {
    out.check("program_report.csv")?;
    out.check("states.csv")?;
    let w = parse_matrix(&read_text(&a.weights)?, &a.weights.display().to_string())?;
    cfg.array.n_rows = w.rows();
    cfg.array.n_cols = w.cols();
    let map = map_weights(&w, &cfg.weight_map(), &cfg.frontend.dac, cfg.program.v_read).map_err(|e| CliError::Usage(e.to_string()))?;
    let states = load_states(a.states.as_deref(), cfg)?;
    if states.dims() != w.dims() {
        return Err(CliError::Usage(format!("states are {:?} but weights are {:?}", states.dims(), w.dims())));
    }
    let targets: Vec<_> = map.targets.values().copied().collect();
    let (final_states, report) = program_array(&targets, &states, &cfg.program_context()).map_err(numerical)?;
    for cell in &report.cells {
        match cell {
            CellOutcome::Done(r) => println!(
                "cell ({}, {}): target {:.4e} S, read {:.4e} S, {} pulses, {}",
                r.target.row,
                r.target.col,
                r.target.g_target,
                r.g_read,
                r.pulses(),
                if r.success { "ok" } else { "FAILED" }
            ),
            CellOutcome::Rejected { row, col, reason } => println!("cell ({row}, {col}): rejected, {reason}"),
        }
    }
    out.write("program_report.csv", &report.to_csv())?;
    out.write("states.csv", &matrix_csv(&final_states.map(|s| s.n_disc)))?;
    if report.all_succeeded() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} of {} cells missed their band", report.failures(), report.cells.len())))
    }
}

fn cmd_vmm(cfg: &mut Config, a: &VmmArgs, out: &Outputs) -> Result<(), CliError> {
    out.check("vmm.csv")?;
    let devices: Grid<CellDevice> = match (&a.states, &a.resistances) {
        (Some(p), _) => memristors(&load_states(Some(p), cfg)?),
        (None, Some(p)) => {
            let m = parse_matrix(&read_text(p)?, &p.display().to_string())?;
            if let Some(((r, c), x)) = m.iter().find(|(_, x)| x.is_nan() || **x <= 0.0) {
                return Err(CliError::Usage(format!("resistance ({r}, {c}) = {x} must be positive")));
            }
            m.map(|&r| CellDevice::Linear(r))
        }
        (None, None) => unreachable!("clap requires one of the device sources"),
    };
    cfg.array.n_rows = devices.rows();
    cfg.array.n_cols = devices.cols();
    let v = parse_vector(&read_text(&a.input)?, &a.input.display().to_string())?;
    let res = vmm(&v, &devices, &cfg.array, &cfg.frontend.adc, &cfg.device).map_err(|e| match e {
        memctrl::network::NetworkError::Dimension(_) | memctrl::network::NetworkError::ReadVoltageOutOfRange(_) => {
            CliError::Usage(e.to_string())
        }
        other => numerical(other),
    })?;
    let mut body = String::from("col,current,code,saturated\n");
    for (k, i) in res.currents.iter().enumerate() {
        body.push_str(&format!("{k},{i:e},{},{}\n", res.codes[k], res.saturated[k]));
        println!("column {k}: {:.4} uA, code {}", i * 1e6, res.codes[k]);
    }
    out.write("vmm.csv", &body)
}

fn cmd_transient(cfg: &Config, a: &TransientArgs, out: &Outputs) -> Result<(), CliError> {
    out.check("transient.csv")?;
    let states = load_states(a.states.as_deref(), cfg)?;
    let mut array = cfg.array;
    (array.n_rows, array.n_cols) = states.dims();
    if !(a.width > 0.0 && a.width <= a.period) {
        return Err(CliError::Usage("need 0 < width <= period".into()));
    }
    let schedule = read_pulse_schedule(&array, cfg.program.v_read, a.width, a.period, a.reads);
    let rec = run_transient(&schedule, &array, &states, &cfg.device, &cfg.transient).map_err(numerical)?;
    out.write("transient.csv", &rec.to_csv())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Closed-loop conductance programming.
//!
//! A verify loop reads the selected cell through its column, compares with
//! the target band and fires one write pulse per iteration. Two pulse
//! policies are available. `WidthHalving` uses the fixed SET/RESET
//! amplitudes and halves the width whenever the error changes sign.
//! `ModelGuided` inverts the compact model: it estimates the present state
//! from the read, plans the smallest DAC code that reaches a bounded step
//! toward the target within one pulse, and calibrates a per-direction voltage
//! scale after every pulse so that model mismatch does not accumulate.

use thiserror::Error;

use crate::device::{
    conductance_readout, integrate_step_with, integrate_until, DeviceError, DeviceParams, DeviceState,
    IntegratorOptions,
};
use crate::frontend::{adc_read, dac_voltage, AdcSpec, DacSpec, FrontendError, FrontendSpecs};
use crate::grid::Grid;
use crate::network::{
    build_network, memristors, solve_operating_point, ArrayConfig, CellMode, ColumnTermination, DriveSet,
    NetworkError, RowDrive, Sense,
};
use crate::transient::{
    apply_write_pulse, resolve_write, run_transient, write_schedule, TransientError, TransientOptions, WriteMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("band around target {g_target:e} S misses the reachable range [{g_min:e}, {g_max:e}] S")]
    Unreachable { g_target: f64, g_min: f64, g_max: f64 },
    #[error("tolerance {tolerance} is below the resolution floor {floor}")]
    ToleranceTooTight { tolerance: f64, floor: f64 },
    #[error("cell ({row}, {col}) outside the array")]
    CellOutOfRange { row: usize, col: usize },
    #[error("cell ({row}, {col}) is not in HRS (n_disc = {n_disc})")]
    PreStateNotHRS { row: usize, col: usize, n_disc: f64 },
    #[error("weight {w} at ({row}, {col}) outside [{w_min}, {w_max}]")]
    WeightOutOfRange { row: usize, col: usize, w: f64, w_min: f64, w_max: f64 },
    #[error("invalid weight map: {0}")]
    InvalidMap(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Transient(#[from] TransientError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProgramMode {
    Voltage,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgramTarget {
    pub row: usize,
    pub col: usize,
    /// Conductance at the read voltage, siemens.
    pub g_target: f64,
    /// Relative half-width of the acceptance band.
    pub tolerance: f64,
    pub mode: ProgramMode,
    pub max_pulses: usize,
}

impl ProgramTarget {
    pub fn new(row: usize, col: usize, g_target: f64) -> Self {
        Self { row, col, g_target, tolerance: 0.05, mode: ProgramMode::Voltage, max_pulses: 32 }
    }

    pub fn band(&self) -> (f64, f64) {
        (self.g_target * (1.0 - self.tolerance), self.g_target * (1.0 + self.tolerance))
    }

    pub fn contains(&self, g: f64) -> bool {
        let (lo, hi) = self.band();
        g >= lo && g <= hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum StepPolicy {
    #[default]
    ModelGuided,
    WidthHalving,
}

/// How the verify read is digitized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ReadPath {
    /// Column current as solved.
    #[default]
    Analog,
    /// Column current through the ADC. A read counts as in band only when
    /// the whole quantization interval lies inside the band.
    Adc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgramOptions {
    pub policy: StepPolicy,
    pub read_path: ReadPath,
    pub v_read: f64,
    /// Longest write pulse; also the starting width of `WidthHalving`.
    pub pulse_width: f64,
    /// Fixed SET amplitude, OE-referred volts.
    pub set_amplitude: f64,
    /// Fixed RESET amplitude request before the regulator clamp.
    pub reset_amplitude: f64,
    /// Largest planned move of `ln n_disc` per pulse under `ModelGuided`.
    pub step_cap: f64,
    /// First current level of the current-mode ladder, and its growth per pulse.
    pub current_start: f64,
    pub current_growth: f64,
    /// Time-to-LRS fallback threshold for current mode, as a multiple of G(HRS).
    pub g_switch_factor: f64,
}

impl Default for ProgramOptions {
    fn default() -> Self {
        Self {
            policy: StepPolicy::ModelGuided,
            read_path: ReadPath::Analog,
            v_read: 0.25,
            pulse_width: 1e-3,
            set_amplitude: 0.75,
            reset_amplitude: 1.5,
            step_cap: 1.0,
            current_start: 3.5e-6,
            current_growth: 1.25,
            g_switch_factor: 1.5,
        }
    }
}

impl ProgramOptions {
    pub fn validate(&self) -> Result<(), ProgramError> {
        let ok = self.v_read > 0.0
            && self.v_read <= crate::device::V_READ_MAX
            && self.pulse_width > 0.0
            && self.set_amplitude > 0.0
            && self.reset_amplitude > 0.0
            && self.step_cap > 0.0
            && self.current_start > 0.0
            && self.current_growth > 1.0
            && self.g_switch_factor > 1.0;
        if ok {
            Ok(())
        } else {
            Err(ProgramError::InvalidOptions(format!("{self:?}")))
        }
    }
}

/// Everything a programming run needs besides the states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProgramContext {
    pub params: DeviceParams,
    pub frontend: FrontendSpecs,
    pub array: ArrayConfig,
    pub transient: TransientOptions,
    pub options: ProgramOptions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseRecord {
    pub index: usize,
    pub mode: WriteMode,
    pub dac_code: u32,
    /// Regulated volts, or amperes in current mode.
    pub level: f64,
    pub width: f64,
    /// Verify read after the pulse.
    pub g_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramReport {
    pub target: ProgramTarget,
    pub success: bool,
    pub g_initial: f64,
    /// Last verify read.
    pub g_read: f64,
    /// Independent device-level readout of the final state.
    pub g_check: f64,
    pub trajectory: Vec<PulseRecord>,
}

impl ProgramReport {
    pub fn pulses(&self) -> usize {
        self.trajectory.len()
    }

    /// `(g_check - g_target) / g_target`.
    pub fn residual(&self) -> f64 {
        (self.g_check - self.target.g_target) / self.target.g_target
    }
}

/// One verify read of a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyRead {
    /// Best estimate of G.
    pub g: f64,
    /// Interval G certainly lies in, given the read path.
    pub g_lo: f64,
    pub g_hi: f64,
}

/// Reachable conductance range at `v_read`.
pub fn g_range(p: &DeviceParams, v_read: f64) -> Result<(f64, f64), DeviceError> {
    Ok((
        conductance_readout(DeviceState::new(p.n_disc_min), p, v_read)?,
        conductance_readout(DeviceState::new(p.n_disc_max), p, v_read)?,
    ))
}

/// State whose readout equals `g`, by bisection in `ln n_disc`.
pub fn invert_conductance(g: f64, p: &DeviceParams, v_read: f64) -> Result<f64, DeviceError> {
    let (mut lo, mut hi) = (p.n_disc_min.ln(), p.n_disc_max.ln());
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if conductance_readout(DeviceState::new(mid.exp()), p, v_read)? < g {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Reads one cell in the array: the cell on its row and column lines, the row
/// regulated to `v_read` across the cell, every other cell grounded.
pub fn read_cell(
    row: usize,
    col: usize,
    states: &Grid<DeviceState>,
    ctx: &ProgramContext,
) -> Result<VerifyRead, ProgramError> {
    let cfg = &ctx.array;
    let v_read = ctx.options.v_read;
    let mut select = Grid::filled(cfg.n_rows, cfg.n_cols, CellMode::GroundedBoth);
    select[(row, col)] = CellMode::Read;
    let mut drives = DriveSet::idle(cfg);
    drives.rows[row] = RowDrive::Voltage { v: v_read, i_limit: f64::INFINITY, sense: Sense::Cell(col) };
    drives.cols[col] = ColumnTermination::Adc;
    let net = build_network(cfg, &select, &drives, &memristors(states))?;
    let op = solve_operating_point(&net, &ctx.params)?;
    let i = op.column_currents[col].max(0.0);
    Ok(match ctx.options.read_path {
        ReadPath::Analog => VerifyRead { g: i / v_read, g_lo: i / v_read, g_hi: i / v_read },
        ReadPath::Adc => quantized_read(i, &ctx.frontend.adc, v_read)?,
    })
}

fn quantized_read(i: f64, adc: &AdcSpec, v_read: f64) -> Result<VerifyRead, FrontendError> {
    if i > adc.i_full_scale {
        return Ok(VerifyRead { g: adc.i_full_scale / v_read, g_lo: adc.i_full_scale / v_read, g_hi: f64::INFINITY });
    }
    let (_, iq) = adc_read(i, adc)?;
    let lsb = adc.lsb();
    Ok(VerifyRead { g: (iq + 0.5 * lsb) / v_read, g_lo: iq / v_read, g_hi: (iq + lsb) / v_read })
}

/// Relative read error implied by the DAC step at the read voltage.
pub fn dac_resolution_floor(dac: &DacSpec, v_read: f64) -> f64 {
    0.5 * dac.lsb / v_read
}

fn check_target(t: &ProgramTarget, ctx: &ProgramContext) -> Result<(), ProgramError> {
    let cfg = &ctx.array;
    if t.row >= cfg.n_rows || t.col >= cfg.n_cols {
        return Err(ProgramError::CellOutOfRange { row: t.row, col: t.col });
    }
    let (g_min, g_max) = g_range(&ctx.params, ctx.options.v_read)?;
    // Reachable when some conductance inside the band is attainable.
    let (lo, hi) = t.band();
    if !(t.g_target > 0.0 && hi >= g_min && lo <= g_max) {
        return Err(ProgramError::Unreachable { g_target: t.g_target, g_min, g_max });
    }
    let floor = dac_resolution_floor(&ctx.frontend.dac, ctx.options.v_read);
    if !(t.tolerance > floor) {
        return Err(ProgramError::ToleranceTooTight { tolerance: t.tolerance, floor });
    }
    Ok(())
}

/// Per-direction voltage scale learned from observed pulses.
#[derive(Debug, Clone, Copy)]
struct Calibration {
    sigma: [f64; 2],
}

struct Plan {
    mode: WriteMode,
    amplitude: f64,
    width: f64,
}

/// Device voltage the plan assumes for a regulated amplitude.
fn planned_voltage(mode: WriteMode, amplitude: f64) -> f64 {
    match mode {
        WriteMode::VoltageSet => -amplitude,
        _ => amplitude,
    }
}

fn dir_index(mode: WriteMode) -> usize {
    usize::from(mode == WriteMode::VoltageSet)
}

/// Smallest DAC code that moves the modelled state from `n_hat` past `goal`
/// within `width`. Falls back to the largest legal code.
fn plan_model_guided(
    n_hat: f64,
    goal: f64,
    set: bool,
    sigma: f64,
    ctx: &ProgramContext,
) -> Result<Plan, ProgramError> {
    let p = &ctx.params;
    let fe = &ctx.frontend;
    let w = ctx.options.pulse_width;
    let mode = if set { WriteMode::VoltageSet } else { WriteMode::VoltageReset };
    let lo_code = legal_code(fe.regulator.v_in_min, &fe.dac, true);
    let top = if set { ctx.options.set_amplitude } else { fe.regulator.v_dropout_max.min(ctx.options.reset_amplitude) };
    let hi_code = legal_code(top, &fe.dac, false);
    let start = DeviceState::new(n_hat);
    let integ = ctx.transient.integrator;
    let reach = |code: i64| -> Result<f64, ProgramError> {
        let v = planned_voltage(mode, dac_voltage(code, &fe.dac)?);
        Ok(integrate_until(start, sigma * v, w, goal, p, &integ)?.1)
    };
    let (mut lo, mut hi) = (lo_code, hi_code);
    if reach(hi)? >= w {
        let amplitude = dac_voltage(hi, &fe.dac)?;
        return Ok(Plan { mode, amplitude, width: w });
    }
    if reach(lo)? < w {
        hi = lo;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if reach(mid)? < w {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = reach(hi)?;
    Ok(Plan { mode, amplitude: dac_voltage(hi, &fe.dac)?, width: t.min(w) })
}

/// DAC code nearest to `v` that stays inside the limit it represents.
fn legal_code(v: f64, dac: &DacSpec, at_least: bool) -> i64 {
    let x = v / dac.lsb - 1.0;
    let code = if at_least { (x - 1e-9).ceil() } else { (x + 1e-9).floor() };
    (code as i64).clamp(0, dac.max_code() as i64)
}

/// Voltage scale that makes the model reproduce the observed move.
fn calibrate(
    n_before: f64,
    n_after: f64,
    v_planned: f64,
    width: f64,
    p: &DeviceParams,
    integ: &IntegratorOptions,
) -> Result<Option<f64>, DeviceError> {
    if (n_after / n_before).ln().abs() <= 1e-3 {
        return Ok(None);
    }
    let set = v_planned < 0.0;
    let moved = |sigma: f64| -> Result<bool, DeviceError> {
        let x = integrate_step_with(DeviceState::new(n_before), sigma * v_planned, width, p, integ)?.n_disc;
        Ok(if set { x >= n_after } else { x <= n_after })
    };
    let (mut a, mut b) = (0.5f64, 1.5f64);
    if !moved(b)? {
        return Ok(Some(b));
    }
    if moved(a)? {
        return Ok(Some(a));
    }
    for _ in 0..24 {
        let m = 0.5 * (a + b);
        if moved(m)? {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Verify loop for one cell. Other cells stay grounded throughout.
pub fn read_verify_program(
    target: &ProgramTarget,
    states: &Grid<DeviceState>,
    ctx: &ProgramContext,
) -> Result<(Grid<DeviceState>, ProgramReport), ProgramError> {
    ctx.options.validate()?;
    check_target(target, ctx)?;
    match target.mode {
        ProgramMode::Voltage => voltage_loop(target, states, ctx),
        ProgramMode::Current => current_loop(target, states, ctx),
    }
}

fn finish(
    target: &ProgramTarget,
    states: Grid<DeviceState>,
    success: bool,
    g_initial: f64,
    g_read: f64,
    trajectory: Vec<PulseRecord>,
    ctx: &ProgramContext,
) -> Result<(Grid<DeviceState>, ProgramReport), ProgramError> {
    let g_check = conductance_readout(states[(target.row, target.col)], &ctx.params, ctx.options.v_read)?;
    // A verify that passed on a read the device disagrees with is not a success.
    let success = success && target.contains(g_check);
    Ok((states, ProgramReport { target: *target, success, g_initial, g_read, g_check, trajectory }))
}

/// Error direction of a read: `Some(true)` for too low, `None` in band.
fn verdict(read: &VerifyRead, target: &ProgramTarget) -> Option<bool> {
    let (lo, hi) = target.band();
    if read.g_lo >= lo && read.g_hi <= hi {
        None
    } else {
        Some(read.g < target.g_target)
    }
}

fn voltage_loop(
    target: &ProgramTarget,
    states: &Grid<DeviceState>,
    ctx: &ProgramContext,
) -> Result<(Grid<DeviceState>, ProgramReport), ProgramError> {
    let (row, col) = (target.row, target.col);
    let p = &ctx.params;
    let opts = &ctx.options;
    let mut states = states.clone();
    let mut read = read_cell(row, col, &states, ctx)?;
    let g_initial = read.g;
    let n_star = invert_conductance(target.g_target, p, opts.v_read)?;
    let mut trajectory = Vec::new();
    let mut cal = Calibration { sigma: [1.0, 1.0] };
    let mut cap = opts.step_cap;
    let mut width = opts.pulse_width;
    let mut last_dir: Option<bool> = None;
    while trajectory.len() < target.max_pulses {
        let Some(set) = verdict(&read, target) else {
            return finish(target, states, true, g_initial, read.g, trajectory, ctx);
        };
        let reversed = last_dir.is_some_and(|d| d != set);
        last_dir = Some(set);
        let n_hat = invert_conductance(read.g, p, opts.v_read)?;
        let plan = match opts.policy {
            StepPolicy::WidthHalving => {
                if reversed {
                    width *= 0.5;
                }
                let (mode, amplitude) = if set {
                    (WriteMode::VoltageSet, opts.set_amplitude)
                } else {
                    (WriteMode::VoltageReset, opts.reset_amplitude)
                };
                Plan { mode, amplitude, width }
            }
            StepPolicy::ModelGuided => {
                if reversed {
                    cap *= 0.5;
                }
                let step = (n_star / n_hat).ln().clamp(-cap, cap);
                let goal = n_hat * step.exp();
                let sigma = cal.sigma[usize::from(set)];
                plan_model_guided(n_hat, goal, set, sigma, ctx)?
            }
        };
        let write = resolve_write(plan.mode, plan.amplitude, col, &ctx.frontend)?;
        let (next, _) = apply_write_pulse(
            row,
            col,
            plan.mode,
            plan.amplitude,
            plan.width,
            &ctx.array,
            &states,
            p,
            &ctx.frontend,
            &ctx.transient,
        )?;
        states = next;
        read = read_cell(row, col, &states, ctx)?;
        if opts.policy == StepPolicy::ModelGuided {
            let n_obs = invert_conductance(read.g, p, opts.v_read)?;
            let v = planned_voltage(plan.mode, write.level);
            if let Some(s) = calibrate(n_hat, n_obs, v, plan.width, p, &ctx.transient.integrator)? {
                cal.sigma[dir_index(plan.mode)] = s;
            }
        }
        trajectory.push(PulseRecord {
            index: trajectory.len(),
            mode: plan.mode,
            dac_code: write.dac_code,
            level: write.level,
            width: plan.width,
            g_after: read.g,
        });
    }
    let success = verdict(&read, target).is_none();
    finish(target, states, success, g_initial, read.g, trajectory, ctx)
}

/// Current mode: a rising ladder of current pulses while too low, a fixed
/// voltage RESET when too high, after which the ladder restarts one rung
/// lower than the level that overshot.
fn current_loop(
    target: &ProgramTarget,
    states: &Grid<DeviceState>,
    ctx: &ProgramContext,
) -> Result<(Grid<DeviceState>, ProgramReport), ProgramError> {
    let (row, col) = (target.row, target.col);
    let opts = &ctx.options;
    let mut states = states.clone();
    let mut read = read_cell(row, col, &states, ctx)?;
    let g_initial = read.g;
    let mut trajectory = Vec::new();
    let mut level = opts.current_start;
    let i_max = ctx.frontend.isource.v_dd / ctx.frontend.isource.r_conv;
    while trajectory.len() < target.max_pulses {
        let Some(set) = verdict(&read, target) else {
            return finish(target, states, true, g_initial, read.g, trajectory, ctx);
        };
        let (mode, amplitude) = if set {
            (WriteMode::CurrentSet, level)
        } else {
            level = (level / opts.current_growth).max(opts.current_start);
            (WriteMode::VoltageReset, opts.reset_amplitude)
        };
        let write = resolve_write(mode, amplitude, col, &ctx.frontend)?;
        let (next, _) = apply_write_pulse(
            row,
            col,
            mode,
            amplitude,
            opts.pulse_width,
            &ctx.array,
            &states,
            &ctx.params,
            &ctx.frontend,
            &ctx.transient,
        )?;
        states = next;
        read = read_cell(row, col, &states, ctx)?;
        if set {
            level = (level * opts.current_growth).min(i_max);
        }
        trajectory.push(PulseRecord {
            index: trajectory.len(),
            mode,
            dac_code: write.dac_code,
            level: write.level,
            width: opts.pulse_width,
            g_after: read.g,
        });
    }
    let success = verdict(&read, target).is_none();
    finish(target, states, success, g_initial, read.g, trajectory, ctx)
}

/// Result of one constant-current run.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub current: f64,
    /// First time `n_disc` reached 99% of its maximum.
    pub t_lrs: Option<f64>,
    /// First time G reached the fallback threshold.
    pub t_g_threshold: Option<f64>,
    pub g_final: f64,
    /// `(t, G)` at every accepted step.
    pub trajectory: Vec<(f64, f64)>,
}

impl LevelResult {
    pub fn monotone(&self) -> bool {
        self.trajectory.windows(2).all(|w| w[1].1 >= w[0].1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentModeReport {
    pub g_threshold: f64,
    pub levels: Vec<LevelResult>,
}

/// First time `x(t)` reaches `level`. Between samples the state creeps
/// roughly with `ln t`, so the crossing is interpolated on that scale.
fn first_crossing(traj: &[(f64, f64)], level: f64) -> Option<f64> {
    let k = traj.iter().position(|&(_, x)| x >= level)?;
    if k == 0 {
        return Some(traj[0].0);
    }
    let ((t0, x0), (t1, x1)) = (traj[k - 1], traj[k]);
    let f = (level - x0) / (x1 - x0);
    if t0 > 0.0 {
        Some((t0.ln() + f * (t1 / t0).ln()).exp())
    } else {
        Some(t0 + f * (t1 - t0))
    }
}

/// Holds each current level on the cell for `duration`, each run starting
/// from the same HRS state.
pub fn current_mode_set(
    row: usize,
    col: usize,
    levels: &[f64],
    duration: f64,
    states: &Grid<DeviceState>,
    ctx: &ProgramContext,
) -> Result<CurrentModeReport, ProgramError> {
    let p = &ctx.params;
    let cfg = &ctx.array;
    if row >= cfg.n_rows || col >= cfg.n_cols {
        return Err(ProgramError::CellOutOfRange { row, col });
    }
    let n0 = states[(row, col)].n_disc;
    if n0 > p.n_disc_min * 1.01 {
        return Err(ProgramError::PreStateNotHRS { row, col, n_disc: n0 });
    }
    let v_read = ctx.options.v_read;
    let (g_hrs, _) = g_range(p, v_read)?;
    let g_threshold = ctx.options.g_switch_factor * g_hrs;
    let n_lrs = 0.99 * p.n_disc_max;
    let mut out = Vec::with_capacity(levels.len());
    for &i in levels {
        let (samples, final_n) = if i == 0.0 {
            (vec![(0.0, n0), (duration, n0)], n0)
        } else {
            let write = resolve_write(WriteMode::CurrentSet, i, col, &ctx.frontend)?;
            let schedule = write_schedule(cfg, row, col, &write, duration)?;
            let rec = run_transient(&schedule, cfg, states, p, &ctx.transient)?;
            let n: Vec<(f64, f64)> = rec.samples.iter().map(|s| (s.t, s.n[(row, col)])).collect();
            (n, rec.final_states[(row, col)].n_disc)
        };
        let trajectory = samples
            .iter()
            .map(|&(t, n)| Ok((t, conductance_readout(DeviceState::new(n), p, v_read)?)))
            .collect::<Result<Vec<_>, DeviceError>>()?;
        out.push(LevelResult {
            current: i,
            t_lrs: first_crossing(&samples, n_lrs),
            t_g_threshold: first_crossing(&trajectory, g_threshold),
            g_final: conductance_readout(DeviceState::new(final_n), p, v_read)?,
            trajectory,
        });
    }
    Ok(CurrentModeReport { g_threshold, levels: out })
}

/// Affine weight-to-conductance map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightMapSpec {
    pub g_min: f64,
    pub g_max: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub tolerance: f64,
    pub mode: ProgramMode,
    pub max_pulses: usize,
}

impl WeightMapSpec {
    pub fn validate(&self) -> Result<(), ProgramError> {
        if !(self.g_min > 0.0 && self.g_min < self.g_max && self.w_min < self.w_max) {
            return Err(ProgramError::InvalidMap(format!(
                "need 0 < g_min < g_max and w_min < w_max, got g [{}, {}], w [{}, {}]",
                self.g_min, self.g_max, self.w_min, self.w_max
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(ProgramError::InvalidMap(format!("tolerance must be in (0, 1), got {}", self.tolerance)));
        }
        Ok(())
    }

    pub fn g_of(&self, w: f64) -> f64 {
        self.g_min + (w - self.w_min) * (self.g_max - self.g_min) / (self.w_max - self.w_min)
    }

    pub fn w_of(&self, g: f64) -> f64 {
        self.w_min + (g - self.g_min) * (self.w_max - self.w_min) / (self.g_max - self.g_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub targets: Grid<ProgramTarget>,
    /// Relative conductance error a one-step DAC error on the read voltage
    /// would cause.
    pub dac_error_bound: f64,
}

pub fn map_weights(w: &Grid<f64>, spec: &WeightMapSpec, dac: &DacSpec, v_read: f64) -> Result<WeightMap, ProgramError> {
    spec.validate()?;
    for ((row, col), &x) in w.iter() {
        if !(x >= spec.w_min && x <= spec.w_max) {
            return Err(ProgramError::WeightOutOfRange { row, col, w: x, w_min: spec.w_min, w_max: spec.w_max });
        }
    }
    let targets = Grid::from_fn(w.rows(), w.cols(), |r, c| ProgramTarget {
        row: r,
        col: c,
        g_target: spec.g_of(w[(r, c)]),
        tolerance: spec.tolerance,
        mode: spec.mode,
        max_pulses: spec.max_pulses,
    });
    Ok(WeightMap { targets, dac_error_bound: dac_resolution_floor(dac, v_read) })
}

pub fn unmap_weights(g: &Grid<f64>, spec: &WeightMapSpec) -> Grid<f64> {
    g.map(|&x| spec.w_of(x))
}

/// Outcome for one targeted cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Done(ProgramReport),
    Rejected { row: usize, col: usize, reason: String },
}

impl CellOutcome {
    pub fn success(&self) -> bool {
        matches!(self, CellOutcome::Done(r) if r.success)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayReport {
    pub cells: Vec<CellOutcome>,
}

impl ArrayReport {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(CellOutcome::success)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| !c.success()).count()
    }

    /// `row,col,g_target,g_check,pulses,success` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,g_target,g_read,g_check,pulses,success,note\n");
        for c in &self.cells {
            match c {
                CellOutcome::Done(r) => s.push_str(&format!(
                    "{},{},{:e},{:e},{:e},{},{},\n",
                    r.target.row,
                    r.target.col,
                    r.target.g_target,
                    r.g_read,
                    r.g_check,
                    r.pulses(),
                    r.success
                )),
                CellOutcome::Rejected { row, col, reason } => {
                    s.push_str(&format!("{row},{col},,,,0,false,{}\n", reason.replace(',', ";")))
                }
            }
        }
        s
    }
}

/// Programs the listed cells one after another. A cell whose target cannot be
/// attempted is reported and skipped; numerical failures abort.
pub fn program_array(
    targets: &[ProgramTarget],
    states: &Grid<DeviceState>,
    ctx: &ProgramContext,
) -> Result<(Grid<DeviceState>, ArrayReport), ProgramError> {
    let mut states = states.clone();
    let mut cells = Vec::with_capacity(targets.len());
    for t in targets {
        match read_verify_program(t, &states, ctx) {
            Ok((next, report)) => {
                states = next;
                cells.push(CellOutcome::Done(report));
            }
            Err(e @ (ProgramError::Unreachable { .. } | ProgramError::ToleranceTooTight { .. } | ProgramError::CellOutOfRange { .. })) => {
                cells.push(CellOutcome::Rejected { row: t.row, col: t.col, reason: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    Ok((states, ArrayReport { cells }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(n: usize) -> ProgramContext {
        ProgramContext { array: ArrayConfig::with_size(n, n), ..Default::default() }
    }

    #[test]
    fn inversion_round_trips() {
        let p = DeviceParams::default();
        for n in [0.01, 0.3, 2.0, 15.0] {
            let g = conductance_readout(DeviceState::new(n), &p, 0.25).unwrap();
            let back = invert_conductance(g, &p, 0.25).unwrap();
            assert!((back / n - 1.0).abs() < 1e-9, "{n} -> {back}");
        }
    }

    #[test]
    fn array_read_matches_device_readout() {
        let c = ctx(2);
        let states = Grid::from_fn(2, 2, |r, col| DeviceState::new(0.02 + 3.0 * (r + 2 * col) as f64));
        for r in 0..2 {
            for col in 0..2 {
                let g = read_cell(r, col, &states, &c).unwrap().g;
                let want = conductance_readout(states[(r, col)], &c.params, 0.25).unwrap();
                // Open throws leak a few nA, so agreement is close but not exact.
                assert!((g / want - 1.0).abs() < 1e-3, "({r}, {col}): {g} vs {want}");
            }
        }
    }

    #[test]
    fn already_in_band_needs_no_pulse() {
        let c = ctx(1);
        let s = Grid::filled(1, 1, DeviceState::new(0.5));
        let g = conductance_readout(s[(0, 0)], &c.params, 0.25).unwrap();
        let (after, rep) = read_verify_program(&ProgramTarget::new(0, 0, g), &s, &c).unwrap();
        assert!(rep.success);
        assert_eq!(rep.pulses(), 0);
        assert_eq!(after, s);
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let c = ctx(1);
        let s = Grid::filled(1, 1, DeviceState::hrs(&c.params));
        let r = read_verify_program(&ProgramTarget::new(0, 0, 1.0), &s, &c);
        assert!(matches!(r, Err(ProgramError::Unreachable { .. })));
    }

    #[test]
    fn lrs_target_with_fixed_amplitudes() {
        let mut c = ctx(1);
        c.options.policy = StepPolicy::WidthHalving;
        let (_, g_lrs) = g_range(&c.params, 0.25).unwrap();
        let s = Grid::filled(1, 1, DeviceState::hrs(&c.params));
        let (_, rep) = read_verify_program(&ProgramTarget::new(0, 0, g_lrs), &s, &c).unwrap();
        assert!(rep.success && (1..=3).contains(&rep.pulses()), "{rep:?}");
    }

    #[test]
    fn mid_range_target_model_guided() {
        let c = ctx(2);
        let (g_hrs, g_lrs) = g_range(&c.params, 0.25).unwrap();
        let s = Grid::filled(2, 2, DeviceState::hrs(&c.params));
        let t = ProgramTarget::new(1, 0, 0.5 * (g_hrs + g_lrs));
        let (after, rep) = read_verify_program(&t, &s, &c).unwrap();
        assert!(rep.success, "{rep:?}");
        assert!(t.contains(rep.g_check));
        for (rc, st) in after.iter() {
            if rc != (1, 0) {
                assert_eq!(st.n_disc, s[rc].n_disc);
            }
        }
    }

    #[test]
    fn weight_map_endpoints_and_inverse() {
        let spec = WeightMapSpec {
            g_min: 2e-5,
            g_max: 6e-4,
            w_min: -1.0,
            w_max: 1.0,
            tolerance: 0.05,
            mode: ProgramMode::Voltage,
            max_pulses: 32,
        };
        let w = Grid::from_rows(vec![vec![-1.0, 1.0], vec![0.25, -0.3]]).unwrap();
        let m = map_weights(&w, &spec, &DacSpec::default(), 0.25).unwrap();
        assert_eq!(m.targets[(0, 0)].g_target, 2e-5);
        assert_eq!(m.targets[(0, 1)].g_target, 6e-4);
        let back = unmap_weights(&m.targets.map(|t| t.g_target), &spec);
        for (rc, x) in back.iter() {
            assert!((x - w[rc]).abs() < 1e-12);
        }
        let bad = Grid::filled(1, 1, 1.5);
        assert!(matches!(map_weights(&bad, &spec, &DacSpec::default(), 0.25), Err(ProgramError::WeightOutOfRange { .. })));
    }

    #[test]
    fn current_mode_requires_hrs() {
        let c = ctx(1);
        let s = Grid::filled(1, 1, DeviceState::lrs(&c.params));
        assert!(matches!(current_mode_set(0, 0, &[5e-6], 1e-3, &s, &c), Err(ProgramError::PreStateNotHRS { .. })));
    }

    #[test]
    fn zero_current_does_not_switch() {
        let c = ctx(1);
        let s = Grid::filled(1, 1, DeviceState::hrs(&c.params));
        let rep = current_mode_set(0, 0, &[0.0], 1e-3, &s, &c).unwrap();
        assert_eq!(rep.levels[0].t_lrs, None);
        assert_eq!(rep.levels[0].t_g_threshold, None);
    }
}

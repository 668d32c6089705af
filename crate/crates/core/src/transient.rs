//! Time marching of the whole array.
//!
//! Each step freezes the device states and solves the network, advances the
//! devices half a step, re-solves, and then takes the full step with every
//! device held at its midpoint branch voltage. Steps never straddle a
//! schedule edge and are halved while any device moves too fast.

use std::fmt::Write as _;

use thiserror::Error;

use crate::device::{integrate_step_with, DeviceError, DeviceParams, DeviceState, IntegratorOptions};
use crate::frontend::{quantize_to_dac, regulate_voltage, regulated_current, FrontendError, FrontendSpecs};
use crate::grid::Grid;
use crate::network::{
    build_network, memristors, solve_operating_point_from, ArrayConfig, CellMode, ColumnTermination, DriveSet,
    NetworkDescription, NetworkError, OperatingPoint, RowDrive, Sense, WarmStart,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransientError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("amplitude {amplitude} outside the legal range of {mode:?}: {reason}")]
    AmplitudeOutOfRange { mode: WriteMode, amplitude: f64, reason: String },
    #[error("cell ({row}, {col}) outside the array")]
    CellOutOfRange { row: usize, col: usize },
    #[error("at t = {t:e} s: {source}")]
    Network { t: f64, source: NetworkError },
    #[error("at t = {t:e} s: {source}")]
    Device { t: f64, source: DeviceError },
    #[error("at t = {t:e} s: step fell below {dt:e} s without meeting the state tolerance")]
    StepCollapse { t: f64, dt: f64 },
}

/// Array setting held over `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub drives: DriveSet,
    pub select: Grid<CellMode>,
}

/// Events in time order. Outside every event the array idles with all cells
/// grounded and all drives at 0 V.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSchedule {
    pub events: Vec<StimulusEvent>,
    pub duration: f64,
}

impl StimulusSchedule {
    pub fn idle(duration: f64) -> Self {
        Self { events: Vec::new(), duration }
    }

    /// Appends an event; it must start at or after the end of the last one.
    pub fn push(&mut self, event: StimulusEvent) -> Result<(), TransientError> {
        if let Some(last) = self.events.last() {
            if event.t_start < last.t_end {
                return Err(TransientError::InvalidSchedule(format!(
                    "event at {} s overlaps the one ending at {} s",
                    event.t_start, last.t_end
                )));
            }
        }
        self.events.push(event);
        Ok(())
    }

    pub fn validate(&self, cfg: &ArrayConfig) -> Result<(), TransientError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(TransientError::InvalidSchedule(format!("duration must be positive, got {}", self.duration)));
        }
        let mut prev_end = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            if !(e.t_start >= prev_end && e.t_end > e.t_start && e.t_end <= self.duration) {
                return Err(TransientError::InvalidSchedule(format!(
                    "event {k} spans [{}, {}) s; events must be ordered, non-empty, disjoint and inside [0, {}] s",
                    e.t_start, e.t_end, self.duration
                )));
            }
            if e.select.dims() != (cfg.n_rows, cfg.n_cols)
                || e.drives.rows.len() != cfg.n_rows
                || e.drives.cols.len() != cfg.n_cols
            {
                return Err(TransientError::InvalidSchedule(format!("event {k} does not match the array size")));
            }
            prev_end = e.t_end;
        }
        Ok(())
    }

    /// Every time at which the array setting may change, including 0 and the end.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut t = vec![0.0, self.duration];
        for e in &self.events {
            t.push(e.t_start);
            t.push(e.t_end);
        }
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// The event active at `t`, if any.
    pub fn active_at(&self, t: f64) -> Option<&StimulusEvent> {
        self.events.iter().find(|e| e.t_start <= t && t < e.t_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientOptions {
    pub dt_max: f64,
    /// Largest relative change of any device state within one step.
    pub state_tol: f64,
    /// A step may shrink to `dt_max / 2^max_halvings` before giving up.
    pub max_halvings: u32,
    /// Take device steps at the voltages of a half-step re-solve.
    pub midpoint: bool,
    pub integrator: IntegratorOptions,
}

impl Default for TransientOptions {
    fn default() -> Self {
        Self { dt_max: 1e-5, state_tol: 1e-2, max_halvings: 90, midpoint: true, integrator: IntegratorOptions::default() }
    }
}

impl TransientOptions {
    pub fn validate(&self) -> Result<(), TransientError> {
        if !(self.dt_max > 0.0 && self.dt_max.is_finite() && self.state_tol > 0.0 && self.integrator.rel_tol > 0.0) {
            return Err(TransientError::InvalidOptions(format!(
                "need dt_max > 0 and positive tolerances, got dt_max = {}, state_tol = {}, rel_tol = {}",
                self.dt_max, self.state_tol, self.integrator.rel_tol
            )));
        }
        Ok(())
    }
}

/// Array quantities at the start of an accepted step. They hold until the
/// next sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub v: Grid<f64>,
    pub i: Grid<f64>,
    pub n: Grid<f64>,
    pub column_currents: Vec<f64>,
    pub drive_currents: Vec<f64>,
    /// Current each row line hands to its cells.
    pub row_feed_currents: Vec<f64>,
    pub compliance_hit: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformRecord {
    pub samples: Vec<Sample>,
    pub final_states: Grid<DeviceState>,
}

impl WaveformRecord {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// `n_disc` of one cell over time.
    pub fn state_trace(&self, row: usize, col: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.n[(row, col)]).collect()
    }

    /// Time integral of `f(sample)` with each sample held until the next.
    pub fn integrate(&self, f: impl Fn(&Sample) -> f64) -> f64 {
        self.samples.windows(2).map(|w| f(&w[0]) * (w[1].t - w[0].t)).sum()
    }

    /// CSV with one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.samples.first() else {
            return "time\n".into();
        };
        let (nr, nc) = first.v.dims();
        out.push_str("time");
        for q in ["v", "i", "n"] {
            for r in 0..nr {
                for c in 0..nc {
                    let _ = write!(out, ",dev_{r}_{c}_{q}");
                }
            }
        }
        for c in 0..nc {
            let _ = write!(out, ",col_{c}_i");
        }
        for r in 0..nr {
            let _ = write!(out, ",drive_{r}_i");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{:e}", s.t);
            for g in [&s.v, &s.i, &s.n] {
                for x in g.values() {
                    let _ = write!(out, ",{x:e}");
                }
            }
            for x in s.column_currents.iter().chain(&s.drive_currents) {
                let _ = write!(out, ",{x:e}");
            }
            out.push('\n');
        }
        out
    }
}

fn idle_setting(cfg: &ArrayConfig) -> (DriveSet, Grid<CellMode>) {
    (DriveSet::idle(cfg), Grid::filled(cfg.n_rows, cfg.n_cols, CellMode::GroundedBoth))
}

fn sample(t: f64, op: &OperatingPoint, net: &NetworkDescription, states: &Grid<DeviceState>) -> Sample {
    let nr = states.rows();
    Sample {
        t,
        v: op.device_voltages.clone(),
        i: op.device_currents.clone(),
        n: states.map(|s| s.n_disc),
        column_currents: op.column_currents.clone(),
        drive_currents: op.drive_currents.clone(),
        row_feed_currents: (0..nr).map(|r| op.row_feed_current(net, r)).collect(),
        compliance_hit: op.compliance_hit.clone(),
    }
}

/// Advances every device by `h` at the given branch voltages. Returns the new
/// states with the largest relative change, or `None` when some device moves
/// too fast for the integrator and a shorter step is allowed.
fn advance_all(
    states: &Grid<DeviceState>,
    volts: &Grid<f64>,
    h: f64,
    p: &DeviceParams,
    opts: &TransientOptions,
    may_shrink: bool,
    t: f64,
) -> Result<Option<(Grid<DeviceState>, f64)>, TransientError> {
    let mut next = states.clone();
    let mut worst = 0.0f64;
    for ((r, c), s) in states.iter() {
        match integrate_step_with(*s, volts[(r, c)], h, p, &opts.integrator) {
            Ok(moved) => {
                worst = worst.max((moved.n_disc - s.n_disc).abs() / s.n_disc);
                next[(r, c)] = moved;
            }
            Err(DeviceError::StepTooLarge { .. }) if may_shrink => return Ok(None),
            Err(source) => return Err(TransientError::Device { t, source }),
        }
    }
    Ok(Some((next, worst)))
}

/// Marches the array through `schedule` from `initial`.
pub fn run_transient(
    schedule: &StimulusSchedule,
    cfg: &ArrayConfig,
    initial: &Grid<DeviceState>,
    p: &DeviceParams,
    opts: &TransientOptions,
) -> Result<WaveformRecord, TransientError> {
    cfg.validate().map_err(|source| TransientError::Network { t: 0.0, source })?;
    schedule.validate(cfg)?;
    opts.validate()?;
    if initial.dims() != (cfg.n_rows, cfg.n_cols) {
        return Err(TransientError::InvalidSchedule("initial states do not match the array size".into()));
    }
    let mut states = initial.map(|s| s.clamped(p));
    let breaks = schedule.breakpoints();
    let mut samples = Vec::new();
    let net_err = |t: f64| move |source| TransientError::Network { t, source };

    for seg in breaks.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (drives, select) = match schedule.active_at(a) {
            Some(e) => (e.drives.clone(), e.select.clone()),
            None => idle_setting(cfg),
        };
        let mut net = build_network(cfg, &select, &drives, &memristors(&states)).map_err(net_err(a))?;
        let mut warm: Option<WarmStart> = None;
        let mut t = a;
        let mut dt = opts.dt_max;
        let dt_floor = opts.dt_max / 2f64.powi(opts.max_halvings as i32);
        while t < b {
            net.set_states(&states).map_err(net_err(t))?;
            let op = solve_operating_point_from(&net, p, warm.as_ref()).map_err(net_err(t))?;
            warm = Some(op.warm_start());
            samples.push(sample(t, &op, &net, &states));
            let (next, h) = loop {
                let last = dt >= b - t;
                let h = if last { b - t } else { dt };
                let trial = match advance_all(&states, &op.device_voltages, h, p, opts, h > dt_floor, t)? {
                    Some((next, worst)) if worst <= opts.state_tol && worst > 0.0 && opts.midpoint => {
                        // Re-solve at the half-step state and redo the step at
                        // the midpoint voltages.
                        match advance_all(&states, &op.device_voltages, 0.5 * h, p, opts, h > dt_floor, t)? {
                            Some((half, _)) => {
                                net.set_states(&half).map_err(net_err(t))?;
                                let mid = solve_operating_point_from(&net, p, warm.as_ref()).map_err(net_err(t))?;
                                advance_all(&states, &mid.device_voltages, h, p, opts, h > dt_floor, t)?
                            }
                            None => None,
                        }
                        .or(Some((next, f64::INFINITY)))
                    }
                    other => other,
                };
                if let Some((next, worst)) = trial {
                    if worst <= opts.state_tol {
                        dt = if worst < 0.25 * opts.state_tol { (2.0 * h).min(opts.dt_max) } else { h };
                        break (next, h);
                    }
                }
                if h <= dt_floor {
                    return Err(TransientError::StepCollapse { t, dt: h });
                }
                dt = 0.5 * h;
            };
            states = next;
            // Land exactly on the breakpoint rather than on an accumulated sum.
            t = if h == b - t { b } else { t + h };
        }
    }

    // Closing sample at the end of the schedule.
    let end = schedule.duration;
    let (drives, select) = match schedule.active_at(end) {
        Some(e) => (e.drives.clone(), e.select.clone()),
        None => idle_setting(cfg),
    };
    let net = build_network(cfg, &select, &drives, &memristors(&states)).map_err(net_err(end))?;
    let op = solve_operating_point_from(&net, p, None).map_err(net_err(end))?;
    samples.push(sample(end, &op, &net, &states));
    Ok(WaveformRecord { samples, final_states: states })
}

/// Single-cell write flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WriteMode {
    /// Regulated positive voltage on OE with AE grounded.
    VoltageSet,
    /// Regulated positive voltage on AE with OE grounded.
    VoltageReset,
    /// Regulated current into OE with AE grounded.
    CurrentSet,
}

/// A write pulse after the front end has quantized and limited it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedWrite {
    pub dac_code: u32,
    /// Regulated volts for voltage modes, amperes for current mode.
    pub level: f64,
    pub drive: RowDrive,
    pub mode: CellMode,
}

/// Maps a requested amplitude (volts, or amperes for current mode) through
/// the DAC and the regulator or current source.
pub fn resolve_write(
    mode: WriteMode,
    amplitude: f64,
    col: usize,
    fe: &FrontendSpecs,
) -> Result<ResolvedWrite, TransientError> {
    let out_of_range = |reason: String| TransientError::AmplitudeOutOfRange { mode, amplitude, reason };
    let fe_err = |e: FrontendError| out_of_range(e.to_string());
    match mode {
        WriteMode::VoltageSet | WriteMode::VoltageReset => {
            let (code, v_ref) = quantize_to_dac(amplitude, &fe.dac).map_err(fe_err)?;
            let v = regulate_voltage(v_ref, &fe.regulator).map_err(fe_err)?;
            let cell_mode = if mode == WriteMode::VoltageSet { CellMode::VoltageWriteOE } else { CellMode::VoltageWriteAE };
            Ok(ResolvedWrite {
                dac_code: code,
                level: v,
                drive: RowDrive::Voltage { v, i_limit: fe.regulator.i_compliance, sense: Sense::Cell(col) },
                mode: cell_mode,
            })
        }
        WriteMode::CurrentSet => {
            if !(amplitude > 0.0) {
                return Err(out_of_range("current must be positive".into()));
            }
            let (code, v_ref) = quantize_to_dac(fe.isource.v_ref_for(amplitude), &fe.dac).map_err(fe_err)?;
            let i = regulated_current(v_ref, &fe.isource).map_err(fe_err)?;
            Ok(ResolvedWrite { dac_code: code, level: i, drive: RowDrive::Current { i }, mode: CellMode::CurrentWrite })
        }
    }
}

/// Schedule with one selected cell written over `[0, width)`; every other
/// cell grounded.
pub fn write_schedule(
    cfg: &ArrayConfig,
    row: usize,
    col: usize,
    write: &ResolvedWrite,
    width: f64,
) -> Result<StimulusSchedule, TransientError> {
    if row >= cfg.n_rows || col >= cfg.n_cols {
        return Err(TransientError::CellOutOfRange { row, col });
    }
    let mut select = Grid::filled(cfg.n_rows, cfg.n_cols, CellMode::GroundedBoth);
    select[(row, col)] = write.mode;
    let mut drives = DriveSet::idle(cfg);
    drives.rows[row] = write.drive;
    let mut schedule = StimulusSchedule::idle(width);
    schedule.push(StimulusEvent { t_start: 0.0, t_end: width, drives, select })?;
    Ok(schedule)
}

/// Writes one cell for `width` seconds and returns the new states with the
/// recorded waveform.
#[allow(clippy::too_many_arguments)]
pub fn apply_write_pulse(
    row: usize,
    col: usize,
    mode: WriteMode,
    amplitude: f64,
    width: f64,
    cfg: &ArrayConfig,
    states: &Grid<DeviceState>,
    p: &DeviceParams,
    fe: &FrontendSpecs,
    opts: &TransientOptions,
) -> Result<(Grid<DeviceState>, WaveformRecord), TransientError> {
    let write = resolve_write(mode, amplitude, col, fe)?;
    let schedule = write_schedule(cfg, row, col, &write, width)?;
    let record = run_transient(&schedule, cfg, states, p, opts)?;
    Ok((record.final_states.clone(), record))
}

/// One pulse of a single-cell sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellPulse {
    /// Regulated read across the cell with the column into the ADC.
    Read(f64),
    Write(WriteMode, f64),
}

/// Pulses of `width` on one cell, one per `period`, the rest of each period idle.
#[allow(clippy::too_many_arguments)]
pub fn cell_pulse_schedule(
    cfg: &ArrayConfig,
    row: usize,
    col: usize,
    pulses: &[CellPulse],
    width: f64,
    period: f64,
    fe: &FrontendSpecs,
) -> Result<StimulusSchedule, TransientError> {
    if row >= cfg.n_rows || col >= cfg.n_cols {
        return Err(TransientError::CellOutOfRange { row, col });
    }
    if !(width > 0.0 && width <= period) {
        return Err(TransientError::InvalidSchedule(format!("need 0 < width <= period, got {width} / {period}")));
    }
    let mut schedule = StimulusSchedule::idle(pulses.len() as f64 * period);
    for (k, pulse) in pulses.iter().enumerate() {
        let mut select = Grid::filled(cfg.n_rows, cfg.n_cols, CellMode::GroundedBoth);
        let mut drives = DriveSet::idle(cfg);
        match *pulse {
            CellPulse::Read(v) => {
                select[(row, col)] = CellMode::Read;
                drives.rows[row] = RowDrive::Voltage { v, i_limit: f64::INFINITY, sense: Sense::Cell(col) };
                drives.cols[col] = ColumnTermination::Adc;
            }
            CellPulse::Write(mode, amplitude) => {
                let w = resolve_write(mode, amplitude, col, fe)?;
                select[(row, col)] = w.mode;
                drives.rows[row] = w.drive;
            }
        }
        let t_start = k as f64 * period;
        schedule.push(StimulusEvent { t_start, t_end: t_start + width, drives, select })?;
    }
    Ok(schedule)
}

/// Every cell read at `v_read` for `width`, then idle until `period`, repeated.
pub fn read_pulse_schedule(cfg: &ArrayConfig, v_read: f64, width: f64, period: f64, count: usize) -> StimulusSchedule {
    let select = Grid::filled(cfg.n_rows, cfg.n_cols, CellMode::Read);
    let drives = DriveSet {
        rows: vec![RowDrive::Voltage { v: v_read, i_limit: f64::INFINITY, sense: Sense::Driver }; cfg.n_rows],
        cols: vec![ColumnTermination::Adc; cfg.n_cols],
    };
    let events = (0..count)
        .map(|k| StimulusEvent {
            t_start: k as f64 * period,
            t_end: k as f64 * period + width,
            drives: drives.clone(),
            select: select.clone(),
        })
        .collect();
    StimulusSchedule { events, duration: count as f64 * period }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cell() -> ArrayConfig {
        ArrayConfig::with_size(1, 1)
    }

    #[test]
    fn idle_schedule_changes_nothing() {
        let p = DeviceParams::default();
        let cfg = ArrayConfig::with_size(2, 2);
        let init = Grid::from_fn(2, 2, |r, c| DeviceState::new(0.05 + r as f64 + c as f64));
        let rec = run_transient(&StimulusSchedule::idle(1e-2), &cfg, &init, &p, &TransientOptions::default()).unwrap();
        assert_eq!(rec.final_states, init);
        assert!(rec.samples.iter().all(|s| s.i.values().all(|&i| i == 0.0)));
    }

    #[test]
    fn breakpoints_are_sampled_exactly() {
        let p = DeviceParams::default();
        let cfg = ArrayConfig::with_size(1, 2);
        let sched = read_pulse_schedule(&cfg, 0.25, 3.3e-4, 1e-3, 3);
        let opts = TransientOptions { dt_max: 1e-4, ..Default::default() };
        let rec = run_transient(&sched, &cfg, &Grid::filled(1, 2, DeviceState::lrs(&p)), &p, &opts).unwrap();
        let times = rec.times();
        for b in sched.breakpoints() {
            assert!(times.contains(&b), "missing breakpoint {b}");
        }
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn reset_request_is_clamped_to_dropout() {
        let fe = FrontendSpecs::default();
        let w = resolve_write(WriteMode::VoltageReset, 1.5, 0, &fe).unwrap();
        assert_eq!(w.level, 1.2);
        assert_eq!(w.mode, CellMode::VoltageWriteAE);
    }

    #[test]
    fn amplitude_outside_opamp_range_rejected() {
        let fe = FrontendSpecs::default();
        assert!(matches!(
            resolve_write(WriteMode::VoltageSet, 0.1, 0, &fe),
            Err(TransientError::AmplitudeOutOfRange { .. })
        ));
        assert!(resolve_write(WriteMode::CurrentSet, 0.0, 0, &fe).is_err());
    }

    #[test]
    fn table_current_levels_are_exact_dac_codes() {
        let fe = FrontendSpecs::default();
        for i in [3.5e-6, 5e-6, 10e-6, 20e-6] {
            let w = resolve_write(WriteMode::CurrentSet, i, 0, &fe).unwrap();
            assert!((w.level - i).abs() < 1e-15, "{i} -> {}", w.level);
        }
    }

    #[test]
    fn set_pulse_reaches_lrs() {
        let p = DeviceParams::default();
        let cfg = one_cell();
        let (s, _) = apply_write_pulse(
            0,
            0,
            WriteMode::VoltageSet,
            0.75,
            1e-3,
            &cfg,
            &Grid::filled(1, 1, DeviceState::hrs(&p)),
            &p,
            &FrontendSpecs::default(),
            &TransientOptions::default(),
        )
        .unwrap();
        assert!(s[(0, 0)].n_disc >= 0.99 * p.n_disc_max, "n = {}", s[(0, 0)].n_disc);
    }

    #[test]
    fn overlapping_events_rejected() {
        let cfg = one_cell();
        let (drives, select) = idle_setting(&cfg);
        let mut s = StimulusSchedule::idle(1.0);
        s.push(StimulusEvent { t_start: 0.0, t_end: 0.5, drives: drives.clone(), select: select.clone() }).unwrap();
        assert!(s.push(StimulusEvent { t_start: 0.4, t_end: 0.6, drives, select }).is_err());
    }

    #[test]
    fn csv_header_lists_every_quantity() {
        let p = DeviceParams::default();
        let cfg = ArrayConfig::with_size(1, 2);
        let rec = run_transient(&StimulusSchedule::idle(1e-4), &cfg, &Grid::filled(1, 2, DeviceState::hrs(&p)), &p, &TransientOptions::default())
            .unwrap();
        let csv = rec.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "time,dev_0_0_v,dev_0_1_v,dev_0_0_i,dev_0_1_i,dev_0_0_n,dev_0_1_n,col_0_i,col_1_i,drive_0_i"
        );
        assert_eq!(csv.lines().count(), rec.samples.len() + 1);
    }
}

//! Deterministic compact model of a valence-change memristor.
//!
//! The electrical stack follows the JART VCM v1b equivalent circuit: a Schottky
//! contact at the active electrode, the disc and plug regions of the oxygen
//! vacancy filament, and the series resistances of the TiOx layer and the
//! line. The single dynamic state is the disc vacancy concentration, expressed
//! in units of 1e26 m^-3 throughout.
//!
//! Sign convention: `v_device = V(AE) - V(OE)`. A positive bias drives RESET
//! (toward HRS), a negative bias drives SET (toward LRS).

use std::f64::consts::PI;

use thiserror::Error;

/// Elementary charge, C.
pub const Q: f64 = 1.602_176_634e-19;
/// Vacuum permittivity, F/m.
pub const EPS0: f64 = 8.854_187_812_8e-12;
/// Scale between the model's concentration unit and m^-3.
pub const CONC_UNIT: f64 = 1e26;
/// Largest bias magnitude for which the model is considered valid.
pub const V_VALID_MAX: f64 = 2.0;
/// Largest read bias that leaves the state untouched.
pub const V_READ_MAX: f64 = 0.25;

const STACK_REL_TOL: f64 = 1e-10;
const STACK_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("series-stack solve did not converge at v_device = {v} V")]
    NonConvergence { v: f64 },
    #[error("state integration needs a sub-step below {min_step:e} s (v = {v} V, n_disc = {n_disc})")]
    StepTooLarge { v: f64, n_disc: f64, min_step: f64 },
    #[error("read voltage {0} V outside (0, 0.25] V")]
    ReadVoltageOutOfRange(f64),
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
    #[error("sweep rate must be positive, got {0}")]
    InvalidRate(f64),
}

/// Which electrode of the cell a terminal quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terminal {
    ActiveElectrode,
    OhmicElectrode,
}

/// Model parameters. Table values are the v1b deterministic set; constants
/// the table does not list carry the published v1b defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceParams {
    /// Disc cross-section area, m^2.
    pub a_det: f64,
    /// HRS boundary concentration, 1e26 m^-3.
    pub n_disc_min: f64,
    /// LRS boundary concentration, 1e26 m^-3.
    pub n_disc_max: f64,
    /// Oxide cell length, m.
    pub l_cell: f64,
    /// Plug length, m.
    pub l_plug: f64,
    /// Disc length, m.
    pub l_det: f64,
    /// Total series resistance at ambient (TiOx plus line), ohm.
    pub r_series: f64,
    /// Line resistance at ambient, ohm.
    pub r_line: f64,
    /// TiOx layer resistance, ohm.
    pub r_tiox: f64,
    /// Ion attempt frequency, Hz.
    pub gamma0: f64,
    /// Filament thermal resistance, K/W.
    pub rth0_set: f64,
    /// Zero-bias Schottky barrier height, eV.
    pub e_phi_bn0: f64,
    /// Line thermal resistance, K/W.
    pub rth_line: f64,
    /// Line temperature coefficient, 1/K.
    pub alpha_line: f64,
    /// Effective Richardson constant, A/(m^2 K^2).
    pub a_star: f64,
    /// Boltzmann constant, J/K.
    pub kb: f64,
    /// Filament radius, m.
    pub rd: f64,
    /// Ion hopping distance, m.
    pub a_hop: f64,
    /// Ambient temperature, K.
    pub t0: f64,
    /// Ion hopping activation energy, eV.
    pub delta_e_a: f64,
    /// Charge number of an oxygen vacancy.
    pub z_vo: f64,
    /// Electron mobility in the filament, m^2/(V s).
    pub mu_n: f64,
    /// Plug vacancy concentration, 1e26 m^-3.
    pub n_plug: f64,
    /// Energy gap between conduction band and Fermi level in the oxide, eV.
    pub e_phi_n: f64,
    /// Relative permittivity seen by the image-force lowering.
    pub eps_phib: f64,
    /// Thermal resistance multiplier applied under RESET polarity.
    pub rth_reset_scale: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            a_det: 6.36e-15,
            n_disc_min: 0.00826,
            n_disc_max: 20.0,
            l_cell: 3e-9,
            l_plug: 2.6e-9,
            l_det: 0.4e-9,
            r_series: 1.37e3,
            r_line: 719.0,
            r_tiox: 650.0,
            gamma0: 2e13,
            rth0_set: 15.72e6,
            e_phi_bn0: 0.18,
            rth_line: 90_471.47,
            alpha_line: 3.92e-3,
            a_star: 6.01e5,
            kb: 1.38e-23,
            rd: 45e-9,
            a_hop: 0.25e-9,
            t0: 293.0,
            delta_e_a: 1.35,
            z_vo: 2.0,
            mu_n: 4e-6,
            n_plug: 20.0,
            e_phi_n: 0.1,
            eps_phib: 5.5,
            rth_reset_scale: 0.27,
        }
    }
}

impl DeviceParams {
    /// Field names accepted by the parameter file, in declaration order.
    pub const KEYS: [&'static str; 26] = [
        "a_det",
        "n_disc_min",
        "n_disc_max",
        "l_cell",
        "l_plug",
        "l_det",
        "r_series",
        "r_line",
        "r_tiox",
        "gamma0",
        "rth0_set",
        "e_phi_bn0",
        "rth_line",
        "alpha_line",
        "a_star",
        "kb",
        "rd",
        "a_hop",
        "t0",
        "delta_e_a",
        "z_vo",
        "mu_n",
        "n_plug",
        "e_phi_n",
        "eps_phib",
        "rth_reset_scale",
    ];

    pub fn field_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "a_det" => &mut self.a_det,
            "n_disc_min" => &mut self.n_disc_min,
            "n_disc_max" => &mut self.n_disc_max,
            "l_cell" => &mut self.l_cell,
            "l_plug" => &mut self.l_plug,
            "l_det" => &mut self.l_det,
            "r_series" => &mut self.r_series,
            "r_line" => &mut self.r_line,
            "r_tiox" => &mut self.r_tiox,
            "gamma0" => &mut self.gamma0,
            "rth0_set" => &mut self.rth0_set,
            "e_phi_bn0" => &mut self.e_phi_bn0,
            "rth_line" => &mut self.rth_line,
            "alpha_line" => &mut self.alpha_line,
            "a_star" => &mut self.a_star,
            "kb" => &mut self.kb,
            "rd" => &mut self.rd,
            "a_hop" => &mut self.a_hop,
            "t0" => &mut self.t0,
            "delta_e_a" => &mut self.delta_e_a,
            "z_vo" => &mut self.z_vo,
            "mu_n" => &mut self.mu_n,
            "n_plug" => &mut self.n_plug,
            "e_phi_n" => &mut self.e_phi_n,
            "eps_phib" => &mut self.eps_phib,
            "rth_reset_scale" => &mut self.rth_reset_scale,
            _ => return None,
        })
    }

    pub fn field(&self, key: &str) -> Option<f64> {
        let mut copy = self.clone();
        copy.field_mut(key).map(|v| *v)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |msg: String| Err(DeviceError::InvalidParams(msg));
        for key in Self::KEYS {
            let v = self.field(key).unwrap_or(f64::NAN);
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{key} must be finite and strictly positive, got {v}"));
            }
        }
        if self.l_plug >= self.l_cell {
            return bad(format!("l_plug ({}) must be below l_cell ({})", self.l_plug, self.l_cell));
        }
        // Table values are rounded to 0.1 nm.
        if self.l_det > self.l_cell - self.l_plug + 0.05e-9 {
            return bad(format!("l_det ({}) exceeds l_cell - l_plug", self.l_det));
        }
        if self.n_disc_min >= self.n_disc_max {
            return bad(format!(
                "n_disc_min ({}) must be below n_disc_max ({})",
                self.n_disc_min, self.n_disc_max
            ));
        }
        let disc_area = PI * self.rd * self.rd;
        if ((disc_area - self.a_det) / self.a_det).abs() > 0.02 {
            return bad(format!("pi*rd^2 = {disc_area:e} inconsistent with a_det = {:e}", self.a_det));
        }
        let stacked = self.r_tiox + self.r_line;
        if ((stacked - self.r_series) / self.r_series).abs() > 0.01 {
            return bad(format!(
                "r_series ({}) must equal r_tiox + r_line ({stacked}) within 1%",
                self.r_series
            ));
        }
        Ok(())
    }

    pub fn thermal_voltage(&self) -> f64 {
        self.kb * self.t0 / Q
    }

    fn conductance_factor(&self) -> f64 {
        self.z_vo * Q * CONC_UNIT * self.mu_n * self.a_det
    }

    /// Resistance of the disc region at concentration `n_disc`.
    pub fn r_disc(&self, n_disc: f64) -> f64 {
        self.l_det / (self.conductance_factor() * n_disc)
    }

    pub fn r_plug(&self) -> f64 {
        self.l_plug / (self.conductance_factor() * self.n_plug)
    }

    /// Line resistance including self-heating from the device current.
    pub fn r_line_heated(&self, current: f64) -> f64 {
        self.r_line * (1.0 + self.alpha_line * self.r_line * current * current * self.rth_line)
    }

    /// Image-force barrier lowering in eV for band bending `psi` (V).
    fn barrier_lowering(&self, n_disc: f64, psi: f64) -> f64 {
        let eps = self.eps_phib * EPS0;
        let k = Q.powi(3) * self.z_vo * n_disc * CONC_UNIT / (8.0 * PI * PI * eps.powi(3));
        (k * psi.max(0.0)).sqrt().sqrt()
    }

    /// Schottky contact current and its derivative for contact voltage `vs`.
    /// Forward bias is positive `vs`; the reverse branch sees bias-enhanced
    /// image-force lowering.
    fn schottky(&self, vs: f64, n_disc: f64) -> (f64, f64) {
        let vt = self.thermal_voltage();
        let psi0 = self.e_phi_bn0 - self.e_phi_n;
        let psi = psi0 - vs.min(0.0);
        let lowering = self.barrier_lowering(n_disc, psi);
        let barrier = self.e_phi_bn0 - lowering;
        let sat = self.a_det * self.a_star * self.t0 * self.t0 * (-barrier / vt).exp();
        let x = vs / vt;
        let i = sat * x.exp_m1();
        let mut di = sat * x.exp() / vt;
        if vs < 0.0 && psi > 0.0 {
            // d(sat)/dvs = -sat * lowering / (4 psi vt)
            di += -sat * lowering / (4.0 * psi * vt) * x.exp_m1();
        }
        (i, di)
    }
}

/// Disc vacancy concentration of one cell, 1e26 m^-3.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DeviceState {
    pub n_disc: f64,
}

impl DeviceState {
    pub fn new(n_disc: f64) -> Self {
        Self { n_disc }
    }

    pub fn hrs(p: &DeviceParams) -> Self {
        Self::new(p.n_disc_min)
    }

    pub fn lrs(p: &DeviceParams) -> Self {
        Self::new(p.n_disc_max)
    }

    pub fn clamped(self, p: &DeviceParams) -> Self {
        Self::new(self.n_disc.clamp(p.n_disc_min, p.n_disc_max))
    }

    pub fn is_valid(&self, p: &DeviceParams) -> bool {
        self.n_disc.is_finite() && self.n_disc >= p.n_disc_min && self.n_disc <= p.n_disc_max
    }
}

/// Voltage division inside the device stack at one bias point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackBias {
    pub current: f64,
    pub v_schottky: f64,
    pub v_disc: f64,
    pub v_plug: f64,
    pub v_series: f64,
}

impl StackBias {
    fn zero() -> Self {
        Self { current: 0.0, v_schottky: 0.0, v_disc: 0.0, v_plug: 0.0, v_series: 0.0 }
    }

    /// Power dissipated in the oxide (contact, disc and plug).
    pub fn oxide_power(&self) -> f64 {
        (self.current * (self.v_schottky + self.v_disc + self.v_plug)).abs()
    }
}

/// Solves the series stack for the Schottky contact voltage. The residual is
/// monotone in the contact voltage and bracketed by `[0, v_device]`, so Newton
/// steps that leave the bracket fall back to bisection.
pub fn stack_bias(v_device: f64, state: DeviceState, p: &DeviceParams) -> Result<StackBias, DeviceError> {
    if v_device == 0.0 {
        return Ok(StackBias::zero());
    }
    let n = state.n_disc;
    let r_fixed = p.r_disc(n) + p.r_plug() + p.r_tiox;
    let residual = |vs: f64| -> (f64, f64, f64) {
        let (i, di) = p.schottky(vs, n);
        let drop = i * (r_fixed + p.r_line_heated(i));
        let ddrop_di = r_fixed + p.r_line * (1.0 + 3.0 * p.alpha_line * p.r_line * i * i * p.rth_line);
        (vs + drop - v_device, 1.0 + ddrop_di * di, i)
    };

    let (mut lo, mut hi) = if v_device > 0.0 { (0.0, v_device) } else { (v_device, 0.0) };
    let tol = STACK_REL_TOL * v_device.abs();
    let finish = |vs: f64, i: f64| {
        let v_disc = i * p.r_disc(n);
        let v_plug = i * p.r_plug();
        StackBias { current: i, v_schottky: vs, v_disc, v_plug, v_series: v_device - vs - v_disc - v_plug }
    };
    let mut vs = 0.5 * (lo + hi);
    let mut widths = [f64::INFINITY; 2];
    for _ in 0..STACK_MAX_ITER {
        let (f, df, i) = residual(vs);
        if f.abs() <= tol {
            return Ok(finish(vs, i));
        }
        if f > 0.0 {
            hi = vs;
        } else {
            lo = vs;
        }
        let mut next = vs - f / df;
        // Bisect when Newton leaves the bracket or the bracket has not halved
        // over the last two iterations.
        let width = hi - lo;
        if !next.is_finite() || next <= lo || next >= hi || width > 0.5 * widths[0] {
            next = 0.5 * (lo + hi);
        }
        widths = [widths[1], width];
        vs = next;
        if hi - lo <= f64::EPSILON * v_device.abs() {
            let (_, _, i) = residual(vs);
            return Ok(finish(vs, i));
        }
    }
    Err(DeviceError::NonConvergence { v: v_device })
}

/// Total current through the device at bias `v_device`.
pub fn device_current(v_device: f64, state: DeviceState, p: &DeviceParams) -> Result<f64, DeviceError> {
    stack_bias(v_device, state, p).map(|b| b.current)
}

/// Filament temperature for a given stack bias. Heating is instantaneous.
pub fn filament_temperature(bias: &StackBias, p: &DeviceParams) -> f64 {
    let rth = if bias.current > 0.0 { p.rth0_set * p.rth_reset_scale } else { p.rth0_set };
    p.t0 + bias.oxide_power() * rth
}

/// Time derivative of the disc concentration, 1e26 m^-3 per second.
pub fn state_derivative(v_device: f64, state: DeviceState, p: &DeviceParams) -> Result<f64, DeviceError> {
    if v_device == 0.0 {
        return Ok(0.0);
    }
    let bias = stack_bias(v_device, state, p)?;
    Ok(rate_from_bias(&bias, state, p))
}

fn rate_from_bias(bias: &StackBias, state: DeviceState, p: &DeviceParams) -> f64 {
    let n = state.n_disc;
    let reset = bias.current > 0.0;
    // Boundary windows; exactly zero at the boundary being approached.
    let window = if reset {
        1.0 - (p.n_disc_min / n).min(1.0).powi(10)
    } else {
        1.0 - (n / p.n_disc_max).min(1.0).powi(10)
    };
    if window <= 0.0 {
        return 0.0;
    }
    let temp = filament_temperature(bias, p);
    let kt = p.kb * temp;
    // The contact voltage assists vacancy drift toward the AE only under SET.
    let v_field = if reset { bias.v_disc } else { bias.v_schottky + bias.v_disc };
    let field = v_field / p.l_det;
    let x = p.a_hop * p.z_vo * Q * field / (2.0 * kt);
    let c_mean = 0.5 * (n + p.n_plug);
    let hop = p.gamma0 * (-p.delta_e_a * Q / kt).exp() * 2.0 * x.sinh();
    -c_mean * p.a_hop / p.l_det * hop * window
}

/// Error control for [`integrate_step_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    /// Largest accepted relative change of `n_disc` per sub-step.
    pub rel_tol: f64,
    /// Smallest sub-step is `dt / 2^max_halvings`.
    pub max_halvings: u32,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-3, max_halvings: 64 }
    }
}

/// Advances the state by `dt` at constant bias.
pub fn integrate_step(
    state: DeviceState,
    v_device: f64,
    dt: f64,
    p: &DeviceParams,
) -> Result<DeviceState, DeviceError> {
    integrate_step_with(state, v_device, dt, p, &IntegratorOptions::default())
}

/// Explicit midpoint with adaptive sub-steps. A sub-step is accepted when the
/// relative state change stays below `opts.rel_tol`; the step then grows by
/// two for the next attempt.
pub fn integrate_step_with(
    state: DeviceState,
    v_device: f64,
    dt: f64,
    p: &DeviceParams,
    opts: &IntegratorOptions,
) -> Result<DeviceState, DeviceError> {
    advance(state, v_device, dt, None, p, opts).map(|(s, _)| s)
}

/// Integrates at constant bias until `n_disc` crosses `n_stop` or `t_max`
/// elapses, whichever comes first. Returns the state and the elapsed time.
/// The crossing is located to within one accepted sub-step.
pub fn integrate_until(
    state: DeviceState,
    v_device: f64,
    t_max: f64,
    n_stop: f64,
    p: &DeviceParams,
    opts: &IntegratorOptions,
) -> Result<(DeviceState, f64), DeviceError> {
    advance(state, v_device, t_max, Some(n_stop), p, opts)
}

fn advance(
    state: DeviceState,
    v_device: f64,
    dt: f64,
    stop: Option<f64>,
    p: &DeviceParams,
    opts: &IntegratorOptions,
) -> Result<(DeviceState, f64), DeviceError> {
    assert!(dt > 0.0, "integrate_step requires dt > 0");
    let start = state.clamped(p);
    let mut s = start;
    if v_device == 0.0 {
        return Ok((s, dt));
    }
    let min_step = dt / 2f64.powi(opts.max_halvings as i32);
    let mut t = 0.0;
    let mut h = dt;
    while t < dt {
        let h_try = h.min(dt - t);
        let k1 = state_derivative(v_device, s, p)?;
        if k1 == 0.0 {
            // Clamped at the boundary it is driven toward.
            break;
        }
        let boundary = if k1 > 0.0 { p.n_disc_max } else { p.n_disc_min };
        let mid_raw = s.n_disc + 0.5 * h_try * k1;
        let k2 = state_derivative(v_device, DeviceState::new(mid_raw).clamped(p), p)?;
        let next_raw = s.n_disc + h_try * k2;
        let crosses = |n: f64| (k1 > 0.0 && n >= boundary) || (k1 < 0.0 && n <= boundary);
        if (crosses(mid_raw) || crosses(next_raw)) && (boundary - s.n_disc).abs() <= opts.rel_tol * s.n_disc {
            // The remaining gap is inside the error budget; the boundary
            // layer beyond this point is arbitrarily stiff.
            s = DeviceState::new(boundary);
            break;
        }
        let next = DeviceState::new(next_raw).clamped(p);
        // Both stages count: a clamped midpoint can hide a large first slope.
        let change = (h_try * k1).abs().max((next.n_disc - s.n_disc).abs());
        if change > opts.rel_tol * s.n_disc || crosses(mid_raw) {
            if h_try <= min_step {
                return Err(DeviceError::StepTooLarge { v: v_device, n_disc: s.n_disc, min_step });
            }
            h = 0.5 * h_try;
            continue;
        }
        if t + h_try == t {
            return Err(DeviceError::StepTooLarge { v: v_device, n_disc: s.n_disc, min_step: h_try });
        }
        s = next;
        t += h_try;
        h = 2.0 * h_try;
        if stop.is_some_and(|n| crossed(start, s, n)) {
            return Ok((s, t));
        }
    }
    if stop.is_some_and(|n| crossed(start, s, n)) {
        return Ok((s, t));
    }
    Ok((s, dt))
}

fn crossed(from: DeviceState, to: DeviceState, n_stop: f64) -> bool {
    (from.n_disc < n_stop && to.n_disc >= n_stop) || (from.n_disc > n_stop && to.n_disc <= n_stop)
}

/// G = I(v_read) / v_read without touching the state.
pub fn conductance_readout(state: DeviceState, p: &DeviceParams, v_read: f64) -> Result<f64, DeviceError> {
    if !(v_read > 0.0 && v_read <= V_READ_MAX) {
        return Err(DeviceError::ReadVoltageOutOfRange(v_read));
    }
    Ok(device_current(v_read, state, p)? / v_read)
}

/// One sample of a voltage sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub v: f64,
    pub i: f64,
    pub state: DeviceState,
}

/// Sampling of a triangular sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Voltage spacing between samples.
    pub dv: f64,
    pub integrator: IntegratorOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { dv: 5e-3, integrator: IntegratorOptions::default() }
    }
}

/// Triangular sweep through `v_peaks` starting from `v_start`, at `rate` V/s.
pub fn quasi_static_sweep(
    v_start: f64,
    v_peaks: &[f64],
    rate: f64,
    p: &DeviceParams,
    initial: DeviceState,
) -> Result<Vec<SweepPoint>, DeviceError> {
    quasi_static_sweep_with(v_start, v_peaks, rate, p, initial, &SweepOptions::default())
}

pub fn quasi_static_sweep_with(
    v_start: f64,
    v_peaks: &[f64],
    rate: f64,
    p: &DeviceParams,
    initial: DeviceState,
    opts: &SweepOptions,
) -> Result<Vec<SweepPoint>, DeviceError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(DeviceError::InvalidRate(rate));
    }
    let mut state = initial.clamped(p);
    let mut out = vec![SweepPoint { v: v_start, i: device_current(v_start, state, p)?, state }];
    let mut v = v_start;
    for &target in v_peaks {
        let span = target - v;
        let n = ((span.abs() / opts.dv).ceil() as usize).max(1);
        let dt = span.abs() / rate / n as f64;
        let v_from = v;
        for k in 1..=n {
            let v_next = v_from + span * k as f64 / n as f64;
            let v_mid = 0.5 * (v + v_next);
            if dt > 0.0 {
                state = integrate_step_with(state, v_mid, dt, p, &opts.integrator)?;
            }
            v = v_next;
            out.push(SweepPoint { v, i: device_current(v, state, p)?, state });
        }
        v = target;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DeviceParams {
        DeviceParams::default()
    }

    #[test]
    fn default_params_are_consistent() {
        params().validate().unwrap();
    }

    #[test]
    fn zero_bias_carries_no_current() {
        let p = params();
        for n in [p.n_disc_min, 0.3, 5.0, p.n_disc_max] {
            assert_eq!(device_current(0.0, DeviceState::new(n), &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn lrs_read_resistance_is_low_kiloohm() {
        let p = params();
        let i = device_current(0.25, DeviceState::lrs(&p), &p).unwrap();
        let r = 0.25 / i;
        assert!((1e3..1e4).contains(&r), "R_LRS = {r}");
    }

    #[test]
    fn opposite_bias_gives_opposite_current() {
        let p = params();
        let s = DeviceState::new(1.0);
        let ip = device_current(0.25, s, &p).unwrap();
        let im = device_current(-0.25, s, &p).unwrap();
        assert!(ip > 0.0 && im < 0.0);
    }

    #[test]
    fn stack_drops_sum_to_bias() {
        let p = params();
        for v in [-1.5, -0.75, -0.1, 0.05, 0.25, 1.2] {
            for n in [p.n_disc_min, 0.1, 2.0, p.n_disc_max] {
                let b = stack_bias(v, DeviceState::new(n), &p).unwrap();
                let series = b.current * (p.r_tiox + p.r_line_heated(b.current));
                assert!((b.v_series - series).abs() <= 1e-9 * v.abs().max(1e-3), "v={v} n={n}");
            }
        }
    }

    #[test]
    fn derivative_signs_follow_polarity() {
        let p = params();
        let mid = DeviceState::new(1.0);
        assert!(state_derivative(-0.6, mid, &p).unwrap() > 0.0);
        assert!(state_derivative(0.9, mid, &p).unwrap() < 0.0);
        assert_eq!(state_derivative(0.0, mid, &p).unwrap(), 0.0);
    }

    #[test]
    fn derivative_clamps_at_target_boundary() {
        let p = params();
        assert_eq!(state_derivative(1.5, DeviceState::hrs(&p), &p).unwrap(), 0.0);
        assert_eq!(state_derivative(-1.0, DeviceState::lrs(&p), &p).unwrap(), 0.0);
    }

    #[test]
    fn set_rate_at_hrs_is_positive() {
        let p = params();
        assert!(state_derivative(-0.75, DeviceState::hrs(&p), &p).unwrap() > 0.0);
    }

    #[test]
    fn zero_bias_step_is_identity() {
        let p = params();
        let s = DeviceState::new(3.3);
        assert_eq!(integrate_step(s, 0.0, 1e-3, &p).unwrap(), s);
    }

    #[test]
    fn integrate_step_is_deterministic() {
        let p = params();
        let a = integrate_step(DeviceState::hrs(&p), -0.75, 1e-3, &p).unwrap();
        let b = integrate_step(DeviceState::hrs(&p), -0.75, 1e-3, &p).unwrap();
        assert_eq!(a.n_disc.to_bits(), b.n_disc.to_bits());
    }

    #[test]
    fn tiny_substep_budget_reports_step_too_large() {
        let p = params();
        let opts = IntegratorOptions { rel_tol: 1e-3, max_halvings: 4 };
        let err = integrate_step_with(DeviceState::hrs(&p), -0.75, 1e-3, &p, &opts).unwrap_err();
        assert!(matches!(err, DeviceError::StepTooLarge { .. }));
    }

    #[test]
    fn readout_guards_voltage() {
        let p = params();
        let s = DeviceState::lrs(&p);
        assert_eq!(conductance_readout(s, &p, 0.3), Err(DeviceError::ReadVoltageOutOfRange(0.3)));
        assert_eq!(conductance_readout(s, &p, 0.0), Err(DeviceError::ReadVoltageOutOfRange(0.0)));
        assert!(conductance_readout(s, &p, 0.25).is_ok());
    }

    #[test]
    fn lrs_conducts_more_than_hrs() {
        let p = params();
        let g_hrs = conductance_readout(DeviceState::hrs(&p), &p, 0.25).unwrap();
        let g_lrs = conductance_readout(DeviceState::lrs(&p), &p, 0.25).unwrap();
        assert!(g_lrs > g_hrs);
    }

    #[test]
    fn sweep_rejects_nonpositive_rate() {
        let p = params();
        let err = quasi_static_sweep(0.0, &[0.1], 0.0, &p, DeviceState::hrs(&p)).unwrap_err();
        assert_eq!(err, DeviceError::InvalidRate(0.0));
    }

    #[test]
    fn validate_rejects_inconsistent_area() {
        let p = DeviceParams { rd: 60e-9, ..params() };
        assert!(matches!(p.validate(), Err(DeviceError::InvalidParams(_))));
    }

    #[test]
    fn validate_rejects_inverted_bounds() {
        let p = DeviceParams { n_disc_min: 30.0, ..params() };
        assert!(p.validate().is_err());
    }
}

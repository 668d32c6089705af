//! Behavioral models of the array periphery: R-2R DAC, regulated voltage and
//! current sources, PWM pulse generation and the current-sourcing SAR ADC.

use thiserror::Error;

use crate::device::Terminal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("DAC code {code} outside 0..={max}")]
    CodeOutOfRange { code: i64, max: u32 },
    #[error("target {v} V outside DAC range [{min}, {max}] V")]
    TargetOutOfRange { v: f64, min: f64, max: f64 },
    #[error("reference {v} V outside opamp input range [{min}, {max}] V")]
    RefOutOfOpampRange { v: f64, min: f64, max: f64 },
    #[error("reference {v_ref} V above supply {v_dd} V")]
    RefAboveSupply { v_ref: f64, v_dd: f64 },
    #[error("negative column current {0} A; the read path only sources current")]
    NegativeCurrent(f64),
    #[error("column current {i} A above ADC full scale {full_scale} A")]
    AboveFullScale { i: f64, full_scale: f64 },
    #[error("invalid front-end spec: {0}")]
    InvalidSpec(String),
}

/// R-2R DAC whose code 0 already sits one LSB above ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DacSpec {
    pub bits: u32,
    pub lsb: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for DacSpec {
    fn default() -> Self {
        Self { bits: 8, lsb: 6.25e-3, v_min: 6.25e-3, v_max: 1.6 }
    }
}

impl DacSpec {
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.bits == 0 || self.bits > 24 {
            return Err(FrontendError::InvalidSpec(format!("dac.bits = {}", self.bits)));
        }
        let full = (1u64 << self.bits) as f64 * self.lsb;
        if (full - self.v_max).abs() > 1e-12 * self.v_max || self.v_min != self.lsb {
            return Err(FrontendError::InvalidSpec(format!(
                "dac levels inconsistent: 2^bits*lsb = {full}, v_max = {}, v_min = {}",
                self.v_max, self.v_min
            )));
        }
        Ok(())
    }
}

/// Output voltage for `code`: `(code + 1) * lsb`.
pub fn dac_voltage(code: i64, spec: &DacSpec) -> Result<f64, FrontendError> {
    let max = spec.max_code();
    if code < 0 || code > max as i64 {
        return Err(FrontendError::CodeOutOfRange { code, max });
    }
    Ok((code + 1) as f64 * spec.lsb)
}

/// Nearest DAC level to `v_target`; ties go to the lower code.
pub fn quantize_to_dac(v_target: f64, spec: &DacSpec) -> Result<(u32, f64), FrontendError> {
    if !(v_target >= spec.v_min && v_target <= spec.v_max) {
        return Err(FrontendError::TargetOutOfRange { v: v_target, min: spec.v_min, max: spec.v_max });
    }
    let ideal = v_target / spec.lsb - 1.0;
    let lower = (ideal.floor() as i64).clamp(0, spec.max_code() as i64);
    let upper = (lower + 1).min(spec.max_code() as i64);
    let v_lo = dac_voltage(lower, spec)?;
    let v_hi = dac_voltage(upper, spec)?;
    if (v_hi - v_target).abs() < (v_target - v_lo).abs() {
        Ok((upper as u32, v_hi))
    } else {
        Ok((lower as u32, v_lo))
    }
}

/// Opamp plus NMOS pass device in common-drain configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulatorSpec {
    pub v_in_min: f64,
    pub v_in_max: f64,
    /// Highest output the pass device can hold given its dropout.
    pub v_dropout_max: f64,
    /// Current limit of the pass device.
    pub i_compliance: f64,
}

impl Default for RegulatorSpec {
    fn default() -> Self {
        Self { v_in_min: 0.2, v_in_max: 1.6, v_dropout_max: 1.2, i_compliance: 1e-3 }
    }
}

impl RegulatorSpec {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if !(self.v_in_min < self.v_dropout_max && self.v_dropout_max < self.v_in_max) {
            return Err(FrontendError::InvalidSpec(format!(
                "regulator requires v_in_min < v_dropout_max < v_in_max, got {} / {} / {}",
                self.v_in_min, self.v_dropout_max, self.v_in_max
            )));
        }
        if !(self.i_compliance > 0.0) {
            return Err(FrontendError::InvalidSpec("regulator.i_compliance must be positive".into()));
        }
        Ok(())
    }
}

/// Regulated output for reference `v_ref`: follows the reference up to dropout.
pub fn regulate_voltage(v_ref: f64, spec: &RegulatorSpec) -> Result<f64, FrontendError> {
    if !(v_ref >= spec.v_in_min && v_ref <= spec.v_in_max) {
        return Err(FrontendError::RefOutOfOpampRange { v: v_ref, min: spec.v_in_min, max: spec.v_in_max });
    }
    Ok(v_ref.min(spec.v_dropout_max))
}

/// Voltage-to-current converter, `I = (v_dd - v_ref) / r_conv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentSourceSpec {
    pub v_dd: f64,
    pub r_conv: f64,
}

impl Default for CurrentSourceSpec {
    fn default() -> Self {
        Self { v_dd: 1.8, r_conv: 75e3 }
    }
}

impl CurrentSourceSpec {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if !(self.v_dd > 0.0 && self.r_conv > 0.0) {
            return Err(FrontendError::InvalidSpec(format!(
                "isource needs v_dd > 0 and r_conv > 0, got {} / {}",
                self.v_dd, self.r_conv
            )));
        }
        Ok(())
    }

    /// Reference that yields `i` through the converter.
    pub fn v_ref_for(&self, i: f64) -> f64 {
        self.v_dd - i * self.r_conv
    }
}

pub fn regulated_current(v_ref: f64, spec: &CurrentSourceSpec) -> Result<f64, FrontendError> {
    if v_ref > spec.v_dd {
        return Err(FrontendError::RefAboveSupply { v_ref, v_dd: spec.v_dd });
    }
    if !(v_ref > 0.0) {
        return Err(FrontendError::InvalidSpec(format!("isource reference must be positive, got {v_ref}")));
    }
    Ok((spec.v_dd - v_ref) / spec.r_conv)
}

/// One PWM channel: DAC-coded amplitude, `width` high per `period`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSpec {
    pub amplitude_code: u32,
    pub width: f64,
    pub period: f64,
    pub polarity_terminal: Terminal,
}

impl PulseSpec {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if !(self.width > 0.0 && self.width <= self.period) {
            return Err(FrontendError::InvalidSpec(format!(
                "pulse needs 0 < width <= period, got {} / {}",
                self.width, self.period
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant waveform: `levels[k]` holds on `[times[k], times[k+1])`.
/// The final breakpoint closes the waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub times: Vec<f64>,
    pub levels: Vec<f64>,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&b| b <= t) {
            0 => 0.0,
            k if k > self.levels.len() => 0.0,
            k => self.levels[k - 1],
        }
    }

    /// Exact integral of the piecewise-constant levels.
    pub fn integral(&self) -> f64 {
        self.levels.iter().enumerate().map(|(k, l)| l * (self.times[k + 1] - self.times[k])).sum()
    }
}

/// `n_periods` pulses of `dac_voltage(code)` followed by ground for the rest
/// of each period. Breakpoints are computed from the period index, not by
/// accumulation, so they carry no drift.
pub fn pwm_waveform(pulse: &PulseSpec, n_periods: usize, dac: &DacSpec) -> Result<Waveform, FrontendError> {
    pulse.validate()?;
    if n_periods == 0 {
        return Err(FrontendError::InvalidSpec("pwm needs at least one period".into()));
    }
    let amp = dac_voltage(pulse.amplitude_code as i64, dac)?;
    let mut times = Vec::with_capacity(2 * n_periods + 1);
    let mut levels: Vec<f64> = Vec::with_capacity(2 * n_periods);
    let mut push = |t: f64, level: f64| {
        if levels.last() != Some(&level) {
            times.push(t);
            levels.push(level);
        }
    };
    for k in 0..n_periods {
        let start = k as f64 * pulse.period;
        push(start, amp);
        if pulse.width < pulse.period {
            push(start + pulse.width, 0.0);
        }
    }
    times.push(n_periods as f64 * pulse.period);
    Ok(Waveform { times, levels })
}

/// Current-mode SAR ADC that sources the column current at `v_read_reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcSpec {
    pub bits: u32,
    pub i_full_scale: f64,
    /// Regulated column voltage the ADC can hold.
    pub v_read_reg: f64,
    /// Read voltage used unless overridden.
    pub v_read_default: f64,
}

impl Default for AdcSpec {
    fn default() -> Self {
        Self { bits: 8, i_full_scale: 256e-6, v_read_reg: 0.7, v_read_default: 0.25 }
    }
}

impl AdcSpec {
    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.v_read_reg > 0.7 || self.v_read_default > self.v_read_reg {
            return Err(FrontendError::InvalidSpec(format!(
                "adc read voltages must satisfy v_read_default <= v_read_reg <= 0.7, got {} / {}",
                self.v_read_default, self.v_read_reg
            )));
        }
        if self.bits == 0 || self.bits > 24 || !(self.i_full_scale > 0.0) {
            return Err(FrontendError::InvalidSpec("adc needs 1..=24 bits and positive full scale".into()));
        }
        Ok(())
    }

    pub fn lsb(&self) -> f64 {
        self.i_full_scale / (1u64 << self.bits) as f64
    }
}

/// Successive-approximation conversion of a sourced column current.
pub fn adc_read(i_column: f64, spec: &AdcSpec) -> Result<(u32, f64), FrontendError> {
    if i_column < 0.0 {
        return Err(FrontendError::NegativeCurrent(i_column));
    }
    if i_column > spec.i_full_scale {
        return Err(FrontendError::AboveFullScale { i: i_column, full_scale: spec.i_full_scale });
    }
    // Bit-serial search; equivalent to floor(i / lsb) clamped to the top code.
    let levels = 1u64 << spec.bits;
    let mut code: u64 = 0;
    for bit in (0..spec.bits).rev() {
        let trial = code | (1 << bit);
        if trial as f64 * spec.i_full_scale <= i_column * levels as f64 {
            code = trial;
        }
    }
    Ok((code as u32, code as f64 * spec.lsb()))
}

/// The front-end blocks shared by one array.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrontendSpecs {
    pub dac: DacSpec,
    pub regulator: RegulatorSpec,
    pub isource: CurrentSourceSpec,
    pub adc: AdcSpec,
}

impl FrontendSpecs {
    pub fn validate(&self) -> Result<(), FrontendError> {
        self.dac.validate()?;
        self.regulator.validate()?;
        self.isource.validate()?;
        self.adc.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dac_endpoints_and_lrs_code() {
        let d = DacSpec::default();
        d.validate().unwrap();
        assert_eq!(dac_voltage(0, &d).unwrap(), 6.25e-3);
        assert_eq!(dac_voltage(255, &d).unwrap(), 1.6);
        assert_eq!(dac_voltage(119, &d).unwrap(), 0.75);
        assert!(matches!(dac_voltage(256, &d), Err(FrontendError::CodeOutOfRange { .. })));
        assert!(matches!(dac_voltage(-1, &d), Err(FrontendError::CodeOutOfRange { .. })));
    }

    #[test]
    fn quantize_examples() {
        let d = DacSpec::default();
        assert_eq!(quantize_to_dac(0.75, &d).unwrap(), (119, 0.75));
        assert_eq!(quantize_to_dac(6.25e-3, &d).unwrap(), (0, 6.25e-3));
        let (code, v) = quantize_to_dac(0.253, &d).unwrap();
        assert_eq!(code, 39);
        assert_eq!(v, 0.25);
        assert!(quantize_to_dac(1.7, &d).is_err());
        assert!(quantize_to_dac(0.0, &d).is_err());
    }

    #[test]
    fn quantize_ties_go_low() {
        let d = DacSpec::default();
        // Halfway between code 0 (6.25 mV) and code 1 (12.5 mV).
        assert_eq!(quantize_to_dac(9.375e-3, &d).unwrap().0, 0);
    }

    #[test]
    fn regulator_clamps_at_dropout() {
        let r = RegulatorSpec::default();
        assert_eq!(regulate_voltage(0.75, &r).unwrap(), 0.75);
        assert_eq!(regulate_voltage(1.5, &r).unwrap(), 1.2);
        assert_eq!(regulate_voltage(0.25, &r).unwrap(), 0.25);
        assert!(matches!(regulate_voltage(0.1, &r), Err(FrontendError::RefOutOfOpampRange { .. })));
        assert!(matches!(regulate_voltage(1.7, &r), Err(FrontendError::RefOutOfOpampRange { .. })));
    }

    #[test]
    fn current_source_calibration() {
        let s = CurrentSourceSpec::default();
        assert_eq!(regulated_current(1.8, &s).unwrap(), 0.0);
        assert!((regulated_current(0.3, &s).unwrap() - 20e-6).abs() < 1e-18);
        // Eq. (2) with the 0.3 V calibration lands below the 3.5 uA endpoint.
        let i_top = regulated_current(1.6, &s).unwrap();
        assert!((i_top - 2.0 / 750e3).abs() < 1e-18);
        assert!(matches!(regulated_current(1.9, &s), Err(FrontendError::RefAboveSupply { .. })));
    }

    #[test]
    fn pwm_full_duty_is_one_segment() {
        let d = DacSpec::default();
        let p = PulseSpec { amplitude_code: 119, width: 1e-3, period: 1e-3, polarity_terminal: Terminal::OhmicElectrode };
        let w = pwm_waveform(&p, 10, &d).unwrap();
        assert_eq!(w.levels, vec![0.75]);
        assert_eq!(w.times, vec![0.0, 10e-3]);
    }

    #[test]
    fn pwm_half_duty_single_pulse() {
        let d = DacSpec::default();
        let p = PulseSpec { amplitude_code: 39, width: 0.5e-3, period: 1e-3, polarity_terminal: Terminal::ActiveElectrode };
        let w = pwm_waveform(&p, 1, &d).unwrap();
        assert_eq!(w.times, vec![0.0, 0.5e-3, 1e-3]);
        assert_eq!(w.levels, vec![0.25, 0.0]);
        assert_eq!(w.value_at(0.2e-3), 0.25);
        assert_eq!(w.value_at(0.7e-3), 0.0);
    }

    #[test]
    fn pwm_rejects_bad_width() {
        let d = DacSpec::default();
        let p = PulseSpec { amplitude_code: 1, width: 2e-3, period: 1e-3, polarity_terminal: Terminal::ActiveElectrode };
        assert!(pwm_waveform(&p, 1, &d).is_err());
    }

    #[test]
    fn adc_examples() {
        let a = AdcSpec::default();
        assert_eq!(adc_read(0.0, &a).unwrap(), (0, 0.0));
        assert_eq!(adc_read(a.i_full_scale, &a).unwrap().0, 255);
        let (code, iq) = adc_read(135e-6, &a).unwrap();
        assert_eq!(code, 135);
        assert!((iq - 135e-6).abs() < 1e-18);
        assert!(matches!(adc_read(-1e-9, &a), Err(FrontendError::NegativeCurrent(_))));
    }
}

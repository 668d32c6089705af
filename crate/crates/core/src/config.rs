//! Layered `key = value` configuration.
//!
//! Device parameters use their bare names. Everything else carries a prefix:
//! `dac.`, `regulator.`, `isource.`, `adc.`, `array.`, `drive.`, `program.`,
//! `transient.`, `integrator.`, `sweep.`, `map.`, plus the top-level `seed`. Lines
//! starting with `#` and blank lines are ignored. Unknown keys are errors.

use std::fmt::Write as _;

use thiserror::Error;

use crate::device::{DeviceError, DeviceParams, SweepOptions};
use crate::frontend::{FrontendError, FrontendSpecs};
use crate::network::{ArrayConfig, NetworkError};
use crate::programming::{
    ProgramContext, ProgramError, ProgramMode, ProgramOptions, ProgramTarget, ReadPath, StepPolicy, WeightMapSpec,
};
use crate::transient::{TransientError, TransientOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },
    #[error("{source_name}:{line}: unknown key `{key}`")]
    UnknownKey { source_name: String, line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl From<DeviceError> for ConfigError {
    fn from(e: DeviceError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<FrontendError> for ConfigError {
    fn from(e: FrontendError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<NetworkError> for ConfigError {
    fn from(e: NetworkError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<TransientError> for ConfigError {
    fn from(e: TransientError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<ProgramError> for ConfigError {
    fn from(e: ProgramError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Triangular sweep settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSettings {
    pub v_neg: f64,
    pub v_pos: f64,
    pub rate: f64,
    pub dv: f64,
    /// Smallest acceptable HRS/LRS read-resistance ratio after a full loop.
    pub min_on_off_ratio: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { v_neg: -1.0, v_pos: 1.5, rate: 0.67, dv: 5e-3, min_on_off_ratio: 20.0 }
    }
}

/// Weight range and the conductance window it maps onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSettings {
    pub w_min: f64,
    pub w_max: f64,
    pub g_min: f64,
    pub g_max: f64,
}

impl Default for MapSettings {
    fn default() -> Self {
        Self { w_min: 0.0, w_max: 1.0, g_min: 2e-5, g_max: 6e-4 }
    }
}

/// Defaults applied to every programming target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetDefaults {
    pub tolerance: f64,
    pub max_pulses: usize,
    pub mode: ProgramMode,
}

impl Default for TargetDefaults {
    fn default() -> Self {
        let t = ProgramTarget::new(0, 0, 0.0);
        Self { tolerance: t.tolerance, max_pulses: t.max_pulses, mode: t.mode }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub device: DeviceParams,
    pub frontend: FrontendSpecs,
    pub array: ArrayConfig,
    pub transient: TransientOptions,
    pub program: ProgramOptions,
    pub target: TargetDefaults,
    pub sweep: SweepSettings,
    pub map: MapSettings,
    pub seed: u64,
}

fn parse_f64(v: &str) -> Result<f64, String> {
    v.parse::<f64>().map_err(|_| format!("`{v}` is not a number"))
}

fn parse_uint<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

impl Config {
    /// Applies one `key`/`value` pair. `Ok(false)` means the key is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        let f = || parse_f64(value);
        let fe = &mut self.frontend;
        match key {
            "seed" => self.seed = parse_uint(value)?,
            "dac.bits" => fe.dac.bits = parse_uint(value)?,
            "dac.lsb" => fe.dac.lsb = f()?,
            "dac.v_min" => fe.dac.v_min = f()?,
            "dac.v_max" => fe.dac.v_max = f()?,
            "regulator.v_in_min" => fe.regulator.v_in_min = f()?,
            "regulator.v_in_max" => fe.regulator.v_in_max = f()?,
            "regulator.v_dropout_max" => fe.regulator.v_dropout_max = f()?,
            "regulator.i_compliance" => fe.regulator.i_compliance = f()?,
            "isource.v_dd" => fe.isource.v_dd = f()?,
            "isource.r_conv" => fe.isource.r_conv = f()?,
            "adc.bits" => fe.adc.bits = parse_uint(value)?,
            "adc.i_full_scale" => fe.adc.i_full_scale = f()?,
            "adc.v_read_reg" => fe.adc.v_read_reg = f()?,
            "adc.v_read_default" => fe.adc.v_read_default = f()?,
            "array.n_rows" => self.array.n_rows = parse_uint(value)?,
            "array.n_cols" => self.array.n_cols = parse_uint(value)?,
            "array.r_seg_row" => self.array.r_seg_row = f()?,
            "array.r_seg_col" => self.array.r_seg_col = f()?,
            "array.r_switch_on" => self.array.r_switch_on = f()?,
            "array.r_switch_off" => self.array.r_switch_off = f()?,
            "array.ideal_switches" => self.array.ideal_switches = parse_bool(value)?,
            "drive.v_read" => self.program.v_read = f()?,
            "drive.set_amplitude" => self.program.set_amplitude = f()?,
            "drive.reset_amplitude" => self.program.reset_amplitude = f()?,
            "drive.pulse_width" => self.program.pulse_width = f()?,
            "program.policy" => {
                self.program.policy = match value {
                    "model_guided" => StepPolicy::ModelGuided,
                    "width_halving" => StepPolicy::WidthHalving,
                    _ => return Err(format!("`{value}` is not one of model_guided, width_halving")),
                }
            }
            "program.read_path" => {
                self.program.read_path = match value {
                    "analog" => ReadPath::Analog,
                    "adc" => ReadPath::Adc,
                    _ => return Err(format!("`{value}` is not one of analog, adc")),
                }
            }
            "program.mode" => {
                self.target.mode = match value {
                    "voltage" => ProgramMode::Voltage,
                    "current" => ProgramMode::Current,
                    _ => return Err(format!("`{value}` is not one of voltage, current")),
                }
            }
            "program.tolerance" => self.target.tolerance = f()?,
            "program.max_pulses" => self.target.max_pulses = parse_uint(value)?,
            "program.step_cap" => self.program.step_cap = f()?,
            "program.current_start" => self.program.current_start = f()?,
            "program.current_growth" => self.program.current_growth = f()?,
            "program.g_switch_factor" => self.program.g_switch_factor = f()?,
            "transient.dt_max" => self.transient.dt_max = f()?,
            "transient.state_tol" => self.transient.state_tol = f()?,
            "transient.max_halvings" => self.transient.max_halvings = parse_uint(value)?,
            "transient.midpoint" => self.transient.midpoint = parse_bool(value)?,
            "integrator.rel_tol" => self.transient.integrator.rel_tol = f()?,
            "integrator.max_halvings" => self.transient.integrator.max_halvings = parse_uint(value)?,
            "sweep.v_neg" => self.sweep.v_neg = f()?,
            "sweep.v_pos" => self.sweep.v_pos = f()?,
            "sweep.rate" => self.sweep.rate = f()?,
            "sweep.dv" => self.sweep.dv = f()?,
            "sweep.min_on_off_ratio" => self.sweep.min_on_off_ratio = f()?,
            "map.w_min" => self.map.w_min = f()?,
            "map.w_max" => self.map.w_max = f()?,
            "map.g_min" => self.map.g_min = f()?,
            "map.g_max" => self.map.g_max = f()?,
            _ => match self.device.field_mut(key) {
                Some(slot) => *slot = f()?,
                None => return Ok(false),
            },
        }
        Ok(true)
    }

    /// Applies a config file body. `source_name` labels error messages.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Parse {
                source_name: source_name.into(),
                line,
                message: format!("expected `key = value`, got `{body}`"),
            })?;
            self.apply_pair(key.trim(), value.trim(), source_name, line)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override, as given on the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Parse {
            source_name: "--set".into(),
            line: 0,
            message: format!("expected key=value, got `{pair}`"),
        })?;
        self.apply_pair(key.trim(), value.trim(), "--set", 0)
    }

    fn apply_pair(&mut self, key: &str, value: &str, source_name: &str, line: usize) -> Result<(), ConfigError> {
        match self.set(key, value) {
            Ok(true) => Ok(()),
            Ok(false) => Err(ConfigError::UnknownKey { source_name: source_name.into(), line, key: key.into() }),
            Err(message) => Err(ConfigError::Parse { source_name: source_name.into(), line, message: format!("{key}: {message}") }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.device.validate()?;
        self.frontend.validate()?;
        self.array.validate()?;
        self.transient.validate()?;
        self.program.validate()?;
        let s = &self.sweep;
        if !(s.v_neg < 0.0 && s.v_pos > 0.0 && s.rate > 0.0 && s.dv > 0.0) {
            return Err(ConfigError::Invalid(format!("sweep needs v_neg < 0 < v_pos, rate > 0, dv > 0; got {s:?}")));
        }
        self.weight_map().validate()?;
        if !(self.target.tolerance > 0.0 && self.target.max_pulses > 0) {
            return Err(ConfigError::Invalid("program.tolerance and program.max_pulses must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let fe = &self.frontend;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        for key in DeviceParams::KEYS {
            put(key, format!("{:e}", self.device.field(key).unwrap_or(f64::NAN)));
        }
        put("dac.bits", fe.dac.bits.to_string());
        put("dac.lsb", format!("{:e}", fe.dac.lsb));
        put("dac.v_min", format!("{:e}", fe.dac.v_min));
        put("dac.v_max", format!("{:e}", fe.dac.v_max));
        put("regulator.v_in_min", format!("{:e}", fe.regulator.v_in_min));
        put("regulator.v_in_max", format!("{:e}", fe.regulator.v_in_max));
        put("regulator.v_dropout_max", format!("{:e}", fe.regulator.v_dropout_max));
        put("regulator.i_compliance", format!("{:e}", fe.regulator.i_compliance));
        put("isource.v_dd", format!("{:e}", fe.isource.v_dd));
        put("isource.r_conv", format!("{:e}", fe.isource.r_conv));
        put("adc.bits", fe.adc.bits.to_string());
        put("adc.i_full_scale", format!("{:e}", fe.adc.i_full_scale));
        put("adc.v_read_reg", format!("{:e}", fe.adc.v_read_reg));
        put("adc.v_read_default", format!("{:e}", fe.adc.v_read_default));
        let a = &self.array;
        put("array.n_rows", a.n_rows.to_string());
        put("array.n_cols", a.n_cols.to_string());
        put("array.r_seg_row", format!("{:e}", a.r_seg_row));
        put("array.r_seg_col", format!("{:e}", a.r_seg_col));
        put("array.r_switch_on", format!("{:e}", a.r_switch_on));
        put("array.r_switch_off", format!("{:e}", a.r_switch_off));
        put("array.ideal_switches", a.ideal_switches.to_string());
        let p = &self.program;
        put("drive.v_read", format!("{:e}", p.v_read));
        put("drive.set_amplitude", format!("{:e}", p.set_amplitude));
        put("drive.reset_amplitude", format!("{:e}", p.reset_amplitude));
        put("drive.pulse_width", format!("{:e}", p.pulse_width));
        put("program.policy", match p.policy {
            StepPolicy::ModelGuided => "model_guided".into(),
            StepPolicy::WidthHalving => "width_halving".into(),
        });
        put("program.read_path", match p.read_path {
            ReadPath::Analog => "analog".into(),
            ReadPath::Adc => "adc".into(),
        });
        put("program.mode", match self.target.mode {
            ProgramMode::Voltage => "voltage".into(),
            ProgramMode::Current => "current".into(),
        });
        put("program.tolerance", format!("{:e}", self.target.tolerance));
        put("program.max_pulses", self.target.max_pulses.to_string());
        put("program.step_cap", format!("{:e}", p.step_cap));
        put("program.current_start", format!("{:e}", p.current_start));
        put("program.current_growth", format!("{:e}", p.current_growth));
        put("program.g_switch_factor", format!("{:e}", p.g_switch_factor));
        let t = &self.transient;
        put("transient.dt_max", format!("{:e}", t.dt_max));
        put("transient.state_tol", format!("{:e}", t.state_tol));
        put("transient.max_halvings", t.max_halvings.to_string());
        put("transient.midpoint", t.midpoint.to_string());
        put("integrator.rel_tol", format!("{:e}", t.integrator.rel_tol));
        put("integrator.max_halvings", t.integrator.max_halvings.to_string());
        let w = &self.sweep;
        put("sweep.v_neg", format!("{:e}", w.v_neg));
        put("sweep.v_pos", format!("{:e}", w.v_pos));
        put("sweep.rate", format!("{:e}", w.rate));
        put("sweep.dv", format!("{:e}", w.dv));
        put("sweep.min_on_off_ratio", format!("{:e}", w.min_on_off_ratio));
        put("map.w_min", format!("{:e}", self.map.w_min));
        put("map.w_max", format!("{:e}", self.map.w_max));
        put("map.g_min", format!("{:e}", self.map.g_min));
        put("map.g_max", format!("{:e}", self.map.g_max));
        put("seed", self.seed.to_string());
        s
    }

    pub fn program_context(&self) -> ProgramContext {
        ProgramContext {
            params: self.device.clone(),
            frontend: self.frontend,
            array: self.array,
            transient: self.transient,
            options: self.program,
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions { dv: self.sweep.dv, integrator: self.transient.integrator }
    }

    pub fn weight_map(&self) -> WeightMapSpec {
        WeightMapSpec {
            g_min: self.map.g_min,
            g_max: self.map.g_max,
            w_min: self.map.w_min,
            w_max: self.map.w_max,
            tolerance: self.target.tolerance,
            mode: self.target.mode,
            max_pulses: self.target.max_pulses,
        }
    }

    pub fn target(&self, row: usize, col: usize, g: f64) -> ProgramTarget {
        ProgramTarget {
            row,
            col,
            g_target: g,
            tolerance: self.target.tolerance,
            mode: self.target.mode,
            max_pulses: self.target.max_pulses,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = Config::default();
        c.apply_text("array.n_rows = 3\nprogram.policy = width_halving\nl_cell = 3.1e-9\n", "t").unwrap();
        let mut d = Config::default();
        d.apply_text(&c.canonical_text(), "canon").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = Config::default();
        let e = c.apply_text("# header\n\nadc.bits = eight\n", "f.cfg").unwrap_err();
        assert_eq!(e, ConfigError::Parse { source_name: "f.cfg".into(), line: 3, message: "adc.bits: `eight` is not a non-negative integer".into() });
        let e = c.apply_text("dac.bits = 8\nfoo.bar = 1\n", "g.cfg").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { line: 2, .. }));
        assert!(c.apply_text("just words\n", "h").is_err());
    }

    #[test]
    fn overrides_apply_last() {
        let mut c = Config::default();
        c.apply_text("regulator.i_compliance = 2e-3\n", "a").unwrap();
        c.apply_override("regulator.i_compliance=5e-4").unwrap();
        assert_eq!(c.frontend.regulator.i_compliance, 5e-4);
    }

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }
}

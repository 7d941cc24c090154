//! Virtual source-measure unit: a voltage source with current readback,
//! compliance clamping and a SCPI error queue.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parser::{Arg, ScpiCommand};
use crate::format::sci6;

pub const IDENTITY: &str = "VirtualLab,Model 2450,SIM-0001,1.0";
pub const RESET_CURRENT_LIMIT: f64 = 0.1;
/// Largest source magnitude the simulated unit accepts, in volts.
pub const MAX_SOURCE_VOLTS: f64 = 210.0;

pub const ERR_UNDEFINED_HEADER: (i32, &str) = (-113, "Undefined header");
pub const ERR_SYNTAX: (i32, &str) = (-102, "Syntax error");
pub const ERR_DATA_TYPE: (i32, &str) = (-104, "Data type error");
pub const ERR_PARAM_NOT_ALLOWED: (i32, &str) = (-108, "Parameter not allowed");
pub const ERR_MISSING_PARAM: (i32, &str) = (-109, "Missing parameter");
pub const ERR_OUT_OF_RANGE: (i32, &str) = (-222, "Data out of range");
pub const ERR_ILLEGAL_VALUE: (i32, &str) = (-224, "Illegal parameter value");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceFunction {
    Volt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureFunction {
    Curr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScpiError {
    pub code: i32,
    pub message: String,
}

impl ScpiError {
    /// Wire form used by `:SYST:ERR?`, e.g. `-113,"Undefined header"`.
    pub fn wire(&self) -> String {
        format!("{},\"{}\"", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmuState {
    pub source_function: SourceFunction,
    pub source_level: f64,
    current_limit: f64,
    pub measure_function: MeasureFunction,
    pub output_on: bool,
    error_queue: VecDeque<ScpiError>,
}

impl Default for SmuState {
    /// The `*RST` state: 0 V, 100 mA compliance, output off, empty queue.
    fn default() -> Self {
        Self {
            source_function: SourceFunction::Volt,
            source_level: 0.0,
            current_limit: RESET_CURRENT_LIMIT,
            measure_function: MeasureFunction::Curr,
            output_on: false,
            error_queue: VecDeque::new(),
        }
    }
}

impl SmuState {
    pub fn current_limit(&self) -> f64 {
        self.current_limit
    }

    /// Rejects non-positive or non-finite limits, leaving the state unchanged.
    pub fn set_current_limit(&mut self, amps: f64) -> bool {
        if amps > 0.0 && amps.is_finite() {
            self.current_limit = amps;
            true
        } else {
            false
        }
    }

    pub fn push_error(&mut self, (code, message): (i32, &str)) {
        self.error_queue.push_back(ScpiError { code, message: message.to_string() });
    }

    /// Oldest queued error, or `0,"No error"` when the queue is empty.
    pub fn pop_error(&mut self) -> ScpiError {
        self.error_queue
            .pop_front()
            .unwrap_or_else(|| ScpiError { code: 0, message: "No error".into() })
    }

    pub fn pending_errors(&self) -> usize {
        self.error_queue.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("resistance must be positive and finite, got {0}")]
    Resistance(f64),
    #[error("sensitivity must be non-negative, got {0}")]
    Sensitivity(f64),
    #[error("irradiance must lie in [0, 1], got {0}")]
    Irradiance(f64),
}

/// What is wired across the SMU terminals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceModel {
    Open,
    Ohmic { resistance: f64 },
    /// Phenomenological photoresistor: `R_eff = r_dark / (1 + k * E)`.
    Photoconductor { r_dark: f64, sensitivity_k: f64, irradiance: f64 },
}

impl DeviceModel {
    pub fn ohmic(resistance: f64) -> Result<Self, DeviceError> {
        let d = DeviceModel::Ohmic { resistance };
        d.validate()?;
        Ok(d)
    }

    pub fn photoconductor(r_dark: f64, sensitivity_k: f64, irradiance: f64) -> Result<Self, DeviceError> {
        let d = DeviceModel::Photoconductor { r_dark, sensitivity_k, irradiance };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        match *self {
            DeviceModel::Open => Ok(()),
            DeviceModel::Ohmic { resistance } => {
                if resistance > 0.0 && resistance.is_finite() {
                    Ok(())
                } else {
                    Err(DeviceError::Resistance(resistance))
                }
            }
            DeviceModel::Photoconductor { r_dark, sensitivity_k, irradiance } => {
                if !(r_dark > 0.0 && r_dark.is_finite()) {
                    return Err(DeviceError::Resistance(r_dark));
                }
                if !(sensitivity_k >= 0.0 && sensitivity_k.is_finite()) {
                    return Err(DeviceError::Sensitivity(sensitivity_k));
                }
                if !(0.0..=1.0).contains(&irradiance) {
                    return Err(DeviceError::Irradiance(irradiance));
                }
                Ok(())
            }
        }
    }

    /// Effective resistance, or `None` for an open circuit.
    pub fn effective_resistance(&self) -> Option<f64> {
        match *self {
            DeviceModel::Open => None,
            DeviceModel::Ohmic { resistance } => Some(resistance),
            DeviceModel::Photoconductor { r_dark, sensitivity_k, irradiance } => {
                Some(r_dark / (1.0 + sensitivity_k * irradiance))
            }
        }
    }

    /// Updates the illumination of a photoconductor, clamped into [0, 1].
    /// Other device kinds ignore light.
    pub fn set_irradiance(&mut self, value: f64) {
        if let DeviceModel::Photoconductor { irradiance, .. } = self {
            *irradiance = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
        }
    }
}

/// Current the unit reads back for its present source level.
pub fn measure_current(state: &SmuState, device: &DeviceModel) -> f64 {
    if !state.output_on {
        return 0.0;
    }
    let Some(r_eff) = device.effective_resistance() else {
        return 0.0;
    };
    let limit = state.current_limit();
    (state.source_level / r_eff).clamp(-limit, limit)
}

fn single_number(cmd: &ScpiCommand) -> Result<f64, (i32, &'static str)> {
    match cmd.args.as_slice() {
        [] => Err(ERR_MISSING_PARAM),
        [Arg::Number(v)] => Ok(*v),
        [_] => Err(ERR_DATA_TYPE),
        _ => Err(ERR_PARAM_NOT_ALLOWED),
    }
}

fn single_keyword(cmd: &ScpiCommand) -> Result<String, (i32, &'static str)> {
    match cmd.args.as_slice() {
        [] => Err(ERR_MISSING_PARAM),
        [a] => a.keyword().ok_or(ERR_DATA_TYPE),
        _ => Err(ERR_PARAM_NOT_ALLOWED),
    }
}

/// True for the headers that trigger a measurement.
pub fn is_measurement(cmd: &ScpiCommand) -> bool {
    cmd.is_query && (cmd.header_is(&["READ"]) || cmd.header_is(&["MEAS", "CURR"]))
}

/// Applies one command to the unit.
///
/// Set commands return `None`. Query commands always return `Some`: the
/// response text, or an empty line when the query failed (the reason is
/// queued). Protocol errors never escape; they land in the error queue.
pub fn dispatch(state: &mut SmuState, device: &DeviceModel, cmd: &ScpiCommand) -> Option<String> {
    let outcome = apply(state, device, cmd);
    match outcome {
        Ok(resp) => resp,
        Err(e) => {
            state.push_error(e);
            cmd.is_query.then(String::new)
        }
    }
}

fn no_args(cmd: &ScpiCommand) -> Result<(), (i32, &'static str)> {
    if cmd.args.is_empty() {
        Ok(())
    } else {
        Err(ERR_PARAM_NOT_ALLOWED)
    }
}

fn apply(
    state: &mut SmuState,
    device: &DeviceModel,
    cmd: &ScpiCommand,
) -> Result<Option<String>, (i32, &'static str)> {
    let path: Vec<&str> = cmd.path.iter().map(String::as_str).collect();
    match (path.as_slice(), cmd.is_query) {
        (["*IDN"], true) => no_args(cmd).map(|_| Some(IDENTITY.to_string())),
        (["*RST"], false) => {
            no_args(cmd)?;
            *state = SmuState::default();
            Ok(None)
        }
        (["*CLS"], false) => {
            no_args(cmd)?;
            state.error_queue.clear();
            Ok(None)
        }
        (["SOUR", "FUNC"], false) => match single_keyword(cmd)?.as_str() {
            "VOLT" | "VOLTAGE" => {
                state.source_function = SourceFunction::Volt;
                Ok(None)
            }
            _ => Err(ERR_ILLEGAL_VALUE),
        },
        (["SOUR", "FUNC"], true) => no_args(cmd).map(|_| Some("VOLT".to_string())),
        (["SOUR", "VOLT"], false) => {
            let v = single_number(cmd)?;
            if v.abs() > MAX_SOURCE_VOLTS {
                return Err(ERR_OUT_OF_RANGE);
            }
            state.source_level = v;
            Ok(None)
        }
        (["SOUR", "VOLT"], true) => no_args(cmd).map(|_| Some(sci6(state.source_level))),
        (["SOUR", "VOLT", "ILIM"], false) => {
            let v = single_number(cmd)?;
            if state.set_current_limit(v) {
                Ok(None)
            } else {
                Err(ERR_OUT_OF_RANGE)
            }
        }
        (["SOUR", "VOLT", "ILIM"], true) => no_args(cmd).map(|_| Some(sci6(state.current_limit))),
        (["SENS", "FUNC"], false) => match single_keyword(cmd)?.as_str() {
            "CURR" | "CURRENT" | "CURR:DC" => {
                state.measure_function = MeasureFunction::Curr;
                Ok(None)
            }
            _ => Err(ERR_ILLEGAL_VALUE),
        },
        (["SENS", "FUNC"], true) => no_args(cmd).map(|_| Some("\"CURR:DC\"".to_string())),
        (["OUTP"], false) => {
            let on = match cmd.args.as_slice() {
                [Arg::Number(v)] if *v == 1.0 => true,
                [Arg::Number(v)] if *v == 0.0 => false,
                [Arg::Number(_)] => return Err(ERR_ILLEGAL_VALUE),
                _ => match single_keyword(cmd)?.as_str() {
                    "ON" => true,
                    "OFF" => false,
                    _ => return Err(ERR_ILLEGAL_VALUE),
                },
            };
            state.output_on = on;
            Ok(None)
        }
        (["OUTP"], true) => no_args(cmd).map(|_| Some(if state.output_on { "1" } else { "0" }.into())),
        (["READ"], true) | (["MEAS", "CURR"], true) => {
            no_args(cmd)?;
            Ok(Some(sci6(measure_current(state, device))))
        }
        (["SYST", "ERR"], true) => no_args(cmd).map(|_| Some(state.pop_error().wire())),
        _ => Err(ERR_UNDEFINED_HEADER),
    }
}

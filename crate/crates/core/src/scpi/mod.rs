//! SCPI command parsing and the virtual source-measure unit.

mod parser;
mod smu;

pub use parser::{canonical_segment, expected_responses, parse_scpi, Arg, ParseError, ScpiCommand, MNEMONICS};
pub use smu::{
    dispatch, is_measurement, measure_current, DeviceError, DeviceModel, MeasureFunction, ScpiError,
    SmuState, SourceFunction, ERR_SYNTAX, ERR_UNDEFINED_HEADER, IDENTITY, MAX_SOURCE_VOLTS,
    RESET_CURRENT_LIMIT,
};

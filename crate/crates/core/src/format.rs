//! Numeric formatting shared by instrument replies and CSV exports.

/// Formats `value` in scientific notation with six significant digits,
/// e.g. `1.00000E-03`. The exponent always carries a sign and at least two
/// digits so that columns line up in CSV output.
pub fn sci6(value: f64) -> String {
    // -0.0 would otherwise render as "-0.00000E+00"
    let value = if value == 0.0 { 0.0 } else { value };
    let raw = format!("{value:.5E}");
    match raw.split_once('E') {
        Some((mantissa, exp)) => {
            let (sign, digits) = match exp.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', exp),
            };
            format!("{mantissa}E{sign}{digits:0>2}")
        }
        None => raw,
    }
}

/// Renders a number for interpolation into command text. Integral values
/// print without a fractional part; everything else is rounded to twelve
/// significant digits so accumulated float noise (`0.30000000000000004`)
/// does not leak into instrument commands.
pub fn plain_number(value: f64) -> String {
    if !value.is_finite() {
        return format!("{value}");
    }
    if value.fract() == 0.0 && value.abs() < 1e15 {
        return format!("{}", value as i64);
    }
    let rounded: f64 = format!("{value:.11e}").parse().unwrap_or(value);
    format!("{rounded}")
}

use std::fmt;

use thiserror::Error;

/// Long and short forms of every mnemonic in the command tree.
/// Canonical segments are the short forms.
pub const MNEMONICS: &[(&str, &str)] = &[
    ("SOURCE", "SOUR"),
    ("VOLTAGE", "VOLT"),
    ("CURRENT", "CURR"),
    ("FUNCTION", "FUNC"),
    ("SENSE", "SENS"),
    ("OUTPUT", "OUTP"),
    ("MEASURE", "MEAS"),
    ("SYSTEM", "SYST"),
    ("ERROR", "ERR"),
    ("ILIMIT", "ILIM"),
    ("READ", "READ"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Number(f64),
    /// Quoted string data, unquoted.
    Str(String),
    /// Unquoted character data such as `ON` or `VOLT`.
    Word(String),
}

impl Arg {
    /// Character or string payload, case-folded, for keyword comparisons.
    pub fn keyword(&self) -> Option<String> {
        match self {
            Arg::Str(s) | Arg::Word(s) => Some(s.to_ascii_uppercase()),
            Arg::Number(_) => None,
        }
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Number(v) => write!(f, "{v}"),
            Arg::Word(w) => f.write_str(w),
            Arg::Str(s) => write!(f, "\"{}\"", s.replace('"', "\"\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScpiCommand {
    pub path: Vec<String>,
    pub is_query: bool,
    pub args: Vec<Arg>,
}

impl ScpiCommand {
    pub fn header_is(&self, path: &[&str]) -> bool {
        self.path.len() == path.len() && self.path.iter().zip(path).all(|(a, b)| a == b)
    }

    fn is_common(&self) -> bool {
        self.path.first().is_some_and(|s| s.starts_with('*'))
    }
}

impl fmt::Display for ScpiCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_common() {
            f.write_str(&self.path[0])?;
        } else {
            for seg in &self.path {
                write!(f, ":{seg}")?;
            }
        }
        if self.is_query {
            f.write_str("?")?;
        }
        for (i, arg) in self.args.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { "," })?;
            write!(f, "{arg}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SCPI parse error at {position}: {reason}")]
pub struct ParseError {
    /// Byte offset into the program message.
    pub position: usize,
    pub reason: String,
}

fn err(position: usize, reason: impl Into<String>) -> ParseError {
    ParseError { position, reason: reason.into() }
}

/// Maps one header segment to its canonical short form. Unknown mnemonics
/// are returned upper-cased. A numeric suffix of `1` on a known mnemonic is
/// the default instance and is dropped.
pub fn canonical_segment(seg: &str) -> String {
    let upper = seg.to_ascii_uppercase();
    let split = upper.find(|c: char| c.is_ascii_digit()).unwrap_or(upper.len());
    let (alpha, suffix) = upper.split_at(split);
    match MNEMONICS.iter().find(|(long, short)| alpha == *long || alpha == *short) {
        Some((_, short)) if suffix.is_empty() || suffix == "1" => (*short).to_string(),
        Some((_, short)) => format!("{short}{suffix}"),
        None => upper,
    }
}

fn valid_segment(seg: &str) -> bool {
    let alpha = seg.chars().take_while(|c| c.is_ascii_alphabetic()).count();
    alpha > 0 && seg[alpha..].chars().all(|c| c.is_ascii_digit())
}

/// Splits `text` on `sep` outside of quoted strings. Returns the pieces with
/// their byte offsets, or an error if a quote is left open.
fn split_unquoted(text: &str, base: usize, sep: char) -> Result<Vec<(usize, &str)>, ParseError> {
    let mut out = Vec::new();
    let mut quote: Option<(char, usize)> = None;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match quote {
            Some((q, _)) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some((c, i)),
            None if c == sep => {
                out.push((base + start, &text[start..i]));
                start = i + c.len_utf8();
            }
            None => {}
        }
    }
    if let Some((_, at)) = quote {
        return Err(err(base + at, "unbalanced quote"));
    }
    out.push((base + start, &text[start..]));
    Ok(out)
}

fn parse_arg(pos: usize, raw: &str) -> Result<Arg, ParseError> {
    let lead = raw.len() - raw.trim_start().len();
    let tok = raw.trim();
    let pos = pos + lead;
    let Some(first) = tok.chars().next() else {
        return Err(err(pos, "empty argument"));
    };
    if first == '"' || first == '\'' {
        // doubled quote characters are the escape for an embedded quote
        let body = &tok[1..];
        if !body.ends_with(first) {
            return Err(err(pos, "unbalanced quote"));
        }
        let inner = &body[..body.len() - 1];
        let doubled = format!("{first}{first}");
        if inner.replace(&doubled, "").contains(first) {
            return Err(err(pos, "unbalanced quote"));
        }
        return Ok(Arg::Str(inner.replace(&doubled, &first.to_string())));
    }
    if first.is_ascii_digit() || matches!(first, '+' | '-' | '.') {
        let ok = tok
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E'));
        return match tok.parse::<f64>() {
            Ok(v) if ok && v.is_finite() => Ok(Arg::Number(v)),
            _ => Err(err(pos, format!("malformed number '{tok}'"))),
        };
    }
    if first.is_ascii_alphabetic() && tok.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Ok(Arg::Word(tok.to_string()));
    }
    Err(err(pos, format!("invalid argument '{tok}'")))
}

fn parse_command(pos: usize, raw: &str) -> Result<ScpiCommand, ParseError> {
    let lead = raw.len() - raw.trim_start().len();
    let text = raw.trim();
    let pos = pos + lead;
    if text.is_empty() {
        return Err(err(pos, "empty header"));
    }
    let header_end = text.find(char::is_whitespace).unwrap_or(text.len());
    let (header, rest) = text.split_at(header_end);
    let (header, is_query) = match header.strip_suffix('?') {
        Some(h) => (h, true),
        None => (header, false),
    };

    let path = if let Some(name) = header.strip_prefix('*') {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(err(pos, format!("invalid common command '{header}'")));
        }
        vec![format!("*{}", name.to_ascii_uppercase())]
    } else {
        let body = header.strip_prefix(':').unwrap_or(header);
        if body.is_empty() {
            return Err(err(pos, "empty header"));
        }
        let mut path = Vec::new();
        let mut offset = pos + (header.len() - body.len());
        for seg in body.split(':') {
            if seg.is_empty() {
                return Err(err(offset, "empty header segment"));
            }
            if !valid_segment(seg) {
                return Err(err(offset, format!("invalid mnemonic '{seg}'")));
            }
            path.push(canonical_segment(seg));
            offset += seg.len() + 1;
        }
        path
    };

    let mut args = Vec::new();
    let rest_trim = rest.trim_start();
    if !rest_trim.is_empty() {
        let arg_pos = pos + header_end + (rest.len() - rest_trim.len());
        for (p, piece) in split_unquoted(rest_trim, arg_pos, ',')? {
            args.push(parse_arg(p, piece)?);
        }
    }
    Ok(ScpiCommand { path, is_query, args })
}

/// Parses one program message into its commands. Commands are separated by
/// `;`; every header is absolute whether or not it carries a leading `:`.
/// A blank message yields no commands.
pub fn parse_scpi(line: &str) -> Result<Vec<ScpiCommand>, ParseError> {
    if line.trim().is_empty() {
        return Ok(Vec::new());
    }
    split_unquoted(line, 0, ';')?
        .into_iter()
        .map(|(pos, piece)| parse_command(pos, piece))
        .collect()
}

/// Number of response lines an instrument will emit for `line`: one per
/// query command, zero for an unparseable message.
pub fn expected_responses(line: &str) -> usize {
    parse_scpi(line).map(|cmds| cmds.iter().filter(|c| c.is_query).count()).unwrap_or(0)
}

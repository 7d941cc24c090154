#![allow(dead_code)]

use autolab_core::scpi::{dispatch, parse_scpi, DeviceModel, SmuState, MNEMONICS};
use autolab_core::stage::StagePose;
use proptest::prelude::*;

/// Every node of the command tree, as long-form segments plus a query flag
/// and an argument pattern.
pub const TREE: &[(&[&str], bool, &str)] = &[
    (&["SOURCE", "FUNCTION"], false, "VOLT"),
    (&["SOURCE", "FUNCTION"], true, ""),
    (&["SOURCE", "VOLTAGE"], false, "{n}"),
    (&["SOURCE", "VOLTAGE"], true, ""),
    (&["SOURCE", "VOLTAGE", "ILIMIT"], false, "{p}"),
    (&["SOURCE", "VOLTAGE", "ILIMIT"], true, ""),
    (&["SENSE", "FUNCTION"], false, "\"CURR\""),
    (&["SENSE", "FUNCTION"], true, ""),
    (&["OUTPUT"], false, "ON"),
    (&["OUTPUT"], false, "OFF"),
    (&["OUTPUT"], true, ""),
    (&["READ"], true, ""),
    (&["MEASURE", "CURRENT"], true, ""),
    (&["SYSTEM", "ERROR"], true, ""),
];

pub const COMMON: &[&str] = &["*IDN?", "*RST", "*CLS"];

pub fn short(long: &str) -> &'static str {
    MNEMONICS.iter().find(|(l, _)| *l == long).map(|(_, s)| *s).expect("known mnemonic")
}

#[derive(Debug, Clone)]
pub struct Spelling {
    pub node: usize,
    pub long_form: Vec<bool>,
    pub lower: Vec<bool>,
    pub suffix_one: Vec<bool>,
    pub leading_colon: bool,
    pub n: f64,
    pub p: f64,
}

pub fn spelling() -> impl Strategy<Value = Spelling> {
    (0..TREE.len(), prop::collection::vec(any::<bool>(), 9), any::<bool>(), -200.0f64..200.0, 1e-6f64..1.0).prop_map(
        |(node, flags, leading_colon, n, p)| Spelling {
            node,
            long_form: flags[0..3].to_vec(),
            lower: flags[3..6].to_vec(),
            suffix_one: flags[6..9].to_vec(),
            leading_colon,
            n,
            p,
        },
    )
}

pub fn render(s: &Spelling, canonical: bool) -> String {
    let (segs, query, arg) = TREE[s.node];
    let mut out = String::new();
    for (i, seg) in segs.iter().enumerate() {
        let mut word = if canonical || !s.long_form[i] { short(seg).to_string() } else { seg.to_string() };
        if !canonical {
            if s.lower[i] {
                word = word.to_ascii_lowercase();
            }
            if s.suffix_one[i] {
                word.push('1');
            }
        }
        if i > 0 || canonical || s.leading_colon {
            out.push(':');
        }
        out.push_str(&word);
    }
    if query {
        out.push('?');
    }
    let arg = arg.replace("{n}", &s.n.to_string()).replace("{p}", &s.p.to_string());
    if !arg.is_empty() {
        out.push(' ');
        out.push_str(&arg);
    }
    out
}

pub fn run(state: &mut SmuState, device: &DeviceModel, line: &str) -> Vec<String> {
    parse_scpi(line).unwrap().iter().filter_map(|c| dispatch(state, device, c)).collect()
}

pub fn pose() -> impl Strategy<Value = StagePose> {
    (0.0f64..75_000.0, 0.0f64..75_000.0).prop_map(|(x, y)| StagePose { x, y })
}

/// Independent straight-line model: position after `t` seconds.
pub fn oracle(start: StagePose, target: StagePose, v: f64, t: f64) -> StagePose {
    let d = start.distance(&target);
    if d == 0.0 || v * t >= d {
        return target;
    }
    let f = v * t / d;
    StagePose { x: start.x + (target.x - start.x) * f, y: start.y + (target.y - start.y) * f }
}


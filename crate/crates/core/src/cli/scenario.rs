//! Scenario files: bracketed blocks of `key = value` lines.
//!
//! ```text
//! [model]
//! r = 1
//! a = 1.0
//! alpha = 3.0
//! T = 2
//! K = 512
//!
//! [potential]
//! C1 = 0.5 0.1 ; 0.1 0.3     # C_n as rows separated by ';'
//!
//! [run]
//! gap_floor = 1e-6           # relative to the largest unperturbed eigenvalue
//! safe_fraction = 0.5
//! nodes_mult = 128
//! output = out/reference
//! m_override = 22            # optional
//! gap_measure = relative     # optional: relative | absolute
//! ```
//!
//! Every key is required unless marked optional; unknown keys, duplicate
//! keys and duplicate blocks are rejected.

use crate::error::{Error, Result};
use crate::model::RawScenario;
use crate::traces::GapMeasure;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub gap_floor: f64,
    pub safe_fraction: f64,
    pub nodes_mult: usize,
    pub output: PathBuf,
    pub gap_measure: GapMeasure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub raw: RawScenario,
    pub run: RunParams,
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text)
}

type Block = BTreeMap<String, (usize, String)>;

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut blocks: BTreeMap<String, Block> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !matches!(name.as_str(), "model" | "potential" | "run") {
                return Err(Error::Scenario(format!("line {line_no}: unknown block [{name}]")));
            }
            if blocks.contains_key(&name) {
                return Err(Error::Scenario(format!("line {line_no}: duplicate block [{name}]")));
            }
            blocks.insert(name.clone(), Block::new());
            current = Some(name);
            continue;
        }
        let block = current
            .as_ref()
            .ok_or_else(|| Error::Scenario(format!("line {line_no}: key outside any block")))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Scenario(format!("line {line_no}: expected key = value")))?;
        let key = key.trim().to_string();
        let entries = blocks.get_mut(block).expect("block exists");
        if entries.contains_key(&key) {
            return Err(Error::Scenario(format!("line {line_no}: duplicate key {key}")));
        }
        entries.insert(key, (line_no, value.trim().to_string()));
    }

    let mut model = blocks
        .remove("model")
        .ok_or_else(|| Error::Scenario("missing [model] block".into()))?;
    let mut run = blocks
        .remove("run")
        .ok_or_else(|| Error::Scenario("missing [run] block".into()))?;
    let potential = blocks.remove("potential").unwrap_or_default();

    let r = take::<u32>(&mut model, "model", "r")?;
    let a = take::<f64>(&mut model, "model", "a")?;
    let alpha = take::<f64>(&mut model, "model", "alpha")?;
    let t = take::<usize>(&mut model, "model", "T")?;
    let k_modes = take::<usize>(&mut model, "model", "K")?;
    reject_leftovers(&model, "model")?;

    let mut terms = Vec::new();
    for (key, (line_no, value)) in &potential {
        let n = key
            .strip_prefix('C')
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| {
                Error::Scenario(format!("line {line_no}: unknown key {key} in [potential]; expected C<n>"))
            })?;
        let rows = value
            .split(';')
            .map(|row| {
                row.split_whitespace()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| {
                            Error::Scenario(format!("line {line_no}: bad number {v:?} in {key}"))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        terms.push((n, rows));
    }

    let gap_floor = take::<f64>(&mut run, "run", "gap_floor")?;
    let safe_fraction = take::<f64>(&mut run, "run", "safe_fraction")?;
    let nodes_mult = take::<usize>(&mut run, "run", "nodes_mult")?;
    let output = PathBuf::from(take::<String>(&mut run, "run", "output")?);
    let m_override = take_optional::<usize>(&mut run, "run", "m_override")?;
    let gap_measure = match take_optional::<String>(&mut run, "run", "gap_measure")?.as_deref() {
        None | Some("relative") => GapMeasure::Relative,
        Some("absolute") => GapMeasure::Absolute,
        Some(other) => {
            return Err(Error::Scenario(format!(
                "gap_measure must be relative or absolute, got {other}"
            )))
        }
    };
    reject_leftovers(&run, "run")?;

    if !(gap_floor >= 0.0 && gap_floor.is_finite()) {
        return Err(Error::Scenario("gap_floor must be a non-negative number".into()));
    }
    if !(safe_fraction > 0.0 && safe_fraction <= 1.0) {
        return Err(Error::Scenario("safe_fraction must lie in (0, 1]".into()));
    }
    crate::resolvent::check_multiplier(nodes_mult).map_err(|e| Error::Scenario(e.to_string()))?;

    Ok(Scenario {
        raw: RawScenario {
            r,
            a,
            alpha,
            t,
            k_modes,
            terms,
            m_override,
        },
        run: RunParams {
            gap_floor,
            safe_fraction,
            nodes_mult,
            output,
            gap_measure,
        },
    })
}

fn take<T: std::str::FromStr>(block: &mut Block, name: &str, key: &str) -> Result<T> {
    take_optional(block, name, key)?
        .ok_or_else(|| Error::Scenario(format!("missing key {key} in [{name}]")))
}

fn take_optional<T: std::str::FromStr>(block: &mut Block, name: &str, key: &str) -> Result<Option<T>> {
    match block.remove(key) {
        None => Ok(None),
        Some((line_no, value)) => value.parse::<T>().map(Some).map_err(|_| {
            Error::Scenario(format!("line {line_no}: cannot parse {key} = {value:?} in [{name}]"))
        }),
    }
}

fn reject_leftovers(block: &Block, name: &str) -> Result<()> {
    match block.iter().next() {
        Some((key, (line_no, _))) => Err(Error::Scenario(format!(
            "line {line_no}: unknown key {key} in [{name}]"
        ))),
        None => Ok(()),
    }
}

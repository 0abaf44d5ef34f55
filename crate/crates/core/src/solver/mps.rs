//! Free-format MPS export and import.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transcription::{MilpModel, ObjSense, Sense, VarKind};

const OBJ_ROW: &str = "obj";

/// Renders `model` as free-format MPS. Columns appear in variable order.
pub fn to_mps_string(model: &MilpModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "NAME {}", model.name);
    if model.sense == ObjSense::Maximize {
        out.push_str("OBJSENSE\n    MAX\n");
    }
    out.push_str("ROWS\n");
    let _ = writeln!(out, " N  {OBJ_ROW}");
    for c in &model.constraints {
        let tag = match c.sense {
            Sense::Le => 'L',
            Sense::Eq => 'E',
            Sense::Ge => 'G',
        };
        let _ = writeln!(out, " {tag}  {}", c.name);
    }

    let n = model.variables.len();
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, c) in model.constraints.iter().enumerate() {
        for &(j, a) in &c.terms {
            columns[j].push((r, a));
        }
    }
    let mut obj = vec![None; n];
    for &(j, c) in &model.objective {
        obj[j] = Some(c);
    }

    out.push_str("COLUMNS\n");
    let mut in_int = false;
    let mut marker = 0;
    for (j, v) in model.variables.iter().enumerate() {
        let integer = v.kind != VarKind::Continuous;
        if integer != in_int {
            let tag = if integer { "INTORG" } else { "INTEND" };
            let _ = writeln!(out, "    MARKER{marker} 'MARKER' '{tag}'");
            marker += 1;
            in_int = integer;
        }
        let mut wrote = false;
        if let Some(c) = obj[j] {
            let _ = writeln!(out, "    {} {OBJ_ROW} {c}", v.name);
            wrote = true;
        }
        for &(r, a) in &columns[j] {
            let _ = writeln!(out, "    {} {} {a}", v.name, model.constraints[r].name);
            wrote = true;
        }
        if !wrote {
            let _ = writeln!(out, "    {} {OBJ_ROW} 0", v.name);
        }
    }
    if in_int {
        let _ = writeln!(out, "    MARKER{marker} 'MARKER' 'INTEND'");
    }

    out.push_str("RHS\n");
    for c in &model.constraints {
        if c.rhs != 0.0 {
            let _ = writeln!(out, "    RHS {} {}", c.name, c.rhs);
        }
    }
    out.push_str("RANGES\n");
    out.push_str("BOUNDS\n");
    for v in &model.variables {
        let name = &v.name;
        if v.kind == VarKind::Binary {
            let _ = writeln!(out, " BV BND {name}");
            continue;
        }
        let (l, u) = (v.lower, v.upper);
        if l == u {
            let _ = writeln!(out, " FX BND {name} {l}");
            continue;
        }
        if l == f64::NEG_INFINITY {
            if u == f64::INFINITY {
                let _ = writeln!(out, " FR BND {name}");
                continue;
            }
            let _ = writeln!(out, " MI BND {name}");
        } else if l != 0.0 || u < 0.0 || v.kind == VarKind::Integer {
            let _ = writeln!(out, " LO BND {name} {l}");
        }
        if u.is_finite() {
            let _ = writeln!(out, " UP BND {name} {u}");
        } else if v.kind == VarKind::Integer {
            let _ = writeln!(out, " PL BND {name}");
        }
    }
    out.push_str("ENDATA\n");
    out
}

pub fn write_mps(model: &MilpModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_mps_string(model))?;
    Ok(())
}

pub fn read_mps(path: impl AsRef<Path>) -> Result<MilpModel> {
    let path = path.as_ref();
    parse_mps(&fs::read_to_string(path)?, path)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    ObjSense,
    Rows,
    Columns,
    Rhs,
    Ranges,
    Bounds,
}

/// Parses free-format MPS. Ranged rows are split into a `>=` and a `<=` row.
pub fn parse_mps(text: &str, origin: &Path) -> Result<MilpModel> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut model = MilpModel::new("");
    let mut section = Section::None;
    let mut obj_row: Option<String> = None;
    let mut row_index = std::collections::HashMap::new();
    let mut in_int = false;
    let mut bounded_int: Vec<bool> = Vec::new();
    let mut ranges: Vec<(usize, f64)> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('*') {
            continue;
        }
        let header = !line.starts_with(' ') && !line.starts_with('\t');
        let f: Vec<&str> = line.split_whitespace().collect();
        if header {
            section = match f[0] {
                "NAME" => {
                    model.name = f.get(1).copied().unwrap_or("").to_string();
                    Section::None
                }
                "OBJSENSE" => {
                    if let Some(s) = f.get(1) {
                        model.sense = parse_sense(s).ok_or_else(|| err(ln, format!("bad OBJSENSE {s}")))?;
                    }
                    Section::ObjSense
                }
                "ROWS" => Section::Rows,
                "COLUMNS" => Section::Columns,
                "RHS" => Section::Rhs,
                "RANGES" => Section::Ranges,
                "BOUNDS" => Section::Bounds,
                "ENDATA" => break,
                other => return Err(err(ln, format!("unknown section {other}"))),
            };
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(ln, format!("bad number `{s}`")));
        match section {
            Section::ObjSense => {
                model.sense = parse_sense(f[0]).ok_or_else(|| err(ln, format!("bad OBJSENSE {}", f[0])))?;
            }
            Section::Rows => {
                if f.len() != 2 {
                    return Err(err(ln, "expected `<type> <name>`".into()));
                }
                let sense = match f[0] {
                    "N" => {
                        if obj_row.is_none() {
                            obj_row = Some(f[1].to_string());
                        }
                        continue;
                    }
                    "L" => Sense::Le,
                    "E" => Sense::Eq,
                    "G" => Sense::Ge,
                    t => return Err(err(ln, format!("unknown row type {t}"))),
                };
                row_index.insert(f[1].to_string(), model.constraints.len());
                model.add_con(f[1], Vec::new(), sense, 0.0);
            }
            Section::Columns => {
                if f.len() >= 3 && f[1].trim_matches('\'') == "MARKER" {
                    match f[2].trim_matches('\'') {
                        "INTORG" => in_int = true,
                        "INTEND" => in_int = false,
                        m => return Err(err(ln, format!("unknown marker {m}"))),
                    }
                    continue;
                }
                if f.len() != 3 && f.len() != 5 {
                    return Err(err(ln, "expected `<col> <row> <value> [<row> <value>]`".into()));
                }
                let j = match model.var(f[0]) {
                    Some(j) => j,
                    None => {
                        let kind = if in_int { VarKind::Integer } else { VarKind::Continuous };
                        let upper = f64::INFINITY;
                        bounded_int.push(false);
                        model.add_var(f[0], kind, 0.0, upper)
                    }
                };
                for pair in f[1..].chunks(2) {
                    let v = num(pair[1])?;
                    if Some(pair[0]) == obj_row.as_deref() {
                        if v != 0.0 {
                            model.objective.push((j, v));
                        }
                    } else {
                        let r = *row_index
                            .get(pair[0])
                            .ok_or_else(|| err(ln, format!("unknown row {}", pair[0])))?;
                        model.constraints[r].terms.push((j, v));
                    }
                }
            }
            Section::Rhs | Section::Ranges => {
                let pairs = if f.len() % 2 == 1 { &f[1..] } else { &f[..] };
                for pair in pairs.chunks(2) {
                    if pair.len() != 2 {
                        return Err(err(ln, "dangling RHS entry".into()));
                    }
                    let v = num(pair[1])?;
                    if Some(pair[0]) == obj_row.as_deref() {
                        continue;
                    }
                    let r = *row_index
                        .get(pair[0])
                        .ok_or_else(|| err(ln, format!("unknown row {}", pair[0])))?;
                    if section == Section::Rhs {
                        model.constraints[r].rhs = v;
                    } else {
                        ranges.push((r, v));
                    }
                }
            }
            Section::Bounds => {
                if f.len() < 3 {
                    return Err(err(ln, "expected `<type> <set> <col> [<value>]`".into()));
                }
                let j = model
                    .var(f[2])
                    .ok_or_else(|| err(ln, format!("unknown column {}", f[2])))?;
                let value = f.get(3).map(|s| num(s)).transpose()?;
                let need = || value.ok_or_else(|| err(ln, format!("bound {} needs a value", f[0])));
                let v = &mut model.variables[j];
                match f[0] {
                    "LO" => v.lower = need()?,
                    "UP" => {
                        let u = need()?;
                        v.upper = u;
                        if u < 0.0 && v.lower == 0.0 {
                            v.lower = f64::NEG_INFINITY;
                        }
                    }
                    "FX" => {
                        let x = need()?;
                        v.lower = x;
                        v.upper = x;
                    }
                    "FR" => {
                        v.lower = f64::NEG_INFINITY;
                        v.upper = f64::INFINITY;
                    }
                    "MI" => v.lower = f64::NEG_INFINITY,
                    "PL" => v.upper = f64::INFINITY,
                    "BV" => {
                        v.kind = VarKind::Binary;
                        v.lower = 0.0;
                        v.upper = 1.0;
                    }
                    "LI" => {
                        v.kind = VarKind::Integer;
                        v.lower = need()?;
                    }
                    "UI" => {
                        v.kind = VarKind::Integer;
                        v.upper = need()?;
                    }
                    t => return Err(err(ln, format!("unknown bound type {t}"))),
                }
                if f[0] != "BV" {
                    bounded_int[j] = true;
                }
            }
            Section::None => return Err(err(ln, "data before any section".into())),
        }
    }
    // integer columns in marker blocks with no bounds default to binary
    for (j, v) in model.variables.iter_mut().enumerate() {
        if v.kind == VarKind::Integer && !bounded_int[j] {
            v.kind = VarKind::Binary;
            v.upper = 1.0;
        }
    }
    apply_ranges(&mut model, ranges);
    model.validate()?;
    Ok(model)
}

fn parse_sense(s: &str) -> Option<ObjSense> {
    match s.to_ascii_uppercase().as_str() {
        "MAX" | "MAXIMIZE" => Some(ObjSense::Maximize),
        "MIN" | "MINIMIZE" => Some(ObjSense::Minimize),
        _ => None,
    }
}

fn apply_ranges(model: &mut MilpModel, ranges: Vec<(usize, f64)>) {
    for (r, range) in ranges {
        let c = model.constraints[r].clone();
        let (lo, hi) = match c.sense {
            Sense::Le => (c.rhs - range.abs(), c.rhs),
            Sense::Ge => (c.rhs, c.rhs + range.abs()),
            Sense::Eq if range >= 0.0 => (c.rhs, c.rhs + range),
            Sense::Eq => (c.rhs + range, c.rhs),
        };
        model.constraints[r].sense = Sense::Ge;
        model.constraints[r].rhs = lo;
        model.add_con(format!("{}_range", c.name), c.terms, Sense::Le, hi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_variable_round_trip() {
        let mut m = MilpModel::new("tiny");
        let x = m.add_var("x", VarKind::Continuous, 0.0, f64::INFINITY);
        m.add_con("lb", vec![(x, 1.0)], Sense::Ge, 3.0);
        m.objective = vec![(x, 1.0)];
        let back = parse_mps(&to_mps_string(&m), Path::new("tiny.mps")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn binaries_declared_bv() {
        let mut m = MilpModel::new("bin");
        let x = m.add_var("x", VarKind::Continuous, -1.0, 2.5);
        let z = m.add_var("z", VarKind::Binary, 0.0, 1.0);
        let k = m.add_var("k", VarKind::Integer, 0.0, 4.0);
        m.add_con("c1", vec![(x, 1.0), (z, -2.0), (k, 0.5)], Sense::Le, 1.0);
        m.objective = vec![(z, 1.0)];
        let text = to_mps_string(&m);
        assert!(text.contains(" BV BND z\n"));
        assert!(text.contains("'INTORG'") && text.contains("'INTEND'"));
        assert_eq!(parse_mps(&text, Path::new("b.mps")).unwrap(), m);
    }

    #[test]
    fn ranges_become_two_rows() {
        let text = "NAME r\nROWS\n N obj\n L c\nCOLUMNS\n x obj 1 c 1\nRHS\n RHS c 4\nRANGES\n RNG c 3\nBOUNDS\nENDATA\n";
        let m = parse_mps(text, Path::new("r.mps")).unwrap();
        assert_eq!(m.constraints.len(), 2);
        assert_eq!((m.constraints[0].sense, m.constraints[0].rhs), (Sense::Ge, 1.0));
        assert_eq!((m.constraints[1].sense, m.constraints[1].rhs), (Sense::Le, 4.0));
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "NAME r\nROWS\n N obj\nCOLUMNS\n x obj one\nENDATA\n";
        match parse_mps(text, Path::new("r.mps")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }
}

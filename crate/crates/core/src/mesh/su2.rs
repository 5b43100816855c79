//! SU2 ASCII mesh reader and writer (2-D subset).

use std::fmt::Write as _;

use super::{Element, Marker, Mesh, MeshError};

struct Line<'a> {
    number: usize,
    text: &'a str,
}

fn perr(line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Split `KEY= value` lines; `None` for data lines.
fn keyword<'a>(text: &'a str) -> Option<(&'a str, &'a str)> {
    let (k, v) = text.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn parse_count(line: &Line, value: &str) -> Result<usize, MeshError> {
    value
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| perr(line.number, format!("expected a count, got `{value}`")))
}

fn parse_index(line: &Line, tok: Option<&str>) -> Result<usize, MeshError> {
    let tok = tok.ok_or_else(|| perr(line.number, "missing node index"))?;
    tok.parse()
        .map_err(|_| perr(line.number, format!("bad node index `{tok}`")))
}

/// Pull the next `count` data lines, failing if a keyword or EOF comes first.
fn take_block<'a, 'b>(
    lines: &'b [Line<'a>],
    pos: &mut usize,
    count: usize,
    section: &str,
    header_line: usize,
) -> Result<&'b [Line<'a>], MeshError> {
    let start = *pos;
    let mut found = 0;
    while found < count {
        match lines.get(start + found) {
            Some(l) if keyword(l.text).is_none() => found += 1,
            other => {
                let at = other.map_or(header_line, |l| l.number);
                return Err(perr(
                    at,
                    format!("{section} section: expected {count} entries, found {found}"),
                ));
            }
        }
    }
    *pos = start + count;
    Ok(&lines[start..start + count])
}

/// Parse SU2 ASCII text. Quads are kept as quads.
pub fn parse_su2(text: &str) -> Result<Mesh, MeshError> {
    let lines: Vec<Line> = text
        .lines()
        .enumerate()
        .map(|(i, t)| Line {
            number: i + 1,
            text: t.trim(),
        })
        .filter(|l| !l.text.is_empty() && !l.text.starts_with('%'))
        .collect();

    let mut ndime = None;
    let mut nodes = None;
    let mut elements: Option<Vec<(Element, usize)>> = None;
    let mut markers = Vec::new();

    let mut pos = 0;
    while pos < lines.len() {
        let line = &lines[pos];
        let (key, value) = keyword(line.text).ok_or_else(|| perr(line.number, "unexpected data line"))?;
        pos += 1;
        match key {
            "NDIME" => {
                let d = parse_count(line, value)?;
                if d != 2 {
                    return Err(perr(line.number, format!("only NDIME= 2 is supported, got {d}")));
                }
                ndime = Some(d);
            }
            "NELEM" => {
                let count = parse_count(line, value)?;
                let block = take_block(&lines, &mut pos, count, "NELEM", line.number)?;
                let mut els = Vec::with_capacity(count);
                for l in block {
                    let mut toks = l.text.split_whitespace();
                    let code = toks.next().unwrap_or_default();
                    let el = match code {
                        "5" => {
                            let mut v = [0; 3];
                            for x in &mut v {
                                *x = parse_index(l, toks.next())?;
                            }
                            Element::Triangle(v)
                        }
                        "9" => {
                            let mut v = [0; 4];
                            for x in &mut v {
                                *x = parse_index(l, toks.next())?;
                            }
                            Element::Quad(v)
                        }
                        other => return Err(perr(l.number, format!("unknown element type code `{other}`"))),
                    };
                    els.push((el, l.number));
                }
                elements = Some(els);
            }
            "NPOIN" => {
                let count = parse_count(line, value)?;
                let block = take_block(&lines, &mut pos, count, "NPOIN", line.number)?;
                let mut pts = Vec::with_capacity(count);
                for l in block {
                    let mut toks = l.text.split_whitespace();
                    let mut p = [0.0; 2];
                    for x in &mut p {
                        let tok = toks.next().ok_or_else(|| perr(l.number, "missing coordinate"))?;
                        *x = tok
                            .parse()
                            .map_err(|_| perr(l.number, format!("bad coordinate `{tok}`")))?;
                    }
                    pts.push(p);
                }
                nodes = Some(pts);
            }
            "NMARK" => {
                let count = parse_count(line, value)?;
                for _ in 0..count {
                    let tag_line = lines
                        .get(pos)
                        .ok_or_else(|| perr(line.number, "NMARK section: missing MARKER_TAG"))?;
                    let tag = match keyword(tag_line.text) {
                        Some(("MARKER_TAG", t)) => t.to_string(),
                        _ => return Err(perr(tag_line.number, "expected MARKER_TAG=")),
                    };
                    pos += 1;
                    let elems_line = lines
                        .get(pos)
                        .ok_or_else(|| perr(tag_line.number, "NMARK section: missing MARKER_ELEMS"))?;
                    let n = match keyword(elems_line.text) {
                        Some(("MARKER_ELEMS", v)) => parse_count(elems_line, v)?,
                        _ => return Err(perr(elems_line.number, "expected MARKER_ELEMS=")),
                    };
                    pos += 1;
                    let block = take_block(&lines, &mut pos, n, "MARKER_ELEMS", elems_line.number)?;
                    let mut segments = Vec::with_capacity(n);
                    for l in block {
                        let mut toks = l.text.split_whitespace();
                        match toks.next() {
                            Some("3") => {}
                            other => {
                                return Err(perr(
                                    l.number,
                                    format!(
                                        "unknown marker element type code `{}`",
                                        other.unwrap_or_default()
                                    ),
                                ))
                            }
                        }
                        segments.push([parse_index(l, toks.next())?, parse_index(l, toks.next())?]);
                    }
                    markers.push((Marker { tag, segments }, elems_line.number));
                }
            }
            // Other SU2 keywords (e.g. NZONE) carry no 2-D geometry.
            _ => {}
        }
    }

    ndime.ok_or(MeshError::MissingSection("NDIME"))?;
    let nodes = nodes.ok_or(MeshError::MissingSection("NPOIN"))?;
    let elements = elements.ok_or(MeshError::MissingSection("NELEM"))?;

    let n = nodes.len();
    for (el, line) in &elements {
        if let Some(&i) = el.vertices().iter().find(|&&i| i >= n) {
            return Err(perr(*line, format!("node index {i} out of range (N = {n})")));
        }
    }
    for (m, line) in &markers {
        if let Some(&i) = m.segments.iter().flatten().find(|&&i| i >= n) {
            return Err(perr(
                *line,
                format!("marker `{}`: node index {i} out of range (N = {n})", m.tag),
            ));
        }
    }

    Mesh::new(
        nodes,
        elements.into_iter().map(|(e, _)| e).collect(),
        markers.into_iter().map(|(m, _)| m).collect(),
    )
}

/// Serialize to SU2 ASCII with 17 significant digits per coordinate.
pub fn write_su2(mesh: &Mesh) -> String {
    let mut out = String::new();
    writeln!(out, "NDIME= 2").unwrap();
    writeln!(out, "NELEM= {}", mesh.elements.len()).unwrap();
    for (i, el) in mesh.elements.iter().enumerate() {
        write!(out, "{}", el.type_code()).unwrap();
        for v in el.vertices() {
            write!(out, " {v}").unwrap();
        }
        writeln!(out, " {i}").unwrap();
    }
    writeln!(out, "NPOIN= {}", mesh.nodes.len()).unwrap();
    for (i, [x, y]) in mesh.nodes.iter().enumerate() {
        writeln!(out, "{x:.16e} {y:.16e} {i}").unwrap();
    }
    writeln!(out, "NMARK= {}", mesh.markers.len()).unwrap();
    for m in &mesh.markers {
        writeln!(out, "MARKER_TAG= {}", m.tag).unwrap();
        writeln!(out, "MARKER_ELEMS= {}", m.segments.len()).unwrap();
        for [a, b] in &m.segments {
            writeln!(out, "3 {a} {b}").unwrap();
        }
    }
    out
}

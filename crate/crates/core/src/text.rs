//! Plain-text side files: labeled box tables, relevance lists and the corpus manifest.
//!
//! Blank lines and lines starting with `#` are ignored everywhere.

use std::fmt::Write as _;

use crate::anchors::{BoxPrior, LabeledBox, RotatedBox};
use crate::error::{Error, Result};
use crate::search::Relevance;

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_owned(),
        line,
        message: message.into(),
    }
}

fn parse_floats<const N: usize>(source: &str, line: usize, fields: &[&str]) -> Result<[f64; N]> {
    if fields.len() != N {
        return Err(parse_err(source, line, format!("expected {N} numbers, found {}", fields.len())));
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(source, line, format!("`{f}` is not a finite number")))?;
    }
    Ok(out)
}

/// One `w h` pair per line.
pub fn parse_box_table(text: &str, source: &str) -> Result<Vec<LabeledBox>> {
    content_lines(text)
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [w, h] = parse_floats::<2>(source, n, &fields)?;
            if w <= 0.0 || h <= 0.0 {
                return Err(parse_err(source, n, "box sides must be positive"));
            }
            Ok(LabeledBox { w, h })
        })
        .collect()
}

pub fn parse_priors(text: &str, source: &str) -> Result<Vec<BoxPrior>> {
    Ok(parse_box_table(text, source)?
        .into_iter()
        .map(|b| BoxPrior { w: b.w, h: b.h })
        .collect())
}

pub fn format_box_table<'a>(pairs: impl IntoIterator<Item = (f64, f64)> + 'a) -> String {
    let mut out = String::new();
    for (w, h) in pairs {
        writeln!(out, "{w} {h}").unwrap();
    }
    out
}

/// `query_id: relevant_id relevant_id ...` per line.
pub fn parse_relevance(text: &str, source: &str) -> Result<Relevance> {
    let mut rel = Relevance::new();
    for (n, line) in content_lines(text) {
        let (query, rest) = line
            .split_once(':')
            .ok_or_else(|| parse_err(source, n, "expected `query_id: relevant ...`"))?;
        let query = query.trim();
        if query.is_empty() {
            return Err(parse_err(source, n, "empty query id"));
        }
        let set = rest.split_whitespace().map(str::to_owned).collect();
        if rel.insert(query.to_owned(), set).is_some() {
            return Err(parse_err(source, n, format!("query `{query}` listed twice")));
        }
    }
    Ok(rel)
}

pub fn format_relevance(rel: &Relevance) -> String {
    let mut out = String::new();
    for (q, set) in rel {
        let ids: Vec<&str> = set.iter().map(String::as_str).collect();
        writeln!(out, "{q}: {}", ids.join(" ")).unwrap();
    }
    out
}

/// One corpus image and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub class_id: u32,
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub boxes: Vec<RotatedBox>,
}

/// `image <id> <class_id> <path>` followed by one `cx cy w h theta` line per box.
pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::from("# image <id> <class_id> <path>, then `cx cy w h theta` per ground-truth box\n");
    for r in records {
        writeln!(out, "image {} {} {}", r.id, r.class_id, r.path).unwrap();
        for b in &r.boxes {
            writeln!(out, "{} {} {} {} {}", b.cx, b.cy, b.w, b.h, b.theta).unwrap();
        }
    }
    out
}

pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<ManifestRecord>> {
    let mut records: Vec<ManifestRecord> = Vec::new();
    for (n, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "image" {
            if fields.len() != 4 {
                return Err(parse_err(source, n, "expected `image <id> <class_id> <path>`"));
            }
            let class_id = fields[2]
                .parse()
                .map_err(|_| parse_err(source, n, format!("bad class id `{}`", fields[2])))?;
            records.push(ManifestRecord {
                id: fields[1].to_owned(),
                class_id,
                path: fields[3].to_owned(),
                boxes: Vec::new(),
            });
        } else {
            let [cx, cy, w, h, theta] = parse_floats::<5>(source, n, &fields)?;
            if w <= 0.0 || h <= 0.0 {
                return Err(parse_err(source, n, "box sides must be positive"));
            }
            let rec = records
                .last_mut()
                .ok_or_else(|| parse_err(source, n, "box line before any `image` line"))?;
            rec.boxes.push(RotatedBox { cx, cy, w, h, theta });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relevance_roundtrip_and_errors() {
        let rel = parse_relevance("# header\na: b c\n\nb: a c\n", "rel").unwrap();
        assert_eq!(rel["a"].len(), 2);
        assert_eq!(parse_relevance(&format_relevance(&rel), "rel").unwrap(), rel);
        assert!(parse_relevance("a b c\n", "rel").is_err());
        assert!(parse_relevance("a: b\na: c\n", "rel").is_err());
    }

    #[test]
    fn box_table_parsing() {
        let boxes = parse_box_table("10 20\n  3.5\t4\n# c\n", "labels").unwrap();
        assert_eq!(boxes, vec![LabeledBox { w: 10.0, h: 20.0 }, LabeledBox { w: 3.5, h: 4.0 }]);
        match parse_box_table("1 2\n1 x\n", "labels") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_box_table("0 2\n", "labels").is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let recs = vec![
            ManifestRecord {
                id: "c00_000".into(),
                class_id: 0,
                path: "images/c00_000.pgm".into(),
                boxes: vec![RotatedBox::new(250.125, 100.0, 80.5, 10.0, -1.2345678901234)],
            },
            ManifestRecord {
                id: "c01_000".into(),
                class_id: 1,
                path: "images/c01_000.pgm".into(),
                boxes: vec![],
            },
        ];
        assert_eq!(parse_manifest(&format_manifest(&recs), "m").unwrap(), recs);
        assert!(parse_manifest("1 2 3 4 5\n", "m").is_err());
    }
}

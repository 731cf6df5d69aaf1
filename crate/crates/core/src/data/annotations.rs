use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::distcore::{ScoreHistogram, BINS};
use crate::{Error, Result};

/// Raw votes for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub counts: ScoreHistogram,
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect()
}

/// Parse `id,v1,...,v10` rows (comma- or whitespace-separated) into ids and raw field text.
///
/// Every line either yields a row or a located error; errors are collected, not short-circuited.
fn parse_rows<V>(
    text: &str,
    path: &Path,
    parse_value: impl Fn(&str) -> std::result::Result<V, String>,
) -> Result<Vec<(String, [V; BINS])>>
where
    V: Copy + Default,
{
    let mut rows = Vec::new();
    let mut report = String::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let f = fields(line);
        if f.len() != BINS + 1 {
            let _ = writeln!(
                report,
                "line {lineno}: expected {} columns (id + {BINS} values), found {}",
                BINS + 1,
                f.len()
            );
            continue;
        }
        let mut values = [V::default(); BINS];
        let mut bad = false;
        for (b, raw) in f[1..].iter().enumerate() {
            match parse_value(raw) {
                Ok(v) => values[b] = v,
                Err(msg) => {
                    let _ = writeln!(report, "line {lineno}, column {}: {msg}", b + 2);
                    bad = true;
                }
            }
        }
        if !seen.insert(f[0].to_string()) {
            let _ = writeln!(report, "line {lineno}: duplicate image id `{}`", f[0]);
            bad = true;
        }
        if !bad {
            rows.push((f[0].to_string(), values));
        }
    }
    if report.is_empty() {
        Ok(rows)
    } else {
        Err(Error::Parse {
            path: path.to_path_buf(),
            report,
        })
    }
}

pub fn parse_annotations_str(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let rows = parse_rows(text, path, |raw| {
        raw.parse::<u32>()
            .map_err(|_| format!("`{raw}` is not a non-negative integer count"))
    })?;
    let mut out = Vec::with_capacity(rows.len());
    let mut report = String::new();
    for (i, (image_id, counts)) in rows.into_iter().enumerate() {
        let counts = ScoreHistogram::new(counts);
        if counts.total() == 0 {
            let _ = writeln!(report, "record {}: `{image_id}` has zero votes", i + 1);
            continue;
        }
        out.push(AnnotationRecord { image_id, counts });
    }
    if report.is_empty() {
        Ok(out)
    } else {
        Err(Error::Parse {
            path: path.to_path_buf(),
            report,
        })
    }
}

/// Strictly parse an annotation file of `image_id,c1,...,c10` lines.
pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_annotations_str(&text, path)
}

/// Parse rows of an id followed by ten non-negative reals (prediction files).
pub fn parse_score_rows(path: &Path) -> Result<Vec<(String, [f64; BINS])>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_rows(&text, path, |raw| match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("`{raw}` is not a finite non-negative number")),
    })
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.image_id);
        for c in r.counts.counts() {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

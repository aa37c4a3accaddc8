//! 300W-style `.pts` annotation files.
//!
//! ```text
//! version: 1
//! n_points: 68
//! {
//! 102.5 201.0
//! ...
//! }
//! ```
//! Files use 1-based pixel coordinates; parsed points are 0-based.

use crate::error::{Error, Result};

fn header_value<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::Data(format!("missing `{key}` header")))?;
    let (k, v) = line
        .split_once(':')
        .ok_or_else(|| Error::Data(format!("malformed header line `{line}`")))?;
    if k.trim() != key {
        return Err(Error::Data(format!("expected `{key}`, found `{}`", k.trim())));
    }
    Ok(v.trim())
}

pub fn parse_pts(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let version = header_value(lines.next(), "version")?;
    if version != "1" {
        return Err(Error::Data(format!("unsupported pts version {version}")));
    }
    let n: usize = header_value(lines.next(), "n_points")?
        .parse()
        .map_err(|_| Error::Data("n_points is not a count".into()))?;
    if lines.next() != Some("{") {
        return Err(Error::Data("expected `{` after the header".into()));
    }
    let mut points = Vec::with_capacity(n);
    for line in lines.by_ref() {
        if line == "}" {
            if points.len() != n {
                return Err(Error::Data(format!("n_points is {n} but {} points follow", points.len())));
            }
            if let Some(extra) = lines.next() {
                return Err(Error::Data(format!("content after closing brace: `{extra}`")));
            }
            return Ok(points);
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => points.push([x - 1.0, y - 1.0]),
            _ => return Err(Error::Data(format!("bad point line `{line}`"))),
        }
    }
    Err(Error::Data("missing closing `}`".into()))
}

/// Inverse of [`parse_pts`].
pub fn write_pts(points: &[[f64; 2]]) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", points.len());
    for p in points {
        s.push_str(&format!("{} {}\n", p[0] + 1.0, p[1] + 1.0));
    }
    s.push_str("}\n");
    s
}

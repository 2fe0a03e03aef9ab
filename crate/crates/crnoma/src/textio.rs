//! Shared helpers for the line-oriented instance and policy formats.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub(crate) fn push_array<'a>(
    out: &mut String,
    name: &str,
    values: impl IntoIterator<Item = &'a f64>,
) {
    out.push_str(name);
    for v in values {
        out.push(' ');
        out.push_str(&format!("{v:.16e}"));
    }
    out.push('\n');
}

pub(crate) fn push_flags<'a>(
    out: &mut String,
    name: &str,
    values: impl IntoIterator<Item = &'a bool>,
) {
    out.push_str(name);
    for v in values {
        out.push_str(if *v { " 1" } else { " 0" });
    }
    out.push('\n');
}

/// Splits a header line `magic key=value ...` into its fields.
pub(crate) fn parse_header(line: &str, magic: &str) -> Result<HashMap<String, String>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::Parse(format!(
            "expected header starting with `{magic}`"
        )));
    }
    let _version = parts.next();
    let mut fields = HashMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("malformed header field `{p}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok(fields)
}

pub(crate) fn header_value<T: std::str::FromStr>(
    fields: &HashMap<String, String>,
    key: &str,
) -> Result<T> {
    fields
        .get(key)
        .ok_or_else(|| Error::Parse(format!("missing header field `{key}`")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad value for `{key}`")))
}

/// Collects `name v1 v2 ...` lines keyed by name.
pub(crate) fn parse_arrays<'a>(
    lines: impl Iterator<Item = &'a str>,
) -> Result<HashMap<String, Vec<f64>>> {
    let mut arrays = HashMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let values = parts
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number `{t}` in `{name}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        arrays.insert(name, values);
    }
    Ok(arrays)
}

pub(crate) fn take_array(
    arrays: &mut HashMap<String, Vec<f64>>,
    name: &str,
    len: usize,
) -> Result<Vec<f64>> {
    let values = arrays
        .remove(name)
        .ok_or_else(|| Error::Parse(format!("missing array `{name}`")))?;
    if values.len() != len {
        return Err(Error::Parse(format!(
            "array `{name}` has {} entries, expected {len}",
            values.len()
        )));
    }
    Ok(values)
}

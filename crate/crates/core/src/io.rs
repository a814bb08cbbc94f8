//! Text signal files and dataset manifests.
//!
//! A signal file starts with `# rate=<hz>` and holds one channel per line
//! as whitespace-separated decimals. A manifest is a CSV file with the
//! header `id,label,path`; paths are relative to the manifest.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::Signal;
use crate::training::LabeledSample;

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Serializes a signal; values use the shortest exact decimal form.
pub fn format_signal(signal: &Signal) -> String {
    let mut out = format!("# rate={}\n", signal.sample_rate_hz());
    for c in 0..signal.channels() {
        let ch = signal.channel(c);
        for (i, v) in ch.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn write_signal(path: &Path, signal: &Signal) -> Result<()> {
    fs::write(path, format_signal(signal)).map_err(|e| Error::io(path, e))
}

/// Parses the text of a signal file; `file` is only used in messages.
pub fn parse_signal(text: &str, file: &Path) -> Result<Signal> {
    let mut lines = text.lines().enumerate();
    let rate = match lines.next() {
        Some((_, first)) => {
            let rest = first
                .trim()
                .strip_prefix('#')
                .map(str::trim)
                .and_then(|r| r.strip_prefix("rate="))
                .ok_or_else(|| parse_err(file, 1, "first line must be `# rate=<hz>`"))?;
            rest.trim()
                .parse::<f64>()
                .ok()
                .filter(|r| *r > 0.0 && r.is_finite())
                .ok_or_else(|| parse_err(file, 1, format!("bad sample rate `{}`", rest.trim())))?
        }
        None => return Err(parse_err(file, 1, "empty file, missing `# rate=<hz>`")),
    };
    let mut channels: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(file, idx + 1, format!("malformed number `{tok}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = channels.first() {
            if first.len() != values.len() {
                return Err(parse_err(
                    file,
                    idx + 1,
                    format!(
                        "ragged channels: {} values, first channel has {}",
                        values.len(),
                        first.len()
                    ),
                ));
            }
        }
        channels.push(values);
    }
    if channels.is_empty() {
        return Err(parse_err(file, 2, "no samples"));
    }
    Signal::from_channels(channels, rate).map_err(|e| parse_err(file, 2, e.to_string()))
}

pub fn read_signal(path: &Path) -> Result<Signal> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_signal(&text, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: usize,
    pub path: PathBuf,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from("id,label,path\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.id, r.label, r.path.display()).expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads manifest rows; ids must be unique.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(path, 1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "label", "path"] {
        return Err(parse_err(path, 1, "header must be `id,label,path`"));
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let id = rec[0].to_string();
        let label = rec[1]
            .parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("label `{}` is not a class index", &rec[1])))?;
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate id `{id}`")));
        }
        rows.push(ManifestRow {
            id,
            label,
            path: PathBuf::from(&rec[2]),
        });
    }
    Ok(rows)
}

/// Loads every signal listed in a manifest, checking labels against `classes`.
pub fn load_dataset(manifest: &Path, classes: usize) -> Result<Vec<LabeledSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.label >= classes {
                return Err(parse_err(
                    manifest,
                    i + 2,
                    format!("label {} out of range for {classes} classes", row.label),
                ));
            }
            let signal = read_signal(&base.join(&row.path))?;
            Ok(LabeledSample::new(row.id, signal, row.label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_text_round_trip() {
        let s = Signal::from_channels(vec![vec![0.1, -2.5e-9, 1.0 / 3.0], vec![7.0, 1e300, -0.0]], 150.0).unwrap();
        let back = parse_signal(&format_signal(&s), Path::new("x")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn signal_parse_errors_carry_lines() {
        let f = Path::new("s.txt");
        let e = parse_signal("1 2 3\n", f).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = parse_signal("# rate=150\n1 2 x\n", f).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_signal("# rate=150\n1 2 3\n1 2\n", f).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let s = parse_signal("# rate=150\n1 2 3\n", f).unwrap();
        assert_eq!((s.channels(), s.frames(), s.sample_rate_hz()), (1, 3, 150.0));
    }

    #[test]
    fn manifest_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        write_manifest(&m, &[]).unwrap();
        assert!(load_dataset(&m, 2).unwrap().is_empty());

        let s = Signal::mono((0..3000).map(|i| i as f64 * 1e-3).collect(), 150.0).unwrap();
        write_signal(&dir.path().join("a.txt"), &s).unwrap();
        let rows = vec![ManifestRow {
            id: "a".into(),
            label: 1,
            path: "a.txt".into(),
        }];
        write_manifest(&m, &rows).unwrap();
        assert_eq!(read_manifest(&m).unwrap(), rows);
        let data = load_dataset(&m, 2).unwrap();
        assert_eq!(data[0].signal, s);
        assert!(load_dataset(&m, 1).is_err());

        fs::write(&m, "id,label,path\na,0,a.txt\na,1,a.txt\n").unwrap();
        let e = read_manifest(&m).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }
}

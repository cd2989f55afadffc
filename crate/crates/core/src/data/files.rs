//! Pre-extracted feature files.
//!
//! CSV: header `task,label,f0,...,f{D-1}`, one sample per line, 1-based
//! contiguous task ids.
//!
//! Binary (little-endian): magic `LRCF`, `u32` version (1), `u32` D, `u64` N,
//! then N records of `u32` task, `u32` label, D × `f32` features.
//!
//! Files carry no train/test column. Within each class, in file order, the
//! last `round(test_fraction · n)` samples (at least one, at most `n − 1`)
//! form the test split.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::data::{Dataset, Provenance, TaskSplit};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"LRCF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FileSample {
    pub task: u32,
    pub label: u32,
    pub features: Vec<f64>,
}

fn parse_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

pub fn load_features_csv(path: impl AsRef<Path>, test_fraction: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let samples = read_csv_samples(path)?;
    assemble(path, samples, test_fraction)
}

pub fn load_features_bin(path: impl AsRef<Path>, test_fraction: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = parse_bin(path, &bytes)?;
    assemble(path, samples, test_fraction)
}

fn read_csv_samples(path: &Path) -> Result<Vec<FileSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(path, "open", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, "line 1", e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "task" || &headers[1] != "label" {
        return Err(parse_err(
            path,
            "line 1",
            "header must start with task,label,f0",
        ));
    }
    let dim = headers.len() - 2;
    for (j, name) in headers.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(
                path,
                "line 1",
                format!("expected column f{j}, found {name:?}"),
            ));
        }
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map_or("unknown line".to_string(), |p| format!("line {}", p.line()));
            parse_err(path, line, e.to_string())
        })?;
        let line = format!("line {}", record.position().map_or(0, |p| p.line()));
        let task: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line.clone(), format!("bad task id {:?}", &record[0])))?;
        let label: u32 = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line.clone(), format!("bad label {:?}", &record[1])))?;
        let mut features = Vec::with_capacity(dim);
        for (j, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, line.clone(), format!("bad value {field:?} in f{j}"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    line.clone(),
                    format!("non-finite value in f{j}"),
                ));
            }
            features.push(v);
        }
        samples.push(FileSample {
            task,
            label,
            features,
        });
    }
    Ok(samples)
}

fn parse_bin(path: &Path, bytes: &[u8]) -> Result<Vec<FileSample>> {
    let need = |offset: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(parse_err(
                path,
                format!("byte offset {offset}"),
                format!(
                    "truncated: {what} needs {len} bytes, {} available",
                    bytes.len().saturating_sub(offset)
                ),
            ))
        } else {
            Ok(())
        }
    };
    need(0, HEADER_LEN, "header")?;
    if &bytes[0..4] != MAGIC {
        return Err(parse_err(path, "byte offset 0", "bad magic, expected LRCF"));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(parse_err(
            path,
            "byte offset 4",
            format!("unsupported version {version}"),
        ));
    }
    let dim = LittleEndian::read_u32(&bytes[8..12]) as usize;
    if dim == 0 {
        return Err(parse_err(
            path,
            "byte offset 8",
            "feature dimension is zero",
        ));
    }
    let n = LittleEndian::read_u64(&bytes[12..20]) as usize;
    let record_len = 8 + 4 * dim;
    let mut samples = Vec::with_capacity(n.min(bytes.len() / record_len + 1));
    let mut offset = HEADER_LEN;
    for i in 0..n {
        need(offset, record_len, &format!("record {i}"))?;
        let task = LittleEndian::read_u32(&bytes[offset..offset + 4]);
        let label = LittleEndian::read_u32(&bytes[offset + 4..offset + 8]);
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let at = offset + 8 + 4 * j;
            let v = LittleEndian::read_f32(&bytes[at..at + 4]);
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    format!("byte offset {at}"),
                    "non-finite feature",
                ));
            }
            features.push(v as f64);
        }
        samples.push(FileSample {
            task,
            label,
            features,
        });
        offset += record_len;
    }
    if offset != bytes.len() {
        return Err(parse_err(
            path,
            format!("byte offset {offset}"),
            format!("{} trailing bytes after {n} records", bytes.len() - offset),
        ));
    }
    Ok(samples)
}

fn assemble(path: &Path, samples: Vec<FileSample>, test_fraction: f64) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let first = samples
        .first()
        .ok_or_else(|| parse_err(path, "body", "file has no samples"))?;
    let dim = first.features.len();
    // task -> class -> sample indices in file order
    let mut by_task: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != dim {
            return Err(parse_err(
                path,
                format!("sample {i}"),
                "feature dimension mismatch",
            ));
        }
        by_task
            .entry(s.task)
            .or_default()
            .entry(s.label)
            .or_default()
            .push(i);
    }
    for (expected, task) in (1u32..).zip(by_task.keys()) {
        if *task != expected {
            return Err(parse_err(
                path,
                "task column",
                format!("task ids must be contiguous from 1; expected {expected}, found {task}"),
            ));
        }
    }
    let mut tasks = Vec::with_capacity(by_task.len());
    for (task, classes) in &by_task {
        let mut train_rows = Vec::new();
        let mut train_y = Vec::new();
        let mut test_rows = Vec::new();
        let mut test_y = Vec::new();
        for (label, idx) in classes {
            let n = idx.len();
            if n < 2 {
                return Err(Error::Data(format!(
                    "task {task} class {label} has {n} sample(s); need at least 2 to split"
                )));
            }
            let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let (tr, te) = idx.split_at(n - n_test);
            train_rows.extend_from_slice(tr);
            train_y.extend(std::iter::repeat_n(*label as usize, tr.len()));
            test_rows.extend_from_slice(te);
            test_y.extend(std::iter::repeat_n(*label as usize, te.len()));
        }
        let gather = |rows: &[usize]| -> Result<Matrix> {
            Matrix::new(
                rows.len(),
                dim,
                rows.iter()
                    .flat_map(|&r| samples[r].features.iter().copied())
                    .collect(),
            )
        };
        tasks.push(TaskSplit {
            task_id: *task as usize,
            class_ids: classes.keys().map(|&c| c as usize).collect(),
            train_x: gather(&train_rows)?,
            train_y,
            test_x: gather(&test_rows)?,
            test_y,
        });
    }
    Dataset::new(tasks, Provenance::File)
}

pub fn write_features_csv(path: impl AsRef<Path>, samples: &[FileSample]) -> Result<()> {
    let path = path.as_ref();
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["task".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::io(path, e.into()))?;
    for s in samples {
        let mut row = vec![s.task.to_string(), s.label.to_string()];
        row.extend(s.features.iter().map(|v| v.to_string()));
        writer
            .write_record(&row)
            .map_err(|e| Error::io(path, e.into()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Features are stored as `f32`; values are rounded on write.
pub fn write_features_bin(path: impl AsRef<Path>, samples: &[FileSample]) -> Result<()> {
    let path = path.as_ref();
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + samples.len() * (8 + 4 * dim));
    buf.extend_from_slice(MAGIC);
    let io = |e| Error::io(path, e);
    buf.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    buf.write_u32::<LittleEndian>(dim as u32).map_err(io)?;
    buf.write_u64::<LittleEndian>(samples.len() as u64)
        .map_err(io)?;
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::Shape(
                "samples have differing feature dimensions".into(),
            ));
        }
        buf.write_u32::<LittleEndian>(s.task).map_err(io)?;
        buf.write_u32::<LittleEndian>(s.label).map_err(io)?;
        for v in &s.features {
            buf.write_f32::<LittleEndian>(*v as f32).map_err(io)?;
        }
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&buf).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(task: u32, label: u32, f: &[f64]) -> FileSample {
        FileSample {
            task,
            label,
            features: f.to_vec(),
        }
    }

    #[test]
    fn minimal_csv_parses_into_two_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(
            &p,
            "task,label,f0,f1\n1,0,0.5,1\n1,0,0.25,2\n2,1,3,4\n2,1,-1,0\n",
        )
        .unwrap();
        let ds = load_features_csv(&p, 0.2).unwrap();
        assert_eq!(ds.num_tasks(), 2);
        assert_eq!(ds.tasks[0].train_x.rows(), 1);
        assert_eq!(ds.tasks[0].test_x.row(0), &[0.25, 2.0]);
        assert_eq!(ds.provenance, Provenance::File);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(&p, "task,label,f0\n1,0,0.5\n1,0,abc\n").unwrap();
        let err = load_features_csv(&p, 0.2).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");

        fs::write(&p, "task,label,g0\n1,0,0.5\n").unwrap();
        assert!(matches!(
            load_features_csv(&p, 0.2),
            Err(Error::Parse { .. })
        ));

        fs::write(&p, "task,label,f0\n1,0,0.5\n1,0,0.1\n3,1,1\n3,1,2\n").unwrap();
        let err = load_features_csv(&p, 0.2).unwrap_err().to_string();
        assert!(err.contains("contiguous"), "{err}");

        fs::write(&p, "task,label,f0\n1,0,0.5\n1,0,0.1,7\n").unwrap();
        assert!(matches!(
            load_features_csv(&p, 0.2),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn shared_class_across_tasks_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(&p, "task,label,f0\n1,0,0.5\n1,0,0.1\n2,0,1\n2,0,2\n").unwrap();
        assert!(matches!(load_features_csv(&p, 0.2), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_binary_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let samples = vec![sample(1, 0, &[1.0, 2.0]), sample(1, 0, &[3.0, 4.0])];
        write_features_bin(&p, &samples).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        let err = load_features_bin(&p, 0.5).unwrap_err().to_string();
        assert!(err.contains("byte offset 36"), "{err}");
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_features_bin(&p, &[sample(1, 0, &[1.0]), sample(1, 0, &[2.0])]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(0);
        fs::write(&p, &bytes).unwrap();
        assert!(load_features_bin(&p, 0.5)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(load_features_bin(&p, 0.5)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn csv_and_binary_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = Vec::new();
        for t in 1..=3u32 {
            for c in 0..2u32 {
                for k in 0..5 {
                    let f: Vec<f64> = (0..4)
                        .map(|j| ((t * 31 + c * 7 + k * 3 + j) as f32 * 0.37 - 5.1) as f64)
                        .collect();
                    samples.push(sample(t, (t - 1) * 2 + c, &f));
                }
            }
        }
        let pc = dir.path().join("f.csv");
        let pb = dir.path().join("f.bin");
        write_features_csv(&pc, &samples).unwrap();
        write_features_bin(&pb, &samples).unwrap();
        let a = load_features_csv(&pc, 0.2).unwrap();
        let b = load_features_bin(&pb, 0.2).unwrap();
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.num_classes, 6);
    }
}

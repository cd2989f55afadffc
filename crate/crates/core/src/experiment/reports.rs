use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::run::{
    DeltaRow, GramRow, ImportanceRow, OmegaRow, ResultsDoc, RunArtifacts,
};
use crate::metrics::{average_accuracy, forgetting};

pub const RESULTS_FILE: &str = "results.json";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const GRAM_FILE: &str = "gram.csv";
pub const DELTAS_FILE: &str = "deltas.csv";
pub const OMEGA_FILE: &str = "omega.csv";
/// Wall-clock timings; not covered by the determinism contract.
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub per_task_seconds: Vec<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let to_io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(to_io)?;
    // Written explicitly so that empty tables still carry their header.
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.serialize(row).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let found = r.headers().map_err(|e| parse_error(path, &e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: "line 1".into(),
            message: format!("expected header {}", header.join(",")),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(|e| parse_error(path, &e)))
        .collect()
}

fn parse_error(path: &Path, e: &csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: e
            .position()
            .map_or("unknown line".into(), |p| format!("line {}", p.line())),
        message: e.to_string(),
    }
}

const IMPORTANCE_HEADER: [&str; 3] = ["task", "location", "score"];
const GRAM_HEADER: [&str; 4] = ["location", "row", "col", "value"];
const DELTAS_HEADER: [&str; 4] = ["task", "location", "delta_next", "delta_final"];
const OMEGA_HEADER: [&str; 4] = ["task", "location", "index", "omega"];

pub fn write_results(path: &Path, doc: &ResultsDoc) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every report into `out_dir` (created if missing) and returns the paths.
pub fn emit_reports(artifacts: &RunArtifacts, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = [
        RESULTS_FILE,
        IMPORTANCE_FILE,
        GRAM_FILE,
        DELTAS_FILE,
        OMEGA_FILE,
        TIMINGS_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();
    write_results(&paths[0], &artifacts.results)?;
    write_csv(&paths[1], &artifacts.importance, &IMPORTANCE_HEADER)?;
    write_csv(&paths[2], &artifacts.gram, &GRAM_HEADER)?;
    write_csv(&paths[3], &artifacts.deltas, &DELTAS_HEADER)?;
    write_csv(&paths[4], &artifacts.omega, &OMEGA_HEADER)?;
    let timings = WallClock {
        per_task_seconds: artifacts.wall_clock.clone(),
    };
    let text = serde_json::to_string_pretty(&timings).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&paths[5], text + "\n").map_err(|e| Error::io(&paths[5], e))?;
    Ok(paths)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<ResultsDoc> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn read_importance(path: impl AsRef<Path>) -> Result<Vec<ImportanceRow>> {
    read_csv(path.as_ref(), &IMPORTANCE_HEADER)
}

pub fn read_gram(path: impl AsRef<Path>) -> Result<Vec<GramRow>> {
    read_csv(path.as_ref(), &GRAM_HEADER)
}

pub fn read_deltas(path: impl AsRef<Path>) -> Result<Vec<DeltaRow>> {
    read_csv(path.as_ref(), &DELTAS_HEADER)
}

pub fn read_omega(path: impl AsRef<Path>) -> Result<Vec<OmegaRow>> {
    read_csv(path.as_ref(), &OMEGA_HEADER)
}

/// Metrics recomputed from a results document's accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recomputed {
    pub tasks: usize,
    pub avg_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<f64>,
    /// True when the recomputed values equal the stored ones exactly.
    pub matches_document: bool,
}

pub fn recompute_metrics(doc: &ResultsDoc) -> Result<Recomputed> {
    let m = &doc.accuracy_matrix;
    let avg_acc = average_accuracy(m)?;
    let f = if m.tasks() >= 2 {
        Some(forgetting(m)?)
    } else {
        None
    };
    Ok(Recomputed {
        tasks: m.tasks(),
        avg_acc,
        forgetting: f,
        matches_document: avg_acc == doc.avg_acc && f == doc.forgetting,
    })
}

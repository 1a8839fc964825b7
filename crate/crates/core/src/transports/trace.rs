//! Packet length and inter-arrival distributions learned from trace files.
//!
//! Trace CSV: header `length,iat_ms`, one packet per row. Lengths are
//! clamped to `[1, MTU]`; inter-arrival times are bucketed to 10 µs.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use crate::stats::DiscreteDist;
use crate::transports::shaping::ShapeDists;
use crate::transports::MTU;

pub const DEFAULT_MIN_ROWS: usize = 100;
/// Inter-arrival bucket width in microseconds.
pub const IAT_BUCKET_US: u64 = 10;

const BUILTIN_HTTP: &str = include_str!("../../data/http_trace.csv");

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace {source_id}: row {row}: {message}")]
    Parse {
        source_id: String,
        row: usize,
        message: String,
    },
    #[error("trace {source_id} is empty")]
    Empty { source_id: String },
    #[error("trace {source_id} has {rows} rows, at least {min} required")]
    TooFewRows {
        source_id: String,
        rows: usize,
        min: usize,
    },
    #[error("unknown trace model `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceModel {
    lengths: DiscreteDist<u32>,
    iats_us: DiscreteDist<u64>,
    source: String,
    rows: usize,
    clamped: usize,
}

impl TraceModel {
    pub fn from_reader<R: Read>(reader: R, source: &str, min_rows: usize) -> Result<Self, TraceError> {
        let parse_err = |row: usize, message: String| TraceError::Parse {
            source_id: source.to_string(),
            row,
            message,
        };
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let mut lengths: BTreeMap<u32, f64> = BTreeMap::new();
        let mut iats: BTreeMap<u64, f64> = BTreeMap::new();
        let mut rows = 0usize;
        let mut clamped = 0usize;
        for (i, record) in csv.records().enumerate() {
            let record = record.map_err(|e| parse_err(rows + 1, e.to_string()))?;
            if i == 0 && record.get(0) == Some("length") {
                if record.get(1) != Some("iat_ms") {
                    return Err(parse_err(0, "header must be `length,iat_ms`".into()));
                }
                continue;
            }
            if record.iter().all(str::is_empty) {
                continue;
            }
            let row = rows + 1;
            if record.len() != 2 {
                return Err(parse_err(row, format!("expected 2 fields, found {}", record.len())));
            }
            let len: i64 = record[0]
                .parse()
                .map_err(|_| parse_err(row, format!("bad length `{}`", &record[0])))?;
            let iat: f64 = record[1]
                .parse()
                .map_err(|_| parse_err(row, format!("bad iat_ms `{}`", &record[1])))?;
            if !iat.is_finite() || iat < 0.0 {
                return Err(parse_err(row, format!("iat_ms must be a non-negative number, got `{}`", &record[1])));
            }
            let clamped_len = len.clamp(1, MTU as i64) as u32;
            if clamped_len as i64 != len {
                clamped += 1;
            }
            *lengths.entry(clamped_len).or_default() += 1.0;
            let bucket = (iat * 1000.0 / IAT_BUCKET_US as f64).round() as u64;
            *iats.entry(bucket * IAT_BUCKET_US).or_default() += 1.0;
            rows += 1;
        }
        if rows == 0 {
            return Err(TraceError::Empty {
                source_id: source.to_string(),
            });
        }
        if rows < min_rows {
            return Err(TraceError::TooFewRows {
                source_id: source.to_string(),
                rows,
                min: min_rows,
            });
        }
        if clamped > 0 {
            log::warn!("trace {source}: {clamped} lengths clamped to [1, {MTU}]");
        }
        Ok(TraceModel {
            lengths: DiscreteDist::new(lengths.into_iter().collect()).expect("counts are positive"),
            iats_us: DiscreteDist::new(iats.into_iter().collect()).expect("counts are positive"),
            source: source.to_string(),
            rows,
            clamped,
        })
    }

    pub fn load_with(path: &Path, min_rows: usize) -> Result<Self, TraceError> {
        let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string(), min_rows)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Rows whose length fell outside `[1, MTU]`.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn lengths(&self) -> &DiscreteDist<u32> {
        &self.lengths
    }

    /// Inter-arrival distribution in microseconds.
    pub fn iats_us(&self) -> &DiscreteDist<u64> {
        &self.iats_us
    }

    pub fn length_histogram(&self) -> BTreeMap<u32, f64> {
        self.lengths.support().iter().copied().zip(self.lengths.probabilities()).collect()
    }

    /// Inter-arrival histogram keyed by bucket start in milliseconds.
    pub fn iat_histogram_ms(&self) -> Vec<(f64, f64)> {
        self.iats_us
            .support()
            .iter()
            .map(|&us| us as f64 / 1000.0)
            .zip(self.iats_us.probabilities())
            .collect()
    }

    pub fn dists(&self) -> ShapeDists {
        ShapeDists {
            lengths: self.lengths.clone(),
            iats_us: self.iats_us.clone(),
        }
    }
}

/// Loads a trace with the default minimum row count.
pub fn trace_model_load(path: &Path) -> Result<TraceModel, TraceError> {
    TraceModel::load_with(path, DEFAULT_MIN_ROWS)
}

fn file_cache() -> &'static Mutex<HashMap<PathBuf, Arc<TraceModel>>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<TraceModel>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn named_models() -> &'static Mutex<HashMap<String, Arc<TraceModel>>> {
    static MODELS: OnceLock<Mutex<HashMap<String, Arc<TraceModel>>>> = OnceLock::new();
    MODELS.get_or_init(Default::default)
}

/// Loads `path` once per process; later calls share the parsed model.
pub fn cached_file(path: &str) -> Result<Arc<TraceModel>, TraceError> {
    let key = PathBuf::from(path);
    if let Some(m) = file_cache().lock().expect("trace cache").get(&key) {
        return Ok(m.clone());
    }
    let model = Arc::new(trace_model_load(&key)?);
    file_cache().lock().expect("trace cache").insert(key, model.clone());
    Ok(model)
}

/// Makes `model` available as `timlen:trace{model=name}`.
pub fn register_model(name: &str, model: TraceModel) {
    named_models()
        .lock()
        .expect("model registry")
        .insert(name.to_string(), Arc::new(model));
}

/// Looks up a registered model. `http` is always available.
pub fn named_model(name: &str) -> Result<Arc<TraceModel>, TraceError> {
    let mut models = named_models().lock().expect("model registry");
    if let Some(m) = models.get(name) {
        return Ok(m.clone());
    }
    if name == "http" {
        let m = Arc::new(TraceModel::from_reader(BUILTIN_HTTP.as_bytes(), "builtin:http", DEFAULT_MIN_ROWS)?);
        models.insert(name.to_string(), m.clone());
        return Ok(m);
    }
    Err(TraceError::UnknownModel(name.to_string()))
}

//! On-disk formats: event CSV, dataset manifests, profiles, plans, traces,
//! metric series and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stalepipe_core::graph::{Event, EventStream, GraphError, TimeOrder};
use stalepipe_core::memory::StoreCheckpoint;
use stalepipe_core::model::{Dims, ModelParams, Tensor};
use stalepipe_core::pipeline::{Resource, Stage, StageProfile, StalenessPlan};
use stalepipe_core::sim::{Trace, TraceRecord};
use stalepipe_core::trainer::IterationMetrics;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },
}

impl FormatError {
    /// The file does not exist or cannot be opened.
    pub fn is_missing_file(&self) -> bool {
        matches!(self, FormatError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound)
    }

    fn schema(path: &Path, msg: impl Into<String>) -> Self {
        FormatError::Schema { path: path.to_path_buf(), msg: msg.into() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path, e: csv::Error) -> FormatError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => FormatError::Io { path: path.to_path_buf(), source },
        kind => FormatError::Parse { path: path.to_path_buf(), line, msg: format!("{kind:?}") },
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json { path: path.to_path_buf(), source })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Events

/// Reads `src,dst,ts,label,f0..f{He-1}`. The edge-feature width comes from
/// the header; `label` may be empty. `num_nodes` defaults to the largest id
/// plus one.
pub fn read_events_csv(path: &Path, order: TimeOrder, num_nodes: Option<usize>) -> Result<EventStream, FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(io::BufReader::new(file));
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 4 || names[..4] != ["src", "dst", "ts", "label"] {
        return Err(FormatError::Parse { path: path.to_path_buf(), line: 1, msg: "header must start with src,dst,ts,label".into() });
    }
    for (j, name) in names[4..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(FormatError::Parse { path: path.to_path_buf(), line: 1, msg: format!("expected column f{j}, found {name:?}") });
        }
    }
    let he = names.len() - 4;
    let mut events = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| FormatError::Parse { path: path.to_path_buf(), line, msg };
        let field = |j: usize| record.get(j).unwrap_or("");
        let src = field(0).parse().map_err(|_| bad(format!("bad src {:?}", field(0))))?;
        let dst = field(1).parse().map_err(|_| bad(format!("bad dst {:?}", field(1))))?;
        let ts: f64 = field(2).parse().map_err(|_| bad(format!("bad ts {:?}", field(2))))?;
        if !(field(3).is_empty() || matches!(field(3), "0" | "1")) {
            return Err(bad(format!("label must be 0, 1 or empty, found {:?}", field(3))));
        }
        let feat = (0..he)
            .map(|j| field(4 + j).parse::<f32>().map_err(|_| bad(format!("bad f{j} {:?}", field(4 + j)))))
            .collect::<Result<Vec<_>, _>>()?;
        events.push(Event::new(src, dst, ts, feat));
        lines.push(line);
    }
    EventStream::new(events, num_nodes, 0, he, order).map_err(|e| {
        let line_of = |index: usize| lines.get(index).copied().unwrap_or(0);
        match e {
            GraphError::NonMonotoneTime { index, .. }
            | GraphError::InvalidTimestamp { index, .. }
            | GraphError::NodeOutOfRange { index, .. }
            | GraphError::EdgeFeatureDim { index, .. } => {
                FormatError::Parse { path: path.to_path_buf(), line: line_of(index), msg: e.to_string() }
            }
            other => FormatError::schema(path, other.to_string()),
        }
    })
}

/// Canonical CSV bytes of a stream; equal streams give equal bytes.
pub fn events_csv_bytes(stream: &EventStream) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["src".to_string(), "dst".into(), "ts".into(), "label".into()];
    header.extend((0..stream.edge_feat_dim()).map(|j| format!("f{j}")));
    w.write_record(&header).expect("in-memory write");
    for e in stream.events() {
        let mut row = vec![e.src.to_string(), e.dst.to_string(), e.ts.to_string(), String::new()];
        row.extend(e.edge_feat.iter().map(|x| x.to_string()));
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_events_csv(path: &Path, stream: &EventStream) -> Result<(), FormatError> {
    write_file(path, &events_csv_bytes(stream))
}

/// Dataset summary written next to an ingested event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_nodes: usize,
    pub num_events: usize,
    pub node_feat_dim: usize,
    pub edge_feat_dim: usize,
    /// Last minus first timestamp, in seconds.
    pub duration_s: f64,
    /// SHA-256 of the canonical event CSV.
    pub sha256: String,
}

impl Manifest {
    pub fn of(name: &str, stream: &EventStream) -> Self {
        let digest = Sha256::digest(events_csv_bytes(stream));
        Manifest {
            name: name.to_string(),
            num_nodes: stream.num_nodes(),
            num_events: stream.len(),
            node_feat_dim: stream.node_feat_dim(),
            edge_feat_dim: stream.edge_feat_dim(),
            duration_s: stream.duration(),
            sha256: format!("{digest:x}"),
        }
    }
}

pub const EVENTS_FILE: &str = "events.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `events.csv` and `manifest.json` into `dir`.
pub fn write_bundle(dir: &Path, name: &str, stream: &EventStream) -> Result<Manifest, FormatError> {
    let manifest = Manifest::of(name, stream);
    write_events_csv(&dir.join(EVENTS_FILE), stream)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a bundle written by [`write_bundle`], checking it against its
/// manifest.
pub fn read_bundle(dir: &Path) -> Result<(Manifest, EventStream), FormatError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let path = dir.join(EVENTS_FILE);
    let stream = read_events_csv(&path, TimeOrder::Strict, Some(manifest.num_nodes))?;
    let found = Manifest::of(&manifest.name, &stream);
    if found.sha256 != manifest.sha256 {
        return Err(FormatError::schema(&path, "contents do not match the manifest hash"));
    }
    Ok((manifest, stream))
}

// ---------------------------------------------------------------------------
// Profiles and plans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFile {
    pub unit: String,
    pub stages: BTreeMap<String, f64>,
}

impl ProfileFile {
    pub fn from_profile(p: &StageProfile) -> Self {
        ProfileFile { unit: "ms".into(), stages: Stage::ALL.iter().map(|s| (s.name().to_string(), p.tau(*s))).collect() }
    }

    /// Stage times in milliseconds. Accepts `ms`, `us` and `s`.
    pub fn to_profile(&self, path: &Path) -> Result<StageProfile, FormatError> {
        let scale = match self.unit.as_str() {
            "ms" => 1.0,
            "us" => 1e-3,
            "s" => 1e3,
            other => return Err(FormatError::schema(path, format!("unknown unit {other:?}"))),
        };
        if let Some(extra) = self.stages.keys().find(|k| Stage::from_name(k).is_none()) {
            return Err(FormatError::schema(path, format!("unknown stage {extra:?}")));
        }
        let mut tau = [0.0; 5];
        for s in Stage::ALL {
            tau[s.index()] = scale * *self.stages.get(s.name()).ok_or_else(|| FormatError::schema(path, format!("missing stage {:?}", s.name())))?;
        }
        StageProfile::new(tau).map_err(|e| FormatError::schema(path, e.to_string()))
    }
}

pub fn read_profile(path: &Path) -> Result<StageProfile, FormatError> {
    read_json::<ProfileFile>(path)?.to_profile(path)
}

pub fn write_profile(path: &Path, p: &StageProfile) -> Result<(), FormatError> {
    write_json(path, &ProfileFile::from_profile(p))
}

pub fn read_plan(path: &Path) -> Result<StalenessPlan, FormatError> {
    let plan: StalenessPlan = read_json(path)?;
    plan.validate().map_err(|e| FormatError::schema(path, e.to_string()))?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Traces and metrics

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    iteration: usize,
    stage: String,
    resource: String,
    start_ms: f64,
    end_ms: f64,
    gate_wait_ms: f64,
}

pub fn trace_csv_bytes(trace: &Trace) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &trace.records {
        w.serialize(TraceRow {
            iteration: r.iteration,
            stage: r.stage.name().into(),
            resource: r.resource.name().into(),
            start_ms: r.start_ms,
            end_ms: r.end_ms,
            gate_wait_ms: r.gate_wait_ms,
        })
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_trace_csv(path: &Path, trace: &Trace) -> Result<(), FormatError> {
    write_file(path, &trace_csv_bytes(trace))
}

pub fn read_trace_csv(path: &Path) -> Result<Trace, FormatError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut records = Vec::new();
    for row in reader.deserialize::<TraceRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let stage = Stage::from_name(&row.stage).ok_or_else(|| FormatError::schema(path, format!("unknown stage {:?}", row.stage)))?;
        let resource =
            Resource::from_name(&row.resource).ok_or_else(|| FormatError::schema(path, format!("unknown resource {:?}", row.resource)))?;
        records.push(TraceRecord {
            iteration: row.iteration,
            stage,
            resource,
            start_ms: row.start_ms,
            end_ms: row.end_ms,
            gate_wait_ms: row.gate_wait_ms,
        });
    }
    Ok(Trace { records })
}

/// `iter,loss,grad_norm,stale_err,ap`, one row per optimizer step.
pub fn metrics_csv_bytes(metrics: &[IterationMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iter", "loss", "grad_norm", "stale_err", "ap"]).expect("in-memory write");
    for m in metrics {
        w.write_record([m.step.to_string(), m.loss.to_string(), m.grad_norm.to_string(), m.stale_err.to_string(), m.ap.to_string()])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// `iter,err_frobenius,err_mitigated`, one row per optimizer step.
pub fn staleness_csv_bytes(metrics: &[IterationMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iter", "err_frobenius", "err_mitigated"]).expect("in-memory write");
    for m in metrics {
        w.write_record([m.step.to_string(), m.stale_err.to_string(), m.stale_err_mitigated.to_string()]).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// One row of a staleness CSV.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct StalenessRow {
    pub iter: u64,
    pub err_frobenius: f64,
    pub err_mitigated: f64,
}

pub fn read_staleness_csv(path: &Path) -> Result<Vec<StalenessRow>, FormatError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    /// SHA-256 of the run configuration that produced the weights.
    pub config_hash: String,
    pub dims: Dims,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl ModelCheckpoint {
    pub fn new(params: &ModelParams, config_hash: String) -> Self {
        let tensors = Tensor::ALL.iter().map(|t| (t.name().to_string(), params.get(*t).to_vec())).collect();
        ModelCheckpoint { format_version: MODEL_FORMAT_VERSION, config_hash, dims: params.dims, tensors }
    }

    pub fn params(&self, path: &Path) -> Result<ModelParams, FormatError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(FormatError::schema(path, format!("unsupported format version {}", self.format_version)));
        }
        let mut p = ModelParams::zeros(self.dims);
        for t in Tensor::ALL {
            let data = self.tensors.get(t.name()).ok_or_else(|| FormatError::schema(path, format!("missing tensor {}", t.name())))?;
            let slot = p.get_mut(t);
            if slot.len() != data.len() {
                return Err(FormatError::schema(path, format!("tensor {} has {} values, expected {}", t.name(), data.len(), slot.len())));
            }
            slot.copy_from_slice(data);
        }
        if self.tensors.len() != Tensor::ALL.len() {
            return Err(FormatError::schema(path, "unknown tensors present"));
        }
        Ok(p)
    }
}

pub fn read_model(path: &Path) -> Result<ModelCheckpoint, FormatError> {
    read_json(path)
}

pub fn read_store(path: &Path) -> Result<StoreCheckpoint, FormatError> {
    read_json(path)
}

/// SHA-256 hex digest of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes `bytes` to stdout, ignoring a closed pipe.
pub fn print_bytes(bytes: &[u8]) {
    let _ = io::stdout().lock().write_all(bytes);
}

//! Published stage breakdowns and dataset statistics, bundled as named
//! fixtures.
//!
//! Breakdowns are percentages of one training iteration; they are used
//! directly as millisecond profiles of a 100 ms iteration.

use crate::pipeline::StageProfile;

/// Stage time shares of one dataset under one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub model: &'static str,
    pub dataset: &'static str,
    /// sample, fetch-feature, fetch-memory, train, update-memory, in percent.
    pub percent: [f64; 5],
}

impl Breakdown {
    pub fn name(&self) -> alloc::string::String {
        alloc::format!("{}/{}", self.model, self.dataset)
    }

    /// Profile of a 100 ms iteration.
    pub fn profile(&self) -> StageProfile {
        StageProfile::new(self.percent).expect("bundled fixtures are positive")
    }
}

const fn row(model: &'static str, dataset: &'static str, percent: [f64; 5]) -> Breakdown {
    Breakdown { model, dataset, percent }
}

pub const TGN: [Breakdown; 5] = [
    row("tgn", "reddit", [9.5, 12.6, 5.7, 46.9, 25.3]),
    row("tgn", "wiki", [6.6, 5.8, 5.8, 51.5, 30.3]),
    row("tgn", "mooc", [9.7, 3.0, 2.5, 53.1, 31.7]),
    row("tgn", "lastfm", [11.5, 9.1, 8.5, 43.0, 26.8]),
    row("tgn", "gdelt", [17.6, 12.8, 10.5, 37.5, 21.6]),
];

pub const JODIE: [Breakdown; 5] = [
    row("jodie", "reddit", [4.14, 8.05, 7.36, 50.11, 30.34]),
    row("jodie", "wiki", [2.20, 1.10, 4.95, 46.70, 45.05]),
    row("jodie", "mooc", [3.41, 1.02, 5.80, 51.05, 38.71]),
    row("jodie", "lastfm", [4.29, 1.14, 6.19, 44.95, 43.43]),
    row("jodie", "gdelt", [3.25, 8.56, 9.34, 38.75, 40.11]),
];

pub const APAN: [Breakdown; 5] = [
    row("apan", "reddit", [12.94, 5.75, 15.18, 39.14, 27.00]),
    row("apan", "wiki", [6.52, 0.87, 9.13, 42.61, 40.87]),
    row("apan", "mooc", [10.60, 0.83, 8.32, 45.11, 35.14]),
    row("apan", "lastfm", [11.12, 1.02, 12.26, 41.77, 33.83]),
    row("apan", "gdelt", [14.34, 3.25, 20.31, 23.95, 38.15]),
];

/// Every bundled breakdown.
pub fn all_breakdowns() -> impl Iterator<Item = &'static Breakdown> {
    TGN.iter().chain(JODIE.iter()).chain(APAN.iter())
}

/// Looks up `model/dataset` (or a bare dataset name, meaning TGN).
pub fn breakdown(name: &str) -> Option<&'static Breakdown> {
    let lower = name.to_ascii_lowercase();
    let (model, dataset) = lower.split_once('/').unwrap_or(("tgn", lower.as_str()));
    all_breakdowns().find(|b| b.model == model && b.dataset == dataset)
}

/// Published statistics of an event dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub name: &'static str,
    pub num_nodes: u64,
    pub num_events: u64,
    pub node_feat_dim: u64,
    pub edge_feat_dim: u64,
    pub duration: &'static str,
}

pub const DATASETS: [DatasetStats; 5] = [
    DatasetStats { name: "reddit", num_nodes: 10_984, num_events: 672_447, node_feat_dim: 0, edge_feat_dim: 172, duration: "1 month" },
    DatasetStats { name: "wiki", num_nodes: 9_227, num_events: 157_474, node_feat_dim: 0, edge_feat_dim: 172, duration: "1 month" },
    DatasetStats { name: "mooc", num_nodes: 7_144, num_events: 411_749, node_feat_dim: 0, edge_feat_dim: 128, duration: "17 months" },
    DatasetStats { name: "lastfm", num_nodes: 1_980, num_events: 1_293_103, node_feat_dim: 0, edge_feat_dim: 128, duration: "1 month" },
    DatasetStats { name: "gdelt", num_nodes: 16_682, num_events: 191_290_882, node_feat_dim: 413, edge_feat_dim: 186, duration: "5 years" },
];

pub fn dataset(name: &str) -> Option<&'static DatasetStats> {
    DATASETS.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}

/// Settings behind a published memory-overhead upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadCase {
    pub dataset: &'static str,
    pub batch: u64,
    pub fan_out: u64,
    pub mem_dim: u64,
    pub k: u64,
    /// Published upper bound in bytes (decimal units).
    pub published_bytes: f64,
}

pub const OVERHEAD: [OverheadCase; 5] = [
    OverheadCase { dataset: "reddit", batch: 600, fan_out: 10, mem_dim: 100, k: 3, published_bytes: 51.4e6 },
    OverheadCase { dataset: "wiki", batch: 600, fan_out: 10, mem_dim: 100, k: 2, published_bytes: 34.3e6 },
    OverheadCase { dataset: "mooc", batch: 600, fan_out: 10, mem_dim: 100, k: 3, published_bytes: 44.3e6 },
    OverheadCase { dataset: "lastfm", batch: 600, fan_out: 10, mem_dim: 100, k: 3, published_bytes: 44.3e6 },
    OverheadCase { dataset: "gdelt", batch: 4000, fan_out: 10, mem_dim: 100, k: 4, published_bytes: 1.35e9 },
];

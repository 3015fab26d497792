//! Synthetic bipartite interaction streams.
//!
//! Users belong to communities and interact with items in bursts (sessions).
//! Each user has a few favorite items inside its community that it keeps
//! returning to, activity follows a Zipf law, and edge features are a
//! community signature plus noise. This gives repeated, predictable links
//! and a heavy-tailed distribution of per-node update gaps.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Event, EventStream, GraphError, NodeId, TimeOrder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_events: usize,
    pub communities: usize,
    pub edge_dim: usize,
    /// Zipf exponent of user activity.
    pub zipf: f64,
    /// Mean events per session.
    pub session_len: f64,
    /// Mean seconds between events inside a session.
    pub session_gap: f64,
    /// Favorite items per user.
    pub favorites: usize,
    /// Chance an event goes to a favorite item.
    pub p_favorite: f64,
    /// Chance a non-favorite event stays in the user's community.
    pub p_community: f64,
    /// Standard deviation of edge-feature noise.
    pub noise: f64,
    /// Time span in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// About 2,000 nodes and 50,000 events.
    pub fn toy(seed: u64) -> Self {
        SynthConfig {
            num_users: 1_500,
            num_items: 500,
            num_events: 50_000,
            communities: 10,
            edge_dim: 8,
            zipf: 1.0,
            session_len: 6.0,
            session_gap: 60.0,
            favorites: 4,
            p_favorite: 0.6,
            p_community: 0.8,
            noise: 0.5,
            duration: 30.0 * 86_400.0,
            seed,
        }
    }

    /// Same node, event and feature counts as the WIKI edit log: 8,227 users,
    /// 1,000 pages, 157,474 events and 172 edge features over one month.
    pub fn wiki_shaped(seed: u64) -> Self {
        SynthConfig {
            num_users: 8_227,
            num_items: 1_000,
            num_events: 157_474,
            communities: 20,
            edge_dim: 172,
            ..Self::toy(seed)
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }
}

/// Samples from a fixed discrete distribution by inverting its CDF.
struct Cdf(Vec<f64>);

impl Cdf {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let mut c: Vec<f64> = weights.map(|w| {
            acc += w;
            acc
        }).collect();
        for x in &mut c {
            *x /= acc;
        }
        Cdf(c)
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.0.partition_point(|&x| x < u).min(self.0.len() - 1)
    }
}

fn exp_sample(rng: &mut impl Rng, mean: f64) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -mean * libm::log(u)
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Generates the stream. Users are ids `0..num_users`, items follow.
pub fn generate(cfg: &SynthConfig) -> Result<EventStream, GraphError> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.communities == 0 {
        return Err(GraphError::ZeroNodes);
    }
    if cfg.num_events == 0 {
        return Err(GraphError::EmptyStream);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (nu, ni, nc) = (cfg.num_users, cfg.num_items, cfg.communities);

    let user_comm: Vec<usize> = (0..nu).map(|_| rng.gen_range(0..nc)).collect();
    let item_comm: Vec<usize> = (0..ni).map(|i| i % nc).collect();
    let mut members: Vec<Vec<usize>> = alloc::vec![Vec::new(); nc];
    for (i, &c) in item_comm.iter().enumerate() {
        members[c].push(i);
    }
    let item_pop = Cdf::new((0..ni).map(|i| 1.0 / (1.0 + (i / nc) as f64)));
    let favorites: Vec<Vec<usize>> = user_comm
        .iter()
        .map(|&c| (0..cfg.favorites).map(|_| *members[c].choose(&mut rng).expect("non-empty community")).collect())
        .collect();
    let mut rank: Vec<usize> = (0..nu).collect();
    rank.shuffle(&mut rng);
    let activity = Cdf::new(rank.iter().map(|&r| libm::pow(1.0 + r as f64, -cfg.zipf)));
    let signature: Vec<Vec<f64>> = (0..nc).map(|_| (0..cfg.edge_dim).map(|_| normal(&mut rng)).collect()).collect();

    let mut raw: Vec<(f64, usize, usize)> = Vec::with_capacity(cfg.num_events);
    while raw.len() < cfg.num_events {
        let u = activity.sample(&mut rng);
        let len = 1 + libm::floor(exp_sample(&mut rng, cfg.session_len - 1.0)) as usize;
        let mut t = rng.gen_range(0.0..cfg.duration);
        for _ in 0..len.min(cfg.num_events - raw.len()) {
            let c = user_comm[u];
            let item = if rng.gen_bool(cfg.p_favorite) {
                *favorites[u].choose(&mut rng).expect("favorites non-empty")
            } else if rng.gen_bool(cfg.p_community) {
                *members[c].choose(&mut rng).expect("non-empty community")
            } else {
                item_pop.sample(&mut rng)
            };
            raw.push((t, u, item));
            t += exp_sample(&mut rng, cfg.session_gap);
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));

    let events = raw
        .into_iter()
        .map(|(ts, u, i)| {
            let sig = &signature[item_comm[i]];
            let feat = sig.iter().map(|&s| (s + cfg.noise * normal(&mut rng)) as f32).collect();
            Event::new(u as NodeId, (nu + i) as NodeId, ts, feat)
        })
        .collect();
    EventStream::new(events, Some(cfg.num_nodes()), 0, cfg.edge_dim, TimeOrder::Strict)
}

/// Per-iteration node sets with Zipf-distributed ids, for staleness
/// statistics.
pub fn zipf_batches(num_nodes: usize, batches: usize, batch_size: usize, exponent: f64, seed: u64) -> Vec<Vec<NodeId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf = Cdf::new((0..num_nodes.max(1)).map(|r| libm::pow(1.0 + r as f64, -exponent)));
    (0..batches)
        .map(|_| (0..batch_size).map(|_| cdf.sample(&mut rng) as NodeId).collect())
        .collect()
}

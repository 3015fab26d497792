//! A small memory-based temporal GNN with hand-written gradients.
//!
//! Each node keeps a memory vector and a mailbox holding the raw inputs of its
//! latest interaction. When a node is a prediction target its memory is first
//! refreshed from the mailbox (message layer, then a GRU cell), the refreshed
//! memory is combined with the mean memory and mean time encoding of its
//! sampled neighbors into an embedding, and pairs of embeddings are scored by
//! a two-layer decoder. The refreshed memories of positive endpoints are what
//! gets written back.
//!
//! All parameters live in one flat `f64` buffer so that optimizer steps,
//! checkpoints and finite-difference checks can treat them uniformly.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::{dot, sigmoid, softplus, sq_norm};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("time gap must be non-negative and finite, got {0}")]
    NegativeDeltaT(f64),
    #[error("{what}: expected length {expected}, found {found}")]
    Dim { what: &'static str, expected: usize, found: usize },
    #[error("loss became non-finite ({loss}) at iteration {iteration}")]
    NonFiniteLoss { loss: f64, iteration: u64 },
    #[error("parameter buffer has {found} values, layout needs {expected}")]
    Layout { expected: usize, found: usize },
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected != found {
        return Err(ModelError::Dim { what, expected, found });
    }
    Ok(())
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Memory (and message) width `M`.
    pub mem: usize,
    /// Embedding width `H`.
    pub emb: usize,
    /// Time-encoding width `d_t`.
    pub time: usize,
    /// Edge-feature width.
    pub edge: usize,
    /// Decoder hidden width.
    pub dec_hidden: usize,
}

impl Dims {
    /// Width of a node's mailbox row: partner memory, edge features, time gap
    /// and a has-mail flag.
    pub fn mail(&self) -> usize {
        self.mem + self.edge + 2
    }

    fn msg_in(&self) -> usize {
        2 * self.mem + self.edge + self.time
    }

    fn emb_in(&self) -> usize {
        2 * self.mem + self.time
    }
}

/// Learnable tensors, in buffer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tensor {
    MsgW,
    MsgB,
    GruWz,
    GruUz,
    GruBz,
    GruWr,
    GruUr,
    GruBr,
    GruWc,
    GruUc,
    GruBc,
    EmbW,
    EmbB,
    DecW1,
    DecB1,
    DecW2,
    DecB2,
}

impl Tensor {
    pub const ALL: [Tensor; 17] = [
        Tensor::MsgW,
        Tensor::MsgB,
        Tensor::GruWz,
        Tensor::GruUz,
        Tensor::GruBz,
        Tensor::GruWr,
        Tensor::GruUr,
        Tensor::GruBr,
        Tensor::GruWc,
        Tensor::GruUc,
        Tensor::GruBc,
        Tensor::EmbW,
        Tensor::EmbB,
        Tensor::DecW1,
        Tensor::DecB1,
        Tensor::DecW2,
        Tensor::DecB2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::MsgW => "msg.w",
            Tensor::MsgB => "msg.b",
            Tensor::GruWz => "gru.w_z",
            Tensor::GruUz => "gru.u_z",
            Tensor::GruBz => "gru.b_z",
            Tensor::GruWr => "gru.w_r",
            Tensor::GruUr => "gru.u_r",
            Tensor::GruBr => "gru.b_r",
            Tensor::GruWc => "gru.w_c",
            Tensor::GruUc => "gru.u_c",
            Tensor::GruBc => "gru.b_c",
            Tensor::EmbW => "emb.w",
            Tensor::EmbB => "emb.b",
            Tensor::DecW1 => "dec.w1",
            Tensor::DecB1 => "dec.b1",
            Tensor::DecW2 => "dec.w2",
            Tensor::DecB2 => "dec.b2",
        }
    }

    /// `(rows, cols)`; biases are `(n, 1)`.
    pub fn shape(self, d: &Dims) -> (usize, usize) {
        let m = d.mem;
        match self {
            Tensor::MsgW => (m, d.msg_in()),
            Tensor::GruWz | Tensor::GruWr | Tensor::GruWc | Tensor::GruUz | Tensor::GruUr | Tensor::GruUc => (m, m),
            Tensor::MsgB | Tensor::GruBz | Tensor::GruBr | Tensor::GruBc => (m, 1),
            Tensor::EmbW => (d.emb, d.emb_in()),
            Tensor::EmbB => (d.emb, 1),
            Tensor::DecW1 => (d.dec_hidden, 2 * d.emb),
            Tensor::DecB1 => (d.dec_hidden, 1),
            Tensor::DecW2 => (1, d.dec_hidden),
            Tensor::DecB2 => (1, 1),
        }
    }

    fn is_bias(self) -> bool {
        matches!(self, Tensor::MsgB | Tensor::GruBz | Tensor::GruBr | Tensor::GruBc | Tensor::EmbB | Tensor::DecB1 | Tensor::DecB2)
    }
}

/// All learnable parameters (or a gradient of the same shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let n = Tensor::ALL.iter().map(|t| {
            let (r, c) = t.shape(&dims);
            r * c
        });
        ModelParams { dims, data: vec![0.0; n.sum()] }
    }

    /// Uniform Glorot initialization for matrices, zero biases.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in Tensor::ALL {
            if t.is_bias() {
                continue;
            }
            let (r, c) = t.shape(&dims);
            let a = libm::sqrt(6.0 / (r + c) as f64);
            for x in p.get_mut(t) {
                *x = rng.gen_range(-a..a);
            }
        }
        p
    }

    pub fn from_data(dims: Dims, data: Vec<f64>) -> Result<Self, ModelError> {
        let p = Self::zeros(dims);
        if p.data.len() != data.len() {
            return Err(ModelError::Layout { expected: p.data.len(), found: data.len() });
        }
        Ok(ModelParams { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        let mut start = 0;
        for u in Tensor::ALL {
            let (r, c) = u.shape(&self.dims);
            if u == t {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!()
    }

    pub fn get(&self, t: Tensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.data[r]
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(sq_norm(&self.data))
    }
}

/// Fixed cosine time encoder with a geometric frequency ladder
/// `omega_j = 10^(-9 j / (d_t - 1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEncoder {
    omega: Vec<f64>,
}

impl TimeEncoder {
    pub fn new(dim: usize) -> Self {
        let omega = (0..dim)
            .map(|j| if dim == 1 { 1.0 } else { libm::pow(10.0, -9.0 * j as f64 / (dim - 1) as f64) })
            .collect();
        TimeEncoder { omega }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn encode(&self, dt: f64) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(dt, &mut out)?;
        Ok(out)
    }

    fn encode_into(&self, dt: f64, out: &mut [f64]) -> Result<(), ModelError> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(ModelError::NegativeDeltaT(dt));
        }
        for (o, w) in out.iter_mut().zip(&self.omega) {
            *o = libm::cos(w * dt);
        }
        Ok(())
    }
}

/// `W x (+ b)` for row-major `W` of shape `(b.len() or rows, x.len())`.
fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| dot(&w[r * cols..(r + 1) * cols], x) + b.map_or(0.0, |b| b[r]))
        .collect()
}

/// Accumulates `dy x^T` into `gw` and `W^T dy` into `dx`.
fn affine_back(w: &[f64], x: &[f64], dy: &[f64], gw: &mut [f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (gw, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gw += g * xv;
        }
    }
    if let Some(dx) = dx {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, wv) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *d += g * wv;
            }
        }
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Message from `[s_v || s_u || edge || phi(dt)]`.
pub fn msg_forward(p: &ModelParams, te: &TimeEncoder, s_v: &[f64], s_u: &[f64], edge: &[f64], dt: f64) -> Result<Vec<f64>, ModelError> {
    let d = p.dims;
    check_len("s_v", d.mem, s_v.len())?;
    check_len("s_u", d.mem, s_u.len())?;
    check_len("edge", d.edge, edge.len())?;
    let x = [s_v, s_u, edge, &te.encode(dt)?].concat();
    Ok(affine(p.get(Tensor::MsgW), Some(p.get(Tensor::MsgB)), &x, d.mem))
}

/// Intermediate values of one GRU step.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub s_new: Vec<f64>,
}

/// Standard GRU cell with input `m` and state `s`.
pub fn mem_update(p: &ModelParams, s: &[f64], m: &[f64]) -> Result<GruCache, ModelError> {
    let mdim = p.dims.mem;
    check_len("memory", mdim, s.len())?;
    check_len("message", mdim, m.len())?;
    let gate = |w, u, b| {
        let a = affine(p.get(w), Some(p.get(b)), m, mdim);
        let us = affine(p.get(u), None, s, mdim);
        a.iter().zip(&us).map(|(x, y)| sigmoid(x + y)).collect::<Vec<_>>()
    };
    let z = gate(Tensor::GruWz, Tensor::GruUz, Tensor::GruBz);
    let r = gate(Tensor::GruWr, Tensor::GruUr, Tensor::GruBr);
    let rs: Vec<f64> = r.iter().zip(s).map(|(a, b)| a * b).collect();
    let a = affine(p.get(Tensor::GruWc), Some(p.get(Tensor::GruBc)), m, mdim);
    let us = affine(p.get(Tensor::GruUc), None, &rs, mdim);
    let c: Vec<f64> = a.iter().zip(&us).map(|(x, y)| libm::tanh(x + y)).collect();
    let s_new = (0..mdim).map(|j| (1.0 - z[j]) * s[j] + z[j] * c[j]).collect();
    Ok(GruCache { z, r, c, s_new })
}

/// Backward through the GRU given `d s_new`; returns `d m`. The state is
/// treated as a constant input.
fn mem_update_back(p: &ModelParams, g: &mut ModelParams, s: &[f64], m: &[f64], cache: &GruCache, ds_new: &[f64]) -> Vec<f64> {
    let mdim = p.dims.mem;
    let mut dm = vec![0.0; mdim];
    let dac: Vec<f64> = (0..mdim).map(|j| ds_new[j] * cache.z[j] * (1.0 - cache.c[j] * cache.c[j])).collect();
    let daz: Vec<f64> = (0..mdim)
        .map(|j| ds_new[j] * (cache.c[j] - s[j]) * cache.z[j] * (1.0 - cache.z[j]))
        .collect();
    let rs: Vec<f64> = cache.r.iter().zip(s).map(|(a, b)| a * b).collect();
    let mut drs = vec![0.0; mdim];
    affine_back(p.get(Tensor::GruUc), &rs, &dac, g.get_mut(Tensor::GruUc), Some(&mut drs));
    let dar: Vec<f64> = (0..mdim).map(|j| drs[j] * s[j] * cache.r[j] * (1.0 - cache.r[j])).collect();
    for (w, u, b, da) in [
        (Tensor::GruWz, Tensor::GruUz, Tensor::GruBz, &daz),
        (Tensor::GruWr, Tensor::GruUr, Tensor::GruBr, &dar),
        (Tensor::GruWc, Tensor::GruUc, Tensor::GruBc, &dac),
    ] {
        affine_back(p.get(w), m, da, g.get_mut(w), Some(&mut dm));
        add_into(g.get_mut(b), da);
        if u != Tensor::GruUc {
            affine_back(p.get(u), s, da, g.get_mut(u), None);
        }
    }
    dm
}

/// Mean of neighbor memories and of their time encodings; zeros when empty.
pub fn neighbor_summary(te: &TimeEncoder, mem_dim: usize, neighbor_mem: &[&[f64]], neighbor_dt: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_len("neighbor time gaps", neighbor_mem.len(), neighbor_dt.len())?;
    let mut out = vec![0.0; mem_dim + te.dim()];
    if neighbor_mem.is_empty() {
        return Ok(out);
    }
    let mut phi = vec![0.0; te.dim()];
    for (s, &dt) in neighbor_mem.iter().zip(neighbor_dt) {
        check_len("neighbor memory", mem_dim, s.len())?;
        add_into(&mut out[..mem_dim], s);
        te.encode_into(dt, &mut phi)?;
        add_into(&mut out[mem_dim..], &phi);
    }
    let inv = 1.0 / neighbor_mem.len() as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    Ok(out)
}

/// `h = W [s_self || mean s_u || mean phi(dt_u)] + b`.
pub fn embed(p: &ModelParams, te: &TimeEncoder, s_self: &[f64], neighbor_mem: &[&[f64]], neighbor_dt: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_len("memory", p.dims.mem, s_self.len())?;
    let x = [s_self, &neighbor_summary(te, p.dims.mem, neighbor_mem, neighbor_dt)?].concat();
    Ok(affine(p.get(Tensor::EmbW), Some(p.get(Tensor::EmbB)), &x, p.dims.emb))
}

/// Decoder logit for a pair of embeddings.
pub fn decode(p: &ModelParams, h_a: &[f64], h_b: &[f64]) -> f64 {
    let x = [h_a, h_b].concat();
    let pre = affine(p.get(Tensor::DecW1), Some(p.get(Tensor::DecB1)), &x, p.dims.dec_hidden);
    let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    dot(p.get(Tensor::DecW2), &hidden) + p.get(Tensor::DecB2)[0]
}

/// Mean binary cross-entropy over positive and negative logits, with the
/// predicted probabilities.
pub fn bce_loss(pos_logits: &[f64], neg_logits: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = (pos_logits.len() + neg_logits.len()).max(1) as f64;
    let loss = (pos_logits.iter().map(|&x| softplus(-x)).sum::<f64>() + neg_logits.iter().map(|&x| softplus(x)).sum::<f64>()) / n;
    (loss, pos_logits.iter().map(|&x| sigmoid(x)).collect(), neg_logits.iter().map(|&x| sigmoid(x)).collect())
}

/// Loss and probabilities for `(src, dst)` positives and `(src, neg)`
/// negatives given their embeddings.
pub fn decode_and_loss(p: &ModelParams, h_src: &[Vec<f64>], h_dst: &[Vec<f64>], h_neg: &[Vec<f64>]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = h_src.iter().zip(h_dst).map(|(a, b)| decode(p, a, b)).collect();
    let neg: Vec<f64> = h_src.iter().zip(h_neg).map(|(a, b)| decode(p, a, b)).collect();
    bce_loss(&pos, &neg)
}

/// Everything one training or evaluation step needs, already gathered from
/// the memory store, the neighbor buffer and the feature table.
///
/// Targets are the distinct nodes among sources, destinations and negatives.
/// Occurrences are the `3B` (node, time) roots laid out as all sources, then
/// all destinations, then all negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub iteration: u64,
    pub batch: usize,
    /// `targets.len() x M` memory as read (after any mitigation).
    pub target_mem: Vec<f64>,
    /// `targets.len() x mail` mailbox rows.
    pub target_mail: Vec<f64>,
    /// Target index of each occurrence.
    pub occ_target: Vec<usize>,
    /// Neighbor rows of each occurrence are `neigh_offsets[o]..neigh_offsets[o+1]`.
    pub neigh_offsets: Vec<usize>,
    pub neigh_mem: Vec<f64>,
    pub neigh_dt: Vec<f64>,
}

impl StepInput {
    pub fn num_targets(&self, d: &Dims) -> usize {
        self.target_mem.len() / d.mem
    }

    fn validate(&self, d: &Dims) -> Result<(), ModelError> {
        let t = self.num_targets(d);
        check_len("target memory", t * d.mem, self.target_mem.len())?;
        check_len("target mail", t * d.mail(), self.target_mail.len())?;
        check_len("occurrences", 3 * self.batch, self.occ_target.len())?;
        check_len("neighbor offsets", 3 * self.batch + 1, self.neigh_offsets.len())?;
        let n = *self.neigh_offsets.last().unwrap_or(&0);
        check_len("neighbor gaps", n, self.neigh_dt.len())?;
        check_len("neighbor memory", n * d.mem, self.neigh_mem.len())?;
        if let Some(&bad) = self.occ_target.iter().find(|&&i| i >= t) {
            return Err(ModelError::Dim { what: "occurrence target", expected: t, found: bad });
        }
        Ok(())
    }
}

/// Result of a forward (and possibly backward) pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub pos_prob: Vec<f64>,
    pub neg_prob: Vec<f64>,
    /// Refreshed memory of every target, `targets x M`.
    pub new_mem: Vec<f64>,
    pub grad: Option<ModelParams>,
}

struct TargetState {
    x: Vec<f64>,
    m: Vec<f64>,
    cache: GruCache,
}

/// Runs the model on one batch; computes gradients when `backward` is set.
pub fn forward(p: &ModelParams, te: &TimeEncoder, input: &StepInput, backward: bool) -> Result<StepOutput, ModelError> {
    let d = p.dims;
    input.validate(&d)?;
    let (mdim, mail) = (d.mem, d.mail());
    let nt = input.num_targets(&d);
    let b = input.batch;

    // Memory refresh from mailboxes.
    let mut states: Vec<Option<TargetState>> = Vec::with_capacity(nt);
    let mut new_mem = input.target_mem.clone();
    for t in 0..nt {
        let s = &input.target_mem[t * mdim..(t + 1) * mdim];
        let row = &input.target_mail[t * mail..(t + 1) * mail];
        if row[mail - 1] == 0.0 {
            states.push(None);
            continue;
        }
        let (other, rest) = row.split_at(mdim);
        let (edge, tail) = rest.split_at(d.edge);
        let mut phi = vec![0.0; d.time];
        te.encode_into(tail[0], &mut phi)?;
        let x = [s, other, edge, &phi].concat();
        let m = affine(p.get(Tensor::MsgW), Some(p.get(Tensor::MsgB)), &x, mdim);
        let cache = mem_update(p, s, &m)?;
        new_mem[t * mdim..(t + 1) * mdim].copy_from_slice(&cache.s_new);
        states.push(Some(TargetState { x, m, cache }));
    }

    // Embeddings per occurrence.
    let occ = 3 * b;
    let mut emb_in = Vec::with_capacity(occ);
    let mut h = Vec::with_capacity(occ);
    for o in 0..occ {
        let t = input.occ_target[o];
        let range = input.neigh_offsets[o]..input.neigh_offsets[o + 1];
        let rows: Vec<&[f64]> = range.clone().map(|r| &input.neigh_mem[r * mdim..(r + 1) * mdim]).collect();
        let summary = neighbor_summary(te, mdim, &rows, &input.neigh_dt[range])?;
        let x = [&new_mem[t * mdim..(t + 1) * mdim], &summary[..]].concat();
        h.push(affine(p.get(Tensor::EmbW), Some(p.get(Tensor::EmbB)), &x, d.emb));
        emb_in.push(x);
    }

    // Decoder over b positive then b negative pairs.
    let pairs: Vec<(usize, usize)> = (0..b).map(|j| (j, b + j)).chain((0..b).map(|j| (j, 2 * b + j))).collect();
    let mut dec_in = Vec::with_capacity(2 * b);
    let mut pre = Vec::with_capacity(2 * b);
    let mut logits = Vec::with_capacity(2 * b);
    for &(a, c) in &pairs {
        let x = [&h[a][..], &h[c][..]].concat();
        let z = affine(p.get(Tensor::DecW1), Some(p.get(Tensor::DecB1)), &x, d.dec_hidden);
        let hidden: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        logits.push(dot(p.get(Tensor::DecW2), &hidden) + p.get(Tensor::DecB2)[0]);
        dec_in.push(x);
        pre.push(z);
    }
    let (loss, pos_prob, neg_prob) = bce_loss(&logits[..b], &logits[b..]);
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { loss, iteration: input.iteration });
    }
    if !backward {
        return Ok(StepOutput { loss, pos_prob, neg_prob, new_mem, grad: None });
    }

    let mut g = ModelParams::zeros(d);
    let n = (2 * b).max(1) as f64;
    let mut dh = vec![vec![0.0; d.emb]; occ];
    for (q, &(a, c)) in pairs.iter().enumerate() {
        let y = if q < b { 1.0 } else { 0.0 };
        let dl = (sigmoid(logits[q]) - y) / n;
        let hidden: Vec<f64> = pre[q].iter().map(|v| v.max(0.0)).collect();
        for (gw, hv) in g.get_mut(Tensor::DecW2).iter_mut().zip(&hidden) {
            *gw += dl * hv;
        }
        g.get_mut(Tensor::DecB2)[0] += dl;
        let dpre: Vec<f64> = pre[q]
            .iter()
            .zip(p.get(Tensor::DecW2))
            .map(|(&z, &w)| if z > 0.0 { dl * w } else { 0.0 })
            .collect();
        let mut dx = vec![0.0; 2 * d.emb];
        affine_back(p.get(Tensor::DecW1), &dec_in[q], &dpre, g.get_mut(Tensor::DecW1), Some(&mut dx));
        add_into(g.get_mut(Tensor::DecB1), &dpre);
        add_into(&mut dh[a], &dx[..d.emb]);
        add_into(&mut dh[c], &dx[d.emb..]);
    }

    let mut ds_new = vec![0.0; nt * mdim];
    for o in 0..occ {
        let mut dx = vec![0.0; d.emb_in()];
        affine_back(p.get(Tensor::EmbW), &emb_in[o], &dh[o], g.get_mut(Tensor::EmbW), Some(&mut dx));
        add_into(g.get_mut(Tensor::EmbB), &dh[o]);
        let t = input.occ_target[o];
        add_into(&mut ds_new[t * mdim..(t + 1) * mdim], &dx[..mdim]);
    }

    for (t, state) in states.iter().enumerate() {
        let Some(st) = state else { continue };
        let s = &input.target_mem[t * mdim..(t + 1) * mdim];
        let dm = mem_update_back(p, &mut g, s, &st.m, &st.cache, &ds_new[t * mdim..(t + 1) * mdim]);
        affine_back(p.get(Tensor::MsgW), &st.x, &dm, g.get_mut(Tensor::MsgW), None);
        add_into(g.get_mut(Tensor::MsgB), &dm);
    }

    Ok(StepOutput { loss, pos_prob, neg_prob, new_mem, grad: Some(g) })
}

/// Step-size rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `eta_t = min(2 / L, 1 / sqrt(t))` for a user-supplied smoothness `L`.
    InverseSqrt { smoothness: f64 },
}

impl LrSchedule {
    /// Step size at 1-based step `t`.
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::InverseSqrt { smoothness } => (2.0 / smoothness).min(1.0 / libm::sqrt(t.max(1) as f64)),
        }
    }
}

/// Plain gradient descent step.
pub fn sgd_step(p: &mut ModelParams, grad: &ModelParams, lr: f64) {
    for (w, g) in p.data.iter_mut().zip(&grad.data) {
        *w -= lr * g;
    }
}

/// Average precision of positive-vs-negative scores. Tied scores are ranked
/// together: the precision at a positive is the positive share among all
/// items scoring at least as high.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() {
        return None;
    }
    let mut items: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut seen, mut hits, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        let mut group_hits = 0;
        while j < items.len() && items[j].0 == items[i].0 {
            group_hits += items[j].1 as usize;
            j += 1;
        }
        seen += j - i;
        hits += group_hits;
        ap += group_hits as f64 * hits as f64 / seen as f64;
        i = j;
    }
    Some(ap / pos.len() as f64)
}

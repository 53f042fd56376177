//! Attention scene encoder with a per-candidate scoring head, trained with
//! hand-written backpropagation.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::SceneTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerDims {
    /// Scene row width F.
    pub features: usize,
    /// Candidate vector width.
    pub cand: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub hidden: usize,
}

impl Default for ScorerDims {
    fn default() -> Self {
        Self {
            features: crate::world::FEATURE_DIM,
            cand: 18,
            d_model: 32,
            d_head: 16,
            hidden: 64,
        }
    }
}

impl std::fmt::Display for ScorerDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "F={} C={} d_model={} d_head={} hidden={}",
            self.features, self.cand, self.d_model, self.d_head, self.hidden
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    EmbedW,
    EmbedB,
    Query,
    Key,
    Value,
    Out,
    OutB,
    HeadW1,
    HeadB1,
    HeadW2,
    HeadB2,
}

impl Block {
    pub const ALL: [Block; 11] = [
        Block::EmbedW,
        Block::EmbedB,
        Block::Query,
        Block::Key,
        Block::Value,
        Block::Out,
        Block::OutB,
        Block::HeadW1,
        Block::HeadB1,
        Block::HeadW2,
        Block::HeadB2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::EmbedW => "embed.w",
            Block::EmbedB => "embed.b",
            Block::Query => "attn.q",
            Block::Key => "attn.k",
            Block::Value => "attn.v",
            Block::Out => "attn.o",
            Block::OutB => "attn.o_bias",
            Block::HeadW1 => "head.w1",
            Block::HeadB1 => "head.b1",
            Block::HeadW2 => "head.w2",
            Block::HeadB2 => "head.b2",
        }
    }

    /// (rows, cols); biases are single-row.
    pub fn shape(self, d: &ScorerDims) -> (usize, usize) {
        let input = d.d_model + d.cand;
        match self {
            Block::EmbedW => (d.features, d.d_model),
            Block::EmbedB => (1, d.d_model),
            Block::Query | Block::Key | Block::Value => (d.d_model, d.d_head),
            Block::Out => (d.d_head, d.d_model),
            Block::OutB => (1, d.d_model),
            Block::HeadW1 => (input, d.hidden),
            Block::HeadB1 => (1, d.hidden),
            Block::HeadW2 => (d.hidden, 1),
            Block::HeadB2 => (1, 1),
        }
    }

    fn is_bias(self) -> bool {
        matches!(self, Block::EmbedB | Block::OutB | Block::HeadB1 | Block::HeadB2)
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    start: [usize; 11],
    total: usize,
}

impl Offsets {
    fn new(d: &ScorerDims) -> Self {
        let mut start = [0; 11];
        let mut total = 0;
        for (i, b) in Block::ALL.iter().enumerate() {
            start[i] = total;
            let (r, c) = b.shape(d);
            total += r * c;
        }
        Self { start, total }
    }

    fn range(&self, b: Block, d: &ScorerDims) -> std::ops::Range<usize> {
        let i = b as usize;
        let (r, c) = b.shape(d);
        self.start[i]..self.start[i] + r * c
    }
}

pub fn param_count(d: &ScorerDims) -> usize {
    Offsets::new(d).total
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// All weights in one flat vector, laid out block by block in `Block::ALL`
/// order, each block row-major.
#[derive(Clone, Debug)]
pub struct ScorerParams {
    dims: ScorerDims,
    offsets: Offsets,
    data: Vec<f64>,
    stamp: u64,
}

impl PartialEq for ScorerParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl ScorerParams {
    pub fn zeros(dims: ScorerDims) -> Self {
        let offsets = Offsets::new(&dims);
        Self {
            dims,
            offsets,
            data: vec![0.0; offsets.total],
            stamp: next_stamp(),
        }
    }

    pub fn from_vec(dims: ScorerDims, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dims);
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn dims(&self) -> &ScorerDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.stamp = next_stamp();
        &mut self.data
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.data[self.offsets.range(b, &self.dims)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        self.stamp = next_stamp();
        let r = self.offsets.range(b, &self.dims);
        &mut self.data[r]
    }

    pub fn block_range(&self, b: Block) -> std::ops::Range<usize> {
        self.offsets.range(b, &self.dims)
    }

    /// Block containing flat index `i`.
    pub fn block_of(&self, i: usize) -> Block {
        Block::ALL
            .into_iter()
            .rev()
            .find(|b| self.offsets.start[*b as usize] <= i)
            .unwrap_or(Block::EmbedW)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First block holding a non-finite value.
    pub fn first_non_finite_block(&self) -> Option<Block> {
        self.data.iter().position(|v| !v.is_finite()).map(|i| self.block_of(i))
    }
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_params(dims: ScorerDims, seed: u64) -> ScorerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ScorerParams::zeros(dims);
    for b in Block::ALL {
        if b.is_bias() {
            continue;
        }
        let (r, c) = b.shape(&dims);
        let limit = (6.0 / (r + c) as f64).sqrt();
        for v in p.block_mut(b) {
            *v = rng.gen_range(-limit..limit);
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ScoreDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / sum).collect();
        Self { logits, probs }
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    n: usize,
    m: usize,
    x: Vec<f64>,
    e: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    z_sum: Vec<f64>,
    /// Per-candidate head inputs `[pooled, cand]` and hidden activations.
    u: Vec<f64>,
    h: Vec<f64>,
}

/// Dense `y[r] = sum_i x[i] * w[i, r]` for a row-major `w` of shape (x.len(), out).
#[inline]
fn vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// `out += x ⊗ g` into a row-major (x.len(), g.len()) buffer.
#[inline]
fn outer_add(x: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = g.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut out[i * cols..(i + 1) * cols];
        for (o, &gv) in row.iter_mut().zip(g) {
            *o += xi * gv;
        }
    }
}

/// `out[i] += sum_r w[i, r] * g[r]`.
#[inline]
fn mat_vec(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn forward(
    params: &ScorerParams,
    scene: &SceneTensor,
    cands: &[Vec<f64>],
) -> Result<(ScoreDistribution, ForwardCache)> {
    let logits_cache = forward_logits(params, scene, cands)?;
    let dist = ScoreDistribution::from_logits(logits_cache.0);
    Ok((dist, logits_cache.1))
}

/// Logits only, without the softmax (used for Q-values).
pub fn forward_logits(
    params: &ScorerParams,
    scene: &SceneTensor,
    cands: &[Vec<f64>],
) -> Result<(Vec<f64>, ForwardCache)> {
    let d = params.dims;
    if scene.features.len() != scene.mask.len() * d.features {
        return Err(Error::ShapeMismatch(format!(
            "scene rows have width {}, scorer expects {}",
            scene.features.len().checked_div(scene.mask.len()).unwrap_or(0),
            d.features
        )));
    }
    if cands.is_empty() {
        return Err(Error::ShapeMismatch("no candidates".into()));
    }
    if let Some(c) = cands.iter().find(|c| c.len() != d.cand) {
        return Err(Error::ShapeMismatch(format!(
            "candidate vector has {} entries, scorer expects {}",
            c.len(),
            d.cand
        )));
    }
    let (dm, dh) = (d.d_model, d.d_head);

    let mut x = Vec::new();
    for (i, &m) in scene.mask.iter().enumerate() {
        if m {
            x.extend_from_slice(&scene.features[i * d.features..(i + 1) * d.features]);
        }
    }
    let n = x.len() / d.features;

    let we = params.block(Block::EmbedW);
    let be = params.block(Block::EmbedB);
    let mut e = vec![0.0; n * dm];
    for i in 0..n {
        let row = &mut e[i * dm..(i + 1) * dm];
        row.copy_from_slice(be);
        vec_mat(&x[i * d.features..(i + 1) * d.features], we, row);
        for v in row.iter_mut() {
            *v = v.tanh();
        }
    }

    let mut q = vec![0.0; n * dh];
    let mut k = vec![0.0; n * dh];
    let mut v = vec![0.0; n * dh];
    for i in 0..n {
        let ei = &e[i * dm..(i + 1) * dm];
        vec_mat(ei, params.block(Block::Query), &mut q[i * dh..(i + 1) * dh]);
        vec_mat(ei, params.block(Block::Key), &mut k[i * dh..(i + 1) * dh]);
        vec_mat(ei, params.block(Block::Value), &mut v[i * dh..(i + 1) * dh]);
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut a = vec![0.0; n * n];
    let mut z_sum = vec![0.0; dh];
    for i in 0..n {
        let qi = &q[i * dh..(i + 1) * dh];
        let row = &mut a[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let s = qi.iter().zip(&k[j * dh..(j + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() * scale;
            row[j] = s;
            max = max.max(s);
        }
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, s) in row.iter_mut().enumerate() {
            *s /= sum;
            for (zr, vr) in z_sum.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                *zr += *s * vr;
            }
        }
    }

    // mean over rows of E + Z Wo + bo
    let mut pooled = params.block(Block::OutB).to_vec();
    if n > 0 {
        let inv = 1.0 / n as f64;
        for i in 0..n {
            for (p, &ev) in pooled.iter_mut().zip(&e[i * dm..(i + 1) * dm]) {
                *p += ev * inv;
            }
        }
        let z_mean: Vec<f64> = z_sum.iter().map(|z| z * inv).collect();
        vec_mat(&z_mean, params.block(Block::Out), &mut pooled);
    }

    let m = cands.len();
    let input = dm + d.cand;
    let hid = d.hidden;
    let w1 = params.block(Block::HeadW1);
    let b1 = params.block(Block::HeadB1);
    let w2 = params.block(Block::HeadW2);
    let b2 = params.block(Block::HeadB2)[0];
    // the pooled part of the first layer is shared by every candidate
    let mut shared = b1.to_vec();
    vec_mat(&pooled, &w1[..dm * hid], &mut shared);
    let mut u = Vec::with_capacity(m * input);
    let mut h = vec![0.0; m * hid];
    let mut logits = Vec::with_capacity(m);
    for (c, cand) in cands.iter().enumerate() {
        u.extend_from_slice(&pooled);
        u.extend_from_slice(cand);
        let hc = &mut h[c * hid..(c + 1) * hid];
        hc.copy_from_slice(&shared);
        vec_mat(cand, &w1[dm * hid..], hc);
        for t in hc.iter_mut() {
            *t = t.tanh();
        }
        logits.push(b2 + hc.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>());
    }

    Ok((
        logits,
        ForwardCache {
            stamp: params.stamp,
            n,
            m,
            x,
            e,
            q,
            k,
            v,
            a,
            z_sum,
            u,
            h,
        },
    ))
}

/// Gradient accumulator shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub data: Vec<f64>,
    pub count: usize,
}

impl GradientBuffer {
    pub fn zeros(dims: &ScorerDims) -> Self {
        Self {
            data: vec![0.0; param_count(dims)],
            count: 0,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            *g *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBuffer, s: f64) {
        for (g, o) in self.data.iter_mut().zip(&other.data) {
            *g += s * o;
        }
        self.count += other.count;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Accumulates `d(sum_c dlogits[c] * logit_c)/dθ` into `grad`.
pub fn backward(
    params: &ScorerParams,
    cache: &ForwardCache,
    dlogits: &[f64],
    grad: &mut GradientBuffer,
) -> Result<()> {
    if cache.stamp != params.stamp {
        return Err(Error::StaleCache);
    }
    if dlogits.len() != cache.m || grad.data.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} upstream gradients for {} candidates",
            dlogits.len(),
            cache.m
        )));
    }
    grad.count += 1;
    if dlogits.iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    let d = params.dims;
    let (dm, dh, hid) = (d.d_model, d.d_head, d.hidden);
    let input = dm + d.cand;
    let n = cache.n;
    let off = |b: Block| params.block_range(b);
    let g = &mut grad.data;

    let w1 = params.block(Block::HeadW1);
    let w2 = params.block(Block::HeadW2);
    let mut d_pooled = vec![0.0; dm];
    let mut dpre = vec![0.0; hid];
    for (c, &gl) in dlogits.iter().enumerate() {
        if gl == 0.0 {
            continue;
        }
        let hc = &cache.h[c * hid..(c + 1) * hid];
        let uc = &cache.u[c * input..(c + 1) * input];
        g[off(Block::HeadB2).start] += gl;
        let r = off(Block::HeadW2);
        for (j, &hv) in hc.iter().enumerate() {
            g[r.start + j] += gl * hv;
            dpre[j] = gl * w2[j] * (1.0 - hv * hv);
        }
        let r = off(Block::HeadB1);
        for (gb, &dp) in g[r].iter_mut().zip(&dpre) {
            *gb += dp;
        }
        outer_add(uc, &dpre, &mut g[off(Block::HeadW1)]);
        mat_vec(&w1[..dm * hid], &dpre, &mut d_pooled);
    }

    for (gb, &dp) in g[off(Block::OutB)].iter_mut().zip(&d_pooled) {
        *gb += dp;
    }
    if n == 0 {
        return Ok(());
    }
    let inv = 1.0 / n as f64;
    let dh_row: Vec<f64> = d_pooled.iter().map(|v| v * inv).collect();
    let z_mean: Vec<f64> = cache.z_sum.iter().map(|z| z * inv).collect();
    outer_add(&z_mean, &d_pooled, &mut g[off(Block::Out)]);
    // every row receives the same dZ = Wo dH
    let mut dz = vec![0.0; dh];
    mat_vec(params.block(Block::Out), &dh_row, &mut dz);

    // dA_ij = dz . V_j (independent of i); dS = A ⊙ (dA - rowsum(A ⊙ dA))
    let dav: Vec<f64> = (0..n)
        .map(|j| dz.iter().zip(&cache.v[j * dh..(j + 1) * dh]).map(|(a, b)| a * b).sum())
        .collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * dh];
    let mut dk = vec![0.0; n * dh];
    let mut dv = vec![0.0; n * dh];
    let mut col_a = vec![0.0; n];
    for i in 0..n {
        let ai = &cache.a[i * n..(i + 1) * n];
        let dot: f64 = ai.iter().zip(&dav).map(|(a, b)| a * b).sum();
        let qi = &cache.q[i * dh..(i + 1) * dh];
        for j in 0..n {
            col_a[j] += ai[j];
            let ds = ai[j] * (dav[j] - dot) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = &cache.k[j * dh..(j + 1) * dh];
            for t in 0..dh {
                dq[i * dh + t] += ds * kj[t];
                dk[j * dh + t] += ds * qi[t];
            }
        }
    }
    for j in 0..n {
        for t in 0..dh {
            dv[j * dh + t] = col_a[j] * dz[t];
        }
    }

    let mut de = vec![0.0; n * dm];
    for i in 0..n {
        let ei = &cache.e[i * dm..(i + 1) * dm];
        let dei = &mut de[i * dm..(i + 1) * dm];
        dei.copy_from_slice(&dh_row);
        for (b, dmat) in [(Block::Query, &dq), (Block::Key, &dk), (Block::Value, &dv)] {
            let gi = &dmat[i * dh..(i + 1) * dh];
            outer_add(ei, gi, &mut g[off(b)]);
            mat_vec(params.block(b), gi, dei);
        }
        for (dv, &ev) in dei.iter_mut().zip(ei) {
            *dv *= 1.0 - ev * ev;
        }
        let xi = &cache.x[i * d.features..(i + 1) * d.features];
        outer_add(xi, dei, &mut g[off(Block::EmbedW)]);
        for (gb, &dp) in g[off(Block::EmbedB)].iter_mut().zip(dei.iter()) {
            *gb += dp;
        }
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"VLPS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 4 + 8;

pub fn params_to_bytes(params: &ScorerParams) -> Vec<u8> {
    let d = params.dims;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d.features, d.cand, d.d_model, d.d_head, d.hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8], expected: &ScorerDims) -> Result<ScorerParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptFile(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::CorruptFile(format!("unsupported version {version}")));
    }
    let dims = ScorerDims {
        features: u32_at(8) as usize,
        cand: u32_at(12) as usize,
        d_model: u32_at(16) as usize,
        d_head: u32_at(20) as usize,
        hidden: u32_at(24) as usize,
    };
    let count = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
    if count != param_count(&dims) {
        return Err(Error::CorruptFile(format!("header declares {count} values for {dims}")));
    }
    if bytes.len() != HEADER_LEN + 8 * count {
        return Err(Error::CorruptFile(format!(
            "expected {} bytes, found {}",
            HEADER_LEN + 8 * count,
            bytes.len()
        )));
    }
    if dims != *expected {
        return Err(Error::DimMismatch {
            file: dims.to_string(),
            expected: expected.to_string(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScorerParams::from_vec(dims, data)
}

pub fn save_params(params: &ScorerParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&params_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path, expected: &ScorerDims) -> Result<ScorerParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes, expected)
}

//! Two-headed recurrent decoder written from scratch.
//!
//! Two stacked LSTM layers read the per-cycle input `δs(t) ‖ s_flag(t)`.
//! The last hidden state of the second layer, passed through a rectifier,
//! feeds two heads: the upper head sees only that state, the lower head also
//! gets the final increment `δf`. Each head is one rectified-linear layer of
//! width `N` followed by a sigmoid output.
//!
//! Batches hold sequences of equal length and are stored time-major: row
//! `t·B + b` is sequence `b` at cycle `t`. Gate blocks inside the `4N`-wide
//! LSTM matrices are ordered input, forget, output, modulation.

use crate::data::{PackedSequence, SyndromeSequence};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::sim::sample_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_MODULATION: usize = 3;

/// Probabilities are clipped to `[P_CLIP, 1 − P_CLIP]` before the logarithm.
pub const P_CLIP: f64 = 1e-7;

/// Sequences per work unit when a batch is split for parallel gradients.
/// Fixed so that results do not depend on the thread count.
pub const CHUNK: usize = 16;

// ---------------------------------------------------------------------------
// dense kernels

/// `c ← beta·c + op(a)·op(b)` for row-major buffers, `op(a)` being `m×k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_row_bias(rows: &mut [f64], bias: &[f64]) {
    for row in rows.chunks_exact_mut(bias.len()) {
        for (r, b) in row.iter_mut().zip(bias) {
            *r += b;
        }
    }
}

fn add_column_sums(rows: &[f64], out: &mut [f64]) {
    for row in rows.chunks_exact(out.len()) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r;
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub n_in: usize,
    pub n_hidden: usize,
    /// Input weights, `n_in × 4N`.
    pub w: Vec<f64>,
    /// Recurrent weights, `N × 4N`.
    pub v: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(n_in: usize, n_hidden: usize) -> Self {
        let g = 4 * n_hidden;
        Self { n_in, n_hidden, w: vec![0.0; n_in * g], v: vec![0.0; n_hidden * g], b: vec![0.0; g] }
    }

    /// Entry `(j, k)` of gate `g`'s input weights `w_g`, which is `N × n_in`.
    pub fn w_gate(&self, g: usize, j: usize, k: usize) -> f64 {
        self.w[k * 4 * self.n_hidden + g * self.n_hidden + j]
    }

    /// Entry `(j, k)` of gate `g`'s recurrent weights `v_g`.
    pub fn v_gate(&self, g: usize, j: usize, k: usize) -> f64 {
        self.v[k * 4 * self.n_hidden + g * self.n_hidden + j]
    }

    pub fn b_gate(&self, g: usize, j: usize) -> f64 {
        self.b[g * self.n_hidden + j]
    }
}

/// Rectified-linear hidden layer plus a scalar sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub n_in: usize,
    pub n_hidden: usize,
    /// `n_in × n_hidden`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(n_in: usize, n_hidden: usize) -> Self {
        Self { n_in, n_hidden, w1: vec![0.0; n_in * n_hidden], b1: vec![0.0; n_hidden], w2: vec![0.0; n_hidden], b2: vec![0.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    /// Per-cycle input width, `2·n_checks`.
    pub n_in: usize,
    /// LSTM and head width `N`.
    pub n_hidden: usize,
    /// Width of the final increment, `n_tiles`.
    pub n_final: usize,
}

impl DecoderShape {
    /// Shape for a code with `n_tiles` tiles.
    pub fn for_tiles(n_tiles: usize, n_hidden: usize) -> Self {
        Self { n_in: 4 * n_tiles, n_hidden, n_final: n_tiles }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub layer1: LstmLayerParams,
    pub layer2: LstmLayerParams,
    pub upper: HeadParams,
    pub lower: HeadParams,
}

/// Names of the parameter groups in [`DecoderParams::groups`] order.
pub const GROUP_NAMES: [&str; 14] = [
    "layer1.w", "layer1.v", "layer1.b", "layer2.w", "layer2.v", "layer2.b", "upper.w1", "upper.b1", "upper.w2",
    "upper.b2", "lower.w1", "lower.b1", "lower.w2", "lower.b2",
];

impl DecoderParams {
    pub fn zeros(shape: DecoderShape) -> Self {
        let n = shape.n_hidden;
        Self {
            layer1: LstmLayerParams::zeros(shape.n_in, n),
            layer2: LstmLayerParams::zeros(n, n),
            upper: HeadParams::zeros(n, n),
            lower: HeadParams::zeros(n + shape.n_final, n),
        }
    }

    /// Weights uniform in `±1/√N`, zero biases except forget gates at 1.
    pub fn init<R: Rng + ?Sized>(shape: DecoderShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let a = 1.0 / (shape.n_hidden as f64).sqrt();
        for (name, group) in GROUP_NAMES.iter().zip(p.groups_mut()) {
            if !name.contains(".b") {
                for x in group.iter_mut() {
                    *x = rng.random_range(-a..=a);
                }
            }
        }
        for layer in [&mut p.layer1, &mut p.layer2] {
            let n = layer.n_hidden;
            layer.b[GATE_FORGET * n..(GATE_FORGET + 1) * n].fill(1.0);
        }
        p
    }

    pub fn shape(&self) -> DecoderShape {
        DecoderShape {
            n_in: self.layer1.n_in,
            n_hidden: self.layer1.n_hidden,
            n_final: self.lower.n_in - self.layer1.n_hidden,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn groups(&self) -> [&[f64]; 14] {
        [
            &self.layer1.w,
            &self.layer1.v,
            &self.layer1.b,
            &self.layer2.w,
            &self.layer2.v,
            &self.layer2.b,
            &self.upper.w1,
            &self.upper.b1,
            &self.upper.w2,
            &self.upper.b2,
            &self.lower.w1,
            &self.lower.b1,
            &self.lower.w2,
            &self.lower.b2,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 14] {
        [
            &mut self.layer1.w,
            &mut self.layer1.v,
            &mut self.layer1.b,
            &mut self.layer2.w,
            &mut self.layer2.v,
            &mut self.layer2.b,
            &mut self.upper.w1,
            &mut self.upper.b1,
            &mut self.upper.w2,
            &mut self.upper.b2,
            &mut self.lower.w1,
            &mut self.lower.b1,
            &mut self.lower.w2,
            &mut self.lower.b2,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.groups().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), self.n_params())));
        }
        let mut off = 0;
        for g in self.groups_mut() {
            g.copy_from_slice(&flat[off..off + g.len()]);
            off += g.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// `‖w_EVAL‖²` over the head weights (biases excluded).
    pub fn eval_weight_norm_sq(&self) -> f64 {
        [&self.upper.w1, &self.upper.w2, &self.lower.w1, &self.lower.w2].iter().flat_map(|g| g.iter()).map(|x| x * x).sum()
    }

    fn add_assign(&mut self, other: &DecoderParams) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            axpy(1.0, b, a);
        }
    }
}

// ---------------------------------------------------------------------------
// inputs

/// A sequence the network can read.
pub trait DecoderInput {
    fn n_cycles(&self) -> usize;
    /// Writes the 0/1 input of cycle `t` (0-based) into `out`.
    fn write_cycle(&self, t: usize, out: &mut [f64]);
    fn write_final(&self, out: &mut [f64]);
    fn parity(&self) -> bool;
}

fn write_bits(bits: &crate::gf2::BitVec, out: &mut [f64]) {
    out.fill(0.0);
    for i in bits.ones() {
        out[i] = 1.0;
    }
}

impl DecoderInput for SyndromeSequence {
    fn n_cycles(&self) -> usize {
        self.delta_s.len()
    }

    fn write_cycle(&self, t: usize, out: &mut [f64]) {
        let k = self.delta_s[t].len();
        write_bits(&self.delta_s[t], &mut out[..k]);
        write_bits(&self.s_flag[t], &mut out[k..]);
    }

    fn write_final(&self, out: &mut [f64]) {
        write_bits(&self.delta_f, out);
    }

    fn parity(&self) -> bool {
        self.p_true
    }
}

impl DecoderInput for PackedSequence {
    fn n_cycles(&self) -> usize {
        PackedSequence::n_cycles(self)
    }

    fn write_cycle(&self, t: usize, out: &mut [f64]) {
        out.fill(0.0);
        for i in self.cycle_ones(t) {
            out[i] = 1.0;
        }
    }

    fn write_final(&self, out: &mut [f64]) {
        write_bits(&self.delta_f, out);
    }

    fn parity(&self) -> bool {
        self.p_true
    }
}

/// Dense inputs of `size` sequences of `t` cycles each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub t: usize,
    pub size: usize,
    /// `t·size × n_in`, time-major.
    pub x: Vec<f64>,
    /// `size × n_final`.
    pub delta_f: Vec<f64>,
    pub p_true: Vec<f64>,
}

impl Batch {
    pub fn from_inputs<S: DecoderInput + ?Sized>(shape: DecoderShape, seqs: &[&S]) -> Result<Self> {
        let size = seqs.len();
        let t = seqs.first().map_or(0, |s| s.n_cycles());
        if t == 0 {
            return Err(Error::Dimension("empty batch or zero-length sequence".into()));
        }
        if seqs.iter().any(|s| s.n_cycles() != t) {
            return Err(Error::Dimension("batch sequences differ in length".into()));
        }
        let mut x = vec![0.0; t * size * shape.n_in];
        for (b, s) in seqs.iter().enumerate() {
            for c in 0..t {
                let row = (c * size + b) * shape.n_in;
                s.write_cycle(c, &mut x[row..row + shape.n_in]);
            }
        }
        let mut delta_f = vec![0.0; size * shape.n_final];
        for (b, s) in seqs.iter().enumerate() {
            s.write_final(&mut delta_f[b * shape.n_final..(b + 1) * shape.n_final]);
        }
        let p_true = seqs.iter().map(|s| if s.parity() { 1.0 } else { 0.0 }).collect();
        Ok(Self { t, size, x, delta_f, p_true })
    }
}

// ---------------------------------------------------------------------------
// LSTM layer

struct LstmCache {
    t: usize,
    b: usize,
    n: usize,
    x: Vec<f64>,
    /// Activated gates, `t·b × 4N`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn lstm_forward_batch(p: &LstmLayerParams, x: Vec<f64>, t: usize, b: usize) -> LstmCache {
    let n = p.n_hidden;
    let g = 4 * n;
    let rows = t * b;
    let mut gates = vec![0.0; rows * g];
    gemm(rows, p.n_in, g, &x, false, &p.w, false, 0.0, &mut gates);
    add_row_bias(&mut gates, &p.b);
    let mut c = vec![0.0; rows * n];
    let mut tanh_c = vec![0.0; rows * n];
    let mut h = vec![0.0; rows * n];
    for s in 0..t {
        let z = &mut gates[s * b * g..(s + 1) * b * g];
        if s > 0 {
            gemm(b, n, g, &h[(s - 1) * b * n..s * b * n], false, &p.v, false, 1.0, z);
        }
        for r in 0..b {
            let zr = &mut z[r * g..(r + 1) * g];
            for j in 0..n {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[n + j]);
                let o = sigmoid(zr[2 * n + j]);
                let m = zr[3 * n + j].tanh();
                zr[j] = i;
                zr[n + j] = f;
                zr[2 * n + j] = o;
                zr[3 * n + j] = m;
                let k = (s * b + r) * n + j;
                let c_prev = if s > 0 { c[k - b * n] } else { 0.0 };
                let cv = f * c_prev + i * m;
                let tc = cv.tanh();
                c[k] = cv;
                tanh_c[k] = tc;
                h[k] = o * tc;
            }
        }
    }
    LstmCache { t, b, n, x, gates, c, tanh_c, h }
}

/// Accumulates parameter gradients into `grad` given `dh` (gradient of the
/// loss with respect to every output `h_t`). Returns the input gradient when
/// `want_dx`.
fn lstm_backward_batch(
    p: &LstmLayerParams,
    cache: &LstmCache,
    dh: &[f64],
    grad: &mut LstmLayerParams,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let LstmCache { t, b, n, .. } = *cache;
    let g = 4 * n;
    let rows = t * b;
    let mut dz = vec![0.0; rows * g];
    let mut dh_rec = vec![0.0; b * n];
    let mut dc_rec = vec![0.0; b * n];
    for s in (0..t).rev() {
        let zs = &mut dz[s * b * g..(s + 1) * b * g];
        for r in 0..b {
            let gr = &cache.gates[(s * b + r) * g..(s * b + r + 1) * g];
            let zr = &mut zs[r * g..(r + 1) * g];
            for j in 0..n {
                let k = (s * b + r) * n + j;
                let (i, f, o, m) = (gr[j], gr[n + j], gr[2 * n + j], gr[3 * n + j]);
                let tc = cache.tanh_c[k];
                let dhv = dh[k] + dh_rec[r * n + j];
                let dc = dc_rec[r * n + j] + dhv * o * (1.0 - tc * tc);
                let c_prev = if s > 0 { cache.c[k - b * n] } else { 0.0 };
                zr[j] = dc * m * i * (1.0 - i);
                zr[n + j] = dc * c_prev * f * (1.0 - f);
                zr[2 * n + j] = dhv * tc * o * (1.0 - o);
                zr[3 * n + j] = dc * i * (1.0 - m * m);
                dc_rec[r * n + j] = dc * f;
            }
        }
        if s > 0 {
            gemm(b, g, n, zs, false, &p.v, true, 0.0, &mut dh_rec);
        }
    }
    gemm(p.n_in, rows, g, &cache.x, true, &dz, false, 1.0, &mut grad.w);
    if t > 1 {
        gemm(n, (t - 1) * b, g, &cache.h[..(t - 1) * b * n], true, &dz[b * g..], false, 1.0, &mut grad.v);
    }
    add_column_sums(&dz, &mut grad.b);
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * p.n_in];
        gemm(rows, g, p.n_in, &dz, false, &p.w, true, 0.0, &mut dx);
        dx
    })
}

/// Runs one layer over a single sequence from zero initial state and
/// returns every `h_t`.
pub fn lstm_forward(layer: &LstmLayerParams, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut x = Vec::with_capacity(inputs.len() * layer.n_in);
    for v in inputs {
        if v.len() != layer.n_in {
            return Err(Error::Dimension(format!("input width {} for layer of width {}", v.len(), layer.n_in)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("LSTM input".into()));
        }
        x.extend_from_slice(v);
    }
    let cache = lstm_forward_batch(layer, x, inputs.len(), 1);
    Ok(cache.h.chunks_exact(layer.n_hidden).map(<[f64]>::to_vec).collect())
}

// ---------------------------------------------------------------------------
// heads

struct HeadCache {
    b: usize,
    u: Vec<f64>,
    /// Pre-activation of the hidden layer.
    a: Vec<f64>,
    /// Hidden output after rectification and dropout.
    hid: Vec<f64>,
    mask: Option<Vec<f64>>,
    logit: Vec<f64>,
}

fn head_forward(p: &HeadParams, u: Vec<f64>, b: usize, mask: Option<Vec<f64>>) -> HeadCache {
    let h = p.n_hidden;
    let mut a = vec![0.0; b * h];
    gemm(b, p.n_in, h, &u, false, &p.w1, false, 0.0, &mut a);
    add_row_bias(&mut a, &p.b1);
    let mut hid: Vec<f64> = a.iter().map(|&x| x.max(0.0)).collect();
    if let Some(m) = &mask {
        for (x, m) in hid.iter_mut().zip(m) {
            *x *= m;
        }
    }
    let logit = hid.chunks_exact(h).map(|row| row.iter().zip(&p.w2).map(|(x, w)| x * w).sum::<f64>() + p.b2[0]).collect();
    HeadCache { b, u, a, hid, mask, logit }
}

fn head_backward(p: &HeadParams, cache: &HeadCache, dlogit: &[f64], grad: &mut HeadParams) -> Vec<f64> {
    let h = p.n_hidden;
    let mut da = vec![0.0; cache.b * h];
    for r in 0..cache.b {
        let dl = dlogit[r];
        grad.b2[0] += dl;
        axpy(dl, &cache.hid[r * h..(r + 1) * h], &mut grad.w2);
        for j in 0..h {
            let k = r * h + j;
            if cache.a[k] > 0.0 {
                let m = cache.mask.as_ref().map_or(1.0, |m| m[k]);
                da[k] = dl * p.w2[j] * m;
            }
        }
    }
    gemm(p.n_in, cache.b, h, &cache.u, true, &da, false, 1.0, &mut grad.w1);
    add_column_sums(&da, &mut grad.b1);
    let mut du = vec![0.0; cache.b * p.n_in];
    gemm(cache.b, h, p.n_in, &da, false, &p.w1, true, 0.0, &mut du);
    du
}

// ---------------------------------------------------------------------------
// decoder

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight-regularization prefactor `c`.
    pub c_reg: f64,
    pub keep_prob: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { c_reg: 1e-5, keep_prob: 0.8 }
    }
}

/// Forward mode: `Train` draws inverted-dropout masks from the given RNG.
pub enum Mode<'a> {
    Train { keep_prob: f64, rng: &'a mut dyn rand::RngCore },
    Eval,
}

fn dropout_mask(len: usize, mode: &mut Mode) -> Option<Vec<f64>> {
    match mode {
        Mode::Eval => None,
        Mode::Train { keep_prob, rng } => {
            let scale = 1.0 / *keep_prob;
            Some((0..len).map(|_| if rng.random::<f64>() < *keep_prob { scale } else { 0.0 }).collect())
        }
    }
}

struct Forward {
    c1: LstmCache,
    mask1: Option<Vec<f64>>,
    c2: LstmCache,
    /// Mask on the last output of the second layer.
    mask2: Option<Vec<f64>>,
    up: HeadCache,
    lo: HeadCache,
}

fn clip(p: f64) -> f64 {
    p.clamp(P_CLIP, 1.0 - P_CLIP)
}

/// Cross-entropy `H(p1, p2)`, with `p2` clipped.
pub fn cross_entropy(p1: f64, p2: f64) -> f64 {
    let p2 = clip(p2);
    -p1 * p2.ln() - (1.0 - p1) * (1.0 - p2).ln()
}

/// `H(p_true, p_lower) + ½·H(p_true, p_upper) + c·‖w_EVAL‖²` for one sequence.
pub fn loss(p_upper: f64, p_lower: f64, p_true: bool, params: &DecoderParams, c_reg: f64) -> f64 {
    let y = if p_true { 1.0 } else { 0.0 };
    cross_entropy(y, p_lower) + 0.5 * cross_entropy(y, p_upper) + c_reg * params.eval_weight_norm_sq()
}

fn decoder_forward_batch(params: &DecoderParams, batch: &Batch, mode: &mut Mode) -> Forward {
    let n = params.layer1.n_hidden;
    let (t, b) = (batch.t, batch.size);
    let c1 = lstm_forward_batch(&params.layer1, batch.x.clone(), t, b);
    let mask1 = dropout_mask(t * b * n, mode);
    let mut x2 = c1.h.clone();
    if let Some(m) = &mask1 {
        x2.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    let c2 = lstm_forward_batch(&params.layer2, x2, t, b);
    let mask2 = dropout_mask(b * n, mode);
    let last = &c2.h[(t - 1) * b * n..];
    let mut r: Vec<f64> = last.iter().map(|&x| x.max(0.0)).collect();
    if let Some(m) = &mask2 {
        r.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    let nf = params.lower.n_in - n;
    let mut u_lo = Vec::with_capacity(b * (n + nf));
    for i in 0..b {
        u_lo.extend_from_slice(&r[i * n..(i + 1) * n]);
        u_lo.extend_from_slice(&batch.delta_f[i * nf..(i + 1) * nf]);
    }
    let mask_up = dropout_mask(b * params.upper.n_hidden, mode);
    let mask_lo = dropout_mask(b * params.lower.n_hidden, mode);
    let up = head_forward(&params.upper, r, b, mask_up);
    let lo = head_forward(&params.lower, u_lo, b, mask_lo);
    Forward { c1, mask1, c2, mask2, up, lo }
}

/// Upper and lower probabilities for every sequence of a batch.
pub fn decoder_forward(params: &DecoderParams, batch: &Batch, mut mode: Mode) -> (Vec<f64>, Vec<f64>) {
    let fwd = decoder_forward_batch(params, batch, &mut mode);
    (fwd.up.logit.iter().map(|&z| clip(sigmoid(z))).collect(), fwd.lo.logit.iter().map(|&z| clip(sigmoid(z))).collect())
}

/// Gradient of `H(y, clip(σ(z)))` with respect to `z`.
fn dlogit(z: f64, y: f64) -> f64 {
    let p = sigmoid(z);
    if !(P_CLIP..=1.0 - P_CLIP).contains(&p) {
        0.0
    } else {
        p - y
    }
}

struct DataGradient {
    loss_sum: f64,
    grad: DecoderParams,
    p_upper: Vec<f64>,
    p_lower: Vec<f64>,
}

/// Summed data loss of `batch` and the gradient of `scale` times that sum.
/// The regularizer is not included.
fn data_gradient(params: &DecoderParams, batch: &Batch, mode: &mut Mode, scale: f64) -> DataGradient {
    let fwd = decoder_forward_batch(params, batch, mode);
    let n = params.layer1.n_hidden;
    let (t, b) = (batch.t, batch.size);
    let mut loss = 0.0;
    let mut d_up = vec![0.0; b];
    let mut d_lo = vec![0.0; b];
    for i in 0..b {
        let y = batch.p_true[i];
        let (zu, zl) = (fwd.up.logit[i], fwd.lo.logit[i]);
        loss += cross_entropy(y, sigmoid(zl)) + 0.5 * cross_entropy(y, sigmoid(zu));
        d_lo[i] = scale * dlogit(zl, y);
        d_up[i] = 0.5 * scale * dlogit(zu, y);
    }
    let mut grad = params.zeros_like();
    let du = head_backward(&params.upper, &fwd.up, &d_up, &mut grad.upper);
    let du_lo = head_backward(&params.lower, &fwd.lo, &d_lo, &mut grad.lower);
    let nl = params.lower.n_in;
    let mut dh2 = vec![0.0; t * b * n];
    let last = (t - 1) * b * n;
    for i in 0..b {
        for j in 0..n {
            let k = i * n + j;
            if fwd.c2.h[last + k] > 0.0 {
                let m = fwd.mask2.as_ref().map_or(1.0, |m| m[k]);
                dh2[last + k] = (du[k] + du_lo[i * nl + j]) * m;
            }
        }
    }
    let mut dh1 = lstm_backward_batch(&params.layer2, &fwd.c2, &dh2, &mut grad.layer2, true).expect("dx requested");
    if let Some(m) = &fwd.mask1 {
        dh1.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    lstm_backward_batch(&params.layer1, &fwd.c1, &dh1, &mut grad.layer1, false);
    DataGradient {
        loss_sum: loss,
        grad,
        p_upper: fwd.up.logit.iter().map(|&z| clip(sigmoid(z))).collect(),
        p_lower: fwd.lo.logit.iter().map(|&z| clip(sigmoid(z))).collect(),
    }
}

fn add_regularizer_gradient(params: &DecoderParams, c_reg: f64, grad: &mut DecoderParams) {
    axpy(2.0 * c_reg, &params.upper.w1, &mut grad.upper.w1);
    axpy(2.0 * c_reg, &params.upper.w2, &mut grad.upper.w2);
    axpy(2.0 * c_reg, &params.lower.w1, &mut grad.lower.w1);
    axpy(2.0 * c_reg, &params.lower.w2, &mut grad.lower.w2);
}

/// Output of one training forward/backward pass.
#[derive(Clone, Debug)]
pub struct TrainBatchOutput {
    pub p_upper: Vec<f64>,
    pub p_lower: Vec<f64>,
    /// Mean batch loss including the regularizer.
    pub loss: f64,
    pub grad: DecoderParams,
}

/// Mean loss and exact gradient of a batch in train mode, dropout masks
/// drawn from `rng`.
pub fn backward(params: &DecoderParams, batch: &Batch, cfg: &LossConfig, rng: &mut dyn rand::RngCore) -> TrainBatchOutput {
    let mut mode = Mode::Train { keep_prob: cfg.keep_prob, rng };
    let scale = 1.0 / batch.size as f64;
    let DataGradient { loss_sum, mut grad, p_upper, p_lower } = data_gradient(params, batch, &mut mode, scale);
    add_regularizer_gradient(params, cfg.c_reg, &mut grad);
    let loss = loss_sum * scale + cfg.c_reg * params.eval_weight_norm_sq();
    TrainBatchOutput { p_upper, p_lower, loss, grad }
}

/// Mean loss and gradient of sequences split into chunks of [`CHUNK`], each
/// with its own dropout stream `(seed, stream_base + chunk)`. Chunks are
/// reduced in order, so serial and parallel runs agree bit for bit.
pub fn batch_gradient<S: DecoderInput + Sync>(
    params: &DecoderParams,
    seqs: &[&S],
    cfg: &LossConfig,
    seed: u64,
    stream_base: u64,
    exec: Execution,
) -> Result<(f64, DecoderParams)> {
    let shape = params.shape();
    let total = seqs.len();
    let scale = 1.0 / total as f64;
    let chunks: Vec<&[&S]> = seqs.chunks(CHUNK).collect();
    let parts = exec.map_range(chunks.len(), |ci| -> Result<(f64, DecoderParams)> {
        let batch = Batch::from_inputs(shape, chunks[ci])?;
        let mut rng = sample_rng(seed, stream_base + ci as u64);
        let mut mode = Mode::Train { keep_prob: cfg.keep_prob, rng: &mut rng };
        let dg = data_gradient(params, &batch, &mut mode, scale);
        Ok((dg.loss_sum, dg.grad))
    });
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.add_assign(&g);
    }
    add_regularizer_gradient(params, cfg.c_reg, &mut grad);
    let loss = loss * scale + cfg.c_reg * params.eval_weight_norm_sq();
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((loss, grad))
}

/// Lower-head probabilities after each requested cycle, in eval mode.
///
/// `finals[b]` lists `(cycle, δf)` pairs for sequence `b` with 1-based
/// cycles; all sequences share the length `batch.t`.
pub fn predict_readouts(params: &DecoderParams, batch: &Batch, finals: &[Vec<(usize, Vec<f64>)>]) -> Vec<Vec<f64>> {
    let n = params.layer1.n_hidden;
    let (t, b) = (batch.t, batch.size);
    let c1 = lstm_forward_batch(&params.layer1, batch.x.clone(), t, b);
    let c2 = lstm_forward_batch(&params.layer2, c1.h, t, b);
    let nf = params.lower.n_in - n;
    let mut u = Vec::new();
    let mut owner = Vec::new();
    for (i, list) in finals.iter().enumerate() {
        for (cycle, df) in list {
            assert!(*cycle >= 1 && *cycle <= t && df.len() == nf);
            let row = ((cycle - 1) * b + i) * n;
            u.extend(c2.h[row..row + n].iter().map(|&x| x.max(0.0)));
            u.extend_from_slice(df);
            owner.push(i);
        }
    }
    let head = head_forward(&params.lower, u, owner.len(), None);
    let mut out: Vec<Vec<f64>> = finals.iter().map(|l| Vec::with_capacity(l.len())).collect();
    for (i, z) in owner.into_iter().zip(head.logit) {
        out[i].push(clip(sigmoid(z)));
    }
    out
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One bias-corrected Adam update over a flat parameter list.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut f64>,
        grads: impl IntoIterator<Item = &'a f64> + Clone,
    ) -> Result<()> {
        if grads.clone().into_iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut count = 0;
        for (((x, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *x -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            count += 1;
        }
        if count != self.m.len() {
            return Err(Error::Dimension(format!("{count} parameters for optimizer of {}", self.m.len())));
        }
        Ok(())
    }

    pub fn step_params(&mut self, params: &mut DecoderParams, grad: &DecoderParams) -> Result<()> {
        let grads: Vec<&[f64]> = grad.groups().to_vec();
        let gi = grads.iter().flat_map(|g| g.iter());
        let mut groups = params.groups_mut();
        let pi = groups.iter_mut().flat_map(|g| g.iter_mut());
        self.update(pi, gi)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const CKPT_MAGIC: &[u8; 8] = b"CCNNCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Free-form bookkeeping stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub distance: usize,
    pub epoch: u64,
    /// Optimizer steps taken; the batch and dropout streams are derived
    /// from it, so it is the RNG counter.
    pub step: u64,
    pub seed: u64,
    pub validation_eps: Option<f64>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DecoderParams,
    pub adam: AdamState,
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let shape = serde_json::to_vec(&(self.params.shape(), &self.meta)).expect("metadata serializes");
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        buf.extend_from_slice(&shape);
        let flat = self.params.to_flat();
        buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        put_f64s(&mut buf, &flat);
        put_f64s(&mut buf, &[self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps]);
        buf.extend_from_slice(&self.adam.step.to_le_bytes());
        put_f64s(&mut buf, &self.adam.m);
        put_f64s(&mut buf, &self.adam.v);
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        if &bytes[..8] != CKPT_MAGIC {
            return Err(Error::BadMagic("checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Checksum { record: 0 });
        }
        let mut r = &body[8..];
        let version = read_u16(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = read_u32(&mut r)? as usize;
        let (shape, meta): (DecoderShape, CheckpointMeta) = serde_json::from_slice(take(&mut r, len)?)?;
        let mut params = DecoderParams::zeros(shape);
        let n = read_u64(&mut r)? as usize;
        if n != params.n_params() {
            return Err(Error::Format(format!("checkpoint holds {n} parameters, shape needs {}", params.n_params())));
        }
        params.set_flat(&read_f64s(&mut r, n)?)?;
        let h = read_f64s(&mut r, 4)?;
        let step = read_u64(&mut r)?;
        let m = read_f64s(&mut r, n)?;
        let v = read_f64s(&mut r, n)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        let adam = AdamState { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step, m, v };
        Ok(Self { meta, params, adam })
    }

    /// Writes beside `path` and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Truncated("checkpoint body".into()));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    Ok(u16::from_le_bytes(take(r, 2)?.try_into().expect("2 bytes")))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    Ok(take(r, 8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf2::BitVec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: DecoderShape = DecoderShape { n_in: 6, n_hidden: 8, n_final: 3 };

    fn random_sequences(shape: DecoderShape, t: usize, count: usize, seed: u64) -> Vec<SyndromeSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = shape.n_in / 2;
        let bits = |n: usize, rng: &mut ChaCha8Rng| BitVec::from_bools(&(0..n).map(|_| rng.random_bool(0.3)).collect::<Vec<_>>());
        (0..count)
            .map(|_| SyndromeSequence {
                delta_s: (0..t).map(|_| bits(half, &mut rng)).collect(),
                s_flag: (0..t).map(|_| bits(half, &mut rng)).collect(),
                delta_f: bits(shape.n_final, &mut rng),
                p_true: rng.random_bool(0.5),
                readouts: vec![],
            })
            .collect()
    }

    fn batch(seqs: &[SyndromeSequence], shape: DecoderShape) -> Batch {
        Batch::from_inputs(shape, &seqs.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_states_and_even_odds() {
        let p = DecoderParams::zeros(SHAPE);
        let xs: Vec<Vec<f64>> = (0..4).map(|t| vec![t as f64; 6]).collect();
        for h in lstm_forward(&p.layer1, &xs).unwrap() {
            assert!(h.iter().all(|&x| x == 0.0));
        }
        let seqs = random_sequences(SHAPE, 3, 5, 1);
        let (up, lo) = decoder_forward(&p, &batch(&seqs, SHAPE), Mode::Eval);
        assert!(up.iter().chain(&lo).all(|&p| p == 0.5));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_states() {
        let mut p = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(2));
        p.layer1.b.fill(0.0);
        let xs = vec![vec![0.0; 6]; 5];
        for h in lstm_forward(&p.layer1, &xs).unwrap() {
            assert!(h.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = LstmLayerParams::zeros(3, 2);
        for x in layer.w.iter_mut().chain(&mut layer.v).chain(&mut layer.b) {
            *x = rng.random_range(-1.0..1.0);
        }
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let got = lstm_forward(&layer, &xs).unwrap();

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (mut h, mut c) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, x) in xs.iter().enumerate() {
            let pre = |g: usize, j: usize| {
                let mut z = layer.b_gate(g, j);
                for k in 0..3 {
                    z += layer.w_gate(g, j, k) * x[k];
                }
                for k in 0..2 {
                    z += layer.v_gate(g, j, k) * h[k];
                }
                z
            };
            let mut nh = [0.0; 2];
            for j in 0..2 {
                let i = sig(pre(GATE_INPUT, j));
                let f = sig(pre(GATE_FORGET, j));
                let o = sig(pre(GATE_OUTPUT, j));
                let m = pre(GATE_MODULATION, j).tanh();
                c[j] = f * c[j] + i * m;
                nh[j] = o * c[j].tanh();
            }
            h = nh;
            for j in 0..2 {
                assert!((got[t][j] - h[j]).abs() < 1e-12, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn lstm_rejects_bad_input() {
        let layer = LstmLayerParams::zeros(3, 2);
        assert!(matches!(lstm_forward(&layer, &[vec![0.0; 4]]), Err(Error::Dimension(_))));
        assert!(matches!(lstm_forward(&layer, &[vec![f64::NAN, 0.0, 0.0]]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_closed_forms() {
        let p = DecoderParams::zeros(SHAPE);
        assert!((loss(0.5, 0.5, false, &p, 0.0) - 1.5 * 2f64.ln()).abs() < 1e-15);
        let l = loss(0.5, 1.0, true, &p, 0.0);
        assert!((l - 0.5 * 2f64.ln() - 1e-7).abs() < 1e-13);
        // 5·5 + 5 + 13·5 + 5 = 100 evaluation weights, all equal to 1.
        let mut q = DecoderParams::zeros(DecoderShape { n_in: 2, n_hidden: 5, n_final: 8 });
        for w in [&mut q.upper.w1, &mut q.upper.w2, &mut q.lower.w1, &mut q.lower.w2] {
            w.fill(1.0);
        }
        q.upper.b1.fill(3.0);
        assert_eq!(q.eval_weight_norm_sq(), 100.0);
        let added = loss(0.5, 0.5, false, &q, 1e-5) - loss(0.5, 0.5, false, &q, 0.0);
        assert!((added - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_deterministic_and_upper_head_ignores_delta_f() {
        let p = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(4));
        let mut seqs = random_sequences(SHAPE, 4, 6, 5);
        let (u1, l1) = decoder_forward(&p, &batch(&seqs, SHAPE), Mode::Eval);
        let (u2, l2) = decoder_forward(&p, &batch(&seqs, SHAPE), Mode::Eval);
        assert_eq!((&u1, &l1), (&u2, &l2));
        for s in &mut seqs {
            s.delta_f = BitVec::from_indices(3, [0, 2]).xor(&s.delta_f);
        }
        let (u3, l3) = decoder_forward(&p, &batch(&seqs, SHAPE), Mode::Eval);
        assert_eq!(u1, u3);
        assert_ne!(l1, l3);
        assert!(u1.iter().chain(&l1).all(|p| (P_CLIP..=1.0 - P_CLIP).contains(p)));
    }

    fn train_loss(p: &DecoderParams, b: &Batch, cfg: &LossConfig) -> f64 {
        backward(p, b, cfg, &mut ChaCha8Rng::seed_from_u64(77)).loss
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut p = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(6));
        // Nonzero biases so their gradients are not special.
        for x in p.layer1.b.iter_mut().chain(&mut p.layer2.b).chain(&mut p.upper.b1).chain(&mut p.lower.b1) {
            *x += 0.1;
        }
        let seqs = random_sequences(SHAPE, 5, 4, 7);
        let b = batch(&seqs, SHAPE);
        let cfg = LossConfig { c_reg: 1e-3, keep_prob: 0.8 };
        let grad = backward(&p, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).grad;
        let h = 1e-5;
        let mut probe = p.clone();
        for (gi, name) in GROUP_NAMES.iter().enumerate() {
            let analytic = grad.groups()[gi].to_vec();
            let mut numeric = vec![0.0; analytic.len()];
            for k in 0..analytic.len() {
                let x0 = p.groups()[gi][k];
                probe.groups_mut()[gi][k] = x0 + h;
                let lp = train_loss(&probe, &b, &cfg);
                probe.groups_mut()[gi][k] = x0 - h;
                let lm = train_loss(&probe, &b, &cfg);
                probe.groups_mut()[gi][k] = x0;
                numeric[k] = (lp - lm) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-4, "{name}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn regularizer_gradient_is_two_c_w() {
        let p = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(8));
        let b = batch(&random_sequences(SHAPE, 2, 3, 9), SHAPE);
        let c = 1e-2;
        let with = backward(&p, &b, &LossConfig { c_reg: c, keep_prob: 1.0 }, &mut ChaCha8Rng::seed_from_u64(0)).grad;
        let without = backward(&p, &b, &LossConfig { c_reg: 0.0, keep_prob: 1.0 }, &mut ChaCha8Rng::seed_from_u64(0)).grad;
        for (gi, name) in GROUP_NAMES.iter().enumerate() {
            let is_eval_weight = name.starts_with("upper.w") || name.starts_with("lower.w");
            for k in 0..p.groups()[gi].len() {
                let d = with.groups()[gi][k] - without.groups()[gi][k];
                let expect = if is_eval_weight { 2.0 * c * p.groups()[gi][k] } else { 0.0 };
                assert!((d - expect).abs() < 1e-15, "{name}[{k}]");
            }
        }
    }

    #[test]
    fn chunked_gradient_matches_whole_batch_without_dropout() {
        let p = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(10));
        let seqs = random_sequences(SHAPE, 3, 40, 11);
        let refs: Vec<_> = seqs.iter().collect();
        let cfg = LossConfig { c_reg: 1e-5, keep_prob: 1.0 };
        let whole = backward(&p, &batch(&seqs, SHAPE), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let (loss, grad) = batch_gradient(&p, &refs, &cfg, 1, 0, Execution::Serial).unwrap();
        assert!((loss - whole.loss).abs() < 1e-12);
        for (a, b) in grad.to_flat().iter().zip(whole.grad.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        let cfg = LossConfig::default();
        let serial = batch_gradient(&p, &refs, &cfg, 1, 0, Execution::Serial).unwrap();
        let parallel = batch_gradient(&p, &refs, &cfg, 1, 0, Execution::Parallel).unwrap();
        assert_eq!(serial.0.to_bits(), parallel.0.to_bits());
        assert_eq!(serial.1, parallel.1);
    }

    #[test]
    fn readout_predictions_match_forward_at_final_cycle() {
        let p = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(12));
        let seqs = random_sequences(SHAPE, 4, 5, 13);
        let b = batch(&seqs, SHAPE);
        let (_, lo) = decoder_forward(&p, &b, Mode::Eval);
        let finals: Vec<Vec<(usize, Vec<f64>)>> = seqs
            .iter()
            .map(|s| {
                let mut df = vec![0.0; 3];
                s.write_final(&mut df);
                vec![(4, df)]
            })
            .collect();
        let got = predict_readouts(&p, &b, &finals);
        for (g, l) in got.iter().zip(&lo) {
            assert_eq!(g[0].to_bits(), l.to_bits());
        }
    }

    #[test]
    fn packed_records_give_identical_batches() {
        let seqs = random_sequences(SHAPE, 5, 7, 15);
        let packed: Vec<PackedSequence> = seqs.iter().map(PackedSequence::from).collect();
        let a = batch(&seqs, SHAPE);
        let b = Batch::from_inputs(SHAPE, &packed.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!((a.x, a.delta_f, a.p_true), (b.x, b.delta_f, b.p_true));
    }

    #[test]
    fn adam_three_step_trajectory() {
        let mut adam = AdamState::new(1, 1e-3);
        let mut x = [1.0f64];
        let expected = [0.999000000004999999975, 0.9980000262138343668071814, 0.9970000960651409343369069];
        for e in expected {
            let g = [2.0 * x[0]];
            adam.update(x.iter_mut(), g.iter()).unwrap();
            assert!((x[0] - e).abs() < 1e-12, "{} vs {e}", x[0]);
        }
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn adam_zero_gradient_and_non_finite() {
        let mut adam = AdamState::new(2, 1e-3);
        let mut x = [0.5, -0.25];
        adam.update(x.iter_mut(), [0.0, 0.0].iter()).unwrap();
        assert_eq!(x, [0.5, -0.25]);
        assert_eq!(adam.step, 1);
        assert!(adam.update(x.iter_mut(), [f64::INFINITY, 0.0].iter()).is_err());
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let params = DecoderParams::init(SHAPE, &mut ChaCha8Rng::seed_from_u64(14));
        let mut adam = AdamState::new(params.n_params(), 1e-3);
        adam.m.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 1e-3);
        adam.step = 7;
        let ck = Checkpoint {
            meta: CheckpointMeta { distance: 3, epoch: 2, step: 7, seed: 5, validation_eps: Some(1e-4), config: serde_json::json!({"n": 8}) },
            params,
            adam,
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic(_))));
    }
}

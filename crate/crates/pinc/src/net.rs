//! The skip-connected MLP and its differentiation engine.
//!
//! The network maps R³ to `out_dim` values (7 in the constrained mode: the
//! scalar field plus two vector potentials; 4 in the eikonal-splitting
//! baseline). Hidden layers use softplus; the raw input is concatenated onto
//! the activations entering the skip layer, whose producing layer is narrowed
//! so the post-concatenation width stays constant.
//!
//! Evaluation runs in chunks of samples. Each neuron carries `C` channels:
//!
//! - `C = 1`: plain values (grid evaluation),
//! - `C = 4`: value + three spatial tangents (first derivatives),
//! - `C = 16`: jets of jets (second derivatives, for curl penalties on the
//!   hard-constrained field).
//!
//! A recorded chunk keeps every layer's input and pre-activation block so the
//! exact parameter gradient of any scalar built from the outputs — including
//! their spatial-derivative channels — comes from one structured reverse
//! sweep. Chunk traces are dropped after each optimizer step.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Jet3, Tape, Var};
use crate::rng::{stream_rng, StreamId};
use crate::{Error, Result};

/// Samples processed together by the layer kernels. Fixed so batch results
/// are independent of thread count.
pub(crate) const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    /// 1-based index of the hidden layer whose input gets the raw coordinates
    /// concatenated.
    pub skip_layer: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub softplus_beta: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            depth: 8,
            width: 512,
            skip_layer: 4,
            in_dim: 3,
            out_dim: 7,
            softplus_beta: 100.0,
        }
    }
}

impl MlpConfig {
    /// Workstation-sized network used by the fast test protocol.
    pub fn desk() -> Self {
        MlpConfig {
            depth: 4,
            width: 128,
            skip_layer: 2,
            ..Self::default()
        }
    }

    pub fn with_out_dim(mut self, out_dim: usize) -> Self {
        self.out_dim = out_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim != 3 {
            return Err(Error::Config("input dimension must be 3".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config("depth must be at least 2".into()));
        }
        if self.skip_layer < 1 || self.skip_layer >= self.depth {
            return Err(Error::Config(format!(
                "skip layer {} out of range 1..{}",
                self.skip_layer, self.depth
            )));
        }
        if self.width <= self.in_dim {
            return Err(Error::Config(
                "width must exceed the input dimension".into(),
            ));
        }
        if self.out_dim == 0 {
            return Err(Error::Config("output dimension must be positive".into()));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(Error::Config("softplus beta must be positive".into()));
        }
        Ok(())
    }

    /// (in, out) features of every linear layer, hidden layers first, output
    /// head last. The layer producing the activations that enter the skip
    /// layer is narrowed by `in_dim` to make room for the concatenation.
    pub fn linear_shapes(&self) -> Vec<(usize, usize)> {
        let (w, d, s) = (self.width, self.depth, self.skip_layer);
        (0..=d)
            .map(|k| {
                let inf = if k == d {
                    w
                } else if k + 1 == s {
                    if s == 1 {
                        2 * self.in_dim
                    } else {
                        w
                    }
                } else if k == 0 {
                    self.in_dim
                } else {
                    w
                };
                let outf = if k == d {
                    self.out_dim
                } else if s >= 2 && k == s - 2 {
                    w - self.in_dim
                } else {
                    w
                };
                (inf, outf)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.linear_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// All weights and biases, flat. Per layer the weight matrix is stored
/// row-major (`[out][in]`) followed by the bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub cfg: MlpConfig,
    pub flat: Vec<f64>,
    shapes: Vec<(usize, usize)>,
    offsets: Vec<(usize, usize)>,
}

impl Params {
    pub fn zeros(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.linear_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push((off, off + i * o));
            off += i * o + o;
        }
        Ok(Params {
            cfg,
            flat: vec![0.0; off],
            shapes,
            offsets,
        })
    }

    pub fn from_flat(cfg: MlpConfig, flat: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if flat.len() != p.flat.len() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture needs {}",
                flat.len(),
                p.flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "parameter vector contains non-finite entries".into(),
            ));
        }
        p.flat = flat;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (w, b) = self.offsets[layer];
        &self.flat[w..b]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (_, b) = self.offsets[layer];
        let o = self.shapes[layer].1;
        &self.flat[b..b + o]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (w, b) = self.offsets[layer];
        &mut self.flat[w..b]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b) = self.offsets[layer];
        let o = self.shapes[layer].1;
        &mut self.flat[b..b + o]
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }
}

/// Initialization whose fresh scalar head approximates the signed distance to
/// an origin-centered sphere: hidden weights are normal with std
/// sqrt(2/fan_out) (fan-out scaling is what yields the radial profile — with
/// fan-in the wide first layer overshoots and the zero crossing lands far
/// from the requested radius), the scalar output row is the constant
/// sqrt(pi/fan_in) with bias -radius, and the auxiliary rows start near zero
/// (std 1e-4).
pub fn init_geometric(cfg: MlpConfig, seed: u64, radius: f64) -> Result<Params> {
    if !(radius > 0.0) {
        return Err(Error::Config(
            "geometric init radius must be positive".into(),
        ));
    }
    let mut p = Params::zeros(cfg)?;
    let mut rng = stream_rng(seed, StreamId::Init, 0);
    let depth = cfg.depth;
    for k in 0..=depth {
        let (inf, outf) = p.shapes[k];
        if k < depth {
            let std = (2.0 / outf as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            for w in p.weights_mut(k) {
                *w = dist.sample(&mut rng);
            }
        } else {
            let head = (std::f64::consts::PI / inf as f64).sqrt();
            let dist = Normal::new(0.0, 1e-4).expect("valid std");
            for j in 0..outf {
                for i in 0..inf {
                    let idx = j * inf + i;
                    p.weights_mut(k)[idx] = if j == 0 { head } else { dist.sample(&mut rng) };
                }
            }
            p.biases_mut(k)[0] = -radius;
        }
    }
    Ok(p)
}

/// Fan-in-scaled uniform initialization, entries in ±sqrt(6/fan_in).
pub fn init_kaiming(cfg: MlpConfig, seed: u64) -> Result<Params> {
    let mut p = Params::zeros(cfg)?;
    let mut rng = stream_rng(seed, StreamId::Init, 1);
    for k in 0..p.shapes.len() {
        let (inf, _) = p.shapes[k];
        let bound = (6.0 / inf as f64).sqrt();
        for w in p.weights_mut(k) {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Chunked layer kernels
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_val(a: f64, beta: f64) -> f64 {
    let t = beta * a;
    if t > 30.0 {
        a + (-t).exp() / beta
    } else if t < -30.0 {
        t.exp() / beta
    } else {
        (1.0 + t.exp()).ln() / beta
    }
}

/// y = W x + b over a block of `m` samples with `C` channels per scalar.
/// Blocks are neuron-major, channel-minor: entry (j, mm, c) at (j*m+mm)*C+c.
fn linear_forward<const C: usize>(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    y: &mut [f64],
    inf: usize,
    outf: usize,
    m: usize,
) {
    let mc = m * C;
    for j in 0..outf {
        let yr = &mut y[j * mc..(j + 1) * mc];
        yr.fill(0.0);
        let wr = &w[j * inf..(j + 1) * inf];
        for (k, &wjk) in wr.iter().enumerate() {
            let xr = &x[k * mc..(k + 1) * mc];
            for (yv, &xv) in yr.iter_mut().zip(xr) {
                *yv += wjk * xv;
            }
        }
        for mm in 0..m {
            yr[mm * C] += b[j];
        }
    }
}

/// Adjoint of `linear_forward`: accumulates weight/bias gradients and the
/// input adjoint.
fn linear_backward<const C: usize>(
    w: &[f64],
    x: &[f64],
    ybar: &[f64],
    xbar: &mut [f64],
    wgrad: &mut [f64],
    bgrad: &mut [f64],
    inf: usize,
    outf: usize,
    m: usize,
) {
    let mc = m * C;
    xbar.fill(0.0);
    for j in 0..outf {
        let yb = &ybar[j * mc..(j + 1) * mc];
        for mm in 0..m {
            bgrad[j] += yb[mm * C];
        }
        let wr = &w[j * inf..(j + 1) * inf];
        let wg = &mut wgrad[j * inf..(j + 1) * inf];
        for k in 0..inf {
            let xr = &x[k * mc..(k + 1) * mc];
            let xb = &mut xbar[k * mc..(k + 1) * mc];
            let wjk = wr[k];
            let mut acc = 0.0;
            for ((&yv, &xv), xbv) in yb.iter().zip(xr).zip(xb.iter_mut()) {
                acc += yv * xv;
                *xbv += wjk * yv;
            }
            wg[k] += acc;
        }
    }
}

fn softplus_forward<const C: usize>(pre: &[f64], post: &mut [f64], beta: f64) {
    debug_assert_eq!(pre.len(), post.len());
    for (p, q) in pre.chunks_exact(C).zip(post.chunks_exact_mut(C)) {
        match C {
            1 => q[0] = softplus_val(p[0], beta),
            4 => {
                let s = sigmoid(beta * p[0]);
                q[0] = softplus_val(p[0], beta);
                q[1] = s * p[1];
                q[2] = s * p[2];
                q[3] = s * p[3];
            }
            16 => {
                // Outer jet over inner jets: p = (a; U1, U2, U3), each an
                // inner 4-jet. s is the inner jet of sigmoid(beta a).
                let s0 = sigmoid(beta * p[0]);
                let sp0 = beta * s0 * (1.0 - s0);
                q[0] = softplus_val(p[0], beta);
                for i in 1..4 {
                    q[i] = s0 * p[i];
                }
                for o in 1..4 {
                    let u = &p[4 * o..4 * o + 4];
                    let qo = 4 * o;
                    q[qo] = s0 * u[0];
                    q[qo + 1] = s0 * u[1] + sp0 * p[1] * u[0];
                    q[qo + 2] = s0 * u[2] + sp0 * p[2] * u[0];
                    q[qo + 3] = s0 * u[3] + sp0 * p[3] * u[0];
                }
            }
            _ => unreachable!("unsupported channel count"),
        }
    }
}

fn softplus_backward<const C: usize>(pre: &[f64], ybar: &[f64], xbar: &mut [f64], beta: f64) {
    for ((p, yb), xb) in pre
        .chunks_exact(C)
        .zip(ybar.chunks_exact(C))
        .zip(xbar.chunks_exact_mut(C))
    {
        match C {
            1 => xb[0] = yb[0] * sigmoid(beta * p[0]),
            4 => {
                let s = sigmoid(beta * p[0]);
                let sp = beta * s * (1.0 - s);
                xb[0] = yb[0] * s + sp * (yb[1] * p[1] + yb[2] * p[2] + yb[3] * p[3]);
                xb[1] = yb[1] * s;
                xb[2] = yb[2] * s;
                xb[3] = yb[3] * s;
            }
            16 => {
                let s0 = sigmoid(beta * p[0]);
                let sp0 = beta * s0 * (1.0 - s0);
                let spp0 = beta * beta * s0 * (1.0 - s0) * (1.0 - 2.0 * s0);
                let mut a0 = yb[0] * s0;
                for i in 1..4 {
                    a0 += yb[i] * sp0 * p[i];
                    xb[i] = yb[i] * s0;
                }
                for o in 1..4 {
                    let u = &p[4 * o..4 * o + 4];
                    let ybo = &yb[4 * o..4 * o + 4];
                    a0 += ybo[0] * sp0 * u[0];
                    xb[4 * o] = ybo[0] * s0;
                    for i in 1..4 {
                        a0 += ybo[i] * (sp0 * u[i] + spp0 * p[i] * u[0]);
                        xb[4 * o + i] = ybo[i] * s0;
                        xb[4 * o] += ybo[i] * sp0 * p[i];
                        xb[i] += ybo[i] * sp0 * u[0];
                    }
                }
                xb[0] = a0;
            }
            _ => unreachable!("unsupported channel count"),
        }
    }
}

/// Seeded input block for a chunk of points.
fn seed_block<const C: usize>(xs: &[[f64; 3]]) -> Vec<f64> {
    let m = xs.len();
    let mut x0 = vec![0.0; 3 * m * C];
    for (mm, x) in xs.iter().enumerate() {
        for k in 0..3 {
            let base = (k * m + mm) * C;
            x0[base] = x[k];
            match C {
                1 => {}
                4 => x0[base + 1 + k] = 1.0,
                16 => {
                    // first derivatives live in both the inner tangents of
                    // the value jet and the values of the outer tangents
                    x0[base + 1 + k] = 1.0;
                    x0[base + 4 * (k + 1)] = 1.0;
                }
                _ => unreachable!("unsupported channel count"),
            }
        }
    }
    x0
}

/// Stored forward pass of one chunk: layer inputs and pre-activations.
pub(crate) struct ChunkTrace<const C: usize> {
    m: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

pub(crate) fn forward_chunk<const C: usize>(
    params: &Params,
    xs: &[[f64; 3]],
    keep_trace: bool,
) -> (Vec<f64>, Option<ChunkTrace<C>>) {
    let cfg = &params.cfg;
    let m = xs.len();
    let mc = m * C;
    let shapes = &params.shapes;
    let x0 = seed_block::<C>(xs);
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
    let mut pres: Vec<Vec<f64>> = Vec::with_capacity(cfg.depth);
    let mut cur = x0.clone();
    if cfg.skip_layer == 1 {
        let mut cat = cur.clone();
        cat.extend_from_slice(&x0);
        cur = cat;
    }
    let mut out = Vec::new();
    for k in 0..shapes.len() {
        let (inf, outf) = shapes[k];
        debug_assert_eq!(cur.len(), inf * mc);
        let mut y = vec![0.0; outf * mc];
        linear_forward::<C>(
            params.weights(k),
            params.biases(k),
            &cur,
            &mut y,
            inf,
            outf,
            m,
        );
        inputs.push(std::mem::take(&mut cur));
        if k == shapes.len() - 1 {
            out = y;
            break;
        }
        let mut act = vec![0.0; outf * mc];
        softplus_forward::<C>(&y, &mut act, cfg.softplus_beta);
        pres.push(y);
        // a_{k+1} feeds linear k+1; when that is the layer entering the skip
        // layer, append the raw input rows
        if k + 2 == cfg.skip_layer {
            act.extend_from_slice(&x0);
        }
        cur = act;
    }
    let trace = keep_trace.then_some(ChunkTrace {
        m,
        inputs,
        pre: pres,
    });
    (out, trace)
}

/// Reverse sweep of a recorded chunk. `out_bar` is the adjoint of the output
/// block; parameter gradients accumulate into `grad` (same layout as
/// `Params::flat`).
pub(crate) fn backward_chunk<const C: usize>(
    params: &Params,
    trace: &ChunkTrace<C>,
    out_bar: &[f64],
    grad: &mut [f64],
) {
    let cfg = &params.cfg;
    let m = trace.m;
    let mc = m * C;
    let shapes = &params.shapes;
    let n_lin = shapes.len();
    let mut ybar = out_bar.to_vec();
    for k in (0..n_lin).rev() {
        let (inf, outf) = shapes[k];
        let (woff, _) = params.offsets[k];
        let mut xbar = vec![0.0; inf * mc];
        {
            let (wg, rest) = grad[woff..].split_at_mut(inf * outf);
            let bg = &mut rest[..outf];
            linear_backward::<C>(
                params.weights(k),
                &trace.inputs[k],
                &ybar,
                &mut xbar,
                wg,
                bg,
                inf,
                outf,
                m,
            );
        }
        if k == 0 {
            break;
        }
        // drop the raw-input rows of a concatenated block
        if k + 1 == cfg.skip_layer && cfg.skip_layer >= 2 {
            xbar.truncate((inf - cfg.in_dim) * mc);
        }
        let prev_out = shapes[k - 1].1;
        debug_assert_eq!(xbar.len(), prev_out * mc);
        let mut pbar = vec![0.0; prev_out * mc];
        softplus_backward::<C>(&trace.pre[k - 1], &xbar, &mut pbar, cfg.softplus_beta);
        ybar = pbar;
    }
}

// ---------------------------------------------------------------------------
// Per-point evaluation
// ---------------------------------------------------------------------------

/// Network outputs at one point together with their exact input Jacobian.
#[derive(Clone, Debug)]
pub struct JetOutput {
    pub jets: Vec<Jet3<f64>>,
}

impl JetOutput {
    pub fn outputs(&self) -> Vec<f64> {
        self.jets.iter().map(|j| j.v).collect()
    }

    pub fn jacobian(&self) -> Vec<[f64; 3]> {
        self.jets.iter().map(|j| j.tangent()).collect()
    }

    pub fn u(&self) -> &Jet3<f64> {
        &self.jets[0]
    }

    pub fn psi(&self) -> [Jet3<f64>; 3] {
        std::array::from_fn(|i| self.jets[1 + i].clone())
    }

    pub fn psi_tilde(&self) -> [Jet3<f64>; 3] {
        std::array::from_fn(|i| self.jets[4 + i].clone())
    }
}

fn unpack_jets(out_block: &[f64], out_dim: usize, m: usize, mm: usize) -> Vec<Jet3<f64>> {
    (0..out_dim)
        .map(|j| {
            let base = (j * m + mm) * 4;
            Jet3 {
                v: out_block[base],
                d: [
                    out_block[base + 1],
                    out_block[base + 2],
                    out_block[base + 3],
                ],
            }
        })
        .collect()
}

/// Forward pass with first derivatives at one point.
pub fn forward(params: &Params, x: [f64; 3]) -> Result<JetOutput> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("forward: non-finite input point".into()));
    }
    let (out, _) = forward_chunk::<4>(params, &[x], false);
    Ok(JetOutput {
        jets: unpack_jets(&out, params.cfg.out_dim, 1, 0),
    })
}

/// Outputs and their exact input Jacobian, `jac[i][j] = d out_i / d x_j`.
pub fn eval_with_input_jacobian(
    params: &Params,
    x: [f64; 3],
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let out = forward(params, x)?;
    Ok((out.outputs(), out.jacobian()))
}

/// Jet outputs for a batch of points.
pub fn forward_batch(params: &Params, xs: &[[f64; 3]]) -> Vec<JetOutput> {
    use rayon::prelude::*;
    xs.par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            let (out, _) = forward_chunk::<4>(params, chunk, false);
            let m = chunk.len();
            let out_dim = params.cfg.out_dim;
            (0..m)
                .map(|mm| JetOutput {
                    jets: unpack_jets(&out, out_dim, m, mm),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Scalar-head values only, batched (value channel alone).
pub fn eval_values(params: &Params, xs: &[[f64; 3]]) -> Vec<f64> {
    use rayon::prelude::*;
    xs.par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            let (out, _) = forward_chunk::<1>(params, chunk, false);
            out[..chunk.len()].to_vec()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Recorded chunks: the bridge from layer blocks to the scalar tape
// ---------------------------------------------------------------------------

/// One forward chunk kept for a parameter-gradient sweep.
pub(crate) struct RecordedChunk<const C: usize> {
    pub out_block: Vec<f64>,
    pub trace: ChunkTrace<C>,
    pub m: usize,
    pub out_dim: usize,
}

pub(crate) fn forward_recorded<const C: usize>(
    params: &Params,
    xs: &[[f64; 3]],
) -> RecordedChunk<C> {
    let (out_block, trace) = forward_chunk::<C>(params, xs, true);
    RecordedChunk {
        out_block,
        trace: trace.expect("trace requested"),
        m: xs.len(),
        out_dim: params.cfg.out_dim,
    }
}

/// Tape leaves for one sample's output channels, in block order. Heads build
/// jet values from these; after the backward sweep their adjoints flow back
/// into the chunk's output-adjoint block.
pub(crate) struct BridgedSample {
    pub leaves: Vec<Var>,
}

impl<const C: usize> RecordedChunk<C> {
    pub fn bridge(&self, tape: &Tape, mm: usize) -> BridgedSample {
        let mut leaves = Vec::with_capacity(self.out_dim * C);
        for j in 0..self.out_dim {
            let base = (j * self.m + mm) * C;
            for c in 0..C {
                leaves.push(tape.leaf(self.out_block[base + c]));
            }
        }
        BridgedSample { leaves }
    }

    /// Fold per-sample leaf adjoints back into an output-block adjoint.
    pub fn collect_out_bar(
        &self,
        adj: &crate::diff::Adjoints,
        bridged: &[BridgedSample],
    ) -> Vec<f64> {
        let mut out_bar = vec![0.0; self.out_block.len()];
        for (mm, b) in bridged.iter().enumerate() {
            let mut it = b.leaves.iter();
            for j in 0..self.out_dim {
                let base = (j * self.m + mm) * C;
                for c in 0..C {
                    out_bar[base + c] = adj.of(it.next().expect("leaf count"));
                }
            }
        }
        out_bar
    }
}

impl BridgedSample {
    /// Value-only view (C = 1): one `Var` per network output.
    pub fn values(&self, out_dim: usize) -> Vec<Var> {
        assert_eq!(self.leaves.len(), out_dim);
        self.leaves.clone()
    }

    /// First-order view: one `Jet3<Var>` per network output (C = 4).
    pub fn jets(&self, out_dim: usize) -> Vec<Jet3<Var>> {
        assert_eq!(self.leaves.len(), out_dim * 4);
        (0..out_dim)
            .map(|j| Jet3 {
                v: self.leaves[j * 4].clone(),
                d: [
                    self.leaves[j * 4 + 1].clone(),
                    self.leaves[j * 4 + 2].clone(),
                    self.leaves[j * 4 + 3].clone(),
                ],
            })
            .collect()
    }

    /// Second-order view: one `Jet3<Jet3<Var>>` per output (C = 16).
    pub fn jets_nested(&self, out_dim: usize) -> Vec<Jet3<Jet3<Var>>> {
        assert_eq!(self.leaves.len(), out_dim * 16);
        let inner = |base: usize| Jet3 {
            v: self.leaves[base].clone(),
            d: [
                self.leaves[base + 1].clone(),
                self.leaves[base + 2].clone(),
                self.leaves[base + 3].clone(),
            ],
        };
        (0..out_dim)
            .map(|j| Jet3 {
                v: inner(j * 16),
                d: [inner(j * 16 + 4), inner(j * 16 + 8), inner(j * 16 + 12)],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamId};
    use rand::Rng;

    fn small_cfg() -> MlpConfig {
        MlpConfig {
            depth: 2,
            width: 8,
            skip_layer: 1,
            in_dim: 3,
            out_dim: 7,
            softplus_beta: 100.0,
        }
    }

    fn random_params(cfg: MlpConfig, seed: u64) -> Params {
        let mut p = Params::zeros(cfg).unwrap();
        let mut rng = stream_rng(seed, StreamId::Audit, 0);
        for v in p.flat.iter_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
        p
    }

    #[test]
    fn shapes_match_published_architecture() {
        let cfg = MlpConfig::default();
        let shapes = cfg.linear_shapes();
        assert_eq!(shapes.len(), 9);
        assert_eq!(shapes[0], (3, 512));
        assert_eq!(shapes[2], (512, 509));
        assert_eq!(shapes[3], (512, 512));
        assert_eq!(shapes[8], (512, 7));
    }

    #[test]
    fn param_count_matches_independent_arithmetic() {
        let by_hand = (3 * 512 + 512)
            + (512 * 512 + 512)
            + (512 * 509 + 509)
            + 5 * (512 * 512 + 512)
            + (512 * 7 + 7);
        assert_eq!(MlpConfig::default().param_count(), by_hand);
        let desk = MlpConfig::desk();
        let by_hand_desk =
            (3 * 125 + 125) + (128 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 7 + 7);
        assert_eq!(desk.param_count(), by_hand_desk);
    }

    #[test]
    fn zero_width_config_is_rejected() {
        let cfg = MlpConfig {
            width: 0,
            ..MlpConfig::desk()
        };
        assert!(init_kaiming(cfg, 1).is_err());
    }

    #[test]
    fn kaiming_entries_respect_fan_in_bound() {
        let cfg = MlpConfig::desk();
        let p = init_kaiming(cfg, 9).unwrap();
        for (k, &(inf, _)) in p.shapes().iter().enumerate() {
            let bound = (6.0 / inf as f64).sqrt();
            for &w in p.weights(k) {
                assert!(w.abs() <= bound);
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = MlpConfig::desk();
        let a = init_geometric(cfg, 5, 0.5).unwrap();
        let b = init_geometric(cfg, 5, 0.5).unwrap();
        assert_eq!(a.flat, b.flat);
        let c = init_geometric(cfg, 6, 0.5).unwrap();
        assert_ne!(a.flat, c.flat);
        let k1 = init_kaiming(cfg, 5).unwrap();
        let k2 = init_kaiming(cfg, 5).unwrap();
        assert_eq!(k1.flat, k2.flat);
    }

    #[test]
    fn geometric_init_approximates_a_sphere() {
        let cfg = MlpConfig::desk();
        let radius = 0.5;
        let p = init_geometric(cfg, 3, radius).unwrap();
        let u0 = forward(&p, [0.0, 0.0, 0.0]).unwrap().u().v;
        let u9 = forward(&p, [0.9, 0.0, 0.0]).unwrap().u().v;
        assert!(
            u0 * u9 < 0.0,
            "fresh head must change sign across the sphere: u(0)={u0}, u(0.9,0,0)={u9}"
        );
        // zero crossing within radius ± 0.25 along each axis
        for axis in 0..3 {
            for dir in [-1.0, 1.0] {
                let mut crossing = None;
                let mut prev = u0;
                for step in 1..=100 {
                    let r = step as f64 * 0.01;
                    let mut x = [0.0; 3];
                    x[axis] = dir * r;
                    let u = forward(&p, x).unwrap().u().v;
                    if u * prev < 0.0 {
                        crossing = Some(r);
                        break;
                    }
                    prev = u;
                }
                let r = crossing.expect("no zero crossing found along axis");
                assert!(
                    (r - radius).abs() <= 0.25,
                    "crossing at {r}, expected near {radius}"
                );
            }
        }
    }

    #[test]
    fn softplus_value_definition() {
        // ln(2)/beta at zero; near-identity for positive inputs at beta=100
        let beta = 100.0;
        assert!((softplus_val(0.0, beta) - (2.0_f64).ln() / beta).abs() < 1e-15);
        assert!(softplus_val(1.0, beta) - 1.0 < 1e-8);
        assert!(softplus_val(1.0, beta) >= 1.0);
    }

    #[test]
    fn skip_connection_routes_the_raw_input() {
        // depth 4, skip at layer 2: the block entering linear 1 is
        // [a_1 (width-3 rows), x (3 rows)]. All weights are zero except a
        // path reading the input rows, then identity rows; the scalar output
        // must equal the softplus chain applied to x_0.
        let cfg = MlpConfig {
            depth: 4,
            width: 8,
            skip_layer: 2,
            in_dim: 3,
            out_dim: 7,
            softplus_beta: 2.0,
        };
        let mut p = Params::zeros(cfg).unwrap();
        for j in 0..3 {
            let inf = p.shapes()[1].0;
            p.weights_mut(1)[j * inf + 5 + j] = 1.0;
        }
        for k in [2usize, 3] {
            let inf = p.shapes()[k].0;
            for j in 0..3 {
                p.weights_mut(k)[j * inf + j] = 1.0;
            }
        }
        p.weights_mut(4)[0] = 1.0;
        let x = [0.37, -0.8, 0.21];
        let out = forward(&p, x).unwrap();
        let sp = |a: f64| softplus_val(a, 2.0);
        let expect = sp(sp(sp(x[0])));
        assert!(
            (out.u().v - expect).abs() < 1e-14,
            "{} vs {}",
            out.u().v,
            expect
        );
        let out2 = forward(&p, [0.5, -0.8, 0.21]).unwrap();
        assert!((out2.u().v - sp(sp(sp(0.5)))).abs() < 1e-14);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let p = random_params(MlpConfig::desk(), 11);
        let x = [0.3, -0.2, 0.7];
        let a = forward(&p, x).unwrap();
        let b = forward(&p, x).unwrap();
        for (ja, jb) in a.jets.iter().zip(&b.jets) {
            assert_eq!(ja.v.to_bits(), jb.v.to_bits());
            for i in 0..3 {
                assert_eq!(ja.d[i].to_bits(), jb.d[i].to_bits());
            }
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let p = random_params(small_cfg(), 21);
        let mut rng = stream_rng(77, StreamId::Audit, 1);
        let h = 1e-4;
        for _ in 0..20 {
            let x: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let (_, jac) = eval_with_input_jacobian(&p, x).unwrap();
            let mut max_ad: f64 = 0.0;
            let mut max_err: f64 = 0.0;
            for j in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let op = forward(&p, xp).unwrap().outputs();
                let om = forward(&p, xm).unwrap().outputs();
                for i in 0..7 {
                    let fd = (op[i] - om[i]) / (2.0 * h);
                    max_ad = max_ad.max(fd.abs());
                    max_err = max_err.max((jac[i][j] - fd).abs());
                }
            }
            assert!(
                max_err <= 1e-5 * max_ad.max(1.0),
                "jacobian error {max_err} vs scale {max_ad}"
            );
        }
    }

    #[test]
    fn chunked_and_single_evaluation_agree_bitwise() {
        let p = random_params(MlpConfig::desk(), 31);
        let mut rng = stream_rng(19, StreamId::Audit, 2);
        let xs: Vec<[f64; 3]> = (0..13)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let batch = forward_batch(&p, &xs);
        for (x, jo) in xs.iter().zip(&batch) {
            let single = forward(&p, *x).unwrap();
            for (a, b) in single.jets.iter().zip(&jo.jets) {
                assert_eq!(a.v.to_bits(), b.v.to_bits());
            }
        }
        let vals = eval_values(&p, &xs);
        for (v, jo) in vals.iter().zip(&batch) {
            assert_eq!(v.to_bits(), jo.u().v.to_bits());
        }
    }

    #[test]
    fn nested_channels_agree_with_first_order_and_fd_hessian() {
        let p = random_params(small_cfg(), 41);
        let x = [0.25, -0.55, 0.4];
        let (out16, _) = forward_chunk::<16>(&p, &[x], false);
        let (out4, _) = forward_chunk::<4>(&p, &[x], false);
        for j in 0..7 {
            assert!((out16[j * 16] - out4[j * 4]).abs() < 1e-14);
            for i in 0..3 {
                let inner = out16[j * 16 + 1 + i];
                let outer = out16[j * 16 + 4 * (i + 1)];
                let first = out4[j * 4 + 1 + i];
                assert!((inner - first).abs() < 1e-12);
                assert!((outer - first).abs() < 1e-12);
            }
        }
        // Hessian of u against central differences of the gradient
        let h = 1e-4;
        for a in 0..3 {
            for b in 0..3 {
                let hess = out16[4 * (a + 1) + b + 1];
                let mut xp = x;
                let mut xm = x;
                xp[a] += h;
                xm[a] -= h;
                let gp = forward(&p, xp).unwrap().u().d[b];
                let gm = forward(&p, xm).unwrap().u().d[b];
                let fd = (gp - gm) / (2.0 * h);
                assert!(
                    (hess - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                    "hessian[{a}][{b}] {hess} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_gradient_of_grad_norm_matches_finite_differences() {
        // loss = |grad u(x)|^2 through the recorded chunk path
        let cfg = MlpConfig {
            depth: 2,
            width: 16,
            skip_layer: 1,
            in_dim: 3,
            out_dim: 7,
            softplus_beta: 100.0,
        };
        let p = random_params(cfg, 51);
        let x = [0.3, 0.1, -0.6];
        let loss_of = |params: &Params| -> f64 {
            let out = forward(params, x).unwrap();
            let g = out.u().tangent();
            g.iter().map(|v| v * v).sum()
        };
        let grad = {
            let chunk = forward_recorded::<4>(&p, &[x]);
            let tape = Tape::new();
            let bridged = chunk.bridge(&tape, 0);
            let jets = bridged.jets(7);
            let g = &jets[0].d;
            let loss = g[0].clone() * g[0].clone()
                + g[1].clone() * g[1].clone()
                + g[2].clone() * g[2].clone();
            let adj = tape.backward(&loss).unwrap();
            let out_bar = chunk.collect_out_bar(&adj, &[bridged]);
            let mut grad = vec![0.0; p.len()];
            backward_chunk::<4>(&p, &chunk.trace, &out_bar, &mut grad);
            grad
        };
        let h = 1e-5;
        let mut max_fd: f64 = 0.0;
        let mut max_err: f64 = 0.0;
        for i in 0..p.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.flat[i] += h;
            pm.flat[i] -= h;
            let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
            max_fd = max_fd.max(fd.abs());
            max_err = max_err.max((grad[i] - fd).abs());
        }
        assert!(
            max_err <= 1e-4 * max_fd.max(1.0),
            "param gradient error {max_err} at scale {max_fd}"
        );
    }
}

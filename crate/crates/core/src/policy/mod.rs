//! The trainable next-item policy: one pre-norm, single-head transformer
//! block over the embedded history. The representation at the last history
//! position is dotted with candidate item embeddings to produce scores, and
//! `log π(y|x)` is the log-softmax of those scores over the candidate set.
//!
//! Forward and backward passes are written out by hand; every parameter
//! lives in one flat buffer ([`ParamSet`]) so optimisers, checkpoints and
//! finite-difference checks can treat the model as a single vector.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{ItemIdx, SequenceExample};
use crate::error::{Error, Result};
use crate::rng;
use crate::HISTORY_LEN;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Examples per gradient chunk. Fixed so that summation order, and hence
/// every bit of the result, is independent of the thread count.
const CHUNK: usize = 8;

/// Named parameter tensors, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    ItemEmb,
    PosEmb,
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    W1,
    B1,
    W2,
    B2,
}

impl Tensor {
    pub const ALL: [Tensor; 14] = [
        Tensor::ItemEmb,
        Tensor::PosEmb,
        Tensor::Ln1Gain,
        Tensor::Ln1Bias,
        Tensor::Wq,
        Tensor::Wk,
        Tensor::Wv,
        Tensor::Wo,
        Tensor::Ln2Gain,
        Tensor::Ln2Bias,
        Tensor::W1,
        Tensor::B1,
        Tensor::W2,
        Tensor::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::ItemEmb => "item_emb",
            Tensor::PosEmb => "pos_emb",
            Tensor::Ln1Gain => "ln1_gain",
            Tensor::Ln1Bias => "ln1_bias",
            Tensor::Wq => "wq",
            Tensor::Wk => "wk",
            Tensor::Wv => "wv",
            Tensor::Wo => "wo",
            Tensor::Ln2Gain => "ln2_gain",
            Tensor::Ln2Bias => "ln2_bias",
            Tensor::W1 => "w1",
            Tensor::B1 => "b1",
            Tensor::W2 => "w2",
            Tensor::B2 => "b2",
        }
    }

    fn len(self, n_items: usize, d: usize) -> usize {
        match self {
            Tensor::ItemEmb => n_items * d,
            Tensor::PosEmb => HISTORY_LEN * d,
            Tensor::Ln1Gain | Tensor::Ln1Bias | Tensor::Ln2Gain | Tensor::Ln2Bias | Tensor::B2 => d,
            Tensor::Wq | Tensor::Wk | Tensor::Wv | Tensor::Wo => d * d,
            Tensor::W1 | Tensor::W2 => d * 4 * d,
            Tensor::B1 => 4 * d,
        }
    }
}

/// A flat buffer holding one value per model parameter. Used both for the
/// parameters themselves and for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    n_items: usize,
    d: usize,
    offsets: [usize; 15],
    data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(n_items: usize, d: usize) -> Self {
        let mut offsets = [0usize; 15];
        for (i, t) in Tensor::ALL.iter().enumerate() {
            offsets[i + 1] = offsets[i] + t.len(n_items, d);
        }
        ParamSet {
            n_items,
            d,
            offsets,
            data: vec![0.0; offsets[14]],
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn d(&self) -> usize {
        self.d
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let i = t as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn get(&self, t: Tensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn get_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.data[r]
    }

    /// Which tensor flat index `i` belongs to.
    pub fn tensor_of(&self, i: usize) -> Tensor {
        let pos = self.offsets[1..].iter().position(|&end| i < end).expect("index in range");
        Tensor::ALL[pos]
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.n_items == other.n_items && self.d == other.d
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// Per-example activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    hhat: Vec<f64>,
    rstd2: f64,
    f: Vec<f64>,
    u: Vec<f64>,
    gu: Vec<f64>,
    /// The sequence representation.
    pub rep: Vec<f64>,
}

/// Next-item scorer. Also used, with separate weights, as the frozen
/// reference model and as the preference oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    params: ParamSet,
}

impl PolicyModel {
    /// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(n_items: usize, d: usize, seed: u64) -> Self {
        let mut params = ParamSet::zeros(n_items, d);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in Tensor::ALL {
            let slot = params.get_mut(t);
            match t {
                Tensor::Ln1Gain | Tensor::Ln2Gain => slot.fill(1.0),
                Tensor::Ln1Bias | Tensor::Ln2Bias | Tensor::B1 | Tensor::B2 => {}
                _ => {
                    let mut r = rng::stream(seed, t.name(), 0);
                    slot.iter_mut().for_each(|x| *x = normal.sample(&mut r));
                }
            }
        }
        PolicyModel { params }
    }

    pub fn from_params(params: ParamSet) -> Self {
        PolicyModel { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn n_items(&self) -> usize {
        self.params.n_items
    }

    pub fn d(&self) -> usize {
        self.params.d
    }

    /// FNV-1a over the parameter bytes.
    pub fn checksum(&self) -> u64 {
        self.params.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, x| {
            x.to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.data.iter().all(|x| x.is_finite())
    }

    fn check_item(&self, item: ItemIdx) -> Result<()> {
        if (item as usize) < self.n_items() {
            Ok(())
        } else {
            Err(Error::UnknownItem(format!("#{item}")))
        }
    }

    fn item_row(&self, item: ItemIdx) -> &[f64] {
        let d = self.d();
        let i = item as usize * d;
        &self.params.get(Tensor::ItemEmb)[i..i + d]
    }

    /// Runs the block over `history` and returns all activations.
    pub fn forward(&self, history: &[ItemIdx]) -> Result<Trace> {
        if history.len() != HISTORY_LEN {
            return Err(Error::Shape(format!(
                "history must have {HISTORY_LEN} items, got {}",
                history.len()
            )));
        }
        for &h in history {
            self.check_item(h)?;
        }
        let d = self.d();
        let ff = 4 * d;
        let p = &self.params;
        let last = HISTORY_LEN - 1;

        let mut x = vec![0.0; HISTORY_LEN * d];
        let pos = p.get(Tensor::PosEmb);
        for (t, &item) in history.iter().enumerate() {
            let e = self.item_row(item);
            for j in 0..d {
                x[t * d + j] = e[j] + pos[t * d + j];
            }
        }

        let mut xhat1 = vec![0.0; HISTORY_LEN * d];
        let mut rstd1 = vec![0.0; HISTORY_LEN];
        let mut a = vec![0.0; HISTORY_LEN * d];
        for (t, r) in rstd1.iter_mut().enumerate() {
            let rs = t * d..(t + 1) * d;
            *r = layer_norm(
                &x[rs.clone()],
                p.get(Tensor::Ln1Gain),
                p.get(Tensor::Ln1Bias),
                &mut xhat1[rs.clone()],
                &mut a[rs],
            );
        }

        let mut k = vec![0.0; HISTORY_LEN * d];
        let mut v = vec![0.0; HISTORY_LEN * d];
        for t in 0..HISTORY_LEN {
            let rs = t * d..(t + 1) * d;
            vec_mat(&a[rs.clone()], p.get(Tensor::Wk), d, &mut k[rs.clone()]);
            vec_mat(&a[rs.clone()], p.get(Tensor::Wv), d, &mut v[rs]);
        }
        let mut q = vec![0.0; d];
        vec_mat(&a[last * d..], p.get(Tensor::Wq), d, &mut q);

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut attn: Vec<f64> = (0..HISTORY_LEN)
            .map(|t| dot(&q, &k[t * d..(t + 1) * d]) * inv_sqrt_d)
            .collect();
        softmax_in_place(&mut attn);

        let mut ctx = vec![0.0; d];
        for t in 0..HISTORY_LEN {
            for j in 0..d {
                ctx[j] += attn[t] * v[t * d + j];
            }
        }
        let mut o = vec![0.0; d];
        vec_mat(&ctx, p.get(Tensor::Wo), d, &mut o);
        let h: Vec<f64> = (0..d).map(|j| x[last * d + j] + o[j]).collect();

        let mut hhat = vec![0.0; d];
        let mut f = vec![0.0; d];
        let rstd2 = layer_norm(&h, p.get(Tensor::Ln2Gain), p.get(Tensor::Ln2Bias), &mut hhat, &mut f);

        let mut u = p.get(Tensor::B1).to_vec();
        vec_mat_acc(&f, p.get(Tensor::W1), ff, &mut u);
        let gu: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut rep = p.get(Tensor::B2).to_vec();
        vec_mat_acc(&gu, p.get(Tensor::W2), d, &mut rep);
        for j in 0..d {
            rep[j] += h[j];
        }

        Ok(Trace {
            xhat1,
            rstd1,
            a,
            k,
            v,
            q,
            attn,
            ctx,
            hhat,
            rstd2,
            f,
            u,
            gu,
            rep,
        })
    }

    /// Candidate scores for an already computed trace.
    pub fn scores_for(&self, trace: &Trace, candidates: &[ItemIdx]) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|&c| {
                self.check_item(c)?;
                Ok(dot(&trace.rep, self.item_row(c)))
            })
            .collect()
    }

    /// `score[j] = rep · item_emb[candidates[j]]`.
    pub fn forward_scores(&self, history: &[ItemIdx], candidates: &[ItemIdx]) -> Result<Vec<f64>> {
        let trace = self.forward(history)?;
        self.scores_for(&trace, candidates)
    }

    /// Scores for every catalogue item.
    pub fn all_scores(&self, history: &[ItemIdx]) -> Result<Vec<f64>> {
        let trace = self.forward(history)?;
        let d = self.d();
        Ok(self
            .params
            .get(Tensor::ItemEmb)
            .chunks(d)
            .map(|e| dot(&trace.rep, e))
            .collect())
    }

    /// Log-softmax of the candidate scores.
    pub fn log_probs(&self, history: &[ItemIdx], candidates: &[ItemIdx]) -> Result<Vec<f64>> {
        let mut s = self.forward_scores(history, candidates)?;
        log_softmax_in_place(&mut s);
        Ok(s)
    }

    /// `log π(item | x)` restricted to the example's candidate set.
    pub fn log_prob(&self, example: &SequenceExample, item: ItemIdx) -> Result<f64> {
        let j = example
            .candidates
            .iter()
            .position(|&c| c == item)
            .ok_or_else(|| Error::NotACandidate(format!("#{item}")))?;
        Ok(self.log_probs(&example.history, &example.candidates)?[j])
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d score`
    /// for each candidate.
    pub fn backward(
        &self,
        trace: &Trace,
        history: &[ItemIdx],
        candidates: &[ItemIdx],
        dscores: &[f64],
        grads: &mut ParamSet,
    ) {
        let d = self.d();
        let ff = 4 * d;
        let p = &self.params;
        let last = HISTORY_LEN - 1;

        // scores -> representation and candidate embeddings
        let mut drep = vec![0.0; d];
        {
            let demb = grads.get_mut(Tensor::ItemEmb);
            for (&c, &g) in candidates.iter().zip(dscores) {
                if g == 0.0 {
                    continue;
                }
                let row = self.item_row(c);
                let off = c as usize * d;
                for j in 0..d {
                    drep[j] += g * row[j];
                    demb[off + j] += g * trace.rep[j];
                }
            }
        }

        // rep = h + W2ᵀ gelu(W1ᵀ f + b1) + b2
        let mut dh = drep.clone();
        add_into(grads.get_mut(Tensor::B2), &drep);
        outer_acc(&trace.gu, &drep, grads.get_mut(Tensor::W2));
        let mut dgu = vec![0.0; ff];
        mat_vec_acc(p.get(Tensor::W2), &drep, d, &mut dgu);
        let du: Vec<f64> = dgu.iter().zip(&trace.u).map(|(g, &z)| g * gelu_grad(z)).collect();
        add_into(grads.get_mut(Tensor::B1), &du);
        outer_acc(&trace.f, &du, grads.get_mut(Tensor::W1));
        let mut df = vec![0.0; d];
        mat_vec_acc(p.get(Tensor::W1), &du, ff, &mut df);

        let mut dh_ln = vec![0.0; d];
        layer_norm_backward(
            &df,
            &trace.hhat,
            trace.rstd2,
            p.get(Tensor::Ln2Gain),
            &mut dh_ln,
            grads,
            Tensor::Ln2Gain,
            Tensor::Ln2Bias,
        );
        for j in 0..d {
            dh[j] += dh_ln[j];
        }

        // h = x_last + Woᵀ ctx
        let mut dx = vec![0.0; HISTORY_LEN * d];
        for j in 0..d {
            dx[last * d + j] += dh[j];
        }
        outer_acc(&trace.ctx, &dh, grads.get_mut(Tensor::Wo));
        let mut dctx = vec![0.0; d];
        mat_vec_acc(p.get(Tensor::Wo), &dh, d, &mut dctx);

        // attention
        let mut dattn = vec![0.0; HISTORY_LEN];
        let mut dv = vec![0.0; HISTORY_LEN * d];
        for t in 0..HISTORY_LEN {
            dattn[t] = dot(&dctx, &trace.v[t * d..(t + 1) * d]);
            for j in 0..d {
                dv[t * d + j] = trace.attn[t] * dctx[j];
            }
        }
        let weighted: f64 = trace.attn.iter().zip(&dattn).map(|(a, g)| a * g).sum();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let dlogit: Vec<f64> = trace
            .attn
            .iter()
            .zip(&dattn)
            .map(|(a, g)| a * (g - weighted) * inv_sqrt_d)
            .collect();
        let mut dq = vec![0.0; d];
        let mut dk = vec![0.0; HISTORY_LEN * d];
        for t in 0..HISTORY_LEN {
            for j in 0..d {
                dq[j] += dlogit[t] * trace.k[t * d + j];
                dk[t * d + j] = dlogit[t] * trace.q[j];
            }
        }

        let mut da = vec![0.0; HISTORY_LEN * d];
        outer_acc(&trace.a[last * d..], &dq, grads.get_mut(Tensor::Wq));
        mat_vec_acc(p.get(Tensor::Wq), &dq, d, &mut da[last * d..]);
        for t in 0..HISTORY_LEN {
            let rs = t * d..(t + 1) * d;
            outer_acc(&trace.a[rs.clone()], &dk[rs.clone()], grads.get_mut(Tensor::Wk));
            outer_acc(&trace.a[rs.clone()], &dv[rs.clone()], grads.get_mut(Tensor::Wv));
            mat_vec_acc(p.get(Tensor::Wk), &dk[rs.clone()], d, &mut da[rs.clone()]);
            mat_vec_acc(p.get(Tensor::Wv), &dv[rs.clone()], d, &mut da[rs]);
        }

        for t in 0..HISTORY_LEN {
            let rs = t * d..(t + 1) * d;
            let mut dxt = vec![0.0; d];
            layer_norm_backward(
                &da[rs.clone()],
                &trace.xhat1[rs.clone()],
                trace.rstd1[t],
                p.get(Tensor::Ln1Gain),
                &mut dxt,
                grads,
                Tensor::Ln1Gain,
                Tensor::Ln1Bias,
            );
            for j in 0..d {
                dx[t * d + j] += dxt[j];
            }
        }

        // x_t = item_emb[h_t] + pos_emb[t]
        add_into(grads.get_mut(Tensor::PosEmb), &dx);
        let demb = grads.get_mut(Tensor::ItemEmb);
        for (t, &item) in history.iter().enumerate() {
            let off = item as usize * d;
            for j in 0..d {
                demb[off + j] += dx[t * d + j];
            }
        }
    }

    /// Runs `per_item` over `items` in fixed-size chunks (in parallel) and
    /// sums losses and gradients in chunk order.
    pub fn accumulate<T, F>(&self, items: &[T], per_item: F) -> Result<(f64, ParamSet)>
    where
        T: Sync,
        F: Fn(&PolicyModel, &T, &mut ParamSet) -> Result<f64> + Sync,
    {
        let partials: Vec<Result<(f64, ParamSet)>> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = ParamSet::zeros(self.n_items(), self.d());
                let mut loss = 0.0;
                for item in chunk {
                    loss += per_item(self, item, &mut g)?;
                }
                Ok((loss, g))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = ParamSet::zeros(self.n_items(), self.d());
        for part in partials {
            let (l, g) = part?;
            total += l;
            grads.add_assign(&g);
        }
        Ok((total, grads))
    }

    /// Cross-entropy of the next item against an arbitrary candidate list,
    /// scaled by `weight`, with its gradient accumulated into `grads`.
    pub fn cross_entropy_into(
        &self,
        history: &[ItemIdx],
        candidates: &[ItemIdx],
        target_pos: usize,
        weight: f64,
        grads: &mut ParamSet,
    ) -> Result<f64> {
        let trace = self.forward(history)?;
        let mut lp = self.scores_for(&trace, candidates)?;
        log_softmax_in_place(&mut lp);
        let loss = -lp[target_pos];
        // d(-lp_target)/ds = p - onehot
        let mut ds: Vec<f64> = lp.iter().map(|l| weight * l.exp()).collect();
        ds[target_pos] -= weight;
        self.backward(&trace, history, candidates, &ds, grads);
        Ok(weight * loss)
    }

    /// Mean of `-log π(target | x)` over the batch and its exact gradient.
    pub fn sft_loss_and_grad(&self, batch: &[SequenceExample]) -> Result<(f64, ParamSet)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        self.accumulate(batch, |model, ex, g| {
            let pos = ex
                .candidates
                .iter()
                .position(|&c| c == ex.target)
                .ok_or_else(|| Error::NotACandidate(format!("#{}", ex.target)))?;
            model.cross_entropy_into(&ex.history, &ex.candidates, pos, w, g)
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `out = x W` with `W` row-major `len(x) × cols`.
fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    vec_mat_acc(x, w, cols, out);
}

fn vec_mat_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `dx += W dy` with `W` row-major `len(dx) × cols`.
fn mat_vec_acc(w: &[f64], dy: &[f64], cols: usize, dx: &mut [f64]) {
    for (i, out) in dx.iter_mut().enumerate() {
        *out += dot(&w[i * cols..(i + 1) * cols], dy);
    }
}

/// `dW += x ⊗ dy`.
fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let cols = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (g, &d) in dw[i * cols..(i + 1) * cols].iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
}

/// Returns the reciprocal standard deviation.
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        xhat[j] = (x[j] - mean) * rstd;
        out[j] = gain[j] * xhat[j] + bias[j];
    }
    rstd
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    dx: &mut [f64],
    grads: &mut ParamSet,
    gain_t: Tensor,
    bias_t: Tensor,
) {
    let n = dout.len() as f64;
    {
        let dg = grads.get_mut(gain_t);
        for j in 0..dout.len() {
            dg[j] += dout[j] * xhat[j];
        }
    }
    add_into(grads.get_mut(bias_t), dout);
    let dxhat: Vec<f64> = dout.iter().zip(gain).map(|(d, g)| d * g).collect();
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    for j in 0..dout.len() {
        dx[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax_in_place(v: &mut [f64]) {
    let z = logsumexp(v);
    v.iter_mut().for_each(|x| *x -= z);
}

#[cfg(test)]
pub(crate) mod tests;

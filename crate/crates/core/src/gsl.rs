//! Graph structure learning: per-interval pooling of sequence embeddings,
//! self-attention adjacency, cosine KNN guidance, pruning and
//! symmetrization, and the three graph regularizers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{config_err, contract_err, shape_err, Result};
use crate::params::{init, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor applied to node degrees before division or logarithm.
pub const DEGREE_EPS: f64 = 1e-8;

fn guarded(d: f64) -> f64 {
    d.max(DEGREE_EPS)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GslConfig {
    /// Interval length `r`. `None` learns one graph over each record's true length.
    pub resolution: Option<usize>,
    pub knn_k: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub heads: usize,
}

impl Default for GslConfig {
    fn default() -> Self {
        Self { resolution: None, knn_k: 2, epsilon: 0.6, kappa: 0.1, heads: 1 }
    }
}

impl GslConfig {
    pub fn validate(&self, n_sensors: usize, d_model: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(config_err!("gsl.epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(config_err!("gsl.kappa must be finite and >= 0, got {}", self.kappa));
        }
        if self.knn_k < 1 || self.knn_k >= n_sensors {
            return Err(config_err!(
                "gsl.knn_k must satisfy 1 <= k < {n_sensors}, got {}",
                self.knn_k
            ));
        }
        if self.heads == 0 || d_model % self.heads != 0 {
            return Err(config_err!("gsl.heads ({}) must divide d_model ({d_model})", self.heads));
        }
        if self.resolution == Some(0) {
            return Err(config_err!("gsl.resolution must be positive"));
        }
        Ok(())
    }

    /// Interval length and interval count for a record of `true_len` valid
    /// steps out of `t_max`.
    pub fn intervals(&self, t_max: usize, true_len: usize) -> Result<(usize, usize)> {
        match self.resolution {
            None => Ok((true_len, 1)),
            Some(r) if t_max % r == 0 => Ok((r, t_max / r)),
            Some(r) => Err(config_err!(
                "sequence length {t_max} is not divisible by resolution {r}"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl RegWeights {
    pub fn uniform(w: f64) -> Self {
        Self { alpha: w, beta: w, gamma: w }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("reg.{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

/// The learned adjacency matrices of one record, one `N x N` matrix per interval.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraphSet {
    pub adjacency: Vec<Tensor>,
}

impl DynamicGraphSet {
    pub fn n_d(&self) -> usize {
        self.adjacency.len()
    }

    /// Checks symmetry, entries in `[0, 1]`, and that nothing in `(0, kappa)` survives.
    pub fn validate(&self, kappa: f64) -> Result<()> {
        for (t, w) in self.adjacency.iter().enumerate() {
            let n = w.shape()[0];
            for i in 0..n {
                for j in 0..n {
                    let v = w.at2(i, j);
                    if v != w.at2(j, i) {
                        return Err(contract_err!("graph {t}: asymmetric at ({i}, {j})"));
                    }
                    if !(0.0..=1.0).contains(&v) {
                        return Err(contract_err!("graph {t}: entry {v} outside [0, 1]"));
                    }
                    if v != 0.0 && v < kappa {
                        return Err(contract_err!("graph {t}: entry {v} below kappa {kappa}"));
                    }
                }
            }
        }
        Ok(())
    }
}

struct IntervalPoolOp {
    dims: (usize, usize, usize),
    steps: Vec<usize>,
}

impl CustomOp for IntervalPoolOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, t_n, d) = self.dims;
        let mut out = vec![0.0; n * t_n * d];
        let k = 1.0 / self.steps.len() as f64;
        for i in 0..n {
            for &t in &self.steps {
                let base = (i * t_n + t) * d;
                for j in 0..d {
                    out[base + j] = g[i * d + j] * k;
                }
            }
        }
        vec![Some(out)]
    }
}

/// Mean of `h: [n, t, d]` over the valid steps of each of the first `n_d`
/// intervals of length `r`, giving one `[n, d]` tensor per interval.
pub fn interval_mean_pool(tape: &mut Tape, h: Var, r: usize, n_d: usize, mask: Option<&[bool]>) -> Result<Vec<Var>> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("interval_mean_pool expects [n, t, d], got {:?}", shape));
    }
    let (n, t_n, d) = (shape[0], shape[1], shape[2]);
    if let Some(m) = mask {
        if m.len() != t_n {
            return Err(shape_err!("mask length {} vs sequence length {t_n}", m.len()));
        }
    }
    if r == 0 || n_d == 0 || r * n_d > t_n {
        return Err(contract_err!("{n_d} intervals of length {r} do not fit sequence length {t_n}"));
    }
    let mut out = Vec::with_capacity(n_d);
    for iv in 0..n_d {
        let steps: Vec<usize> =
            (iv * r..(iv + 1) * r).filter(|&t| mask.map_or(true, |m| m[t])).collect();
        if steps.is_empty() {
            return Err(contract_err!("interval {iv} contains no valid timesteps"));
        }
        let hd = tape.value(h).data();
        let mut pooled = vec![0.0; n * d];
        for i in 0..n {
            for &t in &steps {
                let base = (i * t_n + t) * d;
                for j in 0..d {
                    pooled[i * d + j] += hd[base + j];
                }
            }
        }
        let k = 1.0 / steps.len() as f64;
        pooled.iter_mut().for_each(|v| *v *= k);
        let op = IntervalPoolOp { dims: (n, t_n, d), steps };
        out.push(tape.custom(&[h], Tensor::from_parts(vec![n, d], pooled), op));
    }
    Ok(out)
}

struct AttentionOp {
    heads: usize,
    probs: Vec<Vec<f64>>,
}

impl AttentionOp {
    fn forward(q: &Tensor, k: &Tensor, heads: usize) -> (Tensor, Vec<Vec<f64>>) {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mean = vec![0.0; n * n];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q.row(i)[h * dh..(h + 1) * dh];
                for j in 0..n {
                    let kj = &k.row(j)[h * dh..(h + 1) * dh];
                    a[i * n + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                crate::autodiff::softmax_in_place(&mut a[i * n..(i + 1) * n]);
            }
            for (m, v) in mean.iter_mut().zip(&a) {
                *m += v / heads as f64;
            }
            probs.push(a);
        }
        (Tensor::from_parts(vec![n, n], mean), probs)
    }
}

impl CustomOp for AttentionOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (q, k) = (inputs[0], inputs[1]);
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        for (h, a) in self.probs.iter().enumerate() {
            for i in 0..n {
                let row = &a[i * n..(i + 1) * n];
                let grow: Vec<f64> = g[i * n..(i + 1) * n].iter().map(|v| v / self.heads as f64).collect();
                let dot: f64 = row.iter().zip(&grow).map(|(a, g)| a * g).sum();
                for j in 0..n {
                    let ds = row[j] * (grow[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in h * dh..(h + 1) * dh {
                        gq[i * d + c] += ds * k.data()[j * d + c];
                        gk[j * d + c] += ds * q.data()[i * d + c];
                    }
                }
            }
        }
        vec![Some(gq), Some(gk)]
    }
}

/// Row-stochastic adjacency from projected queries and keys: the mean over
/// heads of `softmax(Q_h K_h^T / sqrt(d_head))`.
pub fn attention_from_qk(tape: &mut Tape, q: Var, k: Var, heads: usize) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || qs != ks || heads == 0 || qs[1] % heads != 0 {
        return Err(shape_err!("attention: q {:?}, k {:?}, heads {heads}", qs, ks));
    }
    let (w, probs) = AttentionOp::forward(tape.value(q), tape.value(k), heads);
    Ok(tape.custom(&[q, k], w, AttentionOp { heads, probs }))
}

/// `h: [n, d]`, `mq`, `mk`: `[d, d]`.
pub fn attention_adjacency(tape: &mut Tape, h: Var, mq: Var, mk: Var, heads: usize) -> Result<Var> {
    let q = tape.matmul(h, mq)?;
    let k = tape.matmul(h, mk)?;
    attention_from_qk(tape, q, k, heads)
}

/// Binary symmetric KNN graph by cosine similarity between rows of `h`.
/// Self is excluded; ties go to the lower index; rows with zero norm have
/// similarity 0 to everything.
pub fn knn_graph_cosine(h: &Tensor, k: usize) -> Result<Tensor> {
    if h.ndim() != 2 {
        return Err(shape_err!("knn expects [n, d], got {:?}", h.shape()));
    }
    let n = h.shape()[0];
    if k == 0 || k >= n {
        return Err(contract_err!("knn k must satisfy 1 <= k < {n}, got {k}"));
    }
    let norms: Vec<f64> = (0..n).map(|i| h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                    0.0
                } else {
                    h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j])
                };
                (s, j)
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in sims.iter().take(k) {
            w.data_mut()[i * n + j] = 1.0;
            w.data_mut()[j * n + i] = 1.0;
        }
    }
    Ok(w)
}

struct FinalizeOp {
    epsilon: f64,
    keep_mixed: Vec<bool>,
    keep_sym: Vec<bool>,
    n: usize,
}

impl CustomOp for FinalizeOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.n;
        let ds: Vec<f64> = g.iter().zip(&self.keep_sym).map(|(g, &k)| if k { *g } else { 0.0 }).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if self.keep_mixed[i * n + j] {
                    out[i * n + j] = 0.5 * (ds[i * n + j] + ds[j * n + i]) * (1.0 - self.epsilon);
                }
            }
        }
        vec![Some(out)]
    }
}

/// `W = eps W_knn + (1 - eps) W_bar`; entries below `kappa` set to zero;
/// then `W <- (W + W^T) / 2`. Averaging can leave half-weight entries below
/// `kappa`; those are zeroed as well so the result has no sub-threshold edges.
/// Pruned entries pass no gradient.
pub fn finalize_adjacency(tape: &mut Tape, w_bar: Var, w_knn: &Tensor, epsilon: f64, kappa: f64) -> Result<Var> {
    let s = tape.shape(w_bar).to_vec();
    if s.len() != 2 || s[0] != s[1] || w_knn.shape() != s.as_slice() {
        return Err(shape_err!("finalize: w_bar {:?}, w_knn {:?}", s, w_knn.shape()));
    }
    let n = s[0];
    let wb = tape.value(w_bar).data();
    let mut pruned = vec![0.0; n * n];
    let mut keep_mixed = vec![false; n * n];
    for idx in 0..n * n {
        let m = epsilon * w_knn.data()[idx] + (1.0 - epsilon) * wb[idx];
        if m >= kappa {
            pruned[idx] = m;
            keep_mixed[idx] = true;
        }
    }
    let mut out = vec![0.0; n * n];
    let mut keep_sym = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * (pruned[i * n + j] + pruned[j * n + i]);
            if v >= kappa && v > 0.0 {
                out[i * n + j] = v;
                keep_sym[i * n + j] = true;
            }
        }
    }
    let op = FinalizeOp { epsilon, keep_mixed, keep_sym, n };
    Ok(tape.custom(&[w_bar], Tensor::from_parts(vec![n, n], out), op))
}

fn check_square(tape: &Tape, w: Var) -> Result<usize> {
    let s = tape.shape(w);
    if s.len() != 2 || s[0] != s[1] {
        return Err(shape_err!("adjacency must be square, got {:?}", s));
    }
    Ok(s[0])
}

struct SmoothnessOp;

impl CustomOp for SmoothnessOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (inputs[0], inputs[1]);
        let (n, d) = (h.shape()[0], h.shape()[1]);
        let scale = g[0] / (n * n) as f64;
        let deg: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum::<f64>()).collect();
        let dt: Vec<f64> = deg.iter().map(|&v| guarded(v)).collect();
        let s: Vec<f64> = dt.iter().map(|v| 1.0 / v.sqrt()).collect();
        let gram = |i: usize, j: usize| h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum::<f64>();
        let mut gh = vec![0.0; n * d];
        for i in 0..n {
            let a = deg[i] / dt[i];
            for c in 0..d {
                let mut acc = 2.0 * a * h.data()[i * d + c];
                for j in 0..n {
                    let wij = w.at2(i, j) + w.at2(j, i);
                    acc -= s[i] * wij * s[j] * h.data()[j * d + c];
                }
                gh[i * d + c] = acc * scale;
            }
        }
        // Through the degree of row k: the self term and both s_k factors.
        let mut gdeg = vec![0.0; n];
        for k in 0..n {
            gdeg[k] = if deg[k] >= DEGREE_EPS {
                let mut cross = 0.0;
                for j in 0..n {
                    cross += (w.at2(k, j) + w.at2(j, k)) * s[j] * gram(k, j);
                }
                0.5 * dt[k].powf(-1.5) * cross
            } else {
                gram(k, k) / DEGREE_EPS
            };
        }
        let mut gw = vec![0.0; n * n];
        for k in 0..n {
            for l in 0..n {
                gw[k * n + l] = (-s[k] * s[l] * gram(k, l) + gdeg[k]) * scale;
            }
        }
        vec![Some(gh), Some(gw)]
    }
}

/// Dirichlet energy with the normalized Laplacian, `tr(h^T L h) / N^2`,
/// `L = D'^-1/2 (D - W) D'^-1/2` with `D' = max(D, delta)`.
pub fn smoothness_loss(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let n = check_square(tape, w)?;
    let (ht, wt) = (tape.value(h), tape.value(w));
    if ht.ndim() != 2 || ht.shape()[0] != n {
        return Err(shape_err!("smoothness: h {:?} vs W {:?}", ht.shape(), wt.shape()));
    }
    let deg: Vec<f64> = (0..n).map(|i| wt.row(i).iter().sum::<f64>()).collect();
    let s: Vec<f64> = deg.iter().map(|&v| 1.0 / guarded(v).sqrt()).collect();
    let gram = |i: usize, j: usize| ht.row(i).iter().zip(ht.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let mut e = 0.0;
    for i in 0..n {
        e += deg[i] / guarded(deg[i]) * gram(i, i);
        for j in 0..n {
            let wij = wt.at2(i, j);
            if wij != 0.0 {
                e -= wij * s[i] * s[j] * gram(i, j);
            }
        }
    }
    let out = Tensor::scalar(e / (n * n) as f64);
    Ok(tape.custom(&[h, w], out, SmoothnessOp))
}

struct DegreeOp;

impl CustomOp for DegreeOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let w = inputs[0];
        let n = w.shape()[0];
        let mut out = vec![0.0; n * n];
        for k in 0..n {
            let d: f64 = w.row(k).iter().sum();
            let v = if d >= DEGREE_EPS { -g[0] / (n as f64 * d) } else { 0.0 };
            out[k * n..(k + 1) * n].iter_mut().for_each(|o| *o = v);
        }
        vec![Some(out)]
    }
}

/// `-(1/N) 1^T log(max(W 1, delta))`.
pub fn degree_loss(tape: &mut Tape, w: Var) -> Result<Var> {
    let n = check_square(tape, w)?;
    let wt = tape.value(w);
    let s: f64 = (0..n).map(|i| guarded(wt.row(i).iter().sum::<f64>()).ln()).sum();
    Ok(tape.custom(&[w], Tensor::scalar(-s / n as f64), DegreeOp))
}

/// `||W||_F^2 / N^2`.
pub fn sparsity_loss(tape: &mut Tape, w: Var) -> Result<Var> {
    let n = check_square(tape, w)?;
    let sq = tape.square(w);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (n * n) as f64))
}

/// Weighted regularizer of one graph, `alpha smooth + beta degree + gamma sparse`.
/// Zero-weight terms are skipped.
pub fn reg_loss_single(tape: &mut Tape, h: Var, w: Var, weights: RegWeights) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if weights.alpha != 0.0 {
        let v = smoothness_loss(tape, h, w)?;
        terms.push(tape.scale(v, weights.alpha));
    }
    if weights.beta != 0.0 {
        let v = degree_loss(tape, w)?;
        terms.push(tape.scale(v, weights.beta));
    }
    if weights.gamma != 0.0 {
        let v = sparsity_loss(tape, w)?;
        terms.push(tape.scale(v, weights.gamma));
    }
    let mut it = terms.into_iter();
    let Some(first) = it.next() else { return Ok(None) };
    it.try_fold(first, |acc, v| tape.add(acc, v)).map(Some)
}

/// Sum over graphs of the weighted per-graph regularizer (undivided).
pub fn reg_loss_sum(tape: &mut Tape, graphs: &[Var], pooled: &[Var], weights: RegWeights) -> Result<Var> {
    if graphs.len() != pooled.len() || graphs.is_empty() {
        return Err(contract_err!(
            "regularizer needs aligned non-empty lists, got {} graphs and {} pooled",
            graphs.len(),
            pooled.len()
        ));
    }
    let mut total: Option<Var> = None;
    for (&w, &h) in graphs.iter().zip(pooled) {
        if let Some(r) = reg_loss_single(tape, h, w, weights)? {
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// `(1/n_d) sum_t [alpha smooth + beta degree + gamma sparse]`.
pub fn reg_loss_total(tape: &mut Tape, graphs: &[Var], pooled: &[Var], weights: RegWeights) -> Result<Var> {
    let s = reg_loss_sum(tape, graphs, pooled, weights)?;
    Ok(tape.scale(s, 1.0 / graphs.len() as f64))
}

/// The learnable part of the layer: query and key projections.
#[derive(Clone, Debug)]
pub struct GslLayer {
    pub cfg: GslConfig,
    pub d_model: usize,
    mq: ParamId,
    mk: ParamId,
}

/// Output of [`GslLayer::forward`] for one interval.
pub struct LearnedGraph {
    pub w: Var,
    pub w_bar: Var,
}

impl GslLayer {
    pub fn new(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, cfg: GslConfig, d_model: usize) -> Self {
        let mq = store.add("gsl.mq", init::linear(rng, d_model, &[d_model, d_model]));
        let mk = store.add("gsl.mk", init::linear(rng, d_model, &[d_model, d_model]));
        Self { cfg, d_model, mq, mk }
    }

    pub fn param_count(&self) -> usize {
        2 * self.d_model * self.d_model
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<LearnedGraph> {
        let (mq, mk) = (ctx.p(self.mq), ctx.p(self.mk));
        let w_bar = attention_adjacency(&mut ctx.tape, h, mq, mk, self.cfg.heads)?;
        let knn = knn_graph_cosine(ctx.tape.value(h), self.cfg.knn_k)?;
        let w = finalize_adjacency(&mut ctx.tape, w_bar, &knn, self.cfg.epsilon, self.cfg.kappa)?;
        Ok(LearnedGraph { w, w_bar })
    }
}

/// Row-major CSV with six decimal places.
pub fn adjacency_csv(w: &Tensor) -> String {
    let n = w.shape()[0];
    let cols = w.shape().get(1).copied().unwrap_or(1);
    let mut out = String::new();
    for i in 0..n {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:.6}", w.data()[i * cols + j]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn eval1(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).data()[0]
    }

    #[test]
    fn pool_constant_and_arithmetic() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[2, 6, 3], 1.5));
        let pooled = interval_mean_pool(&mut tape, h, 3, 2, None).unwrap();
        assert_eq!(pooled.len(), 2);
        for p in pooled {
            assert!(tape.value(p).data().iter().all(|&v| v == 1.5));
        }
        let h = tape.constant(Tensor::new(vec![1, 4, 1], vec![1., 3., 5., 7.]).unwrap());
        let pooled = interval_mean_pool(&mut tape, h, 2, 2, None).unwrap();
        assert_eq!(tape.value(pooled[0]).data(), &[2.0]);
        assert_eq!(tape.value(pooled[1]).data(), &[6.0]);
    }

    #[test]
    fn pool_padded_tail_equals_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let full = init::normal(&mut rng, 1.0, &[2, 5, 3]);
        let mut padded = Tensor::zeros(&[2, 8, 3]);
        for i in 0..2 {
            for t in 0..5 {
                for j in 0..3 {
                    padded.data_mut()[(i * 8 + t) * 3 + j] = full.data()[(i * 5 + t) * 3 + j];
                }
            }
        }
        let a = tape.constant(full);
        let b = tape.constant(padded);
        let pa = interval_mean_pool(&mut tape, a, 5, 1, None).unwrap();
        let mask: Vec<bool> = (0..8).map(|t| t < 5).collect();
        let pb = interval_mean_pool(&mut tape, b, 8, 1, Some(&mask)).unwrap();
        assert!(tape.value(pa[0]).max_abs_diff(tape.value(pb[0])) < 1e-15);
        let bad = interval_mean_pool(&mut tape, b, 2, 4, Some(&mask));
        assert!(bad.is_err(), "last interval is fully padded");
    }

    #[test]
    fn attention_zero_embeddings_uniform() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[4, 4]));
        let m = tape.constant(Tensor::eye(4));
        let w = attention_adjacency(&mut tape, h, m, m, 2).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn attention_hand_case_d1() {
        // h = [[ln2], [0]], Mq = Mk = 1: scores [[ln2^2, 0], [0, 0]].
        let l2 = 2f64.ln();
        let mut tape = Tape::new();
        let h = tape.constant(mat(&[&[l2], &[0.0]]));
        let m = tape.constant(Tensor::eye(1));
        let w = attention_adjacency(&mut tape, h, m, m, 1).unwrap();
        let e = (l2 * l2).exp();
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (a, b) in tape.value(w).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let h = tape.constant(init::normal(&mut rng, 2.0, &[5, 8]));
            let mq = tape.constant(init::normal(&mut rng, 1.0, &[8, 8]));
            let mk = tape.constant(init::normal(&mut rng, 1.0, &[8, 8]));
            let w = attention_adjacency(&mut tape, h, mq, mk, 4).unwrap();
            for i in 0..5 {
                let s: f64 = tape.value(w).row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn knn_hand_case_and_complete_graph() {
        let w = knn_graph_cosine(&mat(&[&[1., 0.], &[1., 0.], &[0., 1.]]), 1).unwrap();
        assert_eq!(w.data(), &[0., 1., 1., 1., 0., 0., 1., 0., 0.]);
        let w = knn_graph_cosine(&Tensor::full(&[4, 3], 2.0), 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(w.at2(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
        assert!(knn_graph_cosine(&Tensor::full(&[3, 2], 1.0), 3).is_err());
    }

    #[test]
    fn finalize_examples() {
        let mut tape = Tape::new();
        let wb = tape.constant(Tensor::full(&[2, 2], 0.5));
        let knn = Tensor::full(&[2, 2], 1.0);
        let w = finalize_adjacency(&mut tape, wb, &knn, 0.6, 0.0).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.8).abs() < 1e-15));

        let wb = tape.constant(mat(&[&[0.05, 0.5], &[0.5, 0.95]]));
        let w = finalize_adjacency(&mut tape, wb, &Tensor::zeros(&[2, 2]), 0.0, 0.1).unwrap();
        assert_eq!(tape.value(w).data(), &[0.0, 0.5, 0.5, 0.95]);

        // eps = 0: symmetrized, pruned W_bar alone.
        let wb = tape.constant(mat(&[&[0.7, 0.3], &[0.5, 0.5]]));
        let w = finalize_adjacency(&mut tape, wb, &Tensor::eye(2), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(w).data(), &[0.7, 0.4, 0.4, 0.5]);
    }

    #[test]
    fn finalize_removes_half_edges_below_kappa() {
        let mut tape = Tape::new();
        let wb = tape.constant(mat(&[&[0.5, 0.15], &[0.05, 0.95]]));
        let w = finalize_adjacency(&mut tape, wb, &Tensor::zeros(&[2, 2]), 0.0, 0.1).unwrap();
        // 0.15 survives pruning, 0.05 does not; the average 0.075 is below kappa.
        assert_eq!(tape.value(w).data(), &[0.5, 0.0, 0.0, 0.95]);
    }

    #[test]
    fn regularizer_closed_forms() {
        let e = eval1(|tp| {
            let h = tp.constant(Tensor::full(&[3, 2], 0.7));
            let w = tp.constant(mat(&[&[0., 1., 1.], &[1., 0., 1.], &[1., 1., 0.]]));
            smoothness_loss(tp, h, w).unwrap()
        });
        assert!(e.abs() <= 1e-12);
        let e = eval1(|tp| {
            let h = tp.constant(init::normal(&mut ChaCha8Rng::seed_from_u64(0), 1.0, &[3, 2]));
            let w = tp.constant(Tensor::zeros(&[3, 3]));
            smoothness_loss(tp, h, w).unwrap()
        });
        assert_eq!(e, 0.0);
        let e = eval1(|tp| {
            let h = tp.constant(mat(&[&[1.0], &[0.0]]));
            let w = tp.constant(mat(&[&[0., 1.], &[1., 0.]]));
            smoothness_loss(tp, h, w).unwrap()
        });
        assert!((e - 0.25).abs() < 1e-8);

        let e = eval1(|tp| {
            let w = tp.constant(Tensor::full(&[2, 2], 1.0));
            degree_loss(tp, w).unwrap()
        });
        assert!((e + 2f64.ln()).abs() <= 1e-10);
        let e = eval1(|tp| {
            let w = tp.constant(mat(&[&[0., 0.], &[0., 1.]]));
            degree_loss(tp, w).unwrap()
        });
        assert!(e.is_finite() && (e + DEGREE_EPS.ln() / 2.0).abs() < 1e-12);

        assert_eq!(
            eval1(|tp| {
                let w = tp.constant(Tensor::eye(2));
                sparsity_loss(tp, w).unwrap()
            }),
            0.5
        );
        assert_eq!(
            eval1(|tp| {
                let w = tp.constant(Tensor::zeros(&[3, 3]));
                sparsity_loss(tp, w).unwrap()
            }),
            0.0
        );
        assert_eq!(
            eval1(|tp| {
                let w = tp.constant(Tensor::full(&[3, 3], 1.0));
                sparsity_loss(tp, w).unwrap()
            }),
            1.0
        );
    }

    #[test]
    fn degree_loss_scaling_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..1.0)).collect();
        let base = eval1(|tp| {
            let v = tp.constant(Tensor::new(vec![4, 4], w.clone()).unwrap());
            degree_loss(tp, v).unwrap()
        });
        let c: f64 = 3.0;
        let scaled = eval1(|tp| {
            let v = tp.constant(Tensor::new(vec![4, 4], w.iter().map(|x| x * c).collect()).unwrap());
            degree_loss(tp, v).unwrap()
        });
        assert!((scaled - (base - c.ln())).abs() < 1e-12);
    }

    #[test]
    fn reg_total_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[2, 1], 1.0));
        let w1 = tape.constant(Tensor::full(&[2, 2], 0.1f64.sqrt() / 1.0));
        let zero = reg_loss_total(&mut tape, &[w1], &[h], RegWeights::default()).unwrap();
        assert_eq!(tape.value(zero).data(), &[0.0]);

        // sparsity 0.1 and 0.3 via diagonal matrices.
        let a = tape.constant(mat(&[&[0.2f64.sqrt(), 0.], &[0., 0.2f64.sqrt()]]));
        let b = tape.constant(mat(&[&[0.6f64.sqrt(), 0.], &[0., 0.6f64.sqrt()]]));
        let g_only = RegWeights { alpha: 0.0, beta: 0.0, gamma: 1.0 };
        let one = reg_loss_total(&mut tape, &[a], &[h], g_only).unwrap();
        assert!((tape.value(one).data()[0] - 0.1).abs() < 1e-15);
        let two = reg_loss_total(&mut tape, &[a, b], &[h, h], g_only).unwrap();
        assert!((tape.value(two).data()[0] - 0.2).abs() < 1e-15);
        assert!(reg_loss_total(&mut tape, &[a, b], &[h], g_only).is_err());
    }

    #[test]
    fn regularizer_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = init::normal(&mut rng, 1.0, &[4, 3]);
        let w = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let r = gradcheck(&[h.clone(), w.clone()], 1e-5, |tp, v| smoothness_loss(tp, v[0], v[1])).unwrap();
        assert!(r.max_rel_err <= 1e-6, "smooth {}", r.max_rel_err);
        let r = gradcheck(&[w.clone()], 1e-5, |tp, v| degree_loss(tp, v[0])).unwrap();
        assert!(r.max_rel_err <= 1e-6, "degree {}", r.max_rel_err);
        let r = gradcheck(&[w], 1e-5, |tp, v| sparsity_loss(tp, v[0])).unwrap();
        assert!(r.max_rel_err <= 1e-6, "sparse {}", r.max_rel_err);
    }

    #[test]
    fn attention_and_finalize_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = [
            init::normal(&mut rng, 1.0, &[4, 4]),
            init::normal(&mut rng, 0.7, &[4, 4]),
            init::normal(&mut rng, 0.7, &[4, 4]),
        ];
        let knn = knn_graph_cosine(&leaves[0], 1).unwrap();
        let wts: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = gradcheck(&leaves, 1e-5, |tp, v| {
            let wb = attention_adjacency(tp, v[0], v[1], v[2], 2)?;
            let w = finalize_adjacency(tp, wb, &knn, 0.3, 0.0)?;
            let m = tp.mul_const(w, wts.clone())?;
            Ok(tp.sum(m))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn csv_six_decimals() {
        let s = adjacency_csv(&mat(&[&[1.0, 0.1234567], &[0.0, 2.5]]));
        assert_eq!(s, "1.000000,0.123457\n0.000000,2.500000\n");
    }

    #[test]
    fn config_validation() {
        let cfg = GslConfig::default();
        assert!(cfg.validate(6, 8).is_ok());
        let cfg = GslConfig { heads: 4, ..cfg };
        assert!(GslConfig { epsilon: 1.0, ..cfg.clone() }.validate(6, 8).is_err());
        assert!(GslConfig { kappa: -0.1, ..cfg.clone() }.validate(6, 8).is_err());
        assert!(GslConfig { knn_k: 6, ..cfg.clone() }.validate(6, 8).is_err());
        assert!(GslConfig { heads: 3, ..cfg.clone() }.validate(6, 8).is_err());
        let fixed = GslConfig { resolution: Some(2000), ..cfg };
        assert_eq!(fixed.intervals(12000, 12000).unwrap(), (2000, 6));
        assert_eq!(GslConfig { resolution: Some(2500), ..fixed.clone() }.intervals(7500, 7500).unwrap(), (2500, 3));
        assert!(fixed.intervals(12001, 12001).is_err());
        assert_eq!(GslConfig::default().intervals(6000, 600).unwrap(), (600, 1));
    }
}

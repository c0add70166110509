//! Structured state-space layers.
//!
//! A single-input single-output core `x' = Ax + bu, y = Re(c x) + d u` is
//! discretized with the bilinear transform. Diagonal cores produce their
//! convolution kernel in closed form; diagonal-plus-low-rank cores are
//! materialized as dense `P x P` matrices and powered step by step. The
//! recurrent scan is the reference both paths are checked against.
//!
//! [`S4Layer`] is a trainable bank of diagonal cores, one per feature, whose
//! kernels are applied with FFT convolution.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::fft::conv_channels;
use crate::params::{init, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_DT_MIN: f64 = 1e-3;
pub const DEFAULT_DT_MAX: f64 = 1e-1;

/// Parameters of one state-space channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmCore {
    /// Diagonal of `A`.
    pub lambda: Vec<C64>,
    /// Rank-1 correction `(p, q)` giving `A = diag(lambda) - p q^T`.
    pub lowrank: Option<(Vec<C64>, Vec<C64>)>,
    pub b: Vec<C64>,
    pub c: Vec<C64>,
    pub d_skip: f64,
    pub log_dt: f64,
}

/// Discretized state matrices.
#[derive(Clone, Debug, PartialEq)]
pub enum Discretized {
    Diagonal { a_bar: Vec<C64>, b_bar: Vec<C64> },
    /// `a_bar` is row-major `P x P`.
    Dense { a_bar: Vec<C64>, b_bar: Vec<C64> },
}

impl SsmCore {
    /// S4D-Lin initialization: `lambda_n = -1/2 + i pi n`, `b = 1`,
    /// `c` complex standard normal, `dt` log-uniform in `[dt_min, dt_max]`.
    pub fn s4d_lin(rng: &mut ChaCha8Rng, state: usize, dt_min: f64, dt_max: f64) -> Self {
        let lambda = (0..state).map(|n| C64::new(-0.5, PI * n as f64)).collect();
        let b = vec![C64::new(1.0, 0.0); state];
        let c = (0..state).map(|_| complex_normal(rng)).collect();
        Self { lambda, lowrank: None, b, c, d_skip: 0.0, log_dt: log_uniform(rng, dt_min, dt_max) }
    }

    pub fn state_size(&self) -> usize {
        self.lambda.len()
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    pub fn is_stable(&self) -> bool {
        self.lambda.iter().all(|l| l.re < 0.0)
    }

    fn validate(&self) -> Result<()> {
        let p = self.state_size();
        if self.b.len() != p || self.c.len() != p {
            return Err(shape_err!("core: state {p}, b {}, c {}", self.b.len(), self.c.len()));
        }
        if let Some((lp, lq)) = &self.lowrank {
            if lp.len() != p || lq.len() != p {
                return Err(shape_err!("core: low-rank factors must have length {p}"));
            }
        }
        Ok(())
    }

    /// Dense `A`, row-major.
    pub fn dense_a(&self) -> Vec<C64> {
        let p = self.state_size();
        let mut a = vec![C64::new(0.0, 0.0); p * p];
        for i in 0..p {
            a[i * p + i] = self.lambda[i];
        }
        if let Some((lp, lq)) = &self.lowrank {
            for i in 0..p {
                for j in 0..p {
                    a[i * p + j] -= lp[i] * lq[j];
                }
            }
        }
        a
    }
}

fn complex_normal(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo.ln()..=hi.ln())
}

/// Bilinear discretization: `a_bar = (1 + dt A/2)/(1 - dt A/2)`,
/// `b_bar = dt b/(1 - dt A/2)` (matrix inverses for dense cores).
pub fn discretize_bilinear(core: &SsmCore) -> Result<Discretized> {
    core.validate()?;
    let dt = core.dt();
    let p = core.state_size();
    if core.lowrank.is_none() {
        let mut a_bar = Vec::with_capacity(p);
        let mut b_bar = Vec::with_capacity(p);
        for (l, b) in core.lambda.iter().zip(&core.b) {
            let z = l * dt;
            let den = 1.0 - z / 2.0;
            if den.norm() < 1e-300 {
                return Err(Error::Numeric(format!("bilinear pole at dt*lambda = {z}")));
            }
            a_bar.push((1.0 + z / 2.0) / den);
            b_bar.push(b * dt / den);
        }
        return Ok(Discretized::Diagonal { a_bar, b_bar });
    }
    let a = core.dense_a();
    let one = C64::new(1.0, 0.0);
    let mut lhs = vec![C64::new(0.0, 0.0); p * p];
    let mut rhs = vec![C64::new(0.0, 0.0); p * (p + 1)];
    for i in 0..p {
        for j in 0..p {
            let eye = if i == j { one } else { C64::new(0.0, 0.0) };
            lhs[i * p + j] = eye - a[i * p + j] * (dt / 2.0);
            rhs[i * (p + 1) + j] = eye + a[i * p + j] * (dt / 2.0);
        }
        rhs[i * (p + 1) + p] = core.b[i] * dt;
    }
    let sol = solve_complex(lhs, rhs, p, p + 1)?;
    let mut a_bar = vec![C64::new(0.0, 0.0); p * p];
    let mut b_bar = vec![C64::new(0.0, 0.0); p];
    for i in 0..p {
        a_bar[i * p..(i + 1) * p].copy_from_slice(&sol[i * (p + 1)..i * (p + 1) + p]);
        b_bar[i] = sol[i * (p + 1) + p];
    }
    Ok(Discretized::Dense { a_bar, b_bar })
}

/// Solves `lhs X = rhs` by Gaussian elimination with partial pivoting.
/// `lhs` is `n x n`, `rhs` is `n x m`, both row-major.
fn solve_complex(mut lhs: Vec<C64>, mut rhs: Vec<C64>, n: usize, m: usize) -> Result<Vec<C64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| lhs[a * n + col].norm().total_cmp(&lhs[b * n + col].norm()))
            .unwrap();
        if lhs[piv * n + col].norm() < 1e-300 {
            return Err(Error::Numeric("singular bilinear system".into()));
        }
        if piv != col {
            for j in 0..n {
                lhs.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                rhs.swap(col * m + j, piv * m + j);
            }
        }
        let d = lhs[col * n + col];
        for r in col + 1..n {
            let f = lhs[r * n + col] / d;
            if f == C64::new(0.0, 0.0) {
                continue;
            }
            for j in col..n {
                let v = lhs[col * n + j];
                lhs[r * n + j] -= f * v;
            }
            for j in 0..m {
                let v = rhs[col * m + j];
                rhs[r * m + j] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = lhs[col * n + col];
        for j in 0..m {
            let mut v = rhs[col * m + j];
            for k in col + 1..n {
                v -= lhs[col * n + k] * rhs[k * m + j];
            }
            rhs[col * m + j] = v / d;
        }
    }
    Ok(rhs)
}

/// Convolution kernel `K[t] = Re(c a_bar^t b_bar)`, `t = 0..len`.
pub fn materialize_kernel(core: &SsmCore, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(contract_err!("kernel length must be at least 1"));
    }
    let p = core.state_size();
    let mut k = vec![0.0; len];
    match discretize_bilinear(core)? {
        Discretized::Diagonal { a_bar, b_bar } => {
            for i in 0..p {
                let w = core.c[i] * b_bar[i];
                let mut pow = C64::new(1.0, 0.0);
                for kt in k.iter_mut() {
                    *kt += (w * pow).re;
                    pow *= a_bar[i];
                }
            }
        }
        Discretized::Dense { a_bar, b_bar } => {
            let mut v = b_bar;
            for kt in k.iter_mut() {
                *kt = core.c.iter().zip(&v).map(|(c, x)| c * x).sum::<C64>().re;
                v = matvec(&a_bar, &v, p);
            }
        }
    }
    Ok(Tensor::vector(k))
}

fn matvec(a: &[C64], v: &[C64], p: usize) -> Vec<C64> {
    (0..p).map(|i| (0..p).map(|j| a[i * p + j] * v[j]).sum()).collect()
}

/// Recurrence `x_t = a_bar x_{t-1} + b_bar u_t`, `y_t = Re(c x_t) + d u_t`
/// from a zero state.
pub fn ssm_scan_recurrent(core: &SsmCore, u: &Tensor) -> Result<Tensor> {
    let p = core.state_size();
    let disc = discretize_bilinear(core)?;
    let mut x = vec![C64::new(0.0, 0.0); p];
    let mut y = Vec::with_capacity(u.numel());
    for &ut in u.data() {
        match &disc {
            Discretized::Diagonal { a_bar, b_bar } => {
                for i in 0..p {
                    x[i] = a_bar[i] * x[i] + b_bar[i] * ut;
                }
            }
            Discretized::Dense { a_bar, b_bar } => {
                x = matvec(a_bar, &x, p);
                for i in 0..p {
                    x[i] += b_bar[i] * ut;
                }
            }
        }
        let out: C64 = core.c.iter().zip(&x).map(|(c, x)| c * x).sum();
        y.push(out.re + core.d_skip * ut);
    }
    Ok(Tensor::vector(y))
}

/// Differentiable kernel generation for a bank of diagonal cores.
///
/// Inputs (all `[c, p]` except `log_dt: [c]`): `log_neg_re` with
/// `Re(lambda) = -exp(log_neg_re)`, `lambda_im`, `b_re`, `b_im`, `c_re`,
/// `c_im`. Output `[c, len]`.
struct SsmKernelOp {
    channels: usize,
    state: usize,
    len: usize,
}

struct CoreTerms {
    lambda: C64,
    dt: f64,
    den: C64,
    a_bar: C64,
    b: C64,
    b_bar: C64,
    c: C64,
}

impl SsmKernelOp {
    fn terms(&self, inputs: &[&Tensor], ch: usize, i: usize) -> CoreTerms {
        let k = ch * self.state + i;
        let lambda = C64::new(-inputs[0].data()[k].exp(), inputs[1].data()[k]);
        let b = C64::new(inputs[2].data()[k], inputs[3].data()[k]);
        let c = C64::new(inputs[4].data()[k], inputs[5].data()[k]);
        let dt = inputs[6].data()[ch].exp();
        let z = lambda * dt;
        let den = 1.0 - z / 2.0;
        CoreTerms { lambda, dt, den, a_bar: (1.0 + z / 2.0) / den, b, b_bar: b * dt / den, c }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let mut out = vec![0.0; self.channels * self.len];
        for ch in 0..self.channels {
            let row = &mut out[ch * self.len..(ch + 1) * self.len];
            for i in 0..self.state {
                let t = self.terms(inputs, ch, i);
                let w = t.c * t.b_bar;
                let mut pow = C64::new(1.0, 0.0);
                for kt in row.iter_mut() {
                    *kt += (w * pow).re;
                    pow *= t.a_bar;
                }
            }
        }
        Tensor::from_parts(vec![self.channels, self.len], out)
    }
}

impl CustomOp for SsmKernelOp {
    // For a real loss L and complex intermediate u, G_u = dL/dRe(u) + i dL/dIm(u).
    // Through a holomorphic map u = h(v): G_v = G_u * conj(h'(v)).
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let n = self.channels * self.state;
        let mut g_lre = vec![0.0; n];
        let mut g_lim = vec![0.0; n];
        let mut g_bre = vec![0.0; n];
        let mut g_bim = vec![0.0; n];
        let mut g_cre = vec![0.0; n];
        let mut g_cim = vec![0.0; n];
        let mut g_logdt = vec![0.0; self.channels];
        for ch in 0..self.channels {
            let gr = &g[ch * self.len..(ch + 1) * self.len];
            for i in 0..self.state {
                let k = ch * self.state + i;
                let t = self.terms(inputs, ch, i);
                // s = sum_t g_t a^t, s1 = sum_t g_t t a^(t-1)
                let mut s = C64::new(0.0, 0.0);
                let mut s1 = C64::new(0.0, 0.0);
                let mut pow = C64::new(1.0, 0.0);
                let mut pow_prev = C64::new(0.0, 0.0);
                for (step, &gt) in gr.iter().enumerate() {
                    s += pow * gt;
                    if step > 0 {
                        s1 += pow_prev * (gt * step as f64);
                    }
                    pow_prev = pow;
                    pow *= t.a_bar;
                }
                let g_c = (t.b_bar * s).conj();
                let g_bbar = (t.c * s).conj();
                let g_abar = (t.c * t.b_bar * s1).conj();
                let den2 = t.den * t.den;
                let g_z = g_abar * (1.0 / den2).conj() + g_bbar * (t.b * t.dt / (2.0 * den2)).conj();
                let g_lambda = g_z * t.dt;
                let g_b = g_bbar * (t.dt / t.den).conj();
                let g_dt = (g_z.conj() * t.lambda).re + (g_bbar.conj() * (t.b / t.den)).re;
                g_lre[k] = g_lambda.re * t.lambda.re;
                g_lim[k] = g_lambda.im;
                g_bre[k] = g_b.re;
                g_bim[k] = g_b.im;
                g_cre[k] = g_c.re;
                g_cim[k] = g_c.im;
                g_logdt[ch] += g_dt * t.dt;
            }
        }
        vec![
            Some(g_lre),
            Some(g_lim),
            Some(g_bre),
            Some(g_bim),
            Some(g_cre),
            Some(g_cim),
            Some(g_logdt),
        ]
    }
}

/// Trainable bank of `channels` diagonal cores with `state` modes each.
#[derive(Clone, Debug)]
pub struct SsmBank {
    pub channels: usize,
    pub state: usize,
    log_neg_re: ParamId,
    lambda_im: ParamId,
    b_re: ParamId,
    b_im: ParamId,
    c_re: ParamId,
    c_im: ParamId,
    log_dt: ParamId,
}

impl SsmBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        state: usize,
        dt_range: (f64, f64),
    ) -> Self {
        let n = channels * state;
        let mut v = vec![Vec::with_capacity(n); 6];
        let mut log_dt = Vec::with_capacity(channels);
        for _ in 0..channels {
            let core = SsmCore::s4d_lin(rng, state, dt_range.0, dt_range.1);
            for i in 0..state {
                v[0].push((-core.lambda[i].re).ln());
                v[1].push(core.lambda[i].im);
                v[2].push(core.b[i].re);
                v[3].push(core.b[i].im);
                v[4].push(core.c[i].re);
                v[5].push(core.c[i].im);
            }
            log_dt.push(core.log_dt);
        }
        let mut add = |name: &str, data: Vec<f64>| {
            store.add(format!("{prefix}.{name}"), Tensor::from_parts(vec![channels, state], data))
        };
        let mut it = v.into_iter();
        let log_neg_re = add("log_neg_re", it.next().unwrap());
        let lambda_im = add("lambda_im", it.next().unwrap());
        let b_re = add("b_re", it.next().unwrap());
        let b_im = add("b_im", it.next().unwrap());
        let c_re = add("c_re", it.next().unwrap());
        let c_im = add("c_im", it.next().unwrap());
        let log_dt = store.add(format!("{prefix}.log_dt"), Tensor::vector(log_dt));
        Self { channels, state, log_neg_re, lambda_im, b_re, b_im, c_re, c_im, log_dt }
    }

    fn ids(&self) -> [ParamId; 7] {
        [self.log_neg_re, self.lambda_im, self.b_re, self.b_im, self.c_re, self.c_im, self.log_dt]
    }

    /// Kernels `[channels, len]` on the context's tape.
    pub fn kernels(&self, ctx: &mut Ctx, len: usize) -> Var {
        let vars: Vec<Var> = self.ids().iter().map(|&id| ctx.p(id)).collect();
        let op = SsmKernelOp { channels: self.channels, state: self.state, len };
        let out = {
            let ins: Vec<&Tensor> = vars.iter().map(|&v| ctx.tape.value(v)).collect();
            op.forward(&ins)
        };
        ctx.tape.custom(&vars, out, op)
    }

    /// The cores as plain values, one per channel (`d_skip` left at zero).
    pub fn cores(&self, store: &ParamStore) -> Vec<SsmCore> {
        let get = |id: ParamId| store.get(id).data();
        (0..self.channels)
            .map(|ch| {
                let r = ch * self.state..(ch + 1) * self.state;
                let lambda = get(self.log_neg_re)[r.clone()]
                    .iter()
                    .zip(&get(self.lambda_im)[r.clone()])
                    .map(|(lr, li)| C64::new(-lr.exp(), *li))
                    .collect();
                let b = get(self.b_re)[r.clone()]
                    .iter()
                    .zip(&get(self.b_im)[r.clone()])
                    .map(|(x, y)| C64::new(*x, *y))
                    .collect();
                let c = get(self.c_re)[r.clone()]
                    .iter()
                    .zip(&get(self.c_im)[r])
                    .map(|(x, y)| C64::new(*x, *y))
                    .collect();
                SsmCore { lambda, lowrank: None, b, c, d_skip: 0.0, log_dt: get(self.log_dt)[ch] }
            })
            .collect()
    }
}

/// One residual block: SSM convolution with skip term, dropout, linear
/// projection to `2d` and GLU gating, layer normalization, residual add.
#[derive(Clone, Debug)]
pub struct S4Layer {
    pub d_model: usize,
    fwd: SsmBank,
    bwd: Option<SsmBank>,
    d_skip: ParamId,
    norm_gain: ParamId,
    norm_bias: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    dropout: f64,
}

impl S4Layer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        state: usize,
        bidirectional: bool,
        dropout: f64,
        dt_range: (f64, f64),
    ) -> Self {
        let fwd = SsmBank::new(store, rng, &format!("{prefix}.ssm"), d_model, state, dt_range);
        let bwd = bidirectional
            .then(|| SsmBank::new(store, rng, &format!("{prefix}.ssm_rev"), d_model, state, dt_range));
        let d_skip = store.add(format!("{prefix}.d_skip"), init::normal(rng, 1.0, &[d_model]));
        let norm_gain = store.add(format!("{prefix}.norm.gain"), Tensor::full(&[d_model], 1.0));
        let norm_bias = store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[d_model]));
        let out_w = store.add(format!("{prefix}.out.w"), init::linear(rng, d_model, &[d_model, 2 * d_model]));
        let out_b = store.add(format!("{prefix}.out.b"), Tensor::zeros(&[2 * d_model]));
        Self { d_model, fwd, bwd, d_skip, norm_gain, norm_bias, out_w, out_b, dropout }
    }

    pub fn banks(&self) -> impl Iterator<Item = &SsmBank> {
        std::iter::once(&self.fwd).chain(self.bwd.as_ref())
    }

    pub fn is_bidirectional(&self) -> bool {
        self.bwd.is_some()
    }

    /// `x: [s, t, d]`. `mask` (length `t`) zeroes the SSM input at padded steps.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(shape_err!("s4 layer width {}: input {:?}", self.d_model, shape));
        }
        let (s_n, t_n, d) = (shape[0], shape[1], shape[2]);
        let mut u = x;
        if let Some(mask) = mask {
            if mask.iter().any(|m| !m) {
                u = ctx.tape.mul_const(u, expand_mask(mask, s_n, d))?;
            }
        }
        let k = self.fwd.kernels(ctx, t_n);
        let mut y = conv_channels(&mut ctx.tape, u, k)?;
        if let Some(bwd) = &self.bwd {
            let kb = bwd.kernels(ctx, t_n);
            let ur = ctx.tape.reverse_time(u)?;
            let yr = conv_channels(&mut ctx.tape, ur, kb)?;
            let yb = ctx.tape.reverse_time(yr)?;
            y = ctx.tape.add(y, yb)?;
        }
        let skip = ctx.tape.mul_row(u, ctx.p(self.d_skip))?;
        y = ctx.tape.add(y, skip)?;
        y = ctx.dropout(y, self.dropout)?;
        let flat = ctx.tape.reshape(y, &[s_n * t_n, d])?;
        let proj = ctx.tape.matmul(flat, ctx.p(self.out_w))?;
        let proj = ctx.tape.add_row(proj, ctx.p(self.out_b))?;
        let gated = ctx.tape.glu(proj)?;
        let normed = ctx.tape.layer_norm(gated, ctx.p(self.norm_gain), ctx.p(self.norm_bias))?;
        let delta = ctx.tape.reshape(normed, &[s_n, t_n, d])?;
        ctx.tape.add(x, delta)
    }
}

pub(crate) fn expand_mask(mask: &[bool], s_n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(s_n * mask.len() * d);
    for _ in 0..s_n {
        for &m in mask {
            let v = if m { 1.0 } else { 0.0 };
            out.extend(std::iter::repeat(v).take(d));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct S4Config {
    pub d_model: usize,
    pub depth: usize,
    /// Modes per diagonal core.
    pub state_size: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for S4Config {
    fn default() -> Self {
        Self {
            d_model: 128,
            depth: 4,
            state_size: 64,
            bidirectional: false,
            dropout: 0.1,
            dt_min: DEFAULT_DT_MIN,
            dt_max: DEFAULT_DT_MAX,
        }
    }
}

/// Shared input projection `M -> D` followed by residual S4 layers. The
/// same weights are applied to every sensor sequence.
#[derive(Clone, Debug)]
pub struct S4Stack {
    pub d_model: usize,
    pub input_dim: usize,
    in_w: ParamId,
    in_b: ParamId,
    pub layers: Vec<S4Layer>,
}

impl S4Stack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, input_dim: usize, cfg: &S4Config) -> Self {
        let d = cfg.d_model;
        let in_w = store.add("encoder.in.w", init::linear(rng, input_dim, &[input_dim, d]));
        let in_b = store.add("encoder.in.b", init::linear(rng, input_dim, &[d]));
        let layers = (0..cfg.depth)
            .map(|i| {
                S4Layer::new(
                    store,
                    rng,
                    &format!("encoder.layer{i}"),
                    d,
                    cfg.state_size,
                    cfg.bidirectional,
                    cfg.dropout,
                    (cfg.dt_min, cfg.dt_max),
                )
            })
            .collect();
        Self { d_model: d, input_dim, in_w, in_b, layers }
    }

    /// `x: [n, t, m]` to `[n, t, d]`.
    pub fn encode(&self, ctx: &mut Ctx, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = project_input(ctx, x, self.in_w, self.in_b, self.input_dim, self.d_model)?;
        self.layers.iter().try_fold(h, |h, layer| layer.forward(ctx, h, mask))
    }

    pub fn cores(&self, store: &ParamStore) -> Vec<SsmCore> {
        self.layers.iter().flat_map(|l| l.banks()).flat_map(|b| b.cores(store)).collect()
    }
}

pub(crate) fn project_input(
    ctx: &mut Ctx,
    x: Var,
    w: ParamId,
    b: ParamId,
    input_dim: usize,
    d: usize,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != input_dim {
        return Err(shape_err!("encoder expects [n, t, {input_dim}], got {:?}", shape));
    }
    let flat = ctx.tape.reshape(x, &[shape[0] * shape[1], input_dim])?;
    let h = ctx.tape.matmul(flat, ctx.p(w))?;
    let h = ctx.tape.add_row(h, ctx.p(b))?;
    ctx.tape.reshape(h, &[shape[0], shape[1], d])
}

/// Largest `|a_bar|` over every mode of every core.
pub fn max_transition_modulus(cores: &[SsmCore]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for core in cores {
        if let Discretized::Diagonal { a_bar, .. } = discretize_bilinear(core)? {
            worst = a_bar.iter().map(|a| a.norm()).fold(worst, f64::max);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, gradcheck_model};
    use rand::SeedableRng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn scalar_core(lambda: f64, dt: f64) -> SsmCore {
        SsmCore {
            lambda: vec![c(lambda, 0.0)],
            lowrank: None,
            b: vec![c(1.0, 0.0)],
            c: vec![c(1.0, 0.0)],
            d_skip: 0.0,
            log_dt: dt.ln(),
        }
    }

    fn random_core(rng: &mut ChaCha8Rng, p: usize) -> SsmCore {
        let mut core = SsmCore::s4d_lin(rng, p, 1e-3, 1e-1);
        for l in core.lambda.iter_mut() {
            l.re = -rng.gen_range(0.05..1.0);
            l.im += rng.gen_range(-0.5..0.5);
        }
        core.b = (0..p).map(|_| complex_normal(rng)).collect();
        core.d_skip = rng.gen_range(-1.0..1.0);
        core
    }

    #[test]
    fn bilinear_closed_form() {
        let Discretized::Diagonal { a_bar, b_bar } = discretize_bilinear(&scalar_core(0.0, 0.1)).unwrap()
        else {
            unreachable!()
        };
        assert!((a_bar[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((b_bar[0] - c(0.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bilinear_zero_step_limit() {
        let Discretized::Diagonal { a_bar, b_bar } =
            discretize_bilinear(&scalar_core(-1.0, 1e-300)).unwrap()
        else {
            unreachable!()
        };
        assert!((a_bar[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!(b_bar[0].norm() < 1e-12);
    }

    #[test]
    fn bilinear_pole_is_an_error() {
        // dt * lambda = 2 only for an unstable core.
        assert!(discretize_bilinear(&scalar_core(2.0, 1.0)).is_err());
    }

    #[test]
    fn stable_cores_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let core = random_core(&mut rng, 8);
            assert!(core.is_stable());
            assert!(max_transition_modulus(&[core]).unwrap() < 1.0);
        }
    }

    #[test]
    fn kernel_examples() {
        let k = materialize_kernel(&scalar_core(0.0, 0.1), 5).unwrap();
        for v in k.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        let mut core = scalar_core(-0.3, 0.1);
        core.c = vec![c(0.0, 0.0)];
        assert!(materialize_kernel(&core, 6).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_zero_and_impulse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let core = random_core(&mut rng, 4);
        let y = ssm_scan_recurrent(&core, &Tensor::zeros(&[10])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut imp = vec![0.0; 10];
        imp[0] = 1.0;
        let y = ssm_scan_recurrent(&core, &Tensor::vector(imp)).unwrap();
        let k = materialize_kernel(&core, 10).unwrap();
        for t in 0..10 {
            let expect = k.data()[t] + if t == 0 { core.d_skip } else { 0.0 };
            assert!((y.data()[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_path_matches_diagonal_without_lowrank_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let core = random_core(&mut rng, 5);
        let mut dense = core.clone();
        dense.lowrank = Some((vec![c(0.0, 0.0); 5], vec![c(0.0, 0.0); 5]));
        let a = materialize_kernel(&core, 40).unwrap();
        let b = materialize_kernel(&dense, 40).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn dplr_kernel_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let mut core = random_core(&mut rng, 6);
            let lp: Vec<C64> = (0..6).map(|_| complex_normal(&mut rng) * 0.3).collect();
            let lq: Vec<C64> = (0..6).map(|_| complex_normal(&mut rng) * 0.3).collect();
            core.lowrank = Some((lp, lq));
            let u = Tensor::vector((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let scan = ssm_scan_recurrent(&core, &u).unwrap();
            let k = materialize_kernel(&core, 64).unwrap();
            let conv = crate::fft::causal_conv(u.data(), k.data()).unwrap();
            for t in 0..64 {
                let v = conv[t] + core.d_skip * u.data()[t];
                assert!((v - scan.data()[t]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn kernel_op_matches_materialize() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let bank = SsmBank::new(&mut store, &mut rng, "b", 3, 4, (1e-3, 1e-1));
        let mut ctx = Ctx::new(&store, false, false, 0);
        let k = bank.kernels(&mut ctx, 30);
        let kv = ctx.tape.value(k).clone();
        for (ch, core) in bank.cores(&store).iter().enumerate() {
            let expect = materialize_kernel(core, 30).unwrap();
            for t in 0..30 {
                assert!((kv.data()[ch * 30 + t] - expect.data()[t]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn kernel_op_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (ch, p, len) = (2, 3, 12);
        let mk = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize| {
            Tensor::vector((0..n).map(|_| rng.gen_range(lo..hi)).collect())
        };
        let leaves = vec![
            mk(&mut rng, -1.5, 0.5, ch * p),
            mk(&mut rng, -3.0, 3.0, ch * p),
            mk(&mut rng, -1.0, 1.0, ch * p),
            mk(&mut rng, -1.0, 1.0, ch * p),
            mk(&mut rng, -1.0, 1.0, ch * p),
            mk(&mut rng, -1.0, 1.0, ch * p),
            mk(&mut rng, -3.0, -0.5, ch),
        ];
        let w: Vec<f64> = (0..ch * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = gradcheck(&leaves, 1e-5, |tp, v| {
            let op = SsmKernelOp { channels: ch, state: p, len };
            let ins: Vec<Tensor> = v
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let t = tp.value(x).clone();
                    if i < 6 { t.reshape(&[ch, p]).unwrap() } else { t }
                })
                .collect();
            let out = op.forward(&ins.iter().collect::<Vec<_>>());
            let k = tp.custom(v, out, op);
            let m = tp.mul_const(k, w.clone())?;
            Ok(tp.sum(m))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{} at {:?}", r.max_rel_err, r.worst);
    }

    fn layer_setup(bidirectional: bool, seed: u64) -> (ParamStore, S4Layer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = S4Layer::new(&mut store, &mut rng, "l", 4, 3, bidirectional, 0.0, (1e-2, 1e-1));
        (store, layer)
    }

    #[test]
    fn residual_identity_at_zero_weights() {
        let (mut store, layer) = layer_setup(false, 1);
        for id in [layer.out_w, layer.out_b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = init::normal(&mut rng, 1.0, &[2, 9, 4]);
        let mut ctx = Ctx::new(&store, false, false, 0);
        let xv = ctx.tape.constant(x.clone());
        let y = layer.forward(&mut ctx, xv, None).unwrap();
        assert_eq!(ctx.tape.value(y), &x);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let (store, layer) = layer_setup(false, 1);
        let mut ctx = Ctx::new(&store, false, false, 0);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 5, 3]));
        assert!(matches!(layer.forward(&mut ctx, x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn bidirectional_differs_on_impulse() {
        let mut x = Tensor::zeros(&[1, 8, 4]);
        x.data_mut()[0..4].copy_from_slice(&[1.0, -0.5, 0.3, 2.0]);
        let run = |bi: bool| {
            let (store, layer) = layer_setup(bi, 5);
            let mut ctx = Ctx::new(&store, false, false, 0);
            let xv = ctx.tape.constant(x.clone());
            let y = layer.forward(&mut ctx, xv, None).unwrap();
            ctx.tape.value(y).clone()
        };
        let (uni, bi) = (run(false), run(true));
        assert_eq!(uni.shape(), bi.shape());
        assert!(uni.max_abs_diff(&bi) > 1e-6);
    }

    #[test]
    fn layer_gradcheck() {
        for bi in [false, true] {
            let (store, layer) = layer_setup(bi, 21);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let x = init::normal(&mut rng, 1.0, &[2, 6, 4]);
            let w: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = gradcheck_model(&store, &[x], 1e-4, |ctx, inputs| {
                let y = layer.forward(ctx, inputs[0], None)?;
                let m = ctx.tape.mul_const(y, w.clone())?;
                Ok(ctx.tape.sum(m))
            })
            .unwrap();
            // Composite pass: FD rounding noise dominates coordinates with tiny gradients.
            assert!(r.max_rel_err <= 1e-4, "bi={bi}: {} at {:?} a={}", r.max_rel_err, r.worst, r.analytic[r.worst.0][r.worst.1]);
        }
    }
}

//! FFT-based causal convolution.
//!
//! Sequences of length `L` are zero-padded to a power of two `>= 2L` so the
//! circular product equals linear convolution on the first `L` outputs.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

struct Plan {
    n: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
}

impl Plan {
    fn new(n: usize) -> Self {
        PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            Plan { n, fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
        })
    }

    fn for_len(len: usize) -> Self {
        Self::new((2 * len).next_power_of_two())
    }

    fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Spectrum of `x` zero-padded to the plan length.
    fn forward<'a>(&self, x: impl IntoIterator<Item = &'a f64>) -> Vec<Complex64> {
        let mut buf = vec![0.0; self.n];
        for (b, v) in buf.iter_mut().zip(x) {
            *b = *v;
        }
        let mut out = vec![Complex64::new(0.0, 0.0); self.bins()];
        self.fwd.process(&mut buf, &mut out).expect("fft length");
        out
    }

    /// First `len` samples of the normalized inverse transform.
    fn inverse(&self, mut spec: Vec<Complex64>, len: usize) -> Vec<f64> {
        spec[0].im = 0.0;
        let last = spec.len() - 1;
        spec[last].im = 0.0;
        let mut out = vec![0.0; self.n];
        self.inv.process(&mut spec, &mut out).expect("fft length");
        let scale = 1.0 / self.n as f64;
        out.truncate(len);
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }
}

fn product(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn product_conj(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).collect()
}

/// `y[t] = sum_{s<=t} kernel[s] * signal[t-s]` for equal-length inputs.
pub fn causal_conv(signal: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    if signal.len() != kernel.len() || signal.is_empty() {
        return Err(shape_err!(
            "conv needs equal non-zero lengths, got {} and {}",
            signal.len(),
            kernel.len()
        ));
    }
    let plan = Plan::for_len(signal.len());
    let y = product(&plan.forward(signal), &plan.forward(kernel));
    Ok(plan.inverse(y, signal.len()))
}

/// Forward then inverse transform of `x` at the smallest power-of-two length.
pub fn fft_roundtrip(x: &[f64]) -> Vec<f64> {
    let plan = Plan::new(x.len().next_power_of_two().max(2));
    plan.inverse(plan.forward(x), x.len())
}

struct Conv1dOp {
    plan: Plan,
    sig_f: Vec<Complex64>,
    ker_f: Vec<Complex64>,
}

impl CustomOp for Conv1dOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let len = inputs[0].numel();
        let gf = self.plan.forward(g);
        let gs = needs[0].then(|| self.plan.inverse(product_conj(&gf, &self.ker_f), len));
        let gk = needs[1].then(|| self.plan.inverse(product_conj(&gf, &self.sig_f), len));
        vec![gs, gk]
    }
}

/// Differentiable causal convolution of two 1-D tensors of equal length.
pub fn conv1d_fft(tape: &mut Tape, signal: Var, kernel: Var) -> Result<Var> {
    let (s, k) = (tape.value(signal), tape.value(kernel));
    if s.ndim() != 1 || s.shape() != k.shape() || s.numel() == 0 {
        return Err(shape_err!("conv1d_fft: {:?} vs {:?}", s.shape(), k.shape()));
    }
    let len = s.numel();
    let plan = Plan::for_len(len);
    let sig_f = plan.forward(s.data());
    let ker_f = plan.forward(k.data());
    let y = plan.inverse(product(&sig_f, &ker_f), len);
    Ok(tape.custom(&[signal, kernel], Tensor::vector(y), Conv1dOp { plan, sig_f, ker_f }))
}

struct ChannelConvOp {
    plan: Plan,
    dims: (usize, usize, usize),
    sig_f: Vec<Vec<Complex64>>,
    ker_f: Vec<Vec<Complex64>>,
}

impl CustomOp for ChannelConvOp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (s_n, t_n, c_n) = self.dims;
        let bins = self.plan.bins();
        let mut gu = needs[0].then(|| vec![0.0; s_n * t_n * c_n]);
        let mut gk = needs[1].then(|| vec![0.0; c_n * t_n]);
        for c in 0..c_n {
            let mut kacc = vec![Complex64::new(0.0, 0.0); bins];
            for s in 0..s_n {
                let base = s * t_n * c_n + c;
                let gf = self.plan.forward((0..t_n).map(|t| &g[base + t * c_n]));
                if let Some(gu) = gu.as_mut() {
                    let r = self.plan.inverse(product_conj(&gf, &self.ker_f[c]), t_n);
                    for (t, v) in r.into_iter().enumerate() {
                        gu[base + t * c_n] = v;
                    }
                }
                if gk.is_some() {
                    for (a, (x, y)) in kacc.iter_mut().zip(gf.iter().zip(&self.sig_f[s * c_n + c])) {
                        *a += x * y.conj();
                    }
                }
            }
            if let Some(gk) = gk.as_mut() {
                gk[c * t_n..(c + 1) * t_n].copy_from_slice(&self.plan.inverse(kacc, t_n));
            }
        }
        vec![gu, gk]
    }
}

struct DirectConvOp {
    dims: (usize, usize, usize),
}

impl CustomOp for DirectConvOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (s_n, t_n, c_n) = self.dims;
        let (u, k) = (inputs[0].data(), inputs[1].data());
        let mut gu = needs[0].then(|| vec![0.0; s_n * t_n * c_n]);
        let mut gk = needs[1].then(|| vec![0.0; c_n * t_n]);
        for s in 0..s_n {
            for t in 0..t_n {
                for c in 0..c_n {
                    let go = g[(s * t_n + t) * c_n + c];
                    for j in 0..=t {
                        let src = (s * t_n + t - j) * c_n + c;
                        if let Some(gu) = gu.as_mut() {
                            gu[src] += go * k[c * t_n + j];
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[c * t_n + j] += go * u[src];
                        }
                    }
                }
            }
        }
        vec![gu, gk]
    }
}

/// Sequences up to this length are convolved directly.
pub const DIRECT_CONV_MAX_LEN: usize = 64;

/// Per-channel causal convolution: `u` is `[s, t, c]`, `kernels` is `[c, t]`;
/// channel `c` of every sequence is convolved with kernel row `c`.
pub fn conv_channels(tape: &mut Tape, u: Var, kernels: Var) -> Result<Var> {
    let (us, ks) = (tape.shape(u).to_vec(), tape.shape(kernels).to_vec());
    if us.len() != 3 || ks.len() != 2 || ks[0] != us[2] || ks[1] != us[1] || us[1] == 0 {
        return Err(shape_err!("conv_channels: signal {:?}, kernels {:?}", us, ks));
    }
    let (s_n, t_n, c_n) = (us[0], us[1], us[2]);
    let kd = tape.value(kernels).data();
    let ud = tape.value(u).data();
    let mut out = vec![0.0; s_n * t_n * c_n];
    if t_n <= DIRECT_CONV_MAX_LEN {
        for s in 0..s_n {
            for t in 0..t_n {
                for c in 0..c_n {
                    out[(s * t_n + t) * c_n + c] =
                        (0..=t).map(|j| kd[c * t_n + j] * ud[(s * t_n + t - j) * c_n + c]).sum();
                }
            }
        }
        return Ok(tape.custom(&[u, kernels], Tensor::from_parts(us, out), DirectConvOp { dims: (s_n, t_n, c_n) }));
    }
    let plan = Plan::for_len(t_n);
    let ker_f: Vec<Vec<Complex64>> =
        (0..c_n).map(|c| plan.forward(&kd[c * t_n..(c + 1) * t_n])).collect();
    let mut sig_f = Vec::with_capacity(s_n * c_n);
    for s in 0..s_n {
        for c in 0..c_n {
            let base = s * t_n * c_n + c;
            let uf = plan.forward((0..t_n).map(|t| &ud[base + t * c_n]));
            let y = plan.inverse(product(&uf, &ker_f[c]), t_n);
            for (t, v) in y.into_iter().enumerate() {
                out[base + t * c_n] = v;
            }
            sig_f.push(uf);
        }
    }
    let op = ChannelConvOp { plan, dims: (s_n, t_n, c_n), sig_f, ker_f };
    Ok(tape.custom(&[u, kernels], Tensor::from_parts(us, out), op))
}

//! Gated recurrent encoder used as the sequence-model ablation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Var};
use crate::error::{shape_err, Result};
use crate::loss::sigmoid;
use crate::params::{init, Ctx, ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

struct GruSeqOp {
    dims: (usize, usize, usize),
    /// Per step: r, z, n, and the recurrent candidate term `h W_hn + b_hn`.
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

impl CustomOp for GruSeqOp {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (s_n, t_n, h) = self.dims;
        let w_hh = inputs[1].data();
        let hs = out.data();
        let mut gx = vec![0.0; s_n * t_n * 3 * h];
        let mut gw = vec![0.0; h * 3 * h];
        let mut gb = vec![0.0; 3 * h];
        let mut gh = vec![0.0; 3 * h];
        for s in 0..s_n {
            let mut carry = vec![0.0; h];
            for t in (0..t_n).rev() {
                let at = s * t_n + t;
                let prev = if t == 0 { None } else { Some(&hs[(at - 1) * h..at * h]) };
                for j in 0..h {
                    let dh = g[at * h + j] + carry[j];
                    let (r, z, n, hn) = (self.r[at * h + j], self.z[at * h + j], self.n[at * h + j], self.hn[at * h + j]);
                    let hp = prev.map_or(0.0, |p| p[j]);
                    let dan = dh * (1.0 - z) * (1.0 - n * n);
                    let daz = dh * (hp - n) * z * (1.0 - z);
                    let dar = dan * hn * r * (1.0 - r);
                    gh[j] = dar;
                    gh[h + j] = daz;
                    gh[2 * h + j] = dan * r;
                    let gxa = &mut gx[at * 3 * h..(at + 1) * 3 * h];
                    gxa[j] = dar;
                    gxa[h + j] = daz;
                    gxa[2 * h + j] = dan;
                    carry[j] = dh * z;
                }
                for (b, v) in gb.iter_mut().zip(&gh) {
                    *b += v;
                }
                if let Some(p) = prev {
                    for i in 0..h {
                        let row = &mut gw[i * 3 * h..(i + 1) * 3 * h];
                        for (w, v) in row.iter_mut().zip(&gh) {
                            *w += p[i] * v;
                        }
                        carry[i] += w_hh[i * 3 * h..(i + 1) * 3 * h].iter().zip(&gh).map(|(w, v)| w * v).sum::<f64>();
                    }
                }
            }
        }
        vec![needs[0].then_some(gx), needs[1].then_some(gw), needs[2].then_some(gb)]
    }
}

/// Runs a GRU over `xg: [s, t, 3h]`, the precomputed input-gate terms in
/// `[r | z | n]` order, from a zero initial state. Returns `[s, t, h]`.
pub fn gru_sequence(ctx: &mut Ctx, xg: Var, w_hh: Var, b_hh: Var) -> Result<Var> {
    let shape = ctx.tape.shape(xg).to_vec();
    let ws = ctx.tape.shape(w_hh).to_vec();
    if shape.len() != 3 || shape[2] % 3 != 0 || ws != [shape[2] / 3, shape[2]] || ctx.tape.shape(b_hh) != [shape[2]] {
        return Err(shape_err!("gru: xg {:?}, w_hh {:?}", shape, ws));
    }
    let (s_n, t_n, h) = (shape[0], shape[1], shape[2] / 3);
    let x = ctx.tape.value(xg).data();
    let w = ctx.tape.value(w_hh).data();
    let b = ctx.tape.value(b_hh).data();
    let total = s_n * t_n * h;
    let (mut r, mut z, mut n, mut hn) = (vec![0.0; total], vec![0.0; total], vec![0.0; total], vec![0.0; total]);
    let mut out = vec![0.0; total];
    let mut rec = vec![0.0; 3 * h];
    for s in 0..s_n {
        for t in 0..t_n {
            let at = s * t_n + t;
            rec.copy_from_slice(b);
            if t > 0 {
                gemm_acc(&out[(at - 1) * h..at * h], w, &mut rec, 1, h, 3 * h);
            }
            let xa = &x[at * 3 * h..(at + 1) * 3 * h];
            for j in 0..h {
                let rj = sigmoid(xa[j] + rec[j]);
                let zj = sigmoid(xa[h + j] + rec[h + j]);
                let nj = (xa[2 * h + j] + rj * rec[2 * h + j]).tanh();
                let hp = if t > 0 { out[(at - 1) * h + j] } else { 0.0 };
                out[at * h + j] = (1.0 - zj) * nj + zj * hp;
                r[at * h + j] = rj;
                z[at * h + j] = zj;
                n[at * h + j] = nj;
                hn[at * h + j] = rec[2 * h + j];
            }
        }
    }
    let op = GruSeqOp { dims: (s_n, t_n, h), r, z, n, hn };
    Ok(ctx.tape.custom(&[xg, w_hh, b_hh], Tensor::from_parts(vec![s_n, t_n, h], out), op))
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input: usize,
    pub hidden: usize,
    w_ih: ParamId,
    b_ih: ParamId,
    w_hh: ParamId,
    b_hh: ParamId,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) -> Self {
        let w_ih = store.add(format!("{prefix}.w_ih"), init::linear(rng, hidden, &[input, 3 * hidden]));
        let b_ih = store.add(format!("{prefix}.b_ih"), init::linear(rng, hidden, &[3 * hidden]));
        let w_hh = store.add(format!("{prefix}.w_hh"), init::linear(rng, hidden, &[hidden, 3 * hidden]));
        let b_hh = store.add(format!("{prefix}.b_hh"), init::linear(rng, hidden, &[3 * hidden]));
        Self { input, hidden, w_ih, b_ih, w_hh, b_hh }
    }

    /// `x: [s, t, input]` to `[s, t, hidden]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(shape_err!("gru layer expects [s, t, {}], got {:?}", self.input, shape));
        }
        let flat = ctx.tape.reshape(x, &[shape[0] * shape[1], self.input])?;
        let xg = ctx.tape.matmul(flat, ctx.p(self.w_ih))?;
        let xg = ctx.tape.add_row(xg, ctx.p(self.b_ih))?;
        let xg = ctx.tape.reshape(xg, &[shape[0], shape[1], 3 * self.hidden])?;
        gru_sequence(ctx, xg, ctx.p(self.w_hh), ctx.p(self.b_hh))
    }
}

/// Stacked GRU layers of equal width; padded steps are fed zeros.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, input_dim: usize, width: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let inp = if i == 0 { input_dim } else { width };
                GruLayer::new(store, rng, &format!("encoder.gru{i}"), inp, width)
            })
            .collect();
        Self { layers }
    }

    pub fn encode(&self, ctx: &mut Ctx, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let mut h = x;
        if let Some(mask) = mask {
            if mask.iter().any(|m| !m) {
                let s = ctx.tape.shape(x).to_vec();
                h = ctx.tape.mul_const(h, crate::s4::expand_mask(mask, s[0], s[2]))?;
            }
        }
        self.layers.iter().try_fold(h, |h, layer| layer.forward(ctx, h))
    }
}

//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per leaf, `|a - n| / max(|a|, |n|, 1e-8)`.
    pub per_leaf: Vec<f64>,
    pub max_rel_err: f64,
    /// Leaf index and coordinate of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Evaluates `f` on fresh tapes with the given leaves as parameters and
/// compares the analytic gradient of its scalar output against
/// `(f(x+h) - f(x-h)) / 2h` for every leaf coordinate.
pub fn gradcheck<F>(leaves: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    compare(leaves, h, |ls, want_grads| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ls.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let g = vars.iter().zip(ls).map(|(&v, t)| grads.get_or_zeros(v, t.numel())).collect();
        Ok((value, g))
    })
}

/// Like [`gradcheck`], but the leaves are every parameter in `store`
/// followed by `inputs`; `f` receives a forward context bound to the
/// perturbed store and the input handles.
pub fn gradcheck_model<F>(store: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let n_params = store.len();
    let mut leaves: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    leaves.extend_from_slice(inputs);
    compare(&leaves, h, |ls, want_grads| {
        let mut s = store.clone();
        for (dst, src) in s.values_mut().iter_mut().zip(ls) {
            *dst = src.clone();
        }
        let mut ctx = Ctx::new(&s, want_grads, false, 0);
        let vars: Vec<Var> = ls[n_params..].iter().map(|t| ctx.tape.param(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        let value = ctx.tape.value(out).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = ctx.tape.backward(out)?;
        let mut g = ctx.param_grads(&grads, &s);
        g.extend(vars.iter().zip(&ls[n_params..]).map(|(&v, t)| grads.get_or_zeros(v, t.numel())));
        Ok((value, g))
    })
}

fn compare<R>(leaves: &[Tensor], h: f64, run: R) -> Result<GradCheckReport>
where
    R: Fn(&[Tensor], bool) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (_, analytic) = run(leaves, true)?;
    let mut per_leaf = vec![0.0; leaves.len()];
    let mut worst = (0, 0);
    let mut max_rel_err = 0.0;
    let mut work = leaves.to_vec();
    for li in 0..leaves.len() {
        for ci in 0..leaves[li].numel() {
            let x0 = leaves[li].data()[ci];
            work[li].data_mut()[ci] = x0 + h;
            let (fp, _) = run(&work, false)?;
            work[li].data_mut()[ci] = x0 - h;
            let (fm, _) = run(&work, false)?;
            work[li].data_mut()[ci] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let e = relative_error(analytic[li][ci], numeric);
            if e > per_leaf[li] {
                per_leaf[li] = e;
            }
            if e > max_rel_err {
                max_rel_err = e;
                worst = (li, ci);
            }
        }
    }
    Ok(GradCheckReport { per_leaf, max_rel_err, worst, analytic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_derivative() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = gradcheck(&[x], 1e-5, |tp, v| {
            let s = tp.square(v[0]);
            Ok(tp.sum(s))
        })
        .unwrap();
        assert_eq!(r.analytic[0], vec![2.0, 4.0]);
        assert!(r.max_rel_err <= 1e-7);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}

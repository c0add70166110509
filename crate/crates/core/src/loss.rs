//! Prediction losses on raw logits.

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct BceOp {
    targets: Vec<f64>,
}

impl CustomOp for BceOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.targets.len() as f64;
        let grad = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / c)
            .collect();
        vec![Some(grad)]
    }
}

/// Mean sigmoid cross-entropy over the logits, targets in `[0, 1]`.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let z = tape.value(logits);
    if z.numel() != targets.len() || targets.is_empty() {
        return Err(shape_err!("bce: {} logits vs {} targets", z.numel(), targets.len()));
    }
    let loss = z
        .data()
        .iter()
        .zip(targets)
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum::<f64>()
        / targets.len() as f64;
    Ok(tape.custom(&[logits], Tensor::scalar(loss), BceOp { targets: targets.to_vec() }))
}

struct SoftmaxCeOp {
    probs: Vec<f64>,
    class: usize,
}

impl CustomOp for SoftmaxCeOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut grad: Vec<f64> = self.probs.iter().map(|p| p * g[0]).collect();
        grad[self.class] -= g[0];
        vec![Some(grad)]
    }
}

/// `-log softmax(logits)[class]`.
pub fn softmax_ce(tape: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    let z = tape.value(logits).data();
    if class >= z.len() {
        return Err(contract_err!("class {class} out of range for {} logits", z.len()));
    }
    let mut probs = z.to_vec();
    crate::autodiff::softmax_in_place(&mut probs);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let loss = if z[class] == m {
        let rest: f64 = z.iter().enumerate().filter(|&(j, _)| j != class).map(|(_, v)| (v - m).exp()).sum();
        rest.ln_1p()
    } else {
        m - z[class] + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    Ok(tape.custom(&[logits], Tensor::scalar(loss), SoftmaxCeOp { probs, class }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;

    #[test]
    fn bce_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let l = bce_with_logits(&mut tape, z, &[1.0]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let z = tape.constant(Tensor::vector(vec![800.0, -800.0]));
        let l = bce_with_logits(&mut tape, z, &[1.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let l = bce_with_logits(&mut tape, z, &[0.0, 1.0]).unwrap();
        assert_eq!(tape.value(l).data()[0], 800.0);
    }

    #[test]
    fn ce_limit_and_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 4]));
        let l = softmax_ce(&mut tape, z, 2).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for mag in [1.0, 5.0, 20.0, 100.0] {
            let z = tape.constant(Tensor::vector(vec![-mag, mag, -mag]));
            let v = softmax_ce(&mut tape, z, 1).unwrap();
            let l = tape.value(v).data()[0];
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-80);
        assert!(softmax_ce(&mut tape, z, 4).is_err());
    }

    #[test]
    fn loss_gradchecks() {
        let z = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = gradcheck(&[z.clone()], 1e-5, |tp, v| bce_with_logits(tp, v[0], &[1.0, 0.0, 0.5])).unwrap();
        assert!(r.max_rel_err <= 1e-7);
        let r = gradcheck(&[z], 1e-5, |tp, v| softmax_ce(tp, v[0], 1)).unwrap();
        assert!(r.max_rel_err <= 1e-7);
    }
}

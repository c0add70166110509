//! Weighted GIN message passing, temporal and graph pooling, and the
//! classification head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::params::{Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPool {
    Mean,
    Max,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalPool {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub graph_pool: GraphPool,
    pub temporal_pool: TemporalPool,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self { graph_pool: GraphPool::Mean, temporal_pool: TemporalPool::Mean }
    }
}

impl From<GraphPool> for Reduce {
    fn from(p: GraphPool) -> Self {
        match p {
            GraphPool::Mean => Reduce::Mean,
            GraphPool::Max => Reduce::Max,
            GraphPool::Sum => Reduce::Sum,
        }
    }
}

impl From<TemporalPool> for Reduce {
    fn from(p: TemporalPool) -> Self {
        match p {
            TemporalPool::Mean => Reduce::Mean,
            TemporalPool::Max => Reduce::Max,
        }
    }
}

/// `h'_i = MLP((1 + eps) h_i + sum_j W_ij h_j)` with a two-layer ReLU MLP of width `d`.
#[derive(Clone, Debug)]
pub struct GinLayer {
    pub d: usize,
    pub eps: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    dropout: f64,
}

impl GinLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, dropout: f64) -> Self {
        let eps = store.add(format!("{prefix}.eps"), Tensor::scalar(0.0));
        let fc1 = Linear::new(store, rng, &format!("{prefix}.fc1"), d, d);
        let fc2 = Linear::new(store, rng, &format!("{prefix}.fc2"), d, d);
        Self { d, eps, fc1, fc2, dropout }
    }

    /// `h: [n, d]` or `[n, l, d]` (the same graph applied at each of `l`
    /// positions), `w: [n, n]`.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, w: Var) -> Result<Var> {
        let (hs, ws) = (ctx.tape.shape(h).to_vec(), ctx.tape.shape(w).to_vec());
        let rows = match hs.len() {
            2 | 3 => hs[..hs.len() - 1].iter().product::<usize>(),
            _ => 0,
        };
        if rows == 0 || hs[hs.len() - 1] != self.d || ws != [hs[0], hs[0]] {
            return Err(shape_err!("gin: h {:?}, W {:?}, width {}", hs, ws, self.d));
        }
        let n = hs[0];
        let flat = ctx.tape.reshape(h, &[n, rows / n * self.d])?;
        let agg = ctx.tape.matmul(w, flat)?;
        let agg = ctx.tape.reshape(agg, &hs)?;
        let scaled = ctx.tape.mul_scalar_var(h, ctx.p(self.eps))?;
        let x = ctx.tape.add(h, scaled)?;
        let x = ctx.tape.add(x, agg)?;
        let x = ctx.tape.reshape(x, &[rows, self.d])?;
        let x = self.fc1.forward(ctx, x)?;
        let x = ctx.tape.relu(x);
        let x = ctx.dropout(x, self.dropout)?;
        let x = self.fc2.forward(ctx, x)?;
        ctx.tape.reshape(x, &hs)
    }
}

/// Stacks `n_d` node-embedding matrices `[n, d]` along time, pools over
/// time per node, then over nodes, giving `[d]`.
pub fn temporal_graph_readout(ctx: &mut Ctx, z: &[Var], spec: PoolSpec) -> Result<Var> {
    let first = *z.first().ok_or_else(|| contract_err!("readout of an empty graph sequence"))?;
    let s = ctx.tape.shape(first).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("readout expects [n, d], got {:?}", s));
    }
    let (n, d) = (s[0], s[1]);
    let rows = z
        .iter()
        .map(|&zt| ctx.tape.reshape(zt, &[1, n * d]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = ctx.tape.concat_rows(&rows)?;
    let per_node = ctx.tape.reduce_rows(stacked, spec.temporal_pool.into())?;
    let per_node = ctx.tape.reshape(per_node, &[n, d])?;
    ctx.tape.reduce_rows(per_node, spec.graph_pool.into())
}

/// Affine head from `[d]` to `[c]` logits.
pub fn classify(ctx: &mut Ctx, pooled: Var, head: &Linear) -> Result<Var> {
    let d = ctx.tape.shape(pooled).to_vec();
    if d != [head.fan_in] {
        return Err(shape_err!("head expects [{}], got {:?}", head.fan_in, d));
    }
    let x = ctx.tape.reshape(pooled, &[1, head.fan_in])?;
    let y = head.forward(ctx, x)?;
    ctx.tape.reshape(y, &[head.fan_out])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_model;
    use crate::params::init;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn identity_gin(d: usize) -> (ParamStore, GinLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gin = GinLayer::new(&mut store, &mut rng, "gin", d, 0.0);
        *store.get_mut(gin.fc1.w) = Tensor::eye(d);
        *store.get_mut(gin.fc2.w) = Tensor::eye(d);
        *store.get_mut(gin.fc1.b) = Tensor::zeros(&[d]);
        *store.get_mut(gin.fc2.b) = Tensor::zeros(&[d]);
        (store, gin)
    }

    fn run_gin(store: &ParamStore, gin: &GinLayer, h: Tensor, w: Tensor) -> Tensor {
        let mut ctx = Ctx::new(store, false, false, 0);
        let h = ctx.tape.constant(h);
        let w = ctx.tape.constant(w);
        let y = gin.forward(&mut ctx, h, w).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn gin_identity_examples() {
        let (store, gin) = identity_gin(1);
        let h = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(run_gin(&store, &gin, h.clone(), Tensor::zeros(&[2, 2])).data(), h.data());
        let w = Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap();
        assert_eq!(run_gin(&store, &gin, h, w).data(), &[3.0, 3.0]);
    }

    #[test]
    fn gin_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gin = GinLayer::new(&mut store, &mut rng, "gin", 4, 0.0);
        *store.get_mut(gin.eps) = Tensor::scalar(0.3);
        for _ in 0..20 {
            let n = 5;
            let h = init::normal(&mut rng, 1.0, &[n, 4]);
            let w = init::normal(&mut rng, 1.0, &[n, n]);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let ph = Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let pw = Tensor::from_rows(
                &perm.iter().map(|&i| perm.iter().map(|&j| w.at2(i, j)).collect()).collect::<Vec<_>>(),
            )
            .unwrap();
            let y = run_gin(&store, &gin, h, w);
            let py = run_gin(&store, &gin, ph, pw);
            for (k, &i) in perm.iter().enumerate() {
                for (a, b) in py.row(k).iter().zip(y.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gin_sequence_matches_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let gin = GinLayer::new(&mut store, &mut rng, "gin", 3, 0.0);
        let seq = init::normal(&mut rng, 1.0, &[4, 5, 3]);
        let w = init::normal(&mut rng, 1.0, &[4, 4]);
        let mut ctx = Ctx::new(&store, false, false, 0);
        let hv = ctx.tape.constant(seq.clone());
        let wv = ctx.tape.constant(w.clone());
        let all = gin.forward(&mut ctx, hv, wv).unwrap();
        let all = ctx.tape.value(all).clone();
        for l in 0..5 {
            let step: Vec<Vec<f64>> = (0..4).map(|i| seq.data()[(i * 5 + l) * 3..(i * 5 + l + 1) * 3].to_vec()).collect();
            let y = run_gin(&store, &gin, Tensor::from_rows(&step).unwrap(), w.clone());
            for i in 0..4 {
                for c in 0..3 {
                    assert!((y.at2(i, c) - all.data()[(i * 5 + l) * 3 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gin_shape_mismatch() {
        let (store, gin) = identity_gin(2);
        let mut ctx = Ctx::new(&store, false, false, 0);
        let h = ctx.tape.constant(Tensor::zeros(&[3, 2]));
        let w = ctx.tape.constant(Tensor::zeros(&[2, 2]));
        assert!(gin.forward(&mut ctx, h, w).is_err());
    }

    fn readout(z: &[Tensor], spec: PoolSpec) -> Result<Vec<f64>> {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false, false, 0);
        let vars: Vec<Var> = z.iter().map(|t| ctx.tape.constant(t.clone())).collect();
        let r = temporal_graph_readout(&mut ctx, &vars, spec)?;
        Ok(ctx.tape.value(r).data().to_vec())
    }

    #[test]
    fn readout_examples() {
        let z1 = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(readout(&[z1.clone()], PoolSpec::default()).unwrap(), vec![2.0, 3.0]);
        let same = readout(&[z1.clone(), z1.clone(), z1.clone()], PoolSpec::default()).unwrap();
        assert_eq!(same, vec![2.0, 3.0]);
        let max = PoolSpec { graph_pool: GraphPool::Max, temporal_pool: TemporalPool::Mean };
        let dom = Tensor::new(vec![3, 2], vec![0., 1., 9., 8., -1., 0.5]).unwrap();
        assert_eq!(readout(&[dom], max).unwrap(), vec![9.0, 8.0]);
        let tmax = PoolSpec { graph_pool: GraphPool::Sum, temporal_pool: TemporalPool::Max };
        let z2 = Tensor::new(vec![2, 2], vec![0., 5., 0., 0.]).unwrap();
        assert_eq!(readout(&[z1, z2], tmax).unwrap(), vec![4.0, 9.0]);
        assert!(readout(&[], PoolSpec::default()).is_err());
    }

    #[test]
    fn graph_pool_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for gp in [GraphPool::Mean, GraphPool::Max, GraphPool::Sum] {
            let spec = PoolSpec { graph_pool: gp, temporal_pool: TemporalPool::Max };
            let z: Vec<Tensor> = (0..3).map(|_| init::normal(&mut rng, 1.0, &[4, 3])).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let pz: Vec<Tensor> = z
                .iter()
                .map(|t| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap())
                .collect();
            let a = readout(&z, spec).unwrap();
            let b = readout(&pz, spec).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, &mut rng, "head", 2, 2);
        *store.get_mut(head.w) = Tensor::zeros(&[2, 2]);
        *store.get_mut(head.b) = Tensor::vector(vec![0.5, -0.25]);
        let mut ctx = Ctx::new(&store, false, false, 0);
        let x = ctx.tape.constant(Tensor::vector(vec![3.0, 7.0]));
        let y = classify(&mut ctx, x, &head).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[0.5, -0.25]);

        *store.get_mut(head.w) = Tensor::eye(2);
        *store.get_mut(head.b) = Tensor::zeros(&[2]);
        let mut ctx = Ctx::new(&store, false, false, 0);
        let x = ctx.tape.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = classify(&mut ctx, x, &head).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn classify_bce_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, &mut rng, "head", 3, 1);
        let x = init::normal(&mut rng, 1.0, &[3]);
        let r = gradcheck_model(&store, &[x], 1e-5, |ctx, v| {
            let logit = classify(ctx, v[0], &head)?;
            crate::loss::bce_with_logits(&mut ctx.tape, logit, &[1.0])
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn gin_readout_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gin = GinLayer::new(&mut store, &mut rng, "gin", 3, 0.0);
        let head = Linear::new(&mut store, &mut rng, "head", 3, 1);
        let h = init::normal(&mut rng, 1.0, &[4, 3]);
        let w = init::normal(&mut rng, 0.5, &[4, 4]);
        let r = gradcheck_model(&store, &[h, w], 1e-5, |ctx, v| {
            let z = gin.forward(ctx, v[0], v[1])?;
            let p = temporal_graph_readout(ctx, &[z, v[0]], PoolSpec::default())?;
            let logit = classify(ctx, p, &head)?;
            Ok(ctx.tape.sum(logit))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    }
}

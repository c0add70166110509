//! Full model: per-sensor sequence encoder, dynamic graph learning, GIN,
//! pooling and linear head, plus the total loss, profiling and checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::data::{Label, SignalRecord};
use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::gin::{classify, temporal_graph_readout, GinLayer, GraphPool, PoolSpec, TemporalPool};
use crate::gru::GruStack;
use crate::gsl::{interval_mean_pool, knn_graph_cosine, reg_loss_total, DynamicGraphSet, GslConfig, GslLayer, RegWeights};
use crate::loss::{bce_with_logits, sigmoid, softmax_ce};
use crate::params::{Ctx, Linear, ParamStore};
use crate::s4::{S4Config, S4Stack, DEFAULT_DT_MAX, DEFAULT_DT_MIN};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// One logit with a sigmoid link.
    Binary,
    /// `n_classes` logits with a softmax link.
    Multiclass,
    /// `n_classes` independent sigmoid logits.
    Multilabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    S4,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Encoder, then graph learning and GNN on the pooled embeddings.
    Standard,
    /// Graph learning and GNN on projected raw signals, then the encoder.
    GraphFirst,
}

/// Graph used in place of graph learning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedGraph {
    /// Self-loops only.
    Identity,
    /// Binary KNN graph by cosine similarity of each record's raw signals.
    KnnRaw,
    /// Row-major `n x n` adjacency.
    Supplied(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphS4merConfig {
    pub n_sensors: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub s4_depth: usize,
    pub state_size: usize,
    pub bidirectional: bool,
    pub dt_min: f64,
    pub dt_max: f64,
    pub dropout: f64,
    pub encoder: EncoderKind,
    pub gru_depth: usize,
    pub gsl: GslConfig,
    pub reg: RegWeights,
    pub pool: PoolSpec,
    pub gnn_layers: usize,
    pub n_classes: usize,
    pub task: Task,
    pub use_gsl: bool,
    pub use_gnn: bool,
    pub fixed_graph: FixedGraph,
    pub architecture: Architecture,
}

impl Default for GraphS4merConfig {
    fn default() -> Self {
        Self {
            n_sensors: 19,
            input_dim: 1,
            d_model: 128,
            s4_depth: 4,
            state_size: 64,
            bidirectional: false,
            dt_min: DEFAULT_DT_MIN,
            dt_max: DEFAULT_DT_MAX,
            dropout: 0.1,
            encoder: EncoderKind::S4,
            gru_depth: 2,
            gsl: GslConfig::default(),
            reg: RegWeights::uniform(0.05),
            pool: PoolSpec::default(),
            gnn_layers: 1,
            n_classes: 1,
            task: Task::Binary,
            use_gsl: true,
            use_gnn: true,
            fixed_graph: FixedGraph::Identity,
            architecture: Architecture::Standard,
        }
    }
}

pub const PRESETS: &[&str] = &["desk", "tusz-like", "dodh-like", "icbeb-like"];

impl GraphS4merConfig {
    /// Named configurations: `desk` is a tiny model for checks; the other
    /// three follow the published per-dataset hyperparameters.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "desk" => Self {
                n_sensors: 3,
                d_model: 8,
                s4_depth: 2,
                state_size: 4,
                dt_min: 0.05,
                dt_max: 0.5,
                dropout: 0.0,
                gsl: GslConfig { resolution: Some(8), knn_k: 2, epsilon: 0.6, kappa: 0.1, heads: 1 },
                ..base
            },
            "tusz-like" => Self {
                gsl: GslConfig { resolution: Some(2000), knn_k: 2, epsilon: 0.6, kappa: 0.1, heads: 1 },
                pool: PoolSpec { graph_pool: GraphPool::Max, temporal_pool: TemporalPool::Mean },
                ..base
            },
            "dodh-like" => Self {
                n_sensors: 16,
                dropout: 0.4,
                gsl: GslConfig { resolution: Some(2500), knn_k: 3, epsilon: 0.6, kappa: 0.1, heads: 1 },
                reg: RegWeights::uniform(0.2),
                pool: PoolSpec { graph_pool: GraphPool::Sum, temporal_pool: TemporalPool::Mean },
                n_classes: 5,
                task: Task::Multiclass,
                ..base
            },
            "icbeb-like" => Self {
                n_sensors: 12,
                bidirectional: true,
                gsl: GslConfig { resolution: None, knn_k: 2, epsilon: 0.6, kappa: 0.02, heads: 1 },
                reg: RegWeights { alpha: 1.0, beta: 0.0, gamma: 0.5 },
                n_classes: 9,
                task: Task::Multilabel,
                ..base
            },
            other => return Err(config_err!("unknown preset {other:?}; expected one of {PRESETS:?}")),
        };
        Ok(cfg)
    }

    pub fn s4_config(&self) -> S4Config {
        S4Config {
            d_model: self.d_model,
            depth: self.s4_depth,
            state_size: self.state_size,
            bidirectional: self.bidirectional,
            dropout: self.dropout,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sensors;
        if n < 2 {
            return Err(config_err!("n_sensors must be at least 2"));
        }
        if self.input_dim == 0 || self.d_model == 0 || self.state_size == 0 {
            return Err(config_err!("input_dim, d_model and state_size must be positive"));
        }
        if self.s4_depth == 0 || self.gru_depth == 0 {
            return Err(config_err!("encoder depth must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max && self.dt_max.is_finite()) {
            return Err(config_err!("need 0 < dt_min <= dt_max"));
        }
        if !(1..=2).contains(&self.gnn_layers) {
            return Err(config_err!("gnn_layers must be 1 or 2"));
        }
        self.gsl.validate(n, self.d_model)?;
        self.reg.validate()?;
        match self.task {
            Task::Binary if self.n_classes != 1 => {
                return Err(config_err!("binary task uses n_classes = 1, got {}", self.n_classes))
            }
            Task::Multiclass if self.n_classes < 2 => return Err(config_err!("multiclass needs n_classes >= 2")),
            Task::Multilabel if self.n_classes < 1 => return Err(config_err!("multilabel needs n_classes >= 1")),
            _ => {}
        }
        if let FixedGraph::Supplied(rows) = &self.fixed_graph {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(config_err!("supplied graph must be {n} x {n}"));
            }
            if rows.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(config_err!("supplied graph entries must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

enum Encoder {
    S4(S4Stack),
    Gru(GruStack),
}

impl Encoder {
    fn encode(&self, ctx: &mut Ctx, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        match self {
            Encoder::S4(s) => s.encode(ctx, x, mask),
            Encoder::Gru(g) => g.encode(ctx, x, mask),
        }
    }
}

/// Graph of the forward pass for one record.
pub struct Forward {
    pub logits: Var,
    /// One adjacency per interval.
    pub graphs: Vec<Var>,
    /// Regularizer averaged over intervals, absent when graphs are fixed or weights are zero.
    pub reg: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub graphs: DynamicGraphSet,
    pub reg_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Profile {
    pub total_params: usize,
    pub gsl_params: usize,
    pub n_d: usize,
    /// Projection MACs `2 N D^2` per graph, counted over a reference batch of
    /// [`MAC_REFERENCE_BATCH`] records.
    pub gsl_macs: u64,
    /// Per record: projections plus attention scores `N^2 D` per graph.
    pub gsl_macs_per_record: u64,
}

pub const MAC_REFERENCE_BATCH: u64 = 32;

pub fn gsl_param_count(d: usize) -> usize {
    2 * d * d
}

pub fn gsl_macs(n: usize, d: usize, n_d: usize) -> u64 {
    n_d as u64 * MAC_REFERENCE_BATCH * 2 * (n * d * d) as u64
}

pub struct GraphS4mer {
    pub cfg: GraphS4merConfig,
    pub store: ParamStore,
    encoder: Encoder,
    raw_in: Option<Linear>,
    gsl: Option<GslLayer>,
    gnn: Vec<GinLayer>,
    head: Linear,
}

impl GraphS4mer {
    pub fn new(cfg: GraphS4merConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let raw_in = (cfg.architecture == Architecture::GraphFirst)
            .then(|| Linear::new(&mut store, &mut rng, "raw_in", cfg.input_dim, d));
        let enc_in = if raw_in.is_some() { d } else { cfg.input_dim };
        let encoder = match cfg.encoder {
            EncoderKind::S4 => Encoder::S4(S4Stack::new(&mut store, &mut rng, enc_in, &cfg.s4_config())),
            EncoderKind::Gru => Encoder::Gru(GruStack::new(&mut store, &mut rng, enc_in, d, cfg.gru_depth)),
        };
        let gsl = cfg.use_gsl.then(|| GslLayer::new(&mut store, &mut rng, cfg.gsl.clone(), d));
        let gnn = if cfg.use_gnn {
            (0..cfg.gnn_layers)
                .map(|i| GinLayer::new(&mut store, &mut rng, &format!("gnn{i}"), d, cfg.dropout))
                .collect()
        } else {
            Vec::new()
        };
        let head = Linear::new(&mut store, &mut rng, "head", d, cfg.n_classes);
        Ok(Self { cfg, store, encoder, raw_in, gsl, gnn, head })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// `(interval length, interval count)` for a record.
    pub fn intervals(&self, rec: &SignalRecord) -> Result<(usize, usize)> {
        let (_, t, _) = rec.dims();
        self.cfg.gsl.intervals(t, rec.true_length)
    }

    fn fixed_adjacency(&self, rec: &SignalRecord) -> Result<Tensor> {
        let n = self.cfg.n_sensors;
        match &self.cfg.fixed_graph {
            FixedGraph::Identity => Ok(Tensor::eye(n)),
            FixedGraph::Supplied(rows) => Tensor::from_rows(rows),
            FixedGraph::KnnRaw => {
                let (_, t, m) = rec.dims();
                let len = rec.true_length * m;
                let rows: Vec<Vec<f64>> = (0..n).map(|i| rec.x.data()[i * t * m..i * t * m + len].to_vec()).collect();
                knn_graph_cosine(&Tensor::from_rows(&rows)?, self.cfg.gsl.knn_k)
            }
        }
    }

    fn graphs_for(&self, ctx: &mut Ctx, pooled: &[Var], rec: &SignalRecord) -> Result<(Vec<Var>, Option<Var>)> {
        match &self.gsl {
            Some(gsl) => {
                let graphs = pooled
                    .iter()
                    .map(|&h| gsl.forward(ctx, h).map(|g| g.w))
                    .collect::<Result<Vec<_>>>()?;
                let reg = if self.cfg.reg.is_zero() {
                    None
                } else {
                    Some(reg_loss_total(&mut ctx.tape, &graphs, pooled, self.cfg.reg)?)
                };
                Ok((graphs, reg))
            }
            None => {
                let w = ctx.tape.constant(self.fixed_adjacency(rec)?);
                Ok((vec![w; pooled.len()], None))
            }
        }
    }

    fn gnn_apply(&self, ctx: &mut Ctx, h: Var, w: Var) -> Result<Var> {
        self.gnn.iter().try_fold(h, |h, layer| layer.forward(ctx, h, w))
    }

    /// Builds the forward graph for `rec` on `ctx`'s tape.
    pub fn forward(&self, ctx: &mut Ctx, rec: &SignalRecord) -> Result<Forward> {
        let (n, t_len, m) = rec.dims();
        if n != self.cfg.n_sensors || m != self.cfg.input_dim {
            return Err(shape_err!(
                "record {} is [{n}, {t_len}, {m}], model expects [{}, _, {}]",
                rec.id,
                self.cfg.n_sensors,
                self.cfg.input_dim
            ));
        }
        let (r, n_d) = self.intervals(rec)?;
        let mask_vec = rec.mask();
        let mask = rec.is_padded().then_some(mask_vec.as_slice());
        let x = ctx.tape.constant(rec.x.clone());
        match self.cfg.architecture {
            Architecture::Standard => {
                let h = self.encoder.encode(ctx, x, mask)?;
                let pooled = interval_mean_pool(&mut ctx.tape, h, r, n_d, mask)?;
                let (graphs, reg) = self.graphs_for(ctx, &pooled, rec)?;
                let z = pooled
                    .iter()
                    .zip(&graphs)
                    .map(|(&h, &w)| self.gnn_apply(ctx, h, w))
                    .collect::<Result<Vec<_>>>()?;
                let readout = temporal_graph_readout(ctx, &z, self.cfg.pool)?;
                let logits = classify(ctx, readout, &self.head)?;
                Ok(Forward { logits, graphs, reg })
            }
            Architecture::GraphFirst => {
                let raw_in = self.raw_in.as_ref().expect("graph-first model has an input projection");
                let d = self.cfg.d_model;
                let flat = ctx.tape.reshape(x, &[n * t_len, m])?;
                let p = raw_in.forward(ctx, flat)?;
                let p = ctx.tape.reshape(p, &[n, t_len, d])?;
                let p = match mask {
                    Some(mk) => ctx.tape.mul_const(p, crate::s4::expand_mask(mk, n, d))?,
                    None => p,
                };
                let pooled = interval_mean_pool(&mut ctx.tape, p, r, n_d, mask)?;
                let (graphs, reg) = self.graphs_for(ctx, &pooled, rec)?;
                let mut parts = Vec::with_capacity(n_d);
                for (iv, &w) in graphs.iter().enumerate() {
                    let seg = slice_time(&mut ctx.tape, p, iv * r, r)?;
                    parts.push(self.gnn_apply(ctx, seg, w)?);
                }
                let y = concat_time(&mut ctx.tape, &parts)?;
                let span = n_d * r;
                let inner_mask = if span == t_len { mask } else { None };
                let h = self.encoder.encode(ctx, y, inner_mask)?;
                let pooled = interval_mean_pool(&mut ctx.tape, h, r, n_d, inner_mask)?;
                let readout = temporal_graph_readout(ctx, &pooled, self.cfg.pool)?;
                let logits = classify(ctx, readout, &self.head)?;
                Ok(Forward { logits, graphs, reg })
            }
        }
    }

    /// Prediction loss plus the interval-averaged graph regularizer.
    pub fn total_loss(&self, tape: &mut Tape, fwd: &Forward, label: &Label) -> Result<Var> {
        let pred = self.prediction_loss(tape, fwd.logits, label)?;
        match fwd.reg {
            Some(reg) => tape.add(pred, reg),
            None => Ok(pred),
        }
    }

    pub fn prediction_loss(&self, tape: &mut Tape, logits: Var, label: &Label) -> Result<Var> {
        let c = self.cfg.n_classes;
        match (self.cfg.task, label) {
            (Task::Binary, Label::Class(y)) if *y <= 1 => bce_with_logits(tape, logits, &[*y as f64]),
            (Task::Multiclass, Label::Class(y)) if *y < c => softmax_ce(tape, logits, *y),
            (Task::Multilabel, Label::Multi(bits)) if bits.len() == c => {
                let t: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
                bce_with_logits(tape, logits, &t)
            }
            (task, label) => Err(contract_err!("label {label:?} does not fit a {task:?} task with {c} classes")),
        }
    }

    /// Inference without gradient tracking or dropout.
    pub fn predict(&self, rec: &SignalRecord) -> Result<ModelOutput> {
        let mut ctx = Ctx::new(&self.store, false, false, 0);
        let fwd = self.forward(&mut ctx, rec)?;
        let logits = ctx.tape.value(fwd.logits).clone();
        if !logits.is_finite() {
            return Err(Error::Numeric(format!("non-finite logits for record {}", rec.id)));
        }
        let adjacency = fwd.graphs.iter().map(|&w| ctx.tape.value(w).clone()).collect();
        let reg_loss = fwd.reg.map_or(0.0, |r| ctx.tape.value(r).data()[0]);
        Ok(ModelOutput { logits, graphs: DynamicGraphSet { adjacency }, reg_loss })
    }

    /// Total loss and parameter gradients (store order) for one record.
    pub fn loss_and_grads(&self, rec: &SignalRecord, train: bool, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut ctx = Ctx::new(&self.store, true, train, seed);
        let fwd = self.forward(&mut ctx, rec)?;
        let loss = self.total_loss(&mut ctx.tape, &fwd, &rec.label)?;
        let value = ctx.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for record {}", rec.id)));
        }
        let grads = ctx.tape.backward(loss)?;
        Ok((value, ctx.param_grads(&grads, &self.store)))
    }

    /// Evaluation-mode total loss for one record.
    pub fn eval_loss(&self, rec: &SignalRecord) -> Result<(f64, Tensor)> {
        let mut ctx = Ctx::new(&self.store, false, false, 0);
        let fwd = self.forward(&mut ctx, rec)?;
        let loss = self.total_loss(&mut ctx.tape, &fwd, &rec.label)?;
        let value = ctx.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss for record {}", rec.id)));
        }
        Ok((value, ctx.tape.value(fwd.logits).clone()))
    }

    /// Probabilities from logits: sigmoid per output, or softmax for multiclass.
    pub fn scores(&self, logits: &Tensor) -> Vec<f64> {
        match self.cfg.task {
            Task::Binary | Task::Multilabel => logits.data().iter().map(|&z| sigmoid(z)).collect(),
            Task::Multiclass => {
                let mut p = logits.data().to_vec();
                crate::autodiff::softmax_in_place(&mut p);
                p
            }
        }
    }

    pub fn profile(&self, n_d: usize) -> Profile {
        let (n, d) = (self.cfg.n_sensors, self.cfg.d_model);
        let (gsl_params, macs, per_record) = if self.cfg.use_gsl {
            let per = n_d as u64 * (2 * n * d * d + n * n * d) as u64;
            (gsl_param_count(d), gsl_macs(n, d, n_d), per)
        } else {
            (0, 0, 0)
        };
        Profile { total_params: self.param_count(), gsl_params, n_d, gsl_macs: macs, gsl_macs_per_record: per_record }
    }

    /// Rounds every parameter to single precision, the checkpoint precision.
    pub fn round_params_f32(&mut self) {
        for t in self.store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.cfg)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &s in t.shape() {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if buf.len() - pos < n {
                return Err(Error::Parse { offset: pos, msg: format!("truncated checkpoint while reading {what}") });
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad magic, expected GS4M".into() });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_at(take(4, "version")?);
        if version != CKPT_VERSION as usize {
            return Err(Error::Parse { offset: 4, msg: format!("unsupported checkpoint version {version}") });
        }
        let json_len = u32_at(take(4, "config length")?);
        let cfg: GraphS4merConfig = serde_json::from_slice(take(json_len, "config")?)?;
        let count = u32_at(take(4, "parameter count")?);
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u32_at(take(4, "name length")?);
            let name = String::from_utf8(take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Parse { offset: 0, msg: "parameter name is not UTF-8".into() })?;
            let ndim = u32_at(take(4, "rank")?);
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(u32_at(take(4, "dim")?));
            }
            let numel: usize = shape.iter().product();
            let data = take(numel * 4, "values")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if pos != buf.len() {
            return Err(Error::Parse { offset: pos, msg: "trailing bytes in checkpoint".into() });
        }
        let mut model = Self::new(cfg, 0)?;
        model.store.load_named(&entries)?;
        Ok(model)
    }
}

/// Finite-difference check of the total loss against every parameter of the
/// desk model on a random `[3, 16, 1]` record; `seed` drives both.
pub fn desk_gradcheck(seed: u64, h: f64) -> Result<(GraphS4mer, crate::gradcheck::GradCheckReport)> {
    let model = GraphS4mer::new(GraphS4merConfig::preset("desk")?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let x = crate::params::init::normal(&mut rng, 1.0, &[3, 16, 1]);
    let rec = SignalRecord::new("gradcheck", x, Label::Class((seed % 2) as usize), 16)?;
    let report = crate::gradcheck::gradcheck_model(&model.store, &[], h, |ctx, _| {
        let fwd = model.forward(ctx, &rec)?;
        model.total_loss(&mut ctx.tape, &fwd, &rec.label)
    })?;
    Ok((model, report))
}

const CKPT_MAGIC: &[u8; 4] = b"GS4M";
const CKPT_VERSION: u32 = 1;

struct SliceTimeOp {
    dims: (usize, usize, usize),
    start: usize,
    len: usize,
}

impl CustomOp for SliceTimeOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, t, d) = self.dims;
        let mut out = vec![0.0; n * t * d];
        for i in 0..n {
            let dst = (i * t + self.start) * d;
            out[dst..dst + self.len * d].copy_from_slice(&g[i * self.len * d..(i + 1) * self.len * d]);
        }
        vec![Some(out)]
    }
}

/// Steps `start..start+len` of a `[n, t, d]` tensor.
fn slice_time(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || start + len > s[1] || len == 0 {
        return Err(shape_err!("slice {start}..{} of {:?}", start + len, s));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    let src = tape.value(x).data();
    let mut out = Vec::with_capacity(n * len * d);
    for i in 0..n {
        out.extend_from_slice(&src[(i * t + start) * d..(i * t + start + len) * d]);
    }
    let op = SliceTimeOp { dims: (n, t, d), start, len };
    Ok(tape.custom(&[x], Tensor::from_parts(vec![n, len, d], out), op))
}

struct ConcatTimeOp {
    lens: Vec<usize>,
    n: usize,
    d: usize,
}

impl CustomOp for ConcatTimeOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.lens.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.lens.len());
        for &l in &self.lens {
            let mut gi = Vec::with_capacity(self.n * l * self.d);
            for i in 0..self.n {
                let src = (i * total + offset) * self.d;
                gi.extend_from_slice(&g[src..src + l * self.d]);
            }
            grads.push(Some(gi));
            offset += l;
        }
        grads
    }
}

/// Concatenates `[n, t_k, d]` tensors along time.
fn concat_time(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let first = tape.shape(*parts.first().ok_or_else(|| contract_err!("concat of nothing"))?).to_vec();
    if first.len() != 3 {
        return Err(shape_err!("concat_time expects [n, t, d], got {:?}", first));
    }
    let (n, d) = (first[0], first[2]);
    let mut lens = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = tape.shape(p);
        if s.len() != 3 || s[0] != n || s[2] != d {
            return Err(shape_err!("concat_time: {:?} vs [{n}, _, {d}]", s));
        }
        lens.push(s[1]);
    }
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(n * total * d);
    for i in 0..n {
        for (&p, &l) in parts.iter().zip(&lens) {
            out.extend_from_slice(&tape.value(p).data()[i * l * d..(i + 1) * l * d]);
        }
    }
    Ok(tape.custom(parts, Tensor::from_parts(vec![n, total, d], out), ConcatTimeOp { lens, n, d }))
}

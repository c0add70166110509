//! WebAssembly bindings for the static page in `www/`.

use graphs4mer::data::{generate, DatasetSpec, GeneratorKind, SignalRecord};
use graphs4mer::gsl::{attention_adjacency, finalize_adjacency, knn_graph_cosine};
use graphs4mer::s4::{materialize_kernel, ssm_scan_recurrent, SsmCore};
use graphs4mer::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: graphs4mer::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Kernel of one S4D-Lin core and the gap between its convolution and the
/// recurrent scan on a random input.
#[wasm_bindgen]
pub struct KernelView {
    kernel: Vec<f64>,
    max_diff: f64,
}

#[wasm_bindgen]
impl KernelView {
    #[wasm_bindgen(getter)]
    pub fn kernel(&self) -> Vec<f64> {
        self.kernel.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn max_diff(&self) -> f64 {
        self.max_diff
    }
}

pub fn kernel_view(state: usize, dt: f64, len: usize, seed: u64) -> Result<KernelView> {
    if !(dt > 0.0 && dt.is_finite()) || state == 0 {
        return Err(graphs4mer::Error::Config("dt must be positive and state at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut core = SsmCore::s4d_lin(&mut rng, state, dt, dt);
    core.log_dt = dt.ln();
    let k = materialize_kernel(&core, len)?;
    let u: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let conv = graphs4mer::fft::causal_conv(&u, k.data())?;
    let scan = ssm_scan_recurrent(&core, &Tensor::vector(u))?;
    let max_diff = conv.iter().zip(scan.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(KernelView { kernel: k.into_data(), max_diff })
}

#[wasm_bindgen]
pub fn ssm_kernel(state: u32, dt: f64, len: u32, seed: u32) -> std::result::Result<KernelView, JsError> {
    kernel_view(state as usize, dt, len as usize, seed as u64).map_err(js)
}

/// One synthetic record.
#[wasm_bindgen]
pub struct Sample {
    rec: SignalRecord,
}

impl Sample {
    /// First record of class `label` from a small generated batch.
    pub fn new(kind: &str, seed: u64, label: usize, seq_len: usize) -> Result<Self> {
        let kind = match kind {
            "correlation" => GeneratorKind::Correlation,
            "long-range" => GeneratorKind::LongRange,
            other => return Err(graphs4mer::Error::Config(format!("unknown generator {other:?}"))),
        };
        let spec = DatasetSpec { kind, seq_len, size: 16, seed, ..Default::default() };
        let ds = generate(&spec)?;
        let rec = ds
            .records
            .into_iter()
            .find(|r| r.label.class() == Some(label))
            .ok_or_else(|| graphs4mer::Error::Config(format!("no record of class {label}")))?;
        Ok(Self { rec })
    }

    pub fn record(&self) -> &SignalRecord {
        &self.rec
    }

    /// Finalized adjacency for interval `interval` of length `r`. Node
    /// features are the z-scored samples, so cosine similarity is the
    /// sample correlation and the attention logits are `beta` times it.
    pub fn graph(&self, interval: usize, r: usize, beta: f64, epsilon: f64, kappa: f64, k: usize) -> Result<Tensor> {
        let (n, t_len, _) = self.rec.dims();
        if r < 2 || (interval + 1) * r > t_len {
            return Err(graphs4mer::Error::Config(format!("interval {interval} of length {r} exceeds {t_len} steps")));
        }
        let mut feats = Vec::with_capacity(n * r);
        for i in 0..n {
            let seg: Vec<f64> = (interval * r..(interval + 1) * r).map(|t| self.rec.at(i, t, 0)).collect();
            let mean = seg.iter().sum::<f64>() / r as f64;
            let norm = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt().max(1e-12);
            feats.extend(seg.iter().map(|v| (v - mean) / norm));
        }
        let h = Tensor::matrix(n, r, feats)?;
        let knn = knn_graph_cosine(&h, k)?;
        let mut tape = Tape::new();
        let scale = (beta.max(0.0) * (r as f64).sqrt()).sqrt();
        let proj = Tensor::new(vec![r, r], Tensor::eye(r).data().iter().map(|v| v * scale).collect())?;
        let hv = tape.constant(h);
        let mq = tape.constant(proj.clone());
        let mk = tape.constant(proj);
        let att = attention_adjacency(&mut tape, hv, mq, mk, 1)?;
        let w = finalize_adjacency(&mut tape, att, &knn, epsilon, kappa)?;
        Ok(tape.value(w).clone())
    }
}

#[wasm_bindgen]
impl Sample {
    #[wasm_bindgen(constructor)]
    pub fn generate(kind: &str, seed: u32, label: u32, seq_len: u32) -> std::result::Result<Sample, JsError> {
        Sample::new(kind, seed as u64, label as usize, seq_len as usize).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn n_sensors(&self) -> u32 {
        self.rec.dims().0 as u32
    }

    #[wasm_bindgen(getter)]
    pub fn seq_len(&self) -> u32 {
        self.rec.dims().1 as u32
    }

    pub fn channel(&self, i: u32) -> Vec<f64> {
        let (n, t_len, _) = self.rec.dims();
        let i = (i as usize).min(n - 1);
        (0..t_len).map(|t| self.rec.at(i, t, 0)).collect()
    }

    /// Row-major `n x n` adjacency.
    pub fn adjacency(
        &self,
        interval: u32,
        r: u32,
        beta: f64,
        epsilon: f64,
        kappa: f64,
        k: u32,
    ) -> std::result::Result<Vec<f64>, JsError> {
        self.graph(interval as usize, r as usize, beta, epsilon, kappa, k as usize)
            .map(Tensor::into_data)
            .map_err(js)
    }
}

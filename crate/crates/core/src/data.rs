//! Signal records, synthetic task generators, file formats, and splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Multi(_) => None,
        }
    }
}

/// One multivariate signal `x: [n, t_max, m]`; steps at or past
/// `true_length` are padding and hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub id: String,
    pub x: Tensor,
    pub label: Label,
    pub true_length: usize,
}

impl SignalRecord {
    pub fn new(id: impl Into<String>, x: Tensor, label: Label, true_length: usize) -> Result<Self> {
        let r = Self { id: id.into(), x, label, true_length };
        r.validate()?;
        Ok(r)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.x.shape();
        (s[0], s[1], s[2])
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.dims().1).map(|t| t < self.true_length).collect()
    }

    pub fn is_padded(&self) -> bool {
        self.true_length < self.dims().1
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.ndim() != 3 {
            return Err(contract_err!("record {}: x must be [n, t, m], got {:?}", self.id, self.x.shape()));
        }
        let (n, t, m) = self.dims();
        if self.true_length == 0 || self.true_length > t {
            return Err(contract_err!("record {}: true length {} outside 1..={t}", self.id, self.true_length));
        }
        for i in 0..n {
            let pad = &self.x.data()[(i * t + self.true_length) * m..(i + 1) * t * m];
            if pad.iter().any(|&v| v != 0.0) {
                return Err(contract_err!("record {}: nonzero value in padded region", self.id));
            }
        }
        if !self.x.is_finite() {
            return Err(contract_err!("record {}: non-finite sample", self.id));
        }
        Ok(())
    }

    /// Sample of sensor `i`, step `t`, feature `k`.
    pub fn at(&self, i: usize, t: usize, k: usize) -> f64 {
        let (_, tn, m) = self.dims();
        self.x.data()[(i * tn + t) * m + k]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<SignalRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Common `(n, t_max, m)` of every record.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.records.first().map(SignalRecord::dims)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(d) = self.dims() else { return Ok(()) };
        for r in &self.records {
            r.validate()?;
            if r.dims() != d {
                return Err(contract_err!("record {} has dims {:?}, dataset has {:?}", r.id, r.dims(), d));
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for c in self.records.iter().filter_map(|r| r.label.class()) {
            *m.entry(c).or_insert(0) += 1;
        }
        m
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { records: idx.iter().map(|&i| self.records[i].clone()).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Correlation,
    LongRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: GeneratorKind,
    pub n_sensors: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub size: usize,
    /// Fraction of records in class 1 (binary tasks); multiclass is uniform.
    pub positive_fraction: f64,
    /// AR(1) coefficient of the background noise.
    pub ar_coef: f64,
    /// Correlation task: sensors sharing the latent in class 1.
    pub clique: Vec<usize>,
    /// Correlation task: variance share of the common latent.
    pub rho: f64,
    /// Correlation task: standard deviation of the per-block log gain applied
    /// to each sensor. Clique sensors share one gain while mixed.
    pub gain_sigma: f64,
    /// Correlation task: steps per gain block.
    pub gain_block: usize,
    /// Long-range task: marker amplitude relative to unit-variance noise.
    pub marker_amplitude: f64,
    /// Long-range task: fraction of the record holding the marker.
    pub marker_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Correlation,
            n_sensors: 6,
            seq_len: 2048,
            input_dim: 1,
            n_classes: 2,
            seed: 0,
            size: 100,
            positive_fraction: 0.5,
            ar_coef: 0.7,
            clique: vec![0, 1, 2],
            rho: 0.9,
            gain_sigma: 0.5,
            gain_block: 256,
            marker_amplitude: 3.0,
            marker_fraction: 0.01,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(config_err!("n_classes must be at least 2"));
        }
        if self.input_dim == 0 || self.seq_len == 0 {
            return Err(config_err!("seq_len and input_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(config_err!("positive_fraction must be in [0, 1]"));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(config_err!("ar_coef must satisfy |ar_coef| < 1"));
        }
        match self.kind {
            GeneratorKind::Correlation => {
                if self.n_sensors < 3 {
                    return Err(config_err!("correlation task needs at least 3 sensors"));
                }
                if self.n_classes != 2 {
                    return Err(config_err!("correlation task is binary"));
                }
                if self.clique.len() < 2 || self.clique.iter().any(|&i| i >= self.n_sensors) {
                    return Err(config_err!("clique must name at least 2 valid sensors"));
                }
                if !(0.0..=1.0).contains(&self.rho) {
                    return Err(config_err!("rho must be in [0, 1]"));
                }
                if !(self.gain_sigma >= 0.0 && self.gain_sigma.is_finite()) || self.gain_block == 0 {
                    return Err(config_err!("gain_sigma must be finite and non-negative, gain_block positive"));
                }
            }
            GeneratorKind::LongRange => {
                if self.seq_len < 1024 {
                    return Err(config_err!("long-range task needs seq_len >= 1024"));
                }
                if self.n_sensors == 0 {
                    return Err(config_err!("n_sensors must be positive"));
                }
                if !(self.marker_fraction > 0.0 && self.marker_fraction <= 0.01) {
                    return Err(config_err!("marker_fraction must be in (0, 0.01]"));
                }
            }
        }
        Ok(())
    }

    /// Steps carrying the long-range marker.
    pub fn marker_len(&self) -> usize {
        ((self.seq_len as f64 * self.marker_fraction).floor() as usize).max(1)
    }

    fn labels(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut labels: Vec<usize> = if self.n_classes == 2 {
            let pos = (self.size as f64 * self.positive_fraction).round() as usize;
            (0..self.size).map(|i| usize::from(i < pos)).collect()
        } else {
            (0..self.size).map(|i| i % self.n_classes).collect()
        };
        labels.shuffle(rng);
        labels
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        GeneratorKind::Correlation => gen_correlation_task(spec),
        GeneratorKind::LongRange => gen_longrange_task(spec),
    }
}

/// Unit-variance stationary AR(1) sequence.
fn ar1(rng: &mut ChaCha8Rng, len: usize, phi: f64) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(len);
    let mut v: f64 = StandardNormal.sample(rng);
    for _ in 0..len {
        out.push(v);
        let w: f64 = StandardNormal.sample(rng);
        v = phi * v + innov * w;
    }
    out
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn record_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64 + 1);
    rng
}

/// Log-normal gains with unit mean square, one per block of `block` steps.
fn block_gains(rng: &mut ChaCha8Rng, len: usize, block: usize, sigma: f64) -> Vec<f64> {
    (0..len.div_ceil(block))
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (sigma * z - sigma * sigma).exp()
        })
        .collect()
}

/// Class 0: every sensor is independent AR(1) noise scaled by its own
/// blockwise gain. Class 1: during the second half of the record the clique
/// sensors mix in a shared latent and follow a shared gain.
pub fn gen_correlation_task(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, t_len, m) = (spec.n_sensors, spec.seq_len, spec.input_dim);
    let labels = spec.labels(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let (half, blk) = (t_len / 2, spec.gain_block);
    let mut records = Vec::with_capacity(spec.size);
    for (idx, &y) in labels.iter().enumerate() {
        let mut rng = record_rng(spec.seed, idx);
        let mut x = vec![0.0; n * t_len * m];
        for k in 0..m {
            let latent = ar1(&mut rng, t_len, spec.ar_coef);
            let shared = block_gains(&mut rng, t_len, blk, spec.gain_sigma);
            for i in 0..n {
                let noise = ar1(&mut rng, t_len, spec.ar_coef);
                let own = block_gains(&mut rng, t_len, blk, spec.gain_sigma);
                let mixed = y == 1 && spec.clique.contains(&i);
                for t in 0..t_len {
                    let v = if mixed && t >= half {
                        shared[t / blk] * (a * latent[t] + b * noise[t])
                    } else {
                        own[t / blk] * noise[t]
                    };
                    x[(i * t_len + t) * m + k] = round_f32(v);
                }
            }
        }
        let x = Tensor::new(vec![n, t_len, m], x)?;
        records.push(SignalRecord::new(format!("corr{idx:05}"), x, Label::Class(y), t_len)?);
    }
    Ok(Dataset { records })
}

/// Angular frequency of the marker for class `c`: a period of `8 / (c + 1)` steps.
pub fn marker_frequency(c: usize) -> f64 {
    2.0 * std::f64::consts::PI * (c + 1) as f64 / 8.0
}

pub fn marker_value(c: usize, t: usize) -> f64 {
    (marker_frequency(c) * t as f64 + std::f64::consts::FRAC_PI_4).sin()
}

/// AR(1) noise on every sensor; the first `marker_len` steps add a
/// class-specific sinusoid. Nothing after the marker depends on the label.
pub fn gen_longrange_task(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, t_len, m) = (spec.n_sensors, spec.seq_len, spec.input_dim);
    let labels = spec.labels(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mlen = spec.marker_len();
    let mut records = Vec::with_capacity(spec.size);
    for (idx, &y) in labels.iter().enumerate() {
        let mut rng = record_rng(spec.seed, idx);
        let mut x = vec![0.0; n * t_len * m];
        for i in 0..n {
            for k in 0..m {
                let noise = ar1(&mut rng, t_len, spec.ar_coef);
                for t in 0..t_len {
                    let marker = if t < mlen { spec.marker_amplitude * marker_value(y, t) } else { 0.0 };
                    x[(i * t_len + t) * m + k] = round_f32(noise[t] + marker);
                }
            }
        }
        let x = Tensor::new(vec![n, t_len, m], x)?;
        records.push(SignalRecord::new(format!("long{idx:05}"), x, Label::Class(y), t_len)?);
    }
    Ok(Dataset { records })
}

/// Records per class split into train/val/test by the given fractions; each
/// class is shuffled independently so proportions hold within one record.
pub fn stratified_split(ds: &Dataset, val_frac: f64, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if !(val_frac >= 0.0 && test_frac >= 0.0 && val_frac + test_frac < 1.0) {
        return Err(config_err!("split fractions must be >= 0 and sum below 1"));
    }
    let mut strata: BTreeMap<&Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        strata.entry(&r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_te = (n * test_frac).round() as usize;
        let n_va = (n * val_frac).round() as usize;
        te.extend_from_slice(&idx[..n_te]);
        va.extend_from_slice(&idx[n_te..n_te + n_va]);
        tr.extend_from_slice(&idx[n_te + n_va..]);
    }
    for v in [&mut tr, &mut va, &mut te] {
        v.sort_unstable();
    }
    Ok((ds.subset(&tr), ds.subset(&va), ds.subset(&te)))
}

/// Drops random records of every larger class down to the smallest class
/// count. Multilabel records are returned unchanged.
pub fn undersample_majority(records: &[SignalRecord], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        match r.label.class() {
            Some(c) => by_class.entry(c).or_default().push(i),
            None => return (0..records.len()).collect(),
        }
    }
    let target = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut keep = Vec::new();
    for idx in by_class.values_mut() {
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..target]);
    }
    keep.sort_unstable();
    keep
}

const BSG_MAGIC: &[u8; 4] = b"BSG1";
const BSG_VERSION: u32 = 1;

pub fn to_bsg1(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BSG_MAGIC);
    out.extend_from_slice(&BSG_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for r in &ds.records {
        let (n, t, m) = r.dims();
        for v in [n, t, m, r.true_length, r.id.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(r.id.as_bytes());
        match &r.label {
            Label::Class(c) => {
                out.push(0);
                out.extend_from_slice(&(*c as u32).to_le_bytes());
            }
            Label::Multi(bits) => {
                out.push(1);
                out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
                out.extend(bits.iter().map(|&b| u8::from(b)));
            }
        }
        for &v in r.x.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bsg1(buf: &[u8]) -> Result<Dataset> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4, "magic")? != BSG_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, expected BSG1".into() });
    }
    let version = rd.u32("version")?;
    if version != BSG_VERSION {
        return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = rd.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = rd.pos;
        let n = rd.u32("n")? as usize;
        let t = rd.u32("t")? as usize;
        let m = rd.u32("m")? as usize;
        let true_len = rd.u32("true length")? as usize;
        let id_len = rd.u32("id length")? as usize;
        let id = std::str::from_utf8(rd.take(id_len, "record id")?)
            .map_err(|_| rd.err("record id is not UTF-8"))?
            .to_string();
        let label = match rd.take(1, "label kind")?[0] {
            0 => Label::Class(rd.u32("class label")? as usize),
            1 => {
                let c = rd.u32("label width")? as usize;
                let bits = rd.take(c, "label bits")?;
                Label::Multi(bits.iter().map(|&b| b != 0).collect())
            }
            k => return Err(Error::Parse { offset: rd.pos - 1, msg: format!("unknown label kind {k}") }),
        };
        let numel = n
            .checked_mul(t)
            .and_then(|v| v.checked_mul(m))
            .ok_or_else(|| rd.err("record size overflows"))?;
        let bytes = rd.take(numel.checked_mul(4).ok_or_else(|| rd.err("record size overflows"))?, "samples")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let x = Tensor::new(vec![n, t, m], data)?;
        let rec = SignalRecord::new(id, x, label, true_len)
            .map_err(|e| Error::Parse { offset: start, msg: e.to_string() })?;
        records.push(rec);
    }
    if rd.pos != buf.len() {
        return Err(rd.err("trailing bytes after last record"));
    }
    let ds = Dataset { records };
    ds.validate().map_err(|e| Error::Parse { offset: 12, msg: e.to_string() })?;
    Ok(ds)
}

pub fn write_bsg1(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, to_bsg1(ds))?;
    Ok(())
}

pub fn read_bsg1(path: &Path) -> Result<Dataset> {
    from_bsg1(&fs::read(path)?)
}

fn label_to_csv(l: &Label) -> String {
    match l {
        Label::Class(c) => c.to_string(),
        Label::Multi(bits) => bits.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(";"),
    }
}

fn label_from_csv(s: &str) -> Option<Label> {
    if s.contains(';') {
        s.split(';')
            .map(|v| match v.trim() {
                "0" => Some(false),
                "1" => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Label::Multi)
    } else {
        s.trim().parse().ok().map(Label::Class)
    }
}

/// Writes `labels.csv` plus one `<id>.csv` per record (rows are valid time
/// steps, columns are sensors). Only single-feature records are supported.
pub fn write_csv_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("record_id,label\n");
    for r in &ds.records {
        let (n, _, m) = r.dims();
        if m != 1 {
            return Err(contract_err!("CSV export needs one feature per sensor, record {} has {m}", r.id));
        }
        labels.push_str(&format!("{},{}\n", r.id, label_to_csv(&r.label)));
        let mut body = String::new();
        for t in 0..r.true_length {
            let row: Vec<String> = (0..n).map(|i| format!("{}", r.at(i, t, 0) as f32)).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        fs::write(dir.join(format!("{}.csv", r.id)), body)?;
    }
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

fn csv_err(text: &str, line: usize, msg: String) -> Error {
    let offset = text.split_inclusive('\n').take(line).map(str::len).sum();
    Error::Parse { offset, msg }
}

/// Reads a directory written by [`write_csv_dir`]; shorter records are
/// zero-padded to the longest.
pub fn read_csv_dir(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("labels.csv"))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "record_id,label" => {}
        _ => return Err(Error::Parse { offset: 0, msg: "labels.csv must start with record_id,label".into() }),
    }
    let mut raw = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, lab) = line.split_once(',').ok_or_else(|| csv_err(&text, ln, "expected two columns".into()))?;
        let label = label_from_csv(lab).ok_or_else(|| csv_err(&text, ln, format!("bad label {lab:?}")))?;
        let body = fs::read_to_string(dir.join(format!("{id}.csv")))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (rl, row) in body.lines().enumerate() {
            if row.trim().is_empty() {
                continue;
            }
            let vals = row
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| csv_err(&body, rl, format!("{id}.csv: {e}")))?;
            if let Some(first) = rows.first() {
                if first.len() != vals.len() {
                    return Err(csv_err(&body, rl, format!("{id}.csv: ragged row")));
                }
            }
            rows.push(vals);
        }
        if rows.is_empty() {
            return Err(Error::Parse { offset: 0, msg: format!("{id}.csv has no rows") });
        }
        raw.push((id.to_string(), label, rows));
    }
    let t_max = raw.iter().map(|r| r.2.len()).max().unwrap_or(0);
    let mut records = Vec::with_capacity(raw.len());
    for (id, label, rows) in raw {
        let n = rows[0].len();
        let mut x = vec![0.0; n * t_max];
        for (t, row) in rows.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                x[i * t_max + t] = v;
            }
        }
        let x = Tensor::new(vec![n, t_max, 1], x)?;
        records.push(SignalRecord::new(id, x, label, rows.len())?);
    }
    let ds = Dataset { records };
    ds.validate()?;
    Ok(ds)
}

/// A directory is read as CSV, anything else as BSG1.
pub fn load(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        read_csv_dir(path)
    } else {
        read_bsg1(path)
    }
}

/// `.bsg1` / `.bsg` paths are written as BSG1, anything else as a CSV directory.
pub fn store(path: &Path, ds: &Dataset) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bsg1") | Some("bsg") => write_bsg1(path, ds),
        _ => write_csv_dir(path, ds),
    }
}

/// Pearson correlation of two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: GeneratorKind) -> DatasetSpec {
        DatasetSpec { kind, seq_len: 1024, size: 8, ..Default::default() }
    }

    fn series(r: &SignalRecord, i: usize, range: std::ops::Range<usize>) -> Vec<f64> {
        range.map(|t| r.at(i, t, 0)).collect()
    }

    #[test]
    fn correlation_clique_and_null() {
        let spec = DatasetSpec { seq_len: 2000, size: 20, ..Default::default() };
        let ds = gen_correlation_task(&spec).unwrap();
        for r in &ds.records {
            match r.label {
                Label::Class(1) => {
                    let a = series(r, 0, 1000..2000);
                    let b = series(r, 1, 1000..2000);
                    assert!(pearson(&a, &b) > 0.8);
                }
                _ => {
                    let a = series(r, 0, 0..1000);
                    let b = series(r, 3, 0..1000);
                    assert!(pearson(&a, &b).abs() < 0.2, "{}", pearson(&a, &b));
                }
            }
        }
        let counts = ds.class_counts();
        assert_eq!(counts[&0], 10);
        assert_eq!(counts[&1], 10);
    }

    #[test]
    fn generators_deterministic() {
        for kind in [GeneratorKind::Correlation, GeneratorKind::LongRange] {
            let a = to_bsg1(&generate(&small(kind)).unwrap());
            let b = to_bsg1(&generate(&small(kind)).unwrap());
            assert_eq!(a, b);
            let c = to_bsg1(&generate(&DatasetSpec { seed: 1, ..small(kind) }).unwrap());
            assert_ne!(a, c);
        }
    }

    #[test]
    fn longrange_marker_only_at_start() {
        let spec = DatasetSpec { kind: GeneratorKind::LongRange, seq_len: 1024, size: 4, ..Default::default() };
        assert_eq!(spec.marker_len(), 10);
        let zero = DatasetSpec { marker_amplitude: 0.0, ..spec.clone() };
        let a = generate(&spec).unwrap();
        let b = generate(&zero).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let y = ra.label.class().unwrap();
            for t in 0..1024 {
                let diff = ra.at(0, t, 0) - rb.at(0, t, 0);
                let expect = if t < 10 { spec.marker_amplitude * marker_value(y, t) } else { 0.0 };
                assert!((diff - expect).abs() < 1e-6);
            }
        }
        let bad = DatasetSpec { seq_len: 512, ..spec };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn bsg1_roundtrips() {
        let empty = Dataset::default();
        assert_eq!(from_bsg1(&to_bsg1(&empty)).unwrap(), empty);
        let one = Dataset { records: generate(&small(GeneratorKind::Correlation)).unwrap().records[..1].to_vec() };
        let bytes = to_bsg1(&one);
        let back = from_bsg1(&bytes).unwrap();
        assert_eq!(back, one);
        assert_eq!(to_bsg1(&back), bytes);

        let x = Tensor::new(vec![2, 3, 1], vec![1., 2., 0., 3., 4., 0.]).unwrap();
        let multi = SignalRecord::new("m", x, Label::Multi(vec![true, false, true]), 2).unwrap();
        let ds = Dataset { records: vec![multi] };
        assert_eq!(from_bsg1(&to_bsg1(&ds)).unwrap(), ds);
    }

    #[test]
    fn bsg1_errors_carry_offsets() {
        let ds = generate(&small(GeneratorKind::Correlation)).unwrap();
        let bytes = to_bsg1(&ds);
        match from_bsg1(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 12),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bsg1(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(from_bsg1(&bytes[..2]), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn csv_roundtrip_with_padding() {
        let dir = tempfile::tempdir().unwrap();
        let x1 = Tensor::new(vec![2, 3, 1], vec![1.5, 2., 3., -1., 0.25, 7.]).unwrap();
        let x2 = Tensor::new(vec![2, 3, 1], vec![4., 5., 0., 6., 7., 0.]).unwrap();
        let ds = Dataset {
            records: vec![
                SignalRecord::new("a", x1, Label::Class(1), 3).unwrap(),
                SignalRecord::new("b", x2, Label::Multi(vec![false, true]), 2).unwrap(),
            ],
        };
        write_csv_dir(dir.path(), &ds).unwrap();
        assert_eq!(read_csv_dir(dir.path()).unwrap(), ds);
        fs::write(dir.path().join("b.csv"), "1,2\n3,x\n").unwrap();
        match read_csv_dir(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_and_undersample() {
        let spec = DatasetSpec { seq_len: 64, size: 103, positive_fraction: 0.3, ..Default::default() };
        let ds = gen_correlation_task(&spec).unwrap();
        let (tr, va, te) = stratified_split(&ds, 0.2, 0.2, 7).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), ds.len());
        let total = ds.class_counts();
        for part in [&tr, &va, &te] {
            let frac = part.len() as f64 / ds.len() as f64;
            for (c, &n) in &part.class_counts() {
                assert!((n as f64 - total[c] as f64 * frac).abs() <= 1.0 + 1e-9);
            }
        }
        let keep = undersample_majority(&ds.records, &mut ChaCha8Rng::seed_from_u64(0));
        let sub = ds.subset(&keep);
        let counts = sub.class_counts();
        assert_eq!(counts[&0], counts[&1]);
        assert_eq!(counts[&1], total[&1]);
    }

    #[test]
    fn padded_region_must_be_zero() {
        let x = Tensor::new(vec![1, 3, 1], vec![1., 2., 3.]).unwrap();
        assert!(SignalRecord::new("p", x.clone(), Label::Class(0), 2).is_err());
        assert!(SignalRecord::new("p", x, Label::Class(0), 3).is_ok());
    }
}

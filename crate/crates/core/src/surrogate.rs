//! Feedforward surrogate from performance parameters to design vectors.
//!
//! Inputs and outputs are min-max normalized to `[-1, 1]`; hidden layers use
//! `tanh`, the output layer is linear. Training is full-batch
//! Levenberg-Marquardt on the normalized output residuals.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::designgen::{DesignRecord, TargetSpec};
use crate::error::{Error, Result};
use crate::lm::{Damping, StopReason};
use crate::optics::ScenarioKind;
use crate::rng::substream;
use crate::shsurface::{validate_surface, MaskKind, ShCoefficients, SurfaceModel};
use crate::SCHEMA_VERSION;

/// Layer sizes from input to output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MlpTopology(Vec<usize>);

impl MlpTopology {
    /// At least an input and an output layer; presets have two hidden layers.
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        let t = MlpTopology(sizes);
        t.validate()?;
        Ok(t)
    }

    pub fn reflector() -> Self {
        MlpTopology(vec![2, 6, 16, 123])
    }

    pub fn lens() -> Self {
        MlpTopology(vec![3, 9, 18, 36])
    }

    pub fn for_scenario(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::ReflectorOffset => Self::reflector(),
            ScenarioKind::LensRect => Self::lens(),
        }
    }

    pub fn parse_preset(name: &str) -> Result<Self> {
        match name {
            "reflector" | "a" | "A" => Ok(Self::reflector()),
            "lens" | "b" | "B" => Ok(Self::lens()),
            _ => {
                let sizes: std::result::Result<Vec<usize>, _> = name.split(['-', ',']).map(str::parse).collect();
                sizes.map_err(|_| Error::InvalidArgument(format!("unknown topology {name:?}"))).and_then(Self::new)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() < 2 || self.0.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid topology {:?}", self.0)));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn inputs(&self) -> usize {
        self.0[0]
    }

    pub fn outputs(&self) -> usize {
        *self.0.last().expect("validated topology")
    }

    pub fn n_params(&self) -> usize {
        self.0.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`, row per neuron.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer { w: vec![vec![0.0; inputs]; outputs], b: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.w.iter().zip(&self.b).map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()));
    }
}

/// Per-dimension affine map of `[min, max]` onto `[-1, 1]`. A dimension with
/// `min == max` is frozen: it normalizes to 0 and denormalizes to `min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Norm {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            for (i, v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument("non-finite training value".into()));
                }
                min[i] = min[i].min(*v);
                max[i] = max[i].max(*v);
            }
        }
        Ok(Norm { min, max })
    }

    /// Identity map (`[-1, 1]` onto itself).
    pub fn identity(dim: usize) -> Self {
        Norm { min: vec![-1.0; dim], max: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.max[i] == self.min[i]
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| if self.is_frozen(i) { 0.0 } else { 2.0 * (v - self.min[i]) / (self.max[i] - self.min[i]) - 1.0 })
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| if self.is_frozen(i) { self.min[i] } else { self.min[i] + 0.5 * (v + 1.0) * (self.max[i] - self.min[i]) })
            .collect()
    }

    /// True if any coordinate lies outside `[min, max]`.
    pub fn outside(&self, x: &[f64]) -> bool {
        x.iter().enumerate().any(|(i, v)| *v < self.min[i] || *v > self.max[i])
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.min.len() != dim || self.max.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.min.len().min(self.max.len()) });
        }
        if self.min.iter().zip(&self.max).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Format("normalizer needs finite min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub schema: u32,
    pub scenario: Option<ScenarioKind>,
    pub topology: MlpTopology,
    pub activation: String,
    pub layers: Vec<Layer>,
    pub input_norm: Norm,
    pub output_norm: Norm,
    pub order: Option<usize>,
    pub mask: Option<MaskKind>,
}

impl MlpModel {
    /// All-zero weights with the given normalizers.
    pub fn zeros(topology: MlpTopology, input_norm: Norm, output_norm: Norm) -> Result<Self> {
        topology.validate()?;
        let layers = topology.sizes().windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let m = MlpModel {
            schema: SCHEMA_VERSION,
            scenario: None,
            topology,
            activation: "tanh".into(),
            layers,
            input_norm,
            output_norm,
            order: None,
            mask: None,
        };
        m.validate()?;
        Ok(m)
    }

    /// Uniform(-0.5, 0.5) weights scaled by `2 / sqrt(fan_in)`.
    pub fn random(topology: MlpTopology, input_norm: Norm, output_norm: Norm, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(topology, input_norm, output_norm)?;
        let mut rng = substream(seed, 0);
        for layer in &mut m.layers {
            let scale = 2.0 / (layer.w[0].len() as f64).sqrt();
            for row in &mut layer.w {
                for w in row.iter_mut() {
                    *w = (rng.random::<f64>() - 0.5) * scale;
                }
            }
            for b in &mut layer.b {
                *b = (rng.random::<f64>() - 0.5) * scale;
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Schema(self.schema));
        }
        self.topology.validate()?;
        if self.activation != "tanh" {
            return Err(Error::Format(format!("unsupported activation {:?}", self.activation)));
        }
        let sizes = self.topology.sizes();
        if self.layers.len() != sizes.len() - 1 {
            return Err(Error::DimensionMismatch { expected: sizes.len() - 1, got: self.layers.len() });
        }
        for (l, w) in self.layers.iter().zip(sizes.windows(2)) {
            if l.w.len() != w[1] || l.b.len() != w[1] || l.w.iter().any(|r| r.len() != w[0]) {
                return Err(Error::Format(format!("layer shape does not match {}x{}", w[1], w[0])));
            }
            if l.w.iter().flatten().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite weight".into()));
            }
        }
        self.input_norm.validate(self.topology.inputs())?;
        self.output_norm.validate(self.topology.outputs())?;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.topology.n_params()
    }

    /// Flat parameters: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            l.w.iter().for_each(|r| p.extend_from_slice(r));
            p.extend_from_slice(&l.b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: p.len() });
        }
        let mut it = p.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().flatten().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Network output for an already-normalized input.
    pub fn forward_normalized(&self, z: &[f64]) -> Vec<f64> {
        let mut a = z.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.apply(&a, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut a, &mut next);
        }
        a
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.topology.inputs() {
            return Err(Error::DimensionMismatch { expected: self.topology.inputs(), got: x.len() });
        }
        let z = self.input_norm.normalize(x);
        Ok(self.output_norm.denormalize(&self.forward_normalized(&z)))
    }

    /// Activations of every layer, input first, for a normalized input.
    fn activations(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![z.to_vec()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = Vec::new();
            l.apply(acts.last().expect("non-empty"), &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }
        acts
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for l in &self.layers {
            off.push(off.last().expect("non-empty") + l.w.len() * (l.w[0].len() + 1));
        }
        off
    }

    /// Backpropagates `grad` (with respect to the last hidden activation)
    /// through the hidden layers, writing parameter gradients into `out`.
    fn backprop_hidden(&self, acts: &[Vec<f64>], grad: &[f64], offsets: &[usize], out: &mut [f64]) {
        let mut g = grad.to_vec();
        for k in (0..self.layers.len() - 1).rev() {
            let layer = &self.layers[k];
            let a_out = &acts[k + 1];
            let a_in = &acts[k];
            let delta: Vec<f64> = g.iter().zip(a_out).map(|(g, a)| g * (1.0 - a * a)).collect();
            let n_in = a_in.len();
            let base = offsets[k];
            for (r, d) in delta.iter().enumerate() {
                for (c, a) in a_in.iter().enumerate() {
                    out[base + r * n_in + c] = d * a;
                }
                out[base + delta.len() * n_in + r] = *d;
            }
            if k > 0 {
                g = (0..n_in).map(|c| layer.w.iter().zip(&delta).map(|(row, d)| row[c] * d).sum()).collect();
            }
        }
    }

    /// Jacobian of the normalized outputs with respect to the flat
    /// parameters; rows are sample-major (`sample * outputs + output`).
    pub fn residual_jacobian(&self, normalized_inputs: &[Vec<f64>]) -> DMatrix<f64> {
        let n_out = self.topology.outputs();
        let np = self.n_params();
        let offsets = self.layer_offsets();
        let out_layer = self.layers.last().expect("validated");
        let out_base = offsets[self.layers.len() - 1];
        let mut jac = DMatrix::zeros(normalized_inputs.len() * n_out, np);
        let mut row = vec![0.0; np];
        for (s, z) in normalized_inputs.iter().enumerate() {
            let acts = self.activations(z);
            let h = &acts[self.layers.len() - 1];
            for o in 0..n_out {
                row.iter_mut().for_each(|v| *v = 0.0);
                for (c, a) in h.iter().enumerate() {
                    row[out_base + o * h.len() + c] = *a;
                }
                row[out_base + n_out * h.len() + o] = 1.0;
                self.backprop_hidden(&acts, &out_layer.w[o], &offsets, &mut row);
                for (p, v) in row.iter().enumerate() {
                    jac[(s * n_out + o, p)] = *v;
                }
            }
        }
        jac
    }

    /// True when `x` lies outside the input range seen in training.
    pub fn extrapolates(&self, x: &[f64]) -> bool {
        self.input_norm.outside(x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let schema = v.get("schema").and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Format("missing schema".into()))?;
        if schema != SCHEMA_VERSION as u64 {
            return Err(Error::Schema(schema.min(u32::MAX as u64) as u32));
        }
        let m: MlpModel = serde_json::from_value(v)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn write_model<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    w.write_all(model.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<MlpModel> {
    let mut s = String::new();
    r.read_to_string(&mut s)?;
    MlpModel::from_json(&s)
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    read_model(std::fs::File::open(path)?)
}

/// Input and output rows in physical units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|i| self.inputs[*i].clone()).collect(),
            outputs: idx.iter().map(|i| self.outputs[*i].clone()).collect(),
        }
    }
}

/// Reflector designs are `[alpha, beta, c_0 .. c_120]`; lens designs are the
/// quadrant-mask coefficients.
pub fn design_vector(kind: ScenarioKind, surface: &SurfaceModel) -> Vec<f64> {
    match kind {
        ScenarioKind::ReflectorOffset => {
            let mut v = vec![surface.tilt_alpha, surface.tilt_beta];
            v.extend_from_slice(&surface.coeffs.values);
            v
        }
        ScenarioKind::LensRect => surface.coeffs.free(),
    }
}

pub fn surface_from_design(kind: ScenarioKind, order: usize, mask: MaskKind, v: &[f64]) -> Result<SurfaceModel> {
    match kind {
        ScenarioKind::ReflectorOffset => {
            if v.len() < 2 {
                return Err(Error::DimensionMismatch { expected: 2, got: v.len() });
            }
            let coeffs = ShCoefficients::from_free(order, mask, &v[2..])?;
            Ok(SurfaceModel::new(coeffs, v[0], v[1]))
        }
        ScenarioKind::LensRect => Ok(SurfaceModel::new(ShCoefficients::from_free(order, mask, v)?, 0.0, 0.0)),
    }
}

/// Training data from successful records of a single scenario.
pub fn dataset_from_records(records: &[DesignRecord]) -> Result<(ScenarioKind, Dataset)> {
    let kind = records.first().map(|r| r.scenario).ok_or_else(|| Error::InvalidArgument("no design records".into()))?;
    let mut data = Dataset::default();
    for r in records {
        if r.scenario != kind {
            return Err(Error::ScenarioMismatch { model: kind.to_string(), request: r.scenario.to_string() });
        }
        data.inputs.push(r.target.params());
        data.outputs.push(design_vector(kind, &r.surface));
    }
    Ok((kind, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub damping: Damping,
    /// Stop when the MSE gradient norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
    /// Fraction of samples held out from training.
    pub holdout: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_epochs: 1000, damping: Damping::default(), grad_tol: 1e-7, seed: 0, holdout: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Normalized-output MSE on the training samples.
    pub final_mse: f64,
    /// MSE after every accepted step, starting with the initial one.
    pub mse_history: Vec<f64>,
    pub stop: StopReason,
    pub n_train: usize,
    /// Indices (into the input dataset) of held-out samples.
    pub holdout: Vec<usize>,
    pub holdout_mse: Option<f64>,
    /// Not serialized, so reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Deterministic split into (train, holdout) indices.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = ((fraction * n as f64).round() as usize).min(n.saturating_sub(2));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, 1));
    let mut hold = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

struct Normalized {
    z: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
}

fn mse_of(model: &MlpModel, data: &Normalized, active: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (z, t) in data.z.iter().zip(&data.t) {
        let y = model.forward_normalized(z);
        sum += active.iter().map(|o| (y[*o] - t[*o]).powi(2)).sum::<f64>();
    }
    sum / (data.z.len() * active.len().max(1)) as f64
}

/// Normal equations of one epoch, with the output layer kept block diagonal
/// (one block per output, all sharing the same matrix).
struct Normal {
    ee: DMatrix<f64>,
    c: Vec<DMatrix<f64>>,
    l: DMatrix<f64>,
    g_e: DVector<f64>,
    g_o: Vec<DVector<f64>>,
}

fn assemble(model: &MlpModel, data: &Normalized, active: &[usize]) -> Normal {
    let n_layers = model.layers.len();
    let offsets = model.layer_offsets();
    let n_e = offsets[n_layers - 1];
    let h = model.topology.sizes()[n_layers - 1];
    let out = &model.layers[n_layers - 1];
    let mut nm = Normal {
        ee: DMatrix::zeros(n_e, n_e),
        c: vec![DMatrix::zeros(n_e, h + 1); active.len()],
        l: DMatrix::zeros(h + 1, h + 1),
        g_e: DVector::zeros(n_e),
        g_o: vec![DVector::zeros(h + 1); active.len()],
    };
    let mut p = DMatrix::zeros(h, h);
    for o in active {
        let w = DVector::from_column_slice(&out.w[*o]);
        p += &w * w.transpose();
    }
    let mut g = DMatrix::zeros(h, n_e);
    let mut row = vec![0.0; n_e];
    for (z, t) in data.z.iter().zip(&data.t) {
        let acts = model.activations(z);
        let y = &acts[n_layers];
        let a = &acts[n_layers - 1];
        let mut phi = DVector::zeros(h + 1);
        phi.rows_mut(0, h).copy_from_slice(a);
        phi[h] = 1.0;
        nm.l += &phi * phi.transpose();
        if n_e > 0 {
            for k in 0..h {
                let mut unit = vec![0.0; h];
                unit[k] = 1.0;
                model.backprop_hidden(&acts, &unit, &offsets, &mut row);
                g.row_mut(k).copy_from_slice(&row);
            }
            nm.ee += g.transpose() * &p * &g;
        }
        for (i, o) in active.iter().enumerate() {
            let e = y[*o] - t[*o];
            nm.g_o[i] += &phi * e;
            if n_e > 0 {
                let u = g.transpose() * DVector::from_column_slice(&out.w[*o]);
                nm.c[i] += &u * phi.transpose();
                nm.g_e += &u * e;
            }
        }
    }
    nm
}

fn add_damping(m: &DMatrix<f64>, lambda: f64, floor: f64) -> DMatrix<f64> {
    let mut d = m.clone();
    for i in 0..m.nrows() {
        d[(i, i)] += lambda * m[(i, i)].max(floor);
    }
    d
}

/// Damped step split into hidden-layer and per-output parts; `None` if a
/// factorization fails.
fn damped_step(nm: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<DVector<f64>>)> {
    let max_diag = nm.ee.diagonal().iter().chain(nm.l.diagonal().iter()).cloned().fold(0.0, f64::max);
    let floor = (max_diag * 1e-12).max(1e-300);
    let m = add_damping(&nm.l, lambda, floor).cholesky()?;
    let n_e = nm.ee.nrows();
    let mut dx_e = DVector::zeros(n_e);
    if n_e > 0 {
        let mut s = add_damping(&nm.ee, lambda, floor);
        let mut rhs = -&nm.g_e;
        for (c, g) in nm.c.iter().zip(&nm.g_o) {
            let mc = m.solve(&c.transpose());
            s -= c * &mc;
            rhs += c * m.solve(g);
        }
        dx_e = s.cholesky()?.solve(&rhs);
    }
    let dx_o = nm
        .c
        .iter()
        .zip(&nm.g_o)
        .map(|(c, g)| {
            let r = -g - c.transpose() * &dx_e;
            m.solve(&r)
        })
        .collect::<Vec<_>>();
    let finite = dx_e.iter().chain(dx_o.iter().flat_map(|v| v.iter())).all(|v| v.is_finite());
    finite.then_some((dx_e, dx_o))
}

fn apply_step(model: &MlpModel, active: &[usize], dx_e: &DVector<f64>, dx_o: &[DVector<f64>]) -> MlpModel {
    let mut trial = model.clone();
    let n_layers = trial.layers.len();
    let mut it = dx_e.iter();
    for l in &mut trial.layers[..n_layers - 1] {
        for v in l.w.iter_mut().flatten().chain(l.b.iter_mut()) {
            *v += it.next().expect("hidden step covers hidden layers");
        }
    }
    let out = &mut trial.layers[n_layers - 1];
    for (o, d) in active.iter().zip(dx_o) {
        let h = out.w[*o].len();
        for (w, dv) in out.w[*o].iter_mut().zip(d.iter()) {
            *w += dv;
        }
        out.b[*o] += d[h];
    }
    trial
}

/// Full-batch Levenberg-Marquardt training. Accepted steps strictly lower
/// the training MSE, so the returned model is the best one seen.
pub fn train_lm(topology: &MlpTopology, data: &Dataset, opts: &TrainOptions) -> Result<(MlpModel, TrainReport)> {
    #[cfg(not(target_arch = "wasm32"))]
    let start = std::time::Instant::now();
    topology.validate()?;
    if !(opts.holdout >= 0.0 && opts.holdout < 1.0) || !(opts.grad_tol >= 0.0) {
        return Err(Error::InvalidArgument("holdout must be in [0, 1) and grad_tol >= 0".into()));
    }
    if data.inputs.len() != data.outputs.len() {
        return Err(Error::DimensionMismatch { expected: data.inputs.len(), got: data.outputs.len() });
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 samples".into()));
    }
    for (x, y) in data.inputs.iter().zip(&data.outputs) {
        if x.len() != topology.inputs() {
            return Err(Error::DimensionMismatch { expected: topology.inputs(), got: x.len() });
        }
        if y.len() != topology.outputs() {
            return Err(Error::DimensionMismatch { expected: topology.outputs(), got: y.len() });
        }
    }
    let (train_idx, hold_idx) = holdout_split(data.len(), opts.holdout, opts.seed);
    let train = data.subset(&train_idx);
    let input_norm = Norm::from_rows(&train.inputs)?;
    let output_norm = Norm::from_rows(&train.outputs)?;
    let active: Vec<usize> = (0..topology.outputs()).filter(|o| !output_norm.is_frozen(*o)).collect();
    let norm = |d: &Dataset| Normalized {
        z: d.inputs.iter().map(|x| input_norm.normalize(x)).collect(),
        t: d.outputs.iter().map(|y| output_norm.normalize(y)).collect(),
    };
    let nd = norm(&train);
    let mut model = MlpModel::random(topology.clone(), input_norm.clone(), output_norm.clone(), opts.seed)?;
    let last = model.layers.len() - 1;
    for o in (0..topology.outputs()).filter(|o| output_norm.is_frozen(*o)) {
        model.layers[last].w[o].iter_mut().for_each(|w| *w = 0.0);
        model.layers[last].b[o] = 0.0;
    }

    let n_res = (nd.z.len() * active.len()).max(1) as f64;
    let mut mse = mse_of(&model, &nd, &active);
    let mut history = vec![mse];
    let mut lambda = opts.damping.lambda_init;
    let mut epochs = 0;
    let stop = loop {
        if active.is_empty() || mse == 0.0 {
            break StopReason::Converged;
        }
        if epochs >= opts.max_epochs {
            break StopReason::MaxIterations;
        }
        let nm = assemble(&model, &nd, &active);
        let grad2 = nm.g_e.norm_squared() + nm.g_o.iter().map(|g| g.norm_squared()).sum::<f64>();
        if 2.0 * grad2.sqrt() / n_res < opts.grad_tol {
            break StopReason::Converged;
        }
        epochs += 1;
        let mut accepted = false;
        while lambda <= opts.damping.lambda_cap {
            if let Some((dx_e, dx_o)) = damped_step(&nm, lambda) {
                let trial = apply_step(&model, &active, &dx_e, &dx_o);
                let t = mse_of(&trial, &nd, &active);
                if t < mse {
                    model = trial;
                    mse = t;
                    history.push(mse);
                    lambda = (lambda / opts.damping.lambda_down).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            lambda *= opts.damping.lambda_up;
        }
        if !accepted {
            break StopReason::LambdaCap;
        }
    };
    let holdout_mse = (!hold_idx.is_empty()).then(|| mse_of(&model, &norm(&data.subset(&hold_idx)), &active));
    #[cfg(not(target_arch = "wasm32"))]
    let wall_time_s = start.elapsed().as_secs_f64();
    #[cfg(target_arch = "wasm32")]
    let wall_time_s = 0.0;
    let report = TrainReport {
        epochs,
        final_mse: mse,
        mse_history: history,
        stop,
        n_train: train_idx.len(),
        holdout: hold_idx,
        holdout_mse,
        wall_time_s,
    };
    Ok((model, report))
}

/// Trains a scenario model on design records.
pub fn train_on_records(
    records: &[DesignRecord],
    topology: Option<MlpTopology>,
    opts: &TrainOptions,
) -> Result<(MlpModel, TrainReport)> {
    let (kind, data) = dataset_from_records(records)?;
    let topology = topology.unwrap_or_else(|| MlpTopology::for_scenario(kind));
    let (mut model, report) = train_lm(&topology, &data, opts)?;
    let sc = kind.scenario();
    let surface = &records[0].surface;
    model.scenario = Some(kind);
    model.order = Some(surface.order());
    model.mask = Some(surface.coeffs.mask);
    if sc.order != surface.order() {
        return Err(Error::InvalidArgument("record order differs from the scenario preset".into()));
    }
    Ok((model, report))
}

/// Surface predicted for a target. The surface is validated, not clamped.
pub fn infer_design(model: &MlpModel, target: &TargetSpec) -> Result<SurfaceModel> {
    let kind = model.scenario.ok_or_else(|| Error::Format("model has no scenario tag".into()))?;
    if kind != target.kind() {
        return Err(Error::ScenarioMismatch { model: kind.to_string(), request: target.kind().to_string() });
    }
    let sc = kind.scenario();
    let y = model.forward(&target.params())?;
    let surface = surface_from_design(kind, model.order.unwrap_or(sc.order), model.mask.unwrap_or(sc.mask), &y)?;
    validate_surface(&surface, sc.cone_half_angle)?;
    Ok(surface)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parameter_counts() {
        assert_eq!(MlpTopology::reflector().n_params(), 2221);
        assert_eq!(MlpTopology::lens().n_params(), 900);
    }

    #[test]
    fn zero_network_outputs_denormalized_bias() {
        let out = Norm { min: vec![10.0, -4.0], max: vec![20.0, 4.0] };
        let m = MlpModel::zeros(MlpTopology::new(vec![3, 4, 2]).unwrap(), Norm::identity(3), out).unwrap();
        assert_eq!(m.forward(&[0.3, -0.2, 0.9]).unwrap(), vec![15.0, 0.0]);
    }

    #[test]
    fn single_neuron_is_tanh() {
        let mut m = MlpModel::zeros(MlpTopology::new(vec![1, 1, 1]).unwrap(), Norm::identity(1), Norm::identity(1)).unwrap();
        m.layers[0].w[0][0] = 1.0;
        m.layers[1].w[0][0] = 1.0;
        for x in [-0.9, 0.0, 0.4] {
            assert!((m.forward(&[x]).unwrap()[0] - f64::tanh(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_checks_dimension() {
        let m = MlpModel::zeros(MlpTopology::lens(), Norm::identity(3), Norm::identity(36)).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn params_round_trip() {
        let mut m = MlpModel::random(MlpTopology::new(vec![2, 3, 4]).unwrap(), Norm::identity(2), Norm::identity(4), 5).unwrap();
        let p = m.params();
        let q: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        m.set_params(&q).unwrap();
        assert_eq!(m.params(), q);
    }

    #[test]
    fn norm_hits_extremes_and_freezes_constants() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![2.0, 5.0]];
        let n = Norm::from_rows(&rows).unwrap();
        assert_eq!(n.normalize(&rows[0]), vec![-1.0, 0.0]);
        assert_eq!(n.normalize(&rows[1]), vec![1.0, 0.0]);
        assert_eq!(n.denormalize(&[0.0, 0.7]), vec![2.0, 5.0]);
    }

    #[test]
    fn holdout_split_is_deterministic() {
        let (a, b) = holdout_split(100, 0.1, 3);
        assert_eq!(b.len(), 10);
        assert_eq!(a.len(), 90);
        assert_eq!((a, b), holdout_split(100, 0.1, 3));
    }

    #[test]
    fn schema_mismatch_rejected() {
        let m = MlpModel::zeros(MlpTopology::new(vec![1, 2, 1]).unwrap(), Norm::identity(1), Norm::identity(1)).unwrap();
        let s = m.to_json().unwrap().replace("\"schema\":1", "\"schema\":9");
        assert!(matches!(MlpModel::from_json(&s), Err(Error::Schema(9))));
    }

    #[test]
    fn structured_step_matches_dense_solve() {
        let top = MlpTopology::new(vec![2, 4, 3, 5]).unwrap();
        let m = MlpModel::random(top, Norm::identity(2), Norm::identity(5), 11).unwrap();
        let mut rng = substream(4, 0);
        let z: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let t: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let active: Vec<usize> = (0..5).collect();
        let nd = Normalized { z: z.clone(), t: t.clone() };
        let nm = assemble(&m, &nd, &active);
        let lambda = 0.3;
        let (dx_e, dx_o) = damped_step(&nm, lambda).unwrap();
        let mut step = m.clone();
        let mut flat = vec![0.0; m.n_params()];
        flat[..dx_e.len()].copy_from_slice(dx_e.as_slice());
        step.set_params(&flat).unwrap();
        let last = step.layers.len() - 1;
        for (o, d) in dx_o.iter().enumerate() {
            let h = step.layers[last].w[o].len();
            step.layers[last].w[o].copy_from_slice(&d.as_slice()[..h]);
            step.layers[last].b[o] = d[h];
        }
        let structured = step.params();

        let j = m.residual_jacobian(&z);
        let r: Vec<f64> = z.iter().zip(&t).flat_map(|(z, t)| {
            let y = m.forward_normalized(z);
            y.iter().zip(t).map(|(y, t)| y - t).collect::<Vec<_>>()
        }).collect();
        let a = j.transpose() * &j;
        let g = -(j.transpose() * DVector::from_vec(r));
        let dense = crate::lm::damped_solve(&a, &g, lambda).unwrap();
        for (s, d) in structured.iter().zip(dense.iter()) {
            assert!((s - d).abs() < 1e-8 * (1.0 + d.abs()), "{s} vs {d}");
        }
    }
}

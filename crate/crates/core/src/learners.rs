//! Models trained under the federated protocols: a single-layer LSTM
//! forecaster with a two-layer fully-connected head, and a linear regressor.
//! Both expose their parameters as one flat vector described by a [`Layout`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named segments of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    /// Builds a layout from `(name, rows, cols)` triples laid out in order.
    pub fn new<S: Into<String>>(shapes: impl IntoIterator<Item = (S, usize, usize)>) -> Self {
        let mut offset = 0;
        let segments = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let seg = Segment {
                    name: name.into(),
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                seg
            })
            .collect();
        Layout { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn zeros(&self) -> ModelParams {
        ModelParams {
            layout: self.clone(),
            values: vec![0.0; self.len()],
        }
    }

    /// Uniform initialization in `[-scale, scale]` from a seed.
    pub fn init_uniform(&self, scale: f64, seed: u64) -> ModelParams {
        use rand::Rng;
        let mut rng = seed::rng(seed, &[seed::tags::INIT]);
        let values = (0..self.len())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        ModelParams {
            layout: self.clone(),
            values,
        }
    }
}

/// Flat parameter vector with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layout: Layout,
    pub values: Vec<f64>,
}

/// Gradient with the same layout as the parameters it was taken at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(ModelParams { layout, values })
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    /// Splits into one owned vector per segment.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .segments()
            .iter()
            .map(|s| (s.name.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ModelParams::unflatten`].
    pub fn flatten(layout: &Layout, parts: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut values = vec![0.0; layout.len()];
        for seg in layout.segments() {
            let (_, data) = parts
                .iter()
                .find(|(name, _)| *name == seg.name)
                .ok_or_else(|| Error::Config(alloc::format!("missing segment {}", seg.name)))?;
            if data.len() != seg.len() {
                return Err(Error::Shape {
                    what: "segment",
                    expected: seg.len(),
                    got: data.len(),
                });
            }
            values[seg.range()].copy_from_slice(data);
        }
        Ok(ModelParams {
            layout: layout.clone(),
            values,
        })
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub input_window: usize,
    pub horizon: usize,
    pub hidden_size: usize,
    pub fc_hidden: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            input_window: 16,
            horizon: 7,
            hidden_size: 32,
            fc_hidden: 32,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_window == 0 || self.horizon == 0 || self.hidden_size == 0 || self.fc_hidden == 0
        {
            return Err(Error::Config("LSTM sizes must all be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum BatchMode {
    Full,
    MiniBatch { batch_size: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "full_batch")]
    pub batch: BatchMode,
}

fn full_batch() -> BatchMode {
    BatchMode::Full
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            max_epochs: 10,
            batch: BatchMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(alloc::format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".to_string()));
        }
        if let BatchMode::MiniBatch { batch_size: 0, .. } = self.batch {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Supervised samples: one input vector and one label vector per row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: rows.iter().map(|&r| self.inputs[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
        }
    }

    pub fn concat(parts: &[Dataset]) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.inputs.extend(p.inputs.iter().cloned());
            out.labels.extend(p.labels.iter().cloned());
        }
        out
    }
}

/// A differentiable model over a flat parameter vector.
pub trait Learner {
    fn layout(&self) -> Layout;

    fn predict(&self, params: &ModelParams, input: &[f64]) -> Result<Vec<f64>>;

    /// Mean squared error over every sample and output, with its exact
    /// gradient.
    fn loss_and_grad(&self, params: &ModelParams, batch: &Dataset) -> Result<(f64, Gradient)>;

    fn loss(&self, params: &ModelParams, batch: &Dataset) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, y) in batch.inputs.iter().zip(&batch.labels) {
            let pred = self.predict(params, x)?;
            total += mse_loss(&pred, y)? * y.len() as f64;
            count += y.len();
        }
        Ok(total / count as f64)
    }
}

pub fn mse_loss(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::Shape {
            what: "prediction vs label",
            expected: label.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok(sum / pred.len() as f64)
}

/// `params - lr * grad`, componentwise.
pub fn gd_step(params: &ModelParams, grad: &Gradient, lr: f64) -> Result<ModelParams> {
    if params.layout != grad.layout {
        return Err(Error::Shape {
            what: "gradient layout",
            expected: params.layout.len(),
            got: grad.layout.len(),
        });
    }
    let values = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(ModelParams {
        layout: params.layout.clone(),
        values,
    })
}

/// One local training epoch. Returns the loss measured at the incoming
/// parameters and the updated parameters. Full batch performs exactly one
/// gradient step; mini-batch walks a shuffled pass seeded by `(seed, epoch, tag)`.
pub fn train_epoch<L: Learner + ?Sized>(
    learner: &L,
    params: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    tag: u64,
) -> Result<(f64, ModelParams)> {
    match cfg.batch {
        BatchMode::Full => {
            let (loss, grad) = learner.loss_and_grad(params, data)?;
            Ok((loss, gd_step(params, &grad, cfg.learning_rate)?))
        }
        BatchMode::MiniBatch { batch_size, seed } => {
            let loss = learner.loss(params, data)?;
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = seed::rng(seed, &[seed::tags::SHUFFLE, epoch as u64, tag]);
            order.shuffle(&mut rng);
            let mut current = params.clone();
            for chunk in order.chunks(batch_size) {
                let (_, grad) = learner.loss_and_grad(&current, &data.subset(chunk))?;
                current = gd_step(&current, &grad, cfg.learning_rate)?;
            }
            Ok((loss, current))
        }
    }
}

pub fn linear_forward(theta: &[f64], x: &[f64]) -> Result<f64> {
    if theta.len() != x.len() {
        return Err(Error::Shape {
            what: "coefficients vs features",
            expected: theta.len(),
            got: x.len(),
        });
    }
    Ok(theta.iter().zip(x).map(|(t, v)| t * v).sum())
}

/// Linear regressor with a single output. Bias is an appended constant-1
/// feature supplied by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearModel {
    pub n_features: usize,
}

impl Learner for LinearModel {
    fn layout(&self) -> Layout {
        Layout::new([("linear.theta", self.n_features, 1)])
    }

    fn predict(&self, params: &ModelParams, input: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![linear_forward(&params.values, input)?])
    }

    fn loss_and_grad(&self, params: &ModelParams, batch: &Dataset) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.n_features];
        let mut loss = 0.0;
        for (x, y) in batch.inputs.iter().zip(&batch.labels) {
            if y.len() != 1 {
                return Err(Error::Shape {
                    what: "linear label",
                    expected: 1,
                    got: y.len(),
                });
            }
            let r = linear_forward(&params.values, x)? - y[0];
            loss += r * r;
            for (g, v) in grad.iter_mut().zip(x) {
                *g += 2.0 * r * v / n;
            }
        }
        Ok((
            loss / n,
            Gradient {
                layout: params.layout.clone(),
                values: grad,
            },
        ))
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Single-layer LSTM over a univariate window, then
/// `relu(W1 h_T + b1)` and a linear output layer of width `horizon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmModel {
    pub cfg: LstmConfig,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Offsets of every parameter block inside the flat vector.
struct LstmView {
    h: usize,
    fc: usize,
    out: usize,
    // per gate: (W, U, b) offsets
    gates: [(usize, usize, usize); 4],
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    // activated gates i, f, g, o
    act: [Vec<f64>; 4],
    c: Vec<f64>,
}

struct ForwardCache {
    steps: Vec<StepCache>,
    h_last: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    out: Vec<f64>,
}

impl LstmModel {
    pub fn new(cfg: LstmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LstmModel { cfg })
    }

    fn view(&self) -> LstmView {
        let layout = self.layout();
        let off = |name: &str| layout.segment(name).expect("segment").offset;
        let gate = |g: &str| {
            (
                off(&alloc::format!("lstm.W_{g}")),
                off(&alloc::format!("lstm.U_{g}")),
                off(&alloc::format!("lstm.b_{g}")),
            )
        };
        LstmView {
            h: self.cfg.hidden_size,
            fc: self.cfg.fc_hidden,
            out: self.cfg.horizon,
            gates: [gate("i"), gate("f"), gate("g"), gate("o")],
            fc1_w: off("fc1.W"),
            fc1_b: off("fc1.b"),
            fc2_w: off("fc2.W"),
            fc2_b: off("fc2.b"),
        }
    }

    fn check(&self, params: &ModelParams, x: &[f64]) -> Result<()> {
        if params.values.len() != self.layout().len() {
            return Err(Error::Shape {
                what: "LSTM parameters",
                expected: self.layout().len(),
                got: params.values.len(),
            });
        }
        if x.len() != self.cfg.input_window {
            return Err(Error::Shape {
                what: "input window",
                expected: self.cfg.input_window,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, v: &LstmView, p: &[f64], x: &[f64]) -> ForwardCache {
        let h = v.h;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut steps = Vec::with_capacity(x.len());
        for &xt in x {
            let mut act: [Vec<f64>; 4] = Default::default();
            for (k, &(w, u, b)) in v.gates.iter().enumerate() {
                let mut z = vec![0.0; h];
                for (j, zj) in z.iter_mut().enumerate() {
                    let mut s = p[w + j] * xt + p[b + j];
                    let row = &p[u + j * h..u + (j + 1) * h];
                    for (ujm, hm) in row.iter().zip(&h_prev) {
                        s += ujm * hm;
                    }
                    *zj = if k == 2 { libm::tanh(s) } else { sigmoid(s) };
                }
                act[k] = z;
            }
            let c: Vec<f64> = (0..h)
                .map(|j| act[1][j] * c_prev[j] + act[0][j] * act[2][j])
                .collect();
            let h_new: Vec<f64> = (0..h).map(|j| act[3][j] * libm::tanh(c[j])).collect();
            steps.push(StepCache {
                h_prev: core::mem::replace(&mut h_prev, h_new),
                c_prev: core::mem::replace(&mut c_prev, c.clone()),
                act,
                c,
            });
        }
        let z1: Vec<f64> = (0..v.fc)
            .map(|r| {
                let row = &p[v.fc1_w + r * h..v.fc1_w + (r + 1) * h];
                p[v.fc1_b + r] + row.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let out: Vec<f64> = (0..v.out)
            .map(|r| {
                let row = &p[v.fc2_w + r * v.fc..v.fc2_w + (r + 1) * v.fc];
                p[v.fc2_b + r] + row.iter().zip(&a1).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        ForwardCache {
            steps,
            h_last: h_prev,
            z1,
            a1,
            out,
        }
    }

    /// Accumulates `d loss / d params` for one sample given `d loss / d out`.
    fn backward(&self, v: &LstmView, p: &[f64], x: &[f64], cache: &ForwardCache, dout: &[f64], g: &mut [f64]) {
        let h = v.h;
        let mut da1 = vec![0.0; v.fc];
        for (r, &d) in dout.iter().enumerate() {
            g[v.fc2_b + r] += d;
            for c in 0..v.fc {
                g[v.fc2_w + r * v.fc + c] += d * cache.a1[c];
                da1[c] += d * p[v.fc2_w + r * v.fc + c];
            }
        }
        let mut dh = vec![0.0; h];
        for r in 0..v.fc {
            if cache.z1[r] <= 0.0 {
                continue;
            }
            let dz = da1[r];
            g[v.fc1_b + r] += dz;
            for c in 0..h {
                g[v.fc1_w + r * h + c] += dz * cache.h_last[c];
                dh[c] += dz * p[v.fc1_w + r * h + c];
            }
        }
        let mut dc = vec![0.0; h];
        let mut dz: [Vec<f64>; 4] = Default::default();
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let [i, f, gg, o] = &step.act;
            for k in dz.iter_mut() {
                k.clear();
                k.resize(h, 0.0);
            }
            let mut dc_prev = vec![0.0; h];
            for j in 0..h {
                let tc = libm::tanh(step.c[j]);
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o[j] * (1.0 - tc * tc);
                let d_i = dcj * gg[j];
                let d_g = dcj * i[j];
                let d_f = dcj * step.c_prev[j];
                dc_prev[j] = dcj * f[j];
                dz[0][j] = d_i * i[j] * (1.0 - i[j]);
                dz[1][j] = d_f * f[j] * (1.0 - f[j]);
                dz[2][j] = d_g * (1.0 - gg[j] * gg[j]);
                dz[3][j] = d_o * o[j] * (1.0 - o[j]);
            }
            let mut dh_prev = vec![0.0; h];
            for (k, &(w, u, b)) in v.gates.iter().enumerate() {
                for j in 0..h {
                    let d = dz[k][j];
                    if d == 0.0 {
                        continue;
                    }
                    g[w + j] += d * x[t];
                    g[b + j] += d;
                    for m in 0..h {
                        g[u + j * h + m] += d * step.h_prev[m];
                        dh_prev[m] += d * p[u + j * h + m];
                    }
                }
            }
            dh = dh_prev;
            dc = dc_prev;
        }
    }
}

impl Learner for LstmModel {
    fn layout(&self) -> Layout {
        let h = self.cfg.hidden_size;
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        for g in GATES {
            shapes.push((alloc::format!("lstm.W_{g}"), h, 1));
            shapes.push((alloc::format!("lstm.U_{g}"), h, h));
            shapes.push((alloc::format!("lstm.b_{g}"), h, 1));
        }
        shapes.push(("fc1.W".to_string(), self.cfg.fc_hidden, h));
        shapes.push(("fc1.b".to_string(), self.cfg.fc_hidden, 1));
        shapes.push(("fc2.W".to_string(), self.cfg.horizon, self.cfg.fc_hidden));
        shapes.push(("fc2.b".to_string(), self.cfg.horizon, 1));
        Layout::new(shapes)
    }

    fn predict(&self, params: &ModelParams, input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input)?;
        Ok(self.forward(&self.view(), &params.values, input).out)
    }

    fn loss_and_grad(&self, params: &ModelParams, batch: &Dataset) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let v = self.view();
        let denom = (batch.len() * self.cfg.horizon) as f64;
        let mut grad = vec![0.0; params.values.len()];
        let mut loss = 0.0;
        for (x, y) in batch.inputs.iter().zip(&batch.labels) {
            self.check(params, x)?;
            if y.len() != self.cfg.horizon {
                return Err(Error::Shape {
                    what: "label horizon",
                    expected: self.cfg.horizon,
                    got: y.len(),
                });
            }
            let cache = self.forward(&v, &params.values, x);
            let dout: Vec<f64> = cache
                .out
                .iter()
                .zip(y)
                .map(|(o, t)| {
                    loss += (o - t) * (o - t);
                    2.0 * (o - t) / denom
                })
                .collect();
            self.backward(&v, &params.values, x, &cache, &dout, &mut grad);
        }
        Ok((
            loss / denom,
            Gradient {
                layout: params.layout.clone(),
                values: grad,
            },
        ))
    }
}

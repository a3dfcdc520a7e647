//! Minimal feed-forward machinery: dense layers, ReLU, softmax,
//! cross-entropy, Adam, and mini-batch training with per-epoch snapshots.
//!
//! Sized for attribute extractors of the form `D -> 64 -> 32 -> M` with a
//! softmax head. Parameters are `f64` in memory; checkpoints store a flat
//! little-endian `f32` block behind a JSON architecture descriptor.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("target for sample {sample} is not one-hot")]
    InvalidTarget { sample: usize },
    #[error("{0}")]
    InvalidArchitecture(String),
    #[error("{path}: not a network checkpoint (bad magic)")]
    CheckpointMagic { path: std::path::PathBuf },
    #[error("checkpoint descriptor: {0}")]
    CheckpointDescriptor(String),
}

impl NnetError {
    pub fn category(&self) -> &'static str {
        match self {
            NnetError::Io(_) => "Io",
            NnetError::DimensionMismatch { .. } => "DimensionMismatch",
            NnetError::NonFiniteActivation { .. } => "NonFiniteActivation",
            NnetError::EmptyDataset => "EmptyDataset",
            NnetError::NonFiniteLoss { .. } => "NonFiniteLoss",
            NnetError::InvalidTarget { .. } => "InvalidTarget",
            NnetError::InvalidArchitecture(_) => "InvalidArchitecture",
            NnetError::CheckpointMagic { .. } => "CheckpointMagic",
            NnetError::CheckpointDescriptor(_) => "CheckpointDescriptor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

/// Dense layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

const LOG_CLAMP: f64 = 1e-12;

/// Cross-entropy `-log p[target]` with the prediction clamped at `1e-12`.
pub fn cross_entropy(pred: &[f64], target_one_hot: &[f64]) -> Result<f64, NnetError> {
    if pred.len() != target_one_hot.len() {
        return Err(NnetError::DimensionMismatch {
            expected: target_one_hot.len(),
            got: pred.len(),
        });
    }
    let mut loss = 0.0;
    for (&p, &t) in pred.iter().zip(target_one_hot) {
        if t != 0.0 {
            loss -= t * p.max(LOG_CLAMP).ln();
        }
    }
    Ok(loss)
}

impl Mlp {
    /// He-uniform initialization (fan-in scaling), biases zero.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut ChaCha20Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(dims.len() - 1, activations.len());
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(pair, &activation)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect(),
                    biases: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NnetError> {
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnetError::InvalidArchitecture(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        if layers.is_empty() {
            return Err(NnetError::InvalidArchitecture("no layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Layer widths `[in, hidden..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnetError> {
        if x.len() != self.input_dim() {
            return Err(NnetError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(NnetError::NonFiniteActivation { layer: i });
            }
        }
        Ok(a)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Flat parameter view: per layer, weights row-major then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), NnetError> {
        if params.len() != self.param_count() {
            return Err(NnetError::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }
}

impl Layer {
    fn affine(&self, a: &[f64]) -> Vec<f64> {
        let mut z = self.biases.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            *zo += row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
        }
        z
    }

    fn apply(&self, a: &[f64]) -> Vec<f64> {
        let z = self.affine(a);
        match self.activation {
            Activation::Relu => z.into_iter().map(|v| v.max(0.0)).collect(),
            Activation::Softmax => softmax(&z),
        }
    }
}

/// Per-layer `(dW, db)` matching the model's shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
        }
    }

    fn scale(&mut self, factor: f64) {
        for (dw, db) in &mut self.layers {
            dw.iter_mut().for_each(|v| *v *= factor);
            db.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn check_classifier_architecture(model: &Mlp) -> Result<(), NnetError> {
    let n = model.layers.len();
    for (i, l) in model.layers.iter().enumerate() {
        let want = if i + 1 == n {
            Activation::Softmax
        } else {
            Activation::Relu
        };
        if l.activation != want {
            return Err(NnetError::InvalidArchitecture(
                "training expects ReLU hidden layers and a softmax head".into(),
            ));
        }
    }
    Ok(())
}

/// Mean cross-entropy and its analytic gradients over a batch.
///
/// The softmax head folds into the loss, so the output-layer error signal is
/// `p - y`; hidden ReLU layers propagate the usual masked backward pass.
pub fn loss_and_gradients(
    model: &Mlp,
    inputs: &[&[f64]],
    targets: &[&[f64]],
) -> Result<(f64, Gradients), NnetError> {
    check_classifier_architecture(model)?;
    if inputs.is_empty() {
        return Err(NnetError::EmptyDataset);
    }
    let n_layers = model.layers.len();
    let mut grads = Gradients::zeros(model);
    let mut total_loss = 0.0;

    for (x, y) in inputs.iter().zip(targets) {
        // Forward, keeping activations (a[0] = input) and pre-activations.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        acts.push(x.to_vec());
        for layer in &model.layers {
            let z = layer.affine(acts.last().unwrap());
            let a = match layer.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Softmax => softmax(&z),
            };
            pres.push(z);
            acts.push(a);
        }
        let pred = acts.last().unwrap();
        total_loss += cross_entropy(pred, y)?;

        let mut delta: Vec<f64> = pred.iter().zip(*y).map(|(&p, &t)| p - t).collect();
        for i in (0..n_layers).rev() {
            let layer = &model.layers[i];
            let (dw, db) = &mut grads.layers[i];
            let a_prev = &acts[i];
            for o in 0..layer.out_dim {
                db[o] += delta[o];
                let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, &a) in row.iter_mut().zip(a_prev) {
                    *w += delta[o] * a;
                }
            }
            if i > 0 {
                let mut next = vec![0.0; layer.in_dim];
                for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                    for (nx, &w) in next.iter_mut().zip(row) {
                        *nx += w * d;
                    }
                }
                // ReLU mask from the previous layer's pre-activation.
                for (nx, &z) in next.iter_mut().zip(&pres[i - 1]) {
                    if z <= 0.0 {
                        *nx = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    let scale = 1.0 / inputs.len() as f64;
    grads.scale(scale);
    Ok((total_loss * scale, grads))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second-moment accumulators over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(model: &Mlp, params: AdamParams) -> Self {
        Self {
            m: vec![0.0; model.param_count()],
            v: vec![0.0; model.param_count()],
            step: 0,
            params,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let mut idx = 0;
        for (layer, (dw, db)) in model.layers.iter_mut().zip(&grads.layers) {
            for (p, &g) in layer
                .weights
                .iter_mut()
                .chain(layer.biases.iter_mut())
                .zip(dw.iter().chain(db.iter()))
            {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                idx += 1;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            adam: AdamParams::default(),
        }
    }
}

/// Everything a caller needs for external model selection: the parameters
/// after every epoch plus the per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub snapshots: Vec<Mlp>,
    pub losses: Vec<f64>,
}

impl TrainRun {
    pub fn final_model(&self) -> &Mlp {
        self.snapshots.last().unwrap()
    }
}

/// Mini-batch training with seeded per-epoch shuffling. The input model is
/// untouched; the run owns one snapshot per epoch.
pub fn train(
    model: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainRun, NnetError> {
    use rand::seq::SliceRandom;

    check_classifier_architecture(model)?;
    if inputs.is_empty() {
        return Err(NnetError::EmptyDataset);
    }
    assert!(cfg.batch_size >= 1, "batch_size must be at least 1");
    if inputs.len() != targets.len() {
        return Err(NnetError::DimensionMismatch {
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    let out_dim = model.output_dim();
    for (i, (x, y)) in inputs.iter().zip(targets).enumerate() {
        if x.len() != model.input_dim() {
            return Err(NnetError::DimensionMismatch {
                expected: model.input_dim(),
                got: x.len(),
            });
        }
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if y.len() != out_dim || ones != 1 || ones + zeros != y.len() {
            return Err(NnetError::InvalidTarget { sample: i });
        }
    }

    let mut model = model.clone();
    let mut opt = AdamState::new(&model, cfg.adam);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = crate::rng::derive_rng(seed, "nnet-shuffle", 0);

    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| targets[i].as_slice()).collect();
            let (loss, grads) = loss_and_gradients(&model, &xs, &ys)?;
            if !loss.is_finite() {
                return Err(NnetError::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            opt.apply(&mut model, &grads);
        }
        losses.push(epoch_loss / inputs.len() as f64);
        snapshots.push(model.clone());
    }
    Ok(TrainRun { snapshots, losses })
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"PAEN";

#[derive(Serialize, Deserialize)]
struct CheckpointDescriptor {
    dims: Vec<usize>,
    activations: Vec<Activation>,
}

/// Writes a checkpoint: magic, `u32` descriptor length, JSON descriptor,
/// then the flat parameter block as little-endian `f32`.
pub fn save_checkpoint(model: &Mlp, path: &Path) -> Result<(), NnetError> {
    let descriptor = serde_json::to_vec(&CheckpointDescriptor {
        dims: model.dims(),
        activations: model.activations(),
    })
    .expect("descriptor serialization");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&CHECKPOINT_MAGIC)?;
    f.write_all(&(descriptor.len() as u32).to_le_bytes())?;
    f.write_all(&descriptor)?;
    for p in model.params_flat() {
        f.write_all(&(p as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp, NnetError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnetError::CheckpointMagic {
            path: path.to_path_buf(),
        });
    }
    let mut len_buf = [0u8; 4];
    f.read_exact(&mut len_buf)?;
    let mut descriptor = vec![0u8; u32::from_le_bytes(len_buf) as usize];
    f.read_exact(&mut descriptor)?;
    let descriptor: CheckpointDescriptor = serde_json::from_slice(&descriptor)
        .map_err(|e| NnetError::CheckpointDescriptor(e.to_string()))?;
    if descriptor.dims.len() < 2 || descriptor.dims.len() - 1 != descriptor.activations.len() {
        return Err(NnetError::CheckpointDescriptor(
            "dims and activations do not chain".into(),
        ));
    }

    let layers: Vec<Layer> = descriptor
        .dims
        .windows(2)
        .zip(&descriptor.activations)
        .map(|(pair, &activation)| Layer {
            in_dim: pair[0],
            out_dim: pair[1],
            weights: vec![0.0; pair[0] * pair[1]],
            biases: vec![0.0; pair[1]],
            activation,
        })
        .collect();
    let mut model = Mlp::from_layers(layers)?;

    let mut block = Vec::new();
    f.read_to_end(&mut block)?;
    if block.len() != model.param_count() * 4 {
        return Err(NnetError::CheckpointDescriptor(format!(
            "parameter block holds {} bytes, expected {}",
            block.len(),
            model.param_count() * 4
        )));
    }
    let params: Vec<f64> = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    model.set_params_flat(&params)?;
    Ok(model)
}

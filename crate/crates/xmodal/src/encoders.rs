//! Toy two-stream feed-forward encoders with hand-rolled backprop, temporal
//! pooling, and the optimizers that train them. These stand in for the
//! full CNN streams at desk scale: what matters here is the loss geometry
//! and the training dynamics, not capacity.

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity on hidden layers. Output layers stay linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activated output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One dense layer: `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix, // out x in
    pub bias: Vec<f64>, // out
}

impl Layer {
    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Layer {
            weight: Matrix::from_fn(output, input, |_, _| rng.uniform_in(-bound, bound)),
            bias: vec![0.0; output],
        }
    }

    pub fn zeros_like(&self) -> Layer {
        Layer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

fn linear_forward(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    if x.cols() != layer.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} inputs, got {}",
            layer.input_dim(),
            x.cols()
        )));
    }
    let mut y = x.matmul(&layer.weight.transpose())?;
    for i in 0..y.rows() {
        for (j, b) in layer.bias.iter().enumerate() {
            y.set(i, j, y.get(i, j) + b);
        }
    }
    Ok(y)
}

/// Backward of `y = x W^T + b` given dL/dy: returns (layer grads, dL/dx).
fn linear_backward(x: &Matrix, layer: &Layer, d_y: &Matrix) -> Result<(Layer, Matrix)> {
    let d_weight = d_y.transpose().matmul(x)?;
    let mut d_bias = vec![0.0; layer.bias.len()];
    for i in 0..d_y.rows() {
        for (j, acc) in d_bias.iter_mut().enumerate() {
            *acc += d_y.get(i, j);
        }
    }
    let d_x = d_y.matmul(&layer.weight)?;
    Ok((
        Layer {
            weight: d_weight,
            bias: d_bias,
        },
        d_x,
    ))
}

/// Feed-forward encoder: activation on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    /// Bumped on every optimizer step; forward tapes pin the version they
    /// saw so a stale tape cannot silently backprop through new weights.
    version: u64,
}

impl EncoderParams {
    /// Build from a dimension chain, e.g. `[32, 24, 16]` for a 2-layer net.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "encoder needs at least input and output dims".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer::init(w[0], w[1], rng))
            .collect();
        Ok(EncoderParams {
            layers,
            activation,
            version: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer chain breaks: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("encoder with no layers".into()));
        }
        Ok(EncoderParams {
            layers,
            activation,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// Record of one forward pass, sufficient for exact backprop.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_inputs: Vec<Matrix>,
    activated: Vec<Matrix>, // post-activation hidden outputs
    version: u64,
}

/// Per-frame embeddings plus the tape for [`backward`].
pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<(Matrix, Tape)> {
    let mut tape = Tape {
        layer_inputs: Vec::with_capacity(params.layers.len()),
        activated: Vec::with_capacity(params.layers.len().saturating_sub(1)),
        version: params.version,
    };
    let last = params.layers.len() - 1;
    let mut cur = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        tape.layer_inputs.push(cur.clone());
        let mut y = linear_forward(&cur, layer)?;
        if l < last {
            for v in y.data_mut() {
                *v = params.activation.apply(*v);
            }
            tape.activated.push(y.clone());
        }
        cur = y;
    }
    Ok((cur, tape))
}

/// Gradients for an encoder, shaped like its layers.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn add(&mut self, other: &EncoderGrads, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("gradient layer count".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, scale)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }
}

/// Exact backprop through a taped forward pass. Returns parameter gradients
/// and the gradient w.r.t. the input frames.
pub fn backward(
    params: &EncoderParams,
    tape: &Tape,
    upstream: &Matrix,
) -> Result<(EncoderGrads, Matrix)> {
    if tape.version != params.version {
        return Err(Error::StaleTape(format!(
            "tape from version {}, params at {}",
            tape.version, params.version
        )));
    }
    if tape.layer_inputs.len() != params.layers.len() {
        return Err(Error::StaleTape("tape depth mismatch".into()));
    }
    let last = params.layers.len() - 1;
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut d_cur = upstream.clone();
    for l in (0..params.layers.len()).rev() {
        if l < last {
            let act = &tape.activated[l];
            if act.rows() != d_cur.rows() || act.cols() != d_cur.cols() {
                return Err(Error::StaleTape("tape shape mismatch".into()));
            }
            for i in 0..d_cur.rows() {
                for j in 0..d_cur.cols() {
                    let dy = d_cur.get(i, j)
                        * params.activation.derivative_from_output(act.get(i, j));
                    d_cur.set(i, j, dy);
                }
            }
        }
        let (layer_grad, d_x) = linear_backward(&tape.layer_inputs[l], &params.layers[l], &d_cur)?;
        grads.push(layer_grad);
        d_cur = d_x;
    }
    grads.reverse();
    Ok((EncoderGrads { layers: grads }, d_cur))
}

/// How per-frame embeddings collapse to one vector. The audio-analogue
/// stream averages over time; the visual-analogue stream picks one frame at
/// random so the model cannot read content off the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingRule {
    MeanOverTime,
    RandomSelectOne,
}

/// What the pooling forward actually did; needed to route gradients back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolChoice {
    Mean { frames: usize },
    Selected { index: usize, frames: usize },
}

/// Collapse `T x out` frame embeddings to a single vector.
pub fn pool(rule: PoolingRule, y: &Matrix, rng: &mut Rng) -> Result<(Vec<f64>, PoolChoice)> {
    if y.rows() == 0 {
        return Err(Error::InvalidArgument("pooling over zero frames".into()));
    }
    match rule {
        PoolingRule::MeanOverTime => Ok((y.column_means(), PoolChoice::Mean { frames: y.rows() })),
        PoolingRule::RandomSelectOne => {
            let index = rng.below(y.rows());
            Ok((
                y.row(index).to_vec(),
                PoolChoice::Selected {
                    index,
                    frames: y.rows(),
                },
            ))
        }
    }
}

/// Distribute a pooled-embedding gradient back over the frames: mean
/// pooling spreads 1/T to every frame, selection sends everything to the
/// chosen frame.
pub fn pool_backward(choice: PoolChoice, upstream: &[f64]) -> Matrix {
    match choice {
        PoolChoice::Mean { frames } => {
            let inv = 1.0 / frames as f64;
            Matrix::from_fn(frames, upstream.len(), |_, j| upstream[j] * inv)
        }
        PoolChoice::Selected { index, frames } => Matrix::from_fn(
            frames,
            upstream.len(),
            |i, j| if i == index { upstream[j] } else { 0.0 },
        ),
    }
}

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters; accumulator state lives in [`OptimizerState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-tensor accumulators for a fixed set of parameter tensors, registered
/// once by flat length. `begin_step` advances the shared timestep (Adam bias
/// correction), then `update` is called once per tensor.
pub struct OptimizerState {
    config: OptimizerConfig,
    step_count: u64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, tensor_sizes: &[usize]) -> Self {
        OptimizerState {
            config,
            step_count: 0,
            slots: tensor_sizes
                .iter()
                .map(|&n| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    pub fn update(&mut self, tensor: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unregistered tensor {tensor}")))?;
        if params.len() != slot.m.len() || grads.len() != slot.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {tensor}: registered {} params, got {}/{}",
                slot.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let cfg = &self.config;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(slot.m.iter_mut()) {
                    *vel = cfg.momentum * *vel + g;
                    *p -= cfg.learning_rate * *vel;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count.max(1) as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for ((p, g), i) in params.iter_mut().zip(grads).zip(0..) {
                    let m = &mut slot.m[i];
                    let v = &mut slot.v[i];
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
        Ok(())
    }
}

/// One optimizer step over a whole encoder. The state must have been
/// created with [`encoder_tensor_sizes`] of this encoder.
pub fn step(
    opt: &mut OptimizerState,
    params: &mut EncoderParams,
    grads: &EncoderGrads,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch("gradient layer count".into()));
    }
    opt.begin_step();
    for (l, (layer, grad)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        opt.update(2 * l, layer.weight.data_mut(), grad.weight.data())?;
        opt.update(2 * l + 1, &mut layer.bias, &grad.bias)?;
    }
    params.bump_version();
    Ok(())
}

/// Flat tensor lengths in the order [`step`] consumes them.
pub fn encoder_tensor_sizes(params: &EncoderParams) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(2 * params.layers.len());
    for layer in &params.layers {
        sizes.push(layer.weight.rows() * layer.weight.cols());
        sizes.push(layer.bias.len());
    }
    sizes
}

/// Two heads on a shared trunk: the identity head feeds the biometric
/// objective, the content head the synchronisation objective, and the
/// trunk is regularised by both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHeadEncoder {
    pub trunk: Layer,
    pub id_head: Layer,
    pub content_head: Layer,
    pub activation: Activation,
    version: u64,
}

/// Which head a forward pass goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Identity,
    Content,
}

/// Tape for one two-head forward pass.
#[derive(Debug, Clone)]
pub struct TwoHeadTape {
    input: Matrix,
    hidden: Matrix,
    head: Head,
    version: u64,
}

/// Gradients for a [`TwoHeadEncoder`]; the unused head's entries are zero.
#[derive(Debug, Clone)]
pub struct TwoHeadGrads {
    pub trunk: Layer,
    pub id_head: Layer,
    pub content_head: Layer,
}

impl TwoHeadEncoder {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("zero-width encoder layer".into()));
        }
        Ok(TwoHeadEncoder {
            trunk: Layer::init(input_dim, hidden_dim, rng),
            id_head: Layer::init(hidden_dim, output_dim, rng),
            content_head: Layer::init(hidden_dim, output_dim, rng),
            activation,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.id_head.output_dim()
    }

    pub fn forward(&self, x: &Matrix, head: Head) -> Result<(Matrix, TwoHeadTape)> {
        let mut hidden = linear_forward(x, &self.trunk)?;
        for v in hidden.data_mut() {
            *v = self.activation.apply(*v);
        }
        let out = linear_forward(
            &hidden,
            match head {
                Head::Identity => &self.id_head,
                Head::Content => &self.content_head,
            },
        )?;
        Ok((
            out,
            TwoHeadTape {
                input: x.clone(),
                hidden,
                head,
                version: self.version,
            },
        ))
    }

    pub fn backward(
        &self,
        tape: &TwoHeadTape,
        upstream: &Matrix,
    ) -> Result<(TwoHeadGrads, Matrix)> {
        if tape.version != self.version {
            return Err(Error::StaleTape(format!(
                "tape from version {}, encoder at {}",
                tape.version, self.version
            )));
        }
        let head_layer = match tape.head {
            Head::Identity => &self.id_head,
            Head::Content => &self.content_head,
        };
        let (head_grad, mut d_hidden) = linear_backward(&tape.hidden, head_layer, upstream)?;
        for i in 0..d_hidden.rows() {
            for j in 0..d_hidden.cols() {
                let dy = d_hidden.get(i, j)
                    * self
                        .activation
                        .derivative_from_output(tape.hidden.get(i, j));
                d_hidden.set(i, j, dy);
            }
        }
        let (trunk_grad, d_input) = linear_backward(&tape.input, &self.trunk, &d_hidden)?;
        let grads = match tape.head {
            Head::Identity => TwoHeadGrads {
                trunk: trunk_grad,
                id_head: head_grad,
                content_head: self.content_head.zeros_like(),
            },
            Head::Content => TwoHeadGrads {
                trunk: trunk_grad,
                id_head: self.id_head.zeros_like(),
                content_head: head_grad,
            },
        };
        Ok((grads, d_input))
    }

    pub fn zero_grads(&self) -> TwoHeadGrads {
        TwoHeadGrads {
            trunk: self.trunk.zeros_like(),
            id_head: self.id_head.zeros_like(),
            content_head: self.content_head.zeros_like(),
        }
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Flat tensor lengths in the fixed order (trunk w/b, id w/b, content w/b).
    pub fn tensor_sizes(&self) -> Vec<usize> {
        vec![
            self.trunk.weight.rows() * self.trunk.weight.cols(),
            self.trunk.bias.len(),
            self.id_head.weight.rows() * self.id_head.weight.cols(),
            self.id_head.bias.len(),
            self.content_head.weight.rows() * self.content_head.weight.cols(),
            self.content_head.bias.len(),
        ]
    }
}

impl TwoHeadGrads {
    pub fn add(&mut self, other: &TwoHeadGrads, scale: f64) -> Result<()> {
        self.trunk.weight.add_scaled(&other.trunk.weight, scale)?;
        self.id_head.weight.add_scaled(&other.id_head.weight, scale)?;
        self.content_head
            .weight
            .add_scaled(&other.content_head.weight, scale)?;
        for (a, b) in self.trunk.bias.iter_mut().zip(&other.trunk.bias) {
            *a += scale * b;
        }
        for (a, b) in self.id_head.bias.iter_mut().zip(&other.id_head.bias) {
            *a += scale * b;
        }
        for (a, b) in self
            .content_head
            .bias
            .iter_mut()
            .zip(&other.content_head.bias)
        {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Versioned on-disk form of a trained model: both encoders plus the
/// learnable kernel parameters of each objective.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub seed: u64,
    pub encoder_a: TwoHeadEncoder,
    pub encoder_b: TwoHeadEncoder,
    pub id_kernel: crate::similarity::SimilarityKernel,
    pub content_kernel: crate::similarity::SimilarityKernel,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl CheckpointFile {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: CheckpointFile = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}, expected {}",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::loss_cddl;
    use crate::similarity::SimilarityKernel;

    #[test]
    fn identity_linear_layer_passes_through() {
        let layer = Layer {
            weight: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let params = EncoderParams::from_layers(vec![layer], Activation::Tanh).unwrap();
        let x = Matrix::from_rows(&[&[0.3, -0.8], &[2.0, 0.5]]).unwrap();
        let (y, _) = forward(&params, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_yield_bias_rows() {
        let layer = Layer {
            weight: Matrix::zeros(3, 2),
            bias: vec![0.5, -1.0, 2.0],
        };
        let params = EncoderParams::from_layers(vec![layer], Activation::Relu).unwrap();
        let x = Matrix::from_rows(&[&[10.0, -3.0], &[0.0, 0.0]]).unwrap();
        let (y, _) = forward(&params, &x).unwrap();
        for i in 0..2 {
            assert_eq!(y.row(i), &[0.5, -1.0, 2.0]);
        }
    }

    fn fd_encoder_check(activation: Activation, seed: u64) -> f64 {
        const H: f64 = 1e-6;
        let mut rng = Rng::new(seed);
        let params = EncoderParams::init(&[4, 6, 3], activation, &mut rng).unwrap();
        let x = Matrix::from_fn(5, 4, |_, _| rng.normal());
        let upstream = Matrix::from_fn(5, 3, |_, _| rng.normal());

        let objective = |p: &EncoderParams| -> f64 {
            let (y, _) = forward(p, &x).unwrap();
            y.data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        let (_, tape) = forward(&params, &x).unwrap();
        let (grads, d_x) = backward(&params, &tape, &upstream).unwrap();

        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        let mut worst: f64 = 0.0;
        for l in 0..params.layers.len() {
            let rows = params.layers[l].weight.rows();
            let cols = params.layers[l].weight.cols();
            for i in 0..rows {
                for j in 0..cols {
                    let mut hi = params.clone();
                    let w = hi.layers[l].weight.get(i, j);
                    hi.layers[l].weight.set(i, j, w + H);
                    let mut lo = params.clone();
                    lo.layers[l].weight.set(i, j, w - H);
                    let num = (objective(&hi) - objective(&lo)) / (2.0 * H);
                    worst = worst.max(rel(grads.layers[l].weight.get(i, j), num));
                }
            }
            for j in 0..params.layers[l].bias.len() {
                let mut hi = params.clone();
                hi.layers[l].bias[j] += H;
                let mut lo = params.clone();
                lo.layers[l].bias[j] -= H;
                let num = (objective(&hi) - objective(&lo)) / (2.0 * H);
                worst = worst.max(rel(grads.layers[l].bias[j], num));
            }
        }
        // input gradients via perturbed x
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut hi = x.clone();
                hi.set(i, j, x.get(i, j) + H);
                let mut lo = x.clone();
                lo.set(i, j, x.get(i, j) - H);
                let f = |m: &Matrix| -> f64 {
                    let (y, _) = forward(&params, m).unwrap();
                    y.data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let num = (f(&hi) - f(&lo)) / (2.0 * H);
                worst = worst.max(rel(d_x.get(i, j), num));
            }
        }
        worst
    }

    #[test]
    fn random_two_layer_net_matches_finite_differences() {
        assert!(fd_encoder_check(Activation::Tanh, 5) < 1e-5);
        assert!(fd_encoder_check(Activation::Relu, 6) < 1e-5);
    }

    #[test]
    fn pooling_single_frame_is_identity() {
        let y = Matrix::from_rows(&[&[1.5, -2.0]]).unwrap();
        let mut rng = Rng::new(1);
        let (mean, _) = pool(PoolingRule::MeanOverTime, &y, &mut rng).unwrap();
        let (sel, _) = pool(PoolingRule::RandomSelectOne, &y, &mut rng).unwrap();
        assert_eq!(mean, vec![1.5, -2.0]);
        assert_eq!(sel, vec![1.5, -2.0]);
    }

    #[test]
    fn mean_pooling_averages() {
        let y = Matrix::from_rows(&[&[0.0, 0.0], &[2.0, 2.0]]).unwrap();
        let mut rng = Rng::new(1);
        let (mean, _) = pool(PoolingRule::MeanOverTime, &y, &mut rng).unwrap();
        assert_eq!(mean, vec![1.0, 1.0]);
    }

    #[test]
    fn random_select_replays_with_seed() {
        let y = Matrix::from_fn(7, 3, |i, j| (i * 3 + j) as f64);
        let pick = |seed: u64| {
            let mut rng = Rng::new(seed);
            pool(PoolingRule::RandomSelectOne, &y, &mut rng).unwrap()
        };
        let (v1, c1) = pick(99);
        let (v2, c2) = pick(99);
        assert_eq!(v1, v2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn pool_zero_frames_errors() {
        let y = Matrix::zeros(0, 3);
        let mut rng = Rng::new(1);
        assert!(pool(PoolingRule::MeanOverTime, &y, &mut rng).is_err());
    }

    #[test]
    fn pool_backward_routes_gradients() {
        let g = vec![4.0, -2.0];
        let mean = pool_backward(PoolChoice::Mean { frames: 2 }, &g);
        for i in 0..2 {
            assert_eq!(mean.row(i), &[2.0, -1.0]);
        }
        let sel = pool_backward(
            PoolChoice::Selected {
                index: 1,
                frames: 3,
            },
            &g,
        );
        assert_eq!(sel.row(0), &[0.0, 0.0]);
        assert_eq!(sel.row(1), &[4.0, -2.0]);
        assert_eq!(sel.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(8);
        let params = EncoderParams::init(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let (_, tape) = forward(&params, &x).unwrap();
        let (grads, d_x) = backward(&params, &tape, &Matrix::zeros(4, 2)).unwrap();
        assert!(d_x.data().iter().all(|&v| v == 0.0));
        for layer in &grads.layers {
            assert!(layer.weight.data().iter().all(|&v| v == 0.0));
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = Rng::new(9);
        let mut params = EncoderParams::init(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let (_, tape) = forward(&params, &x).unwrap();
        params.bump_version();
        let res = backward(&params, &tape, &Matrix::zeros(2, 2));
        assert!(matches!(res, Err(Error::StaleTape(_))));
    }

    #[test]
    fn sgd_trivial_updates() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &[1]);
        let mut p = [0.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 0.0);
        opt.begin_step();
        opt.update(0, &mut p, &[1.0]).unwrap();
        assert_eq!(p[0], -1.0);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // closed form: m_hat = g, v_hat = g^2, so the step is
        // lr * g / (|g| + eps) ~ lr * sign(g) for any gradient scale
        for g in [1e-6, 0.5, 3.0, 1e4] {
            let cfg = OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            };
            let mut opt = OptimizerState::new(cfg, &[1]);
            let mut p = [0.0];
            opt.begin_step();
            opt.update(0, &mut p, &[g]).unwrap();
            let expected = 1e-3 * g / (g + cfg.eps);
            assert!(
                (p[0] + expected).abs() < 1e-12,
                "g={g}: step {} vs {expected}",
                p[0]
            );
        }
    }

    #[test]
    fn encoder_step_applies_and_bumps_version() {
        let mut rng = Rng::new(10);
        let mut params = EncoderParams::init(&[2, 3, 2], Activation::Tanh, &mut rng).unwrap();
        let before = params.clone();
        let sizes = encoder_tensor_sizes(&params);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &sizes);
        let mut grads = EncoderGrads::zeros_like(&params);
        grads.layers[0].weight.set(0, 0, 2.0);
        step(&mut opt, &mut params, &grads).unwrap();
        assert_eq!(params.version(), before.version() + 1);
        let expect = before.layers[0].weight.get(0, 0) - 0.2;
        assert!((params.layers[0].weight.get(0, 0) - expect).abs() < 1e-15);
        assert_eq!(
            params.layers[1].weight.get(0, 0),
            before.layers[1].weight.get(0, 0)
        );
    }

    #[test]
    fn two_head_encoder_routes_and_shares_trunk() {
        let mut rng = Rng::new(11);
        let enc = TwoHeadEncoder::init(3, 5, 2, Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let (y_id, tape_id) = enc.forward(&x, Head::Identity).unwrap();
        let (y_ct, _) = enc.forward(&x, Head::Content).unwrap();
        assert_ne!(y_id, y_ct);

        let upstream = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let (grads, _) = enc.backward(&tape_id, &upstream).unwrap();
        // content head untouched by an identity-head pass
        assert!(grads.content_head.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.trunk.weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn two_head_finite_difference_check() {
        const H: f64 = 1e-6;
        let mut rng = Rng::new(12);
        let enc = TwoHeadEncoder::init(3, 4, 2, Activation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let upstream = Matrix::from_fn(3, 2, |_, _| rng.normal());

        let objective = |e: &TwoHeadEncoder, head: Head| -> f64 {
            let (y, _) = e.forward(&x, head).unwrap();
            y.data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);

        for head in [Head::Identity, Head::Content] {
            let (_, tape) = enc.forward(&x, head).unwrap();
            let (grads, _) = enc.backward(&tape, &upstream).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..enc.trunk.weight.rows() {
                for j in 0..enc.trunk.weight.cols() {
                    let mut hi = enc.clone();
                    let w = hi.trunk.weight.get(i, j);
                    hi.trunk.weight.set(i, j, w + H);
                    let mut lo = enc.clone();
                    lo.trunk.weight.set(i, j, w - H);
                    let num = (objective(&hi, head) - objective(&lo, head)) / (2.0 * H);
                    worst = worst.max(rel(grads.trunk.weight.get(i, j), num));
                }
            }
            assert!(worst < 1e-5, "{head:?}: worst {worst}");
        }
    }

    #[test]
    fn end_to_end_encoder_pool_cddl_finite_differences() {
        // two small encoders, mean pooling, CDDL on the pooled embeddings
        const H: f64 = 1e-6;
        let mut rng = Rng::new(13);
        let enc_a = EncoderParams::init(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let enc_b = EncoderParams::init(&[5, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let kernel = SimilarityKernel::scaled_cosine(4.0, -1.0).unwrap();
        let n = 3;
        let t = 2;
        let frames_a: Vec<Matrix> = (0..n)
            .map(|_| Matrix::from_fn(t, 3, |_, _| rng.normal()))
            .collect();
        let frames_b: Vec<Matrix> = (0..n)
            .map(|_| Matrix::from_fn(t, 5, |_, _| rng.normal()))
            .collect();

        let loss_value = |ea: &EncoderParams, eb: &EncoderParams| -> f64 {
            let mut xa = Matrix::zeros(n, 2);
            let mut xv = Matrix::zeros(n, 2);
            let mut pool_rng = Rng::new(0);
            for i in 0..n {
                let (ya, _) = forward(ea, &frames_a[i]).unwrap();
                let (pa, _) = pool(PoolingRule::MeanOverTime, &ya, &mut pool_rng).unwrap();
                xa.row_mut(i).copy_from_slice(&pa);
                let (yb, _) = forward(eb, &frames_b[i]).unwrap();
                let (pb, _) = pool(PoolingRule::MeanOverTime, &yb, &mut pool_rng).unwrap();
                xv.row_mut(i).copy_from_slice(&pb);
            }
            loss_cddl(&kernel, &xa, &xv).unwrap().value
        };

        // analytic grads
        let mut xa = Matrix::zeros(n, 2);
        let mut xv = Matrix::zeros(n, 2);
        let mut tapes_a = Vec::new();
        let mut tapes_b = Vec::new();
        let mut pool_rng = Rng::new(0);
        for i in 0..n {
            let (ya, ta) = forward(&enc_a, &frames_a[i]).unwrap();
            let (pa, ca) = pool(PoolingRule::MeanOverTime, &ya, &mut pool_rng).unwrap();
            xa.row_mut(i).copy_from_slice(&pa);
            tapes_a.push((ta, ca));
            let (yb, tb) = forward(&enc_b, &frames_b[i]).unwrap();
            let (pb, cb) = pool(PoolingRule::MeanOverTime, &yb, &mut pool_rng).unwrap();
            xv.row_mut(i).copy_from_slice(&pb);
            tapes_b.push((tb, cb));
        }
        let loss = loss_cddl(&kernel, &xa, &xv).unwrap();
        let mut grads_a = EncoderGrads::zeros_like(&enc_a);
        let mut grads_b = EncoderGrads::zeros_like(&enc_b);
        for i in 0..n {
            let up_a = pool_backward(tapes_a[i].1, loss.grad_a.row(i));
            let (ga, _) = backward(&enc_a, &tapes_a[i].0, &up_a).unwrap();
            grads_a.add(&ga, 1.0).unwrap();
            let up_b = pool_backward(tapes_b[i].1, loss.grad_v.row(i));
            let (gb, _) = backward(&enc_b, &tapes_b[i].0, &up_b).unwrap();
            grads_b.add(&gb, 1.0).unwrap();
        }

        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        let mut worst: f64 = 0.0;
        for (params, grads, perturb_a) in [(&enc_a, &grads_a, true), (&enc_b, &grads_b, false)] {
            for l in 0..params.layers.len() {
                for i in 0..params.layers[l].weight.rows() {
                    for j in 0..params.layers[l].weight.cols() {
                        let mut hi = params.clone();
                        let w = hi.layers[l].weight.get(i, j);
                        hi.layers[l].weight.set(i, j, w + H);
                        let mut lo = params.clone();
                        lo.layers[l].weight.set(i, j, w - H);
                        let (v_hi, v_lo) = if perturb_a {
                            (loss_value(&hi, &enc_b), loss_value(&lo, &enc_b))
                        } else {
                            (loss_value(&enc_a, &hi), loss_value(&enc_a, &lo))
                        };
                        let num = (v_hi - v_lo) / (2.0 * H);
                        worst = worst.max(rel(grads.layers[l].weight.get(i, j), num));
                    }
                }
            }
        }
        assert!(worst < 1e-5, "end-to-end worst rel err {worst}");
    }

    #[test]
    fn select_pooling_on_constant_frames_equals_mean() {
        let mut rng = Rng::new(14);
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let y = Matrix::from_fn(6, 4, |_, j| row[j]);
        let (mean, _) = pool(PoolingRule::MeanOverTime, &y, &mut rng).unwrap();
        let (sel, _) = pool(PoolingRule::RandomSelectOne, &y, &mut rng).unwrap();
        for (a, b) in mean.iter().zip(&sel) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = Rng::new(15);
        let ckpt = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: 42,
            encoder_a: TwoHeadEncoder::init(3, 4, 2, Activation::Tanh, &mut rng).unwrap(),
            encoder_b: TwoHeadEncoder::init(5, 4, 2, Activation::Tanh, &mut rng).unwrap(),
            id_kernel: SimilarityKernel::default_angular(),
            content_kernel: SimilarityKernel::default_angular(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = CheckpointFile::load(&path).unwrap();
        assert_eq!(loaded.encoder_a, ckpt.encoder_a);
        assert_eq!(loaded.encoder_b, ckpt.encoder_b);
        assert_eq!(loaded.seed, 42);
    }
}

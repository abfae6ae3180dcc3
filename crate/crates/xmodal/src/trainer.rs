//! Experiment orchestration: deterministic training runs over the synthetic
//! world, joint identity+content objectives, periodic held-out evaluation,
//! and controlled loss comparisons.
//!
//! A run is a pure function of (config, seed): every random choice flows
//! from one seeded generator tree, evaluation uses fixtures built once per
//! run, and reports carry no timestamps.

use crate::encoders::{
    pool, pool_backward, Activation, Head, OptimizerConfig, OptimizerState, PoolingRule,
    TwoHeadEncoder, TwoHeadGrads,
};
use crate::eval::{cross_modal_trials, eer, linear_probe, recall_at_k, verification_trials};
use crate::losses::{evaluate_batch, BinaryHead, LossKind, LossResult, LossSpec};
use crate::numerics::{Matrix, Rng};
use crate::report::{CurvePoint, MetricsPoint, RunReport, REPORT_SCHEMA_VERSION};
use crate::similarity::SimilarityKernel;
use crate::synthdata::{
    make_world, sample_biometric_batch_from, sample_sync_batch_from, Clip, SyncBatch,
    SyntheticWorld, WorldConfig,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Which proxy task drives training.
///
/// `Biometric` trains the identity heads on distinct-identity batches with
/// an auxiliary content loss on the synchronisation task; `Sync` trains the
/// content heads on same-clip time-offset batches only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Biometric,
    Sync,
}

/// Held-out evaluation sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cbm_pairs: usize,
    pub cbm_positive_fraction: f64,
    pub sv_pairs: usize,
    pub sv_positive_fraction: f64,
    pub clips_per_test_identity: usize,
    pub recall_k: usize,
    pub probe_train_clips: usize,
    pub probe_test_clips: usize,
    pub probe_epochs: usize,
    pub probe_top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            // desk-scale mirror of the 300k/10k cross-modal pair protocol
            cbm_pairs: 3000,
            cbm_positive_fraction: 1.0 / 30.0,
            sv_pairs: 2000,
            sv_positive_fraction: 0.5,
            clips_per_test_identity: 2,
            recall_k: 10,
            probe_train_clips: 40,
            probe_test_clips: 20,
            probe_epochs: 150,
            probe_top_k: 5,
        }
    }
}

/// Complete description of one run; together with the code version this
/// fully determines every number in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub task: TaskKind,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub loss: LossSpec,
    /// Objective for the auxiliary content task; `None` mirrors `loss`.
    pub content_loss: Option<LossSpec>,
    pub lambda_content: f64,
    pub batch_size: usize,
    pub sync_batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub eval_every: usize,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            task: TaskKind::Biometric,
            hidden_dim: 32,
            output_dim: 16,
            activation: Activation::Tanh,
            loss: LossSpec::new(LossKind::Mwm, SimilarityKernel::default_angular()),
            content_loss: None,
            lambda_content: 1.0,
            batch_size: 40,
            sync_batch_size: 10,
            steps: 2000,
            optimizer: OptimizerConfig::default(),
            eval_every: 250,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Fill derived defaults so the written config is self-contained.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        if out.content_loss.is_none() {
            out.content_loss = Some(out.loss);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let train = ((self.world.num_identities as f64) * self.world.train_fraction).floor()
            as usize;
        let test = self.world.num_identities - train;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.task == TaskKind::Biometric && self.batch_size > train {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training identities",
                self.batch_size, train
            )));
        }
        if train == 0 {
            return Err(Error::Config("no training identities".into()));
        }
        if test < 2 {
            return Err(Error::Config(format!(
                "need at least 2 held-out identities for evaluation, have {test}"
            )));
        }
        if self.sync_batch_size == 0 || self.sync_batch_size > self.world.frames_per_clip {
            return Err(Error::Config(format!(
                "sync_batch_size {} must lie in 1..={}",
                self.sync_batch_size, self.world.frames_per_clip
            )));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("zero-width encoder dimension".into()));
        }
        if self.lambda_content < 0.0 || !self.lambda_content.is_finite() {
            return Err(Error::Config(format!(
                "lambda_content must be finite and non-negative, got {}",
                self.lambda_content
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.loss.kind == LossKind::PairwiseContrastive && !(self.loss.margin > 0.0) {
            return Err(Error::Config("contrastive margin must be positive".into()));
        }
        let e = &self.eval;
        if e.cbm_pairs < 2 || e.sv_pairs < 2 {
            return Err(Error::Config("trial counts must be at least 2".into()));
        }
        for fraction in [e.cbm_positive_fraction, e.sv_positive_fraction] {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::Config(format!(
                    "positive fractions must lie in (0, 1), got {fraction}"
                )));
            }
        }
        if e.clips_per_test_identity < 2 {
            return Err(Error::Config(
                "clips_per_test_identity must be at least 2 for verification positives".into(),
            ));
        }
        if e.recall_k == 0 {
            return Err(Error::Config("recall_k must be positive".into()));
        }
        if e.probe_train_clips == 0 || e.probe_test_clips == 0 || e.probe_epochs == 0 {
            return Err(Error::Config("probe sizes must be positive".into()));
        }
        if e.probe_top_k == 0 || e.probe_top_k > self.world.content_classes {
            return Err(Error::Config(format!(
                "probe_top_k {} must lie in 1..={}",
                e.probe_top_k, self.world.content_classes
            )));
        }
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn to_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Canonical short name of an objective, e.g. `cddl-angular`.
pub fn loss_name(spec: &LossSpec) -> String {
    let base = match spec.kind {
        LossKind::PairwiseContrastive => return "pairwise-contrastive".into(),
        LossKind::PairwiseBinary => return "pairwise-binary".into(),
        LossKind::Mwm => "mwm",
        LossKind::Cddl => "cddl",
    };
    let kernel = if spec.kernel.is_angular() {
        "angular"
    } else {
        "euclidean"
    };
    format!("{base}-{kernel}")
}

/// Parse a preset objective name (`mwm-angular`, `cddl-euclidean`,
/// `pairwise-contrastive`, `pairwise-binary`).
pub fn loss_preset(name: &str) -> Result<LossSpec> {
    let spec = match name {
        "mwm-angular" => LossSpec::new(LossKind::Mwm, SimilarityKernel::default_angular()),
        "mwm-euclidean" => LossSpec::new(LossKind::Mwm, SimilarityKernel::default_euclidean()),
        "cddl-angular" => LossSpec::new(LossKind::Cddl, SimilarityKernel::default_angular()),
        "cddl-euclidean" => LossSpec::new(LossKind::Cddl, SimilarityKernel::default_euclidean()),
        "pairwise-contrastive" => LossSpec::new(
            LossKind::PairwiseContrastive,
            SimilarityKernel::default_euclidean(),
        ),
        "pairwise-binary" => LossSpec::new(
            LossKind::PairwiseBinary,
            SimilarityKernel::default_euclidean(),
        ),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown loss preset '{other}' (try mwm-angular, mwm-euclidean, cddl-angular, \
                 cddl-euclidean, pairwise-contrastive, pairwise-binary)"
            )))
        }
    };
    Ok(spec)
}

/// Live model state: both encoders plus the learnable scalars of each
/// objective, addressable as a fixed list of flat tensors so the optimizer
/// and the finite-difference checks walk parameters identically.
#[derive(Debug, Clone)]
pub struct Model {
    pub enc_a: TwoHeadEncoder,
    pub enc_b: TwoHeadEncoder,
    id_spec: LossSpec,
    content_spec: LossSpec,
    id_kernel_params: [f64; 2],
    content_kernel_params: [f64; 2],
    id_binary: [f64; 2],
    content_binary: [f64; 2],
}

pub const MODEL_TENSOR_COUNT: usize = 16;

impl Model {
    pub fn init(config: &ExperimentConfig, world: &SyntheticWorld, rng: &mut Rng) -> Result<Model> {
        let content_spec = config.content_loss.unwrap_or(config.loss);
        Ok(Model {
            enc_a: TwoHeadEncoder::init(
                world.config().dim_a,
                config.hidden_dim,
                config.output_dim,
                config.activation,
                rng,
            )?,
            enc_b: TwoHeadEncoder::init(
                world.config().dim_b,
                config.hidden_dim,
                config.output_dim,
                config.activation,
                rng,
            )?,
            id_spec: config.loss,
            content_spec,
            id_kernel_params: kernel_params_of(&config.loss.kernel),
            content_kernel_params: kernel_params_of(&content_spec.kernel),
            id_binary: [1.0, 0.0],
            content_binary: [1.0, 0.0],
        })
    }

    /// Identity objective with its current learnable parameters.
    pub fn id_spec(&self) -> LossSpec {
        let mut spec = self.id_spec;
        spec.kernel
            .set_params(self.id_kernel_params[0], self.id_kernel_params[1]);
        spec
    }

    pub fn content_spec(&self) -> LossSpec {
        let mut spec = self.content_spec;
        spec.kernel
            .set_params(self.content_kernel_params[0], self.content_kernel_params[1]);
        spec
    }

    pub fn id_binary_head(&self) -> BinaryHead {
        BinaryHead {
            slope: self.id_binary[0],
            bias: self.id_binary[1],
        }
    }

    pub fn content_binary_head(&self) -> BinaryHead {
        BinaryHead {
            slope: self.content_binary[0],
            bias: self.content_binary[1],
        }
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut sizes = self.enc_a.tensor_sizes();
        sizes.extend(self.enc_b.tensor_sizes());
        sizes.extend([2, 2, 2, 2]);
        sizes
    }

    fn encoder_tensor_mut(enc: &mut TwoHeadEncoder, t: usize) -> &mut [f64] {
        match t {
            0 => enc.trunk.weight.data_mut(),
            1 => &mut enc.trunk.bias,
            2 => enc.id_head.weight.data_mut(),
            3 => &mut enc.id_head.bias,
            4 => enc.content_head.weight.data_mut(),
            5 => &mut enc.content_head.bias,
            _ => unreachable!(),
        }
    }

    pub fn tensor_mut(&mut self, t: usize) -> &mut [f64] {
        match t {
            0..=5 => Self::encoder_tensor_mut(&mut self.enc_a, t),
            6..=11 => Self::encoder_tensor_mut(&mut self.enc_b, t - 6),
            12 => &mut self.id_kernel_params,
            13 => &mut self.content_kernel_params,
            14 => &mut self.id_binary,
            15 => &mut self.content_binary,
            _ => unreachable!("tensor index {t}"),
        }
    }

    /// Copy with one parameter nudged; used by finite-difference checks.
    pub fn with_perturbed(&self, tensor: usize, index: usize, delta: f64) -> Model {
        let mut out = self.clone();
        out.tensor_mut(tensor)[index] += delta;
        out
    }

    pub fn apply_gradients(&mut self, opt: &mut OptimizerState, grads: &ModelGrads) -> Result<()> {
        opt.begin_step();
        for t in 0..MODEL_TENSOR_COUNT {
            let grad = grads.tensor(t).to_vec();
            opt.update(t, self.tensor_mut(t), &grad)?;
        }
        self.enc_a.bump_version();
        self.enc_b.bump_version();
        for t in 12..16 {
            if self.tensor_mut(t).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite learnable scalar in tensor {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, seed: u64) -> crate::encoders::CheckpointFile {
        crate::encoders::CheckpointFile {
            format_version: crate::encoders::CHECKPOINT_FORMAT_VERSION,
            seed,
            encoder_a: self.enc_a.clone(),
            encoder_b: self.enc_b.clone(),
            id_kernel: self.id_spec().kernel,
            content_kernel: self.content_spec().kernel,
        }
    }

    pub fn from_checkpoint(config: &ExperimentConfig, ckpt: crate::encoders::CheckpointFile) -> Model {
        let content_spec = config.content_loss.unwrap_or(config.loss);
        Model {
            enc_a: ckpt.encoder_a,
            enc_b: ckpt.encoder_b,
            id_spec: config.loss,
            content_spec,
            id_kernel_params: kernel_params_of(&ckpt.id_kernel),
            content_kernel_params: kernel_params_of(&ckpt.content_kernel),
            id_binary: [1.0, 0.0],
            content_binary: [1.0, 0.0],
        }
    }
}

fn kernel_params_of(kernel: &SimilarityKernel) -> [f64; 2] {
    let (w, b) = kernel.params();
    [w, b]
}

/// Gradients for every model tensor, in optimizer order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub enc_a: TwoHeadGrads,
    pub enc_b: TwoHeadGrads,
    pub id_kernel: [f64; 2],
    pub content_kernel: [f64; 2],
    pub id_binary: [f64; 2],
    pub content_binary: [f64; 2],
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> ModelGrads {
        ModelGrads {
            enc_a: model.enc_a.zero_grads(),
            enc_b: model.enc_b.zero_grads(),
            id_kernel: [0.0; 2],
            content_kernel: [0.0; 2],
            id_binary: [0.0; 2],
            content_binary: [0.0; 2],
        }
    }

    fn encoder_tensor(grads: &TwoHeadGrads, t: usize) -> &[f64] {
        match t {
            0 => grads.trunk.weight.data(),
            1 => &grads.trunk.bias,
            2 => grads.id_head.weight.data(),
            3 => &grads.id_head.bias,
            4 => grads.content_head.weight.data(),
            5 => &grads.content_head.bias,
            _ => unreachable!(),
        }
    }

    pub fn tensor(&self, t: usize) -> &[f64] {
        match t {
            0..=5 => Self::encoder_tensor(&self.enc_a, t),
            6..=11 => Self::encoder_tensor(&self.enc_b, t - 6),
            12 => &self.id_kernel,
            13 => &self.content_kernel,
            14 => &self.id_binary,
            15 => &self.content_binary,
            _ => unreachable!("tensor index {t}"),
        }
    }
}

/// Loss value and components of one objective evaluation, with gradients
/// already pushed back into model-tensor form.
struct ObjectiveOutcome {
    loss: LossResult,
    grads_a: TwoHeadGrads,
    grads_b: TwoHeadGrads,
    kernel_grad: [f64; 2],
    binary_grad: [f64; 2],
}

/// Identity objective on a biometric batch: embed every clip (mean pooling
/// on the audio-analogue stream, random-select on the visual-analogue
/// stream), evaluate the configured loss, and backprop into both encoders.
fn identity_objective(model: &Model, clips: &[Clip], pool_rng: &mut Rng) -> Result<ObjectiveOutcome> {
    let n = clips.len();
    let dim = model.enc_a.output_dim();
    let mut xa = Matrix::zeros(n, dim);
    let mut xv = Matrix::zeros(n, dim);
    let mut tapes = Vec::with_capacity(n);
    for (i, clip) in clips.iter().enumerate() {
        let (frames_a, tape_a) = model.enc_a.forward(&clip.frames_a, Head::Identity)?;
        let (pooled_a, choice_a) = pool(PoolingRule::MeanOverTime, &frames_a, pool_rng)?;
        xa.row_mut(i).copy_from_slice(&pooled_a);
        let (frames_b, tape_b) = model.enc_b.forward(&clip.frames_b, Head::Identity)?;
        let (pooled_b, choice_b) = pool(PoolingRule::RandomSelectOne, &frames_b, pool_rng)?;
        xv.row_mut(i).copy_from_slice(&pooled_b);
        tapes.push((tape_a, choice_a, tape_b, choice_b));
    }
    let loss = evaluate_batch(&model.id_spec(), &model.id_binary_head(), &xa, &xv)?;
    let mut grads_a = model.enc_a.zero_grads();
    let mut grads_b = model.enc_b.zero_grads();
    for (i, (tape_a, choice_a, tape_b, choice_b)) in tapes.iter().enumerate() {
        let up_a = pool_backward(*choice_a, loss.grad_a.row(i));
        let (ga, _) = model.enc_a.backward(tape_a, &up_a)?;
        grads_a.add(&ga, 1.0)?;
        let up_b = pool_backward(*choice_b, loss.grad_v.row(i));
        let (gb, _) = model.enc_b.backward(tape_b, &up_b)?;
        grads_b.add(&gb, 1.0)?;
    }
    let kernel_grad = [loss.grad_w, loss.grad_b];
    let binary_grad = if model.id_spec.kind == LossKind::PairwiseBinary {
        [loss.grad_w, loss.grad_b]
    } else {
        [0.0; 2]
    };
    let kernel_grad = if model.id_spec.kind == LossKind::PairwiseBinary {
        [0.0; 2]
    } else {
        kernel_grad
    };
    Ok(ObjectiveOutcome {
        loss,
        grads_a,
        grads_b,
        kernel_grad,
        binary_grad,
    })
}

/// Content objective on a sync batch: every row is a single-frame segment,
/// embedded through the content heads; the batch supplies same-clip
/// negatives at other timesteps.
fn content_objective(model: &Model, batch: &SyncBatch) -> Result<ObjectiveOutcome> {
    let (emb_a, tape_a) = model.enc_a.forward(&batch.frames_a, Head::Content)?;
    let (emb_b, tape_b) = model.enc_b.forward(&batch.frames_b, Head::Content)?;
    let loss = evaluate_batch(
        &model.content_spec(),
        &model.content_binary_head(),
        &emb_a,
        &emb_b,
    )?;
    let (grads_a, _) = model.enc_a.backward(&tape_a, &loss.grad_a)?;
    let (grads_b, _) = model.enc_b.backward(&tape_b, &loss.grad_v)?;
    let kernel_grad = [loss.grad_w, loss.grad_b];
    let binary_grad = if model.content_spec.kind == LossKind::PairwiseBinary {
        [loss.grad_w, loss.grad_b]
    } else {
        [0.0; 2]
    };
    let kernel_grad = if model.content_spec.kind == LossKind::PairwiseBinary {
        [0.0; 2]
    } else {
        kernel_grad
    };
    Ok(ObjectiveOutcome {
        loss,
        grads_a,
        grads_b,
        kernel_grad,
        binary_grad,
    })
}

/// Fixed held-out material built once per run: evaluation clips and the
/// generator snapshots that make every evaluation see the same trial pairs.
struct EvalFixture {
    cbm_clips: Vec<Clip>,
    sv_clips: Vec<Clip>,
    sv_labels: Vec<usize>,
    probe_train: Vec<Clip>,
    probe_test: Vec<Clip>,
    trial_rng: Rng,
    pool_rng: Rng,
}

impl EvalFixture {
    fn build(config: &ExperimentConfig, world: &SyntheticWorld, rng: &mut Rng) -> Result<Self> {
        let test_ids = world.test_identities();
        let train_ids = world.train_identities();
        let mut cbm_clips = Vec::with_capacity(test_ids.len());
        for &id in &test_ids {
            cbm_clips.push(world.sample_clip(id, rng)?);
        }
        let mut sv_clips = Vec::new();
        let mut sv_labels = Vec::new();
        for &id in &test_ids {
            for _ in 0..config.eval.clips_per_test_identity {
                sv_clips.push(world.sample_clip(id, rng)?);
                sv_labels.push(id);
            }
        }
        let mut probe_train = Vec::with_capacity(config.eval.probe_train_clips);
        for i in 0..config.eval.probe_train_clips {
            probe_train.push(world.sample_clip(train_ids[i % train_ids.len()], rng)?);
        }
        let mut probe_test = Vec::with_capacity(config.eval.probe_test_clips);
        for i in 0..config.eval.probe_test_clips {
            probe_test.push(world.sample_clip(test_ids[i % test_ids.len()], rng)?);
        }
        let trial_rng = rng.fork();
        let pool_rng = rng.fork();
        Ok(EvalFixture {
            cbm_clips,
            sv_clips,
            sv_labels,
            probe_train,
            probe_test,
            trial_rng,
            pool_rng,
        })
    }

    /// Identity embedding of one clip per stream (mean pooling for the
    /// audio-analogue, random-select for the visual-analogue).
    fn embed_identity(
        &self,
        model: &Model,
        clips: &[Clip],
        head_b_rng: &mut Rng,
    ) -> Result<(Matrix, Matrix)> {
        let dim = model.enc_a.output_dim();
        let mut emb_a = Matrix::zeros(clips.len(), dim);
        let mut emb_b = Matrix::zeros(clips.len(), dim);
        for (i, clip) in clips.iter().enumerate() {
            let (ya, _) = model.enc_a.forward(&clip.frames_a, Head::Identity)?;
            let (pa, _) = pool(PoolingRule::MeanOverTime, &ya, head_b_rng)?;
            emb_a.row_mut(i).copy_from_slice(&pa);
            let (yb, _) = model.enc_b.forward(&clip.frames_b, Head::Identity)?;
            let (pb, _) = pool(PoolingRule::RandomSelectOne, &yb, head_b_rng)?;
            emb_b.row_mut(i).copy_from_slice(&pb);
        }
        Ok((emb_a, emb_b))
    }

    /// Frame-level content features with their class labels.
    fn content_features(&self, model: &Model, clips: &[Clip]) -> Result<(Matrix, Vec<usize>)> {
        let dim = model.enc_a.output_dim();
        let total: usize = clips.iter().map(|c| c.frames_a.rows()).sum();
        let mut feats = Matrix::zeros(total, dim);
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for clip in clips {
            let (emb, _) = model.enc_a.forward(&clip.frames_a, Head::Content)?;
            for f in 0..emb.rows() {
                feats.row_mut(row).copy_from_slice(emb.row(f));
                labels.push(clip.content_classes[f]);
                row += 1;
            }
        }
        Ok((feats, labels))
    }

    fn evaluate(
        &self,
        config: &ExperimentConfig,
        world: &SyntheticWorld,
        model: &Model,
        step: usize,
    ) -> Result<MetricsPoint> {
        let mut pool_rng = self.pool_rng.clone();
        let mut trial_rng = self.trial_rng.clone();

        let (emb_a, emb_b) = self.embed_identity(model, &self.cbm_clips, &mut pool_rng)?;
        let cbm = cross_modal_trials(
            &emb_a,
            &emb_b,
            config.eval.cbm_pairs,
            config.eval.cbm_positive_fraction,
            &mut trial_rng,
        )?;
        let (cbm_eer, _) = eer(&cbm)?;
        let recall_at_1 = recall_at_k(&emb_a, &emb_b, 1)?;
        let k = config.eval.recall_k.min(emb_b.rows());
        let recall_k_value = recall_at_k(&emb_a, &emb_b, k)?;

        let (sv_a, sv_b) = self.embed_identity(model, &self.sv_clips, &mut pool_rng)?;
        let sv = verification_trials(
            &sv_a,
            &self.sv_labels,
            config.eval.sv_pairs,
            config.eval.sv_positive_fraction,
            &mut trial_rng,
        )?;
        let (sv_eer, _) = eer(&sv)?;
        let vv = verification_trials(
            &sv_b,
            &self.sv_labels,
            config.eval.sv_pairs,
            config.eval.sv_positive_fraction,
            &mut trial_rng,
        )?;
        let (vv_eer, _) = eer(&vv)?;

        let (train_feats, train_labels) = self.content_features(model, &self.probe_train)?;
        let (test_feats, test_labels) = self.content_features(model, &self.probe_test)?;
        let probe = linear_probe(
            &train_feats,
            &train_labels,
            &test_feats,
            &test_labels,
            world.config().content_classes,
            config.eval.probe_top_k,
            config.eval.probe_epochs,
        )?;

        Ok(MetricsPoint {
            step,
            seed: config.seed,
            cbm_eer,
            sv_eer,
            vv_eer,
            recall_at_1,
            recall_at_k: recall_k_value,
            recall_k: k,
            probe_top1: probe.top1,
            probe_topk: probe.topk,
        })
    }
}

/// A finished run: the report plus the final checkpoint.
pub struct RunOutcome {
    pub report: RunReport,
    pub checkpoint: crate::encoders::CheckpointFile,
}

/// Execute one training run. Deterministic given (config, seed): rerunning
/// produces numerically identical curves, metrics, and checkpoint.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let config = config.resolved();
    config.validate()?;
    let started = Instant::now();

    let mut root = Rng::new(config.seed);
    let world = make_world(config.world, root.next_u64())?;
    let mut init_rng = root.fork();
    let mut train_rng = root.fork();
    let mut eval_rng = root.fork();

    let mut model = Model::init(&config, &world, &mut init_rng)?;
    let fixture = EvalFixture::build(&config, &world, &mut eval_rng)?;
    let mut opt = OptimizerState::new(config.optimizer, &model.tensor_sizes());
    let train_ids = world.train_identities();

    let mut curves = Vec::with_capacity(config.steps);
    let mut metrics = vec![fixture.evaluate(&config, &world, &model, 0)?];

    for step_idx in 1..=config.steps {
        let mut grads = ModelGrads::zeros(&model);
        let mut total = 0.0;
        let mut point = CurvePoint {
            step: step_idx,
            total: 0.0,
            av: 0.0,
            va: 0.0,
            aav: 0.0,
            vva: 0.0,
        };

        if config.task == TaskKind::Biometric {
            let clips =
                sample_biometric_batch_from(&world, &train_ids, config.batch_size, &mut train_rng)?;
            let outcome = identity_objective(&model, &clips, &mut train_rng)?;
            total += outcome.loss.value;
            point.av = component(&outcome.loss, "AV");
            point.va = component(&outcome.loss, "VA");
            point.aav = component(&outcome.loss, "AAV");
            point.vva = component(&outcome.loss, "VVA");
            accumulate(&mut grads, &outcome, 1.0, KernelSlot::Identity)?;
        }

        let content_weight = match config.task {
            TaskKind::Biometric => config.lambda_content,
            TaskKind::Sync => 1.0,
        };
        if content_weight > 0.0 {
            let batch = sample_sync_batch_from(
                &world,
                &train_ids,
                config.sync_batch_size,
                &mut train_rng,
            )?;
            let outcome = content_objective(&model, &batch)?;
            total += content_weight * outcome.loss.value;
            if config.task == TaskKind::Sync {
                point.av = component(&outcome.loss, "AV");
                point.va = component(&outcome.loss, "VA");
                point.aav = component(&outcome.loss, "AAV");
                point.vva = component(&outcome.loss, "VVA");
            }
            accumulate(&mut grads, &outcome, content_weight, KernelSlot::Content)?;
        }

        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at step {step_idx} (seed {})",
                config.seed
            )));
        }
        model.apply_gradients(&mut opt, &grads)?;

        point.total = total;
        curves.push(point);

        if step_idx % config.eval_every == 0 && step_idx != config.steps {
            metrics.push(fixture.evaluate(&config, &world, &model, step_idx)?);
        }
    }
    if config.steps > 0 {
        metrics.push(fixture.evaluate(&config, &world, &model, config.steps)?);
    }

    let final_metrics = *metrics.last().expect("at least the initial metrics");
    let checkpoint = model.checkpoint(config.seed);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.seed,
        config,
        curves,
        metrics,
        final_metrics,
        checkpoint: None,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, checkpoint })
}

/// Re-evaluate a trained model on freshly built held-out fixtures.
pub fn evaluate_checkpoint(config: &ExperimentConfig, model: &Model) -> Result<MetricsPoint> {
    let config = config.resolved();
    config.validate()?;
    let mut root = Rng::new(config.seed);
    let world = make_world(config.world, root.next_u64())?;
    let _init = root.fork();
    let _train = root.fork();
    let mut eval_rng = root.fork();
    let fixture = EvalFixture::build(&config, &world, &mut eval_rng)?;
    fixture.evaluate(&config, &world, model, 0)
}

enum KernelSlot {
    Identity,
    Content,
}

fn accumulate(
    grads: &mut ModelGrads,
    outcome: &ObjectiveOutcome,
    scale: f64,
    slot: KernelSlot,
) -> Result<()> {
    grads.enc_a.add(&outcome.grads_a, scale)?;
    grads.enc_b.add(&outcome.grads_b, scale)?;
    let (kernel, binary) = match slot {
        KernelSlot::Identity => (&mut grads.id_kernel, &mut grads.id_binary),
        KernelSlot::Content => (&mut grads.content_kernel, &mut grads.content_binary),
    };
    kernel[0] += scale * outcome.kernel_grad[0];
    kernel[1] += scale * outcome.kernel_grad[1];
    binary[0] += scale * outcome.binary_grad[0];
    binary[1] += scale * outcome.binary_grad[1];
    Ok(())
}

fn component(loss: &LossResult, key: &str) -> f64 {
    loss.components.get(key).copied().unwrap_or(0.0)
}

/// Strip the objective fields so controlled comparisons can verify that
/// nothing else differs between configs.
fn without_loss_fields(config: &ExperimentConfig) -> ExperimentConfig {
    let mut out = config.clone();
    out.loss = LossSpec::new(LossKind::Mwm, SimilarityKernel::default_angular());
    out.content_loss = None;
    out
}

/// Run every config under every seed and aggregate final metrics per
/// objective. Configs must be identical apart from their loss
/// specification; `threads` caps parallel runs (1 = sequential).
pub fn compare_losses(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    threads: usize,
) -> Result<crate::report::ComparisonReport> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "comparison needs at least one config and one seed".into(),
        ));
    }
    let reference = without_loss_fields(&configs[0]);
    for (i, config) in configs.iter().enumerate().skip(1) {
        if without_loss_fields(config) != reference {
            return Err(Error::InvalidArgument(format!(
                "config {i} differs from config 0 outside the loss specification"
            )));
        }
    }

    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| seeds.iter().map(move |&s| (ci, s)))
        .collect();

    let mut results: Vec<Option<Result<MetricsPoint>>> = (0..jobs.len()).map(|_| None).collect();
    let threads = threads.max(1).min(jobs.len());
    if threads == 1 {
        for (slot, &(ci, seed)) in jobs.iter().enumerate() {
            let mut config = configs[ci].clone();
            config.seed = seed;
            results[slot] = Some(run_experiment(&config).map(|o| o.report.final_metrics));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let shared: Vec<std::sync::Mutex<Option<Result<MetricsPoint>>>> =
            (0..jobs.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let slot = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if slot >= jobs.len() {
                        break;
                    }
                    let (ci, seed) = jobs[slot];
                    let mut config = configs[ci].clone();
                    config.seed = seed;
                    let outcome = run_experiment(&config).map(|o| o.report.final_metrics);
                    *shared[slot].lock().unwrap() = Some(outcome);
                });
            }
        });
        for (slot, cell) in shared.into_iter().enumerate() {
            results[slot] = cell.into_inner().unwrap();
        }
    }

    let mut rows = Vec::with_capacity(jobs.len());
    for (slot, &(ci, _)) in jobs.iter().enumerate() {
        let metrics = results[slot]
            .take()
            .expect("every job slot filled")?;
        rows.push(crate::report::ComparisonRow {
            name: loss_name(&configs[ci].loss),
            metrics,
        });
    }

    let per_config = seeds.len();
    let mut summaries = Vec::with_capacity(configs.len());
    for (ci, config) in configs.iter().enumerate() {
        let slice = &rows[ci * per_config..(ci + 1) * per_config];
        let mean = |f: fn(&MetricsPoint) -> f64| {
            slice.iter().map(|r| f(&r.metrics)).sum::<f64>() / per_config as f64
        };
        summaries.push(crate::report::ComparisonSummary {
            name: loss_name(&config.loss),
            seeds: seeds.to_vec(),
            mean_cbm_eer: mean(|m| m.cbm_eer),
            mean_sv_eer: mean(|m| m.sv_eer),
            mean_vv_eer: mean(|m| m.vv_eer),
            mean_recall_at_1: mean(|m| m.recall_at_1),
            mean_recall_at_k: mean(|m| m.recall_at_k),
            mean_probe_top1: mean(|m| m.probe_top1),
        });
    }
    let deltas = summaries
        .iter()
        .skip(1)
        .map(|s| crate::report::ComparisonDelta {
            name: s.name.clone(),
            baseline: summaries[0].name.clone(),
            d_cbm_eer: s.mean_cbm_eer - summaries[0].mean_cbm_eer,
            d_sv_eer: s.mean_sv_eer - summaries[0].mean_sv_eer,
            d_probe_top1: s.mean_probe_top1 - summaries[0].mean_probe_top1,
        })
        .collect();

    Ok(crate::report::ComparisonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        summaries,
        deltas,
    })
}

/// Full-pipeline gradient check: a miniature training step (both encoders,
/// pooling, identity objective plus weighted content objective, learnable
/// scalars) compared against central finite differences over every
/// parameter tensor. Returns the worst relative error.
pub fn pipeline_grad_check(spec: &LossSpec, seed: u64) -> Result<f64> {
    const H: f64 = 1e-6;
    let dims = (4usize, 5usize, 6usize, 3usize); // in_a, in_b, hidden, out
    let n = 4;
    let frames = 3;
    let sync_n = 3;
    let lambda = 0.7;

    let mut rng = Rng::new(seed);
    let config = ExperimentConfig {
        loss: *spec,
        content_loss: Some(*spec),
        hidden_dim: dims.2,
        output_dim: dims.3,
        ..ExperimentConfig::default()
    };
    let world_cfg = WorldConfig {
        dim_a: dims.0,
        dim_b: dims.1,
        num_identities: 8,
        ..WorldConfig::default()
    };
    let world = make_world(world_cfg, rng.next_u64())?;
    let mut model = Model::init(&config, &world, &mut rng)?;
    // nudge the binary heads off their init so their gradients are generic
    model.id_binary = [0.8, -0.2];
    model.content_binary = [1.1, 0.3];

    let clips: Vec<Clip> = (0..n)
        .map(|i| Clip {
            identity_id: i,
            frames_a: Matrix::from_fn(frames, dims.0, |_, _| rng.normal()),
            frames_b: Matrix::from_fn(frames, dims.1, |_, _| rng.normal()),
            content_latents: Matrix::zeros(frames, world_cfg.content_dim),
            content_classes: vec![0; frames],
        })
        .collect();
    let sync = SyncBatch {
        identity_id: 0,
        timesteps: (0..sync_n).collect(),
        frames_a: Matrix::from_fn(sync_n, dims.0, |_, _| rng.normal()),
        frames_b: Matrix::from_fn(sync_n, dims.1, |_, _| rng.normal()),
        content_classes: vec![0; sync_n],
    };

    let pool_seed = rng.next_u64();
    let objective = |m: &Model| -> Result<f64> {
        let mut pool_rng = Rng::new(pool_seed);
        let id = identity_objective(m, &clips, &mut pool_rng)?;
        let content = content_objective(m, &sync)?;
        Ok(id.loss.value + lambda * content.loss.value)
    };

    // analytic gradients assembled exactly as a training step does
    let mut grads = ModelGrads::zeros(&model);
    {
        let mut pool_rng = Rng::new(pool_seed);
        let id = identity_objective(&model, &clips, &mut pool_rng)?;
        accumulate(&mut grads, &id, 1.0, KernelSlot::Identity)?;
        let content = content_objective(&model, &sync)?;
        accumulate(&mut grads, &content, lambda, KernelSlot::Content)?;
    }

    let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(1.0);
    let sizes = model.tensor_sizes();
    let mut worst: f64 = 0.0;
    for t in 0..MODEL_TENSOR_COUNT {
        for i in 0..sizes[t] {
            let hi = objective(&model.with_perturbed(t, i, H))?;
            let lo = objective(&model.with_perturbed(t, i, -H))?;
            let numeric = (hi - lo) / (2.0 * H);
            worst = worst.max(rel(grads.tensor(t)[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small world and short schedule so unit tests stay fast.
    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            world: WorldConfig {
                num_identities: 30,
                identity_dim: 6,
                content_dim: 3,
                content_classes: 8,
                frames_per_clip: 5,
                noise_sigma: 0.05,
                content_jitter: 0.1,
                dim_a: 12,
                dim_b: 16,
                train_fraction: 0.8,
            },
            hidden_dim: 12,
            output_dim: 8,
            batch_size: 12,
            sync_batch_size: 5,
            steps: 30,
            eval_every: 15,
            eval: EvalConfig {
                cbm_pairs: 300,
                cbm_positive_fraction: 0.2,
                sv_pairs: 200,
                sv_positive_fraction: 0.5,
                clips_per_test_identity: 2,
                recall_k: 3,
                probe_train_clips: 12,
                probe_test_clips: 6,
                probe_epochs: 40,
                probe_top_k: 3,
            },
            seed: 7,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_steps_reports_initial_metrics_near_chance() {
        let config = ExperimentConfig {
            steps: 0,
            ..tiny_config()
        };
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.report.curves.len(), 0);
        assert_eq!(outcome.report.metrics.len(), 1);
        let m = &outcome.report.final_metrics;
        assert_eq!(m.step, 0);
        // untrained encoders know nothing about identity
        assert!((m.cbm_eer - 0.5).abs() < 0.2, "cbm {}", m.cbm_eer);
        assert!((m.sv_eer - 0.5).abs() < 0.2, "sv {}", m.sv_eer);
    }

    #[test]
    fn same_config_and_seed_reproduce_bit_identical_reports() {
        let config = tiny_config();
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.report.curves, b.report.curves);
        assert_eq!(a.report.metrics, b.report.metrics);
        assert_eq!(a.checkpoint.encoder_a, b.checkpoint.encoder_a);
        let json_a = a.report.to_json().unwrap();
        let json_b = b.report.to_json().unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn different_seeds_differ() {
        let mut config = tiny_config();
        let a = run_experiment(&config).unwrap();
        config.seed = 8;
        let b = run_experiment(&config).unwrap();
        assert_ne!(a.report.curves, b.report.curves);
    }

    #[test]
    fn losses_stay_finite_and_curves_cover_every_step() {
        let config = tiny_config();
        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.report.curves.len(), config.steps);
        for (i, p) in outcome.report.curves.iter().enumerate() {
            assert_eq!(p.step, i + 1);
            assert!(p.total.is_finite());
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let config = ExperimentConfig {
            steps: 200,
            ..tiny_config()
        };
        let outcome = run_experiment(&config).unwrap();
        let curves = &outcome.report.curves;
        let head: f64 = curves[..20].iter().map(|p| p.total).sum::<f64>() / 20.0;
        let tail: f64 = curves[curves.len() - 20..]
            .iter()
            .map(|p| p.total)
            .sum::<f64>()
            / 20.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn invalid_config_rejected_before_training() {
        let mut config = tiny_config();
        config.batch_size = 1000; // more than the training identities
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));

        let mut config = tiny_config();
        config.sync_batch_size = 99; // longer than a clip
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
    }

    #[test]
    fn cddl_curves_populate_all_components() {
        let config = ExperimentConfig {
            loss: LossSpec::new(LossKind::Cddl, SimilarityKernel::default_angular()),
            steps: 3,
            ..tiny_config()
        };
        let outcome = run_experiment(&config).unwrap();
        let p = &outcome.report.curves[0];
        assert!(p.av > 0.0 && p.va > 0.0 && p.aav > 0.0 && p.vva > 0.0);
    }

    #[test]
    fn compare_rejects_mismatched_configs() {
        let a = tiny_config();
        let mut b = tiny_config();
        b.loss = LossSpec::new(LossKind::Cddl, SimilarityKernel::default_angular());
        b.batch_size += 1; // non-loss field differs
        assert!(compare_losses(&[a, b], &[1], 1).is_err());
    }

    #[test]
    fn compare_identical_specs_produce_identical_rows() {
        let config = ExperimentConfig {
            steps: 10,
            ..tiny_config()
        };
        let report = compare_losses(&[config.clone(), config], &[3, 4], 1).unwrap();
        assert_eq!(report.rows.len(), 4);
        for s in 0..2 {
            assert_eq!(report.rows[s].metrics, report.rows[2 + s].metrics);
        }
        assert_eq!(report.deltas.len(), 1);
        assert_eq!(report.deltas[0].d_sv_eer, 0.0);
    }

    #[test]
    fn compare_parallel_equals_sequential() {
        let base = ExperimentConfig {
            steps: 8,
            ..tiny_config()
        };
        let mut cddl = base.clone();
        cddl.loss = LossSpec::new(LossKind::Cddl, SimilarityKernel::default_angular());
        let seq = compare_losses(&[base.clone(), cddl.clone()], &[1, 2], 1).unwrap();
        let par = compare_losses(&[base, cddl], &[1, 2], 4).unwrap();
        assert_eq!(seq.rows.len(), par.rows.len());
        for (a, b) in seq.rows.iter().zip(&par.rows) {
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn pipeline_grad_check_all_objectives() {
        for (spec, seed) in [
            (LossSpec::new(LossKind::Mwm, SimilarityKernel::default_angular()), 1),
            (LossSpec::new(LossKind::Cddl, SimilarityKernel::default_angular()), 2),
            (LossSpec::new(LossKind::Mwm, SimilarityKernel::default_euclidean()), 3),
            (LossSpec::new(LossKind::Cddl, SimilarityKernel::default_euclidean()), 4),
            (
                LossSpec::new(
                    LossKind::PairwiseContrastive,
                    SimilarityKernel::default_euclidean(),
                ),
                5,
            ),
            (
                LossSpec::new(
                    LossKind::PairwiseBinary,
                    SimilarityKernel::default_euclidean(),
                ),
                6,
            ),
        ] {
            let worst = pipeline_grad_check(&spec, seed).unwrap();
            assert!(worst < 1e-5, "{}: worst {worst}", loss_name(&spec));
        }
    }

    #[test]
    fn sync_task_trains_content_features() {
        let config = ExperimentConfig {
            task: TaskKind::Sync,
            loss: LossSpec::new(LossKind::Mwm, SimilarityKernel::default_angular()),
            steps: 150,
            ..tiny_config()
        };
        let outcome = run_experiment(&config).unwrap();
        let first = &outcome.report.metrics[0];
        let last = &outcome.report.final_metrics;
        // the probe should beat its untrained starting point
        assert!(
            last.probe_top1 > first.probe_top1,
            "probe {} -> {}",
            first.probe_top1,
            last.probe_top1
        );
    }

    #[test]
    fn loss_names_round_trip_known_presets() {
        for name in [
            "mwm-angular",
            "mwm-euclidean",
            "cddl-angular",
            "cddl-euclidean",
            "pairwise-contrastive",
            "pairwise-binary",
        ] {
            let spec = loss_preset(name).unwrap();
            assert_eq!(loss_name(&spec), name);
        }
        assert!(loss_preset("nonsense").is_err());
    }

    #[test]
    fn config_json_round_trip_and_unknown_key_rejection() {
        let config = tiny_config().resolved();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);

        let with_typo = json.replace("\"batch_size\"", "\"batch_sizes\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&with_typo).is_err());
    }
}

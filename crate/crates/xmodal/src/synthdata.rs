//! Synthetic cross-modal world: paired samples are rendered from shared
//! latent identity and content factors through fixed per-modality maps, so
//! an audio-analogue clip and its visual-analogue clip agree on identity by
//! construction. This supplies the co-occurrence supervision that real
//! facetracks provide, at desk scale and with known ground truth.

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// World geometry and noise. Modality dims are asymmetric so the two
/// streams cannot accidentally share weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub identity_dim: usize,
    pub content_dim: usize,
    /// Discrete content states (the word-class analogue for the probe).
    pub content_classes: usize,
    pub frames_per_clip: usize,
    pub noise_sigma: f64,
    /// Within-class spread of content latents around their codebook entry.
    pub content_jitter: f64,
    /// Per-clip, per-modality latent nuisance (the session/channel effect):
    /// constant over a clip's frames, independent between modalities, so
    /// within-modality verification has to learn invariance to it.
    pub channel_sigma: f64,
    /// Scale of the rendering map's weights; larger values push the tanh
    /// into saturation so latent factors are not linearly readable.
    pub render_gain: f64,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Leading fraction of identities used for training; the rest are the
    /// held-out evaluation split.
    pub train_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_identities: 500,
            identity_dim: 8,
            content_dim: 4,
            content_classes: 20,
            frames_per_clip: 10,
            noise_sigma: 0.1,
            content_jitter: 0.1,
            channel_sigma: 1.2,
            render_gain: 2.0,
            dim_a: 32,
            dim_b: 48,
            train_fraction: 0.8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::InvalidArgument("world needs identities".into()));
        }
        if self.identity_dim == 0
            || self.content_dim == 0
            || self.content_classes == 0
            || self.frames_per_clip == 0
            || self.dim_a == 0
            || self.dim_b == 0
        {
            return Err(Error::InvalidArgument("zero-sized world dimension".into()));
        }
        if self.noise_sigma < 0.0 || self.content_jitter < 0.0 || self.channel_sigma < 0.0 {
            return Err(Error::InvalidArgument("negative noise level".into()));
        }
        if !(self.render_gain > 0.0) || !self.render_gain.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "render_gain must be positive and finite, got {}",
                self.render_gain
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must lie in [0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Fixed affine map followed by elementwise tanh. The nonlinearity keeps the
/// cross-modal relation non-trivially invertible, so encoders must learn it
/// rather than copy coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderMap {
    weight: Matrix, // out_dim x (identity_dim + content_dim)
    bias: Vec<f64>,
}

impl RenderMap {
    fn init(latent_dim: usize, out_dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let scale = gain / (latent_dim as f64).sqrt();
        RenderMap {
            weight: Matrix::from_fn(out_dim, latent_dim, |_, _| rng.normal() * scale),
            bias: (0..out_dim).map(|_| rng.normal() * 0.5).collect(),
        }
    }

    fn render(&self, latent: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bias.len());
        for i in 0..self.bias.len() {
            let mut acc = self.bias[i];
            for (j, v) in latent.iter().enumerate() {
                acc += self.weight.get(i, j) * v;
            }
            out.push(acc.tanh());
        }
        out
    }
}

/// One facetrack-analogue: T frames per modality rendered from a single
/// identity latent and per-frame content latents, plus independent noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub identity_id: usize,
    pub frames_a: Matrix,
    pub frames_b: Matrix,
    pub content_latents: Matrix,
    /// Codebook index behind each frame's content latent.
    pub content_classes: Vec<usize>,
}

/// Latent tables and rendering maps, fixed at creation from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    config: WorldConfig,
    seed: u64,
    identity_table: Matrix,
    content_codebook: Matrix,
    render_a: RenderMap,
    render_b: RenderMap,
}

/// Deterministic world from (config, seed). Identity latents and codebook
/// entries are i.i.d. standard normal.
pub fn make_world(config: WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let identity_table =
        Matrix::from_fn(config.num_identities, config.identity_dim, |_, _| rng.normal());
    let content_codebook =
        Matrix::from_fn(config.content_classes, config.content_dim, |_, _| rng.normal());
    let latent_dim = config.identity_dim + config.content_dim;
    let render_a = RenderMap::init(latent_dim, config.dim_a, config.render_gain, &mut rng);
    let render_b = RenderMap::init(latent_dim, config.dim_b, config.render_gain, &mut rng);
    Ok(SyntheticWorld {
        config,
        seed,
        identity_table,
        content_codebook,
        render_a,
        render_b,
    })
}

impl SyntheticWorld {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn identity_table(&self) -> &Matrix {
        &self.identity_table
    }

    pub fn num_identities(&self) -> usize {
        self.config.num_identities
    }

    /// Identities available for training (leading split).
    pub fn train_identities(&self) -> Vec<usize> {
        (0..self.split_point()).collect()
    }

    /// Held-out identities, disjoint from training.
    pub fn test_identities(&self) -> Vec<usize> {
        (self.split_point()..self.config.num_identities).collect()
    }

    fn split_point(&self) -> usize {
        ((self.config.num_identities as f64) * self.config.train_fraction).floor() as usize
    }

    /// The noise- and channel-free rendering of an identity with zero
    /// content: the part of the signal driven by identity alone.
    pub fn identity_component(&self, identity_id: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_identity(identity_id)?;
        let mut latent = self.identity_table.row(identity_id).to_vec();
        latent.extend(std::iter::repeat_n(0.0, self.config.content_dim));
        Ok((self.render_a.render(&latent), self.render_b.render(&latent)))
    }

    fn check_identity(&self, identity_id: usize) -> Result<()> {
        if identity_id >= self.config.num_identities {
            return Err(Error::InvalidArgument(format!(
                "identity {identity_id} out of range ({} identities)",
                self.config.num_identities
            )));
        }
        Ok(())
    }

    /// Render a clip from explicit content latents (one row per frame).
    /// Both modalities see the same latents; noise is drawn independently.
    pub fn render_clip(
        &self,
        identity_id: usize,
        content_latents: &Matrix,
        content_classes: Vec<usize>,
        rng: &mut Rng,
    ) -> Result<Clip> {
        self.check_identity(identity_id)?;
        if content_latents.cols() != self.config.content_dim {
            return Err(Error::ShapeMismatch(format!(
                "content dim {} vs world {}",
                content_latents.cols(),
                self.config.content_dim
            )));
        }
        if content_classes.len() != content_latents.rows() {
            return Err(Error::ShapeMismatch(
                "one content class per frame required".into(),
            ));
        }
        let t = content_latents.rows();
        let id = self.identity_table.row(identity_id);
        let latent_dim = self.config.identity_dim + self.config.content_dim;
        // one channel vector per modality, shared by all frames of the clip
        let channel_a: Vec<f64> = (0..latent_dim)
            .map(|_| self.config.channel_sigma * rng.normal())
            .collect();
        let channel_b: Vec<f64> = (0..latent_dim)
            .map(|_| self.config.channel_sigma * rng.normal())
            .collect();
        let mut frames_a = Matrix::zeros(t, self.config.dim_a);
        let mut frames_b = Matrix::zeros(t, self.config.dim_b);
        let mut latent = vec![0.0; latent_dim];
        for f in 0..t {
            latent[..id.len()].copy_from_slice(id);
            latent[id.len()..].copy_from_slice(content_latents.row(f));
            for (v, c) in latent.iter_mut().zip(&channel_a) {
                *v += c;
            }
            let a = self.render_a.render(&latent);
            for (j, v) in a.iter().enumerate() {
                frames_a.set(f, j, v + self.config.noise_sigma * rng.normal());
            }
            latent[..id.len()].copy_from_slice(id);
            latent[id.len()..].copy_from_slice(content_latents.row(f));
            for (v, c) in latent.iter_mut().zip(&channel_b) {
                *v += c;
            }
            let b = self.render_b.render(&latent);
            for (j, v) in b.iter().enumerate() {
                frames_b.set(f, j, v + self.config.noise_sigma * rng.normal());
            }
        }
        Ok(Clip {
            identity_id,
            frames_a,
            frames_b,
            content_latents: content_latents.clone(),
            content_classes,
        })
    }

    /// Sample a clip: per-frame content class from the codebook plus jitter.
    pub fn sample_clip(&self, identity_id: usize, rng: &mut Rng) -> Result<Clip> {
        let t = self.config.frames_per_clip;
        let mut classes = Vec::with_capacity(t);
        let mut latents = Matrix::zeros(t, self.config.content_dim);
        for f in 0..t {
            let class = rng.below(self.config.content_classes);
            classes.push(class);
            for j in 0..self.config.content_dim {
                latents.set(
                    f,
                    j,
                    self.content_codebook.get(class, j) + self.config.content_jitter * rng.normal(),
                );
            }
        }
        self.render_clip(identity_id, &latents, classes, rng)
    }
}

/// `n` clips from `n` distinct identities drawn over the whole world; row j
/// of each modality is the matched pair. Distinctness is a hard guarantee:
/// every non-matching pair really is a different identity.
pub fn sample_biometric_batch(
    world: &SyntheticWorld,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Clip>> {
    let all: Vec<usize> = (0..world.num_identities()).collect();
    sample_biometric_batch_from(world, &all, n, rng)
}

/// As [`sample_biometric_batch`] but drawing identities from a caller-chosen
/// pool (e.g. the training split).
pub fn sample_biometric_batch_from(
    world: &SyntheticWorld,
    pool: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Clip>> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty biometric batch".into()));
    }
    if n > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} distinct identities from a pool of {}",
            pool.len()
        )));
    }
    let picks = rng.choose_distinct(pool.len(), n);
    picks
        .into_iter()
        .map(|i| world.sample_clip(pool[i], rng))
        .collect()
}

/// Aligned same-timestep pairs from one clip: identity is constant, so only
/// content distinguishes positives from the other-timestep negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncBatch {
    pub identity_id: usize,
    pub timesteps: Vec<usize>,
    pub frames_a: Matrix,
    pub frames_b: Matrix,
    pub content_classes: Vec<usize>,
}

/// Draw a fresh clip from a random identity of the pool and take `n`
/// distinct timesteps of it.
pub fn sample_sync_batch_from(
    world: &SyntheticWorld,
    pool: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<SyncBatch> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty identity pool".into()));
    }
    let identity_id = pool[rng.below(pool.len())];
    let clip = world.sample_clip(identity_id, rng)?;
    sync_batch_of_clip(&clip, n, rng)
}

/// As [`sample_sync_batch_from`] over the whole world.
pub fn sample_sync_batch(world: &SyntheticWorld, n: usize, rng: &mut Rng) -> Result<SyncBatch> {
    let all: Vec<usize> = (0..world.num_identities()).collect();
    sample_sync_batch_from(world, &all, n, rng)
}

/// Pick `n` distinct timesteps of an existing clip.
pub fn sync_batch_of_clip(clip: &Clip, n: usize, rng: &mut Rng) -> Result<SyncBatch> {
    let t = clip.frames_a.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty sync batch".into()));
    }
    if n > t {
        return Err(Error::InvalidArgument(format!(
            "sync batch of {n} timesteps from a {t}-frame clip"
        )));
    }
    let timesteps = rng.choose_distinct(t, n);
    let frames_a = Matrix::from_fn(n, clip.frames_a.cols(), |i, j| {
        clip.frames_a.get(timesteps[i], j)
    });
    let frames_b = Matrix::from_fn(n, clip.frames_b.cols(), |i, j| {
        clip.frames_b.get(timesteps[i], j)
    });
    let content_classes = timesteps.iter().map(|&f| clip.content_classes[f]).collect();
    Ok(SyncBatch {
        identity_id: clip.identity_id,
        timesteps,
        frames_a,
        frames_b,
        content_classes,
    })
}

pub const WORLD_FORMAT_VERSION: u32 = 1;

/// Versioned world dump for cross-implementation fixtures.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub format_version: u32,
    pub world: SyntheticWorld,
}

impl WorldFile {
    pub fn save(world: &SyntheticWorld, path: &std::path::Path) -> Result<()> {
        let file = WorldFile {
            format_version: WORLD_FORMAT_VERSION,
            world: world.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SyntheticWorld> {
        let file: WorldFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported world format {}, expected {}",
                file.format_version, WORLD_FORMAT_VERSION
            )));
        }
        file.world.config.validate()?;
        Ok(file.world)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::loss_av;
    use crate::similarity::SimilarityKernel;

    fn small_config() -> WorldConfig {
        WorldConfig {
            num_identities: 12,
            identity_dim: 4,
            content_dim: 3,
            content_classes: 5,
            frames_per_clip: 6,
            noise_sigma: 0.05,
            content_jitter: 0.1,
            channel_sigma: 0.8,
            render_gain: 2.0,
            dim_a: 7,
            dim_b: 9,
            train_fraction: 0.75,
        }
    }

    #[test]
    fn same_seed_same_world() {
        let w1 = make_world(small_config(), 42).unwrap();
        let w2 = make_world(small_config(), 42).unwrap();
        assert_eq!(w1, w2);
        let w3 = make_world(small_config(), 43).unwrap();
        assert_ne!(w1.identity_table(), w3.identity_table());
    }

    #[test]
    fn zero_identities_rejected() {
        let cfg = WorldConfig {
            num_identities: 0,
            ..small_config()
        };
        assert!(make_world(cfg, 1).is_err());
    }

    #[test]
    fn identity_component_fixed_per_identity_and_distinct_across() {
        let world = make_world(small_config(), 7).unwrap();
        let (a1, b1) = world.identity_component(3).unwrap();
        let (a2, b2) = world.identity_component(3).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let (a3, _) = world.identity_component(4).unwrap();
        let dist: f64 = a1
            .iter()
            .zip(&a3)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn noiseless_clips_share_identity_signal() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            channel_sigma: 0.0,
            ..small_config()
        };
        let world = make_world(cfg, 11).unwrap();
        // constant zero content, no noise, no channel: the rendered frames
        // are exactly the identity component in both clips
        let latents = Matrix::zeros(4, cfg.content_dim);
        let mut rng = Rng::new(1);
        let c1 = world
            .render_clip(2, &latents, vec![0; 4], &mut rng)
            .unwrap();
        let c2 = world
            .render_clip(2, &latents, vec![0; 4], &mut rng)
            .unwrap();
        assert_eq!(c1.frames_a, c2.frames_a);
        let (id_a, _) = world.identity_component(2).unwrap();
        assert_eq!(c1.frames_a.row(0), id_a.as_slice());
    }

    #[test]
    fn latent_table_column_means_near_zero() {
        let world = make_world(WorldConfig::default(), 123).unwrap();
        let n = world.config().num_identities as f64;
        let bound = 3.0 / n.sqrt(); // 3 sigma / sqrt(n), unit-variance latents
        for mean in world.identity_table().column_means() {
            assert!(mean.abs() < bound, "column mean {mean} vs bound {bound}");
        }
    }

    #[test]
    fn biometric_batch_uses_all_identities_when_full() {
        let world = make_world(small_config(), 3).unwrap();
        let mut rng = Rng::new(5);
        let clips = sample_biometric_batch(&world, 12, &mut rng).unwrap();
        let mut ids: Vec<usize> = clips.iter().map(|c| c.identity_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn biometric_batch_never_repeats_identities() {
        let world = make_world(small_config(), 3).unwrap();
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let clips = sample_biometric_batch(&world, 8, &mut rng).unwrap();
            let mut ids: Vec<usize> = clips.iter().map(|c| c.identity_id).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 8);
        }
    }

    #[test]
    fn biometric_batch_too_large_errors() {
        let world = make_world(small_config(), 3).unwrap();
        let mut rng = Rng::new(7);
        assert!(sample_biometric_batch(&world, 13, &mut rng).is_err());
    }

    #[test]
    fn biometric_sampling_roughly_uniform() {
        let world = make_world(small_config(), 3).unwrap();
        let mut rng = Rng::new(8);
        let mut counts = vec![0usize; 12];
        let draws = 3000;
        for _ in 0..draws {
            let clips = sample_biometric_batch(&world, 1, &mut rng).unwrap();
            counts[clips[0].identity_id] += 1;
        }
        let expected = draws as f64 / 12.0;
        let tol = 5.0 * expected.sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < tol, "count {c} vs {expected}");
        }
    }

    #[test]
    fn sync_batch_full_clip_uses_each_timestep_once() {
        let world = make_world(small_config(), 9).unwrap();
        let mut rng = Rng::new(10);
        let batch = sample_sync_batch(&world, 6, &mut rng).unwrap();
        let mut ts = batch.timesteps.clone();
        ts.sort_unstable();
        assert_eq!(ts, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn sync_batch_exceeding_clip_length_errors() {
        let world = make_world(small_config(), 9).unwrap();
        let mut rng = Rng::new(10);
        assert!(sample_sync_batch(&world, 7, &mut rng).is_err());
    }

    #[test]
    fn sync_batch_replays_with_seed() {
        let world = make_world(small_config(), 9).unwrap();
        let b1 = sample_sync_batch(&world, 4, &mut Rng::new(77)).unwrap();
        let b2 = sample_sync_batch(&world, 4, &mut Rng::new(77)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn constant_content_noiseless_sync_batch_scores_at_chance() {
        // all timesteps render identically, so every pair is
        // indistinguishable and the matching loss sits at log n exactly;
        // equal modality dims let the loss run on raw frames
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            dim_b: 7,
            ..small_config()
        };
        let world = make_world(cfg, 13).unwrap();
        let latents = Matrix::from_fn(6, cfg.content_dim, |_, j| 0.3 * (j as f64 + 1.0));
        let mut rng = Rng::new(14);
        let clip = world
            .render_clip(1, &latents, vec![2; 6], &mut rng)
            .unwrap();
        let batch = sync_batch_of_clip(&clip, 5, &mut rng).unwrap();
        let kernel = SimilarityKernel::scaled_cosine(5.0, -2.0).unwrap();
        let res = loss_av(&kernel, &batch.frames_a, &batch.frames_b).unwrap();
        assert!((res.value - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let world = make_world(small_config(), 15).unwrap();
        let train = world.train_identities();
        let test = world.test_identities();
        assert_eq!(train.len(), 9); // floor(12 * 0.75)
        assert_eq!(test.len(), 3);
        for id in &test {
            assert!(!train.contains(id));
        }
    }

    #[test]
    fn world_file_round_trip() {
        let world = make_world(small_config(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        WorldFile::save(&world, &path).unwrap();
        let loaded = WorldFile::load(&path).unwrap();
        assert_eq!(loaded, world);
    }
}

//! Model assembly, the alternating discriminator/generator training step,
//! checkpoint records and full-frame evaluation rendering.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{adversarial_raw, loss_d, sample_patch_center, Discriminator, PatchSchedule};
use crate::camera::{patch_grid, Camera, PatchGrid};
use crate::error::{bail, Result};
use crate::image::{DepthMap, Image};
use crate::losses::{loss_dist, loss_rec, loss_smooth, total_loss, Components, GradientMagnitudeL1, LossWeights, PerceptualLoss};
use crate::nn::{Forward, Mode, BN_MOMENTUM};
use crate::optim::AdamState;
use crate::psv::{build_sweep_volume, cost_variance, disparity_planes, EmbeddingVolume, FeatureNet, UNet3d};
use crate::radiance::{render_patch, render_rays, sample_color, RadianceNet, RenderContext, SourceView};
use crate::scene::Dataset;
use crate::tensor::{CheckpointEntry, Graph, Group, ParamId, ParamSet, Tensor};
use crate::Real;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub planes: usize,
    pub unet: [usize; 3],
    pub embed: usize,
    pub pe_x: usize,
    pub pe_d: usize,
    pub pe_scale: f64,
    pub mlp_width: usize,
    pub mlp_layers: usize,
    /// Source views per target.
    pub views: usize,
    pub disc_channels: Vec<usize>,
    /// Patch size; a patch has `delta + 1` samples per side.
    pub delta: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 8,
            planes: 32,
            unet: [8, 16, 32],
            embed: 8,
            pe_x: 6,
            pe_d: 4,
            pe_scale: 0.5,
            mlp_width: 128,
            mlp_layers: 6,
            views: 3,
            disc_channels: vec![32, 64, 128],
            delta: 32,
        }
    }
}

impl ModelConfig {
    /// Small enough for thousands of steps on one CPU core at 32x32.
    pub fn desk() -> Self {
        Self { planes: 16, unet: [8, 16, 16], mlp_width: 64, mlp_layers: 4, disc_channels: vec![16, 32], delta: 8, ..Self::default() }
    }

    const SCALARS: [&'static str; 10] =
        ["feature_channels", "planes", "embed", "pe_x", "pe_d", "pe_scale", "mlp_width", "mlp_layers", "views", "delta"];

    fn scalar(&self, key: &str) -> f64 {
        match key {
            "feature_channels" => self.feature_channels as f64,
            "planes" => self.planes as f64,
            "embed" => self.embed as f64,
            "pe_x" => self.pe_x as f64,
            "pe_d" => self.pe_d as f64,
            "pe_scale" => self.pe_scale,
            "mlp_width" => self.mlp_width as f64,
            "mlp_layers" => self.mlp_layers as f64,
            "views" => self.views as f64,
            _ => self.delta as f64,
        }
    }

    /// Architecture records stored next to the weights as `config.<key>`.
    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        let mut out: Vec<CheckpointEntry> =
            Self::SCALARS.iter().map(|k| CheckpointEntry::scalar(&format!("config.{k}"), self.scalar(k) as f32)).collect();
        let list = |name: &str, v: &[usize]| CheckpointEntry {
            name: format!("config.{name}"),
            shape: vec![v.len()],
            values: v.iter().map(|&x| x as f32).collect(),
        };
        out.push(list("unet", &self.unet));
        out.push(list("disc_channels", &self.disc_channels));
        out
    }

    pub fn from_entries(entries: &[CheckpointEntry]) -> Result<Self> {
        let get = |key: &str| -> Result<&[f32]> {
            match entries.iter().find(|e| e.name == format!("config.{key}")) {
                Some(e) if !e.values.is_empty() => Ok(&e.values),
                _ => bail!(Format, "checkpoint has no config.{key}"),
            }
        };
        let n = |key: &str| -> Result<usize> { Ok(get(key)?[0] as usize) };
        let unet = get("unet")?;
        if unet.len() != 3 {
            bail!(Format, "config.unet must hold three widths");
        }
        let c = Self {
            feature_channels: n("feature_channels")?,
            planes: n("planes")?,
            unet: [unet[0] as usize, unet[1] as usize, unet[2] as usize],
            embed: n("embed")?,
            pe_x: n("pe_x")?,
            pe_d: n("pe_d")?,
            pe_scale: get("pe_scale")?[0] as f64,
            mlp_width: n("mlp_width")?,
            mlp_layers: n("mlp_layers")?,
            views: n("views")?,
            disc_channels: get("disc_channels")?.iter().map(|&x| x as usize).collect(),
            delta: n("delta")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            bail!(Domain, "at least one source view is required");
        }
        if self.delta == 0 || self.delta % 2 != 0 {
            bail!(Domain, "patch size must be positive and even, got {}", self.delta);
        }
        if self.planes < 2 || self.feature_channels == 0 || self.embed == 0 || self.mlp_width == 0 || self.mlp_layers == 0 {
            bail!(Domain, "model widths must be positive and planes at least 2");
        }
        Ok(())
    }
}

/// Generator (encoder, UNet, field) and discriminator with their weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder: FeatureNet,
    pub unet: UNet3d,
    pub field: RadianceNet,
    pub disc: Discriminator,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(seed);
        let encoder = FeatureNet::new(&mut params, config.feature_channels)?;
        let unet = UNet3d::new(&mut params, config.feature_channels + 1, config.unet, config.embed)?;
        let field =
            RadianceNet::new(&mut params, config.pe_x, config.pe_d, config.pe_scale, config.embed, config.views, config.mlp_width, config.mlp_layers)?;
        let disc = Discriminator::new(&mut params, &config.disc_channels, config.delta)?;
        Ok(Self { config, params, encoder, unet, field, disc })
    }

    /// Embedding volume over the frustum of `reference` built from the
    /// source views.
    pub fn embedding(&self, f: &mut Forward<T>, sources: &[SourceView], reference: &Camera, near: f64, far: f64) -> Result<EmbeddingVolume> {
        if sources.len() != self.config.views {
            bail!(Contract, "model expects {} source views, got {}", self.config.views, sources.len());
        }
        let (w, h) = (sources[0].image.width, sources[0].image.height);
        let mut data = Vec::with_capacity(sources.len() * 3 * w * h);
        for s in sources {
            if (s.image.width, s.image.height) != (w, h) {
                bail!(Dimension, "source images differ in size");
            }
            data.extend_from_slice(s.image.to_chw::<T>().data());
        }
        let images = f.g.constant(Tensor::new(vec![sources.len(), 3, h, w], data)?);
        let feats = self.encoder.forward(f, images)?;
        let fs = f.g.shape(feats).to_vec();
        let depths = disparity_planes(near, far, self.config.planes)?;
        let mut sweeps = Vec::with_capacity(sources.len());
        for (i, s) in sources.iter().enumerate() {
            let fi = f.g.slice(feats, 0, i, 1)?;
            let fi = f.g.reshape(fi, &fs[1..])?;
            sweeps.push(build_sweep_volume(f.g, fi, s.camera, reference, &depths)?);
        }
        let cost = cost_variance(f.g, &sweeps)?;
        let volume = self.unet.forward(f, cost)?;
        Ok(EmbeddingVolume { volume, reference: reference.clone(), near, far, planes: self.config.planes })
    }

    /// FNV-1a over the bit patterns of every parameter in `group`.
    pub fn hash_group(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.params.ids_in(group) {
            for v in self.params.get(id).data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.group(id).is_generator()).collect()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.params.ids_in(Group::Discriminator).collect()
    }

    /// Weights, buffers and architecture as checkpoint records.
    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        let mut out = self.params.to_entries();
        out.extend(self.config.to_entries());
        out
    }

    /// Rebuilds a model from checkpoint records.
    pub fn from_entries(entries: &[CheckpointEntry]) -> Result<Self> {
        let mut m = Self::new(ModelConfig::from_entries(entries)?, 0)?;
        m.params.load_entries(entries)?;
        Ok(m)
    }
}

/// A fully rendered view.
#[derive(Clone, Debug)]
pub struct FullRender {
    pub image: Image,
    /// Camera-frame depth of the expected ray termination.
    pub depth: DepthMap,
    /// Per-ray `(Σw)² - (2/3) Σw²` averaged over the frame.
    pub dist_mean: f64,
}

impl Model<f32> {
    /// Eval-mode render of every pixel of `target`, in square tiles of
    /// `tile` pixels per side (clipped at the border). `tile = 0` renders
    /// the frame in one pass.
    #[allow(clippy::too_many_arguments)]
    pub fn render_view(
        &self,
        sources: &[SourceView],
        reference: &Camera,
        target: &Camera,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
        samples: usize,
        tile: usize,
    ) -> Result<FullRender> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let volume = {
            let mut f = Forward::new(&mut g, &self.params, &bound, Mode::Eval);
            let e = self.embedding(&mut f, sources, reference, near, far)?;
            g.tensor(e.volume)
        };
        let tile = if tile == 0 { width.max(height) } else { tile };
        let mut image = Image::new(width, height);
        let mut depth = DepthMap::new(width, height);
        let mut dist_sum = 0.0;
        let axis = target.principal_axis();
        for ty in (0..height).step_by(tile) {
            for tx in (0..width).step_by(tile) {
                let pixels: Vec<(usize, usize)> =
                    (ty..(ty + tile).min(height)).flat_map(|y| (tx..(tx + tile).min(width)).map(move |x| (x, y))).collect();
                let rays: Vec<_> = pixels.iter().map(|&(x, y)| target.pixel_ray(x as f64, y as f64, near, far)).collect();
                let mut g = Graph::new();
                let bound = self.params.bind(&mut g, |_| false);
                let vol = g.constant(volume.clone());
                let embedding = EmbeddingVolume { volume: vol, reference: reference.clone(), near, far, planes: self.config.planes };
                let ctx = RenderContext { net: &self.field, embedding: &embedding, sources, samples };
                let mut f = Forward::new(&mut g, &self.params, &bound, Mode::Eval);
                let c = render_rays::<f32, ChaCha8Rng>(&mut f, &ctx, &rays, None)?;
                let (col, dep, w) = (g.value(c.color), g.value(c.depth), g.value(c.weights));
                let n = pixels.len();
                for (k, &(x, y)) in pixels.iter().enumerate() {
                    image.set_pixel(x, y, [col[k], col[n + k], col[2 * n + k]]);
                    depth.data[y * width + x] = (dep[k] as f64 * rays[k].direction.dot(&axis)) as f32;
                    let row = &w[k * samples..(k + 1) * samples];
                    let total: f64 = row.iter().map(|&v| v as f64).sum();
                    let sq: f64 = row.iter().map(|&v| { let x = v as f64; x * x }).sum();
                    dist_sum += total * total - 2.0 / 3.0 * sq;
                }
            }
        }
        Ok(FullRender { image, depth, dist_mean: dist_sum / (width * height) as f64 })
    }

    /// Renders view `target` of a dataset from its protocol's source views.
    pub fn render_dataset_view(&self, data: &Dataset, target: usize, samples: usize) -> Result<FullRender> {
        let sources = source_indices(data, self.config.views)?;
        if target >= data.cameras.len() {
            bail!(Contract, "view {target} does not exist");
        }
        let views: Vec<SourceView> = sources.iter().map(|&i| SourceView { camera: &data.cameras[i], image: &data.views[i].image }).collect();
        let reference = &data.cameras[data.reference_for(&sources, &data.cameras[target])];
        self.render_view(&views, reference, &data.cameras[target], data.width, data.height, data.near, data.far, samples, self.config.delta + 1)
    }
}

/// The first `n` source views of the dataset's protocol.
pub fn source_indices(data: &Dataset, n: usize) -> Result<Vec<usize>> {
    if data.protocol.sources.len() < n {
        bail!(Contract, "scene {} has {} source views, model needs {n}", data.scene, data.protocol.sources.len());
    }
    Ok(data.protocol.sources[..n].to_vec())
}

/// Everything the training loop is configured by.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scenes: Vec<String>,
    pub model: ModelConfig,
    pub iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub s_start: f64,
    pub s_end: f64,
    pub weights: LossWeights,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenes: vec!["two-planes".into()],
            model: ModelConfig::default(),
            iterations: 2000,
            lr_g: 5e-4,
            lr_d: 1e-4,
            s_start: 4.0,
            s_end: 1.0,
            weights: LossWeights::default(),
            samples_train: 64,
            samples_eval: 128,
            seed: 0,
            checkpoint_interval: 500,
            jitter: true,
        }
    }
}

fn parse<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
    match value.trim().parse() {
        Ok(v) => Ok(v),
        Err(_) => bail!(Domain, "cannot parse {key} = {value:?}"),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Desk-scale preset on the small model.
    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), s_start: 3.0, samples_train: 24, samples_eval: 48, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            _ => bail!(Domain, "unknown config preset {name:?}"),
        }
    }

    /// Ablation variants: `full`, `no-adv` (adversarial weight 0, no
    /// discriminator updates) and `no-adv-no-dist`.
    pub fn variant(mut self, name: &str) -> Result<Self> {
        match name {
            "full" => {}
            "no-adv" => self.weights.adv = 0.0,
            "no-adv-no-dist" => {
                self.weights.adv = 0.0;
                self.weights.dist = 0.0;
            }
            _ => bail!(Domain, "unknown variant {name:?}"),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.iterations == 0 {
            bail!(Domain, "iterations must be positive");
        }
        if self.scenes.is_empty() {
            bail!(Domain, "at least one scene is required");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            bail!(Domain, "learning rates must be positive");
        }
        if self.samples_train < 2 || self.samples_eval < 2 {
            bail!(Domain, "ray sample counts must be at least 2");
        }
        PatchSchedule::new(self.s_start, self.s_end, 1.0, self.model.delta)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<PatchSchedule> {
        PatchSchedule::reaching_end_at_half(self.s_start, self.s_end, self.model.delta, self.iterations)
    }

    /// Sets one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "scenes" => self.scenes = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "feature_channels" => m.feature_channels = parse(key, value)?,
            "planes" => m.planes = parse(key, value)?,
            "unet" => {
                let v = parse_list(key, value)?;
                let Ok(u) = <[usize; 3]>::try_from(v.as_slice()) else {
                    bail!(Domain, "unet needs three widths");
                };
                m.unet = u;
            }
            "embed" => m.embed = parse(key, value)?,
            "pe_x" => m.pe_x = parse(key, value)?,
            "pe_d" => m.pe_d = parse(key, value)?,
            "pe_scale" => m.pe_scale = parse(key, value)?,
            "mlp_width" => m.mlp_width = parse(key, value)?,
            "mlp_layers" => m.mlp_layers = parse(key, value)?,
            "views" => m.views = parse(key, value)?,
            "disc_channels" => m.disc_channels = parse_list(key, value)?,
            "delta" => m.delta = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "lr_g" => self.lr_g = parse(key, value)?,
            "lr_d" => self.lr_d = parse(key, value)?,
            "s_start" => self.s_start = parse(key, value)?,
            "s_end" => self.s_end = parse(key, value)?,
            "lambda_rec" => self.weights.rec = parse(key, value)?,
            "lambda_smooth" => self.weights.smooth = parse(key, value)?,
            "lambda_dist" => self.weights.dist = parse(key, value)?,
            "lambda_adv" => self.weights.adv = parse(key, value)?,
            "perceptual" => self.weights.perceptual = parse(key, value)?,
            "samples_train" => self.samples_train = parse(key, value)?,
            "samples_eval" => self.samples_eval = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "jitter" => self.jitter = parse(key, value)?,
            _ => bail!(Domain, "unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order accepted by
    /// [`TrainConfig::set`].
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("scenes", self.scenes.join(",")),
            ("feature_channels", m.feature_channels.to_string()),
            ("planes", m.planes.to_string()),
            ("unet", join(&m.unet)),
            ("embed", m.embed.to_string()),
            ("pe_x", m.pe_x.to_string()),
            ("pe_d", m.pe_d.to_string()),
            ("pe_scale", m.pe_scale.to_string()),
            ("mlp_width", m.mlp_width.to_string()),
            ("mlp_layers", m.mlp_layers.to_string()),
            ("views", m.views.to_string()),
            ("disc_channels", join(&m.disc_channels)),
            ("delta", m.delta.to_string()),
            ("iterations", self.iterations.to_string()),
            ("lr_g", self.lr_g.to_string()),
            ("lr_d", self.lr_d.to_string()),
            ("s_start", self.s_start.to_string()),
            ("s_end", self.s_end.to_string()),
            ("lambda_rec", self.weights.rec.to_string()),
            ("lambda_smooth", self.weights.smooth.to_string()),
            ("lambda_dist", self.weights.dist.to_string()),
            ("lambda_adv", self.weights.adv.to_string()),
            ("perceptual", self.weights.perceptual.to_string()),
            ("samples_train", self.samples_train.to_string()),
            ("samples_eval", self.samples_eval.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("jitter", self.jitter.to_string()),
        ]
    }
}

/// Outcome of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub scene: usize,
    pub target: usize,
    pub scale: f64,
    pub center: (f64, f64),
    pub components: Components,
    /// Weighted terms in [`crate::losses::TERM_NAMES`] order.
    pub terms: [f64; 6],
    pub total: f64,
    /// Parameter hashes `[generator before D step, generator after D step,
    /// discriminator after D step, discriminator after G step]`.
    pub hashes: [u64; 4],
}

fn patch_truth(image: &Image, patch: &PatchGrid) -> Result<Tensor<f32>> {
    let side = patch.side();
    let mut data = vec![0.0f32; 3 * side * side];
    for (k, &(x, y)) in patch.coords.iter().enumerate() {
        let Some(c) = sample_color(image, x, y) else {
            bail!(Contract, "patch coordinate ({x}, {y}) is outside the image");
        };
        for ch in 0..3 {
            data[ch * side * side + k] = c[ch] as f32;
        }
    }
    Tensor::new(vec![3, side, side], data)
}

fn hash_all(model: &Model<f32>, gen: bool) -> u64 {
    if gen {
        [Group::Encoder, Group::Volume, Group::Field].iter().fold(0u64, |acc, &g| acc.rotate_left(17) ^ model.hash_group(g))
    } else {
        model.hash_group(Group::Discriminator)
    }
}

/// Training state: model, both optimizers and the iteration counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub schedule: PatchSchedule,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let adam_g = AdamState::new(&model.params, model.generator_ids(), config.lr_g);
        let adam_d = AdamState::new(&model.params, model.discriminator_ids(), config.lr_d);
        let schedule = config.schedule()?;
        Ok(Self { config, model, adam_g, adam_d, schedule, iteration: 0 })
    }

    /// Randomness for `iteration`: a dedicated stream of the run seed, so
    /// any iteration can be replayed in isolation.
    pub fn rng_for(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration as u64);
        rng.set_word_pos(0);
        rng
    }

    /// Next step on the scenes, visited round-robin; the target is drawn
    /// from the scene's training targets.
    pub fn step(&mut self, scenes: &[Dataset]) -> Result<StepReport> {
        if scenes.is_empty() {
            bail!(Contract, "no scenes to train on");
        }
        let scene = self.iteration % scenes.len();
        let targets = &scenes[scene].protocol.train_targets;
        if targets.is_empty() {
            bail!(Contract, "scene {} has no training targets", scenes[scene].scene);
        }
        let mut rng = self.rng_for(self.iteration);
        let target = targets[rng.gen_range(0..targets.len())];
        let mut report = self.step_with(&scenes[scene], target, &mut rng)?;
        report.scene = scene;
        Ok(report)
    }

    /// One step on a given target view.
    pub fn step_on(&mut self, data: &Dataset, target: usize) -> Result<StepReport> {
        let mut rng = self.rng_for(self.iteration);
        self.step_with(data, target, &mut rng)
    }

    fn step_with(&mut self, data: &Dataset, target: usize, rng: &mut ChaCha8Rng) -> Result<StepReport> {
        let sources = source_indices(data, self.model.config.views)?;
        if sources.contains(&target) {
            bail!(Contract, "target view {target} is one of the source views");
        }
        if target >= data.cameras.len() {
            bail!(Contract, "view {target} does not exist");
        }
        let (width, height) = (data.width, data.height);
        let delta = self.model.config.delta;
        let scale = self.schedule.scale_at(self.iteration);
        let center = sample_patch_center(width, height, delta, scale, rng)?;
        let real_center = sample_patch_center(width, height, delta, scale, rng)?;
        let patch = patch_grid(center, scale, delta)?;
        let real_patch = patch_grid(real_center, scale, delta)?;
        let gt_image = &data.views[target].image;
        let truth = patch_truth(gt_image, &patch)?;
        let real = patch_truth(gt_image, &real_patch)?;
        let side = patch.side();

        let target_cam = &data.cameras[target];
        let reference = &data.cameras[data.reference_for(&sources, target_cam)];
        let views: Vec<SourceView> = sources.iter().map(|&i| SourceView { camera: &data.cameras[i], image: &data.views[i].image }).collect();

        // generator forward
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g, |grp| grp.is_generator());
        let mut f = Forward::new(&mut g, &self.model.params, &bound, Mode::Train);
        let embedding = self.model.embedding(&mut f, &views, reference, data.near, data.far)?;
        let ctx = RenderContext { net: &self.model.field, embedding: &embedding, sources: &views, samples: self.config.samples_train };
        let jitter = if self.config.jitter { Some(&mut *rng) } else { None };
        let render = render_patch(&mut f, &ctx, target_cam, &patch, width, height, data.near, data.far, jitter)?;
        let gen_stats = core::mem::take(&mut f.stats);
        let fake = g.reshape(render.color, &[1, 3, side, side])?;
        let fake_value = g.tensor(fake);

        let gen_before = hash_all(&self.model, true);
        let mut c = Components::default();
        let adversarial = self.config.weights.adv > 0.0;

        // discriminator step on real and detached fake patches
        if adversarial {
            let mut gd = Graph::new();
            let bd = self.model.params.bind(&mut gd, |grp| grp == Group::Discriminator);
            let r = gd.constant(real.clone().reshape(&[1, 3, side, side])?);
            let fk = gd.constant(fake_value);
            let batch = gd.concat(&[r, fk], 0)?;
            let mut fd = Forward::new(&mut gd, &self.model.params, &bd, Mode::Train);
            let scores = self.model.disc.forward(&mut fd, batch)?;
            let stats = core::mem::take(&mut fd.stats);
            let rs = gd.slice(scores, 0, 0, 1)?;
            let fs = gd.slice(scores, 0, 1, 1)?;
            let ld = loss_d(&mut gd, rs, fs)?;
            c.d = gd.item(ld) as f64;
            let grads = gd.backward(ld)?;
            let gs: Vec<Option<&[f32]>> = self.adam_d.ids.iter().map(|&id| grads.get(bd.var(id))).collect();
            self.adam_d.step(&mut self.model.params, &gs)?;
            self.model.params.update_buffers(&stats, f32::of(BN_MOMENTUM));
        }
        let gen_after_d = hash_all(&self.model, true);
        let disc_after_d = hash_all(&self.model, false);

        // generator step
        let truth_v = g.constant(truth.clone());
        let rec = loss_rec(&mut g, render.color, truth_v)?;
        let smooth = loss_smooth(&mut g, render.depth, &truth)?;
        let dist = loss_dist(&mut g, render.weights)?;
        c.rec = g.item(rec) as f64;
        c.smooth = g.item(smooth) as f64;
        c.dist = g.item(dist) as f64;
        let w = self.config.weights;
        let mut terms = vec![g.scale(rec, f32::of(w.rec)), g.scale(smooth, f32::of(w.smooth)), g.scale(dist, f32::of(w.dist))];
        if w.perceptual {
            let fake3 = g.reshape(fake, &[3, side, side])?;
            let perc = GradientMagnitudeL1.eval(&mut g, fake3, truth_v)?;
            c.perc = g.item(perc) as f64;
            terms.push(perc);
        }
        if adversarial {
            // discriminator weights after its update, as constants
            let bd = self.model.params.bind(&mut g, |_| false);
            let r = g.constant(real.reshape(&[1, 3, side, side])?);
            let batch = g.concat(&[r, fake], 0)?;
            let mut fd = Forward::new(&mut g, &self.model.params, &bd, Mode::Train);
            let scores = self.model.disc.forward(&mut fd, batch)?;
            let fs = g.slice(scores, 0, 1, 1)?;
            let adv = adversarial_raw(&mut g, fs);
            c.adv = g.item(adv) as f64;
            terms.push(g.scale(adv, f32::of(w.adv)));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t)?;
        }
        let grads = g.backward(loss)?;
        let gs: Vec<Option<&[f32]>> = self.adam_g.ids.iter().map(|&id| grads.get(bound.var(id))).collect();
        self.adam_g.step(&mut self.model.params, &gs)?;
        self.model.params.update_buffers(&gen_stats, f32::of(BN_MOMENTUM));
        let disc_after_g = hash_all(&self.model, false);

        let (terms, total) = total_loss(&c, &w);
        let report = StepReport {
            iteration: self.iteration,
            scene: 0,
            target,
            scale,
            center,
            components: c,
            terms,
            total,
            hashes: [gen_before, gen_after_d, disc_after_d, disc_after_g],
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Full training state as checkpoint records.
    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        let mut out = self.model.to_entries();
        out.extend(self.adam_g.to_entries(&self.model.params, "adam_g"));
        out.extend(self.adam_d.to_entries(&self.model.params, "adam_d"));
        // split so counts beyond f32's integer range survive
        let it = self.iteration as u64;
        out.push(CheckpointEntry { name: "trainer.iteration".into(), shape: vec![2], values: vec![(it >> 24) as f32, (it & 0xff_ffff) as f32] });
        out
    }

    /// Restores a trainer saved by [`Trainer::to_entries`] under `config`.
    pub fn from_entries(config: TrainConfig, entries: &[CheckpointEntry]) -> Result<Self> {
        let stored = ModelConfig::from_entries(entries)?;
        if stored != config.model {
            bail!(Contract, "checkpoint architecture differs from the configured model");
        }
        let mut t = Self::new(config)?;
        t.model.params.load_entries(entries)?;
        t.adam_g.load_entries(&t.model.params, "adam_g", entries)?;
        t.adam_d.load_entries(&t.model.params, "adam_d", entries)?;
        let Some(it) = entries.iter().find(|e| e.name == "trainer.iteration" && e.values.len() == 2) else {
            bail!(Format, "checkpoint has no trainer.iteration");
        };
        t.iteration = ((it.values[0] as u64) << 24 | it.values[1] as u64) as usize;
        Ok(t)
    }
}

#[cfg(test)]
mod tests;

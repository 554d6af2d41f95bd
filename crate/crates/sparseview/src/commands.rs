//! The four subcommands as library functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sparseview_core::camera::Camera;
use sparseview_core::losses::TERM_NAMES;
use sparseview_core::metrics::{psnr, ssim};
use sparseview_core::radiance::SourceView;
use sparseview_core::scene::{build_dataset, generate as synth, preset, Dataset, Protocol, Rig, RigPattern, IMAGE_SIZE, RIG_VIEWS};
use sparseview_core::train::{source_indices, FullRender, Model, StepReport, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::io;
use crate::report::{Report, ReportRow};

/// Rig overrides for `generate`. With a custom view count the protocol
/// takes up to three evenly spread sources and targets every other view.
#[derive(Clone, Copy, Debug, Default)]
pub struct RigOptions {
    pub views: Option<usize>,
    /// Degrees between adjacent views.
    pub baseline: Option<f64>,
}

/// Sources spread evenly over `n` views; every other view is a training
/// target and none is held out.
pub fn spread_protocol(n: usize) -> Protocol {
    let k = n.min(3);
    let mut sources: Vec<usize> = (0..k).map(|i| if k == 1 { 0 } else { i * (n - 1) / (k - 1) }).collect();
    sources.dedup();
    let train_targets = (0..n).filter(|v| !sources.contains(v)).collect();
    Protocol { sources, train_targets, heldout: Vec::new() }
}

/// Renders a preset under a protocol into `out`.
pub fn generate(scene: &str, protocol: &str, seed: u64, rig: RigOptions, out: &Path) -> Result<Dataset> {
    let usage = |e: sparseview_core::error::Error| Error::Usage(e.to_string());
    let data = if rig.views.is_none() && rig.baseline.is_none() {
        synth(scene, protocol, seed).map_err(usage)?
    } else {
        let views = rig.views.unwrap_or(RIG_VIEWS);
        let proto = if views == RIG_VIEWS { Protocol::by_name(protocol).map_err(usage)? } else { spread_protocol(views) };
        let spec = preset(scene, seed).map_err(usage)?;
        let r = Rig {
            pattern: RigPattern::Arc,
            n_views: views,
            baseline_angle: rig.baseline.map_or_else(|| Protocol::baseline(protocol), Ok).map_err(usage)?,
            target: nalgebra::Vector3::zeros(),
        };
        build_dataset(&spec, &r, proto, IMAGE_SIZE, IMAGE_SIZE).map_err(usage)?
    };
    io::save_dataset(out, &data, Some(protocol), Some(seed))?;
    Ok(data)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.svck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub config: TrainConfig,
    /// Directory holding one dataset directory per scene name.
    pub data_root: PathBuf,
    pub out: PathBuf,
    /// Continue from `out/checkpoint.svck` if it exists.
    pub resume: bool,
    /// Stop after this many steps in this invocation.
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

/// Loads every scene of the configuration from `root/<scene>`.
pub fn load_scenes(root: &Path, scenes: &[String]) -> Result<Vec<Dataset>> {
    scenes
        .iter()
        .map(|s| io::load_dataset(&root.join(s)).map_err(|e| Error::Scene { scene: s.clone(), source: Box::new(e) }))
        .collect()
}

pub fn metrics_header() -> String {
    let mut cols = vec!["iteration", "scene", "target", "scale"];
    cols.extend(TERM_NAMES);
    cols.push("total");
    cols.join(",") + "\n"
}

pub fn metrics_row(r: &StepReport, scenes: &[String]) -> String {
    let mut cols = vec![r.iteration.to_string(), scenes[r.scene].clone(), r.target.to_string(), format!("{}", r.scale)];
    cols.extend(r.terms.iter().map(|t| format!("{t}")));
    cols.push(format!("{}", r.total));
    cols.join(",") + "\n"
}

/// Runs (or resumes) training and returns the final trainer. Writes the
/// checkpoint, the per-iteration metrics CSV and the effective
/// configuration into `out`.
pub fn train(opts: &TrainOptions) -> Result<Trainer> {
    let config = &opts.config;
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let scenes = load_scenes(&opts.data_root, &config.scenes)?;
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let ckpt = opts.out.join(CHECKPOINT_FILE);
    let metrics = opts.out.join(METRICS_FILE);

    let mut trainer = if opts.resume && ckpt.exists() {
        Trainer::from_entries(config.clone(), &io::load_checkpoint(&ckpt)?).map_err(|e| Error::data(&ckpt, e.to_string()))?
    } else {
        Trainer::new(config.clone())?
    };
    // keep the log rows before the restored iteration
    let mut log = metrics_header();
    if trainer.iteration > 0 && metrics.exists() {
        let text = String::from_utf8(io::read(&metrics)?).map_err(|_| Error::data(&metrics, "metrics log is not UTF-8"))?;
        for line in text.lines().skip(1) {
            let it: usize = line.split(',').next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::data(&metrics, "malformed row"))?;
            if it < trainer.iteration {
                log += line;
                log.push('\n');
            }
        }
    }
    io::save_config(&opts.out.join(CONFIG_FILE), config)?;

    let mut done = 0;
    while trainer.iteration < config.iterations && opts.stop_after.is_none_or(|n| done < n) {
        let r = trainer.step(&scenes)?;
        log += &metrics_row(&r, &config.scenes);
        done += 1;
        if opts.verbose && (r.iteration % 50 == 0 || trainer.iteration == config.iterations) {
            eprintln!("iter {:>6}  total {:.5}  rec {:.5}  scale {:.3}", r.iteration, r.total, r.components.rec, r.scale);
        }
        if config.checkpoint_interval > 0 && trainer.iteration % config.checkpoint_interval == 0 {
            io::save_checkpoint(&ckpt, &trainer.to_entries())?;
            io::write(&metrics, log.as_bytes())?;
        }
    }
    io::save_checkpoint(&ckpt, &trainer.to_entries())?;
    io::write(&metrics, log.as_bytes())?;
    Ok(trainer)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let entries = io::load_checkpoint(path)?;
    Model::from_entries(&entries).map_err(|e| Error::data(path, e.to_string()))
}

/// Target of a render: a dataset view or an explicit camera.
#[derive(Clone, Debug)]
pub enum RenderTarget {
    View(usize),
    Pose(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub target: RenderTarget,
    /// Defaults to the dataset protocol's source views.
    pub sources: Option<Vec<usize>>,
    pub out: PathBuf,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub render: FullRender,
    pub image_path: PathBuf,
    pub depth_path: PathBuf,
    /// PSNR and SSIM against the ground truth when it exists.
    pub scores: Option<(f64, f64)>,
}

/// Renders one full frame with the model from a checkpoint.
pub fn render_frame(model: &Model<f32>, data: &Dataset, sources: &[usize], target: &Camera, samples: usize) -> Result<FullRender> {
    let views: Vec<SourceView> = sources.iter().map(|&i| SourceView { camera: &data.cameras[i], image: &data.views[i].image }).collect();
    let reference = &data.cameras[data.reference_for(sources, target)];
    Ok(model.render_view(&views, reference, target, data.width, data.height, data.near, data.far, samples, model.config.delta + 1)?)
}

pub fn render(opts: &RenderOptions) -> Result<RenderOutput> {
    let model = load_model(&opts.checkpoint)?;
    let data = io::load_dataset(&opts.data)?;
    let n = data.cameras.len();
    let sources = match &opts.sources {
        Some(s) => s.clone(),
        None => source_indices(&data, model.config.views).map_err(|e| Error::Usage(e.to_string()))?,
    };
    if sources.len() != model.config.views {
        return Err(Error::Usage(format!("model expects {} source views, {} given", model.config.views, sources.len())));
    }
    for &s in &sources {
        if s >= n || !io::has_image(&data, s) {
            return Err(Error::Usage(format!("source view {s} does not exist in {}", opts.data.display())));
        }
    }
    let (camera, stem, gt) = match &opts.target {
        RenderTarget::View(v) => {
            if *v >= n {
                return Err(Error::Usage(format!("view {v} does not exist in {}", opts.data.display())));
            }
            (data.cameras[*v].clone(), format!("{v:03}"), io::has_image(&data, *v).then(|| &data.views[*v].image))
        }
        RenderTarget::Pose(p) => (io::load_camera(p)?.0, "pose".to_string(), None),
    };
    let render = render_frame(&model, &data, &sources, &camera, opts.samples)?;
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let image_path = opts.out.join(format!("render_{stem}.png"));
    let depth_path = opts.out.join(format!("depth_{stem}.pfm"));
    io::save_png(&image_path, &render.image)?;
    io::save_pfm(&depth_path, &render.depth)?;
    let scores = match gt {
        Some(gt) => Some((psnr(&render.image, gt)?, ssim(&render.image, gt)?)),
        None => None,
    };
    Ok(RenderOutput { render, image_path, depth_path, scores })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data_root: PathBuf,
    /// Empty means every dataset directory under the root.
    pub scenes: Vec<String>,
    pub samples: usize,
    /// Leave the runtime column empty so reruns are byte-identical.
    pub deterministic: bool,
}

/// Scene directories under `root` that hold a manifest, sorted by name.
pub fn discover_scenes(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join("manifest.json").exists() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Scores each scene's held-out views rendered from its source views.
/// Views without ground truth are skipped with a warning.
pub fn evaluate(opts: &EvalOptions) -> Result<Report> {
    let model = load_model(&opts.checkpoint)?;
    let mut scenes = if opts.scenes.is_empty() { discover_scenes(&opts.data_root)? } else { opts.scenes.clone() };
    scenes.sort();
    let mut report = Report { rows: Vec::new(), config: model.config_pairs() };
    report.config.push(("samples".into(), opts.samples.to_string()));
    for scene in &scenes {
        let data = io::load_dataset(&opts.data_root.join(scene)).map_err(|e| Error::Scene { scene: scene.clone(), source: Box::new(e) })?;
        let sources = source_indices(&data, model.config.views)?;
        for &v in &data.protocol.heldout {
            if !io::has_image(&data, v) {
                eprintln!("warning: scene {scene} view {v} has no ground truth, skipped");
                continue;
            }
            let start = Instant::now();
            let r = render_frame(&model, &data, &sources, &data.cameras[v], opts.samples)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let gt = &data.views[v].image;
            report.rows.push(ReportRow {
                scene: scene.clone(),
                view: v,
                psnr_db: psnr(&r.image, gt)?,
                ssim: ssim(&r.image, gt)?,
                runtime_ms: (!opts.deterministic).then_some(ms),
            });
        }
    }
    Ok(report)
}

/// Model settings for report headers.
trait ConfigPairs {
    fn config_pairs(&self) -> Vec<(String, String)>;
}

impl ConfigPairs for Model<f32> {
    fn config_pairs(&self) -> Vec<(String, String)> {
        let mut t = TrainConfig { model: self.config.clone(), ..TrainConfig::default() };
        t.scenes.clear();
        let keys = ["feature_channels", "planes", "unet", "embed", "pe_x", "pe_d", "pe_scale", "mlp_width", "mlp_layers", "views", "disc_channels", "delta"];
        t.pairs().into_iter().filter(|(k, _)| keys.contains(k)).map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Mean absolute error of a rendered frame against ground truth.
pub fn mean_abs_error(a: &sparseview_core::image::Image, b: &sparseview_core::image::Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len() as f64
}

/// Checks a protocol name early so usage errors surface before any work.
pub fn check_protocol(name: &str) -> Result<()> {
    Protocol::by_name(name).map(|_| ()).map_err(|e| Error::Usage(e.to_string()))
}

//! On-disk formats: PNG images, PFM depth maps, camera records, dataset
//! manifests, checkpoints and `key = value` configuration files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sparseview_core::camera::Camera;
use sparseview_core::image::{DepthMap, Image};
use sparseview_core::scene::{Dataset, Protocol, RenderedView};
use sparseview_core::tensor::{decode_checkpoint, encode_checkpoint, CheckpointEntry};
use sparseview_core::train::TrainConfig;

use crate::error::{Error, Result};

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches image size");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::data(path, e.to_string()))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::data(path, other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::from_data(rgb.width() as usize, rgb.height() as usize, data)?)
}

/// Single-channel little-endian PFM (scale `-1.0`); rows are stored bottom
/// to top as the format requires.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            out.extend_from_slice(&depth.at(x, y).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let bad = |m: &str| Error::data(path, format!("PFM: {m}"));
    // three whitespace-terminated header tokens
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
        if fields.len() == 4 {
            break;
        }
    }
    if fields.len() < 4 || fields[0] != "Pf" {
        return Err(bad("expected a single-channel 'Pf' header"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 4 {
        return Err(bad(&format!("expected {} bytes of samples, found {}", w * h * 4, body.len())));
    }
    let mut data = vec![0.0f32; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (i / w, i % w);
        data[(h - 1 - row) * w + x] = v;
    }
    Ok(DepthMap::from_data(w, h, data)?)
}

pub fn save_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write(path, &encode_pfm(depth))
}

pub fn load_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read(path)?, path)
}

/// One whitespace-separated record: `K` (9, row-major), `R` (9, row-major),
/// `t` (3), `near`, `far`.
pub fn format_camera(cam: &Camera, near: f64, far: f64) -> String {
    let vals: Vec<String> = cam
        .k
        .transpose()
        .iter()
        .chain(cam.r.transpose().iter())
        .chain(cam.t.iter())
        .chain([near, far].iter())
        .map(|v| format!("{v:.17e}"))
        .collect();
    vals.join(" ") + "\n"
}

pub fn parse_camera(text: &str, path: &Path) -> Result<(Camera, f64, f64)> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::data(path, "camera record has a non-numeric field"))?;
    if vals.len() != 23 {
        return Err(Error::data(path, format!("camera record needs 23 values, found {}", vals.len())));
    }
    let k = Matrix3::from_row_slice(&vals[0..9]);
    let r = Matrix3::from_row_slice(&vals[9..18]);
    let t = Vector3::new(vals[18], vals[19], vals[20]);
    let cam = Camera::new(k, r, t).map_err(|e| Error::data(path, e.to_string()))?;
    Ok((cam, vals[21], vals[22]))
}

pub fn load_camera(path: &Path) -> Result<(Camera, f64, f64)> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::data(path, "camera file is not UTF-8"))?;
    parse_camera(&text, path)
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: String,
    pub views: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub sources: Vec<usize>,
    pub train_targets: Vec<usize>,
    pub heldout: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn camera_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("cam_{view:03}.txt"))
}

pub fn image_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("img_{view:03}.png"))
}

pub fn depth_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("depth_{view:03}.pfm"))
}

pub fn save_dataset(dir: &Path, data: &Dataset, protocol: Option<&str>, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        scene: data.scene.clone(),
        views: (0..data.cameras.len()).collect(),
        width: data.width,
        height: data.height,
        near: data.near,
        far: data.far,
        sources: data.protocol.sources.clone(),
        train_targets: data.protocol.train_targets.clone(),
        heldout: data.protocol.heldout.clone(),
        protocol: protocol.map(str::to_string),
        seed,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), json.as_bytes())?;
    for (i, (cam, view)) in data.cameras.iter().zip(&data.views).enumerate() {
        write(&camera_path(dir, i), format_camera(cam, data.near, data.far).as_bytes())?;
        save_png(&image_path(dir, i), &view.image)?;
        save_pfm(&depth_path(dir, i), &view.depth)?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(&path, e.to_string()))
}

/// Loads a dataset directory. Views whose image is missing are left empty
/// (zero-sized) so callers can skip them.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = load_manifest(dir)?;
    let mut cameras = Vec::new();
    let mut views = Vec::new();
    for &v in &m.views {
        if v != cameras.len() {
            return Err(Error::data(&dir.join("manifest.json"), "view ids must be 0..n in order"));
        }
        let (cam, _, _) = load_camera(&camera_path(dir, v))?;
        cameras.push(cam);
        let img_path = image_path(dir, v);
        let view = if img_path.exists() {
            let image = load_png(&img_path)?;
            if (image.width, image.height) != (m.width, m.height) {
                return Err(Error::data(&img_path, format!("image is {}x{}, manifest says {}x{}", image.width, image.height, m.width, m.height)));
            }
            let dp = depth_path(dir, v);
            let depth = if dp.exists() { load_pfm(&dp)? } else { DepthMap::new(m.width, m.height) };
            let hit = depth.data.iter().map(|&z| z > 0.0).collect();
            RenderedView { image, depth, hit }
        } else {
            RenderedView { image: Image::new(0, 0), depth: DepthMap::new(0, 0), hit: Vec::new() }
        };
        views.push(view);
    }
    let protocol = Protocol { sources: m.sources.clone(), train_targets: m.train_targets.clone(), heldout: m.heldout.clone() };
    protocol.validate(cameras.len()).map_err(|e| Error::data(&dir.join("manifest.json"), e.to_string()))?;
    Ok(Dataset { scene: m.scene, width: m.width, height: m.height, near: m.near, far: m.far, cameras, views, protocol })
}

/// True if the view's ground-truth image was present on disk.
pub fn has_image(data: &Dataset, view: usize) -> bool {
    data.views.get(view).is_some_and(|v| v.image.width > 0)
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let bytes = encode_checkpoint(entries).map_err(|e| Error::data(path, e.to_string()))?;
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    write(&tmp, &bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    decode_checkpoint(&read(path)?).map_err(|e| Error::data(path, e.to_string()))
}

/// Applies `key = value` lines to `config`. `#` starts a comment.
pub fn apply_config_text(config: &mut TrainConfig, text: &str, path: &Path) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::data(path, format!("line {}: expected key = value", n + 1)));
        };
        config.set(k.trim(), v.trim()).map_err(|e| Error::data(path, format!("line {}: {e}", n + 1)))?;
    }
    Ok(())
}

pub fn load_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::data(path, "config is not UTF-8"))?;
    let mut c = base;
    apply_config_text(&mut c, &text, path)?;
    Ok(c)
}

pub fn format_config(config: &TrainConfig) -> String {
    config.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn save_config(path: &Path, config: &TrainConfig) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_config(config).as_bytes()).map_err(|e| Error::io(path, e))
}

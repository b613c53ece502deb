//! Dataset plumbing: frame preprocessing, directory loading, sequence
//! windowing, and a deterministic synthetic road-scene generator that
//! stands in for unavailable driving data.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{farneback_flow, normalize_flow, read_flo, FlowField, FlowParams};
use crate::imgproc::{read_png_gray, read_png_rgb8, resize_bilinear, write_png_rgb8, Plane};
use crate::model::Modality;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{stack_frames, BatchSource, FrameBatch};

pub const FRAME_H: usize = 78;
pub const FRAME_W: usize = 200;

/// Divisor mapping flow displacements into the model's [-1,1] input range.
pub const FLOW_DIVISOR: f64 = 20.0;

/// Vertical crop fractions applied to raw frames before the resize: the
/// sky band at the top and the hood band at the bottom are discarded.
#[derive(Debug, Clone, Copy)]
pub struct CropSpec {
    pub top_frac: f64,
    pub bottom_frac: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec { top_frac: 0.35, bottom_frac: 0.10 }
    }
}

impl CropSpec {
    /// Half-open row range kept from a raw frame of height `h`.
    pub fn rows(&self, h: usize) -> Result<(usize, usize)> {
        if !(0.0..1.0).contains(&self.top_frac)
            || !(0.0..1.0).contains(&self.bottom_frac)
            || self.top_frac + self.bottom_frac >= 1.0
        {
            return Err(Error::config(format!(
                "crop fractions must be in [0,1) and sum below 1, got top {} bottom {}",
                self.top_frac, self.bottom_frac
            )));
        }
        let start = (h as f64 * self.top_frac).floor() as usize;
        let end = h - (h as f64 * self.bottom_frac).floor() as usize;
        Ok((start, end))
    }
}

/// Per-channel RGB statistics, computed on the train split only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Pass-through statistics: standardization with these is the identity.
    pub fn identity() -> Self {
        ChannelStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

fn crop_plane(p: &Plane, y0: usize, y1: usize) -> Plane {
    let mut out = Plane::new(p.w, y1 - y0);
    for y in y0..y1 {
        for x in 0..p.w {
            out.set(x, y - y0, p.at(x, y));
        }
    }
    out
}

/// Crops and resizes an interleaved 8-bit RGB frame to [3,78,200] in [0,1].
pub fn prepare_rgb<T: Scalar>(w: usize, h: usize, rgb: &[u8], crop: &CropSpec) -> Result<Tensor<T>> {
    if rgb.len() != w * h * 3 {
        return Err(Error::dim(format!("rgb buffer wants {} bytes, got {}", w * h * 3, rgb.len())));
    }
    let (y0, y1) = crop.rows(h)?;
    let mut data = Vec::with_capacity(3 * FRAME_H * FRAME_W);
    for c in 0..3 {
        let plane = Plane::from_vec(
            w,
            h,
            rgb.chunks_exact(3).map(|p| p[c] as f32 / 255.0).collect(),
        )?;
        let cropped = crop_plane(&plane, y0, y1);
        let resized = resize_bilinear(&cropped, FRAME_W, FRAME_H);
        data.extend(resized.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(&[3, FRAME_H, FRAME_W], data)
}

/// Standardizes a [0,1] RGB tensor channelwise: (x - mean) / std.
pub fn standardize_rgb<T: Scalar>(x: &Tensor<T>, stats: &ChannelStats) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("standardize_rgb wants [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut out = x.clone();
    for c in 0..3 {
        let mean = T::from_f64(stats.mean[c]);
        let inv = T::from_f64(1.0 / stats.std[c].max(1e-6));
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Full frame preprocessing: crop, resize, scale to [0,1], and (when stats
/// are given) standardize with the train-split statistics.
pub fn preprocess_frame<T: Scalar>(
    w: usize,
    h: usize,
    rgb: &[u8],
    crop: &CropSpec,
    stats: Option<&ChannelStats>,
) -> Result<Tensor<T>> {
    let t = prepare_rgb(w, h, rgb, crop)?;
    match stats {
        Some(s) => standardize_rgb(&t, s),
        None => Ok(t),
    }
}

/// Rec. 601 luma plane of a [3,H,W] tensor in [0,1].
pub fn luma_plane<T: Scalar>(rgb: &Tensor<T>) -> Result<Plane> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("luma_plane wants [3,H,W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = rgb.data();
    let data = (0..plane)
        .map(|i| {
            (0.299 * d[i].as_f64() + 0.587 * d[plane + i].as_f64() + 0.114 * d[2 * plane + i].as_f64())
                as f32
        })
        .collect();
    Plane::from_vec(s[2], s[1], data)
}

// ---------------------------------------------------------------------------
// Value-noise textures for the synthetic generator.

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = (ix as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((iy as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(seed.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear lattice value noise in [0,1), smooth in both arguments.
pub fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let fx = smoothstep(x - ix);
    let fy = smoothstep(y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash2(ix, iy, seed);
    let v10 = hash2(ix + 1, iy, seed);
    let v01 = hash2(ix, iy + 1, seed);
    let v11 = hash2(ix + 1, iy + 1, seed);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

/// Three-octave fractal value noise in [0,1).
pub fn fbm(x: f64, y: f64, seed: u64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut norm = 0.0;
    for octave in 0..3 {
        sum += amp * value_noise(x * freq, y * freq, seed.wrapping_add(octave));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

// ---------------------------------------------------------------------------
// Synthetic road-scene generator.

/// Settings for the synthetic dataset. The curvature signal follows a
/// mean-reverting bounded random walk; the per-frame label is the
/// normalized curvature in [-1,1].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    /// Raw frame extent before preprocessing.
    pub width: usize,
    pub height: usize,
    /// Mean-reversion rate of the curvature walk, in [0,1].
    pub ou_theta: f64,
    /// Innovation scale of the curvature walk.
    pub ou_sigma: f64,
    /// Initial normalized curvature, |value| <= 1.
    pub kappa_start: f64,
    /// Texture feature frequency multiplier.
    pub texture_density: f64,
    /// Forward advance per frame, in ground-texture rows.
    pub speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            sequences: 2,
            frames: 64,
            width: 240,
            height: 160,
            ou_theta: 0.15,
            ou_sigma: 0.25,
            kappa_start: 0.0,
            texture_density: 1.0,
            speed: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames < 2 {
            return Err(Error::config("need at least 1 sequence of 2 frames"));
        }
        if self.width < 64 || self.height < 48 {
            return Err(Error::config(format!(
                "raw extent {}x{} too small to survive the crop",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.ou_theta) {
            return Err(Error::config(format!("ou_theta must be in [0,1], got {}", self.ou_theta)));
        }
        if !(self.ou_sigma >= 0.0 && self.ou_sigma.is_finite()) {
            return Err(Error::config(format!("ou_sigma must be finite and >= 0, got {}", self.ou_sigma)));
        }
        if self.kappa_start.abs() > 1.0 {
            return Err(Error::config(format!("kappa_start must be in [-1,1], got {}", self.kappa_start)));
        }
        if !(self.texture_density > 0.0) || !(self.speed >= 0.0) {
            return Err(Error::config("texture_density must be positive and speed nonnegative"));
        }
        Ok(())
    }
}

/// Normalized-curvature trajectory of one sequence: a clamped
/// mean-reverting random walk, deterministic in `rng`.
pub fn curvature_walk(cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.frames);
    let mut k = cfg.kappa_start;
    for _ in 0..cfg.frames {
        out.push(k);
        k += cfg.ou_theta * (0.0 - k) + cfg.ou_sigma * rng.normal();
        k = k.clamp(-1.0, 1.0);
    }
    out
}

/// Fraction of the frame height occupied by sky.
const HORIZON_FRAC: f64 = 0.40;
/// Uniform lateral texture drift per frame per unit label, in raw pixels.
/// This is the rotational flow component a steering camera induces.
const PAN_GAIN: f64 = 8.0;
/// Lateral offset of the far road, as a fraction of frame width per unit
/// geometry curvature.
const CURVE_GAIN: f64 = 0.15;
/// Road half-width at the bottom row, as a fraction of frame width.
const ROAD_HALFW_FRAC: f64 = 0.42;
/// Smoothing rate of the rendered road shape. The geometry tracks a lagged
/// average of the curvature so the polygon does not jump frame to frame;
/// the instantaneous label lives in the texture pan instead.
const GEOM_SMOOTH: f64 = 0.2;

struct SceneStyle {
    road_gray: f64,
    grass: [f64; 3],
    sky: [f64; 3],
    road_seed: u64,
    grass_seed: u64,
    sky_seed: u64,
    road_freq: f64,
    grass_freq: f64,
}

impl SceneStyle {
    fn draw(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        SceneStyle {
            road_gray: rng.range(0.28, 0.45),
            grass: [rng.range(0.08, 0.22), rng.range(0.35, 0.55), rng.range(0.08, 0.22)],
            sky: [rng.range(0.45, 0.65), rng.range(0.6, 0.78), rng.range(0.82, 0.95)],
            road_seed: rng.next_u64(),
            grass_seed: rng.next_u64(),
            sky_seed: rng.next_u64(),
            road_freq: rng.range(0.05, 0.08) * cfg.texture_density,
            grass_freq: rng.range(0.035, 0.055) * cfg.texture_density,
        }
    }
}

fn put_rgb(buf: &mut [u8], idx: usize, r: f64, g: f64, b: f64) {
    buf[idx] = (r.clamp(0.0, 1.0) * 255.0).round() as u8;
    buf[idx + 1] = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
    buf[idx + 2] = (b.clamp(0.0, 1.0) * 255.0).round() as u8;
}

/// Renders one raw frame. `pan` is the accumulated lateral texture drift,
/// `s` the accumulated forward distance, `kappa` the smoothed curvature
/// shaping the road polygon.
fn render_frame(cfg: &SynthConfig, style: &SceneStyle, pan: f64, s: f64, kappa: f64) -> Vec<u8> {
    let (w, h) = (cfg.width, cfg.height);
    let horizon = (h as f64 * HORIZON_FRAC) as usize;
    let mut buf = vec![0u8; w * h * 3];
    for y in 0..h {
        if y < horizon {
            // Sky: vertical gradient plus clouds that pan with heading.
            let fade = 1.0 - 0.35 * (horizon - y) as f64 / horizon as f64;
            for x in 0..w {
                let cloud = fbm(
                    (x as f64 - pan) * 0.02 * cfg.texture_density,
                    y as f64 * 0.05,
                    style.sky_seed,
                );
                let lift = 0.25 * cloud;
                put_rgb(
                    &mut buf,
                    (y * w + x) * 3,
                    (style.sky[0] * fade + lift).min(1.0),
                    (style.sky[1] * fade + lift).min(1.0),
                    style.sky[2] * fade + lift * 0.6,
                );
            }
            continue;
        }
        let depth_rows = (h - horizon) as f64;
        let persp = (y - horizon + 1) as f64 / depth_rows;
        let z = 1.0 / persp;
        let center = w as f64 / 2.0 + kappa * CURVE_GAIN * w as f64 * (1.0 - persp) * (1.0 - persp);
        let halfw = ROAD_HALFW_FRAC * w as f64 * persp;
        // Distance fade flattens far rows where the perspective texture
        // frequency would alias and decorrelate between frames.
        let contrast = smoothstep(((persp - 0.12) / 0.30).clamp(0.0, 1.0));
        let gv = s + z * 6.0;
        for x in 0..w {
            let gu = ((x as f64 - pan) - w as f64 / 2.0) * z;
            let dx = x as f64 - center;
            let idx = (y * w + x) * 3;
            if dx.abs() < halfw {
                let t = dx / halfw;
                let mottle = fbm(gu * style.road_freq, gv * style.road_freq, style.road_seed);
                let mut v = style.road_gray + (mottle - 0.5) * 0.5 * contrast;
                // Faint edge lines and a dashed center line ride the road
                // geometry, not the panning texture. They stay low contrast
                // so the static shape does not drown the texture motion.
                if t.abs() > 0.90 && t.abs() < 0.95 {
                    v = 0.62 + (mottle - 0.5) * 0.15;
                }
                if t.abs() < 0.03 && (gv * 0.12).fract() < 0.5 {
                    v = 0.68 + (mottle - 0.5) * 0.15;
                }
                put_rgb(&mut buf, idx, v, v, v * 1.02);
            } else {
                let tuft = fbm(gu * style.grass_freq, gv * style.grass_freq, style.grass_seed);
                let m = (tuft - 0.5) * 0.6 * contrast;
                put_rgb(
                    &mut buf,
                    idx,
                    style.grass[0] + m * 0.5,
                    style.grass[1] + m,
                    style.grass[2] + m * 0.5,
                );
            }
        }
    }
    buf
}

/// Renders the raw frames and labels of sequence `index` without touching
/// the filesystem. Returns (frames as interleaved RGB, labels).
pub fn synth_sequence(cfg: &SynthConfig, index: usize) -> Result<(Vec<Vec<u8>>, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).derive(index as u64);
    let style = SceneStyle::draw(cfg, &mut rng);
    let labels = curvature_walk(cfg, &mut rng);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut pan = 0.0;
    let mut s = 0.0;
    let mut geom = labels[0];
    for (t, &kappa) in labels.iter().enumerate() {
        // The pan step uses the frame's own label so the flow from frame
        // t-1 to frame t carries the sign of label t.
        if t > 0 {
            pan += PAN_GAIN * kappa;
            s += cfg.speed;
            geom += GEOM_SMOOTH * (kappa - geom);
        }
        frames.push(render_frame(cfg, &style, pan, s, geom));
    }
    Ok((frames, labels))
}

/// Writes the synthetic dataset: one zero-padded directory per sequence
/// holding zero-padded PNG frames and a `steering.csv`. Deterministic per
/// seed, byte for byte.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    for i in 0..cfg.sequences {
        let dir = root.join(format!("seq_{i:03}"));
        fs::create_dir_all(&dir)?;
        let (frames, labels) = synth_sequence(cfg, i)?;
        let mut csv = String::from("frame_index,steering\n");
        for (t, frame) in frames.iter().enumerate() {
            write_png_rgb8(&dir.join(format!("frame_{t:04}.png")), cfg.width, cfg.height, frame)?;
            csv.push_str(&format!("{t},{}\n", labels[t]));
        }
        fs::write(dir.join("steering.csv"), csv)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset loading.

/// One on-disk sequence: frame paths, labels joined by frame index, and
/// whatever companion modality files are present.
#[derive(Debug, Clone)]
pub struct DriveSequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub labels: Vec<f64>,
    pub flow_files: Option<Vec<PathBuf>>,
    pub depth_files: Option<Vec<PathBuf>>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn parse_steering_csv(path: &Path, name: &str, n_frames: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("sequence {name}: cannot read steering.csv: {e}")))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("frame_index,steering") => {}
        other => {
            return Err(Error::format(format!(
                "sequence {name}: steering.csv header must be 'frame_index,steering', got {other:?}"
            )))
        }
    }
    let mut labels = vec![None; n_frames];
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (idx, value) = line.split_once(',').ok_or_else(|| {
            Error::format(format!("sequence {name}: steering.csv line {} malformed", lineno + 2))
        })?;
        let idx: usize = idx.trim().parse().map_err(|_| {
            Error::format(format!("sequence {name}: bad frame index '{idx}'"))
        })?;
        let value: f64 = value.trim().parse().map_err(|_| {
            Error::format(format!("sequence {name}: bad steering value '{value}'"))
        })?;
        if !value.is_finite() {
            return Err(Error::data(format!("sequence {name}: non-finite label at frame {idx}")));
        }
        if idx >= n_frames || labels[idx].replace(value).is_some() {
            return Err(Error::data(format!(
                "sequence {name}: label count or indices do not match {n_frames} frames"
            )));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| Error::data(format!("sequence {name}: missing label for frame {i}")))
        })
        .collect()
}

/// Loads every sequence directory under `root`, sorted by name. Companion
/// modality directories (`flow/`, `depth/`) are optional, but when present
/// their file counts must match the frame count exactly.
pub fn load_dataset(root: &Path) -> Result<Vec<DriveSequence>> {
    if !root.is_dir() {
        return Err(Error::data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let frames = sorted_files(&dir, "png")?;
        if frames.is_empty() {
            return Err(Error::data(format!("sequence {name}: no frames")));
        }
        let labels = parse_steering_csv(&dir.join("steering.csv"), &name, frames.len())?;
        let flow_dir = dir.join("flow");
        let flow_files = if flow_dir.is_dir() {
            let files = sorted_files(&flow_dir, "flo")?;
            if files.len() != frames.len() {
                return Err(Error::data(format!(
                    "sequence {name}: {} flow files for {} frames",
                    files.len(),
                    frames.len()
                )));
            }
            Some(files)
        } else {
            None
        };
        let depth_dir = dir.join("depth");
        let depth_files = if depth_dir.is_dir() {
            let files = sorted_files(&depth_dir, "png")?;
            if files.len() != frames.len() {
                return Err(Error::data(format!(
                    "sequence {name}: {} depth files for {} frames",
                    files.len(),
                    frames.len()
                )));
            }
            Some(files)
        } else {
            None
        };
        out.push(DriveSequence { name, frames, labels, flow_files, depth_files });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Preparation: pixels to model-ready tensors.

/// One sequence in memory: RGB in [0,1] (standardization happens at batch
/// time with split-specific statistics), modality channels model-ready.
#[derive(Debug)]
pub struct PreparedSequence<T: Scalar> {
    pub name: String,
    pub rgb: Vec<Tensor<T>>,
    /// Flow [2,78,200] in [-1,1] or depth [1,78,200] in [0,1]; empty when
    /// the modality is `None`.
    pub modality: Vec<Tensor<T>>,
    pub labels: Vec<T>,
}

#[derive(Debug)]
pub struct PreparedDataset<T: Scalar> {
    pub seqs: Vec<PreparedSequence<T>>,
    pub modality: Modality,
}

/// Dense flow for consecutive prepared frames; entry 0 is the zero field
/// so companions align 1:1 with frames.
pub fn compute_sequence_flow<T: Scalar>(
    rgb: &[Tensor<T>],
    params: &FlowParams,
) -> Result<Vec<FlowField>> {
    let mut out = Vec::with_capacity(rgb.len());
    out.push(FlowField::zeros(FRAME_W, FRAME_H));
    for pair in rgb.windows(2) {
        let a = luma_plane(&pair[0])?;
        let b = luma_plane(&pair[1])?;
        out.push(farneback_flow(&a, &b, params)?);
    }
    Ok(out)
}

fn prepare_depth<T: Scalar>(path: &Path, crop: &CropSpec) -> Result<Tensor<T>> {
    let (w, h, gray) = read_png_gray(path)?;
    let (y0, y1) = crop.rows(h)?;
    let plane = Plane::from_vec(w, h, gray)?;
    let cropped = crop_plane(&plane, y0, y1);
    let resized = resize_bilinear(&cropped, FRAME_W, FRAME_H);
    Tensor::from_vec(
        &[1, FRAME_H, FRAME_W],
        resized.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Reads pixels and companions into model-ready tensors. Flow companions
/// are used when present (they must be 200x78 fields over the prepared
/// frames) and computed on demand otherwise.
pub fn prepare_dataset<T: Scalar>(
    seqs: &[DriveSequence],
    modality: Modality,
    crop: &CropSpec,
    flow_params: &FlowParams,
) -> Result<PreparedDataset<T>> {
    let mut prepared = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let mut rgb = Vec::with_capacity(seq.frames.len());
        for path in &seq.frames {
            let (w, h, bytes) = read_png_rgb8(path)?;
            rgb.push(prepare_rgb(w, h, &bytes, crop)?);
        }
        let modality_frames = match modality {
            Modality::None => Vec::new(),
            Modality::Flow => match &seq.flow_files {
                Some(files) => {
                    let mut out = Vec::with_capacity(files.len());
                    for f in files {
                        let field = read_flo(f)?;
                        if field.width != FRAME_W || field.height != FRAME_H {
                            return Err(Error::data(format!(
                                "sequence {}: flow file {} is {}x{}, expected {FRAME_W}x{FRAME_H}",
                                seq.name,
                                f.display(),
                                field.width,
                                field.height
                            )));
                        }
                        out.push(normalize_flow(&field, FLOW_DIVISOR)?);
                    }
                    out
                }
                None => compute_sequence_flow(&rgb, flow_params)?
                    .iter()
                    .map(|f| normalize_flow(f, FLOW_DIVISOR))
                    .collect::<Result<Vec<_>>>()?,
            },
            Modality::Depth => {
                let files = seq.depth_files.as_ref().ok_or_else(|| {
                    Error::data(format!("sequence {}: no depth companions", seq.name))
                })?;
                files
                    .iter()
                    .map(|p| prepare_depth(p, crop))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if modality != Modality::None && modality_frames.len() != rgb.len() {
            return Err(Error::data(format!(
                "sequence {}: modality frames misaligned",
                seq.name
            )));
        }
        prepared.push(PreparedSequence {
            name: seq.name.clone(),
            rgb,
            modality: modality_frames,
            labels: seq.labels.iter().map(|&v| T::from_f64(v)).collect(),
        });
    }
    Ok(PreparedDataset { seqs: prepared, modality })
}

/// Per-channel mean and population std over the [0,1] RGB frames of the
/// listed sequences. This is the leakage boundary: callers pass train
/// sequence indices only.
pub fn channel_stats<T: Scalar>(ds: &PreparedDataset<T>, seq_indices: &[usize]) -> Result<ChannelStats> {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0usize;
    for &i in seq_indices {
        let seq = ds
            .seqs
            .get(i)
            .ok_or_else(|| Error::data(format!("sequence index {i} out of range")))?;
        for frame in &seq.rgb {
            let plane = FRAME_H * FRAME_W;
            let d = frame.data();
            for c in 0..3 {
                for v in &d[c * plane..(c + 1) * plane] {
                    let v = v.as_f64();
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            count += plane;
        }
    }
    if count == 0 {
        return Err(Error::data("channel statistics over zero frames"));
    }
    let mut stats = ChannelStats { mean: [0.0; 3], std: [0.0; 3] };
    for c in 0..3 {
        let mean = sum[c] / count as f64;
        stats.mean[c] = mean;
        stats.std[c] = (sumsq[c] / count as f64 - mean * mean).max(0.0).sqrt();
    }
    Ok(stats)
}

/// Window start offsets for a sequence of `len` frames.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window > 0 && stride > 0, "window and stride must be positive");
    if len < window {
        return Vec::new();
    }
    (0..=len - window).step_by(stride).collect()
}

/// Windows of one dataset role, serving standardized frame-major batches.
/// Counts every batch served so fold hygiene is checkable from outside.
pub struct SplitView<'a, T: Scalar> {
    data: &'a PreparedDataset<T>,
    windows: Vec<(usize, usize)>,
    stats: ChannelStats,
    seq_len: usize,
    reads: Cell<usize>,
}

impl<'a, T: Scalar> SplitView<'a, T> {
    /// Builds the view over the given sequences. Every listed sequence
    /// must be long enough for at least one window.
    pub fn new(
        data: &'a PreparedDataset<T>,
        seq_indices: &[usize],
        seq_len: usize,
        stride: usize,
        stats: ChannelStats,
    ) -> Result<Self> {
        let mut windows = Vec::new();
        for &i in seq_indices {
            let seq = data
                .seqs
                .get(i)
                .ok_or_else(|| Error::data(format!("sequence index {i} out of range")))?;
            let starts = window_starts(seq.rgb.len(), seq_len, stride);
            if starts.is_empty() {
                return Err(Error::data(format!(
                    "sequence {} too short for {seq_len}-frame windows",
                    seq.name
                )));
            }
            windows.extend(starts.into_iter().map(|s| (i, s)));
        }
        Ok(SplitView { data, windows, stats, seq_len, reads: Cell::new(0) })
    }

    /// Number of batch requests served so far.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// (sequence, start) pairs, exposed for analysis tooling.
    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }
}

impl<T: Scalar> BatchSource<T> for SplitView<'_, T> {
    fn num_windows(&self) -> usize {
        self.windows.len()
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn modality_channels(&self) -> usize {
        self.data.modality.channels()
    }

    fn batch(&self, indices: &[usize]) -> Result<FrameBatch<T>> {
        self.reads.set(self.reads.get() + 1);
        let with_modality = self.data.modality != Modality::None;
        let mut rgb = Vec::with_capacity(self.seq_len);
        let mut modality = with_modality.then(|| Vec::with_capacity(self.seq_len));
        let mut labels = Vec::with_capacity(self.seq_len);
        for t in 0..self.seq_len {
            let mut rgb_frames = Vec::with_capacity(indices.len());
            let mut mod_frames = Vec::with_capacity(indices.len());
            let mut label_col = Vec::with_capacity(indices.len());
            for &w in indices {
                let &(si, start) = self.windows.get(w).ok_or_else(|| {
                    Error::data(format!("window index {w} out of range ({})", self.windows.len()))
                })?;
                let seq = &self.data.seqs[si];
                rgb_frames.push(standardize_rgb(&seq.rgb[start + t], &self.stats)?);
                if with_modality {
                    mod_frames.push(seq.modality[start + t].clone());
                }
                label_col.push(seq.labels[start + t]);
            }
            let refs: Vec<&Tensor<T>> = rgb_frames.iter().collect();
            rgb.push(stack_frames(&refs)?);
            if let Some(m) = modality.as_mut() {
                let refs: Vec<&Tensor<T>> = mod_frames.iter().collect();
                m.push(stack_frames(&refs)?);
            }
            labels.push(Tensor::from_vec(&[indices.len(), 1], label_col)?);
        }
        Ok(FrameBatch { rgb, modality, labels })
    }
}

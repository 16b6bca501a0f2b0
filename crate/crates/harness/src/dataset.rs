//! Moving-shapes toy dataset: generation, on-disk layout and loading.
//!
//! ```text
//! <root>/dataset.json
//! <root>/<clip>/clip.json
//! <root>/<clip>/lowlight.json        degradation parameters
//! <root>/<clip>/{normal,lowlight,events,masks}/frame_NNNN.png
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use evseg::autograd::Tensor;
use evseg::events::{clip_event_frames, SimConfig};
use evseg::lowlight::{degrade, sample_params, LowLightParams};
use evseg::metrics::SegMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Config, DatasetConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::parallel::par_map;

pub const MANIFEST_FILE: &str = "dataset.json";
pub const FORMAT: &str = "evseg-toy-dataset";

/// Shape of every instance of a class; class `c >= 1` uses kind `(c - 1) % 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        const KINDS: [ShapeKind; 4] = [
            ShapeKind::Circle,
            ShapeKind::Rectangle,
            ShapeKind::Triangle,
            ShapeKind::Diamond,
        ];
        KINDS[(class.max(1) as usize - 1) % 4]
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= 0.6 * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

/// One shape's appearance and linear trajectory; it bounces off the frame
/// borders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrack {
    pub class: u8,
    pub kind: ShapeKind,
    /// Half-extent in pixels.
    pub radius: f64,
    pub start: [f64; 2],
    /// Pixels per frame along `(x, y)`.
    pub velocity: [f64; 2],
    pub color: [f64; 3],
}

impl ShapeTrack {
    pub fn center(&self, t: usize, h: usize, w: usize) -> (f64, f64) {
        let x = self.start[0] + self.velocity[0] * t as f64;
        let y = self.start[1] + self.velocity[1] * t as f64;
        (
            fold(x, self.radius, w as f64 - 1.0 - self.radius),
            fold(y, self.radius, h as f64 - 1.0 - self.radius),
        )
    }
}

/// Reflects `p` into `[lo, hi]`.
fn fold(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub name: String,
    pub index: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub lowlight: LowLightParams,
    pub shapes: Vec<ShapeTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub events: SimConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// A rendered clip held in memory.
#[derive(Clone, Debug)]
pub struct GeneratedClip {
    pub meta: ClipMeta,
    pub normal: Vec<Tensor>,
    /// Degraded scene before sensor noise; the event simulator reads these.
    pub scene: Vec<Tensor>,
    /// Degraded frames with sensor noise, as stored.
    pub lowlight: Vec<Tensor>,
    pub events: Vec<Tensor>,
    pub masks: Vec<SegMask>,
}

pub fn validate(cfg: &DatasetConfig) -> Result<()> {
    let err = |m: String| Err(Error::Config(m));
    if cfg.frames_per_clip == 0 || cfg.height == 0 || cfg.width == 0 {
        return err("dataset frames, height and width must be positive".into());
    }
    if cfg.num_classes < 2 || cfg.num_classes > 255 {
        return err(format!("dataset.num_classes must be in 2..=255, got {}", cfg.num_classes));
    }
    if !(cfg.size_min > 0.0 && cfg.size_min <= cfg.size_max) {
        return err(format!(
            "dataset shape size range [{}, {}] is empty or non-positive",
            cfg.size_min, cfg.size_max
        ));
    }
    if cfg.size_max > cfg.height.min(cfg.width) as f64 {
        return err(format!(
            "shapes up to {} px do not fit a {}x{} frame",
            cfg.size_max, cfg.height, cfg.width
        ));
    }
    if !(cfg.speed_min >= 0.0 && cfg.speed_min <= cfg.speed_max) {
        return err(format!(
            "dataset speed range [{}, {}] is invalid",
            cfg.speed_min, cfg.speed_max
        ));
    }
    for (name, [lo, hi]) in [
        ("shape_brightness", cfg.shape_brightness),
        ("background_brightness", cfg.background_brightness),
    ] {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return err(format!("dataset.{name} [{lo}, {hi}] must lie in [0, 1]"));
        }
    }
    if !(cfg.fps.is_finite() && cfg.fps > 0.0) {
        return err(format!("dataset.fps must be positive, got {}", cfg.fps));
    }
    if !(cfg.sensor_noise.is_finite() && cfg.sensor_noise >= 0.0) {
        return err(format!("dataset.sensor_noise must be non-negative, got {}", cfg.sensor_noise));
    }
    Ok(())
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:04}")
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Class colour: a per-class hue scaled to `brightness`.
fn class_color(class: u8, num_classes: usize, brightness: f64) -> [f64; 3] {
    let hue = (class as f64 - 1.0) / (num_classes - 1).max(1) as f64;
    std::array::from_fn(|i| {
        let c = 0.5 + 0.5 * (2.0 * PI * (hue - i as f64 / 3.0)).cos();
        brightness * (0.4 + 0.6 * c)
    })
}

/// Static textured background `[H,W,3]`.
fn background(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let [lo, hi] = cfg.background_brightness;
    let base = rng.random_range(lo..=hi);
    let amp = 0.25 * (hi - lo);
    let gratings: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.05..0.3);
            (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..=0.05));
    let mut out = Tensor::zeros(&[h, w, 3]);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let wave: f64 = gratings
                .iter()
                .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let noise = rng.random_range(-0.02..=0.02);
            let v = base + amp * wave + noise;
            for (c, t) in tint.iter().enumerate() {
                data[(y * w + x) * 3 + c] = (v + t).clamp(lo, hi);
            }
        }
    }
    out
}

fn sample_tracks(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Vec<ShapeTrack> {
    (0..cfg.num_shapes)
        .map(|_| {
            let class = rng.random_range(1..cfg.num_classes as u8);
            let radius = 0.5 * rng.random_range(cfg.size_min..=cfg.size_max);
            let start = [
                rng.random_range(0.0..cfg.width as f64),
                rng.random_range(0.0..cfg.height as f64),
            ];
            let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
            let angle = rng.random_range(0.0..2.0 * PI);
            let [blo, bhi] = cfg.shape_brightness;
            let brightness = rng.random_range(blo..=bhi);
            ShapeTrack {
                class,
                kind: ShapeKind::for_class(class),
                radius,
                start,
                velocity: [speed * angle.cos(), speed * angle.sin()],
                color: class_color(class, cfg.num_classes, brightness),
            }
        })
        .collect()
}

/// Renders frame `t`; later shapes occlude earlier ones.
pub fn render(
    bg: &Tensor,
    tracks: &[ShapeTrack],
    t: usize,
) -> (Tensor, SegMask) {
    let (h, w) = (bg.dim(0), bg.dim(1));
    let mut img = bg.clone();
    let mut mask = SegMask::filled(h, w, 0);
    for s in tracks {
        let (cx, cy) = s.center(t, h, w);
        let y0 = (cy - s.radius).floor().max(0.0) as usize;
        let y1 = ((cy + s.radius).ceil() as usize).min(h - 1);
        let x0 = (cx - s.radius).floor().max(0.0) as usize;
        let x1 = ((cx + s.radius).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if s.kind.contains(x as f64 - cx, y as f64 - cy, s.radius) {
                    let i = y * w + x;
                    img.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&s.color);
                    mask.labels[i] = s.class;
                }
            }
        }
    }
    (img, mask)
}

/// Renders clip `index` of the dataset. Low-light frames use one parameter
/// draw per clip; event frames are simulated from the unquantized, noise-free
/// frames.
pub fn generate_clip(cfg: &DatasetConfig, sim: &SimConfig, index: usize) -> Result<GeneratedClip> {
    validate(cfg)?;
    let mut rng = clip_rng(cfg.seed, index);
    let bg = background(cfg, &mut rng);
    let tracks = sample_tracks(cfg, &mut rng);
    let lowlight = sample_params(rng.random());
    let (mut normal, mut masks) = (Vec::new(), Vec::new());
    for t in 0..cfg.frames_per_clip {
        let (img, mask) = render(&bg, &tracks, t);
        normal.push(img);
        masks.push(mask);
    }
    let dark = normal
        .iter()
        .map(|f| degrade(f, &lowlight))
        .collect::<evseg::Result<Vec<_>>>()?;
    let events = clip_event_frames(&dark, cfg.fps, sim)?
        .into_iter()
        .map(|e| e.image)
        .collect();
    let noise = Normal::new(0.0, cfg.sensor_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut captured = dark.clone();
    for f in &mut captured {
        for v in f.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(GeneratedClip {
        meta: ClipMeta {
            name: clip_name(index),
            index,
            frames: cfg.frames_per_clip,
            height: cfg.height,
            width: cfg.width,
            fps: cfg.fps,
            lowlight,
            shapes: tracks,
        },
        normal,
        scene: dark,
        lowlight: captured,
        events,
        masks,
    })
}

pub fn write_clip(dir: &Path, clip: &GeneratedClip) -> Result<()> {
    for sub in ["normal", "lowlight", "events", "masks"] {
        io::create_dir(&dir.join(sub))?;
    }
    for t in 0..clip.meta.frames {
        let name = io::frame_name(t);
        io::write_image(&dir.join("normal").join(&name), &clip.normal[t])?;
        io::write_image(&dir.join("lowlight").join(&name), &clip.lowlight[t])?;
        io::write_image(&dir.join("events").join(&name), &clip.events[t])?;
        io::write_mask(&dir.join("masks").join(&name), &clip.masks[t])?;
    }
    io::write_json(&dir.join("clip.json"), &clip.meta)?;
    io::write_json(&dir.join("lowlight.json"), &clip.meta.lowlight)
}

/// Generates the train and validation clips of `cfg` under `root`, which
/// must be empty or absent.
pub fn make_dataset(cfg: &Config, root: &Path) -> Result<DatasetManifest> {
    let d = &cfg.dataset;
    validate(d)?;
    cfg.events.validate()?;
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "{} is not empty; refusing to overwrite",
                root.display()
            )));
        }
    }
    io::create_dir(root)?;
    let indices: Vec<usize> = (0..d.num_clips + d.num_val_clips).collect();
    let results = par_map(&indices, |&i| -> Result<String> {
        let clip = generate_clip(d, &cfg.events, i)?;
        write_clip(&root.join(&clip.meta.name), &clip)?;
        Ok(clip.meta.name)
    });
    let names = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (train, val) = names.split_at(d.num_clips);
    let manifest = DatasetManifest {
        format: FORMAT.to_string(),
        version: 1,
        config: d.clone(),
        events: cfg.events,
        train: train.to_vec(),
        val: val.to_vec(),
    };
    io::write_json(&root.join(MANIFEST_FILE), &manifest)?;
    log::info!(
        "wrote {} train and {} validation clips to {}",
        train.len(),
        val.len(),
        root.display()
    );
    Ok(manifest)
}

/// Frame indices `[t, t-k_1, ..., t-k_l]`, clamped to the first frame.
pub fn reference_indices(t: usize, offsets: &[usize]) -> Vec<usize> {
    std::iter::once(t)
        .chain(offsets.iter().map(|&k| t.saturating_sub(k)))
        .collect()
}

/// A clip's model inputs and labels, kept as 8-bit samples.
#[derive(Clone, Debug)]
pub struct Clip {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB low-light frames.
    pub images: Vec<Vec<u8>>,
    pub events: Vec<Vec<u8>>,
    pub masks: Vec<SegMask>,
}

impl Clip {
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let frames = io::list_pngs(&dir.join("masks"))?;
        if frames.is_empty() {
            return Err(Error::Data(format!("{}: no mask frames", dir.display())));
        }
        let (mut images, mut events, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        let mut size = None;
        for f in &frames {
            let file = f.file_name().expect("listed file");
            let mask = io::read_mask(f)?;
            let (h, w, img) = io::read_bytes(&dir.join("lowlight").join(file), 3)?;
            let (he, we, ev) = io::read_bytes(&dir.join("events").join(file), 1)?;
            if (h, w) != (mask.height, mask.width) || (he, we) != (h, w) {
                return Err(Error::Data(format!(
                    "{}: frame sizes disagree for {}",
                    dir.display(),
                    file.to_string_lossy()
                )));
            }
            if *size.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Data(format!("{}: frame size changes", dir.display())));
            }
            images.push(img);
            events.push(ev);
            masks.push(mask);
        }
        let (height, width) = size.expect("at least one frame");
        Ok(Clip {
            name,
            height,
            width,
            images,
            events,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `[l+1,H,W,3]` images and `[l+1,H,W,1]` event frames of the window
    /// ending at frame `t`, current frame first.
    pub fn window(&self, t: usize, offsets: &[usize]) -> Result<(Tensor, Tensor)> {
        if t >= self.len() {
            return Err(Error::Data(format!(
                "{}: frame {t} out of range ({} frames)",
                self.name,
                self.len()
            )));
        }
        let idx = reference_indices(t, offsets);
        let (h, w) = (self.height, self.width);
        let mut im = Vec::with_capacity(idx.len() * h * w * 3);
        let mut ev = Vec::with_capacity(idx.len() * h * w);
        for &i in &idx {
            im.extend(self.images[i].iter().map(|&v| io::dequantize(v)));
            ev.extend(self.events[i].iter().map(|&v| io::dequantize(v)));
        }
        Ok((
            Tensor::new(&[idx.len(), h, w, 3], im)?,
            Tensor::new(&[idx.len(), h, w, 1], ev)?,
        ))
    }
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&root.join(MANIFEST_FILE))?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!(
                "{}: not a {FORMAT} manifest",
                root.display()
            )));
        }
        let load = |names: &[String]| -> Result<Vec<Clip>> {
            par_map(names, |n| Clip::load(&root.join(n)))
                .into_iter()
                .collect()
        };
        Ok(Dataset {
            root: root.to_path_buf(),
            train: load(&manifest.train)?,
            val: load(&manifest.val)?,
            manifest,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.config.num_classes
    }

    /// Checks the dataset against a run configuration.
    pub fn check_compatible(&self, cfg: &Config) -> Result<()> {
        let d = &self.manifest.config;
        if d.num_classes != cfg.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                d.num_classes, cfg.model.num_classes
            )));
        }
        let (ch, cw) = (cfg.train.crop[0], cfg.train.crop[1]);
        if ch > d.height || cw > d.width {
            return Err(Error::Config(format!(
                "crop {ch}x{cw} exceeds dataset frames {}x{}",
                d.height, d.width
            )));
        }
        if self.train.is_empty() {
            return Err(Error::Data(format!("{}: no training clips", self.root.display())));
        }
        Ok(())
    }
}

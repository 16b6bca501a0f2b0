//! Layered run configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides.

use std::fs;
use std::path::Path;

use evseg::events::SimConfig;
use evseg::metrics::VcDenominator;
use evseg::model::{FusionArm, ModelConfig};
use evseg::optim::AdamWConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Moving-shapes toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Training clips.
    pub num_clips: usize,
    /// Held-out clips used by `eval` and `ablate`.
    pub num_val_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    /// Includes the background class 0.
    pub num_classes: usize,
    /// Shapes per clip.
    pub num_shapes: usize,
    /// Pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Shape extent in pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Normal-light intensity range of shape colours.
    pub shape_brightness: [f64; 2],
    /// Normal-light intensity range of the background texture.
    pub background_brightness: [f64; 2],
    /// Standard deviation of Gaussian read noise added to the stored
    /// low-light frames; events are simulated from the noise-free scene.
    pub sensor_noise: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_clips: 100,
            num_val_clips: 20,
            frames_per_clip: 16,
            height: 64,
            width: 64,
            num_classes: 5,
            num_shapes: 3,
            speed_min: 0.75,
            speed_max: 2.5,
            size_min: 12.0,
            size_max: 24.0,
            shape_brightness: [0.05, 0.25],
            background_brightness: [0.3, 0.7],
            sensor_noise: 0.03,
            fps: 30.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfmConfig {
    pub arrangement: FusionArm,
}

impl Default for MfmConfig {
    fn default() -> Self {
        MfmConfig {
            arrangement: ModelConfig::default().fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub random_crop: bool,
    pub flip: bool,
    /// Brightness, contrast and saturation jitter on image frames.
    pub photometric: bool,
    /// Random gamma on image frames.
    pub gamma: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            random_crop: true,
            flip: true,
            photometric: true,
            gamma: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub poly_power: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    /// Reference offsets `k_1 < ... < k_l`; `l` must equal
    /// `model.reference_frames`.
    pub offsets: Vec<usize>,
    /// Training crop `[H, W]`.
    pub crop: [usize; 2],
    pub augment: AugmentConfig,
    pub adamw: AdamWConfig,
    /// Weight of the per-reference-frame auxiliary loss; 0 disables it.
    pub aux_reference_weight: f64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 6e-5,
            poly_power: 1.0,
            total_iters: 2000,
            batch_size: 2,
            offsets: vec![3, 6, 9],
            crop: [64, 64],
            augment: AugmentConfig::default(),
            adamw: AdamWConfig::default(),
            aux_reference_weight: 0.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// mVC window lengths.
    pub windows: Vec<usize>,
    pub vc_denominator: VcDenominator,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            windows: vec![8, 16],
            vc_denominator: VcDenominator::Gt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub arms: Vec<FusionArm>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            arms: vec![
                FusionArm::NoFusion,
                FusionArm::Fused(evseg::fusion::Arrangement::ChannelThenSpatial),
            ],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub events: SimConfig,
    /// Architecture; the fusion arm comes from `mfm.arrangement`.
    pub model: ModelConfig,
    pub mfm: MfmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Config {
    /// Defaults overlaid with the file at `path` (if any) and then with
    /// `key.path=value` overrides. Values are parsed as TOML, falling back to
    /// a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let schema = schema_table()?;
        let mut table = schema.clone();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Table = toml::from_str(&text).map_err(|source| Error::Toml {
                path: path.to_path_buf(),
                source,
            })?;
            merge(&mut table, file, &schema, "")?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, &schema, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Config = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model configuration with the fusion arm resolved.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            fusion: self.mfm.arrangement,
            ..self.model.clone()
        }
    }

    pub fn with_arm(&self, arm: FusionArm) -> Self {
        let mut c = self.clone();
        c.mfm.arrangement = arm;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let t = &self.train;
        let max_offset = t.offsets.last().copied().unwrap_or(0);
        if t.offsets.is_empty() || t.offsets.windows(2).any(|w| w[0] >= w[1]) || t.offsets[0] == 0 {
            return Err(Error::Config(format!(
                "train.offsets must be positive and strictly increasing, got {:?}",
                t.offsets
            )));
        }
        if self.model.reference_frames != t.offsets.len() {
            return Err(Error::Config(format!(
                "model.reference_frames = {} but train.offsets has {} entries",
                self.model.reference_frames,
                t.offsets.len()
            )));
        }
        if d.frames_per_clip < max_offset + 1 {
            return Err(Error::Config(format!(
                "dataset.frames_per_clip = {} is shorter than the largest offset {max_offset} + 1",
                d.frames_per_clip
            )));
        }
        if !d.height.is_multiple_of(evseg::encoder::MAX_STRIDE) || !d.width.is_multiple_of(evseg::encoder::MAX_STRIDE) {
            return Err(Error::Config(format!(
                "dataset size {}x{} must be a multiple of {}",
                d.height,
                d.width,
                evseg::encoder::MAX_STRIDE
            )));
        }
        if t.crop[0] > d.height || t.crop[1] > d.width {
            return Err(Error::Config(format!(
                "train.crop {:?} exceeds the {}x{} frames",
                t.crop, d.height, d.width
            )));
        }
        if self.model.height != t.crop[0] || self.model.width != t.crop[1] {
            return Err(Error::Config(format!(
                "model input {}x{} must equal train.crop {:?}",
                self.model.height, self.model.width, t.crop
            )));
        }
        if self.model.num_classes != d.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes = {} but dataset.num_classes = {}",
                self.model.num_classes, d.num_classes
            )));
        }
        if t.batch_size == 0 || !(t.lr >= 0.0 && t.lr.is_finite()) || t.poly_power <= 0.0 {
            return Err(Error::Config(
                "train.batch_size must be positive, train.lr non-negative and train.poly_power positive"
                    .into(),
            ));
        }
        if self.eval.windows.contains(&0) {
            return Err(Error::Config("eval.windows must be positive".into()));
        }
        self.events.validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = Value::try_from(self)
            .map_err(|e| Error::Config(e.to_string()))?
            .as_table()
            .cloned()
            .unwrap_or_default();
        if let Some(Value::Table(m)) = table.get_mut("model") {
            m.remove("fusion");
        }
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Defaults as a table; the set of keys it contains is the accepted schema.
fn schema_table() -> Result<Table> {
    let mut table = match Value::try_from(Config::default()) {
        Ok(Value::Table(t)) => t,
        Ok(_) => unreachable!("config serializes to a table"),
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    if let Some(Value::Table(m)) = table.get_mut("model") {
        m.remove("fusion");
    }
    Ok(table)
}

fn merge(dst: &mut Table, src: Table, schema: &Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(expected) = schema.get(&k) else {
            return Err(unknown_key(&key));
        };
        match (expected, v) {
            (Value::Table(sub_schema), Value::Table(sub)) => {
                let Some(Value::Table(d)) = dst.get_mut(&k) else {
                    unreachable!("defaults mirror the schema")
                };
                merge(d, sub, sub_schema, &key)?;
            }
            (Value::Table(_), _) => {
                return Err(Error::Config(format!("{key} must be a table")));
            }
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
    Ok(())
}

fn set_path(table: &mut Table, schema: &Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = table;
    let mut s = schema;
    for (i, part) in parts.iter().enumerate() {
        let Some(expected) = s.get(*part) else {
            return Err(unknown_key(key));
        };
        if i + 1 == parts.len() {
            if expected.is_table() {
                return Err(Error::Config(format!("{key} is a section, not a value")));
            }
            t.insert(part.to_string(), value);
            return Ok(());
        }
        let (Value::Table(next_s), Some(Value::Table(next_t))) = (expected, t.get_mut(*part)) else {
            return Err(unknown_key(key));
        };
        s = next_s;
        t = next_t;
    }
    Err(unknown_key(key))
}

fn unknown_key(key: &str) -> Error {
    let hint = if key == "model.fusion" {
        " (the fusion arm is set with mfm.arrangement)"
    } else {
        ""
    };
    Error::Config(format!("unknown configuration key {key}{hint}"))
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

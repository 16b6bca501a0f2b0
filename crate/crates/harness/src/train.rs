//! Training loop: AdamW with a poly schedule on pixelwise cross-entropy of
//! the current frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evseg::autograd::{Graph, NodeId, ParamStore, Tensor};
use evseg::checkpoint;
use evseg::model::{pixel_cross_entropy, Model, ModelTrace};
use evseg::optim::{poly_lr, AdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentDraw, Sample};
use crate::config::Config;
use crate::dataset::{reference_indices, Dataset};
use crate::error::{Error, Result};
use crate::io;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.toml";
pub const NAN_DUMP_DIR: &str = "nan_dump";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub store: ParamStore,
    pub checkpoint: PathBuf,
}

/// Where a training sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleOrigin {
    pub clip: usize,
    pub frame: usize,
}

/// Draws a clip, a current frame and augmentation parameters.
pub fn draw_sample(cfg: &Config, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<(SampleOrigin, AugmentDraw, Sample)> {
    let clip_idx = rng.random_range(0..data.train.len());
    let clip = &data.train[clip_idx];
    let t = rng.random_range(0..clip.len());
    let (images, events) = clip.window(t, &cfg.train.offsets)?;
    let masks = reference_indices(t, &cfg.train.offsets)
        .into_iter()
        .map(|i| clip.masks[i].clone())
        .collect();
    let raw = Sample { images, events, masks };
    let draw = AugmentDraw::sample(&cfg.train.augment, clip.height, clip.width, cfg.train.crop, rng);
    let sample = augment::apply(&raw, &draw, cfg.train.crop)?;
    Ok((SampleOrigin { clip: clip_idx, frame: t }, draw, sample))
}

/// Current-frame loss plus the optional auxiliary loss on reference frames,
/// which classifies each reference frame's fused features directly.
pub fn sample_loss(
    cfg: &Config,
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    sample: &Sample,
) -> Result<(NodeId, ModelTrace)> {
    let im = g.constant(sample.images.clone());
    let ev = model.uses_events().then(|| g.constant(sample.events.clone()));
    let trace = model.forward(g, store, im, ev)?;
    let mut loss = model.loss(g, &trace, &sample.masks[0])?;
    let w = cfg.train.aux_reference_weight;
    if w > 0.0 && sample.masks.len() > 1 {
        let refs = sample.masks.len() - 1;
        for (j, mask) in sample.masks.iter().enumerate().skip(1) {
            let f = g.select_frame(trace.fused, j)?;
            let s = g.shape(f).to_vec();
            let f = g.reshape(f, &[1, s[0], s[1], s[2]])?;
            let low = model.decoder.classify(g, store, f)?;
            let logits = g.upsample_bilinear(low, model.decoder.cfg.upsample)?;
            let aux = pixel_cross_entropy(g, logits, mask)?;
            let aux = g.scale(aux, w / refs as f64);
            loss = g.add(loss, aux)?;
        }
    }
    Ok((loss, trace))
}

/// Trains from freshly initialized parameters.
pub fn train(cfg: &Config, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    let model = Model::new(&cfg.model_config())?;
    let store = model.init_params(cfg.train.seed);
    train_from(cfg, data, out, store)
}

/// Trains starting from `store`, writing the CSV log, checkpoints and the
/// resolved configuration under `out`.
pub fn train_from(cfg: &Config, data: &Dataset, out: &Path, mut store: ParamStore) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_compatible(cfg)?;
    io::create_dir(out)?;
    io::write_text(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let model = Model::new(&cfg.model_config())?;
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut opt = AdamW::new(t.adamw);
    let mut log = Vec::with_capacity(t.total_iters as usize);
    let log_path = out.join(LOG_FILE);
    let mut writer = csv::Writer::from_path(&log_path)?;
    for iter in 0..t.total_iters {
        let lr = poly_lr(t.lr, iter, t.total_iters, t.poly_power);
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut batch = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let (origin, draw, sample) = draw_sample(cfg, data, &mut rng)?;
            let mut g = Graph::new();
            let (loss, _) = sample_loss(cfg, &model, &mut g, &store, &sample)?;
            let value = g.value(loss).data()[0];
            batch.push((origin, draw, sample));
            if !value.is_finite() {
                let dump = dump_batch(out, iter, lr, value, &batch, &store)?;
                return Err(Error::NonFiniteLoss {
                    iter,
                    loss: value,
                    dump,
                });
            }
            loss_sum += value;
            let gr = g.backward(loss)?;
            for (name, grad) in gr.params() {
                match grads.get_mut(name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name.to_string(), grad);
                    }
                }
            }
        }
        let scale = 1.0 / t.batch_size as f64;
        let grads = grads.into_iter().map(|(n, g)| (n, g.map(|v| v * scale)));
        let grads: Vec<(String, Tensor)> = grads.collect();
        opt.update(&mut store, grads.iter().map(|(n, g)| (n.as_str(), g.clone())), lr)?;
        let row = LogRow {
            iter,
            lr,
            loss: loss_sum * scale,
        };
        writer.serialize(row)?;
        log.push(row);
        if (iter + 1) % 100 == 0 || iter + 1 == t.total_iters {
            log::info!("iter {:>6}  lr {lr:.3e}  loss {:.5}", iter + 1, row.loss);
        }
        if t.checkpoint_every > 0 && (iter + 1) % t.checkpoint_every == 0 && iter + 1 < t.total_iters {
            let dir = out.join(format!("checkpoint_{:06}", iter + 1));
            checkpoint::save(&dir, &store, metadata(cfg, iter + 1)?)?;
        }
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    let dir = out.join(CHECKPOINT_DIR);
    checkpoint::save(&dir, &store, metadata(cfg, t.total_iters)?)?;
    Ok(TrainOutcome {
        log,
        store,
        checkpoint: dir,
    })
}

fn metadata(cfg: &Config, iter: u64) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "config": serde_json::to_value(cfg)?,
        "iter": iter,
        "arm": cfg.mfm.arrangement.to_string(),
    }))
}

/// Rebuilds the run configuration, model and parameters of a checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<(Config, Model, ParamStore)> {
    let (store, manifest) = checkpoint::load(dir)?;
    let cfg_value = manifest
        .metadata
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Data(format!("{}: checkpoint has no run configuration", dir.display())))?;
    let cfg: Config = serde_json::from_value(cfg_value)?;
    let model = Model::new(&cfg.model_config())?;
    let expected = model.init_params(0);
    for (name, t) in expected.iter() {
        match store.get(name) {
            Some(v) if v.shape() == t.shape() => {}
            _ => {
                return Err(Error::Data(format!(
                    "{}: parameter {name} missing or misshapen",
                    dir.display()
                )))
            }
        }
    }
    Ok((cfg, model, store))
}

#[derive(Serialize)]
struct TensorStats {
    shape: Vec<usize>,
    min: f64,
    max: f64,
    mean: f64,
    non_finite: usize,
}

impl TensorStats {
    fn of(t: &Tensor) -> Self {
        let d = t.data();
        let finite = d.iter().filter(|v| v.is_finite());
        TensorStats {
            shape: t.shape().to_vec(),
            min: finite.clone().fold(f64::INFINITY, |a, &b| a.min(b)),
            max: finite.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
            mean: d.iter().sum::<f64>() / d.len().max(1) as f64,
            non_finite: d.iter().filter(|v| !v.is_finite()).count(),
        }
    }
}

fn dump_batch(
    out: &Path,
    iter: u64,
    lr: f64,
    loss: f64,
    batch: &[(SampleOrigin, AugmentDraw, Sample)],
    store: &ParamStore,
) -> Result<PathBuf> {
    let dir = out.join(NAN_DUMP_DIR);
    io::create_dir(&dir)?;
    let samples: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, (origin, draw, s))| {
            for f in 0..s.images.dim(0) {
                let name = format!("sample{i}_frame{f}");
                let im = s.images.frame(f)?;
                let ev = s.events.frame(f)?;
                io::write_image(&dir.join(format!("{name}_image.png")), &im)?;
                io::write_image(&dir.join(format!("{name}_events.png")), &ev)?;
                io::write_mask(&dir.join(format!("{name}_mask.png")), &s.masks[f])?;
            }
            Ok(serde_json::json!({
                "origin": origin,
                "augment": format!("{draw:?}"),
                "images": TensorStats::of(&s.images),
                "events": TensorStats::of(&s.events),
            }))
        })
        .collect::<Result<_>>()?;
    let params: BTreeMap<&str, TensorStats> = store
        .iter()
        .filter(|(_, t)| !t.all_finite())
        .map(|(n, t)| (n, TensorStats::of(t)))
        .collect();
    io::write_json(
        &dir.join("batch.json"),
        &serde_json::json!({
            "iter": iter,
            "lr": lr,
            "loss": loss,
            "samples": samples,
            "non_finite_params": params,
        }),
    )?;
    checkpoint::save(&dir.join("params"), store, serde_json::json!({"iter": iter}))?;
    Ok(dir)
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

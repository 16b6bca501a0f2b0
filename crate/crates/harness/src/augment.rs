//! Training-time augmentation. Geometric transforms hit images, event frames
//! and masks alike; photometric ones touch image frames only.

use evseg::autograd::Tensor;
use evseg::metrics::SegMask;
use rand::Rng;

use crate::config::AugmentConfig;
use crate::error::Result;

/// One training window: `[T,H,W,3]` images, `[T,H,W,1]` events and one mask
/// per frame (current frame first).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub images: Tensor,
    pub events: Tensor,
    pub masks: Vec<SegMask>,
}

/// Geometric and photometric parameters drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub crop_origin: (usize, usize),
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub gamma: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            crop_origin: (0, 0),
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
            saturation: 1.0,
            gamma: 1.0,
        }
    }

    /// Draws parameters for an `h x w` sample cropped to `crop`. Each
    /// photometric op fires with probability one half.
    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, crop: [usize; 2], rng: &mut impl Rng) -> Self {
        let mut d = AugmentDraw::identity();
        let (ry, rx) = (h - crop[0], w - crop[1]);
        d.crop_origin = if cfg.random_crop {
            (rng.random_range(0..=ry), rng.random_range(0..=rx))
        } else {
            (ry / 2, rx / 2)
        };
        if cfg.flip {
            d.flip = rng.random_bool(0.5);
        }
        if cfg.photometric {
            if rng.random_bool(0.5) {
                d.brightness = rng.random_range(-4.0..=4.0) / 255.0;
            }
            if rng.random_bool(0.5) {
                d.contrast = rng.random_range(0.8..=1.2);
            }
            if rng.random_bool(0.5) {
                d.saturation = rng.random_range(0.8..=1.2);
            }
        }
        if cfg.gamma && rng.random_bool(0.5) {
            d.gamma = rng.random_range(0.8..=1.25);
        }
        d
    }
}

fn crop_flip(x: &Tensor, origin: (usize, usize), crop: [usize; 2], flip: bool) -> Result<Tensor> {
    let s = x.shape();
    let (t, w, c) = (s[0], s[2], s[3]);
    let (ch, cw) = (crop[0], crop[1]);
    let mut out = Vec::with_capacity(t * ch * cw * c);
    let src = x.data();
    for f in 0..t {
        for y in 0..ch {
            for xx in 0..cw {
                let sx = if flip { cw - 1 - xx } else { xx };
                let o = ((f * s[1] + origin.0 + y) * w + origin.1 + sx) * c;
                out.extend_from_slice(&src[o..o + c]);
            }
        }
    }
    Ok(Tensor::new(&[t, ch, cw, c], out)?)
}

fn crop_flip_mask(m: &SegMask, origin: (usize, usize), crop: [usize; 2], flip: bool) -> SegMask {
    let (ch, cw) = (crop[0], crop[1]);
    let mut labels = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        for x in 0..cw {
            let sx = if flip { cw - 1 - x } else { x };
            labels.push(m.at(origin.0 + y, origin.1 + sx));
        }
    }
    SegMask {
        height: ch,
        width: cw,
        labels,
        ignore_index: m.ignore_index,
    }
}

/// Ops left at their identity value are skipped so undrawn ops are exact.
fn photometric(images: &mut Tensor, d: &AugmentDraw) {
    let id = AugmentDraw::identity();
    let linear = d.contrast != id.contrast || d.brightness != id.brightness;
    let saturate = d.saturation != id.saturation;
    let gamma = d.gamma != id.gamma;
    if !(linear || saturate || gamma) {
        return;
    }
    for px in images.data_mut().chunks_exact_mut(3) {
        if linear {
            for c in px.iter_mut() {
                *c = (*c * d.contrast + d.brightness).clamp(0.0, 1.0);
            }
        }
        if saturate {
            let grey = (px[0] + px[1] + px[2]) / 3.0;
            for c in px.iter_mut() {
                *c = (grey + (*c - grey) * d.saturation).clamp(0.0, 1.0);
            }
        }
        if gamma {
            for c in px.iter_mut() {
                *c = c.powf(d.gamma);
            }
        }
    }
}

/// Applies `d` to `sample`, cropping to `crop`.
pub fn apply(sample: &Sample, d: &AugmentDraw, crop: [usize; 2]) -> Result<Sample> {
    let mut images = crop_flip(&sample.images, d.crop_origin, crop, d.flip)?;
    photometric(&mut images, d);
    Ok(Sample {
        images,
        events: crop_flip(&sample.events, d.crop_origin, crop, d.flip)?,
        masks: sample
            .masks
            .iter()
            .map(|m| crop_flip_mask(m, d.crop_origin, crop, d.flip))
            .collect(),
    })
}

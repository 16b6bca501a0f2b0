//! Contrast-threshold event simulation and stacking into one-channel frames.
//!
//! A pixel fires one event per `threshold` of absolute log-luminance change
//! between two frames; events are then summed by polarity and encoded as
//! `0.5 + 0.5 * clip(net / max_events_per_pixel, -1, 1)`.

use evseg_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTuple {
    pub x: u32,
    pub y: u32,
    /// 1 for brightening, 0 for darkening.
    pub p: u8,
    pub t: f64,
}

impl EventTuple {
    pub fn sign(&self) -> i64 {
        if self.p == 1 {
            1
        } else {
            -1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Log-luminance change per event.
    pub contrast_threshold: f64,
    pub eps: f64,
    /// Stacking window in seconds.
    pub delta_t: f64,
    /// Net event count mapped to full black or white.
    pub max_events_per_pixel: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            contrast_threshold: 0.2,
            eps: 1e-3,
            delta_t: 1.0 / 30.0,
            max_events_per_pixel: 4,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.contrast_threshold) {
            return Err(Error::Config(format!(
                "contrast_threshold must be positive, got {}",
                self.contrast_threshold
            )));
        }
        if !positive(self.eps) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !positive(self.delta_t) {
            return Err(Error::Config(format!(
                "delta_t must be positive, got {}",
                self.delta_t
            )));
        }
        if self.max_events_per_pixel == 0 {
            return Err(Error::Config("max_events_per_pixel must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    /// `[H, W, 1]` in `[0, 1]`.
    pub image: Tensor,
    pub window_start: f64,
    pub window_end: f64,
}

/// Unweighted channel mean of an `[H, W, C]` frame, row-major `H * W`.
pub fn luminance(frame: &Tensor) -> Result<Vec<f64>> {
    if frame.rank() != 3 {
        return Err(Error::Shape(format!(
            "expected an [H, W, C] frame, got {:?}",
            frame.shape()
        )));
    }
    let c = frame.channels();
    Ok(frame
        .data()
        .chunks(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect())
}

/// Per-pixel signed event count between two luminance values.
pub fn event_count(l_prev: f64, l_curr: f64, cfg: &SimConfig) -> i64 {
    let d = (l_curr + cfg.eps).ln() - (l_prev + cfg.eps).ln();
    let n = (d.abs() / cfg.contrast_threshold).floor() as i64;
    if d > 0.0 {
        n
    } else {
        -n
    }
}

/// Events between `prev` (at `t0`) and `curr` (at `t1`). Each pixel's events
/// are spread evenly over `(t0, t1]`; the stream is sorted by time, then row,
/// then column.
pub fn frames_to_events(
    prev: &Tensor,
    curr: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
) -> Result<Vec<EventTuple>> {
    cfg.validate()?;
    if prev.shape() != curr.shape() {
        return Err(Error::Shape(format!(
            "frame shapes differ: {:?} vs {:?}",
            prev.shape(),
            curr.shape()
        )));
    }
    if t1.partial_cmp(&t0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("need t1 > t0, got t0={t0}, t1={t1}")));
    }
    let w = prev.dim(1);
    let (lp, lc) = (luminance(prev)?, luminance(curr)?);
    let mut events = Vec::new();
    for (i, (&a, &b)) in lp.iter().zip(&lc).enumerate() {
        let n = event_count(a, b, cfg);
        let p = u8::from(n > 0);
        let count = n.unsigned_abs();
        for k in 1..=count {
            events.push(EventTuple {
                x: (i % w) as u32,
                y: (i / w) as u32,
                p,
                t: t0 + (t1 - t0) * k as f64 / count as f64,
            });
        }
    }
    events.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    Ok(events)
}

/// Encodes a per-pixel net polarity sum.
pub fn encode_net(net: i64, max_events_per_pixel: u32) -> f64 {
    let r = (net as f64 / max_events_per_pixel as f64).clamp(-1.0, 1.0);
    0.5 + 0.5 * r
}

/// Stacks every given event into one frame. The window is the `delta_t`
/// interval ending at the latest timestamp (or at 0 for an empty list).
pub fn events_to_frame(
    events: &[EventTuple],
    h: usize,
    w: usize,
    cfg: &SimConfig,
) -> Result<EventFrame> {
    let end = events.iter().map(|e| e.t).fold(0.0, f64::max);
    stack(events.iter(), h, w, end - cfg.delta_t, end, cfg)
}

/// Stacks the events with `start < t <= start + delta_t`.
pub fn events_to_frame_in_window(
    events: &[EventTuple],
    h: usize,
    w: usize,
    start: f64,
    cfg: &SimConfig,
) -> Result<EventFrame> {
    let end = start + cfg.delta_t;
    stack(
        events.iter().filter(|e| e.t > start && e.t <= end),
        h,
        w,
        start,
        end,
        cfg,
    )
}

fn stack<'a>(
    events: impl Iterator<Item = &'a EventTuple>,
    h: usize,
    w: usize,
    start: f64,
    end: f64,
    cfg: &SimConfig,
) -> Result<EventFrame> {
    cfg.validate()?;
    let mut net = vec![0i64; h * w];
    for e in events {
        if e.x as usize >= w || e.y as usize >= h || e.p > 1 {
            return Err(Error::Data(format!(
                "event {e:?} outside a {h}x{w} sensor or with invalid polarity"
            )));
        }
        net[e.y as usize * w + e.x as usize] += e.sign();
    }
    let data = net
        .iter()
        .map(|&n| encode_net(n, cfg.max_events_per_pixel))
        .collect();
    Ok(EventFrame {
        image: Tensor::new(&[h, w, 1], data)?,
        window_start: start,
        window_end: end,
    })
}

/// Event frames for a whole clip sampled at `fps`. Frame `t` stacks the
/// events of the pair `(t-1, t)`; frame 0 has no predecessor and is the
/// neutral 0.5 image.
pub fn clip_event_frames(frames: &[Tensor], fps: f64, cfg: &SimConfig) -> Result<Vec<EventFrame>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("clip has no frames".into()))?;
    let (h, w) = (first.dim(0), first.dim(1));
    let dt = 1.0 / fps;
    let mut out = vec![EventFrame {
        image: Tensor::full(&[h, w, 1], 0.5),
        window_start: -dt,
        window_end: 0.0,
    }];
    for (i, pair) in frames.windows(2).enumerate() {
        let (t0, t1) = (i as f64 * dt, (i + 1) as f64 * dt);
        let events = frames_to_events(&pair[0], &pair[1], t0, t1, cfg)?;
        let mut frame = stack(events.iter(), h, w, t0, t1, cfg)?;
        frame.window_start = t0;
        frame.window_end = t1;
        out.push(frame);
    }
    Ok(out)
}

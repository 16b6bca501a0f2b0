use std::fs;
use std::path::Path;

use evseg::events::SimConfig;
use evseg_harness::config::{Config, DatasetConfig};
use evseg_harness::dataset::{self, generate_clip, make_dataset, reference_indices, Dataset, ShapeKind};
use evseg_harness::{io, Error};

fn small() -> Config {
    let mut cfg = Config::default();
    cfg.dataset.num_clips = 3;
    cfg.dataset.num_val_clips = 2;
    cfg.dataset.frames_per_clip = 12;
    cfg.dataset.height = 32;
    cfg.dataset.width = 32;
    cfg.dataset.size_min = 6.0;
    cfg.dataset.size_max = 12.0;
    cfg
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_dataset(&cfg, a.path()).unwrap();
    make_dataset(&cfg, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 5 * 12 * 4);
    assert_eq!(ta, tb);

    let mut other = cfg.clone();
    other.dataset.seed = 1;
    let c = tempfile::tempdir().unwrap();
    make_dataset(&other, c.path()).unwrap();
    assert_ne!(tree(c.path()), ta);
}

#[test]
fn refuses_non_empty_root() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    assert!(matches!(make_dataset(&small(), dir.path()), Err(Error::Config(_))));
}

#[test]
fn masks_label_shapes_and_background() {
    let cfg = small();
    for index in 0..4 {
        let clip = generate_clip(&cfg.dataset, &cfg.events, index).unwrap();
        let (h, w) = (cfg.dataset.height, cfg.dataset.width);
        for (t, mask) in clip.masks.iter().enumerate() {
            assert_eq!(mask.labels.len(), h * w);
            let mut expected = vec![0u8; h * w];
            for s in &clip.meta.shapes {
                assert!(s.class >= 1 && (s.class as usize) < cfg.dataset.num_classes);
                assert_eq!(s.kind, ShapeKind::for_class(s.class));
                let (cx, cy) = s.center(t, h, w);
                for y in 0..h {
                    for x in 0..w {
                        if s.kind.contains(x as f64 - cx, y as f64 - cy, s.radius) {
                            expected[y * w + x] = s.class;
                        }
                    }
                }
            }
            assert_eq!(mask.labels, expected, "clip {index} frame {t}");
            assert!(mask.labels.iter().any(|&l| l > 0));
        }
    }
}

#[test]
fn shapes_stay_inside_the_frame() {
    let cfg = small();
    let clip = generate_clip(&cfg.dataset, &cfg.events, 0).unwrap();
    for s in &clip.meta.shapes {
        for t in 0..40 {
            let (cx, cy) = s.center(t, 32, 32);
            assert!(cx >= s.radius - 1e-9 && cx <= 31.0 - s.radius + 1e-9);
            assert!(cy >= s.radius - 1e-9 && cy <= 31.0 - s.radius + 1e-9);
        }
    }
}

#[test]
fn low_light_frames_are_darker() {
    let cfg = small();
    let clip = generate_clip(&cfg.dataset, &cfg.events, 1).unwrap();
    assert!(clip.meta.lowlight.in_sampling_range());
    for (n, d) in clip.normal.iter().zip(&clip.scene) {
        for (a, b) in n.data().iter().zip(d.data()) {
            assert!(b <= a);
        }
    }
}

#[test]
fn sensor_noise_only_touches_stored_low_light_frames() {
    let mut cfg = small();
    cfg.dataset.sensor_noise = 0.0;
    cfg.dataset.background_brightness = [0.9, 1.0];
    let clean = generate_clip(&cfg.dataset, &cfg.events, 1).unwrap();
    assert_eq!(clean.lowlight, clean.scene);

    cfg.dataset.sensor_noise = 0.05;
    let noisy = generate_clip(&cfg.dataset, &cfg.events, 1).unwrap();
    assert_eq!(noisy.scene, clean.scene);
    assert_eq!(noisy.events, clean.events);
    assert_eq!(noisy.masks, clean.masks);
    let mut residuals = Vec::new();
    for (n, s) in noisy.lowlight.iter().zip(&noisy.scene) {
        for (a, b) in n.data().iter().zip(s.data()) {
            assert!((0.0..=1.0).contains(a));
            // Pixels far enough from 0 and 1 that clamping is negligible.
            if *b > 0.25 && *b < 0.75 {
                residuals.push(a - b);
            }
        }
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(n > 1000.0);
    assert!((std - 0.05).abs() < 0.01, "std {std}");
}

#[test]
fn negative_sensor_noise_is_rejected() {
    let d = DatasetConfig {
        sensor_noise: -0.1,
        ..DatasetConfig::default()
    };
    assert!(matches!(dataset::validate(&d), Err(Error::Config(_))));
}

#[test]
fn static_clip_has_neutral_event_frames() {
    let mut cfg = small();
    cfg.dataset.speed_min = 0.0;
    cfg.dataset.speed_max = 0.0;
    let clip = generate_clip(&cfg.dataset, &SimConfig::default(), 2).unwrap();
    for e in &clip.events {
        assert!(e.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn moving_shapes_fire_events() {
    let cfg = small();
    let clip = generate_clip(&cfg.dataset, &cfg.events, 3).unwrap();
    let active = clip.events[1..]
        .iter()
        .map(|e| e.data().iter().filter(|&&v| v != 0.5).count())
        .min()
        .unwrap();
    assert!(active > 0);
}

#[test]
fn oversized_shapes_are_rejected() {
    let mut d = DatasetConfig {
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    };
    d.size_max = 40.0;
    assert!(matches!(dataset::validate(&d), Err(Error::Config(_))));
    assert!(generate_clip(&d, &SimConfig::default(), 0).is_err());
}

#[test]
fn reference_indices_clamp_at_the_first_frame() {
    assert_eq!(reference_indices(10, &[3, 6, 9]), vec![10, 7, 4, 1]);
    assert_eq!(reference_indices(4, &[3, 6, 9]), vec![4, 1, 0, 0]);
    assert_eq!(reference_indices(0, &[3, 6, 9]), vec![0, 0, 0, 0]);
}

#[test]
fn loaded_clips_match_generated_frames() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(&cfg, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    assert_eq!(data.manifest, m);
    assert_eq!((data.train.len(), data.val.len()), (3, 2));
    assert_eq!(data.num_classes(), cfg.dataset.num_classes);

    let clip = &data.val[1];
    let generated = generate_clip(&cfg.dataset, &cfg.events, 4).unwrap();
    assert_eq!(clip.name, generated.meta.name);
    assert_eq!(clip.len(), 12);
    let (images, events) = clip.window(5, &[3, 6, 9]).unwrap();
    assert_eq!(images.shape(), &[4, 32, 32, 3]);
    assert_eq!(events.shape(), &[4, 32, 32, 1]);
    for (slot, &t) in reference_indices(5, &[3, 6, 9]).iter().enumerate() {
        let im = images.frame(slot).unwrap();
        for (a, b) in im.data().iter().zip(generated.lowlight[t].data()) {
            assert_eq!(*a, io::dequantize(io::quantize(*b)));
        }
        let ev = events.frame(slot).unwrap();
        for (a, b) in ev.data().iter().zip(generated.events[t].data()) {
            assert_eq!(*a, io::dequantize(io::quantize(*b)));
        }
        assert_eq!(clip.masks[t], generated.masks[t]);
    }
    assert!(clip.window(12, &[3, 6, 9]).is_err());
}

#[test]
fn incompatible_run_config_is_rejected() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&cfg, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    let mut run = Config::default();
    run.model.num_classes = 3;
    assert!(data.check_compatible(&run).is_err());
    let mut run = Config::default();
    run.train.crop = [64, 64];
    assert!(data.check_compatible(&run).is_err());
}

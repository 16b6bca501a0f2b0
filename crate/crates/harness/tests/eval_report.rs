use std::fs;
use std::path::Path;

use evseg::metrics::SegMask;
use evseg::model::FusionArm;
use evseg_harness::ablate::{parse_arms, run_ablation};
use evseg_harness::config::{Config, EvalConfig};
use evseg_harness::dataset::{make_dataset, Dataset};
use evseg_harness::eval::{config_cost, evaluate_dirs, MetricsAccumulator};
use evseg_harness::report::{self, AblationReport};
use evseg_harness::{io, Error};

fn tiny() -> Config {
    let mut cfg = Config::default();
    let d = &mut cfg.dataset;
    d.num_clips = 2;
    d.num_val_clips = 2;
    d.height = 32;
    d.width = 32;
    d.size_min = 8.0;
    d.size_max = 14.0;
    let m = &mut cfg.model;
    m.height = 32;
    m.width = 32;
    m.channels = 8;
    m.image_widths = [4, 4, 8, 8];
    m.event_widths = [4, 4, 4, 4];
    m.mem_hidden = 4;
    cfg.train.crop = [32, 32];
    cfg.train.total_iters = 2;
    cfg.train.lr = 1e-3;
    cfg.ablate.seeds = vec![0, 1];
    cfg
}

fn copy_masks(data: &Dataset, out: &Path) {
    for clip in &data.val {
        let d = out.join(&clip.name);
        fs::create_dir_all(&d).unwrap();
        for (t, m) in clip.masks.iter().enumerate() {
            io::write_mask(&d.join(io::frame_name(t)), m).unwrap();
        }
    }
}

#[test]
fn perfect_prediction_directories_score_one() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    make_dataset(&cfg, &root).unwrap();
    let data = Dataset::open(&root).unwrap();
    let pred = dir.path().join("pred");
    copy_masks(&data, &pred);
    let cost = config_cost(&cfg.model_config()).unwrap();
    let m = evaluate_dirs(&pred, &root, 5, &cfg.eval, &cost).unwrap();
    assert_eq!(m.mvc8, Some(1.0));
    assert_eq!(m.mvc16, Some(1.0));
    assert_eq!(m.mvc_windows, [2 * 9, 2]);
    assert!(m.per_class_iou.iter().flatten().all(|&v| v == 1.0));
    assert_eq!(m.param_count, cost.param_count);
    assert_eq!(m.flop_estimate, cost.flop_estimate);
    assert!(m.param_count > 0 && m.flop_estimate > 0);

    let table = report::metrics_table(&m);
    assert!(table.contains(&m.param_count.to_string()));
    assert!(table.contains(&m.flop_convention));
}

#[test]
fn unsupported_window_is_rejected() {
    let cfg = EvalConfig {
        windows: vec![4],
        ..EvalConfig::default()
    };
    assert!(matches!(MetricsAccumulator::new(3, &cfg), Err(Error::Config(_))));
}

#[test]
fn accumulators_merge_like_a_single_pass() {
    let cfg = EvalConfig::default();
    let clip = |seed: u8| -> (Vec<SegMask>, Vec<SegMask>) {
        let gts: Vec<_> = (0..16)
            .map(|t| SegMask::new(2, 2, vec![0, 1, (t % 3) as u8, seed % 3]).unwrap())
            .collect();
        let preds: Vec<_> = (0..16)
            .map(|t| SegMask::new(2, 2, vec![0, (t % 2) as u8, 2, seed % 2]).unwrap())
            .collect();
        (gts, preds)
    };
    let clips: Vec<_> = (0..4).map(clip).collect();
    let mut single = MetricsAccumulator::new(3, &cfg).unwrap();
    for (g, p) in &clips {
        single.add_clip(g, p).unwrap();
    }
    let mut merged = MetricsAccumulator::new(3, &cfg).unwrap();
    for (g, p) in clips.iter().rev() {
        let mut a = MetricsAccumulator::new(3, &cfg).unwrap();
        a.add_clip(g, p).unwrap();
        merged.merge(&a).unwrap();
    }
    let cost = config_cost(&Config::default().model_config()).unwrap();
    assert_eq!(single.report(&cost), merged.report(&cost));
}

#[test]
fn unknown_arm_is_rejected() {
    assert!(matches!(parse_arms("no_fusion,sideways"), Err(Error::Config(_))));
    assert_eq!(
        parse_arms(" no_fusion , channel_only ").unwrap(),
        vec![FusionArm::NoFusion, "channel_only".parse().unwrap()]
    );
}

#[test]
fn ablation_is_reproducible_and_reports_costs() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    make_dataset(&cfg, &root).unwrap();
    let data = Dataset::open(&root).unwrap();
    let a = run_ablation(&cfg, &data, &dir.path().join("a")).unwrap();
    let b = run_ablation(&cfg, &data, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 4);
    assert_eq!(a.summary.len(), 2);
    assert!(a.summary[0].param_count < a.summary[1].param_count);
    for r in &a.rows {
        let expected = config_cost(&cfg.with_arm(r.arm.parse().unwrap()).model_config()).unwrap();
        assert_eq!(r.param_count, expected.param_count);
        assert_eq!(r.flop_estimate, expected.flop_estimate);
    }

    let out = dir.path().join("a");
    for f in ["ablation.json", "ablation.md", "metrics.svg", "loss.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let saved: AblationReport = io::read_json(&out.join("ablation.json")).unwrap();
    assert_eq!(saved, a);
    let md = fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(md.contains("params") && md.contains("GFLOPs"));
    for s in &a.summary {
        assert!(md.contains(&s.param_count.to_string()));
    }

    let rendered = dir.path().join("rendered");
    let table = report::render(&out, &rendered).unwrap();
    assert_eq!(table, md);
    assert!(rendered.join("report.md").is_file() && rendered.join("report.json").is_file());

    let run = out.join(report::run_dir_name("no_fusion", 0));
    let eval_table = report::render(&run.join(report::EVAL_FILE), &dir.path().join("eval_report")).unwrap();
    assert!(eval_table.contains(&a.rows[0].param_count.to_string()));
    assert!(eval_table.contains("Training: 2 iterations"));
}

#[test]
fn render_rejects_unknown_input() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report::render(dir.path(), &dir.path().join("out")).is_err());
}

#[test]
fn six_arm_run_reports_every_arm() {
    let mut cfg = tiny();
    cfg.ablate.arms = parse_arms("no_fusion,channel,spatial,spatial_then_channel,parallel,channel_then_spatial").unwrap();
    cfg.ablate.seeds = vec![0];
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    make_dataset(&cfg, &root).unwrap();
    let data = Dataset::open(&root).unwrap();
    let r = run_ablation(&cfg, &data, &dir.path().join("out")).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert_eq!(r.summary.len(), 6);
    for row in &r.rows {
        for v in [row.miou, row.wiou, row.mvc8] {
            assert!((0.0..=1.0).contains(&v.unwrap()), "{}", row.arm);
        }
    }
    let md = fs::read_to_string(dir.path().join("out").join("ablation.md")).unwrap();
    for arm in ["channel_only", "spatial_only", "spatial_then_channel", "parallel"] {
        assert!(md.contains(arm));
    }
}

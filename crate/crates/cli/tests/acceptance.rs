//! Acceptance checks for the placement, retrieval and compositing stack. Prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any fails.
//!
//! `cargo test -p compose-cli --test acceptance`

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use compose_core::compositor::{blend, compose, render_layer, CompositeSpec, Matte, Placement, Segment};
use compose_core::evaluator::{correlation, evaluate_model, EvalConfig, EvalScene, Histogram2D, UniformPredictor};
use compose_core::geometry::{
    center_aligned_iou, denormalize_box, iou, normalize_box, pad_to_square, Grid, PixelBox,
};
use compose_core::net::layers::Map;
use compose_core::net::{roi_slice, train, Example, Hyperparams, NetworkConfig, Optimizer, PlacementNet};
use compose_core::pipeline::{
    filter_instances, rejection, AnnotationRecord, FilterConfig, Instance, InstanceRef, Palette,
    PipelineConfig, Rejection, SceneConfig,
};
use compose_core::retrieval::{
    brute_force_nearest, load_pool, CandidatePool, ColorLayoutExtractor, KdTree, PoolEntry,
    PoolParams, QueryOutcome, SegmentRecord,
};
use compose_core::synthetic::{
    generate_scene, generate_scenes, person_cutout, synthetic_pool, SyntheticConfig, OBJECT_CATEGORIES,
};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<Duration, String> {
    let t = started.elapsed();
    ensure(t <= limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

// ---------------------------------------------------------------------------------------
// geometry

/// Area of `a ∩ b` and of `a ∪ b` by counting quarter-pixel cells; exact when every
/// coordinate is a multiple of 0.25 inside `[lo, lo + 64]`.
fn rasterized_iou(a: &PixelBox, b: &PixelBox, lo: f64) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let inside = |p: &PixelBox, x: f64, y: f64| x > p.x_min && x < p.x_max && y > p.y_min && y < p.y_max;
    for j in 0..256 {
        let y = lo + (j as f64 + 0.5) / 4.0;
        for i in 0..256 {
            let x = lo + (i as f64 + 0.5) / 4.0;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn geometry() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..10_000 {
        let (w, h) = (rng.random_range(1..2000u32), rng.random_range(1..2000u32));
        let frame = pad_to_square(w, h).unwrap();
        let (wf, hf) = (f64::from(w), f64::from(h));
        let x0 = rng.random_range(0.0..wf);
        let y0 = rng.random_range(0.0..hf);
        let b = PixelBox::new(x0, y0, rng.random_range(x0..=wf), rng.random_range(y0..=hf));
        let Ok(b) = b else { continue };
        let back = denormalize_box(&normalize_box(&b, &frame), &frame);
        let err = [b.x_min - back.x_min, b.y_min - back.y_min, b.x_max - back.x_max, b.y_max - back.y_max]
            .iter()
            .fold(0f64, |m, d| m.max(d.abs()))
            / frame.side_f64();
        worst = worst.max(err);
    }
    ensure(worst < 1e-6, || format!("round-trip error {worst:.2e}·s"))?;

    let grid = Grid::default();
    for index in 0..225 {
        let cell = grid.from_index(index).unwrap();
        let (u, v) = grid.decode(cell);
        ensure(grid.encode(u, v).unwrap() == cell, || format!("cell {index} does not round-trip"))?;
    }

    let mut worst_iou = 0f64;
    let quarter = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(0..=256u32)) / 4.0;
    let mut pairs = 0;
    while pairs < 1000 {
        let rand_box = |rng: &mut ChaCha8Rng| {
            let (a, b, c, d) = (quarter(rng), quarter(rng), quarter(rng), quarter(rng));
            PixelBox::new(a.min(b), c.min(d), a.max(b), c.max(d))
        };
        let (Ok(a), Ok(b)) = (rand_box(&mut rng), rand_box(&mut rng)) else { continue };
        worst_iou = worst_iou.max((iou(&a, &b) - rasterized_iou(&a, &b, 0.0)).abs());
        let half = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(1..=128u32)) / 2.0;
        let (sa, sb) = ((half(&mut rng), half(&mut rng)), (half(&mut rng), half(&mut rng)));
        let centered = |(w, h): (f64, f64)| PixelBox::centered(0.0, 0.0, w, h);
        let oracle = rasterized_iou(&centered(sa), &centered(sb), -32.0);
        worst_iou = worst_iou.max((center_aligned_iou(sa, sb).unwrap() - oracle).abs());
        pairs += 1;
    }
    ensure(worst_iou < 1e-6, || format!("IoU differs from rasterization by {worst_iou:.2e}"))?;
    let t = within(started, Duration::from_secs(10))?;
    Ok(format!(
        "round-trip {worst:.1e}·s, 225 cells, IoU error {worst_iou:.1e}, {t:.1?}"
    ))
}

// ---------------------------------------------------------------------------------------
// filtering

/// Expected outcome of each fixture instance.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Want {
    Keep,
    Not(Rejection),
}

use Rejection::{Crowd, NearEdge, Overlap, TooSmall, WrongCategory};
use Want::{Keep, Not};

/// `(image, id, category, crowd, [x, y, w, h], expected)` on 640 × 480 images.
const FIXTURE: [(u64, u64, u32, bool, [f64; 4], Want); 50] = [
    // well separated
    (1, 1, 1, false, [40.0, 40.0, 60.0, 100.0], Keep),
    (1, 2, 1, false, [200.0, 40.0, 60.0, 100.0], Keep),
    (1, 3, 1, false, [360.0, 40.0, 60.0, 100.0], Keep),
    (1, 4, 1, false, [520.0, 40.0, 60.0, 100.0], Keep),
    (1, 5, 1, false, [280.0, 300.0, 80.0, 150.0], Keep),
    // edges at 17 and 18 pixels
    (2, 6, 1, false, [17.0, 100.0, 60.0, 100.0], Not(NearEdge)),
    (2, 7, 1, false, [18.0, 300.0, 60.0, 100.0], Keep),
    (2, 8, 1, false, [300.0, 10.0, 60.0, 100.0], Not(NearEdge)),
    (2, 9, 1, false, [562.0, 200.0, 60.0, 100.0], Keep),
    (2, 10, 1, false, [300.0, 363.0, 60.0, 100.0], Not(NearEdge)),
    // areas around 2500
    (3, 11, 1, false, [100.0, 100.0, 50.0, 50.0], Keep),
    (3, 12, 1, false, [300.0, 100.0, 49.0, 51.0], Not(TooSmall)),
    (3, 13, 1, false, [450.0, 100.0, 20.0, 200.0], Keep),
    (3, 14, 1, false, [100.0, 300.0, 100.0, 24.0], Not(TooSmall)),
    (3, 15, 1, false, [300.0, 300.0, 10.0, 10.0], Not(TooSmall)),
    // a car just above the overlap limit; two people just below it
    (4, 16, 1, false, [100.0, 100.0, 100.0, 100.0], Not(Overlap)),
    (4, 17, 3, false, [152.6, 100.0, 100.0, 100.0], Not(WrongCategory)),
    (4, 18, 1, false, [400.0, 100.0, 100.0, 100.0], Keep),
    (4, 19, 1, false, [460.0, 100.0, 100.0, 100.0], Keep),
    (4, 20, 1, false, [300.0, 300.0, 60.0, 120.0], Keep),
    // crowds are dropped but still occlude
    (5, 21, 1, true, [100.0, 100.0, 80.0, 160.0], Not(Crowd)),
    (5, 22, 1, false, [110.0, 110.0, 60.0, 140.0], Not(Overlap)),
    (5, 23, 1, false, [400.0, 100.0, 60.0, 120.0], Keep),
    (5, 24, 1, true, [400.0, 300.0, 200.0, 150.0], Not(Crowd)),
    (5, 25, 1, false, [300.0, 320.0, 60.0, 100.0], Keep),
    // IoU exactly 0.3 survives, 0.3065 does not
    (6, 26, 1, false, [100.0, 100.0, 130.0, 100.0], Keep),
    (6, 27, 1, false, [170.0, 100.0, 130.0, 100.0], Keep),
    (6, 28, 1, false, [400.0, 300.0, 130.0, 100.0], Not(Overlap)),
    (6, 29, 1, false, [469.0, 300.0, 130.0, 100.0], Not(Overlap)),
    (6, 30, 2, false, [300.0, 250.0, 40.0, 40.0], Not(WrongCategory)),
    // several reasons at once
    (7, 31, 1, true, [5.0, 5.0, 10.0, 10.0], Not(Crowd)),
    (7, 32, 1, false, [20.0, 200.0, 40.0, 40.0], Not(TooSmall)),
    (7, 33, 1, false, [10.0, 300.0, 100.0, 100.0], Not(NearEdge)),
    (7, 34, 1, false, [300.0, 100.0, 80.0, 200.0], Not(Overlap)),
    (7, 35, 18, false, [310.0, 110.0, 60.0, 180.0], Not(WrongCategory)),
    // a row with one overlapping pair
    (8, 36, 1, false, [50.0, 150.0, 60.0, 150.0], Keep),
    (8, 37, 1, false, [150.0, 150.0, 60.0, 150.0], Keep),
    (8, 38, 1, false, [250.0, 150.0, 60.0, 150.0], Not(Overlap)),
    (8, 39, 1, false, [270.0, 150.0, 60.0, 150.0], Not(Overlap)),
    (8, 40, 1, false, [450.0, 150.0, 60.0, 150.0], Keep),
    // small boxes inside a large one have a small IoU with it
    (9, 41, 1, false, [18.0, 18.0, 604.0, 444.0], Keep),
    (9, 42, 1, false, [100.0, 100.0, 50.0, 50.0], Keep),
    (9, 43, 1, false, [200.0, 200.0, 60.0, 60.0], Keep),
    (9, 44, 3, false, [300.0, 300.0, 100.0, 100.0], Not(WrongCategory)),
    (9, 45, 1, false, [450.0, 100.0, 60.0, 60.0], Keep),
    // right and bottom edges; a car on top of a person
    (10, 46, 1, false, [580.0, 100.0, 50.0, 100.0], Not(NearEdge)),
    (10, 47, 1, false, [300.0, 370.0, 60.0, 100.0], Not(NearEdge)),
    (10, 48, 1, false, [100.0, 100.0, 60.0, 100.0], Not(Overlap)),
    (10, 49, 1, false, [250.0, 100.0, 60.0, 100.0], Keep),
    (10, 50, 3, false, [100.0, 100.0, 60.0, 100.0], Not(WrongCategory)),
];

const SURVIVORS: &[(u64, u64)] = &[
    (1, 1), (1, 2), (1, 3), (1, 4), (1, 5),
    (2, 7), (2, 9),
    (3, 11), (3, 13),
    (4, 18), (4, 19), (4, 20),
    (5, 23), (5, 25),
    (6, 26), (6, 27),
    (8, 36), (8, 37), (8, 40),
    (9, 41), (9, 42), (9, 43), (9, 45),
    (10, 49),
];

fn filtering() -> Check {
    let mut records: Vec<AnnotationRecord> = Vec::new();
    for &(image_id, id, category, crowd, [x, y, w, h], _) in &FIXTURE {
        if records.last().map(|r| r.image_id) != Some(image_id) {
            records.push(AnnotationRecord {
                image_id,
                file_name: format!("{image_id}.png"),
                width: 640,
                height: 480,
                instances: Vec::new(),
            });
        }
        records.last_mut().unwrap().instances.push(Instance {
            id,
            category,
            bbox: PixelBox::from_xywh(x, y, w, h).unwrap(),
            crowd,
            segmentation: None,
        });
    }
    let cfg = FilterConfig::default();
    for rec in &records {
        for (i, inst) in rec.instances.iter().enumerate() {
            let want = FIXTURE.iter().find(|f| f.1 == inst.id).unwrap().5;
            let got = match rejection(rec, i, 1, &cfg) {
                None => Keep,
                Some(r) => Not(r),
            };
            ensure(got == want, || format!("instance {}: {got:?}, expected {want:?}", inst.id))?;
        }
    }
    let expected: Vec<InstanceRef> = SURVIVORS
        .iter()
        .map(|&(image_id, instance_id)| InstanceRef { image_id, instance_id })
        .collect();
    let kept = filter_instances(&records, 1, &cfg);
    ensure(kept == expected, || format!("survivors {kept:?}"))?;
    Ok(format!("{} of 50 instances survive as enumerated", kept.len()))
}

// ---------------------------------------------------------------------------------------
// network

fn shapes() -> Check {
    let started = Instant::now();
    let net = PlacementNet::new(NetworkConfig::default(), 0).map_err(|e| e.to_string())?;
    let shapes = net.trace_shapes(&vec![0.01; net.input_len()]).map_err(|e| e.to_string())?;
    let table: [(&str, &[usize]); 12] = [
        ("input", &[6, 480, 480]),
        ("stem", &[64, 237, 237]),
        ("pool", &[64, 118, 118]),
        ("block1", &[128, 59, 59]),
        ("block2", &[128, 30, 30]),
        ("block3", &[512, 15, 15]),
        ("location_conv", &[64, 15, 15]),
        ("location_map", &[15, 15]),
        ("size_conv", &[512, 15, 15]),
        ("roi_slice", &[512, 3, 3]),
        ("global_max", &[512]),
        ("size_logits", &[225]),
    ];
    ensure(shapes.len() == table.len(), || format!("{} activations", shapes.len()))?;
    for ((name, shape), (want_name, want)) in shapes.iter().zip(table) {
        ensure(name == want_name && shape == want, || format!("{name} {shape:?}, expected {want_name} {want:?}"))?;
    }

    let g = 15;
    let grid = Grid::default();
    let map = Map::from_data(1, g, g, (0..g * g).map(|i| i as f64).collect());
    for index in 0..g * g {
        let cell = grid.from_index(index).unwrap();
        let s = roi_slice(&map, cell, 3);
        for i in 0..3 {
            for j in 0..3 {
                // window bottom-center on the cell, clamped to the map
                let r = (cell.row as i64 - 2 + i as i64).clamp(0, g as i64 - 1) as usize;
                let c = (cell.col as i64 - 1 + j as i64).clamp(0, g as i64 - 1) as usize;
                ensure(s.at(0, i, j) == (r * g + c) as f64, || format!("cell {index} slice ({i},{j})"))?;
            }
        }
    }
    let t = within(started, Duration::from_secs(30))?;
    Ok(format!("12 activations match, 225 ROI windows match, {t:.1?}"))
}

fn gradients() -> Check {
    const EPS: f64 = 1e-6;
    let mut net = PlacementNet::new(NetworkConfig::tiny(), 11).unwrap();
    // larger output weights so every layer carries a measurable gradient
    let names = net.params().names.clone();
    for (name, v) in names.iter().zip(net.params_mut().values.iter_mut()) {
        if name.starts_with("location.out") || name.starts_with("size.fc2") {
            v.iter_mut().for_each(|w| *w *= 50.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let grid = net.config().grid();
    let (xy, wh) = (grid.cell(2, 3), grid.cell(1, 4));
    let mut grads = net.params().zeros_like();
    net.accumulate_gradients(&input, xy, wh, (1.0, 1.0), &mut grads).unwrap();

    let (mut worst, mut checked) = (0f64, 0);
    for t in 0..net.params().len() {
        for j in 0..net.params().values[t].len() {
            let orig = net.params().values[t][j];
            net.params_mut().values[t][j] = orig + EPS;
            let up = net.loss(&input, xy, wh).unwrap();
            net.params_mut().values[t][j] = orig - EPS;
            let down = net.loss(&input, xy, wh).unwrap();
            net.params_mut().values[t][j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.0[t][j];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
    }
    ensure(worst < 1e-3, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}"))
}

fn compact_pipeline() -> (NetworkConfig, PipelineConfig, Palette, SyntheticConfig) {
    let net = NetworkConfig::compact();
    let cfg = PipelineConfig {
        scene: SceneConfig {
            input_size: net.input_size as u32,
            ..SceneConfig::default()
        },
        ..PipelineConfig::default()
    };
    let syn = SyntheticConfig {
        width: 160,
        height: 120,
        ..SyntheticConfig::default()
    };
    (net, cfg, Palette::new(OBJECT_CATEGORIES, 0), syn)
}

fn overfit() -> Check {
    let started = Instant::now();
    let (net_cfg, cfg, palette, syn) = compact_pipeline();
    let examples: Vec<Example> = generate_scenes(&syn, 3, 0, 20)
        .iter()
        .map(|s| Example::from_sample(&s.training_sample(&cfg, &palette).unwrap()))
        .collect();
    let mut net = PlacementNet::new(net_cfg, 1).unwrap();
    let hp = Hyperparams {
        epochs: 200,
        batch_size: 4,
        learning_rate: 1e-3,
        lr_step: 1000,
        optimizer: Optimizer::adam(),
        ..Hyperparams::default()
    };
    let report = train(&mut net, &examples, &hp, None).map_err(|e| e.to_string())?;
    let chance = 2.0 * 225f64.ln();
    let rel = (report.initial_loss - chance).abs() / chance;
    ensure(rel <= 0.05, || format!("initial loss {:.3} is {:.1}% from {chance:.3}", report.initial_loss, rel * 100.0))?;
    let hit = report
        .epochs
        .iter()
        .find(|e| e.location_top1 >= 0.9 && e.size_top1 >= 0.9)
        .ok_or_else(|| "never reached 90% on both heads".to_string())?;
    let t = within(started, Duration::from_secs(300))?;
    Ok(format!(
        "initial loss {:.3} (2·ln 225 = {chance:.3}), 90% on both heads at epoch {}, {t:.0?}",
        report.initial_loss, hit.epoch
    ))
}

fn distribution() -> Check {
    let started = Instant::now();
    let (net_cfg, cfg, palette, syn) = compact_pipeline();
    let sample = |s: &compose_core::synthetic::SyntheticScene| s.training_sample(&cfg, &palette).unwrap();
    let train_set: Vec<Example> = generate_scenes(&syn, 10, 0, 600).iter().map(|s| Example::from_sample(&sample(s))).collect();
    let held_out: Vec<EvalScene> = generate_scenes(&syn, 10, 1_000_000, 400)
        .iter()
        .map(|s| EvalScene::from_sample(&sample(s)))
        .collect();
    let mut net = PlacementNet::new(net_cfg, 1).unwrap();
    let hp = Hyperparams {
        epochs: 15,
        batch_size: 16,
        learning_rate: 1e-3,
        lr_step: 10,
        lr_decay: 0.3,
        optimizer: Optimizer::adam(),
        ..Hyperparams::default()
    };
    train(&mut net, &train_set, &hp, None).map_err(|e| e.to_string())?;
    let eval = EvalConfig::default();
    let model = evaluate_model(&net, &held_out, &eval).map_err(|e| e.to_string())?.report;
    let uniform = UniformPredictor { grid: Grid::default(), seed: 3 };
    let base = evaluate_model(&uniform, &held_out, &eval).map_err(|e| e.to_string())?.report;
    let summary = format!(
        "position {:.3} vs uniform {:.3}, size {:.3} vs uniform {:.3}",
        model.position_correlation, base.position_correlation, model.size_correlation, base.size_correlation
    );
    for (m, u) in [
        (model.position_correlation, base.position_correlation),
        (model.size_correlation, base.size_correlation),
    ] {
        ensure(m >= 0.8 && m - u >= 0.5, || summary.clone())?;
    }
    let t = within(started, Duration::from_secs(1800))?;
    Ok(format!("{summary}, {t:.0?}"))
}

// ---------------------------------------------------------------------------------------
// retrieval

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn entry(id: u64, descriptor: Vec<f32>, size: (f64, f64)) -> PoolEntry {
    PoolEntry {
        record: SegmentRecord {
            id,
            image_id: id,
            instance_id: id,
            source: String::new(),
            bbox: PixelBox::from_xywh(0.0, 0.0, size.0 * 1000.0, size.1 * 1000.0).unwrap(),
            frame: pad_to_square(1000, 1000).unwrap(),
            dataset: String::new(),
            license: String::new(),
        },
        segment: Segment::new(id, RgbImage::new(1, 1), vec![true]).unwrap(),
        descriptor,
    }
}

/// Center-aligned IoU from interval overlaps of boxes centered on the origin.
fn aligned_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let overlap = |p: f64, q: f64| ((p / 2.0).min(q / 2.0) - (-p / 2.0).max(-q / 2.0)).max(0.0);
    let inter = overlap(a.0, b.0) * overlap(a.1, b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn retrieval() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut queries = 0;
    for pool in 0..1000 {
        let n = rng.random_range(1..=500);
        let dim = rng.random_range(2..=24);
        let mut data = Vec::with_capacity(n * dim);
        for r in 0..n {
            // some exact duplicates exercise the id tie-break
            if r > 0 && rng.random_bool(0.05) {
                let src = rng.random_range(0..r);
                data.extend_from_within(src * dim..(src + 1) * dim);
            } else {
                data.extend(unit(&mut rng, dim));
            }
        }
        let mut ids: Vec<u64> = (1..=n as u64).collect();
        ids.shuffle(&mut rng);
        let keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let tree = KdTree::build(data.clone(), dim, ids.clone());
        for _ in 0..5 {
            let q = unit(&mut rng, dim);
            let k = rng.random_range(1..=12);
            let filtered = rng.random_bool(0.5);
            let pass = |r: usize| !filtered || keep[r];
            let got = tree.nearest(&q, k, &pass);
            let want = brute_force_nearest(&data, dim, &ids, &q, k, &pass);
            ensure(got == want, || format!("pool {pool} (n {n}, dim {dim}, k {k}) differs from brute force"))?;
            queries += 1;
        }
    }

    let dims = 8;
    let params = PoolParams {
        dims,
        ..PoolParams::for_extractor(&ColorLayoutExtractor::default())
    };
    for trial in 0..200 {
        let n = rng.random_range(1..=60);
        let sizes: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.02..0.5), rng.random_range(0.05..0.9))).collect();
        let entries = (0..n).map(|i| entry(i as u64 + 1, unit(&mut rng, 2 * dims), sizes[i])).collect();
        let pool = CandidatePool::new(params.clone(), entries).map_err(|e| e.to_string())?;
        let query = (rng.random_range(0.02..0.5), rng.random_range(0.05..0.9));
        let want: BTreeSet<u64> = (0..n).filter(|&i| aligned_overlap(query, sizes[i]) >= 0.4).map(|i| i as u64 + 1).collect();
        let got: BTreeSet<u64> = match pool.query_descriptor(&unit(&mut rng, 2 * dims), query, n, 0.4).unwrap() {
            QueryOutcome::Hits(h) => h.iter().map(|h| h.id).collect(),
            QueryOutcome::AllFiltered => BTreeSet::new(),
        };
        ensure(got == want, || format!("size filter trial {trial}: {got:?} vs {want:?}"))?;
    }

    let ex = ColorLayoutExtractor::default();
    let scenes = generate_scenes(&SyntheticConfig::default(), 21, 1, 40);
    let pool = synthetic_pool(&scenes, &ex, PoolParams::for_extractor(&ex)).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for r in pool.records() {
        let d = pool.descriptor(r.id).unwrap();
        let top = pool.query_descriptor(d, r.normalized_size(), 1, 0.4).unwrap().hits()[0];
        ensure(top.id == r.id, || format!("segment {} retrieves {}", r.id, top.id))?;
        worst = worst.max(top.distance.abs());
    }
    ensure(worst < 1e-6, || format!("self distance {worst:.2e}"))?;
    Ok(format!(
        "{queries} kd-tree queries equal brute force, 200 size-filter pools, self distance ≤ {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------------------
// compositing

fn noise_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn compositing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut compared = 0usize;
    for trial in 0..12 {
        let radius = [0.0, 1.0, 3.0, 5.5][trial % 4];
        let (img, mask) = person_cutout(rng.random_range(30..90), rng.random_range(0.3..0.5), trial as u64);
        let seg = Segment::new(1, img, mask).unwrap();
        let bg = noise_image(&mut rng, 160, 120);
        let target = PixelBox::from_xywh(rng.random_range(0.0..140.0), rng.random_range(0.0..70.0), 30.0, rng.random_range(20.0..70.0)).unwrap();
        let mut spec = CompositeSpec::new(bg.clone());
        spec.feather_radius = radius;
        spec.placements.push(Placement { segment_id: 1, bbox: target });
        let source: HashMap<u64, Arc<Segment>> = [(1, Arc::new(seg.clone()))].into();
        let out = compose(&spec, &source).map_err(|e| e.to_string())?.image;
        // the hard mask on the background grid
        let hard = render_layer(&seg, &target, 0.0).unwrap();
        let mut inside = Vec::new();
        for j in 0..hard.matte.height as i64 {
            for i in 0..hard.matte.width as i64 {
                if hard.matte.alpha[(j * hard.matte.width as i64 + i) as usize] > 0.5 {
                    inside.push(((hard.offset.0 + i) as f64, (hard.offset.1 + j) as f64));
                }
            }
        }
        for (x, y, p) in out.enumerate_pixels() {
            let (xf, yf) = (f64::from(x), f64::from(y));
            let d = inside.iter().map(|&(u, v)| (u - xf).hypot(v - yf)).fold(f64::INFINITY, f64::min);
            if d > radius + 0.5 {
                ensure(p == bg.get_pixel(x, y), || format!("pixel ({x},{y}) at distance {d:.2} changed with radius {radius}"))?;
                compared += 1;
            }
        }
    }

    for _ in 0..20 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let fg = noise_image(&mut rng, w, h);
        let bg = noise_image(&mut rng, w + 10, h + 10);
        let alpha: Vec<f32> = (0..w * h).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let matte = Matte { width: w, height: h, alpha: alpha.clone() };
        let mut out = bg.clone();
        blend(&mut out, &fg, &matte, (5, 5));
        for (x, y, p) in out.enumerate_pixels() {
            let want = if (5..5 + w).contains(&x) && (5..5 + h).contains(&y) && alpha[((y - 5) * w + x - 5) as usize] == 1.0 {
                fg.get_pixel(x - 5, y - 5)
            } else {
                bg.get_pixel(x, y)
            };
            ensure(p == want, || format!("binary blend differs at ({x},{y})"))?;
        }
    }

    let golden = golden_composite();
    let hash = crc32fast::hash(golden.as_raw());
    ensure(hash == GOLDEN_CRC, || format!("golden composite hash {hash:#010x}, expected {GOLDEN_CRC:#010x}"))?;
    ensure(crc32fast::hash(golden_composite().as_raw()) == hash, || "golden composite is not stable".into())?;
    Ok(format!("{compared} far pixels untouched, binary blends exact, golden {hash:#010x}"))
}

/// CRC-32 of the raw pixels of [`golden_composite`].
const GOLDEN_CRC: u32 = 0xc755_e8f2;

fn golden_composite() -> RgbImage {
    let bg = generate_scene(&SyntheticConfig::default(), 5, 1).background;
    let source: HashMap<u64, Arc<Segment>> = [(1, 80, 0.4), (2, 120, 0.35)]
        .into_iter()
        .map(|(id, h, aspect)| {
            let (img, mask) = person_cutout(h, aspect, id);
            (id, Arc::new(Segment::new(id, img, mask).unwrap()))
        })
        .collect();
    let mut spec = CompositeSpec::new(bg);
    spec.placements = vec![
        Placement { segment_id: 1, bbox: PixelBox::from_xywh(60.0, 110.0, 30.0, 75.0).unwrap() },
        Placement { segment_id: 2, bbox: PixelBox::from_xywh(180.5, 90.25, 40.0, 110.0).unwrap() },
    ];
    compose(&spec, &source).unwrap().image
}

// ---------------------------------------------------------------------------------------
// histogram correlation

/// Pearson's r from raw power sums.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|y| y * y).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa) * (n * sbb - sb * sb)).sqrt()
}

fn correlations() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut worst, mut worst_self, mut worst_scale) = (0f64, 0f64, 0f64);
    let mut pairs = 0;
    while pairs < 1000 {
        let size = rng.random_range(2..=15);
        let mut hist = || {
            let mut h = Histogram2D::new(size);
            h.counts.iter_mut().for_each(|c| *c = f64::from(rng.random_range(0..60u32)));
            h
        };
        let (a, b) = (hist(), hist());
        let Ok(r) = a.correlation(&b) else { continue };
        worst = worst.max((r - pearson(&a.counts, &b.counts)).abs());
        worst_self = worst_self.max((a.correlation(&a).unwrap() - 1.0).abs());
        let c = rng.random_range(1e-3..1e3);
        let scaled: Vec<f64> = a.counts.iter().map(|v| v * c).collect();
        worst_scale = worst_scale.max((correlation(&scaled, &b.counts).unwrap() - r).abs());
        pairs += 1;
    }
    ensure(worst < 1e-9, || format!("differs from the Pearson oracle by {worst:.2e}"))?;
    ensure(worst_self < 1e-12, || format!("self correlation off by {worst_self:.2e}"))?;
    ensure(worst_scale < 1e-9, || format!("scaling changes correlation by {worst_scale:.2e}"))?;
    Ok(format!("1000 pairs within {worst:.1e} of Pearson, self {worst_self:.1e}, scaling {worst_scale:.1e}"))
}

// ---------------------------------------------------------------------------------------
// end to end

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool_path = fixtures().join("pool.tar");
    let pool = load_pool(&pool_path).map_err(|e| e.to_string())?;
    ensure(pool.len() == 30, || format!("bundled pool has {} segments", pool.len()))?;
    let bg = fixtures().join("background.png");
    let (out, prov, again) = (dir.path().join("c.png"), dir.path().join("p.json"), dir.path().join("r.png"));
    let run = |args: &[&Path]| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_compose"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let p = Path::new;
    run(&[p("run"), p("--ckpt"), &fixtures().join("placement.ckpt"), p("--pool"), &pool_path, p("--image"), &bg, p("--out"), &out, p("--provenance"), &prov])?;
    run(&[p("render"), p("--pool"), &pool_path, p("--image"), &bg, p("--provenance"), &prov, p("--out"), &again])?;
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(&prov).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let entries = record.as_array().map_or(0, Vec::len);
    ensure(entries == 1, || format!("provenance holds {entries} entries"))?;
    let a = image::open(&out).map_err(|e| e.to_string())?.to_rgb8();
    let b = image::open(&again).map_err(|e| e.to_string())?.to_rgb8();
    ensure(a == b, || "re-rendered composite differs".into())?;
    ensure(a != image::open(&bg).unwrap().to_rgb8(), || "composite equals the background".into())?;
    Ok(format!("composite {}x{} re-rendered identically from its provenance", a.width(), a.height()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("geometry", geometry),
        ("filter", filtering),
        ("network shapes", shapes),
        ("gradient check", gradients),
        ("overfit", overfit),
        ("distribution", distribution),
        ("retrieval", retrieval),
        ("compositor", compositing),
        ("histogram correlation", correlations),
        ("end to end", end_to_end),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use compose_core::compositor::{compose, render_silhouette, spec_from_provenance, ProvenanceEntry};
use compose_core::config::RunConfig;
use compose_core::evaluator::{
    evaluate_model, render_histogram_pair, EvalScene, PlacementModel, UniformPredictor,
};
use compose_core::geometry::{denormalize_box, PixelBox};
use compose_core::imaging::to_float;
use compose_core::net::{
    export_heatmap, load_checkpoint, save_checkpoint, train, Example, HeatmapStyle, PlacementNet,
};
use compose_core::pipeline::{
    build_scene, load_annotations, load_detections, load_manifest, write_training_set,
    Detection, DetectionCache, Detector, Palette, TrainingSetBuilder,
};
use compose_core::retrieval::{
    build_pool, load_pool, save_pool, CandidatePool, ColorLayoutExtractor, FeatureExtractor,
    PoolEntry, PoolParams, QueryOutcome,
};
use compose_core::synthetic::{generate_scenes, to_coco, SyntheticConfig};
use compose_core::workflow::Composer;
use image::RgbImage;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{Command, DataCommand, NetCommand, PoolCommand};

fn required<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("no {what} given; pass {flag} or set it in the config file"))
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8())
}

fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), v)?;
    Ok(())
}

fn detections(layout: &Option<PathBuf>) -> Result<Vec<Detection>> {
    match layout {
        Some(p) => load_detections(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(Vec::new()),
    }
}

/// The extractor a pool was built with.
fn extractor_for(pool: &CandidatePool) -> Result<ColorLayoutExtractor> {
    let ex = ColorLayoutExtractor {
        dims: pool.params().dims,
    };
    ensure!(
        ex.id() == pool.params().extractor,
        "pool uses descriptor {:?}, which this build does not provide",
        pool.params().extractor
    );
    Ok(ex)
}

fn load_net(cfg: &RunConfig) -> Result<PlacementNet> {
    let p = required(&cfg.paths.checkpoint, "checkpoint", "--ckpt")?;
    load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn open_pool(cfg: &RunConfig) -> Result<CandidatePool> {
    let p = required(&cfg.paths.pool, "pool", "--pool")?;
    load_pool(p).with_context(|| format!("loading pool {}", p.display()))
}

fn composer<'a>(
    cfg: &RunConfig,
    net: &'a PlacementNet,
    pool: &'a CandidatePool,
    extractor: &'a dyn FeatureExtractor,
) -> Composer<'a> {
    let mut c = Composer::new(net, pool, extractor);
    c.palette = Palette::coco(cfg.pipeline.palette_seed);
    c.scene = cfg.pipeline.scene;
    c.scene.input_size = net.config().input_size as u32;
    c.feather_radius = cfg.feather_radius;
    c
}

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<Value> {
    match command {
        Command::Config => Ok(serde_json::to_value(cfg)?),
        Command::Data(DataCommand::Synth(a)) => synth(cfg, a),
        Command::Data(DataCommand::Build(a)) => data_build(cfg, a),
        Command::Net(NetCommand::Train(a)) => net_train(cfg, a),
        Command::Net(NetCommand::Predict(a)) => net_predict(cfg, a),
        Command::Pool(PoolCommand::Build(a)) => pool_build(cfg, a),
        Command::Pool(PoolCommand::Query(a)) => pool_query(cfg, a),
        Command::Run(a) => run(cfg, a),
        Command::Render(a) => render(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Serve(a) => serve(cfg, a),
    }
}

fn synth(cfg: &RunConfig, a: crate::SynthArgs) -> Result<Value> {
    let sc = SyntheticConfig {
        width: a.width,
        height: a.height,
        ..SyntheticConfig::default()
    };
    let images = a.out.join("images");
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let scenes = generate_scenes(&sc, cfg.seed, a.first_id, a.count);
    let name = |id: u64| format!("{id:06}.png");
    let backgrounds = a.out.join("backgrounds");
    if a.backgrounds {
        fs::create_dir_all(&backgrounds)
            .with_context(|| format!("creating {}", backgrounds.display()))?;
    }
    for s in &scenes {
        save_image(&s.image, &images.join(name(s.id)))?;
        if a.backgrounds {
            save_image(&s.background, &backgrounds.join(name(s.id)))?;
        }
    }
    let annotations = a.out.join("annotations.json");
    write_json(&annotations, &to_coco(&scenes, name))?;
    log::info!("wrote {} synthetic scenes to {}", scenes.len(), a.out.display());
    Ok(json!({ "images": scenes.len(), "annotations": annotations, "image_dir": images }))
}

fn data_build(cfg: &RunConfig, a: crate::DataBuildArgs) -> Result<Value> {
    let ann = required(&cfg.paths.annotations, "annotations", "--annotations")?;
    let images = required(&cfg.paths.images, "image directory", "--images")?;
    let records = load_annotations(ann).with_context(|| format!("reading {}", ann.display()))?;
    let detector: DetectionCache = match &a.detections {
        Some(p) => DetectionCache::load(p)?,
        None => DetectionCache::from_annotations(&records),
    };
    let builder = TrainingSetBuilder::new(records, images, &detector as &dyn Detector, cfg.pipeline);
    let survivors = builder.survivors().len();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let written = write_training_set(builder.samples(), &a.out)?;
    write_json(&a.out.join("config.json"), cfg)?;
    log::info!("{written} of {survivors} filtered instances written to {}", a.out.display());
    Ok(json!({ "survivors": survivors, "samples": written, "out": a.out }))
}

fn load_examples(cfg: &RunConfig, dir: &Path) -> Result<Vec<(Example, EvalScene)>> {
    let entries = load_manifest(dir).with_context(|| format!("reading manifest in {}", dir.display()))?;
    ensure!(!entries.is_empty(), "{} holds no samples", dir.display());
    let grid = cfg.network.grid();
    entries
        .par_iter()
        .map(|e| {
            let s = e.load_sample(dir, &grid)?;
            Ok((Example::from_sample(&s), EvalScene::from_sample(&s)))
        })
        .collect()
}

fn net_train(cfg: &RunConfig, a: crate::TrainArgs) -> Result<Value> {
    let data = required(&cfg.paths.data, "training data", "--data")?;
    let out = required(&cfg.paths.checkpoint, "output checkpoint", "--out")?;
    let examples: Vec<Example> = load_examples(cfg, data)?.into_iter().map(|(e, _)| e).collect();
    let mut net = PlacementNet::new(cfg.network.clone(), cfg.seed)?;
    ensure!(
        examples[0].input.len() == net.input_len(),
        "samples in {} do not fit a {}-pixel network input; rebuild the data or pick another --network",
        data.display(),
        cfg.network.input_size
    );
    log::info!("training on {} samples", examples.len());
    let mut sink: Box<dyn std::io::Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::sink()),
    };
    let report = train(&mut net, &examples, &cfg.train, Some(sink.as_mut()))?;
    sink.flush()?;
    save_checkpoint(&net, out)?;
    let last = report.last();
    Ok(json!({
        "checkpoint": out,
        "samples": examples.len(),
        "initial_loss": report.initial_loss,
        "final": last,
    }))
}

fn net_predict(cfg: &RunConfig, a: crate::PredictArgs) -> Result<Value> {
    let net = load_net(cfg)?;
    let image = read_rgb(&a.image)?;
    let mut scene_cfg = cfg.pipeline.scene;
    scene_cfg.input_size = net.config().input_size as u32;
    let (scene, frame) = build_scene(
        &to_float(&image),
        &detections(&a.layout)?,
        &Palette::coco(cfg.pipeline.palette_seed),
        &scene_cfg,
    )?;
    let pred = net.predict(&scene, a.k, a.k_size)?;
    if let Some(p) = &a.heatmap {
        save_image(&export_heatmap(&pred, &frame, Some(&image), &HeatmapStyle::default()), p)?;
    }
    let candidates: Vec<Value> = pred
        .candidates
        .iter()
        .map(|c| {
            json!({
                "box": denormalize_box(&c.bbox, &frame).to_xywh(),
                "location": c.location,
                "size": c.size,
                "location_prob": c.location_prob,
                "size_prob": c.size_prob,
            })
        })
        .collect();
    Ok(json!({ "candidates": candidates, "heatmap": a.heatmap }))
}

fn pool_build(cfg: &RunConfig, a: crate::PoolBuildArgs) -> Result<Value> {
    let ann = required(&cfg.paths.annotations, "annotations", "--annotations")?;
    let images = required(&cfg.paths.images, "image directory", "--images")?;
    let out = required(&cfg.paths.pool, "output pool", "--out")?;
    let records = load_annotations(ann).with_context(|| format!("reading {}", ann.display()))?;
    let ex = ColorLayoutExtractor {
        dims: cfg.descriptor_dims,
    };
    let params = PoolParams {
        size_threshold: cfg.size_threshold,
        category: cfg.pipeline.category,
        filter: cfg.pipeline.filter,
        ..PoolParams::for_extractor(&ex)
    };
    let mut pool = build_pool(&records, images, &ex, params)?;
    if let Some(n) = a.max_segments {
        if pool.len() > n {
            let entries = pool
                .entries()
                .take(n)
                .map(|(record, segment, descriptor)| PoolEntry {
                    record: record.clone(),
                    segment: segment.clone(),
                    descriptor: descriptor.to_vec(),
                })
                .collect();
            pool = CandidatePool::new(pool.params().clone(), entries)?;
        }
    }
    save_pool(&pool, out)?;
    Ok(json!({ "pool": out, "segments": pool.len() }))
}

fn parse_box(s: &str) -> Result<PixelBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("box must be x,y,w,h, got {s:?}"))?;
    let [x, y, w, h] = v[..] else {
        bail!("box must have four numbers, got {s:?}");
    };
    Ok(PixelBox::from_xywh(x, y, w, h)?)
}

fn pool_query(cfg: &RunConfig, a: crate::PoolQueryArgs) -> Result<Value> {
    let pool = open_pool(cfg)?;
    let ex = extractor_for(&pool)?;
    let image = read_rgb(&a.image)?;
    let b = parse_box(&a.bbox)?;
    let (d, size) = pool.describe_query(&image, &b, &ex)?;
    Ok(match pool.query_descriptor(&d, size, a.k, cfg.size_threshold)? {
        QueryOutcome::Hits(hits) => json!({ "outcome": "hits", "hits": hits }),
        QueryOutcome::AllFiltered => json!({ "outcome": "all_filtered", "hits": [] }),
    })
}

fn run(cfg: &RunConfig, a: crate::RunArgs) -> Result<Value> {
    let net = load_net(cfg)?;
    let pool = open_pool(cfg)?;
    let ex = extractor_for(&pool)?;
    let image = read_rgb(&a.image)?;
    let c = composer(cfg, &net, &pool, &ex);
    let auto = c.compose(&image, &detections(&a.layout)?, a.n)?;
    save_image(&auto.composite.image, &a.out)?;
    if let Some(p) = &a.provenance {
        write_json(p, &auto.composite.provenance)?;
    }
    if let Some(p) = &a.heatmap {
        let pred = &auto.people[0].prediction;
        save_image(&export_heatmap(pred, &auto.frame, Some(&image), &HeatmapStyle::default()), p)?;
    }
    let people: Vec<Value> = auto
        .people
        .iter()
        .map(|p| {
            json!({
                "box": p.bbox.to_xywh(),
                "location": p.prediction.top().location,
                "size": p.prediction.top().size,
                "candidates": p.candidates,
            })
        })
        .collect();
    Ok(json!({
        "composite": a.out,
        "provenance": auto.composite.provenance,
        "people": people,
    }))
}

fn render(cfg: &RunConfig, a: crate::RenderArgs) -> Result<Value> {
    let pool = open_pool(cfg)?;
    let image = read_rgb(&a.image)?;
    let f = File::open(&a.provenance).with_context(|| format!("reading {}", a.provenance.display()))?;
    let entries: Vec<ProvenanceEntry> = serde_json::from_reader(std::io::BufReader::new(f))
        .with_context(|| format!("parsing {}", a.provenance.display()))?;
    let spec = spec_from_provenance(image, &entries, cfg.feather_radius)?;
    let out = if a.silhouette {
        render_silhouette(&spec, &pool)?
    } else {
        compose(&spec, &pool)?
    };
    save_image(&out.image, &a.out)?;
    Ok(json!({ "composite": a.out, "provenance": out.provenance }))
}

fn eval(cfg: &RunConfig, a: crate::EvalArgs) -> Result<Value> {
    let data = required(&cfg.paths.data, "evaluation data", "--data")?;
    let scenes: Vec<EvalScene> = load_examples(cfg, data)?.into_iter().map(|(_, s)| s).collect();
    let uniform = UniformPredictor {
        grid: cfg.eval.grid,
        seed: cfg.seed,
    };
    let net;
    let model: &dyn PlacementModel = if a.uniform {
        &uniform
    } else {
        net = load_net(cfg)?;
        &net
    };
    let evaluation = evaluate_model(model, &scenes, &cfg.eval)?;
    if let Some(dir) = &a.histograms {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let (t, p) = (&evaluation.truth, &evaluation.predicted);
        save_image(&render_histogram_pair(&t.position, &p.position, 16), &dir.join("position.png"))?;
        save_image(&render_histogram_pair(&t.size, &p.size, 16), &dir.join("size.png"))?;
    }
    Ok(serde_json::to_value(evaluation.report)?)
}

fn serve(cfg: &RunConfig, a: crate::ServeArgs) -> Result<Value> {
    let net = load_net(cfg)?;
    let pool = open_pool(cfg)?;
    let ex = extractor_for(&pool)?;
    let mut config = compose_service::ServiceConfig {
        feather_radius: cfg.feather_radius,
        persist: a.persist.clone(),
        ..Default::default()
    };
    if let Some(m) = a.max_pixels {
        config.max_pixels = m;
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let state = Arc::new(compose_service::AppState::new(net, pool, Box::new(ex), config));
    tokio::runtime::Runtime::new()?.block_on(compose_service::serve(state, addr))?;
    Ok(json!({ "stopped": true }))
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hedunet::erf::{attention_stats, effective_receptive_field, sample_tiles, OutputHead};
use hedunet::experiment::{
    ablation_csv, evaluate_model, generate_dataset, load_dataset, run_ablation, run_baseline, synthetic_tiles,
    train_model, AblationMatrix, BaselineKind, Dataset, ExperimentConfig, Manifest, Split, SplitTiles,
};
use hedunet::io::{mask_to_gray, read_raster, to_gray, write_pgm, write_raster};
use hedunet::metrics::MetricsReport;
use hedunet::model::{load_checkpoint, save_checkpoint, theoretical_rf, Merging, Model, ModelConfig};
use hedunet::raster::Raster;
use hedunet::training::{predict_tiles, probabilities};
use hedunet::Tensor;

use crate::{BaselineArg, Command, HeadArg, SeedArg, SplitArg, SEED_ENV};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn rt(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

type Outcome<T = ()> = Result<T, Failure>;

fn seed_override(arg: &SeedArg) -> Outcome<Option<u64>> {
    if let Some(s) = arg.seed {
        return Ok(Some(s));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(anyhow!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Outcome<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display())).map_err(usage)?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display())).map_err(usage)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Config for commands that read an existing dataset. Without a config
/// file the defaults are adapted to the manifest; a checkpoint's model
/// config always wins.
fn dataset_config(config: Option<&Path>, data: &Path, model: Option<&ModelConfig>) -> Outcome<(ExperimentConfig, Dataset)> {
    let manifest = Manifest::read(data).with_context(|| format!("cannot read dataset {}", data.display())).map_err(rt)?;
    let mut cfg = match config {
        Some(p) => load_config(p, None)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.generator.size = manifest.size;
            cfg.generator.pixel_size_m = manifest.pixel_size_m;
            cfg.train.pixel_size_m = manifest.pixel_size_m;
            cfg.data.tile_size = manifest.size;
            cfg.model.levels = cfg.model.levels.min(manifest.size.trailing_zeros() as usize + 1);
            cfg
        }
    };
    if let Some(m) = model {
        cfg.model = m.clone();
        cfg.generator.with_dem |= m.use_dem;
    }
    cfg.validate().context("configuration does not fit the dataset").map_err(usage)?;
    let data = load_dataset(data, &cfg).map_err(rt)?;
    Ok((cfg, data))
}

fn split_of(data: &Dataset, split: SplitArg) -> &SplitTiles {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    }
}

fn load_model(path: &Path) -> Outcome<Model> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display())).map_err(rt)
}

fn report(report: &MetricsReport, csv: Option<&Path>, curve: Option<&Path>) -> Outcome {
    println!("{report}");
    if let Some(p) = csv {
        report.write_csv(File::create(p).map_err(rt)?).map_err(rt)?;
    }
    if let Some(p) = curve {
        report.write_f1_curve(File::create(p).map_err(rt)?).map_err(rt)?;
    }
    Ok(())
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Generate { config, out, seed, jobs } => {
            let cfg = load_config(&config, seed_override(&seed)?)?;
            let manifest = generate_dataset(&cfg, &out, jobs).map_err(rt)?;
            println!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out, log, force, seed } => train(&config, &data, &out, log, force, &seed),
        Command::Eval { ckpt, predictions, data, config, split, csv, curve } => {
            let rep = match (ckpt, predictions) {
                (Some(ckpt), _) => {
                    let model = load_model(&ckpt)?;
                    let (cfg, ds) = dataset_config(config.as_deref(), &data, Some(model.config()))?;
                    evaluate_model(&model, &split_of(&ds, split).tiles, &cfg).map_err(rt)?
                }
                (None, Some(dir)) => {
                    let (cfg, ds) = dataset_config(config.as_deref(), &data, None)?;
                    eval_predictions(&dir, split_of(&ds, split), &cfg)?
                }
                (None, None) => return Err(usage(anyhow!("either --ckpt or --predictions is required"))),
            };
            report(&rep, csv.as_deref(), curve.as_deref())
        }
        Command::Predict { ckpt, data, out, config, split, sides } => {
            let model = load_model(&ckpt)?;
            let (_, ds) = dataset_config(config.as_deref(), &data, Some(model.config()))?;
            predict(&model, split_of(&ds, split), &out, sides)
        }
        Command::Erf { ckpt, data, out, config, samples, center, head, seed } => {
            let model = load_model(&ckpt)?;
            let (cfg, ds) = dataset_config(config.as_deref(), &data, Some(model.config()))?;
            let seed = seed_override(&seed)?.unwrap_or(cfg.erf.seed);
            let head = match head {
                Some(HeadArg::Seg) => OutputHead::Seg,
                Some(HeadArg::Edge) => OutputHead::Edge,
                None => cfg.erf.head,
            };
            erf(&model, &ds, &out, samples.unwrap_or(cfg.erf.samples), center, head, seed)
        }
        Command::Baseline { kind, data, config, split, csv, jobs } => {
            let (cfg, ds) = dataset_config(config.as_deref(), &data, None)?;
            let kind = match kind {
                BaselineArg::Gmm => BaselineKind::Gmm,
                BaselineArg::Sobel => BaselineKind::Sobel,
            };
            let rep = run_baseline(kind, &split_of(&ds, split).tiles, &cfg, jobs).map_err(rt)?;
            report(&rep, csv.as_deref(), None)
        }
        Command::Ablate { config, matrix, out, seed, jobs } => ablate(&config, &matrix, &out, &seed, jobs),
    }
}

fn train(config: &Path, data: &Path, out: &Path, log: Option<PathBuf>, force: bool, seed: &SeedArg) -> Outcome {
    let cfg = load_config(config, seed_override(seed)?)?;
    if out.exists() && !force {
        return Err(usage(anyhow!("{} already exists; pass --force to overwrite it", out.display())));
    }
    let ds = load_dataset(data, &cfg).with_context(|| format!("cannot load dataset {}", data.display())).map_err(rt)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    let mut log = BufWriter::new(File::create(&log_path).map_err(rt)?);
    let (model, records) = train_model(&cfg, &ds.train.tiles, &ds.val.tiles, Some(&mut log)).map_err(rt)?;
    log.flush().map_err(rt)?;
    save_checkpoint(&model, out).map_err(rt)?;
    if let Some(last) = records.last() {
        println!("epoch {} {}: loss {:.4}", last.epoch, last.split, last.loss.total);
    }
    println!("checkpoint {}, log {}", out.display(), log_path.display());
    Ok(())
}

fn eval_predictions(dir: &Path, split: &SplitTiles, cfg: &ExperimentConfig) -> Outcome<MetricsReport> {
    let mut evaluator = cfg.metrics.evaluator(cfg.generator.pixel_size_m);
    for (id, tile) in split.ids.iter().zip(&split.tiles) {
        let load = |role: &str| -> Outcome<Option<Vec<f32>>> {
            let p = dir.join(format!("{id}_{role}.ras"));
            if !p.exists() {
                return Ok(None);
            }
            let r = read_raster(&p).with_context(|| format!("cannot read {}", p.display())).map_err(rt)?;
            if r.channels() != 1 || (r.height(), r.width()) != tile.mask.dims() {
                return Err(rt(anyhow!("{} does not match tile {id}", p.display())));
            }
            Ok(Some(r.data().to_vec()))
        };
        let (seg, edge) = (load("seg")?, load("edge")?);
        if seg.is_none() && edge.is_none() {
            return Err(rt(anyhow!("no predictions for {id} in {}", dir.display())));
        }
        evaluator.add(&tile.mask, seg.as_deref(), edge.as_deref()).map_err(rt)?;
    }
    Ok(evaluator.finish())
}

fn prob_raster(t: &Tensor) -> Raster {
    let (_, _, h, w) = t.dims4().expect("rank 4");
    Raster::new(1, h, w, probabilities(t).remove(0)).expect("one channel")
}

fn stack_levels(maps: &[Tensor]) -> Raster {
    let (_, _, h, w) = maps[0].dims4().expect("rank 4");
    let data = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    Raster::new(maps.len(), h, w, data).expect("matching extents")
}

fn predict(model: &Model, split: &SplitTiles, out: &Path, sides: bool) -> Outcome {
    fs::create_dir_all(out).map_err(rt)?;
    let mut written = 0usize;
    predict_tiles(model, &split.tiles, |i, tile, b| {
        let id = &split.ids[i];
        let path = |name: &str| out.join(format!("{id}_{name}"));
        let mut save = |name: &str, r: &Raster| -> hedunet::Result<()> {
            written += 1;
            write_raster(&path(&format!("{name}.ras")), r)
        };
        let seg = prob_raster(&b.seg_logits);
        let edge = prob_raster(&b.edge_logits);
        save("seg", &seg)?;
        save("edge", &edge)?;
        if !b.attn_seg.is_empty() {
            save("attn_seg", &stack_levels(&b.attn_seg))?;
            save("attn_edge", &stack_levels(&b.attn_edge))?;
        }
        if sides {
            for (k, (s, e)) in b.side_seg.iter().zip(&b.side_edge).enumerate() {
                save(&format!("side_seg_{k}"), &prob_raster(s))?;
                save(&format!("side_edge_{k}"), &prob_raster(e))?;
            }
        }
        let (h, w) = tile.mask.dims();
        let gray = |r: &Raster| r.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect::<Vec<u8>>();
        write_pgm(&path("seg.pgm"), h, w, &gray(&seg))?;
        write_pgm(&path("edge.pgm"), h, w, &gray(&edge))?;
        write_pgm(&path("sar.pgm"), h, w, &to_gray(tile.sar.channel(0)))?;
        write_pgm(&path("gt.pgm"), h, w, &mask_to_gray(&tile.mask))
    })
    .map_err(rt)?;
    println!("wrote {written} rasters for {} tiles to {}", split.tiles.len(), out.display());
    Ok(())
}

fn erf(
    model: &Model,
    ds: &Dataset,
    out: &Path,
    samples: usize,
    center: Option<(usize, usize)>,
    head: OutputHead,
    seed: u64,
) -> Outcome {
    let pool = if ds.val.tiles.is_empty() { &ds.train.tiles } else { &ds.val.tiles };
    let tiles = sample_tiles(pool, samples, seed).map_err(rt)?;
    let (h, w) = tiles[0].mask.dims();
    let center = center.unwrap_or((h / 2, w / 2));
    if center.0 >= h || center.1 >= w {
        return Err(usage(anyhow!("centre {center:?} outside the {h}x{w} tiles")));
    }
    let map = effective_receptive_field(model, &tiles, center, head).map_err(rt)?;
    let side = theoretical_rf(model.config());
    fs::create_dir_all(out).map_err(rt)?;
    map.write_raster(&out.join("erf.ras")).map_err(rt)?;
    map.write_pgm(&out.join("erf.pgm"), side).map_err(rt)?;
    let summary = serde_json::json!({
        "center": [center.0, center.1],
        "head": head,
        "samples": map.n_samples,
        "sampler_seed": seed,
        "theoretical_rf": side,
        "support_1pct": map.support(0.01),
        "nonzero_outside_rf": map.nonzero_outside(side),
        "max": map.max(),
    });
    fs::write(out.join("erf.json"), serde_json::to_string_pretty(&summary).map_err(rt)? + "\n").map_err(rt)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(rt)?);
    if model.config().merging == Merging::Attention {
        let stats = attention_stats(model, pool).map_err(rt)?;
        fs::write(out.join("attention.json"), serde_json::to_string_pretty(&stats).map_err(rt)? + "\n").map_err(rt)?;
    }
    Ok(())
}

fn ablate(config: &Path, matrix: &Path, out: &Path, seed: &SeedArg, jobs: usize) -> Outcome {
    let mut cfg = load_config(config, seed_override(seed)?)?;
    let text = fs::read_to_string(matrix).with_context(|| format!("cannot read matrix {}", matrix.display())).map_err(usage)?;
    let matrix: AblationMatrix =
        serde_json::from_str(&text).with_context(|| format!("invalid matrix {}", matrix.display())).map_err(usage)?;
    if matrix.cells().is_empty() || matrix.replicates == 0 {
        return Err(usage(anyhow!("ablation matrix is empty")));
    }
    cfg.generator.with_dem |= matrix.dem.contains(&true);
    let train_tiles = synthetic_tiles(&cfg, Split::Train, jobs).map_err(rt)?;
    let val_tiles = synthetic_tiles(&cfg, Split::Val, jobs).map_err(rt)?;
    fs::create_dir_all(out).map_err(rt)?;
    let mut runs = BufWriter::new(File::create(out.join("runs.csv")).map_err(rt)?);
    writeln!(runs, "dem,deep_supervision,levels,merging,replicate,{}", MetricsReport::CSV_HEADER).map_err(rt)?;
    let mut io_error = None;
    let rows = run_ablation(&cfg, &matrix, &train_tiles, &val_tiles, |c, r, rep| {
        let miou = rep.miou.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        eprintln!("dem={} ds={} levels={} merging={:?} replicate={r}: mIoU {miou}", c.dem, c.deep_supervision, c.levels, c.merging);
        let line = format!("{},{},{},{:?},{r},{}", c.dem, c.deep_supervision, c.levels, c.merging, rep.csv_row());
        if let Err(e) = writeln!(runs, "{line}") {
            io_error.get_or_insert(e);
        }
    })
    .map_err(rt)?;
    if let Some(e) = io_error {
        return Err(rt(e));
    }
    runs.flush().map_err(rt)?;
    let table = ablation_csv(&rows);
    fs::write(out.join("ablation.csv"), &table).map_err(rt)?;
    print!("{table}");
    Ok(())
}

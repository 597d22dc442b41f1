//! What each subcommand does, callable without the argument parser.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use frontnet_core::data::{generate_scene, Scene};
use frontnet_core::eval::{ImageResult, MetricsReport};
use frontnet_core::hooks::HookType;
use frontnet_core::losses::Supervision;
use frontnet_core::train::{ablate, evaluate, predict_scene, train, AblationArm, EpochLog, TrainOutcome};
use log::info;

use crate::caffe::load_caffe_directory;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::io::{ensure_dir, load_scenes, save_scene, write_front_csv, write_gray_png};
use crate::plot;
use crate::report;

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub meters_per_pixel: f64,
    pub seed: u64,
    pub patch: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            size: 448,
            meters_per_pixel: 20.0,
            seed: 0,
            patch: 112,
        }
    }
}

/// Seeds of the generated training and validation scenes.
pub fn scene_seeds(o: &GenOptions) -> (Vec<u64>, Vec<u64>) {
    let train = (0..o.train as u64).map(|i| o.seed * 1_000_003 + i).collect();
    let val = (0..o.val as u64).map(|i| o.seed * 1_000_003 + 500_000 + i).collect();
    (train, val)
}

/// Generated scenes in memory, named `scene_XXXX`.
pub fn generate(o: &GenOptions) -> Result<(Vec<(String, Scene)>, Vec<(String, Scene)>)> {
    let (ts, vs) = scene_seeds(o);
    let make = |seeds: Vec<u64>| -> Result<Vec<(String, Scene)>> {
        seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| Ok((format!("scene_{i:04}"), generate_scene(s, o.size, o.size, o.meters_per_pixel, o.patch)?)))
            .collect()
    };
    Ok((make(ts)?, make(vs)?))
}

/// Writes `<out>/train` and `<out>/val`.
pub fn gen_data(out: &Path, o: &GenOptions) -> Result<()> {
    let (train, val) = generate(o)?;
    for (sub, scenes) in [("train", &train), ("val", &val)] {
        let dir = out.join(sub);
        for (name, s) in scenes {
            save_scene(&dir, name, s)?;
        }
        info!("wrote {} scenes to {}", scenes.len(), dir.display());
    }
    Ok(())
}

/// Scenes of a data directory: a `train/` (or given) folder of saved
/// scenes, or a benchmark-layout folder.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Scene)>> {
    if dir.join("sar_images").is_dir() {
        let (scenes, issues) = load_caffe_directory(dir)?;
        for i in &issues {
            log::warn!("skipped {}: {}", i.path.display(), i.reason);
        }
        return Ok(scenes);
    }
    let scenes = load_scenes(dir)?;
    if scenes.is_empty() {
        bail!("no scenes found in {}", dir.display());
    }
    Ok(scenes)
}

/// Fresh `<root>/<timestamp>-seed<seed>` directory.
pub fn new_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    ensure_dir(&dir)
}

pub struct TrainRun {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

/// Trains, writing per-epoch checkpoints, logs, the best checkpoint and the
/// run record into `run_dir`.
pub fn train_into(run_dir: &Path, cfg: &RunConfig, scenes: &[(String, Scene)]) -> Result<TrainRun> {
    let start = Instant::now();
    fs::write(run_dir.join("config.txt"), cfg.to_text())?;
    let ckpt_dir = ensure_dir(&run_dir.join("checkpoints"))?;
    let init = match &cfg.pretrained_weights {
        Some(p) => Some(checkpoint::read(Path::new(p))?.1),
        None => None,
    };
    let plain: Vec<Scene> = scenes.iter().map(|(_, s)| s.clone()).collect();
    let outcome = train(&cfg.train, &plain, init.as_deref(), |log: &EpochLog, store| {
        info!(
            "epoch {:>3} lr {:.6} total {:.4} (L_t {:.4}, L_c {:.4}, aux {:.4}) val IoU {:.4}",
            log.epoch, log.lr, log.total, log.l_t, log.l_c, log.aux, log.val_macro_iou
        );
        checkpoint::save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", log.epoch)), cfg, store)
            .map_err(|e| frontnet_core::Error::Checkpoint(format!("{e:#}")))
    })?;
    checkpoint::save(&run_dir.join("best.ckpt"), cfg, &outcome.best)?;
    report::write_steps_csv(&run_dir.join("steps.csv"), &outcome.steps)?;
    report::write_epochs_csv(&run_dir.join("epochs.csv"), &outcome.epochs)?;
    let seconds = start.elapsed().as_secs_f64();
    let names = |idx: &[usize]| idx.iter().map(|&i| scenes[i].0.clone()).collect::<Vec<_>>().join(",");
    let record = format!(
        "{}best_epoch = {}\nbest_checkpoint = best.ckpt\nwall_clock_s = {:.1}\ntrain_scenes = {}\nval_scenes = {}\n",
        cfg.to_text(),
        outcome.best_epoch,
        seconds,
        names(&outcome.train_scenes),
        names(&outcome.val_scenes)
    );
    fs::write(run_dir.join("run.txt"), record)?;
    Ok(TrainRun {
        dir: run_dir.to_path_buf(),
        outcome,
        seconds,
    })
}

/// Evaluates a checkpoint on scenes and writes `metrics.csv` and `report.txt`.
pub fn evaluate_into(out: &Path, ckpt: &Path, scenes: &[(String, Scene)]) -> Result<(Vec<ImageResult>, MetricsReport)> {
    let (cfg, model, store) = checkpoint::load(ckpt)?;
    let named: Vec<(String, &Scene)> = scenes.iter().map(|(n, s)| (n.clone(), s)).collect();
    let (results, report) = evaluate(&model, &store, &named, cfg.train.batch_size)?;
    ensure_dir(out)?;
    report::write_metrics_csv(&out.join("metrics.csv"), &results, &report)?;
    fs::write(out.join("report.txt"), report::text_report(&report))?;
    Ok((results, report))
}

/// Writes the stitched zones, front CSV and overlay of one scene.
pub fn predict_into(out: &Path, ckpt: &Path, name: &str, scene: &Scene) -> Result<()> {
    let (cfg, model, store) = checkpoint::load(ckpt)?;
    let pred = predict_scene(&model, &store, scene, cfg.train.batch_size)?;
    ensure_dir(out)?;
    write_gray_png(&out.join(format!("{name}_pred_zones.png")), &pred.zones)?;
    write_front_csv(&out.join(format!("{name}_front.csv")), &pred.front)?;
    let gt = frontnet_core::eval::extract_front(
        &frontnet_core::eval::enhance_ocean(&scene.zones),
        scene.meters_per_pixel,
    );
    plot::front_overlay(&out.join(format!("{name}_overlay.png")), &scene.image, &gt, &pred.front)?;
    Ok(())
}

/// Runs the grid and writes `ablation.txt`, `ablation.csv` and one config
/// snapshot per arm.
pub fn ablate_into(
    out: &Path,
    base: &RunConfig,
    hooks: &[Option<HookType>],
    sups: &[Supervision],
    seeds: &[u64],
    train_scenes: &[(String, Scene)],
    test_scenes: &[(String, Scene)],
) -> Result<Vec<AblationArm>> {
    ensure_dir(out)?;
    let plain: Vec<Scene> = train_scenes.iter().map(|(_, s)| s.clone()).collect();
    let named: Vec<(String, &Scene)> = test_scenes.iter().map(|(n, s)| (n.clone(), s)).collect();
    let arms = ablate(&base.train, hooks, sups, seeds, &plain, &named, |arm, seed| {
        info!("ablation arm {arm} seed {seed}")
    })?;
    for a in &arms {
        let mut c = base.clone();
        c.train = a.config.clone();
        fs::write(out.join(format!("arm_{}.txt", a.label().replace('+', "_"))), c.to_text())?;
    }
    fs::write(out.join("ablation.txt"), report::ablation_table(&arms))?;
    report::write_ablation_csv(&out.join("ablation.csv"), &arms)?;
    Ok(arms)
}

/// Parses an `epochs.csv` written by [`train_into`].
pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> { Ok(rec.get(i).context("short row")?.parse()?) };
        out.push(EpochLog {
            epoch: f(0)? as usize,
            lr: f(1)?,
            l_t: f(2)?,
            l_c: f(3)?,
            aux: f(4)?,
            total: f(5)?,
            val_macro_iou: f(6)?,
            degenerate_steps: f(7)? as usize,
        });
    }
    Ok(out)
}

/// Rebuilds arms (runs carry only the reported metrics) from `ablation.csv`.
pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationArm>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut arms: Vec<AblationArm> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let hook = HookType::parse(&rec[0]);
        let sup = Supervision::parse(&rec[1]).context("supervision column")?;
        let opt = |s: &str| -> Result<Option<f64>> { Ok(if s.is_empty() { None } else { Some(s.parse()?) }) };
        let mut summary = frontnet_core::eval::Summary::default();
        summary.seg.macro_avg.iou = rec[3].parse()?;
        summary.mde_m = opt(&rec[4])?;
        summary.hd95_m = opt(&rec[5])?;
        summary.no_front = rec[6].parse()?;
        let seed: u64 = rec[2].parse()?;
        match arms.iter_mut().find(|a| a.hook == hook && a.supervision == sup) {
            Some(a) => {
                a.seeds.push(seed);
                a.runs.push(summary);
            }
            None => {
                let mut config = frontnet_core::train::TrainConfig::tiny();
                config.model.hook = hook;
                config.model.supervision = sup;
                arms.push(AblationArm {
                    hook,
                    supervision: sup,
                    config,
                    seeds: vec![seed],
                    runs: vec![summary],
                });
            }
        }
    }
    Ok(arms)
}

/// Figures for a run directory; returns the files written.
pub fn plot_run(run: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let epochs = run.join("epochs.csv");
    if epochs.is_file() {
        let p = run.join("loss_curves.png");
        plot::loss_curves(&p, &read_epochs_csv(&epochs)?)?;
        written.push(p);
    }
    let abl = run.join("ablation.csv");
    if abl.is_file() {
        let p = run.join("ablation_bars.png");
        plot::ablation_bars(&p, &read_ablation_csv(&abl)?)?;
        written.push(p);
    }
    Ok(written)
}

//! Command-line pipeline: `gen-data`, `train`, `score`, `detect`, `eval`.
//!
//! Configuration is a flat `key = value` file (`#` starts a comment)
//! layered as defaults, then `--config PATH`, then `FALLSCOPE_OUT` for the
//! output directory, then `--key value` flags. Keys accept `-` or `_`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::anomaly::{self, FeatureMode, PatchFeatures, TrainErrorStats, TrainStatsAccumulator};
use crate::error::{Error, Result};
use crate::iforest::{self, IsolationForest};
use crate::imagegrid::{self, CropRect, GrayImage, Patch, PatchGridSpec, RoadMask};
use crate::metrics;
use crate::persist::{self, ModelMeta};
use crate::synthgen::{self, DatasetConfig, ObjectMix, SceneConfig};
use crate::vae::{self, TrainConfig, VaeArch, VaeParams};

pub const OUT_ENV: &str = "FALLSCOPE_OUT";

const RECONSTRUCT_BATCH: usize = 256;

pub const USAGE: &str = "\
usage: fallscope <command> [--config PATH] [--seed N] [--jobs N] [--key value]...

commands:
  gen-data   write synthetic train/test frames, masks, labels.csv, manifest.txt
  train      fit the VAE on training frames; writes the model and loss_trace.csv
  score      per-patch features, forest fit, test scores (scores.csv)
  detect     apply the fraction threshold to scores.csv (detections.csv)
  eval       confusion table, histogram.csv and mask quality

exit codes: 0 success, 2 configuration or input error, 3 numeric failure
";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// `None` keeps the whole frame.
    pub crop: Option<CropRect>,
    pub grid: PatchGridSpec,
    pub road_mask: RoadMask,
    pub train: TrainConfig,
    pub psi: usize,
    pub trees: usize,
    pub fraction: f64,
    pub feature_mode: FeatureMode,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/model.fsva`.
    pub model_file: Option<PathBuf>,
    /// Defaults to `<out_dir>/forest.fsif`.
    pub forest_file: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub contamination: f64,
    pub object_kind: ObjectMix,
    pub scene: SceneConfig,
    pub min_overlap: usize,
    pub histogram_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crop: None,
            grid: PatchGridSpec::default(),
            road_mask: RoadMask::default_road(),
            train: TrainConfig::default(),
            psi: iforest::DEFAULT_PSI,
            trees: iforest::DEFAULT_TREES,
            fraction: 0.04,
            feature_mode: FeatureMode::Summary,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            model_file: None,
            forest_file: None,
            seed: 0,
            jobs: 1,
            n_train: 500,
            n_test: 44,
            contamination: 0.04,
            object_kind: ObjectMix::Debris,
            scene: SceneConfig::default(),
            min_overlap: synthgen::DEFAULT_MIN_OVERLAP,
            histogram_bins: 50,
        }
    }
}

fn config_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {what}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(key, value, "not a valid number"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl PipelineConfig {
    pub fn model_path(&self) -> PathBuf {
        self.model_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.fsva"))
    }

    pub fn forest_path(&self) -> PathBuf {
        self.forest_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join("forest.fsif"))
    }

    /// Applies one `key = value` setting. Grid-dependent keys are checked in
    /// [`PipelineConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "seed" => self.seed = parse_num(k, value)?,
            "jobs" => self.jobs = parse_num(k, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "model_file" => self.model_file = Some(PathBuf::from(value)),
            "forest_file" => self.forest_file = Some(PathBuf::from(value)),
            "crop" => {
                self.crop = if value == "full" {
                    None
                } else {
                    match parse_list(k, value)?.as_slice() {
                        &[x, y, w, h] => Some(CropRect { x, y, w, h }),
                        _ => return Err(config_err(k, value, "expected `full` or x,y,w,h")),
                    }
                }
            }
            "patch_size" => self.grid.patch_size = parse_num(k, value)?,
            "grid_rows" => self.grid.rows = parse_num(k, value)?,
            "grid_cols" => self.grid.cols = parse_num(k, value)?,
            "road_mask" => {
                self.road_mask = match value {
                    "all" => RoadMask::all(&self.grid),
                    "default" => RoadMask::default_road(),
                    _ => RoadMask::new(parse_list(k, value)?, &self.grid)?,
                }
            }
            "epochs" => self.train.epochs = parse_num(k, value)?,
            "batch_size" => self.train.batch_size = parse_num(k, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(k, value)?,
            "kl_weight" => self.train.kl_weight = parse_num(k, value)?,
            "latent_dim" => self.train.arch.latent = parse_num(k, value)?,
            "hidden" => self.train.arch.hidden = parse_list(k, value)?,
            "psi" => self.psi = parse_num(k, value)?,
            "trees" => self.trees = parse_num(k, value)?,
            "fraction" => self.fraction = parse_num(k, value)?,
            "feature_mode" => self.feature_mode = FeatureMode::parse(value)?,
            "n_train" => self.n_train = parse_num(k, value)?,
            "n_test" => self.n_test = parse_num(k, value)?,
            "contamination" => self.contamination = parse_num(k, value)?,
            "object_kind" => self.object_kind = ObjectMix::parse(value)?,
            "base_gray" => self.scene.base_gray = parse_num(k, value)?,
            "noise_amplitude" => self.scene.noise_amplitude = parse_num(k, value)?,
            "noise_scale" => self.scene.noise_scale = parse_num(k, value)?,
            "vertical_gradient" => self.scene.vertical_gradient = parse_num(k, value)?,
            "min_overlap" => self.min_overlap = parse_num(k, value)?,
            "histogram_bins" => self.histogram_bins = parse_num(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every line of a `key = value` file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.patch_size == 0 || g.rows == 0 || g.cols == 0 {
            return Err(Error::Config(
                "patch_size, grid_rows and grid_cols must be positive".into(),
            ));
        }
        if let Some(&bad) = self.road_mask.selected().iter().find(|&&c| c >= g.cells()) {
            return Err(Error::Config(format!(
                "road_mask cell {bad} outside the {}x{} grid",
                g.rows, g.cols
            )));
        }
        if self.road_mask.is_empty() {
            return Err(Error::Config("road_mask selects no cells".into()));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config(format!(
                "fraction must lie in (0, 1), got {}",
                self.fraction
            )));
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(Error::Config(format!(
                "contamination must lie in [0, 1), got {}",
                self.contamination
            )));
        }
        if self.psi < 2 || self.trees == 0 {
            return Err(Error::Config("psi must be at least 2 and trees positive".into()));
        }
        if self.jobs == 0 || self.histogram_bins == 0 {
            return Err(Error::Config("jobs and histogram_bins must be positive".into()));
        }
        if let Some(c) = self.crop {
            if c.w == 0 || c.h == 0 {
                return Err(Error::Config("crop must have positive size".into()));
            }
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Training settings with the network input tied to the patch size.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            arch: VaeArch {
                input: self.grid.patch_len(),
                ..self.train.arch.clone()
            },
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            scene: SceneConfig {
                width: self.grid.width(),
                height: self.grid.height(),
                ..self.scene.clone()
            },
            grid: self.grid,
            road: self.road_mask.clone(),
            objects: self.object_kind,
            min_overlap: self.min_overlap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Score,
    Detect,
    Eval,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gen-data" => Command::GenData,
            "train" => Command::Train,
            "score" => Command::Score,
            "detect" => Command::Detect,
            "eval" => Command::Eval,
            other => return Err(Error::Config(format!("unknown command `{other}`\n\n{USAGE}"))),
        })
    }
}

/// Parses `args` (without the program name) into a command and config.
/// `env_out` is the value of `FALLSCOPE_OUT`, if set.
pub fn parse_args(args: &[String], env_out: Option<&str>) -> Result<(Command, PipelineConfig)> {
    let (cmd, rest) = args
        .split_first()
        .ok_or_else(|| Error::Config(format!("missing command\n\n{USAGE}")))?;
    let cmd = Command::parse(cmd)?;
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut it = rest.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument `{a}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        flags.push((key, value));
    }

    let mut cfg = PipelineConfig::default();
    for (_, v) in flags.iter().filter(|(k, _)| k == "config") {
        let text = fs::read_to_string(v).map_err(|e| Error::io(format!("reading config {v}"), e))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{v}: {e}")))?;
    }
    if let Some(out) = env_out.filter(|s| !s.is_empty()) {
        cfg.out_dir = PathBuf::from(out);
    }
    for (k, v) in flags.iter().filter(|(k, _)| k != "config") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok((cmd, cfg))
}

/// Parses arguments and runs the command on a pool of `jobs` threads.
pub fn run(args: &[String]) -> Result<()> {
    let env_out = std::env::var(OUT_ENV).ok();
    let (cmd, cfg) = parse_args(args, env_out.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let summary = match cmd {
            Command::GenData => cmd_gen_data(&cfg)?.summary(),
            Command::Train => cmd_train(&cfg, |e| {
                eprintln!(
                    "epoch {} recon {:.4} kl {:.4} total {:.4}",
                    e.epoch, e.recon, e.kl, e.total
                )
            })?
            .summary(),
            Command::Score => cmd_score(&cfg)?.summary(),
            Command::Detect => cmd_detect(&cfg)?.summary(),
            Command::Eval => cmd_eval(&cfg)?.summary(),
        };
        print!("{summary}");
        Ok(())
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn frame_name(id: u64) -> String {
    format!("{id:06}.pgm")
}

fn mask_name(id: u64) -> String {
    format!("{id:06}_mask.pgm")
}

/// Numbered frames (`<digits>.pgm`) in `dir`, sorted by id.
pub fn list_frames(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.ends_with("_mask") {
            continue;
        }
        let id = stem
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("frame file {} is not named <number>.pgm", path.display())))?;
        frames.push((id, path));
    }
    frames.sort();
    Ok(frames)
}

fn load_frame(path: &Path) -> Result<GrayImage> {
    imagegrid::read_pgm(&read_file(path)?)
}

fn crop_rect(cfg: &PipelineConfig, frame: &GrayImage) -> CropRect {
    cfg.crop.unwrap_or_else(|| CropRect::full(frame))
}

fn frame_patches(cfg: &PipelineConfig, id: u64, path: &Path) -> Result<Vec<Patch>> {
    let frame = load_frame(path)?;
    imagegrid::road_patches(&frame, crop_rect(cfg, &frame), &cfg.grid, &cfg.road_mask, id)
}

pub struct GenDataReport {
    pub train_frames: usize,
    pub train_patches: usize,
    pub test_frames: usize,
    pub test_patches: usize,
    pub positive_patches: usize,
    pub injection_probability: f64,
}

impl GenDataReport {
    pub fn summary(&self) -> String {
        format!(
            "gen-data: {} train frames ({} patches), {} test frames ({} patches, {} anomalous)\n",
            self.train_frames, self.train_patches, self.test_frames, self.test_patches, self.positive_patches
        )
    }
}

fn clear_frames(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for (id, path) in list_frames(dir)? {
        fs::remove_file(&path).map_err(|e| Error::io(format!("removing {}", path.display()), e))?;
        let mask = dir.join(mask_name(id));
        if mask.exists() {
            fs::remove_file(&mask).map_err(|e| Error::io(format!("removing {}", mask.display()), e))?;
        }
    }
    Ok(())
}

/// Writes `train/`, `test/` (frames and `_mask` images), `labels.csv`
/// (`frame_id,grid_index,label,kind`) and `manifest.txt` under `data_dir`.
pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<GenDataReport> {
    cfg.validate()?;
    let data = synthgen::gen_dataset(
        cfg.n_train,
        cfg.n_test,
        cfg.contamination,
        &cfg.dataset_config(),
        cfg.seed,
    )?;
    let (train_dir, test_dir) = (cfg.data_dir.join("train"), cfg.data_dir.join("test"));
    clear_frames(&train_dir)?;
    clear_frames(&test_dir)?;
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(format!("creating {}", train_dir.display()), e))?;
    fs::create_dir_all(&test_dir).map_err(|e| Error::io(format!("creating {}", test_dir.display()), e))?;

    for (i, frame) in data.train.iter().enumerate() {
        write_file(
            &train_dir.join(frame_name(i as u64)),
            &imagegrid::write_pgm(frame),
        )?;
    }
    let mut labels = String::from("frame_id,grid_index,label,kind\n");
    let mut positives = 0;
    for (i, f) in data.test.iter().enumerate() {
        let id = i as u64;
        write_file(&test_dir.join(frame_name(id)), &imagegrid::write_pgm(&f.image))?;
        let mask = metrics::mask_image(&f.object_mask, f.image.width(), f.image.height())?;
        write_file(&test_dir.join(mask_name(id)), &imagegrid::write_pgm(&mask))?;
        let kind = f.kind.map_or("none", |k| k.name());
        for &cell in cfg.road_mask.selected() {
            let label = f.patch_labels[cell];
            positives += label as usize;
            let _ = writeln!(labels, "{id},{cell},{},{kind}", label as u8);
        }
    }
    write_file(&cfg.data_dir.join("labels.csv"), labels.as_bytes())?;

    let cells = cfg.road_mask.len();
    let report = GenDataReport {
        train_frames: data.train.len(),
        train_patches: data.train.len() * cells,
        test_frames: data.test.len(),
        test_patches: data.test.len() * cells,
        positive_patches: positives,
        injection_probability: data.injection_probability,
    };
    let manifest = format!(
        "seed={}\nobject_kind={}\ncontamination={}\ninjection_probability={}\nroad_cells={}\n\
         train_frames={}\ntrain_patches={}\ntest_frames={}\ntest_patches={}\npositive_patches={}\n",
        cfg.seed,
        cfg.object_kind.name(),
        cfg.contamination,
        report.injection_probability,
        cells,
        report.train_frames,
        report.train_patches,
        report.test_frames,
        report.test_patches,
        report.positive_patches,
    );
    write_file(&cfg.data_dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(report)
}

pub struct TrainReport {
    pub patches: usize,
    pub trace: Vec<vae::EpochLoss>,
    pub model_path: PathBuf,
}

impl TrainReport {
    pub fn summary(&self) -> String {
        let first = self.trace.first().map_or(f64::NAN, |e| e.total);
        let last = self.trace.last().map_or(f64::NAN, |e| e.total);
        format!(
            "train: {} patches, {} epochs, loss {first:.4} -> {last:.4}, model {}\n",
            self.patches,
            self.trace.len(),
            self.model_path.display()
        )
    }
}

fn load_patches(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<Patch>> {
    let frames = list_frames(dir)?;
    if frames.is_empty() {
        return Err(Error::Config(format!("no frames in {}", dir.display())));
    }
    let per_frame: Vec<Vec<Patch>> = frames
        .par_iter()
        .map(|(id, path)| frame_patches(cfg, *id, path))
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Trains on `data_dir/train`, writing the model and `loss_trace.csv`.
pub fn cmd_train(cfg: &PipelineConfig, on_epoch: impl FnMut(&vae::EpochLoss)) -> Result<TrainReport> {
    cfg.validate()?;
    let patches = load_patches(cfg, &cfg.data_dir.join("train"))?;
    let refs: Vec<&[f32]> = patches.iter().map(|p| p.data.as_slice()).collect();
    let tc = cfg.train_config();
    let outcome = vae::train_with(&refs, &tc, on_epoch)?;
    let meta = ModelMeta {
        train_seed: tc.seed,
        epochs: tc.epochs as u64,
    };
    let model_path = cfg.model_path();
    write_file(&model_path, &persist::save_model(&outcome.params, &meta))?;
    write_file(
        &cfg.out_dir.join("loss_trace.csv"),
        vae::trace_csv(&outcome.trace).as_bytes(),
    )?;
    Ok(TrainReport {
        patches: patches.len(),
        trace: outcome.trace,
        model_path,
    })
}

pub fn load_model(cfg: &PipelineConfig) -> Result<VaeParams> {
    let path = cfg.model_path();
    let (params, _) = persist::load_model(&read_file(&path)?)?;
    if params.input_dim() != cfg.grid.patch_len() {
        return Err(Error::Config(format!(
            "model {} expects {}-value patches, grid patches have {}",
            path.display(),
            params.input_dim(),
            cfg.grid.patch_len()
        )));
    }
    Ok(params)
}

/// Reconstruction error maps for `patches`, in order.
pub fn error_maps(model: &VaeParams, patches: &[Patch]) -> Result<Vec<anomaly::ErrorMap>> {
    let d = model.input_dim();
    let mut maps = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(RECONSTRUCT_BATCH) {
        let xs: Vec<f32> = chunk.iter().flat_map(|p| p.data.iter().copied()).collect();
        let xhat = model.reconstruct_batch(&xs, chunk.len())?;
        for (i, p) in chunk.iter().enumerate() {
            maps.push(anomaly::error_map(&p.data, &xhat[i * d..(i + 1) * d])?);
        }
    }
    Ok(maps)
}

/// `(frame_id, grid_index, features)` per patch, frame-ordered.
type FeatureRows = Vec<(u64, usize, PatchFeatures)>;

fn featurize(
    cfg: &PipelineConfig,
    model: &VaeParams,
    dir: &Path,
) -> Result<(FeatureRows, TrainStatsAccumulator)> {
    let frames = list_frames(dir)?;
    if frames.is_empty() {
        return Err(Error::Config(format!("no frames in {}", dir.display())));
    }
    let per_frame: Vec<(FeatureRows, TrainStatsAccumulator)> = frames
        .par_iter()
        .map(|(id, path)| {
            let patches = frame_patches(cfg, *id, path)?;
            let maps = error_maps(model, &patches)?;
            let mut acc = TrainStatsAccumulator::default();
            let rows = patches
                .iter()
                .zip(&maps)
                .map(|(p, m)| {
                    acc.push(m);
                    (p.source_frame, p.grid_index, anomaly::patch_features(m))
                })
                .collect();
            Ok((rows, acc))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut acc = TrainStatsAccumulator::default();
    for (r, a) in per_frame {
        rows.extend(r);
        acc.merge(&a);
    }
    Ok((rows, acc))
}

fn stats_text(s: &TrainErrorStats) -> String {
    format!("mu_train={}\nsigma_train={}\n", s.mu_train, s.sigma_train)
}

pub fn read_train_stats(path: &Path) -> Result<TrainErrorStats> {
    let mut mu = None;
    let mut sigma = None;
    for line in read_text(path)?.lines() {
        match line.split_once('=') {
            Some(("mu_train", v)) => mu = v.trim().parse().ok(),
            Some(("sigma_train", v)) => sigma = v.trim().parse().ok(),
            _ => {}
        }
    }
    match (mu, sigma) {
        (Some(mu_train), Some(sigma_train)) => Ok(TrainErrorStats {
            mu_train,
            sigma_train,
        }),
        _ => Err(Error::Config(format!(
            "{} lacks mu_train/sigma_train",
            path.display()
        ))),
    }
}

/// One scored test patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub frame_id: u64,
    pub grid_index: usize,
    pub score: f64,
    pub flagged: bool,
}

/// Rows `frame_id,grid_index,score,flagged`; scores print in shortest
/// round-trip form.
pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("frame_id,grid_index,score,flagged\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.frame_id, r.grid_index, r.score, r.flagged as u8
        );
    }
    s
}

pub fn parse_scores_csv(text: &str, source: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("frame_id,grid_index,score,flagged") {
        return Err(Error::Config(format!("{source}: unexpected header")));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Config(format!("{source} line {}: malformed row {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ScoreRow {
                frame_id: f[0].parse().map_err(|_| bad())?,
                grid_index: f[1].parse().map_err(|_| bad())?,
                score: f[2].parse().map_err(|_| bad())?,
                flagged: match f[3] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

pub struct ScoreReport {
    pub train_patches: usize,
    pub rows: Vec<ScoreRow>,
    pub stats: TrainErrorStats,
    pub threshold: f64,
}

impl ScoreReport {
    pub fn summary(&self) -> String {
        format!(
            "score: forest fitted on {} train patches, {} test patches scored, {} flagged at threshold {:.6}\n",
            self.train_patches,
            self.rows.len(),
            self.rows.iter().filter(|r| r.flagged).count(),
            self.threshold
        )
    }
}

/// Featurizes train and test frames, fits the forest on train features
/// and scores the test patches.
pub fn cmd_score(cfg: &PipelineConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let (train_rows, acc) = featurize(cfg, &model, &cfg.data_dir.join("train"))?;
    let stats = acc.finish()?;
    let (test_rows, _) = featurize(cfg, &model, &cfg.data_dir.join("test"))?;

    let vectors =
        |rows: &FeatureRows| -> Vec<Vec<f64>> { rows.iter().map(|r| r.2.to_vec(cfg.feature_mode)).collect() };
    let forest = IsolationForest::fit(&vectors(&train_rows), cfg.psi, cfg.trees, cfg.seed)?;
    let scores = forest.score_all(&vectors(&test_rows))?;
    let detection = iforest::threshold_by_fraction(&scores, cfg.fraction)?;
    let rows: Vec<ScoreRow> = test_rows
        .iter()
        .zip(&scores)
        .zip(&detection.flags)
        .map(|(((frame_id, grid_index, _), &score), &flagged)| ScoreRow {
            frame_id: *frame_id,
            grid_index: *grid_index,
            score,
            flagged,
        })
        .collect();

    let out = &cfg.out_dir;
    write_file(
        &out.join("train_features.csv"),
        anomaly::features_csv(&train_rows).as_bytes(),
    )?;
    write_file(
        &out.join("test_features.csv"),
        anomaly::features_csv(&test_rows).as_bytes(),
    )?;
    write_file(&out.join("train_error_stats.txt"), stats_text(&stats).as_bytes())?;
    write_file(&cfg.forest_path(), &persist::save_forest(&forest))?;
    write_file(&out.join("scores.csv"), scores_csv(&rows).as_bytes())?;
    Ok(ScoreReport {
        train_patches: train_rows.len(),
        rows,
        stats,
        threshold: detection.threshold,
    })
}

pub struct DetectReport {
    pub rows: Vec<ScoreRow>,
    pub threshold: f64,
    pub flagged: usize,
}

impl DetectReport {
    pub fn summary(&self) -> String {
        format!(
            "detect: threshold {} flags {} of {} patches\n",
            self.threshold,
            self.flagged,
            self.rows.len()
        )
    }
}

/// Re-thresholds `scores.csv` at `fraction` into `detections.csv`.
pub fn cmd_detect(cfg: &PipelineConfig) -> Result<DetectReport> {
    cfg.validate()?;
    let path = cfg.out_dir.join("scores.csv");
    let mut rows = parse_scores_csv(&read_text(&path)?, &path.display().to_string())?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let detection = iforest::threshold_by_fraction(&scores, cfg.fraction)?;
    for (r, &f) in rows.iter_mut().zip(&detection.flags) {
        r.flagged = f;
    }
    write_file(&cfg.out_dir.join("detections.csv"), scores_csv(&rows).as_bytes())?;
    Ok(DetectReport {
        flagged: detection.flagged(),
        threshold: detection.threshold,
        rows,
    })
}

/// Ground-truth rows of `labels.csv`, keyed by `(frame_id, grid_index)`.
pub fn read_labels(path: &Path) -> Result<BTreeMap<(u64, usize), bool>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("frame_id,grid_index,label,kind") {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let mut out = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let bad = || {
            Error::Config(format!(
                "{} line {}: malformed row {line:?}",
                path.display(),
                n + 2
            ))
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let key = (f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?);
        let label = match f[2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if out.insert(key, label).is_some() {
            return Err(bad());
        }
    }
    Ok(out)
}

/// Mean mask agreement over anomalous patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskQuality {
    pub patches: usize,
    pub mean_dice: f64,
    pub mean_ssim: f64,
}

pub struct EvalReport {
    pub confusion: metrics::ConfusionMatrix,
    pub histogram: metrics::Histogram,
    pub mask_quality: Option<MaskQuality>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = self.confusion.report("VAE-iForest detector");
        match &self.mask_quality {
            Some(q) => {
                let _ = writeln!(
                    s,
                    "Mask quality over {} anomalous patches: Dice {:.4}, SSIM {:.4}",
                    q.patches, q.mean_dice, q.mean_ssim
                );
            }
            None => s.push_str("Mask quality: skipped (no model or train_error_stats.txt)\n"),
        }
        s
    }
}

/// Dice and SSIM between thresholded error maps and ground-truth masks for
/// every anomalous patch.
pub fn mask_quality(
    cfg: &PipelineConfig,
    model: &VaeParams,
    stats: &TrainErrorStats,
    positives: &[(u64, usize)],
) -> Result<Option<MaskQuality>> {
    let test_dir = cfg.data_dir.join("test");
    let mut by_frame: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &(f, c) in positives {
        by_frame.entry(f).or_default().push(c);
    }
    let ps = cfg.grid.patch_size;
    let per_frame: Vec<Vec<(u64, usize, f64, f64)>> = by_frame
        .par_iter()
        .map(|(&id, cells)| {
            let frame = load_frame(&test_dir.join(frame_name(id)))?;
            let truth = load_frame(&test_dir.join(mask_name(id)))?;
            let rect = crop_rect(cfg, &frame);
            let patches = imagegrid::road_patches(&frame, rect, &cfg.grid, &cfg.road_mask, id)?;
            let truth_patches = imagegrid::road_patches(&truth, rect, &cfg.grid, &cfg.road_mask, id)?;
            let chosen: Vec<usize> = patches
                .iter()
                .enumerate()
                .filter(|(_, p)| cells.contains(&p.grid_index))
                .map(|(i, _)| i)
                .collect();
            let picked: Vec<Patch> = chosen.iter().map(|&i| patches[i].clone()).collect();
            let maps = error_maps(model, &picked)?;
            chosen
                .iter()
                .zip(&maps)
                .map(|(&i, map)| {
                    let predicted = anomaly::binary_mask(map, stats);
                    let actual: Vec<bool> = truth_patches[i].data.iter().map(|&v| v >= 0.5).collect();
                    let dice = metrics::dice(&predicted, &actual)?;
                    let ssim = metrics::ssim(
                        &metrics::mask_image(&predicted, ps, ps)?,
                        &metrics::mask_image(&actual, ps, ps)?,
                        metrics::SSIM_WINDOW,
                    )?;
                    Ok((id, patches[i].grid_index, dice, ssim))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(u64, usize, f64, f64)> = per_frame.into_iter().flatten().collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut csv = String::from("frame_id,grid_index,dice,ssim\n");
    for (f, c, d, s) in &rows {
        let _ = writeln!(csv, "{f},{c},{d:.6},{s:.6}");
    }
    write_file(&cfg.out_dir.join("mask_quality.csv"), csv.as_bytes())?;
    let n = rows.len() as f64;
    Ok(Some(MaskQuality {
        patches: rows.len(),
        mean_dice: rows.iter().map(|r| r.2).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.3).sum::<f64>() / n,
    }))
}

/// Confusion table, score histogram and mask quality against `labels.csv`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let det_path = cfg.out_dir.join("detections.csv");
    let rows = parse_scores_csv(&read_text(&det_path)?, &det_path.display().to_string())?;
    let labels = read_labels(&cfg.data_dir.join("labels.csv"))?;
    if rows.len() != labels.len() {
        return Err(Error::Config(format!(
            "detections cover {} patches, labels.csv {}",
            rows.len(),
            labels.len()
        )));
    }
    let mut predicted = Vec::with_capacity(rows.len());
    let mut actual = Vec::with_capacity(rows.len());
    for r in &rows {
        let label = labels.get(&(r.frame_id, r.grid_index)).ok_or_else(|| {
            Error::Config(format!(
                "detection for frame {} cell {} has no label",
                r.frame_id, r.grid_index
            ))
        })?;
        predicted.push(r.flagged);
        actual.push(*label);
    }
    let confusion = metrics::confusion(&predicted, &actual)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let histogram = metrics::histogram(&scores, cfg.histogram_bins)?;
    write_file(&cfg.out_dir.join("confusion.csv"), confusion.csv().as_bytes())?;
    write_file(&cfg.out_dir.join("histogram.csv"), histogram.csv().as_bytes())?;

    let stats_path = cfg.out_dir.join("train_error_stats.txt");
    let mask_quality = if cfg.model_path().exists() && stats_path.exists() {
        let model = load_model(cfg)?;
        let stats = read_train_stats(&stats_path)?;
        let positives: Vec<(u64, usize)> = labels.iter().filter(|(_, &l)| l).map(|(&k, _)| k).collect();
        mask_quality(cfg, &model, &stats, &positives)?
    } else {
        None
    };
    Ok(EvalReport {
        confusion,
        histogram,
        mask_quality,
    })
}

//! Config-driven experiment runner: dataset generation, training runs, the
//! ablation and resampling benchmark matrices, evaluation and reporting.
//!
//! Everything here is a thin, testable layer over the library modules; the
//! binary in `src/bin` only parses arguments and maps errors to exit codes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::LossWeights;
use crate::metrics::{evaluate_with, iou_gap, EvalReport};
use crate::resample::{match_scale, resize_mask_nearest, ScaleFactor};
use crate::sam::pool_and_concat_taps;
use crate::scenegen::{self, generate, LocationProfile, SceneSpec};
use crate::segnet::SegModel;
use crate::trainer::{self, IterationTrace, OptimizerSpec, TrainOptions};
use crate::types::{Dataset, Location, Tile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUN: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failure: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Run(_) => EXIT_RUN,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// Which stock appearance profile a dataset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileName {
    LocA,
    LocB,
    Desk,
    DeskB,
}

impl ProfileName {
    pub fn profile(self) -> LocationProfile {
        match self {
            ProfileName::LocA => LocationProfile::loc_a(),
            ProfileName::LocB => LocationProfile::loc_b(),
            ProfileName::Desk => LocationProfile::desk(),
            ProfileName::DeskB => LocationProfile::desk_b(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCfg {
    pub profile: ProfileName,
    pub gsd_m: f64,
    pub tile_px: usize,
    pub num_tiles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    /// Held-out labeled tiles drawn from the target profile and GSD.
    pub num_tiles: usize,
    pub seed: u64,
    /// Checkpoint for `eval`; defaults to `<out_dir>/train/best_model.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory for `eval`; defaults to `<out_dir>/data/eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    #[serde(default = "TrainCfg::default_seed")]
    pub seed: u64,
    #[serde(default = "TrainCfg::default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "TrainCfg::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainCfg::default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "TrainCfg::default_lambda")]
    pub lambda_f: f64,
    #[serde(default = "TrainCfg::default_lambda")]
    pub lambda_s: f64,
    #[serde(default = "default_true")]
    pub d_feat: bool,
    #[serde(default = "default_true")]
    pub d_scale: bool,
    #[serde(default = "default_true")]
    pub sam: bool,
    #[serde(default)]
    pub mini_model: bool,
    #[serde(default = "TrainCfg::default_gen_lr")]
    pub gen_lr: f64,
    #[serde(default = "TrainCfg::default_disc_lr")]
    pub disc_lr: f64,
    #[serde(default = "TrainCfg::default_momentum")]
    pub momentum: f64,
    #[serde(default = "TrainCfg::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "TrainCfg::default_power")]
    pub power: f64,
}

impl TrainCfg {
    fn default_seed() -> u64 {
        1
    }
    fn default_max_iter() -> usize {
        3000
    }
    fn default_batch_size() -> usize {
        4
    }
    fn default_eval_interval() -> usize {
        100
    }
    fn default_lambda() -> f64 {
        0.005
    }
    fn default_gen_lr() -> f64 {
        2.5e-4
    }
    fn default_disc_lr() -> f64 {
        1e-4
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_weight_decay() -> f64 {
        1e-4
    }
    fn default_power() -> f64 {
        0.9
    }
}

impl Default for TrainCfg {
    fn default() -> Self {
        toml::from_str("").expect("empty train table")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixCfg {
    /// Training seeds shared across all matrix rows.
    #[serde(default = "MatrixCfg::default_seeds")]
    pub seeds: Vec<u64>,
}

impl MatrixCfg {
    fn default_seeds() -> Vec<u64> {
        vec![1, 2, 3]
    }
}

impl Default for MatrixCfg {
    fn default() -> Self {
        MatrixCfg { seeds: Self::default_seeds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub source: SceneCfg,
    pub target: SceneCfg,
    pub eval: EvalCfg,
    #[serde(default)]
    pub train: TrainCfg,
    #[serde(default)]
    pub matrix: MatrixCfg,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, scene) in [("source", &self.source), ("target", &self.target)] {
            self.scene_spec(scene, Location::Source)
                .validate()
                .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        }
        if self.eval.num_tiles == 0 {
            return Err(CliError::Config("eval.num_tiles must be > 0".into()));
        }
        if self.matrix.seeds.is_empty() {
            return Err(CliError::Config("matrix.seeds must be non-empty".into()));
        }
        self.train_options(None).validate().map_err(|e| CliError::Config(e.to_string()))
    }

    fn scene_spec(&self, scene: &SceneCfg, location: Location) -> SceneSpec {
        SceneSpec {
            seed: scene.seed,
            gsd_m: scene.gsd_m,
            tile_px: scene.tile_px,
            num_tiles: scene.num_tiles,
            location,
            profile: scene.profile.profile(),
        }
    }

    pub fn train_options(&self, seed_override: Option<u64>) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            max_iter: t.max_iter,
            batch_size: t.batch_size,
            seed: seed_override.unwrap_or(t.seed),
            weights: LossWeights { lambda_f: t.lambda_f, lambda_s: t.lambda_s },
            enable_d_feat: t.d_feat,
            enable_d_scale: t.d_scale,
            enable_sam: t.sam,
            eval_interval: t.eval_interval,
            num_classes: self.source.profile.profile().classes.len(),
            optim: OptimizerSpec {
                gen_lr: t.gen_lr,
                disc_lr: t.disc_lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                power: t.power,
                ..OptimizerSpec::default()
            },
            check_freeze: false,
            mini_model: t.mini_model,
            halt_iter: None,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join("train")
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() {
        if force {
            if path.is_dir() {
                fs::remove_dir_all(path).map_err(run_err)?;
            } else {
                fs::remove_file(path).map_err(run_err)?;
            }
        } else {
            return Err(CliError::Run(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Records the scale pair and directory layout produced by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    /// Source GSD in meters.
    pub theta_gsd_m: f64,
    /// Target GSD in meters.
    pub sigma_gsd_m: f64,
    pub source: String,
    pub target: String,
    pub eval: String,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<DataManifest, CliError> {
    let dir = cfg.data_dir();
    refuse_overwrite(&dir, force)?;
    fs::create_dir_all(&dir).map_err(run_err)?;

    let src = generate(&cfg.scene_spec(&cfg.source, Location::Source)).map_err(run_err)?;
    let tgt = generate(&cfg.scene_spec(&cfg.target, Location::Target)).map_err(run_err)?;
    let eval_scene = SceneCfg { seed: cfg.eval.seed, num_tiles: cfg.eval.num_tiles, ..cfg.target.clone() };
    let eval = generate(&cfg.scene_spec(&eval_scene, Location::Target)).map_err(run_err)?;

    scenegen::write_dataset(&src, &dir.join("source")).map_err(run_err)?;
    // target labels are written for the oracle rows and never read by
    // adaptation training, which ignores target masks by construction
    scenegen::write_dataset(&tgt, &dir.join("target")).map_err(run_err)?;
    scenegen::write_dataset(&eval, &dir.join("eval")).map_err(run_err)?;

    let manifest = DataManifest {
        theta_gsd_m: cfg.source.gsd_m,
        sigma_gsd_m: cfg.target.gsd_m,
        source: "source".into(),
        target: "target".into(),
        eval: "eval".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(run_err)?;
    Ok(manifest)
}

pub struct LoadedData {
    pub manifest: DataManifest,
    pub source: Dataset,
    pub target: Dataset,
    pub eval: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData, CliError> {
    let dir = cfg.data_dir();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        CliError::Run(format!("{}: {e} (run gen-data first)", manifest_path.display()))
    })?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Run(format!("manifest: {e}")))?;
    Ok(LoadedData {
        source: scenegen::read_dataset(&dir.join(&manifest.source)).map_err(run_err)?,
        target: scenegen::read_dataset(&dir.join(&manifest.target)).map_err(run_err)?,
        eval: scenegen::read_dataset(&dir.join(&manifest.eval)).map_err(run_err)?,
        manifest,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub iters_run: usize,
    pub best_miou: Option<f64>,
    pub final_miou: Option<f64>,
    pub out_dir: PathBuf,
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<TrainOutcome, CliError> {
    let data = load_data(cfg)?;
    let out_dir = out.unwrap_or_else(|| cfg.train_dir());
    if out_dir.join("final_model.bin").exists() {
        refuse_overwrite(&out_dir, force)?;
    }
    let opts = cfg.train_options(seed);
    let summary =
        trainer::run(&opts, &data.source, &data.target, Some(&data.eval), &out_dir).map_err(run_err)?;
    let outcome = TrainOutcome {
        iters_run: summary.iters_run,
        best_miou: summary.best_miou,
        final_miou: summary.final_eval.map(|r| r.miou),
        out_dir: out_dir.clone(),
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&outcome).unwrap())
        .map_err(run_err)?;
    Ok(outcome)
}

/// One configuration of the seven-row ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub d_feat: bool,
    pub d_scale: bool,
    pub sam: bool,
    /// Trains on the labeled target set instead of the source set.
    pub oracle: bool,
}

pub const ABLATION_ROWS: [AblationRow; 7] = [
    AblationRow { name: "source-only", d_feat: false, d_scale: false, sam: false, oracle: false },
    AblationRow { name: "source-only+sam", d_feat: false, d_scale: false, sam: true, oracle: false },
    AblationRow { name: "d_feat", d_feat: true, d_scale: false, sam: false, oracle: false },
    AblationRow { name: "d_feat+d_scale", d_feat: true, d_scale: true, sam: false, oracle: false },
    AblationRow { name: "d_feat+sam", d_feat: true, d_scale: false, sam: true, oracle: false },
    AblationRow { name: "d_feat+d_scale+sam", d_feat: true, d_scale: true, sam: true, oracle: false },
    AblationRow { name: "oracle", d_feat: false, d_scale: false, sam: true, oracle: true },
];

/// How a resampling-benchmark row trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrainProto {
    /// Source supervision only, native scales.
    SourceOnly,
    /// Source supervision only, source tiles resampled to the target GSD.
    SourceTrainResampled,
    /// Location adversary only, GSD metadata ignored (no resampling).
    StdDaScaleBlind,
    /// Location adversary only, target resampled to the source GSD while
    /// training.
    StdDaTrainResampled,
    /// The full scale-aware method.
    Ours,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResampleRow {
    pub name: &'static str,
    pub proto: TrainProto,
    /// Evaluate on the eval set resampled to the source GSD.
    pub eval_resampled: bool,
}

pub const RESAMPLE_ROWS: [ResampleRow; 7] = [
    ResampleRow { name: "no-da", proto: TrainProto::SourceOnly, eval_resampled: false },
    ResampleRow { name: "no-da-test-resampled", proto: TrainProto::SourceOnly, eval_resampled: true },
    ResampleRow {
        name: "no-da-train-resampled",
        proto: TrainProto::SourceTrainResampled,
        eval_resampled: false,
    },
    ResampleRow { name: "std-da", proto: TrainProto::StdDaScaleBlind, eval_resampled: false },
    ResampleRow {
        name: "std-da-test-resampled",
        proto: TrainProto::StdDaScaleBlind,
        eval_resampled: true,
    },
    ResampleRow {
        name: "std-da-train-resampled",
        proto: TrainProto::StdDaTrainResampled,
        eval_resampled: false,
    },
    ResampleRow { name: "ours", proto: TrainProto::Ours, eval_resampled: false },
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    /// Best-checkpoint mIoU per seed, in `seeds` order; NaN-free.
    pub seed_mious: Vec<f64>,
    pub median_miou: Option<f64>,
    /// Oracle median minus this row's median, when an oracle row exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou_gap: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
    /// Margin in mIoU percentage points.
    pub margin_pts: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
    pub verdicts: Vec<Verdict>,
}

impl MatrixResult {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn median(&self, name: &str) -> Option<f64> {
        self.row(name).and_then(|r| r.median_miou)
    }

    /// Markdown table plus the verdict list.
    pub fn render_markdown(&self, title: &str) -> String {
        let mut s = format!("# {title}\n\nseeds: {:?}\n\n", self.seeds);
        s.push_str("| configuration | mIoU per seed (%) | median mIoU (%) | IoU gap (pts) |\n");
        s.push_str("|---|---|---|---|\n");
        for r in &self.rows {
            let per_seed = r
                .seed_mious
                .iter()
                .map(|m| format!("{:.2}", m * 100.0))
                .collect::<Vec<_>>()
                .join(" / ");
            let median = r.median_miou.map_or("-".into(), |m| format!("{:.2}", m * 100.0));
            let gap = r.iou_gap.map_or("-".into(), |g| format!("{:.2}", g * 100.0));
            s.push_str(&format!("| {} | {} | {} | {} |\n", r.name, per_seed, median, gap));
            for e in &r.errors {
                s.push_str(&format!("| {} (error) | {} | - | - |\n", r.name, e));
            }
        }
        s.push_str("\n## Orderings\n\n");
        for v in &self.verdicts {
            s.push_str(&format!(
                "- {}: **{}** (margin {:+.2} pts)\n",
                v.claim,
                if v.holds { "holds" } else { "violated" },
                v.margin_pts
            ));
        }
        s
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn ordering_verdict(result: &MatrixResult, lo: &str, hi: &str, strict: bool) -> Verdict {
    let claim = format!("{lo} {} {hi}", if strict { "<" } else { "<=" });
    match (result.median(lo), result.median(hi)) {
        (Some(a), Some(b)) => Verdict {
            claim,
            holds: if strict { a < b } else { a <= b },
            margin_pts: (b - a) * 100.0,
        },
        _ => Verdict { claim, holds: false, margin_pts: f64::NAN },
    }
}

/// Train one configuration and return its best-checkpoint mIoU.
fn run_one(
    opts: &TrainOptions,
    source: &Dataset,
    target: &Dataset,
    eval: &Dataset,
    out_dir: &Path,
) -> Result<f64, CliError> {
    let summary = trainer::run(opts, source, target, Some(eval), out_dir).map_err(run_err)?;
    summary
        .best_miou
        .ok_or_else(|| CliError::Run(format!("{}: no evaluation recorded", out_dir.display())))
}

/// Resample a labeled eval set so its GSD becomes `theta`.
pub fn resample_eval_set(ds: &Dataset, theta: f64) -> Result<Dataset, CliError> {
    let masks = ds.masks.as_ref().ok_or_else(|| CliError::Run("eval set has no masks".into()))?;
    let mut tiles = Vec::with_capacity(ds.tiles.len());
    let mut new_masks = Vec::with_capacity(masks.len());
    for (tile, mask) in ds.tiles.iter().zip(masks) {
        let factor = ScaleFactor::new(tile.gsd_m / theta).map_err(run_err)?;
        tiles.push(match_scale(tile, theta).map_err(run_err)?);
        new_masks.push(resize_mask_nearest(mask, factor).map_err(run_err)?);
    }
    Ok(Dataset { tiles, masks: Some(new_masks), split: ds.split })
}

/// Relabel a dataset's GSD metadata without touching pixels; this is what a
/// scale-unaware pipeline effectively does.
pub fn ignore_gsd(ds: &Dataset, gsd: f64) -> Dataset {
    let mut out = ds.clone();
    for t in &mut out.tiles {
        t.gsd_m = gsd;
    }
    out
}

/// Resample every tile of a labeled dataset to `gsd`.
pub fn resample_labeled(ds: &Dataset, gsd: f64) -> Result<Dataset, CliError> {
    resample_eval_set(ds, gsd)
}

pub fn run_ablation_matrix(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    out_dir: &Path,
) -> MatrixResult {
    let seeds = cfg.matrix.seeds.clone();
    let mut rows = Vec::new();
    for row in ABLATION_ROWS {
        let mut seed_mious = Vec::new();
        let mut errors = Vec::new();
        for &seed in &seeds {
            let mut opts = cfg.train_options(Some(seed));
            opts.enable_d_feat = row.d_feat;
            opts.enable_d_scale = row.d_scale;
            opts.enable_sam = row.sam;
            let dir = out_dir.join("rows").join(row.name).join(format!("seed-{seed}"));
            // the oracle trains supervised on the labeled target tiles
            let train_source = if row.oracle { &data.target } else { &data.source };
            match run_one(&opts, train_source, &data.target, &data.eval, &dir) {
                Ok(m) => seed_mious.push(m),
                Err(e) => errors.push(e.to_string()),
            }
        }
        rows.push(RowResult {
            name: row.name.to_string(),
            median_miou: median(&seed_mious),
            seed_mious,
            iou_gap: None,
            errors,
        });
    }
    let oracle_median = rows.iter().find(|r| r.name == "oracle").and_then(|r| r.median_miou);
    if let Some(om) = oracle_median {
        for r in &mut rows {
            r.iou_gap = r.median_miou.map(|m| om - m);
        }
    }
    let mut result = MatrixResult { seeds, rows, verdicts: Vec::new() };
    result.verdicts = vec![
        ordering_verdict(&result, "source-only", "d_feat", true),
        ordering_verdict(&result, "d_feat", "d_feat+d_scale", true),
        ordering_verdict(&result, "d_feat+d_scale", "d_feat+d_scale+sam", false),
        ordering_verdict(&result, "d_feat+d_scale+sam", "oracle", true),
        ordering_verdict(&result, "source-only", "source-only+sam", true),
    ];
    result
}

pub fn run_resample_matrix(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    out_dir: &Path,
) -> Result<MatrixResult, CliError> {
    let seeds = cfg.matrix.seeds.clone();
    let theta = data.manifest.theta_gsd_m;
    let sigma = data.manifest.sigma_gsd_m;
    let eval_resampled = resample_eval_set(&data.eval, theta)?;

    let mut rows = Vec::new();
    for row in RESAMPLE_ROWS {
        let mut seed_mious = Vec::new();
        let mut errors = Vec::new();
        for &seed in &seeds {
            let mut opts = cfg.train_options(Some(seed));
            opts.enable_sam = false;
            opts.enable_d_feat = false;
            opts.enable_d_scale = false;
            let (source, target): (Dataset, Dataset) = match row.proto {
                TrainProto::SourceOnly => (data.source.clone(), data.target.clone()),
                TrainProto::SourceTrainResampled => {
                    (resample_labeled(&data.source, sigma)?, data.target.clone())
                }
                TrainProto::StdDaScaleBlind => {
                    opts.enable_d_feat = true;
                    (data.source.clone(), ignore_gsd(&data.target, theta))
                }
                TrainProto::StdDaTrainResampled => {
                    opts.enable_d_feat = true;
                    (data.source.clone(), data.target.clone())
                }
                TrainProto::Ours => {
                    opts.enable_d_feat = true;
                    opts.enable_d_scale = true;
                    opts.enable_sam = true;
                    (data.source.clone(), data.target.clone())
                }
            };
            let eval = if row.eval_resampled { &eval_resampled } else { &data.eval };
            // rows that share a training protocol share checkpoints
            let dir = out_dir.join("rows").join(format!("{:?}", row.proto)).join(format!("seed-{seed}"));
            match run_one(&opts, &source, &target, eval, &dir) {
                Ok(m) => seed_mious.push(m),
                Err(e) => errors.push(e.to_string()),
            }
        }
        rows.push(RowResult {
            name: row.name.to_string(),
            median_miou: median(&seed_mious),
            seed_mious,
            iou_gap: None,
            errors,
        });
    }
    let mut result = MatrixResult { seeds, rows, verdicts: Vec::new() };
    result.verdicts = vec![
        ordering_verdict(&result, "no-da", "ours", true),
        ordering_verdict(&result, "std-da-test-resampled", "ours", true),
    ];
    Ok(result)
}

fn write_matrix(result: &MatrixResult, out_dir: &Path, title: &str) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(run_err)?;
    fs::write(out_dir.join("matrix.json"), serde_json::to_string_pretty(result).unwrap())
        .map_err(run_err)?;
    fs::write(out_dir.join("matrix.md"), result.render_markdown(title)).map_err(run_err)?;
    Ok(())
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    out: Option<PathBuf>,
    force: bool,
) -> Result<MatrixResult, CliError> {
    let data = load_data(cfg)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.join("ablation"));
    refuse_overwrite(&out_dir.join("matrix.json"), force)?;
    let result = run_ablation_matrix(cfg, &data, &out_dir);
    write_matrix(&result, &out_dir, "Ablation")?;
    Ok(result)
}

pub fn cmd_resample_bench(
    cfg: &ExperimentConfig,
    out: Option<PathBuf>,
    force: bool,
) -> Result<MatrixResult, CliError> {
    let data = load_data(cfg)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.join("resample-bench"));
    refuse_overwrite(&out_dir.join("matrix.json"), force)?;
    let result = run_resample_matrix(cfg, &data, &out_dir)?;
    write_matrix(&result, &out_dir, "Resampling benchmark")?;
    Ok(result)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: Option<PathBuf>,
    force: bool,
) -> Result<EvalReport, CliError> {
    let checkpoint = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.train_dir().join("best_model.bin"));
    let dataset_dir = cfg.eval.dataset.clone().unwrap_or_else(|| cfg.data_dir().join("eval"));
    let model: SegModel<f32> = SegModel::load(&checkpoint).map_err(run_err)?;
    let eval_set = scenegen::read_dataset(&dataset_dir).map_err(run_err)?;
    let report = evaluate_with(
        |tile| model.forward(tile).expect("eval tile accepted by model").0,
        &eval_set,
    )
    .map_err(run_err)?;
    let out_path = out.unwrap_or_else(|| cfg.out_dir.join("eval_report.json"));
    refuse_overwrite(&out_path, force)?;
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent).map_err(run_err)?;
    }
    fs::write(&out_path, serde_json::to_string_pretty(&report).unwrap()).map_err(run_err)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportPaths {
    pub report_md: PathBuf,
    pub loss_curves_csv: PathBuf,
    pub attention_json: Option<PathBuf>,
    pub embeddings_csv: PathBuf,
}

pub fn read_trace(path: &Path) -> Result<Vec<IterationTrace>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Run(format!("trace line: {e}"))))
        .collect()
}

pub fn cmd_report(
    cfg: &ExperimentConfig,
    out: Option<PathBuf>,
    force: bool,
) -> Result<ReportPaths, CliError> {
    let train_dir = cfg.train_dir();
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.join("report"));
    refuse_overwrite(&out_dir, force)?;
    fs::create_dir_all(&out_dir).map_err(run_err)?;

    let trace = read_trace(&train_dir.join("trace.jsonl"))?;
    let loss_curves_csv = out_dir.join("loss_curves.csv");
    {
        let mut f = fs::File::create(&loss_curves_csv).map_err(run_err)?;
        writeln!(f, "iter,l_seg,l_adv_feat,l_adv_scale,l_d_feat,l_d_scale,lr_g,lr_d")
            .map_err(run_err)?;
        for t in &trace {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                t.iter, t.l_seg, t.l_adv_feat, t.l_adv_scale, t.l_d_feat, t.l_d_scale, t.lr_g, t.lr_d
            )
            .map_err(run_err)?;
        }
    }

    let model: SegModel<f32> =
        SegModel::load(&train_dir.join("best_model.bin")).map_err(run_err)?;
    let data = load_data(cfg)?;
    let report = evaluate_with(
        |tile| model.forward(tile).expect("eval tile accepted by model").0,
        &data.eval,
    )
    .map_err(run_err)?;

    // embedding dump: every source and eval tile, tagged by domain and scale
    let embeddings_csv = out_dir.join("embeddings.csv");
    {
        let mut f = fs::File::create(&embeddings_csv).map_err(run_err)?;
        writeln!(f, "tile_id,location,gsd_m,embedding").map_err(run_err)?;
        let tag = |t: &Tile| match t.location {
            Location::Source => "source",
            Location::Target => "target",
        };
        for tile in data.source.tiles.iter().chain(&data.eval.tiles) {
            let emb = model.encode_embedding(tile).map_err(run_err)?;
            let joined =
                emb.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";");
            writeln!(f, "{},{},{},{}", tile.id, tag(tile), tile.gsd_m, joined).map_err(run_err)?;
        }
    }

    // attention-mass summary from the first eval tile, when the model has
    // the attention module
    let mut attention_json = None;
    let mut attention_note = String::new();
    if let Some(sam) = &model.sam {
        let tile = &data.eval.tiles[0];
        let (_, taps) = model.forward(tile).map_err(run_err)?;
        let pool_dims = taps
            .maps
            .iter()
            .map(|m| (m.height, m.width))
            .min()
            .expect("model produces taps");
        let pooled = pool_and_concat_taps(&taps, pool_dims);
        let att = sam.attention(&pooled);
        let path = out_dir.join("attention.json");
        att.write_json(&path).map_err(run_err)?;
        let mass = att.channel_mass();
        let mut ranked: Vec<(usize, f32)> = mass.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        attention_note = format!(
            "top attention-mass channels: {}\n",
            ranked
                .iter()
                .take(8)
                .map(|(c, m)| format!("{c} ({m:.3})"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        attention_json = Some(path);
    }

    let report_md = out_dir.join("report.md");
    let mut md = String::from("# Run report\n\n## Evaluation\n\n");
    md.push_str(&format!("- mIoU: {:.2}%\n", report.miou * 100.0));
    for (c, v) in report.per_class_iou.iter().enumerate() {
        match v {
            Some(v) => md.push_str(&format!("- class {c} IoU: {:.2}%\n", v * 100.0)),
            None => md.push_str(&format!("- class {c} IoU: undefined (absent)\n")),
        }
    }
    md.push_str("\n## Losses\n\n");
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        md.push_str(&format!(
            "- iterations traced: {}\n- l_seg: {:.4} -> {:.4}\n- lr_g: {:.6e} -> {:.6e}\n",
            trace.len(),
            first.l_seg,
            last.l_seg,
            first.lr_g,
            last.lr_g
        ));
    }
    md.push_str("- full curves: loss_curves.csv\n");
    if !attention_note.is_empty() {
        md.push_str("\n## Attention\n\n");
        md.push_str(&attention_note);
    }
    md.push_str("\n## Files\n\n- loss_curves.csv\n- embeddings.csv\n");
    if attention_json.is_some() {
        md.push_str("- attention.json\n");
    }
    fs::write(&report_md, md).map_err(run_err)?;

    Ok(ReportPaths { report_md, loss_curves_csv, attention_json, embeddings_csv })
}

// the oracle comparison helper re-exported for matrix consumers
pub fn attach_gap(report: &EvalReport, oracle: &EvalReport) -> Result<EvalReport, CliError> {
    iou_gap(report, oracle).map_err(run_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config(out_dir: &Path) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"
out_dir = "{}"

[source]
profile = "loc-a"
gsd_m = 0.09
tile_px = 64
num_tiles = 3
seed = 11

[target]
profile = "loc-a"
gsd_m = 0.18
tile_px = 32
num_tiles = 3
seed = 22

[eval]
num_tiles = 2
seed = 33

[train]
max_iter = 2
batch_size = 2
eval_interval = 0
mini_model = true

[matrix]
seeds = [1]
"#,
            out_dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn config_round_trip_is_a_fixed_point() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let text = toml::to_string(&cfg).unwrap();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        let text2 = toml::to_string(&again).unwrap();
        assert_eq!(text2, text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempdir().unwrap();
        let mut text = toml::to_string(&tiny_config(dir.path())).unwrap();
        text.push_str("\nunknown_key = 1\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
        let bad_nested = text.replace("[train]", "[train]\nmystery = true");
        assert!(ExperimentConfig::parse(&bad_nested).is_err());
    }

    #[test]
    fn config_errors_exit_2_run_errors_exit_3() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Run("x".into()).exit_code(), 3);
    }

    #[test]
    fn invalid_scene_is_a_config_error() {
        let dir = tempdir().unwrap();
        let text = toml::to_string(&tiny_config(dir.path())).unwrap();
        let bad = text.replace("gsd_m = 0.09", "gsd_m = -1.0");
        assert!(matches!(ExperimentConfig::parse(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn matrices_have_seven_rows() {
        assert_eq!(ABLATION_ROWS.len(), 7);
        assert_eq!(RESAMPLE_ROWS.len(), 7);
        let names: Vec<_> = ABLATION_ROWS.iter().map(|r| r.name).collect();
        assert!(names.contains(&"source-only") && names.contains(&"oracle"));
    }

    #[test]
    fn gen_data_writes_manifest_and_refuses_overwrite() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let manifest = cmd_gen_data(&cfg, false).unwrap();
        assert_eq!(manifest.theta_gsd_m, 0.09);
        assert_eq!(manifest.sigma_gsd_m, 0.18);
        assert!(cfg.data_dir().join("source/meta.json").exists());
        assert!(cfg.data_dir().join("target/mask").exists());
        let err = cmd_gen_data(&cfg, false).unwrap_err();
        assert!(matches!(err, CliError::Run(_)));
        // --force regenerates
        cmd_gen_data(&cfg, true).unwrap();
    }

    #[test]
    fn train_without_data_is_a_run_failure() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let err = cmd_train(&cfg, None, None, false).unwrap_err();
        assert!(err.to_string().contains("gen-data"), "{err}");
    }

    #[test]
    fn ignore_gsd_relabels_without_resampling() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let ds = generate(&cfg.scene_spec(&cfg.target, Location::Target)).unwrap();
        let blind = ignore_gsd(&ds, 0.09);
        assert_eq!(blind.gsd_m(), Some(0.09));
        assert_eq!(blind.tiles[0].pixels, ds.tiles[0].pixels);
    }

    #[test]
    fn resampled_eval_set_has_matching_mask_dims() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let ds = generate(&cfg.scene_spec(&cfg.target, Location::Target)).unwrap();
        let out = resample_eval_set(&ds, 0.09).unwrap();
        for (t, m) in out.tiles.iter().zip(out.masks.as_ref().unwrap()) {
            assert_eq!((t.height(), t.width()), (m.height, m.width));
            assert_eq!(t.gsd_m, 0.09);
            assert_eq!(t.height(), 64); // 32 px at 0.18 doubles
        }
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 2.0]), Some(1.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn train_and_report_end_to_end() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_gen_data(&cfg, false).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.train.eval_interval = 1;
        let outcome = cmd_train(&cfg2, None, None, false).unwrap();
        assert_eq!(outcome.iters_run, 2);
        assert!(outcome.best_miou.is_some());
        // refuses a second run without --force
        assert!(cmd_train(&cfg2, None, None, false).is_err());

        let report = cmd_eval(&cfg2, None, false).unwrap();
        assert!(report.miou.is_finite());

        let paths = cmd_report(&cfg2, None, false).unwrap();
        assert!(paths.report_md.exists());
        let trace = read_trace(&cfg2.train_dir().join("trace.jsonl")).unwrap();
        let csv = fs::read_to_string(&paths.loss_curves_csv).unwrap();
        assert_eq!(csv.lines().count(), trace.len() + 1);
        // the curve file reproduces the trace values
        let second = csv.lines().nth(1).unwrap();
        assert!(second.starts_with(&format!("0,{}", trace[0].l_seg)));
        let emb = fs::read_to_string(&paths.embeddings_csv).unwrap();
        assert_eq!(emb.lines().count(), 1 + 3 + 2); // header + source + eval tiles
    }

    #[test]
    fn train_seed_override_changes_the_run() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        cmd_gen_data(&cfg, false).unwrap();
        let a = cmd_train(&cfg, None, Some(dir.path().join("a")), false).unwrap();
        let b = cmd_train(&cfg, None, Some(dir.path().join("b")), false).unwrap();
        let c = cmd_train(&cfg, Some(99), Some(dir.path().join("c")), false).unwrap();
        assert_eq!(a.final_miou, b.final_miou); // same seed reproduces
        // seed override takes effect (models differ; scores usually do too,
        // but at 2 iterations we only check the runs completed)
        assert!(c.final_miou.is_some());
    }
}

//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{read_bundle, write_bundle, SceneBundle};
use crate::eval::{parse_thresholds, pose_error, summarize};
use crate::geometry::RigidPose;
use crate::pipeline::{localize, Localization, PipelineError, RunConfig, ScaleMode};
use crate::scale::ScaleStage;
use crate::sim::{simulate, CorruptionSpec, OracleRecord, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

pub const RESULT_FILE: &str = "result.json";
pub const ORACLE_FILE: &str = "oracle.json";

#[derive(Debug, Parser)]
#[command(name = "refloc", version, about = "Metric visual localization against posed reference views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene bundle and its oracle.
    Simulate(SimulateArgs),
    /// Localize the query of a bundle.
    Localize(LocalizeArgs),
    /// Score localization results against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene spec JSON; defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Corruption spec JSON; no corruption when omitted.
    #[arg(long)]
    pub corruption: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ScaleModeArg {
    Auto,
    TriOnly,
    TrajOnly,
}

impl From<ScaleModeArg> for ScaleMode {
    fn from(m: ScaleModeArg) -> Self {
        match m {
            ScaleModeArg::Auto => ScaleMode::Auto,
            ScaleModeArg::TriOnly => ScaleMode::TriOnly,
            ScaleModeArg::TrajOnly => ScaleMode::TrajOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Meters.
    #[arg(long, default_value_t = 0.3)]
    pub min_baseline: f64,
    #[arg(long, default_value_t = 0.05)]
    pub stage1_threshold: f64,
    #[arg(long, default_value_t = 500)]
    pub ransac_iters: usize,
    /// Meters.
    #[arg(long, default_value_t = 0.10)]
    pub inlier_radius: f64,
    /// Pixels.
    #[arg(long, default_value_t = 20.0)]
    pub search_radius: f64,
    #[arg(long, value_enum, default_value_t = ScaleModeArg::Auto)]
    pub scale_mode: ScaleModeArg,
    #[arg(long, default_value_t = 5.0)]
    pub pnp_inlier_px: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A result file or a directory searched recursively for result files.
    #[arg(long)]
    pub results: PathBuf,
    /// An oracle file or a directory searched recursively for oracle files.
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma separated `<cm>/<deg>` pairs.
    #[arg(long, default_value = "5/5,1/1")]
    pub thresholds: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

fn input<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(input(&path.display().to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(input(&parent.display().to_string()))?;
    }
    fs::write(path, text).map_err(input(&path.display().to_string()))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut spec: SceneSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    let corruption: CorruptionSpec = match &args.corruption {
        Some(p) => read_json(p)?,
        None => CorruptionSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.rng_seed = seed;
    }
    let (bundle, oracle) = simulate(&spec, &corruption).map_err(input("simulation"))?;
    fs::create_dir_all(&args.out).map_err(input(&args.out.display().to_string()))?;
    write_bundle(&bundle, &args.out).map_err(input("writing bundle"))?;
    oracle
        .write(&args.out.join(ORACLE_FILE))
        .map_err(input("writing oracle"))
}

/// What `localize` writes per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    /// Camera-to-world `[R | c]`, row-major.
    pub pose: [f64; 12],
    pub coarse_pose: [f64; 12],
    pub pre_ba_pose: Option<[f64; 12]>,
    pub scale_stage: ScaleStage,
    pub scale: f64,
    pub d_tri: Option<f64>,
    pub d_traj: Option<f64>,
    pub stage2_inliers: Option<usize>,
    pub references: Vec<usize>,
    pub confidence_anchor: usize,
    pub refinement_anchor: usize,
    pub num_tracks: usize,
    pub tracks_dropped: usize,
    pub tracks_converged: usize,
    pub num_correspondences: usize,
    pub init_inliers: usize,
    pub refined_inliers: Option<usize>,
    pub final_inliers: usize,
    pub fallback: bool,
}

impl ResultRecord {
    pub fn from_localization(bundle: &SceneBundle, loc: &Localization) -> Self {
        Self {
            query_id: bundle.query().image_id.clone(),
            pose: loc.pose.to_row_major(),
            coarse_pose: loc.coarse_pose.to_row_major(),
            pre_ba_pose: loc.pre_ba_pose.map(|p| p.to_row_major()),
            scale_stage: loc.scale.stage_used,
            scale: loc.scale.scale,
            d_tri: loc.scale.d_tri,
            d_traj: loc.scale.d_traj,
            stage2_inliers: loc.scale.stage2_inliers,
            references: loc.references.clone(),
            confidence_anchor: loc.confidence_anchor,
            refinement_anchor: loc.refinement_anchor,
            num_tracks: loc.tracks.len(),
            tracks_dropped: loc.tracks_dropped,
            tracks_converged: loc.tracks.iter().filter(|t| t.is_usable()).count(),
            num_correspondences: loc.correspondences.len(),
            init_inliers: loc.init_inliers,
            refined_inliers: loc.refined_inliers,
            final_inliers: loc.final_result.inlier_count(),
            fallback: loc.fallback,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Input(format!("--{name} must be positive")))
    }
}

impl LocalizeArgs {
    pub fn config(&self) -> Result<RunConfig, CliError> {
        positive("stage1-threshold", self.stage1_threshold)?;
        positive("inlier-radius", self.inlier_radius)?;
        positive("search-radius", self.search_radius)?;
        positive("pnp-inlier-px", self.pnp_inlier_px)?;
        if !(self.min_baseline >= 0.0) || !self.min_baseline.is_finite() {
            return Err(CliError::Input("--min-baseline must be nonnegative".into()));
        }
        if self.k_max == 0 || self.ransac_iters == 0 {
            return Err(CliError::Input("--k-max and --ransac-iters must be positive".into()));
        }
        Ok(RunConfig {
            k_max: self.k_max,
            min_baseline: self.min_baseline,
            stage1_threshold: self.stage1_threshold,
            ransac_iterations: self.ransac_iters,
            inlier_radius: self.inlier_radius,
            search_radius: self.search_radius,
            scale_mode: self.scale_mode.into(),
            pnp_inlier_px: self.pnp_inlier_px,
            seed: self.seed,
            ..RunConfig::default()
        })
    }
}

pub fn cmd_localize(args: &LocalizeArgs) -> Result<ResultRecord, CliError> {
    let config = args.config()?;
    let bundle = read_bundle(&args.bundle).map_err(input("reading bundle"))?;
    let loc = localize(&bundle, &config).map_err(|e| match e {
        PipelineError::Data(d) => CliError::Input(d.to_string()),
        PipelineError::Scale(s) => CliError::Pipeline(format!("no metric scale: {s}")),
    })?;
    let record = ResultRecord::from_localization(&bundle, &loc);
    let text = serde_json::to_string_pretty(&record).expect("result serializes");
    write_text(&args.out.join(RESULT_FILE), &(text + "\n"))?;
    Ok(record)
}

fn collect_files(root: &Path, name: &str) -> Result<Vec<PathBuf>, CliError> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    if !root.is_dir() {
        return Err(CliError::Input(format!("{} does not exist", root.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(input(&dir.display().to_string()))?;
        for entry in entries {
            let path = entry.map_err(input(&dir.display().to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == name) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let thresholds = parse_thresholds(&args.thresholds).map_err(input("--thresholds"))?;
    let results = collect_files(&args.results, RESULT_FILE)?;
    if results.is_empty() {
        return Err(CliError::Input(format!("no {RESULT_FILE} under {}", args.results.display())));
    }
    let mut gt: BTreeMap<String, RigidPose> = BTreeMap::new();
    for path in collect_files(&args.gt, ORACLE_FILE)? {
        let oracle: OracleRecord = read_json(&path)?;
        let pose = RigidPose::from_row_major(&oracle.gt_query_pose)
            .map_err(input(&path.display().to_string()))?;
        if gt.insert(oracle.query_id.clone(), pose).is_some() {
            return Err(CliError::Input(format!("duplicate ground truth for {}", oracle.query_id)));
        }
    }

    let mut errors = Vec::with_capacity(results.len());
    let mut seen = BTreeMap::new();
    for path in &results {
        let record: ResultRecord = read_json(path)?;
        let truth = gt
            .get(&record.query_id)
            .ok_or_else(|| CliError::Input(format!("no ground truth for query {}", record.query_id)))?;
        if seen.insert(record.query_id.clone(), ()).is_some() {
            return Err(CliError::Input(format!("duplicate result for {}", record.query_id)));
        }
        let pose = RigidPose::from_row_major(&record.pose).map_err(input(&path.display().to_string()))?;
        errors.push(pose_error(&pose, truth));
    }
    let summary = summarize(&errors, &thresholds).map_err(input("summary"))?;
    write_text(&args.out.join("report.txt"), &summary.to_text())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&args.out.join("summary.json"), &(json + "\n"))
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Localize(a) => cmd_localize(a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("refloc: {e}");
            e.exit_code()
        }
    }
}

//! `stereoref` command line: pose initialisation, reference generation,
//! pose averaging with outlier rejection, benchmark evaluation, range
//! statistics and the alignment service.
//!
//! Exit codes: 0 success, 1 environment (I/O, bind failure), 2 invalid
//! input, 3 data inconsistency.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Point3;
use rayon::prelude::*;
use serde::Serialize;
use stereoref_core::dataset::{
    self, read_calibration, read_calibration_at, read_color_png, read_depth, read_disparity, read_map, read_mask,
    write_atomic, write_color_png, write_record, Calibration, Channel, DatasetError, DatasetRecord, Layout,
};
use stereoref_core::image::ColorImage;
use stereoref_core::mesh::{load_mesh, MeshError};
use stereoref_core::metrics::{
    aggregate, reject_outlier_alignments, score_image, signed_error_image, DepthMetric, EvalConfig, EvalReport, ImageScore,
    MeanStd, MetricsError, VariantScore, DEFAULT_BAD_THRESHOLD, DEFAULT_CLIP, DEFAULT_OUTLIER_PERCENT,
};
use stereoref_core::posefile::{read_markers, read_pose, write_pose, PoseFileError};
use stereoref_core::reference::{generate_reference, range_stats, DisparityMap, ReferenceConfig, ReferenceError, DEFAULT_MARGIN};
use stereoref_core::render::{render_overlay, RenderConfig, RenderError, DEFAULT_Z_FAR, DEFAULT_Z_NEAR};
use stereoref_core::rig::{Eye, RectifiedRig, RigError};
use stereoref_core::se3::{average_transforms, initial_pose_from_markers, AlignmentSet, RigidTransform, Se3Error};
use thiserror::Error;

pub const DEFAULT_WIDTH: u32 = 640;
pub const DEFAULT_HEIGHT: u32 = 512;
pub const DEFAULT_PORT: u32 = 8080;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Environment(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Inconsistent(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Environment(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Inconsistent(_) => 3,
        }
    }
}

fn io_kind(e: &std::io::Error, msg: String) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Invalid(msg)
    } else {
        CliError::Environment(msg)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let msg = e.to_string();
        match &e {
            DatasetError::Io { source, .. } => io_kind(source, msg),
            DatasetError::MissingChannel { .. }
            | DatasetError::Dimension { .. }
            | DatasetError::MissingCalibration { .. }
            | DatasetError::Inconsistent(_) => CliError::Inconsistent(msg),
            _ => CliError::Invalid(msg),
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match &e {
            MeshError::Io { source, .. } => io_kind(source, e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PoseFileError> for CliError {
    fn from(e: PoseFileError) -> Self {
        match &e {
            PoseFileError::Io { source, .. } => io_kind(source, e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<Se3Error> for CliError {
    fn from(e: Se3Error) -> Self {
        match e {
            Se3Error::NoInliers => CliError::Inconsistent(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Dimension(_) => CliError::Inconsistent(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ReferenceError> for CliError {
    fn from(e: ReferenceError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<RigError> for CliError {
    fn from(e: RigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Environment(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "stereoref", version, about = "Stereo reference generation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Initial model→camera pose from three marker points.
    InitPose(InitPoseArgs),
    /// Render a reference record (depth, disparity, mask) for one pose.
    GenReference(GenReferenceArgs),
    /// Reject outlier alignments against probe disparities and average the rest.
    AveragePoses(AveragePosesArgs),
    /// Score method outputs against a reference dataset.
    Evaluate(EvaluateArgs),
    /// Per-record depth and disparity ranges over valid pixels.
    RangeStats(RangeStatsArgs),
    /// Run the alignment HTTP service.
    Serve(ServeArgs),
}

#[derive(clap::Args, Debug, Clone)]
pub struct InitPoseArgs {
    #[arg(long)]
    pub markers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug, Clone)]
pub struct GenReferenceArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// Calibration JSON holding P1, P2 and Q per id.
    #[arg(long)]
    pub calib: PathBuf,
    /// Entry of the calibration file; defaults to --id, then to the only entry.
    #[arg(long)]
    pub calib_id: Option<String>,
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long, default_value_t = DEFAULT_Z_NEAR)]
    pub near: f64,
    #[arg(long, default_value_t = DEFAULT_Z_FAR)]
    pub far: f64,
    /// Depth disagreement (mm) above which a pixel counts as occluded.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    /// Dataset root to write into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub id: String,
    /// Rectified left image; shaded model views are synthesised when absent.
    #[arg(long, requires = "right")]
    pub left: Option<PathBuf>,
    #[arg(long, requires = "left")]
    pub right: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WIDTH, conflicts_with = "left")]
    pub width: u32,
    #[arg(long, default_value_t = DEFAULT_HEIGHT, conflicts_with = "left")]
    pub height: u32,
}

#[derive(clap::Args, Debug, Clone)]
pub struct AveragePosesArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub poses: Vec<PathBuf>,
    /// Centre of rotation on the model surface, `x,y,z` in mm.
    #[arg(long, value_parser = parse_point)]
    pub center: Point3<f64>,
    /// Dataset roots (or plain directories of `<id>.png`) holding probe disparities.
    #[arg(long, num_args = 1..)]
    pub probes: Vec<PathBuf>,
    /// Outlier threshold: Bad3 percentage against every probe.
    #[arg(long, default_value_t = DEFAULT_OUTLIER_PERCENT)]
    pub threshold: f64,
    /// Model used to render each candidate's disparity; needed with --probes.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub calib_id: Option<String>,
    /// Record id of the probe disparities.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value_t = DEFAULT_Z_NEAR)]
    pub near: f64,
    #[arg(long, default_value_t = DEFAULT_Z_FAR)]
    pub far: f64,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = DEFAULT_BAD_THRESHOLD)]
    pub bad: f64,
    /// Mean pose file; a JSON sidecar `<out>.json` records the inliers.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OccludedVariants {
    /// Report both the occlusion-excluded and occlusion-included variants.
    Both,
    /// Report only the occlusion-excluded variant.
    OnlyExcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepthMetricArg {
    Z,
    Euclidean,
}

#[derive(clap::Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Reference dataset root.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Method output directory, optionally `name=dir`; repeatable.
    #[arg(long, num_args = 1.., required = true)]
    pub est: Vec<String>,
    #[arg(long, value_enum, default_value_t = OccludedVariants::Both)]
    pub include_occluded: OccludedVariants,
    /// Report directory for scores.csv, summary.csv and table.txt.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub error_images: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BAD_THRESHOLD)]
    pub bad: f64,
    #[arg(long, default_value_t = DEFAULT_CLIP)]
    pub clip: f64,
    #[arg(long, value_enum, default_value_t = DepthMetricArg::Z)]
    pub depth_metric: DepthMetricArg,
}

#[derive(clap::Args, Debug, Clone)]
pub struct RangeStatsArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u32,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub data: PathBuf,
}

fn parse_point(s: &str) -> Result<Point3<f64>, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| format!("{s}: {e}"))?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Point3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got '{s}'")),
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::InitPose(a) => init_pose(&a),
        Command::GenReference(a) => gen_reference(&a),
        Command::AveragePoses(a) => average_poses(&a).map(|_| ()),
        Command::Evaluate(a) => evaluate(&a).map(|_| ()),
        Command::RangeStats(a) => cmd_range_stats(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn env_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Environment(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(env_err(dir))?;
    }
    write_atomic(path, |out| std::io::Write::write_all(out, text.as_bytes()))?;
    Ok(())
}

pub fn init_pose(a: &InitPoseArgs) -> CliResult<()> {
    let pose = initial_pose_from_markers(&read_markers(&a.markers)?)?;
    write_pose(&a.out, &pose)?;
    Ok(())
}

fn load_rig(path: &Path, id: Option<&str>, width: u32, height: u32) -> CliResult<(Calibration, RectifiedRig)> {
    let (_, calib) = read_calibration_at(path, id)?;
    let rig = calib.rig(width, height)?;
    Ok((calib, rig))
}

/// First of `preferred` present in the calibration file; `None` falls back to
/// the single-entry rule.
fn calibration_entry_id(path: &Path, preferred: &[Option<&str>]) -> CliResult<Option<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_kind(&e, format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(preferred.iter().flatten().find(|id| value.get(**id).is_some()).map(|id| id.to_string()))
}

/// Flat-shaded render of the model over black, used when no photographs exist.
pub fn synthetic_view(
    mesh: &stereoref_core::mesh::TriangleMesh,
    rig: &RectifiedRig,
    eye: Eye,
    pose: &RigidTransform,
    render: &RenderConfig,
) -> CliResult<ColorImage> {
    let black = ColorImage::new(rig.width(), rig.height());
    let cfg = RenderConfig { alpha: 1.0, ..*render };
    Ok(render_overlay(mesh, rig, eye, pose, &cfg, &black)?)
}

pub fn gen_reference(a: &GenReferenceArgs) -> CliResult<()> {
    if !dataset::is_valid_id(&a.id) {
        return Err(DatasetError::InvalidId(a.id.clone()).into());
    }
    let mesh = load_mesh(&a.mesh)?;
    let pose = read_pose(&a.pose)?;
    let images = match (&a.left, &a.right) {
        (Some(l), Some(r)) => {
            let (l, r) = (read_color_png(l)?, read_color_png(r)?);
            r.check_size(l.width(), l.height()).map_err(|e| CliError::Inconsistent(e.to_string()))?;
            Some((l, r))
        }
        _ => None,
    };
    let (w, h) = images.as_ref().map_or((a.width, a.height), |(l, _)| (l.width(), l.height()));
    let entry = match &a.calib_id {
        Some(id) => Some(id.clone()),
        None => calibration_entry_id(&a.calib, &[Some(a.id.as_str())])?,
    };
    let (calib, rig) = load_rig(&a.calib, entry.as_deref(), w, h)?;
    let render = RenderConfig::with_clip(a.near, a.far)?;
    let cfg = ReferenceConfig { render, margin: a.margin };
    let bundle = generate_reference(&mesh, &rig, &pose, &cfg)?;
    let (left, right) = match images {
        Some(pair) => pair,
        None => (synthetic_view(&mesh, &rig, Eye::Left, &pose, &render)?, synthetic_view(&mesh, &rig, Eye::Right, &pose, &render)?),
    };
    let layout = Layout::open(&a.out)?;
    let record = DatasetRecord {
        id: a.id.clone(),
        left,
        right,
        depth_left: bundle.depth_left,
        depth_right: bundle.depth_right,
        disparity: bundle.disparity,
        mask: bundle.mask,
        calibration: calib,
    };
    write_record(&layout, &record)?;
    Ok(())
}

/// Disparity of record `id` from a dataset root or a plain directory of PNGs.
pub fn read_method_disparity(dir: &Path, id: &str) -> CliResult<DisparityMap> {
    let layout = Layout::open(dir)?;
    if layout.channel_dir(Channel::Disparity).is_dir() {
        return Ok(read_disparity(&layout, id)?);
    }
    let path = dir.join(format!("{id}.png"));
    if !path.exists() {
        return Err(DatasetError::MissingChannel { channel: Channel::Disparity, path }.into());
    }
    Ok(DisparityMap::new(read_map(&path)?))
}

fn method_ids(dir: &Path) -> CliResult<BTreeSet<String>> {
    let layout = Layout::open(dir)?;
    let d = layout.channel_dir(Channel::Disparity);
    let ids = if d.is_dir() { layout.ids(Channel::Disparity)? } else { dataset::list_ids(dir)? };
    Ok(ids.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AverageOutcome {
    pub poses: Vec<String>,
    pub inliers: Vec<bool>,
    pub inliers_used: usize,
    pub ambiguous: bool,
    pub center: [f64; 3],
    pub threshold_percent: f64,
    /// Bad-pixel percentage of each probe against each candidate.
    pub probe_bad_percent: Vec<Vec<f64>>,
    pub mean_pose: [[f64; 4]; 4],
}

pub fn average_poses(a: &AveragePosesArgs) -> CliResult<AverageOutcome> {
    let poses: Vec<RigidTransform> = a.poses.iter().map(|p| read_pose(p)).collect::<Result<_, _>>()?;
    let mut inliers = vec![true; poses.len()];
    let mut probe_bad = Vec::new();
    if !a.probes.is_empty() {
        let (Some(mesh_path), Some(calib_path), Some(id)) = (&a.mesh, &a.calib, &a.id) else {
            return Err(CliError::Invalid("--probes needs --mesh, --calib and --id".into()));
        };
        let probes: Vec<DisparityMap> = a.probes.iter().map(|d| read_method_disparity(d, id)).collect::<Result<_, _>>()?;
        let (w, h) = (probes[0].width(), probes[0].height());
        let entry = match &a.calib_id {
            Some(c) => Some(c.clone()),
            None => calibration_entry_id(calib_path, &[Some(id.as_str())])?,
        };
        let (_, rig) = load_rig(calib_path, entry.as_deref(), w, h)?;
        let mesh = load_mesh(mesh_path)?;
        let cfg = ReferenceConfig { render: RenderConfig::with_clip(a.near, a.far)?, margin: a.margin };
        let bundles = poses.par_iter().map(|p| generate_reference(&mesh, &rig, p, &cfg)).collect::<Result<Vec<_>, _>>()?;
        let candidates: Vec<DisparityMap> = bundles.iter().map(|b| b.disparity.clone()).collect();
        let masks: Vec<_> = bundles.iter().map(|b| b.mask.clone()).collect();
        let eval = EvalConfig { bad_threshold: a.bad, ..EvalConfig::default() };
        eval.validate()?;
        inliers = reject_outlier_alignments(&candidates, &probes, &masks, a.threshold, &eval)?;
        for (cand, mask) in candidates.iter().zip(&masks) {
            let row = probes
                .iter()
                .map(|p| stereoref_core::metrics::bad_pixel_percent(p, cand, mask, &eval))
                .collect::<Result<Vec<_>, _>>()?;
            probe_bad.push(row);
        }
    }
    let set = AlignmentSet::with_inliers(poses, a.center, inliers.clone())?;
    let mean = average_transforms(&set)?;
    write_pose(&a.out, &mean.transform)?;
    let h = mean.transform.to_homogeneous();
    let outcome = AverageOutcome {
        poses: a.poses.iter().map(|p| p.display().to_string()).collect(),
        inliers,
        inliers_used: mean.inliers_used,
        ambiguous: mean.ambiguous,
        center: [a.center.x, a.center.y, a.center.z],
        threshold_percent: a.threshold,
        probe_bad_percent: probe_bad,
        mean_pose: std::array::from_fn(|i| std::array::from_fn(|j| h[(i, j)])),
    };
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".json");
    let text = serde_json::to_string_pretty(&outcome).expect("serialisable") + "\n";
    write_text(Path::new(&sidecar), &text)?;
    Ok(outcome)
}

/// A named method output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    pub dir: PathBuf,
}

pub fn parse_method(arg: &str) -> Method {
    match arg.split_once('=') {
        Some((name, dir)) if !name.is_empty() => Method { name: name.to_string(), dir: PathBuf::from(dir) },
        _ => {
            let dir = PathBuf::from(arg);
            let name = dir.file_name().map_or_else(|| arg.to_string(), |n| n.to_string_lossy().into_owned());
            Method { name, dir }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub report: EvalReport,
}

/// Table cell: mean with population standard deviation.
pub fn format_cell(m: &MeanStd) -> String {
    format!("{:.2} (±{:.2})", m.mean, m.std)
}

fn variant_name(include: bool) -> &'static str {
    if include {
        "with_occluded"
    } else {
        "without_occluded"
    }
}

pub fn render_table(reports: &[MethodReport], variants: &[bool]) -> String {
    let header = ["method", "variant", "Bad3 (%)", "RMSE disparity (px)", "RMSE depth (mm)"].map(String::from);
    let mut rows = vec![header.to_vec()];
    for r in reports {
        for &inc in variants {
            let v = r.report.variant(inc);
            rows.push(vec![
                r.method.clone(),
                variant_name(inc).to_string(),
                format_cell(&v.bad_percent),
                format_cell(&v.rmse_disparity),
                format_cell(&v.rmse_depth),
            ]);
        }
    }
    let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Environment(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<Vec<MethodReport>> {
    let cfg = EvalConfig {
        bad_threshold: a.bad,
        include_occluded: false,
        clip: a.clip,
        depth_metric: match a.depth_metric {
            DepthMetricArg::Z => DepthMetric::Z,
            DepthMetricArg::Euclidean => DepthMetric::Euclidean,
        },
    };
    cfg.validate()?;
    let variants: &[bool] = match a.include_occluded {
        OccludedVariants::Both => &[false, true],
        OccludedVariants::OnlyExcl => &[false],
    };
    let reference = Layout::open(&a.reference)?;
    let ids = reference.ids(Channel::Disparity)?;
    if ids.is_empty() {
        return Err(CliError::Inconsistent(format!("no reference disparities under {}", a.reference.display())));
    }
    let methods: Vec<Method> = a.est.iter().map(|s| parse_method(s)).collect();
    let mut names = BTreeSet::new();
    for m in &methods {
        if !names.insert(m.name.clone()) {
            return Err(CliError::Invalid(format!("method name '{}' given twice", m.name)));
        }
    }

    let mut problems = Vec::new();
    for m in &methods {
        let have = method_ids(&m.dir)?;
        let missing: Vec<&String> = ids.iter().filter(|id| !have.contains(*id)).collect();
        let extra: Vec<&String> = have.iter().filter(|id| !ids.contains(id)).collect();
        if !missing.is_empty() {
            problems.push(format!("{}: missing ids {}", m.name, join(&missing)));
        }
        if !extra.is_empty() {
            problems.push(format!("{}: ids absent from the reference {}", m.name, join(&extra)));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Inconsistent(problems.join("; ")));
    }

    struct RefItem {
        id: String,
        rig: RectifiedRig,
        disparity: DisparityMap,
        mask: stereoref_core::reference::MaskMap,
    }
    let refs: Vec<RefItem> = ids
        .par_iter()
        .map(|id| -> CliResult<RefItem> {
            let disparity = read_disparity(&reference, id)?;
            let mask = read_mask(&reference, id)?;
            let rig = read_calibration(&reference, id)?.rig(disparity.width(), disparity.height())?;
            Ok(RefItem { id: id.clone(), rig, disparity, mask })
        })
        .collect::<Result<_, _>>()?;

    let mut reports = Vec::new();
    let mut score_rows = Vec::new();
    for m in &methods {
        let scored: Vec<(ImageScore, DisparityMap)> = refs
            .par_iter()
            .map(|r| -> CliResult<(ImageScore, DisparityMap)> {
                let est = read_method_disparity(&m.dir, &r.id)?;
                let score = score_image(&r.id, &r.rig, &est, &r.disparity, &r.mask, &cfg)?;
                Ok((score, est))
            })
            .collect::<Result<_, _>>()?;
        if let Some(dir) = &a.error_images {
            let out = dir.join(&m.name);
            fs::create_dir_all(&out).map_err(env_err(&out))?;
            scored
                .par_iter()
                .zip(&refs)
                .map(|((_, est), r)| -> CliResult<()> {
                    for &inc in variants {
                        let img = signed_error_image(est, &r.disparity, &r.mask, &cfg.with_occluded(inc))?;
                        let name = if inc { format!("{}_with_occluded.png", r.id) } else { format!("{}.png", r.id) };
                        write_color_png(&out.join(name), &img)?;
                    }
                    Ok(())
                })
                .collect::<Result<Vec<()>, _>>()?;
        }
        let scores: Vec<ImageScore> = scored.into_iter().map(|(s, _)| s).collect();
        for s in &scores {
            for &inc in variants {
                let v: &VariantScore = s.variant(inc);
                score_rows.push(vec![
                    m.name.clone(),
                    s.id.clone(),
                    variant_name(inc).to_string(),
                    num(v.bad_percent),
                    num(v.rmse_disparity),
                    num(v.rmse_depth),
                    v.eligible_pixels.to_string(),
                    v.valid_pixels.to_string(),
                ]);
            }
        }
        reports.push(MethodReport { method: m.name.clone(), report: aggregate(scores)? });
    }

    let mut summary_rows = Vec::new();
    for r in &reports {
        for &inc in variants {
            let v = r.report.variant(inc);
            summary_rows.push(vec![
                r.method.clone(),
                variant_name(inc).to_string(),
                r.report.scores.len().to_string(),
                num(v.bad_percent.mean),
                num(v.bad_percent.std),
                num(v.rmse_disparity.mean),
                num(v.rmse_disparity.std),
                num(v.rmse_depth.mean),
                num(v.rmse_depth.std),
            ]);
        }
    }
    fs::create_dir_all(&a.report).map_err(env_err(&a.report))?;
    write_csv(
        &a.report.join("scores.csv"),
        &["method", "id", "variant", "bad_percent", "rmse_disparity", "rmse_depth", "eligible_pixels", "valid_pixels"],
        &score_rows,
    )?;
    write_csv(
        &a.report.join("summary.csv"),
        &[
            "method",
            "variant",
            "images",
            "bad_percent_mean",
            "bad_percent_std",
            "rmse_disparity_mean",
            "rmse_disparity_std",
            "rmse_depth_mean",
            "rmse_depth_std",
        ],
        &summary_rows,
    )?;
    write_text(&a.report.join("table.txt"), &render_table(&reports, variants))?;
    Ok(reports)
}

fn join(ids: &[&String]) -> String {
    ids.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

pub fn cmd_range_stats(a: &RangeStatsArgs) -> CliResult<()> {
    let layout = Layout::open(&a.reference)?;
    let ids = layout.ids(Channel::Disparity)?;
    let rows = ids
        .par_iter()
        .map(|id| -> CliResult<Vec<String>> {
            let mask = read_mask(&layout, id)?;
            let depth = read_depth(&layout, Channel::DepthLeft, id)?;
            let disp = read_disparity(&layout, id)?;
            let mut row = vec![id.clone()];
            for map in [&*depth, &*disp] {
                match range_stats(map, Some(&mask)) {
                    Ok(s) => row.extend([s.min, s.max, s.mean, s.p01, s.p99].map(num)),
                    Err(ReferenceError::NoValidPixels) => row.extend(std::iter::repeat_n(String::new(), 5)),
                    Err(e) => return Err(CliError::Inconsistent(format!("{id}: {e}"))),
                }
            }
            let valid = range_stats(&disp, Some(&mask)).map_or(0, |s| s.count);
            row.push(valid.to_string());
            Ok(row)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_csv(
        &a.out,
        &[
            "id",
            "depth_min",
            "depth_max",
            "depth_mean",
            "depth_p01",
            "depth_p99",
            "disparity_min",
            "disparity_max",
            "disparity_mean",
            "disparity_p01",
            "disparity_p99",
            "valid_pixels",
        ],
        &rows,
    )
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let port = u16::try_from(a.port).map_err(|_| CliError::Environment(format!("port {} out of range", a.port)))?;
    let addr: SocketAddr = format!("{}:{port}", a.host)
        .parse()
        .map_err(|e| CliError::Environment(format!("cannot listen on {}:{port}: {e}", a.host)))?;
    if !a.data.is_dir() {
        return Err(CliError::Invalid(format!("data directory {} does not exist", a.data.display())));
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Environment(e.to_string()))?;
    runtime
        .block_on(stereoref_service::serve(addr, a.data.clone()))
        .map_err(|e| CliError::Environment(format!("cannot serve on {addr}: {e}")))
}

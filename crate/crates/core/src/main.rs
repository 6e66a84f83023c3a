use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use semdepth::fit::{fit_snippet, reference_frame, FitFrame, FitInit, FitStatus, LogEntry};
use semdepth::io::{
    colorize, encode_f32, encode_pgm, encode_ppm, format_intrinsics, format_poses, read_depth, read_poses, write_atomic,
    FrameEntry, LoadedSnippet, RunConfig, SnippetManifest,
};
use semdepth::losses::{total_loss, FrameView, LossReport, LossTerms, SnippetInputs, SourceInput};
use semdepth::metrics::{ate_sequence, evaluate_depth, AteSummary, DepthEvalResult};
use semdepth::oracle::{gradient_check, oracle_suite, GRADIENT_TOLERANCE, ORACLE_TOLERANCE};
use semdepth::raster::{LabelMap, IGNORE_LABEL};
use semdepth::scene::SceneSpec;
use semdepth::{Error, Pose, Raster};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "semdepth", version, about = "Semantics-aware depth and ego-motion losses, fitting and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene description into frames and a manifest.
    GenScene {
        /// Scene description (TOML).
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every loss term on the reference frame of a snippet with ground-truth geometry.
    ComputeLoss {
        manifest: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
        /// Also write colour-mapped PPM renderings of the error maps.
        #[arg(long)]
        visualize: bool,
    },
    /// Recover depth and motion of a snippet by direct optimization.
    FitSynthetic {
        manifest: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Initialize depth as the ground truth times this factor.
        #[arg(long)]
        init_depth_scale: Option<f64>,
        /// Hold the motion at the ground-truth poses.
        #[arg(long)]
        fix_pose: bool,
        /// Hold depth at the ground truth.
        #[arg(long)]
        fix_depth: bool,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Depth metrics of predicted against ground-truth F32 rasters, averaged over images.
    EvalDepth {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        median_scaling: Switch,
        /// Maximum ground-truth depth in meters.
        #[arg(long, default_value_t = semdepth::DEFAULT_DEPTH_CAP)]
        cap: f64,
        #[arg(long)]
        json: bool,
    },
    /// Absolute trajectory error over all snippets of two pose files.
    EvalPose {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 5, value_parser = parse_snippet_len)]
        snippet_len: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run the brute-force oracle and gradient-check suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 50)]
        depth_samples: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the one in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_snippet_len(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (3 | 5)) => Ok(n),
        _ => Err(format!("snippet length must be 3 or 5, got {s}")),
    }
}

enum Failure {
    Usage(String),
    Data(Error),
    Selftest,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = Result<T, Failure>;

/// Files produced by a command, written only once the command has succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn add(&mut self, name: impl AsRef<Path>, bytes: impl Into<Vec<u8>>) {
        self.files.push((self.dir.join(name), bytes.into()));
    }

    fn json(&mut self, name: &str, value: &impl Serialize) {
        let mut s = serde_json::to_string_pretty(value).expect("report serializes");
        s.push('\n');
        self.add(name, s);
    }

    fn commit(self) -> CliResult<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::Io { path: self.dir.clone(), source: e })?;
        for (path, bytes) in &self.files {
            write_atomic(path, bytes)?;
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Selftest) => ExitCode::from(EXIT_SELFTEST),
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenScene { scene, out } => gen_scene(&scene, out),
        Command::ComputeLoss { manifest, run, json, visualize } => compute_loss(&manifest, &run, json, visualize),
        Command::FitSynthetic { manifest, run, init_depth_scale, fix_pose, fix_depth, max_iterations, json } => {
            fit_synthetic(&manifest, &run, FitOptions { init_depth_scale, fix_pose, fix_depth, max_iterations }, json)
        }
        Command::EvalDepth { pred, gt, median_scaling, cap, json } => {
            eval_depth(&pred, &gt, median_scaling == Switch::On, cap, json)
        }
        Command::EvalPose { pred, gt, snippet_len, json } => eval_pose(&pred, &gt, snippet_len, json),
        Command::Selftest { seed, instances, depth_samples } => selftest(seed, instances, depth_samples),
    }
}

fn load_run(args: &RunArgs) -> CliResult<(RunConfig, PathBuf)> {
    let config = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set output_dir in the config".into()))?;
    Ok((config, out))
}

fn load_snippet(path: &Path) -> CliResult<LoadedSnippet> {
    Ok(SnippetManifest::read(path)?.load(path)?)
}

fn frame_name(kind: &str, i: usize, ext: &str) -> String {
    format!("{kind}_{i:02}.{ext}")
}

// ---------------------------------------------------------------------------

fn gen_scene(scene: &Path, out: PathBuf) -> CliResult<()> {
    let text = std::fs::read_to_string(scene).map_err(|e| Error::Io { path: scene.into(), source: e })?;
    let spec = SceneSpec::from_toml(&text)?;
    if !semdepth::io::SNIPPET_LENGTHS.contains(&spec.num_frames()) {
        return Err(Failure::Data(Error::Scene(format!(
            "{} frames; a snippet needs one of {:?}",
            spec.num_frames(),
            semdepth::io::SNIPPET_LENGTHS
        ))));
    }
    let frames = spec.render_all()?;
    let mut outputs = Outputs::new(out);
    let mut entries = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let (image, labels, depth) = (frame_name("image", i, "ppm"), frame_name("labels", i, "pgm"), frame_name("depth", i, "f32"));
        outputs.add(&image, encode_ppm(&f.image));
        outputs.add(&labels, encode_pgm(&f.labels));
        outputs.add(&depth, encode_f32(&f.depth));
        entries.push(FrameEntry { image: image.into(), labels: labels.into(), depth: Some(depth.into()) });
    }
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    outputs.add("intrinsics.txt", format_intrinsics(&spec.intrinsics));
    outputs.add("poses.txt", format_poses(&poses));
    let manifest = SnippetManifest { intrinsics: "intrinsics.txt".into(), poses: Some("poses.txt".into()), frames: entries };
    outputs.add("manifest.toml", manifest.to_toml());
    let dir = outputs.dir.clone();
    outputs.commit()?;
    println!("wrote {} frames of {}x{} to {}", frames.len(), spec.width, spec.height, dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LossSummary {
    target: usize,
    sources: Vec<usize>,
    terms: LossTerms,
    total: f64,
    objective: f64,
    road_violations: usize,
    image_kept: usize,
    point_kept: usize,
    automask_kept: usize,
    semantic_masked: Vec<usize>,
    valid: Vec<usize>,
}

fn summarize(report: &LossReport, target: usize, sources: Vec<usize>) -> LossSummary {
    let sel = &report.selection;
    LossSummary {
        target,
        sources,
        terms: report.terms,
        total: report.total,
        objective: report.objective,
        road_violations: report.road_violations,
        image_kept: sel.image_kept(),
        point_kept: sel.point_kept(),
        automask_kept: sel.automask.count(),
        semantic_masked: sel.semantic.iter().map(|m| m.count()).collect(),
        valid: sel.valid.iter().map(|m| m.count()).collect(),
    }
}

fn terms_text(t: &LossTerms) -> String {
    format!(
        "L_img {:.6e}\nL_ss {:.6e}\nL_3D {:.6e}\nL_road {:.6e}\nL_road_hinge {:.6e}\nL_smooth {:.6e}\n",
        t.image, t.semantic, t.point, t.road, t.road_hinge, t.smooth
    )
}

fn choice_map(c: &Raster<Option<u8>>) -> LabelMap {
    c.map(|x| x.unwrap_or(IGNORE_LABEL))
}

fn compute_loss(manifest: &Path, run: &RunArgs, json: bool, visualize: bool) -> CliResult<()> {
    let (config, out) = load_run(run)?;
    let classes = config.class_table()?;
    let snip = load_snippet(manifest)?;
    let depths = snip
        .gt_depths()
        .ok_or_else(|| Error::Config("compute-loss needs a depth map for every frame in the manifest".into()))?;
    if snip.poses.is_none() {
        return Err(Error::Config("compute-loss needs ground-truth poses in the manifest".into()).into());
    }
    let n = snip.frames.len();
    let t = reference_frame(n);
    let sources: Vec<usize> = (0..n).filter(|&s| s != t).collect();
    let view = |i: usize| FrameView { image: &snip.frames[i].image, labels: &snip.frames[i].labels, depth: &depths[i] };
    let inputs = SnippetInputs {
        intrinsics: snip.intrinsics,
        target: view(t),
        sources: sources
            .iter()
            .map(|&s| SourceInput { frame: view(s), target_to_source: snip.gt_relative(t, s).expect("poses present") })
            .collect(),
    };
    inputs.validate()?;
    let loss = config.loss_config(classes.ground_ids());
    let report = total_loss(&inputs, &loss);
    let summary = summarize(&report, t, sources.clone());

    let mut outputs = Outputs::new(out);
    outputs.json("report.json", &summary);
    for (k, &s) in sources.iter().enumerate() {
        outputs.add(frame_name("re", s, "f32"), encode_f32(&report.re[k]));
        outputs.add(frame_name("mre", s, "f32"), encode_f32(&report.mre[k]));
        outputs.add(frame_name("pe", s, "f32"), encode_f32(&report.pe[k]));
        outputs.add(frame_name("semantic_mask", s, "pgm"), encode_pgm(&report.selection.semantic[k].map(|&b| b as u8)));
        if visualize {
            outputs.add(frame_name("re", s, "ppm"), encode_ppm(&colorize(&report.re[k], 0.0, 1.0)));
            let pe_max = report.pe[k].data().iter().cloned().fold(0.0, f64::max);
            outputs.add(frame_name("pe", s, "ppm"), encode_ppm(&colorize(&report.pe[k], 0.0, pe_max)));
        }
    }
    outputs.add("automask.pgm", encode_pgm(&report.selection.automask.map(|&b| b as u8)));
    outputs.add("image_choice.pgm", encode_pgm(&choice_map(&report.selection.image_choice)));
    outputs.add("point_choice.pgm", encode_pgm(&choice_map(&report.selection.point_choice)));
    outputs.commit()?;

    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("report serializes"));
    } else {
        print!("target {t}, sources {sources:?}\n{}total {:.6e}\n", terms_text(&report.terms), report.total);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

struct FitOptions {
    init_depth_scale: Option<f64>,
    fix_pose: bool,
    fix_depth: bool,
    max_iterations: Option<usize>,
}

#[derive(Serialize)]
struct FitLog<'a> {
    status: &'a FitStatus,
    iterations: usize,
    history: &'a [LogEntry],
}

#[derive(Serialize)]
struct FitReport {
    status: FitStatus,
    iterations: usize,
    terms: LossTerms,
    total: f64,
    reference: usize,
    /// Reference-frame depth against ground truth, as predicted.
    depth: Option<DepthEvalResult>,
    /// Same with median scaling, and the scale applied.
    depth_median_scaled: Option<DepthEvalResult>,
    median_scale: Option<f64>,
    /// ATE of the whole snippet (one window).
    ate: Option<f64>,
}

fn fit_synthetic(manifest: &Path, run: &RunArgs, opts: FitOptions, json: bool) -> CliResult<()> {
    let (config, out) = load_run(run)?;
    let classes = config.class_table()?;
    let snip = load_snippet(manifest)?;
    let n = snip.frames.len();
    let gt_depths = snip.gt_depths();
    let gt_motions: Option<Vec<Pose>> = snip.poses.as_ref().map(|_| (0..n - 1).map(|j| snip.gt_relative(j, j + 1).unwrap()).collect());
    let need = |what: &str| Failure::Data(Error::Config(format!("{what} needs ground truth in the manifest")));

    let mut fit = config.fit_config(classes.ground_ids());
    if let Some(m) = opts.max_iterations {
        fit.max_iterations = m;
    }
    let mut init = FitInit { depth: config.fit.init_depth, ..FitInit::default() };
    if let Some(s) = opts.init_depth_scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Failure::Usage(format!("--init-depth-scale {s} must be positive")));
        }
        let gt = gt_depths.as_ref().ok_or_else(|| need("--init-depth-scale"))?;
        init.depths = Some(gt.iter().map(|d| d.map(|x| x * s)).collect());
    }
    if opts.fix_depth {
        if opts.init_depth_scale.is_some() {
            return Err(Failure::Usage("--fix-depth and --init-depth-scale are exclusive".into()));
        }
        init.depths = Some(gt_depths.clone().ok_or_else(|| need("--fix-depth"))?);
        fit.optimize_depth = false;
    }
    if opts.fix_pose {
        init.motions = Some(gt_motions.clone().ok_or_else(|| need("--fix-pose"))?);
        fit.optimize_pose = false;
    }

    let frames: Vec<FitFrame<'_>> = snip.frames.iter().map(|f| FitFrame { image: &f.image, labels: &f.labels }).collect();
    let outcome = fit_snippet(&frames, &snip.intrinsics, &fit, &init)?;
    let state = &outcome.state;
    let depths = state.depths();
    let trajectory = state.trajectory();
    let r = reference_frame(n);

    let (mut depth, mut scaled, mut scale) = (None, None, None);
    if let Some(gt) = &gt_depths {
        depth = Some(evaluate_depth(&depths[r], &gt[r], None, config.depth_cap, false)?.0);
        let (m, s) = evaluate_depth(&depths[r], &gt[r], None, config.depth_cap, true)?;
        scaled = Some(m);
        scale = Some(s);
    }
    let ate = match &snip.poses {
        Some(gt) => Some(semdepth::metrics::ate_snippet(&trajectory, gt)?),
        None => None,
    };
    let report = FitReport {
        status: state.status.clone(),
        iterations: state.iteration,
        terms: outcome.report.terms,
        total: outcome.report.total,
        reference: r,
        depth,
        depth_median_scaled: scaled,
        median_scale: scale,
        ate,
    };

    let mut outputs = Outputs::new(out);
    for (i, d) in depths.iter().enumerate() {
        outputs.add(frame_name("depth", i, "f32"), encode_f32(d));
    }
    outputs.add("poses.txt", format_poses(&trajectory));
    outputs.json("log.json", &FitLog { status: &state.status, iterations: state.iteration, history: &state.history });
    outputs.json("report.json", &report);
    outputs.commit()?;

    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        let mut s = format!("status {:?} after {} iterations\ntotal {:.6e}\n", report.status, report.iterations, report.total);
        if let Some(d) = &report.depth {
            let _ = writeln!(s, "abs_rel {:.6} (reference frame {r})", d.abs_rel);
        }
        if let (Some(d), Some(k)) = (&report.depth_median_scaled, report.median_scale) {
            let _ = writeln!(s, "abs_rel median-scaled {:.6} (scale {k:.4})", d.abs_rel);
        }
        if let Some(a) = report.ate {
            let _ = writeln!(s, "ATE {a:.6}");
        }
        print!("{s}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DepthSummary {
    images: usize,
    median_scaling: bool,
    cap: f64,
    mean: DepthEvalResult,
    per_image: Vec<DepthEvalResult>,
    scales: Vec<f64>,
}

fn mean_metrics(all: &[DepthEvalResult]) -> DepthEvalResult {
    let n = all.len() as f64;
    let avg = |f: fn(&DepthEvalResult) -> f64| all.iter().map(f).sum::<f64>() / n;
    DepthEvalResult {
        abs_rel: avg(|r| r.abs_rel),
        sq_rel: avg(|r| r.sq_rel),
        rmse: avg(|r| r.rmse),
        rmse_log: avg(|r| r.rmse_log),
        delta1: avg(|r| r.delta1),
        delta2: avg(|r| r.delta2),
        delta3: avg(|r| r.delta3),
        n_pixels: all.iter().map(|r| r.n_pixels).sum(),
    }
}

fn eval_depth(pred: &[PathBuf], gt: &[PathBuf], median_scaling: bool, cap: f64, json: bool) -> CliResult<()> {
    if pred.len() != gt.len() {
        return Err(Failure::Usage(format!("{} predictions but {} ground-truth files", pred.len(), gt.len())));
    }
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Failure::Usage(format!("--cap {cap} must be positive")));
    }
    let mut per_image = Vec::new();
    let mut scales = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let (m, s) = evaluate_depth(&read_depth(p)?, &semdepth::io::read_raster(g)?, None, cap, median_scaling)?;
        per_image.push(m);
        scales.push(s);
    }
    let summary = DepthSummary { images: per_image.len(), median_scaling, cap, mean: mean_metrics(&per_image), per_image, scales };
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("report serializes"));
    } else {
        let m = &summary.mean;
        println!(
            "abs_rel {:.4}\nsq_rel {:.4}\nrmse {:.4}\nrmse_log {:.4}\ndelta1 {:.4}\ndelta2 {:.4}\ndelta3 {:.4}",
            m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3
        );
    }
    Ok(())
}

fn eval_pose(pred: &Path, gt: &Path, snippet_len: usize, json: bool) -> CliResult<()> {
    let summary: AteSummary = ate_sequence(&read_poses(pred)?, &read_poses(gt)?, snippet_len)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("report serializes"));
    } else {
        println!("ATE {:.3} ± {:.3} ({} snippets of {snippet_len})", summary.mean, summary.std, summary.snippets);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn selftest(seed: u64, instances: usize, depth_samples: usize) -> CliResult<()> {
    let mut ok = true;
    let suite = oracle_suite(seed, instances);
    println!("oracle: {} random 8x8 two-source instances, tolerance {ORACLE_TOLERANCE:e}", suite.instances);
    for c in &suite.checks {
        let pass = c.error <= ORACLE_TOLERANCE;
        ok &= pass;
        println!("{} {} (worst error {:.3e})", if pass { "PASS" } else { "FAIL" }, c.name, c.error);
    }
    let g = gradient_check(seed, depth_samples)?;
    println!("gradient: {} depth pixels and 6 pose parameters, tolerance {GRADIENT_TOLERANCE:e}", g.depth_samples);
    for (name, err) in [("depth gradient", g.worst_depth), ("pose gradient", g.worst_pose)] {
        let pass = err <= GRADIENT_TOLERANCE;
        ok &= pass;
        println!("{} {name} (worst relative error {err:.3e})", if pass { "PASS" } else { "FAIL" });
    }
    if ok {
        println!("selftest passed");
        Ok(())
    } else {
        println!("selftest FAILED");
        Err(Failure::Selftest)
    }
}

//! The `cfexplain` command line: seven subcommands covering the pipeline
//! from dataset generation to the final report. Every command writes its
//! artifacts plus a `run_record.json` (resolved config, input digests,
//! output names; no timestamps, so reruns are bitwise comparable).
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 missing
//! prerequisite artifact, 4 incompatible artifacts, 1 anything else.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::agent::{build_agent, distill, AgentModel, DistillObjective};
use crate::ckpt::{atomic_write, file_sha256};
use crate::config::{load_config, Preset, RunConfig};
use crate::counterfactual::{
    alpha_sweep, auto_alpha_grid, paper_alpha_grid, smooth_heatmap, SweepResult, XtMode,
};
use crate::data::{generate_synthetic_dataset, load_dataset, save_dataset, Dataset, Split};
use crate::diffae::{train_diffae, DiffAE};
use crate::error::{Error, Result};
use crate::eval::{
    alignment_metrics, criteria_report, manipulation_validity, reconstruction_metrics,
    render_alignment_table, AlignmentReport,
};
use crate::render::{save_heatmap_png, save_image_png};
use crate::teacher::{train_teacher, QuerySample, Teacher};

#[derive(Parser)]
#[command(
    name = "cfexplain",
    version,
    about = "Counterfactual explanations for black-box image classifiers via a diffusion autoencoder latent space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset (images + ground-truth masks)
    GenData(GenDataArgs),
    /// Train the diffusion autoencoder on the dataset's train split
    TrainDiffae(TrainDiffaeArgs),
    /// Train the black-box classifier to be explained
    TrainTeacher(TrainTeacherArgs),
    /// Distill the teacher into the affine agent over semantic codes
    Distill(DistillArgs),
    /// Explain one query: counterfactual images + heatmaps + report
    Explain(ExplainArgs),
    /// Alpha sweeps over many queries, with validity statistics
    Sweep(SweepArgs),
    /// Alignment table (per objective) and explanation-criteria report
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; overrides preset defaults, flags override both
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, fanned out to per-stage seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving this command's artifacts
    #[arg(long)]
    out: PathBuf,
    /// Base defaults: "desk" (CPU-sized) or "paper" (reference geometry)
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut cfg = load_config(preset, self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.derive_seeds(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct TrainDiffaeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    /// Diffusion-autoencoder checkpoint from train-diffae
    #[arg(long)]
    diffae: PathBuf,
    /// Teacher checkpoint from train-teacher
    #[arg(long)]
    teacher: PathBuf,
    /// Distillation objective: l1, mse, or kl
    #[arg(long, default_value = "l1")]
    objective: String,
}

#[derive(Args)]
struct GridArgs {
    /// Explicit alpha value (repeatable); overrides --alpha-grid
    #[arg(long)]
    alpha: Vec<f64>,
    /// "auto" (k*c/||g||^2 for k in +-1..4), "paper" (+-10/15/20/30), or a
    /// comma-separated list
    #[arg(long)]
    alpha_grid: Option<String>,
    /// Class whose score the manipulation pushes up (0 or 1)
    #[arg(long)]
    target_class: Option<usize>,
    /// x_T source: "invert" (deterministic) or "stochastic"
    #[arg(long)]
    xt_mode: Option<String>,
}

impl GridArgs {
    fn resolve_grid(&self, agent: &AgentModel, target: usize, scale: f64) -> Result<Vec<f64>> {
        if !self.alpha.is_empty() {
            return Ok(self.alpha.clone());
        }
        match self.alpha_grid.as_deref() {
            None | Some("auto") => auto_alpha_grid(agent, target, scale),
            Some("paper") => Ok(paper_alpha_grid()),
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad alpha value '{s}' in --alpha-grid")))
                })
                .collect(),
        }
    }

    fn resolve_target(&self, cfg: &RunConfig) -> Result<usize> {
        let t = self.target_class.unwrap_or(cfg.explain.target_class);
        if t > 1 {
            return Err(Error::Config(format!("target class must be 0 or 1, got {t}")));
        }
        Ok(t)
    }

    fn resolve_mode(&self, cfg: &RunConfig) -> Result<XtMode> {
        match self.xt_mode.as_deref() {
            None => Ok(cfg.explain.xt_mode),
            Some(s) => s.parse().map_err(|_| {
                Error::Config(format!("bad --xt-mode '{s}' (expected invert or stochastic)"))
            }),
        }
    }
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    diffae: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// Agent checkpoint from distill
    #[arg(long)]
    agent: PathBuf,
    /// Index into the dataset's test split
    #[arg(long, default_value_t = 0)]
    query_index: usize,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    diffae: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    agent: PathBuf,
    /// How many test-split queries to sweep (default: all)
    #[arg(long)]
    num_queries: Option<usize>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    diffae: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// Agent checkpoint; repeat for each objective's row in the table
    #[arg(long, required = true)]
    agent: Vec<PathBuf>,
}

/// Entry point used by the `cfexplain` binary; returns the process exit
/// code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cfexplain: error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Incompatible(_) => 4,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::TrainDiffae(args) => cmd_train_diffae(args),
        Command::TrainTeacher(args) => cmd_train_teacher(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

// -- provenance ---------------------------------------------------------------

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    crate_version: &'static str,
    config: &'a RunConfig,
    /// Input path (as given) -> SHA-256 of the file.
    inputs: BTreeMap<String, String>,
    /// Artifact names written into the output directory.
    outputs: Vec<String>,
}

fn write_run_record(
    out: &Path,
    command: &str,
    config: &RunConfig,
    inputs: BTreeMap<String, String>,
    mut outputs: Vec<String>,
) -> Result<()> {
    outputs.sort();
    let record = RunRecord {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        config,
        inputs,
        outputs,
    };
    let json = serde_json::to_vec_pretty(&record)?;
    atomic_write(&out.join("run_record.json"), &json)
}

// -- artifact loading ---------------------------------------------------------

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} not found at {}", path.display())))
    }
}

fn load_dataset_checked(dir: &Path) -> Result<Dataset> {
    require_file(&dir.join("manifest.json"), "dataset manifest")?;
    load_dataset(dir)
}

fn load_diffae_checked(path: &Path) -> Result<(DiffAE, String)> {
    require_file(path, "diffusion-autoencoder checkpoint")?;
    let (model, _) = DiffAE::load(path)?;
    Ok((model, file_sha256(path)?))
}

fn load_teacher_checked(path: &Path) -> Result<(Teacher, String)> {
    require_file(path, "teacher checkpoint")?;
    let (model, _) = Teacher::load(path)?;
    Ok((model, file_sha256(path)?))
}

fn load_agent_checked(path: &Path) -> Result<(AgentModel, String)> {
    require_file(path, "agent checkpoint")?;
    Ok((AgentModel::load(path)?, file_sha256(path)?))
}

fn check_dataset_compat(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    if ds.image_size != cfg.data.image_size || ds.k != cfg.data.k {
        return Err(Error::Incompatible(format!(
            "dataset on disk is {}x{} K={}, configuration expects {}x{} K={}",
            ds.image_size, ds.image_size, ds.k, cfg.data.image_size, cfg.data.image_size, cfg.data.k
        )));
    }
    Ok(())
}

fn queries(ds: &Dataset, split: Split) -> Vec<QuerySample> {
    ds.split(split).into_iter().map(QuerySample::from_sample).collect()
}

fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    (e0 / (e0 + e1), e1 / (e0 + e1))
}

// -- commands -------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let ds = generate_synthetic_dataset(&cfg.data)?;
    save_dataset(&ds, &args.common.out)?;
    let n1 = ds.samples.iter().filter(|s| s.label == 1).count();
    write_run_record(
        &args.common.out,
        "gen-data",
        &cfg,
        BTreeMap::new(),
        vec!["manifest.json".into()],
    )?;
    println!(
        "gen-data: {} samples ({} class-1) at {}x{}, K={}, splits {}/{}/{} -> {}",
        ds.samples.len(),
        n1,
        ds.image_size,
        ds.image_size,
        ds.k,
        ds.split(Split::Train).len(),
        ds.split(Split::Val).len(),
        ds.split(Split::Test).len(),
        args.common.out.display()
    );
    Ok(())
}

fn cmd_train_diffae(args: TrainDiffaeArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let ds = load_dataset_checked(&args.data)?;
    check_dataset_compat(&ds, &cfg)?;
    let slices = ds.split_slices(Split::Train);
    let (model, record) = train_diffae(&slices, &cfg.diffae)?;
    let ckpt = args.common.out.join("diffae.ckpt");
    model.save(&ckpt, Some(&record))?;
    let mut inputs = BTreeMap::new();
    inputs.insert(args.data.display().to_string(), file_sha256(&args.data.join("manifest.json"))?);
    write_run_record(&args.common.out, "train-diffae", &cfg, inputs, vec!["diffae.ckpt".into()])?;
    println!(
        "train-diffae: {} steps on {} slices, loss {:.5} -> {:.5}, saved {}",
        record.steps,
        slices.len(),
        record.initial_loss,
        record.final_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_train_teacher(args: TrainTeacherArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let ds = load_dataset_checked(&args.data)?;
    check_dataset_compat(&ds, &cfg)?;
    let train = queries(&ds, Split::Train);
    let val = queries(&ds, Split::Val);
    let (model, record) = train_teacher(&train, &val, &cfg.teacher)?;
    let ckpt = args.common.out.join("teacher.ckpt");
    model.save(&ckpt, Some(&record))?;
    let mut inputs = BTreeMap::new();
    inputs.insert(args.data.display().to_string(), file_sha256(&args.data.join("manifest.json"))?);
    write_run_record(&args.common.out, "train-teacher", &cfg, inputs, vec!["teacher.ckpt".into()])?;
    let best = record.best();
    println!(
        "train-teacher: best epoch {} of {}, val accuracy {:.4}, sensitivity {:.4}, specificity {:.4}, saved {}",
        record.best_epoch,
        record.epochs.len(),
        best.val_accuracy,
        best.val_sensitivity,
        best.val_specificity,
        ckpt.display()
    );
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let objective: DistillObjective = args.objective.parse().map_err(|_| {
        Error::Config(format!("bad --objective '{}' (expected l1, mse, or kl)", args.objective))
    })?;
    let ds = load_dataset_checked(&args.data)?;
    check_dataset_compat(&ds, &cfg)?;
    let (diffae, diffae_digest) = load_diffae_checked(&args.diffae)?;
    let (teacher, teacher_digest) = load_teacher_checked(&args.teacher)?;
    let agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, cfg.distill.seed)?;
    let train = queries(&ds, Split::Train);
    let (mut agent, record) = distill(agent, &diffae, &teacher, &train, objective, &cfg.distill)?;
    agent.teacher_digest = Some(teacher_digest.clone());
    agent.diffae_digest = Some(diffae_digest.clone());
    let ckpt = args.common.out.join("agent.ckpt");
    agent.save(&ckpt, Some(&record))?;
    let mut inputs = BTreeMap::new();
    inputs.insert(args.data.display().to_string(), file_sha256(&args.data.join("manifest.json"))?);
    inputs.insert(args.diffae.display().to_string(), diffae_digest);
    inputs.insert(args.teacher.display().to_string(), teacher_digest);
    write_run_record(&args.common.out, "distill", &cfg, inputs, vec!["agent.ckpt".into()])?;
    println!(
        "distill[{objective}]: {} steps, loss {:.6} -> {:.6}, saved {}",
        record.steps,
        record.initial_loss,
        record.final_loss,
        ckpt.display()
    );
    Ok(())
}

/// Everything explain/sweep/evaluate share: artifacts loaded, digests
/// verified against the agent's provenance.
struct LoadedPipeline {
    ds: Dataset,
    diffae: DiffAE,
    teacher: Teacher,
    diffae_digest: String,
    teacher_digest: String,
    inputs: BTreeMap<String, String>,
}

fn load_pipeline(
    cfg: &RunConfig,
    data: &Path,
    diffae_path: &Path,
    teacher_path: &Path,
) -> Result<LoadedPipeline> {
    let ds = load_dataset_checked(data)?;
    check_dataset_compat(&ds, cfg)?;
    let (diffae, diffae_digest) = load_diffae_checked(diffae_path)?;
    let (teacher, teacher_digest) = load_teacher_checked(teacher_path)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(data.display().to_string(), file_sha256(&data.join("manifest.json"))?);
    inputs.insert(diffae_path.display().to_string(), diffae_digest.clone());
    inputs.insert(teacher_path.display().to_string(), teacher_digest.clone());
    Ok(LoadedPipeline { ds, diffae, teacher, diffae_digest, teacher_digest, inputs })
}

impl LoadedPipeline {
    /// Digest gate: the agent must have been distilled from exactly these
    /// checkpoint files.
    fn attach_agent(&mut self, path: &Path) -> Result<AgentModel> {
        let (agent, digest) = load_agent_checked(path)?;
        agent.verify_compat(Some(&self.teacher_digest), Some(&self.diffae_digest))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(agent)
    }
}

#[derive(Serialize)]
struct RecordReport {
    alpha: f64,
    agent_logits: Vec<f64>,
    agent_softmax: (f64, f64),
    teacher_logits: Vec<f64>,
    teacher_softmax: (f64, f64),
    identical_to_reconstruction: bool,
    max_abs_heatmap: f64,
    image_files: Vec<String>,
    heatmap_files: Vec<String>,
}

#[derive(Serialize)]
struct SliceMetrics {
    slice: usize,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct ExplainReport {
    query_id: String,
    query_label: usize,
    target_class: usize,
    xt_mode: XtMode,
    alpha_grid: Vec<f64>,
    reconstruction_vs_original: Vec<SliceMetrics>,
    records: Vec<RecordReport>,
}

fn record_report(
    rec: &crate::counterfactual::CounterfactualRecord,
    recon_images: &[crate::diffae::ImageSlice],
    image_files: Vec<String>,
    heatmap_files: Vec<String>,
) -> RecordReport {
    RecordReport {
        alpha: rec.alpha,
        agent_logits: rec.agent_logits.to_vec(),
        agent_softmax: softmax2(rec.agent_logits[0], rec.agent_logits[1]),
        teacher_logits: rec.teacher_logits.to_vec(),
        teacher_softmax: softmax2(rec.teacher_logits[0], rec.teacher_logits[1]),
        identical_to_reconstruction: rec.images == recon_images,
        max_abs_heatmap: rec
            .heatmaps
            .iter()
            .flat_map(|h| h.iter())
            .fold(0.0f64, |m, v| m.max(v.abs())),
        image_files,
        heatmap_files,
    }
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let mut pipe = load_pipeline(&cfg, &args.data, &args.diffae, &args.teacher)?;
    let agent = pipe.attach_agent(&args.agent)?;
    let target = args.grid.resolve_target(&cfg)?;
    let mode = args.grid.resolve_mode(&cfg)?;
    let grid = args.grid.resolve_grid(&agent, target, cfg.explain.alpha_scale)?;

    let test = pipe.ds.split(Split::Test);
    let sample = test.get(args.query_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "query index {} out of range: test split has {} samples",
            args.query_index,
            test.len()
        ))
    })?;
    let query = QuerySample::from_sample(sample);
    let sweep =
        alpha_sweep(&query, target, &grid, &pipe.diffae, &agent, &pipe.teacher, mode, cfg.explain.xt_seed)?;
    let recon = sweep.reconstruction();

    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    let mut outputs = Vec::new();

    for (j, slice) in query.slices.iter().enumerate() {
        let name = format!("original_s{j}.png");
        save_image_png(&out.join(&name), slice)?;
        outputs.push(name);
    }
    for (j, slice) in recon.images.iter().enumerate() {
        let name = format!("reconstruction_s{j}.png");
        save_image_png(&out.join(&name), slice)?;
        outputs.push(name);
    }

    let recon_metrics = query
        .slices
        .iter()
        .zip(&recon.images)
        .enumerate()
        .map(|(j, (orig, rec))| {
            let (psnr, ssim) = reconstruction_metrics(orig, rec)?;
            Ok(SliceMetrics { slice: j, psnr, ssim })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (idx, rec) in sweep.records.iter().enumerate() {
        let mut image_files = Vec::new();
        let mut heatmap_files = Vec::new();
        if rec.alpha != 0.0 {
            for (j, slice) in rec.images.iter().enumerate() {
                let name = format!("cf{idx:02}_alpha{:+.3e}_s{j}.png", rec.alpha);
                save_image_png(&out.join(&name), slice)?;
                image_files.push(name);
            }
            for (j, map) in rec.heatmaps.iter().enumerate() {
                let name = format!("heat{idx:02}_alpha{:+.3e}_s{j}.png", rec.alpha);
                save_heatmap_png(&out.join(&name), &smooth_heatmap(map, cfg.explain.heatmap_sigma))?;
                heatmap_files.push(name);
            }
        }
        outputs.extend(image_files.iter().cloned());
        outputs.extend(heatmap_files.iter().cloned());
        records.push(record_report(rec, &recon.images, image_files, heatmap_files));
    }

    let report = ExplainReport {
        query_id: sample.id.clone(),
        query_label: sample.label,
        target_class: target,
        xt_mode: mode,
        alpha_grid: sweep.alphas(),
        reconstruction_vs_original: recon_metrics,
        records,
    };
    atomic_write(&out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    outputs.push("report.json".into());
    let n_pngs = outputs.iter().filter(|o| o.ends_with(".png")).count();
    write_run_record(out, "explain", &cfg, pipe.inputs, outputs)?;
    println!(
        "explain: query {} (label {}), {} alphas, {} PNGs -> {}",
        report.query_id,
        report.query_label,
        report.alpha_grid.len(),
        n_pngs,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct QuerySweepReport {
    query_id: String,
    query_label: usize,
    records: Vec<RecordReport>,
}

#[derive(Serialize)]
struct SweepSummary {
    target_class: usize,
    xt_mode: XtMode,
    alpha_grid: Vec<f64>,
    n_queries: usize,
    validity: f64,
    monotone_fraction: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let mut pipe = load_pipeline(&cfg, &args.data, &args.diffae, &args.teacher)?;
    let agent = pipe.attach_agent(&args.agent)?;
    let target = args.grid.resolve_target(&cfg)?;
    let mode = args.grid.resolve_mode(&cfg)?;
    let grid = args.grid.resolve_grid(&agent, target, cfg.explain.alpha_scale)?;

    let test = pipe.ds.split(Split::Test);
    let n = args.num_queries.unwrap_or(test.len()).min(test.len());
    if n == 0 {
        return Err(Error::InvalidArgument("test split has no samples to sweep".into()));
    }

    let mut sweeps: Vec<SweepResult> = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    for sample in &test[..n] {
        let query = QuerySample::from_sample(sample);
        let sweep = alpha_sweep(
            &query,
            target,
            &grid,
            &pipe.diffae,
            &agent,
            &pipe.teacher,
            mode,
            cfg.explain.xt_seed,
        )?;
        let recon_images = sweep.reconstruction().images.clone();
        reports.push(QuerySweepReport {
            query_id: sample.id.clone(),
            query_label: sample.label,
            records: sweep
                .records
                .iter()
                .map(|r| record_report(r, &recon_images, Vec::new(), Vec::new()))
                .collect(),
        });
        sweeps.push(sweep);
    }
    let (validity, monotone_fraction) = manipulation_validity(&sweeps)?;
    let summary = SweepSummary {
        target_class: target,
        xt_mode: mode,
        alpha_grid: sweeps[0].alphas(),
        n_queries: n,
        validity,
        monotone_fraction,
    };

    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    atomic_write(&out.join("sweeps.json"), &serde_json::to_vec_pretty(&reports)?)?;
    atomic_write(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    write_run_record(
        out,
        "sweep",
        &cfg,
        pipe.inputs,
        vec!["sweeps.json".into(), "summary.json".into()],
    )?;
    println!(
        "sweep: {} queries x {} alphas, validity {:.3}, monotone fraction {:.3} -> {}",
        n,
        summary.alpha_grid.len(),
        validity,
        monotone_fraction,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let mut pipe = load_pipeline(&cfg, &args.data, &args.diffae, &args.teacher)?;
    let mut agents = Vec::new();
    for path in &args.agent {
        agents.push(pipe.attach_agent(path)?);
    }

    let test_queries = queries(&pipe.ds, Split::Test);
    let dataset_id = format!("{} (test split)", args.data.display());
    let mut reports: Vec<AlignmentReport> = Vec::new();
    for agent in &agents {
        reports.push(alignment_metrics(agent, &pipe.diffae, &pipe.teacher, &test_queries, &dataset_id)?);
    }
    let table = render_alignment_table(&reports);

    let test_samples = pipe.ds.split(Split::Test);
    let criteria = criteria_report(&test_samples, &pipe.diffae, &agents[0], &pipe.teacher, &cfg.eval)?;

    let out = &args.common.out;
    std::fs::create_dir_all(out)?;
    atomic_write(&out.join("alignment_table.txt"), table.as_bytes())?;
    atomic_write(&out.join("alignment.json"), &serde_json::to_vec_pretty(&reports)?)?;
    atomic_write(&out.join("criteria.json"), &serde_json::to_vec_pretty(&criteria)?)?;
    write_run_record(
        out,
        "evaluate",
        &cfg,
        pipe.inputs,
        vec!["alignment_table.txt".into(), "alignment.json".into(), "criteria.json".into()],
    )?;
    print!("{table}");
    println!(
        "criteria: PSNR {:.2} dB, SSIM {:.4}, validity {:.3}, monotone {:.3}, observability {} (baseline {:.4}) -> {}",
        criteria.mean_psnr,
        criteria.mean_ssim,
        criteria.validity,
        criteria.monotone_fraction,
        criteria
            .mean_observability
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        criteria.observability_baseline,
        out.display()
    );
    Ok(())
}

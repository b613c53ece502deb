//! flowsteer: monocular steering estimation pipeline.
//!
//! Five subcommands cover the workflow end to end: `synth` (dataset
//! generation), `extract-flow` (optical flow companions), `train` (one
//! cross-validation fold), `eval` (all folds), and `alp` (latent
//! perturbation analysis). Every command writes its artifacts under
//! `--out`, never mutates its inputs, and finishes by writing a
//! `manifest.json` recording configuration, input hashes, and outputs.
//!
//! Exit codes: 0 success, 2 bad flags or configuration, 3 missing or
//! malformed input data, 4 numeric failure. Errors print one
//! machine-readable line on stderr: `error: kind=<kind> exit=<code>
//! msg="..."`.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowsteer::analysis::{alp_report, five_number, format_alp_impact_csv, format_alp_mse_csv, mean_std, ALP_SIGMA};
use flowsteer::checkpoint;
use flowsteer::data::{
    channel_stats, compute_sequence_flow, load_dataset, prepare_dataset, synth_generate,
    CropSpec, PreparedDataset, SplitView, SynthConfig,
};
use flowsteer::error::{Error, Result};
use flowsteer::flow::{write_flo, FlowParams};
use flowsteer::params::ParamSet;
use flowsteer::plot::{box_plot_svg, line_plot_svg, BoxSpec, Series};
use flowsteer::training::{
    evaluate_errors, fold_split, format_curve_csv, make_folds, train, BatchSource, FoldPlan,
    TrainConfig,
};

use config::RunConfig;
use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(name = "flowsteer", version, about = "Steering angle estimation from monocular video")]
struct Cli {
    /// Config file with one key=value per line; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory all artifacts are written into.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    out: PathBuf,

    /// Master seed; overrides any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic driving dataset.
    Synth(SynthArgs),
    /// Compute dense optical flow companions for every sequence.
    ExtractFlow(ExtractArgs),
    /// Train one model on one cross-validation fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of every fold.
    Eval(EvalArgs),
    /// Perturb each latent dimension of a variational checkpoint.
    Alp(AlpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    sequences: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Raw frame width before preprocessing.
    #[arg(long, default_value_t = 240)]
    width: usize,
    #[arg(long, default_value_t = 160)]
    height: usize,
    /// Innovation scale of the curvature walk.
    #[arg(long)]
    ou_sigma: Option<f64>,
    /// Mean-reversion rate of the curvature walk.
    #[arg(long)]
    ou_theta: Option<f64>,
    /// Initial normalized curvature.
    #[arg(long)]
    kappa_start: Option<f64>,
    /// Forward advance per frame.
    #[arg(long)]
    speed: Option<f64>,
    /// Texture feature frequency multiplier.
    #[arg(long)]
    texture_density: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Dataset root to read frames from.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Pyramid levels.
    #[arg(long)]
    levels: Option<usize>,
    /// Per-level downscale factor.
    #[arg(long)]
    scale: Option<f64>,
    /// Aggregation window size.
    #[arg(long, value_name = "PX")]
    win: Option<usize>,
    /// Refinement iterations per level.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Fold whose test split is held out from this run.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    modality: Option<String>,
    /// Turn-weight exponent.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    wiring_seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to evaluate; its .cfg sidecar supplies the model config.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args)]
struct AlpArgs {
    /// Dataset root.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Variational checkpoint; its .cfg sidecar supplies the model config.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Fold whose test split is analyzed.
    #[arg(long, default_value_t = 1)]
    fold: usize,
    /// Latent perturbation scale.
    #[arg(long, default_value_t = ALP_SIGMA)]
    sigma: f64,
    #[arg(long)]
    seq_len: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = exit_info(&e);
            eprintln!("error: kind={kind} exit={code} msg={:?}", e.to_string());
            ExitCode::from(code)
        }
    }
}

fn exit_info(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Dim(_) => ("dim", 2),
        Error::Format(_) => ("format", 3),
        Error::Data(_) => ("data", 3),
        Error::Io(_) => ("io", 3),
        Error::Numeric(_) => ("numeric", 4),
    }
}

/// FLOWSTEER_THREADS is the only environment variable read; it bounds
/// worker threads for the fold loop in `eval`. Default 1.
fn thread_count() -> Result<usize> {
    match std::env::var("FLOWSTEER_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!(
                "FLOWSTEER_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(_) => Err(Error::config("FLOWSTEER_THREADS must be valid UTF-8")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = thread_count()?;
    fs::create_dir_all(&cli.out)?;
    let common = Common { config: cli.config, out: cli.out, seed: cli.seed };
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(&common, &args),
        Cmd::ExtractFlow(args) => cmd_extract_flow(&common, &args),
        Cmd::Train(args) => cmd_train(&common, &args),
        Cmd::Eval(args) => cmd_eval(&common, &args, threads),
        Cmd::Alp(args) => cmd_alp(&common, &args),
    }
}

struct Common {
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
}

/// Layered configuration: defaults, then the checkpoint sidecar (if any),
/// then the --config file, then flags; later layers win.
fn base_config(common: &Common, sidecar: Option<&Path>) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = sidecar {
        if p.exists() {
            rc.apply_file(p)?;
        }
    }
    if let Some(p) = &common.config {
        rc.apply_file(p)?;
    }
    Ok(rc)
}

fn apply_overrides(rc: &mut RunConfig, pairs: &[(&'static str, Option<String>)]) -> Result<()> {
    for (k, v) in pairs {
        if let Some(v) = v {
            rc.apply(k, v)?;
        }
    }
    Ok(())
}

fn finish_config(rc: &mut RunConfig, common: &Common) -> Result<()> {
    if let Some(s) = common.seed {
        rc.model.seed = s;
    }
    rc.model.validate()
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".cfg");
    PathBuf::from(os)
}

fn write_text(out: &Path, name: &str, body: &str, mb: &mut ManifestBuilder) -> Result<()> {
    fs::write(out.join(name), body)?;
    mb.output(name);
    Ok(())
}

fn cmd_synth(common: &Common, args: &SynthArgs) -> Result<()> {
    let mut rc = base_config(common, None)?;
    finish_config(&mut rc, common)?;

    let d = SynthConfig::default();
    let scfg = SynthConfig {
        seed: rc.model.seed,
        sequences: args.sequences,
        frames: args.frames,
        width: args.width,
        height: args.height,
        ou_theta: args.ou_theta.unwrap_or(d.ou_theta),
        ou_sigma: args.ou_sigma.unwrap_or(d.ou_sigma),
        kappa_start: args.kappa_start.unwrap_or(d.kappa_start),
        texture_density: args.texture_density.unwrap_or(d.texture_density),
        speed: args.speed.unwrap_or(d.speed),
    };
    scfg.validate()?;

    let mut cfg_pairs = rc.snapshot();
    for (k, v) in [
        ("sequences", scfg.sequences.to_string()),
        ("frames", scfg.frames.to_string()),
        ("width", scfg.width.to_string()),
        ("height", scfg.height.to_string()),
        ("ou_theta", scfg.ou_theta.to_string()),
        ("ou_sigma", scfg.ou_sigma.to_string()),
        ("kappa_start", scfg.kappa_start.to_string()),
        ("texture_density", scfg.texture_density.to_string()),
        ("speed", scfg.speed.to_string()),
    ] {
        cfg_pairs.push((k, v));
    }
    let mut mb = ManifestBuilder::new("synth", &cfg_pairs, scfg.seed);

    synth_generate(&scfg, &common.out)?;
    for i in 0..scfg.sequences {
        mb.output(&format!("seq_{i:03}"));
    }
    mb.finish(&common.out)?;
    println!(
        "wrote {} sequences x {} frames to {}",
        scfg.sequences,
        scfg.frames,
        common.out.display()
    );
    Ok(())
}

fn cmd_extract_flow(common: &Common, args: &ExtractArgs) -> Result<()> {
    let mut rc = base_config(common, None)?;
    finish_config(&mut rc, common)?;

    let mut fp = FlowParams::default();
    if let Some(v) = args.levels {
        fp.levels = v;
    }
    if let Some(v) = args.scale {
        fp.scale = v;
    }
    if let Some(v) = args.win {
        fp.win_size = v;
    }
    if let Some(v) = args.iters {
        fp.iters = v;
    }
    fp.validate()?;

    let mut cfg_pairs = rc.snapshot();
    for (k, v) in [
        ("levels", fp.levels.to_string()),
        ("scale", fp.scale.to_string()),
        ("win_size", fp.win_size.to_string()),
        ("win_sigma", fp.win_sigma.to_string()),
        ("poly_n", fp.poly_n.to_string()),
        ("poly_sigma", fp.poly_sigma.to_string()),
        ("iters", fp.iters.to_string()),
    ] {
        cfg_pairs.push((k, v));
    }
    let mut mb = ManifestBuilder::new("extract-flow", &cfg_pairs, rc.model.seed);
    mb.input(&args.input)?;

    let seqs = load_dataset(&args.input)?;
    let crop = CropSpec::default();
    let ds: PreparedDataset<f32> =
        prepare_dataset(&seqs, flowsteer::model::Modality::None, &crop, &fp)?;
    for seq in &ds.seqs {
        let flows = compute_sequence_flow(&seq.rgb, &fp)?;
        let dir = common.out.join(&seq.name).join("flow");
        fs::create_dir_all(&dir)?;
        for (t, field) in flows.iter().enumerate() {
            write_flo(&dir.join(format!("frame_{t:04}.flo")), field)?;
        }
        mb.output(&format!("{}/flow", seq.name));
    }
    let n = ds.seqs.len();
    mb.finish(&common.out)?;
    println!("wrote flow fields for {} sequences to {}", n, common.out.display());
    Ok(())
}

fn cmd_train(common: &Common, args: &TrainArgs) -> Result<()> {
    let mut rc = base_config(common, None)?;
    apply_overrides(
        &mut rc,
        &[
            ("encoder", args.encoder.clone()),
            ("head", args.head.clone()),
            ("fusion", args.fusion.clone()),
            ("modality", args.modality.clone()),
            ("alpha", args.alpha.map(|v| v.to_string())),
            ("wiring_seed", args.wiring_seed.map(|v| v.to_string())),
            ("folds", args.folds.map(|v| v.to_string())),
            ("steps", args.steps.map(|v| v.to_string())),
            ("batch", args.batch.map(|v| v.to_string())),
            ("seq_len", args.seq_len.map(|v| v.to_string())),
            ("lr", args.lr.map(|v| v.to_string())),
        ],
    )?;
    finish_config(&mut rc, common)?;

    let mut mb = ManifestBuilder::new("train", &rc.snapshot(), rc.model.seed);
    mb.input(&args.data)?;
    if let Some(p) = &common.config {
        mb.input(p)?;
    }

    let seqs = load_dataset(&args.data)?;
    let ds: PreparedDataset<f32> =
        prepare_dataset(&seqs, rc.model.modality, &CropSpec::default(), &FlowParams::default())?;
    let plan = make_folds(ds.seqs.len(), rc.folds)?;
    let split = fold_split(&plan, args.fold)?;
    let stats = channel_stats(&ds, &split.train)?;
    let train_view = SplitView::new(&ds, &split.train, rc.seq_len, 1, stats)?;
    let val_view = SplitView::new(&ds, &split.val, rc.seq_len, 1, stats)?;

    let tcfg = TrainConfig {
        model: rc.model.clone(),
        steps: rc.steps,
        batch: rc.batch,
        seq_len: rc.seq_len,
        lr: rc.lr,
        ..TrainConfig::default()
    };
    let result = train(&tcfg, &train_view, &val_view, rc.model.seed)?;

    checkpoint::save(&result.params, &common.out.join("checkpoint.mfs"))?;
    mb.output("checkpoint.mfs");
    write_text(&common.out, "checkpoint.mfs.cfg", &rc.render(), &mut mb)?;
    write_text(&common.out, "curve.csv", &format_curve_csv(&result.curve), &mut mb)?;

    let steps: Vec<(f64, f64)> =
        result.curve.iter().map(|r| (r.step as f64, r.train_mse)).collect();
    let vals: Vec<(f64, f64)> = result.curve.iter().map(|r| (r.step as f64, r.val_mse)).collect();
    let svg = line_plot_svg(
        "Training curve",
        "step",
        "MSE",
        &[Series::new("train", steps), Series::new("validation", vals)],
    )?;
    write_text(&common.out, "curve.svg", &svg, &mut mb)?;
    mb.finish(&common.out)?;

    if let Some(last) = result.curve.last() {
        println!(
            "fold {}: step {} train mse {:.6} val mse {:.6}",
            args.fold, last.step, last.train_mse, last.val_mse
        );
    }
    println!("wrote checkpoint.mfs to {}", common.out.display());
    Ok(())
}

fn eval_one_fold(
    rc: &RunConfig,
    params: &ParamSet<f32>,
    ds: &PreparedDataset<f32>,
    plan: &FoldPlan,
    k: usize,
) -> Result<(f64, f64)> {
    let split = fold_split(plan, k)?;
    let stats = channel_stats(ds, &split.train)?;
    // Test windows tile each sequence without overlap.
    let view = SplitView::new(ds, &split.test, rc.seq_len, rc.seq_len, stats)?;
    let ids: Vec<usize> = (0..view.num_windows()).collect();
    evaluate_errors(&rc.model, params, &view, &ids, 4)
}

fn cmd_eval(common: &Common, args: &EvalArgs, threads: usize) -> Result<()> {
    let sidecar = sidecar_path(&args.checkpoint);
    let mut rc = base_config(common, Some(&sidecar))?;
    apply_overrides(
        &mut rc,
        &[
            ("folds", args.folds.map(|v| v.to_string())),
            ("seq_len", args.seq_len.map(|v| v.to_string())),
        ],
    )?;
    finish_config(&mut rc, common)?;

    let mut mb = ManifestBuilder::new("eval", &rc.snapshot(), rc.model.seed);
    mb.input(&args.data)?;
    mb.input(&args.checkpoint)?;
    if sidecar.exists() {
        mb.input(&sidecar)?;
    }

    let params: ParamSet<f32> = checkpoint::load(&args.checkpoint)?;
    let seqs = load_dataset(&args.data)?;
    let ds: PreparedDataset<f32> =
        prepare_dataset(&seqs, rc.model.modality, &CropSpec::default(), &FlowParams::default())?;
    let plan = make_folds(ds.seqs.len(), rc.folds)?;

    let mut slots: Vec<Option<Result<(f64, f64)>>> = (0..rc.folds).map(|_| None).collect();
    let workers = threads.min(rc.folds).max(1);
    let chunk = rc.folds.div_ceil(workers);
    std::thread::scope(|scope| {
        for (c, block) in slots.chunks_mut(chunk).enumerate() {
            let (rc, params, ds, plan) = (&rc, &params, &ds, &plan);
            scope.spawn(move || {
                for (i, slot) in block.iter_mut().enumerate() {
                    *slot = Some(eval_one_fold(rc, params, ds, plan, c * chunk + i));
                }
            });
        }
    });
    let mut mses = Vec::with_capacity(rc.folds);
    let mut maes = Vec::with_capacity(rc.folds);
    for slot in slots {
        let (mse, mae) = slot.expect("every fold slot is filled")?;
        mses.push(mse);
        maes.push(mae);
    }

    let (mse_mean, mse_std) = mean_std(&mses)?;
    let (mae_mean, mae_std) = mean_std(&maes)?;
    let mut csv = String::new();
    for i in 1..=rc.folds {
        csv.push_str(&format!("fold_{i},"));
    }
    csv.push_str("mse_mean,mse_std,mae_mean,mae_std\n");
    for v in &mses {
        csv.push_str(&format!("{v},"));
    }
    csv.push_str(&format!("{mse_mean},{mse_std},{mae_mean},{mae_std}\n"));
    write_text(&common.out, "metrics.csv", &csv, &mut mb)?;

    let svg = line_plot_svg(
        "Test error by fold",
        "fold",
        "error",
        &[Series::from_values("mse", &mses), Series::from_values("mae", &maes)],
    )?;
    write_text(&common.out, "folds.svg", &svg, &mut mb)?;
    mb.finish(&common.out)?;

    println!(
        "{} folds: mse {:.6} (std {:.6}), mae {:.6} (std {:.6})",
        rc.folds, mse_mean, mse_std, mae_mean, mae_std
    );
    println!("wrote metrics.csv to {}", common.out.display());
    Ok(())
}

fn cmd_alp(common: &Common, args: &AlpArgs) -> Result<()> {
    let sidecar = sidecar_path(&args.checkpoint);
    let mut rc = base_config(common, Some(&sidecar))?;
    apply_overrides(&mut rc, &[("seq_len", args.seq_len.map(|v| v.to_string()))])?;
    finish_config(&mut rc, common)?;

    let mut cfg_pairs = rc.snapshot();
    cfg_pairs.push(("sigma", args.sigma.to_string()));
    cfg_pairs.push(("fold", args.fold.to_string()));
    let mut mb = ManifestBuilder::new("alp", &cfg_pairs, rc.model.seed);
    mb.input(&args.data)?;
    mb.input(&args.checkpoint)?;
    if sidecar.exists() {
        mb.input(&sidecar)?;
    }

    let params: ParamSet<f32> = checkpoint::load(&args.checkpoint)?;
    let seqs = load_dataset(&args.data)?;
    let ds: PreparedDataset<f32> =
        prepare_dataset(&seqs, rc.model.modality, &CropSpec::default(), &FlowParams::default())?;
    let plan = make_folds(ds.seqs.len(), rc.folds)?;
    let split = fold_split(&plan, args.fold)?;
    let stats = channel_stats(&ds, &split.train)?;
    let view = SplitView::new(&ds, &split.test, rc.seq_len, rc.seq_len, stats)?;

    let report = alp_report(&rc.model, &params, &view, args.sigma)?;
    write_text(&common.out, "alp_mse.csv", &format_alp_mse_csv(&report), &mut mb)?;
    write_text(&common.out, "alp_impact.csv", &format_alp_impact_csv(&report), &mut mb)?;

    let dims = report.rows.len();
    let mut all_boxes = Vec::with_capacity(dims);
    let mut top_boxes = Vec::with_capacity(dims);
    for j in 0..dims {
        all_boxes.push(BoxSpec { label: j.to_string(), stats: five_number(&report.impacts[j])? });
        top_boxes.push(BoxSpec { label: j.to_string(), stats: five_number(&report.top_impacts(j))? });
    }
    let svg = box_plot_svg("Latent impact, all samples", "latent dimension", "impact", &all_boxes)?;
    write_text(&common.out, "alp_impact.svg", &svg, &mut mb)?;
    let svg =
        box_plot_svg("Latent impact, top error decile", "latent dimension", "impact", &top_boxes)?;
    write_text(&common.out, "alp_impact_top.svg", &svg, &mut mb)?;

    let plus: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.dim as f64, r.mse_plus)).collect();
    let minus: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.dim as f64, r.mse_minus)).collect();
    let base: Vec<(f64, f64)> =
        report.rows.iter().map(|r| (r.dim as f64, report.mse_unperturbed)).collect();
    let svg = line_plot_svg(
        "Perturbed MSE by latent dimension",
        "latent dimension",
        "MSE",
        &[
            Series::new("+sigma", plus),
            Series::new("-sigma", minus),
            Series::new("unperturbed", base),
        ],
    )?;
    write_text(&common.out, "alp_mse.svg", &svg, &mut mb)?;
    mb.finish(&common.out)?;

    let mut top_dim = 0;
    let mut top_mean = f64::NEG_INFINITY;
    for (j, imp) in report.impacts.iter().enumerate() {
        let (m, _) = mean_std(imp)?;
        if m > top_mean {
            top_mean = m;
            top_dim = j;
        }
    }
    println!(
        "sigma {}: baseline mse {:.6}, highest mean impact at dimension {} ({:.6})",
        report.sigma, report.mse_unperturbed, top_dim, top_mean
    );
    println!("wrote alp_mse.csv to {}", common.out.display());
    Ok(())
}

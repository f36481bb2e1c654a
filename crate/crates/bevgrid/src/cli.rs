//! Command-line driver: dataset generation, training, evaluation,
//! ablation grids, extrinsics-noise sweeps, and projection diagnostics.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
//! Every failure prints a single `error: <reason>` line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{digest_hex, RunConfig};
use crate::encoder::{encode_frame, AdamWState, BevState, EncoderConfig, FrameHits, ModelParams};
use crate::geometry::{
    bev_cell_to_world, hit_views, perturb_extrinsics, AnchorHeights, BevGridSpec, CameraRig,
};
use crate::io::{
    load_checkpoint, load_dataset, load_into, read_calib, save_checkpoint, save_dataset,
    write_pgm, write_ppm, write_raw_tensor, Checkpoint,
};
use crate::learner::{evaluate, train, EvalReport, LOG_HEADER};
use crate::scene::{build_sequence, SequenceData};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bevgrid",
    version,
    about = "Spatiotemporal BEV encoder: synthetic data, training, evaluation"
)]
struct Cli {
    /// Worker threads for per-view work (falls back to BEVGRID_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-camera dataset to a directory.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train one variant grid along an ablation axis and tabulate metrics.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint under increasing camera-extrinsics noise.
    NoiseSweep(NoiseSweepArgs),
    /// Project one BEV cell's pillar into every camera and report the hits.
    ProjectDebug(ProjectDebugArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences to render.
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    /// Override frames per sequence.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, log, and effective config.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint; step numbering continues.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override frames per training sample (1 = static single-frame path).
    #[arg(long)]
    frames_per_sample: Option<usize>,
    /// Override total optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config JSON; defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Carry BEV history across each full sequence instead of evaluating
    /// every frame statically.
    #[arg(long)]
    chronological: bool,
    /// Write the report CSV here (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump each sequence's final BEV feature map into this directory.
    #[arg(long)]
    dump_bev: Option<PathBuf>,
    /// Dump format: "pgm" writes one min-max normalized image per channel,
    /// "raw" writes rank, dims, and little-endian f64 data per sequence.
    #[arg(long, default_value = "pgm")]
    dump_format: String,
}

#[derive(Args)]
struct AblateArgs {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for metrics; training data when omitted.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Which knob to sweep: frames | A | R | B | sca_mode.
    #[arg(long)]
    axis: String,
    /// Seeds per variant; every variant sees the same seed list.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Override training steps per variant.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct NoiseSweepArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config JSON; defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Highest noise level; levels 0..=N are swept.
    #[arg(long, default_value_t = 4)]
    levels: i32,
    /// Perturbation draws per level.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Carry BEV history across sequences during evaluation.
    #[arg(long)]
    chronological: bool,
    /// Write the sweep CSV here (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectDebugArgs {
    /// Calibration file in the dataset's calib.json format.
    #[arg(long)]
    calib: PathBuf,
    /// BEV grid as "H,W,resolution".
    #[arg(long)]
    grid: String,
    /// Query cell as "x,y" (fractional allowed).
    #[arg(long)]
    cell: String,
    /// Pillar anchor heights in meters, comma separated.
    #[arg(long, default_value = "0.0,0.8,1.6")]
    anchors: String,
    /// Write one overlay PPM per hit view into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("bad usage");
            let line = line.strip_prefix("error: ").unwrap_or(line);
            eprintln!("error: {line}");
            return 1;
        }
    };
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("BEVGRID_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1)
        .max(1);
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a, threads),
        Command::Eval(a) => cmd_eval(&a, threads),
        Command::Ablate(a) => cmd_ablate(&a, threads),
        Command::NoiseSweep(a) => cmd_noise_sweep(&a, threads),
        Command::ProjectDebug(a) => cmd_project_debug(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => 1,
                _ => 2,
            }
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("{}: {}", p.display(), e)))?;
            RunConfig::from_json(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {}", p.display(), e)))
        }
    }
}

/// Config for checkpoint consumers: an explicit --config wins, then a
/// config.json beside the checkpoint, then defaults.
fn config_for_checkpoint(explicit: Option<&PathBuf>, checkpoint: &Path) -> Result<RunConfig> {
    if explicit.is_some() {
        return load_config(explicit);
    }
    let sibling = checkpoint.parent().map(|d| d.join("config.json"));
    match sibling {
        Some(p) if p.is_file() => load_config(Some(&p)),
        _ => Ok(RunConfig::default()),
    }
}

fn load_params(
    ck: &Checkpoint,
    cfg: &RunConfig,
) -> Result<(ModelParams, crate::encoder::EncoderConfig)> {
    let enc = cfg.encoder_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(&enc, &mut rng)?;
    load_into(ck, &mut params, None, &cfg.digest())?;
    Ok((params, enc))
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, text)?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    if let Some(f) = args.frames {
        cfg.scene.n_frames = f;
    }
    if args.sequences == 0 {
        return Err(Error::InvalidConfig("--sequences must be >= 1".into()));
    }
    let rig = cfg.rig()?;
    let grid = cfg.encoder_config()?.grid;
    let mut seqs = Vec::with_capacity(args.sequences);
    for i in 0..args.sequences {
        let spec = cfg.scene_spec(i as u64);
        seqs.push(build_sequence(&spec, &rig, &grid)?);
    }
    save_dataset(&args.out, &seqs, &rig)?;
    fs::write(args.out.join("config.json"), cfg.to_json())?;
    let n_frames: usize = seqs.iter().map(|s| s.frames.len()).sum();
    println!(
        "wrote {} sequences, {} frames, {} views each to {}",
        seqs.len(),
        n_frames,
        rig.n_views(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, threads: usize) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(f) = args.frames_per_sample {
        cfg.train.frames_per_sample = f;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let enc = cfg.encoder_config()?;
    let tcfg = cfg.train_config()?;
    let digest = cfg.digest();
    let (data, rig) = load_dataset(&args.data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = ModelParams::init(&enc, &mut rng)?;
    let mut opt = AdamWState::new(&params);
    let mut start_step = 0usize;
    if let Some(ck_path) = &args.resume {
        let ck = load_checkpoint(ck_path)?;
        load_into(&ck, &mut params, Some(&mut opt), &digest)?;
        start_step = opt.step as usize;
    }
    if start_step >= tcfg.steps {
        println!(
            "checkpoint already at step {}, nothing to do (steps = {})",
            start_step, tcfg.steps
        );
        return Ok(());
    }

    let log = train(
        &data, &rig, &mut params, &mut opt, &enc, &tcfg, start_step, threads,
    )?;

    fs::create_dir_all(&args.out)?;
    let ck_path = args.out.join("model.ckpt");
    save_checkpoint(&ck_path, &params, Some(&opt), &digest)?;
    fs::write(args.out.join("config.json"), cfg.to_json())?;

    let log_path = args.out.join("train_log.csv");
    let mut csv = String::new();
    let append = start_step > 0 && log_path.is_file();
    if !append {
        csv.push_str(LOG_HEADER);
        csv.push('\n');
    }
    for row in &log {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    if append {
        let mut existing = fs::read_to_string(&log_path)?;
        existing.push_str(&csv);
        fs::write(&log_path, existing)?;
    } else {
        fs::write(&log_path, csv)?;
    }

    let last = log.last().expect("at least one step ran");
    println!(
        "trained steps {}..{} | loss {:.4} | seg IoU {:.4} | checkpoint {} (digest {})",
        start_step,
        tcfg.steps,
        last.loss,
        last.seg_iou,
        ck_path.display(),
        &digest_hex(&digest)[..12]
    );
    Ok(())
}

fn report_csv(report: &EvalReport) -> String {
    let mut csv = String::from("metric,detail,value\n");
    csv.push_str(&format!("seg_iou,car,{:.6}\n", report.seg_iou));
    csv.push_str(&format!("recall,2m,{:.6}\n", report.recall2m));
    csv.push_str(&format!("vel_mae,matched,{:.6}\n", report.vel_mae));
    for b in &report.buckets {
        csv.push_str(&format!(
            "recall_vis,{:.1}-{:.1},{:.6}\n",
            b.lo, b.hi, b.recall
        ));
    }
    for b in &report.buckets {
        csv.push_str(&format!("n_gts_vis,{:.1}-{:.1},{}\n", b.lo, b.hi, b.n_gts));
    }
    csv.push_str(&format!("n_frames,,{}\n", report.n_frames));
    csv.push_str(&format!("n_gts,,{}\n", report.n_gts));
    csv
}

fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<()> {
    let cfg = config_for_checkpoint(args.config.as_ref(), &args.checkpoint)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let (params, enc) = load_params(&ck, &cfg)?;
    let (data, rig) = load_dataset(&args.data)?;
    let report = evaluate(&data, &rig, &params, &enc, args.chronological, threads)?;
    if let Some(dir) = &args.dump_bev {
        dump_bev_features(
            dir,
            &args.dump_format,
            &data,
            &rig,
            &params,
            &enc,
            args.chronological,
            threads,
        )?;
    }
    println!(
        "{} eval: {} frames, {} gts | seg IoU {:.4} | recall@2m {:.4} | vel MAE {:.4}",
        if args.chronological { "chronological" } else { "static" },
        report.n_frames,
        report.n_gts,
        report.seg_iou,
        report.recall2m,
        report.vel_mae
    );
    write_or_print(args.out.as_ref(), &report_csv(&report))
}

/// Re-encode each sequence and write its final frame's BEV features,
/// either as one min-max normalized PGM per channel or as a raw tensor.
#[allow(clippy::too_many_arguments)]
fn dump_bev_features(
    dir: &Path,
    format: &str,
    data: &[SequenceData],
    rig: &CameraRig,
    params: &ModelParams,
    enc: &EncoderConfig,
    chronological: bool,
    threads: usize,
) -> Result<()> {
    if format != "pgm" && format != "raw" {
        return Err(Error::InvalidConfig(format!(
            "unknown dump format '{}'; use pgm or raw",
            format
        )));
    }
    fs::create_dir_all(dir)?;
    let hits = FrameHits::compute(&enc.grid, rig, &enc.anchors, enc.feat_stride);
    for (si, seq) in data.iter().enumerate() {
        let mut prev: Option<BevState> = None;
        for f in &seq.frames {
            prev = Some(encode_frame(
                &f.images,
                if chronological { prev.as_ref() } else { None },
                f.pose,
                f.t,
                &hits,
                params,
                enc,
                threads,
            )?);
        }
        let Some(state) = prev else { continue };
        let bev = &state.features;
        if format == "raw" {
            write_raw_tensor(
                &dir.join(format!("bev_seq{:03}.tensor", si)),
                &[bev.h as u64, bev.w as u64, bev.c as u64],
                bev.data(),
            )?;
            continue;
        }
        for ch in 0..bev.c {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in 0..bev.h {
                for x in 0..bev.w {
                    let v = bev.get(y, x, ch);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut px = Vec::with_capacity(bev.h * bev.w);
            for y in 0..bev.h {
                for x in 0..bev.w {
                    px.push((255.0 * (bev.get(y, x, ch) - lo) / span).round() as u8);
                }
            }
            write_pgm(&dir.join(format!("bev_seq{:03}_ch{:02}.pgm", si, ch)), bev.w, bev.h, &px)?;
        }
    }
    Ok(())
}

type Variant = (String, Box<dyn Fn(&mut RunConfig)>);

fn ablation_variants(axis: &str) -> Result<Vec<Variant>> {
    let mut v: Vec<Variant> = Vec::new();
    match axis {
        "frames" => {
            for n in 1..=5usize {
                v.push((n.to_string(), Box::new(move |c| c.train.frames_per_sample = n)));
            }
        }
        "A" => {
            for flag in [true, false] {
                let label = if flag { "on" } else { "off" };
                v.push((label.into(), Box::new(move |c| c.train.align_history = flag)));
            }
        }
        "R" => {
            for flag in [true, false] {
                let label = if flag { "on" } else { "off" };
                v.push((
                    label.into(),
                    Box::new(move |c| c.train.random_frame_sampling = flag),
                ));
            }
        }
        "B" => {
            for flag in [true, false] {
                let label = if flag { "on" } else { "off" };
                v.push((
                    label.into(),
                    Box::new(move |c| c.train.tsa_concat_offsets = flag),
                ));
            }
        }
        "sca_mode" => {
            for mode in ["local", "points", "global"] {
                v.push((mode.into(), Box::new(move |c| c.encoder.sca_mode = mode.into())));
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown ablation axis '{}' (expected frames|A|R|B|sca_mode)",
                other
            )))
        }
    }
    Ok(v)
}

pub const ABLATE_HEADER: &str = "axis,variant,seed,seg_iou,recall2m,vel_mae";

fn cmd_ablate(args: &AblateArgs, threads: usize) -> Result<()> {
    let base = load_config(args.config.as_ref())?;
    let variants = ablation_variants(&args.axis)?;
    if args.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be >= 1".into()));
    }
    let (data, rig) = load_dataset(&args.data)?;
    let eval_set: Option<(Vec<SequenceData>, CameraRig)> = match &args.eval_data {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let mut csv = String::from(ABLATE_HEADER);
    csv.push('\n');
    for seed in 0..args.seeds {
        for (label, mutate) in &variants {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            cfg.train.seed = seed;
            if let Some(steps) = args.steps {
                cfg.train.steps = steps;
            }
            let enc = cfg.encoder_config()?;
            let tcfg = cfg.train_config()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ModelParams::init(&enc, &mut rng)?;
            let mut opt = AdamWState::new(&params);
            train(&data, &rig, &mut params, &mut opt, &enc, &tcfg, 0, threads)?;
            // single-frame variants never saw history, so they are scored
            // statically; temporal variants are scored with carried state
            let chronological = tcfg.frames_per_sample > 1;
            let (edata, erig) = match &eval_set {
                Some((d, r)) => (d.as_slice(), r),
                None => (data.as_slice(), &rig),
            };
            let rep = evaluate(edata, erig, &params, &enc, chronological, threads)?;
            let row = format!(
                "{},{},{},{:.6},{:.6},{:.6}",
                args.axis, label, seed, rep.seg_iou, rep.recall2m, rep.vel_mae
            );
            println!("{row}");
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub const NOISE_HEADER: &str = "level,seed,seg_iou,recall2m,vel_mae";

fn cmd_noise_sweep(args: &NoiseSweepArgs, threads: usize) -> Result<()> {
    if args.levels < 0 {
        return Err(Error::InvalidConfig("--levels must be >= 0".into()));
    }
    if args.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be >= 1".into()));
    }
    let cfg = config_for_checkpoint(args.config.as_ref(), &args.checkpoint)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let (params, enc) = load_params(&ck, &cfg)?;
    let (data, rig) = load_dataset(&args.data)?;
    let mut csv = String::from(NOISE_HEADER);
    csv.push('\n');
    for level in 0..=args.levels {
        let mut iou = Vec::with_capacity(args.seeds as usize);
        for seed in 0..args.seeds {
            let noisy = perturb_extrinsics(&rig, level, seed)?;
            let rep = evaluate(&data, &noisy, &params, &enc, args.chronological, threads)?;
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                level, seed, rep.seg_iou, rep.recall2m, rep.vel_mae
            ));
            iou.push(rep.seg_iou);
        }
        let mean = iou.iter().sum::<f64>() / iou.len() as f64;
        let lo = iou.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = iou.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "level {}: seg IoU mean {:.4} (min {:.4}, max {:.4}) over {} seeds",
            level,
            mean,
            lo,
            hi,
            iou.len()
        );
    }
    write_or_print(args.out.as_ref(), &csv)
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad {} component '{}'", what, p)))
        })
        .collect()
}

fn parse_grid_flag(s: &str) -> Result<BevGridSpec> {
    let parts = parse_f64_list(s, "--grid")?;
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(
            "--grid wants \"H,W,resolution\"".into(),
        ));
    }
    if parts[0].fract() != 0.0 || parts[1].fract() != 0.0 || parts[0] < 1.0 || parts[1] < 1.0 {
        return Err(Error::InvalidConfig(
            "--grid H and W must be positive integers".into(),
        ));
    }
    BevGridSpec::new(parts[0] as usize, parts[1] as usize, parts[2])
}

fn parse_cell_flag(s: &str) -> Result<(f64, f64)> {
    let parts = parse_f64_list(s, "--cell")?;
    if parts.len() != 2 {
        return Err(Error::InvalidConfig("--cell wants \"x,y\"".into()));
    }
    Ok((parts[0], parts[1]))
}

fn overlay_image(width: usize, height: usize, pixels: &[(f64, f64)]) -> FeatureMap {
    let mut img = FeatureMap::zeros(height, width, 3);
    for v in img.data_mut() {
        *v = 0.15;
    }
    for &(u, vpx) in pixels {
        let x = u.round() as isize;
        let y = vpx.round() as isize;
        for d in -2isize..=2 {
            for &(px, py) in &[(x + d, y), (x, y + d)] {
                if px >= 0 && (px as usize) < width && py >= 0 && (py as usize) < height {
                    img.set(py as usize, px as usize, 0, 1.0);
                    img.set(py as usize, px as usize, 1, 0.2);
                    img.set(py as usize, px as usize, 2, 0.2);
                }
            }
        }
    }
    img
}

fn cmd_project_debug(args: &ProjectDebugArgs) -> Result<()> {
    let rig = read_calib(&args.calib)?;
    let grid = parse_grid_flag(&args.grid)?;
    let cell = parse_cell_flag(&args.cell)?;
    let anchors = AnchorHeights::new(parse_f64_list(&args.anchors, "--anchors")?)?;
    let world = bev_cell_to_world(cell, &grid);
    println!(
        "cell ({}, {}) -> world ({:.3}, {:.3}) m, anchors {:?}",
        cell.0, cell.1, world.0, world.1, anchors.z_levels
    );
    let records = hit_views(cell, &grid, &rig, &anchors);
    if records.is_empty() {
        println!("no hits");
        return Ok(());
    }
    for r in &records {
        println!(
            "view {}: anchor {} -> pixel ({:.3}, {:.3}) depth {:.3}",
            r.view_id, r.ref_index, r.pixel.0, r.pixel.1, r.depth
        );
    }
    let mut ids: Vec<usize> = records.iter().map(|r| r.view_id).collect();
    ids.dedup();
    println!("hit views: {:?}", ids);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        for &id in &ids {
            let view = rig
                .views
                .iter()
                .find(|v| v.id == id)
                .expect("hit view comes from the rig");
            let pixels: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.view_id == id)
                .map(|r| r.pixel)
                .collect();
            let img = overlay_image(view.width, view.height, &pixels);
            let path = dir.join(format!("overlay_view_{}.ppm", id));
            write_ppm(&path, &img)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

//! The `recyclegan` executable: dataset generation, training, inference,
//! evaluation and self-verification.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::{
    generate_synthetic_domains, load_stream, read_manifest, save_stream, write_manifest, Domain, Manifest,
    ManifestEntry, Scene, VideoStream, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{comparison_table, evaluate, infer_framewise, infer_smoothed, train_oracle, EvalReport};
use crate::train::{fit, load_checkpoint, save_checkpoint, FitSinks, TrainState};
use crate::verify::{run_verification, VerifyOptions};

pub use config::{RunConfig, DATA_KEYS, EVAL_KEYS};

pub const LOSS_CSV: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.rgan";
pub const RUN_CONFIG: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "recyclegan", version, about = "Unpaired video retargeting on synthetic frame streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Settings file with one key=value per line
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable. Takes precedence over --config
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the two synthetic domains and their manifest
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Frames per stream
        #[arg(long)]
        frames: Option<usize>,
        /// Seed of the X stream (Y uses seed + 1)
        #[arg(long)]
        seed: Option<u64>,
        /// images or labels
        #[arg(long)]
        task: Option<String>,
        /// Replace an existing dataset in --out
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train both generators, discriminators and predictors
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Run directory for the loss CSV and checkpoints
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// cycle, recycle or combined
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint; its stored settings are used
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many total steps
        #[arg(long)]
        stop_at: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Translate one stream with a trained generator
    Infer {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Stream directory (…/x/<id> or …/y/<id>)
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Blend each output with the temporal predictor's guess
        #[arg(long)]
        smooth: bool,
    },
    /// Score one checkpoint, or compare several, on a dataset
    Eval {
        #[arg(long = "checkpoint", value_name = "CKPT", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Directory for report.txt and metrics.csv
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the 64-bit verification suite
    Verify {
        /// Perturb the analytic gradient of this check (suite self-test)
        #[arg(long, value_name = "CHECK")]
        corrupt: Option<String>,
        /// Only run checks whose name starts with this prefix
        #[arg(long)]
        filter: Option<String>,
    },
}

fn overrides(cfg: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Vec<(String, String)> {
    let mut v = cfg.set.clone();
    v.extend(flags.iter().filter_map(|(k, val)| val.clone().map(|val| (k.to_string(), val))));
    v
}

/// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
/// failure.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData {
            out: dir,
            frames,
            seed,
            task,
            force,
            cfg,
        } => {
            let ov = overrides(
                &cfg,
                &[
                    ("frames", frames.map(|v| v.to_string())),
                    ("data_seed", seed.map(|v| v.to_string())),
                    ("task", task),
                ],
            );
            let rc = RunConfig::resolve(cfg.config.as_deref(), &ov)?;
            cmd_gen_data(&rc, &dir, force, out)
        }
        Command::Train {
            data,
            out: dir,
            loss,
            steps,
            seed,
            resume,
            stop_at,
            cfg,
        } => {
            let ov = overrides(
                &cfg,
                &[
                    ("loss", loss),
                    ("steps", steps.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                ],
            );
            let rc = RunConfig::resolve(cfg.config.as_deref(), &ov)?;
            cmd_train(&rc, &data, &dir, resume.as_deref(), stop_at, out)
        }
        Command::Infer {
            checkpoint,
            input,
            out: dir,
            smooth,
        } => cmd_infer(&checkpoint, &input, &dir, smooth, out),
        Command::Eval {
            checkpoints,
            data,
            out: dir,
            cfg,
        } => {
            let rc = RunConfig::resolve(cfg.config.as_deref(), &cfg.set)?;
            cmd_eval(&rc, &checkpoints, &data, dir.as_deref(), out).map(|_| ())
        }
        Command::Verify { corrupt, filter } => cmd_verify(&VerifyOptions { corrupt, filter }, out),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("standard output", e)
}

fn is_non_empty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

fn class_fractions(stream: &VideoStream<f32>) -> Vec<f64> {
    let mut counts = vec![0u64; stream.n_classes().max(1)];
    let mut total = 0u64;
    for l in stream.labels().unwrap_or(&[]) {
        for &c in &l.ids {
            if let Some(slot) = counts.get_mut(c as usize) {
                *slot += 1;
            }
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

pub fn cmd_gen_data(cfg: &RunConfig, dir: &Path, force: bool, out: &mut dyn Write) -> Result<()> {
    if is_non_empty(dir)? {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to replace the dataset",
                dir.display()
            )));
        }
        for d in [Domain::X, Domain::Y] {
            let sub = dir.join(d.tag());
            if sub.exists() {
                fs::remove_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            }
        }
        let m = dir.join(MANIFEST_FILE);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
    }
    let d = generate_synthetic_domains(&cfg.scene, cfg.data_seed, cfg.data_seed + 1)?;
    let mut manifest = Manifest {
        settings: cfg.data_entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        streams: Vec::new(),
    };
    for s in [&d.x, &d.y] {
        let entry = ManifestEntry {
            domain: s.domain,
            stream_id: s.stream_id.clone(),
            length: s.len(),
        };
        save_stream(s, &entry.dir(dir))?;
        let delta = (0..s.len() - 1).map(|i| s.frame_delta(i)).sum::<f64>() / (s.len() - 1) as f64;
        let fractions: Vec<String> = class_fractions(s).iter().map(|f| format!("{f:.3}")).collect();
        writeln!(
            out,
            "{}/{}: {} frames {}x{}, mean frame delta {delta:.4}, class fractions [{}]",
            s.domain,
            s.stream_id,
            s.len(),
            cfg.scene.image_size,
            cfg.scene.image_size,
            fractions.join(", ")
        )
        .map_err(io_out)?;
        manifest.streams.push(entry);
    }
    write_manifest(dir, &manifest)?;
    writeln!(out, "wrote {}", dir.join(MANIFEST_FILE).display()).map_err(io_out)?;
    Ok(())
}

/// Both streams of a generated dataset plus the scene that produced them.
pub struct Dataset {
    pub x: VideoStream<f32>,
    pub y: VideoStream<f32>,
    pub scene: Scene,
    pub config: RunConfig,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut config = RunConfig::default();
    for (k, v) in &manifest.settings {
        config
            .set(k, v)
            .map_err(|e| Error::Config(format!("{}: {e}", root.join(MANIFEST_FILE).display())))?;
    }
    config.scene.validate()?;
    let stream = |d: Domain| -> Result<VideoStream<f32>> {
        let entry = manifest
            .stream(d)
            .ok_or_else(|| Error::Config(format!("{}: no {d} stream listed", root.join(MANIFEST_FILE).display())))?;
        let s = load_stream(&entry.dir(root), config.scene.n_classes)?;
        if s.len() != entry.length {
            return Err(Error::Config(format!(
                "{}: manifest lists {} frames, found {}",
                entry.dir(root).display(),
                entry.length,
                s.len()
            )));
        }
        Ok(s)
    };
    Ok(Dataset {
        x: stream(Domain::X)?,
        y: stream(Domain::Y)?,
        scene: Scene::new(config.scene)?,
        config,
    })
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    dir: &Path,
    resume: Option<&Path>,
    stop_at: Option<u64>,
    out: &mut dyn Write,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            writeln!(out, "resuming from {} at step {}", p.display(), s.step).map_err(io_out)?;
            s
        }
        None => TrainState::new(cfg.train)?,
    };
    let size = state.config.model.image_size;
    if ds.config.scene.image_size != size {
        return Err(Error::Config(format!(
            "dataset frames are {0}x{0} but the model expects {1}x{1}",
            ds.config.scene.image_size, size
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join(RUN_CONFIG), state.config.to_text()).map_err(|e| Error::io(dir.join(RUN_CONFIG), e))?;
    let csv_path = dir.join(LOSS_CSV);
    let mut csv = if state.step > 0 {
        fs::OpenOptions::new().append(true).create(true).open(&csv_path)
    } else {
        fs::File::create(&csv_path)
    }
    .map_err(|e| Error::io(&csv_path, e))?;
    let start = state.step;
    let result = fit(
        &mut state,
        &ds.x,
        &ds.y,
        FitSinks {
            csv: Some(&mut csv),
            checkpoint_dir: Some(dir),
            stop_at,
        },
    );
    let reports = result?;
    let final_path = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_path)?;
    match reports.last() {
        Some(r) => writeln!(
            out,
            "trained steps {start}..{} ({} mode); final total {:.5}; checkpoint {}",
            state.step,
            state.config.entries().into_iter().find(|(k, _)| *k == "loss").map_or_else(String::new, |e| e.1),
            r.total,
            final_path.display()
        ),
        None => writeln!(out, "no steps to run; checkpoint {}", final_path.display()),
    }
    .map_err(io_out)?;
    Ok(())
}

pub fn cmd_infer(checkpoint: &Path, input: &Path, dir: &Path, smooth: bool, out: &mut dyn Write) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    // Labels are carried along but unused, so any 8-bit id is accepted.
    let stream: VideoStream<f32> = load_stream(input, 256)?;
    let m = &state.config.model;
    let expected = [m.channels, m.image_size, m.image_size];
    if stream.frame_shape() != Some(&expected[..]) {
        return Err(Error::Config(format!(
            "checkpoint expects frames {:?}, stream {} has {:?}",
            expected,
            input.display(),
            stream.frame_shape()
        )));
    }
    let (g, p, g_name) = match stream.domain {
        Domain::X => (&state.params.g_y, &state.params.p_y, "g_y"),
        Domain::Y => (&state.params.g_x, &state.params.p_x, "g_x"),
    };
    let result = if smooth {
        infer_smoothed(g, p, &stream)?
    } else {
        infer_framewise(g, &stream)?
    };
    let entry = ManifestEntry {
        domain: result.domain,
        stream_id: result.stream_id.clone(),
        length: result.len(),
    };
    save_stream(&result, &entry.dir(dir))?;
    let manifest = Manifest {
        settings: vec![
            ("mode".into(), if smooth { "smoothed" } else { "framewise" }.into()),
            ("generator".into(), g_name.into()),
            ("checkpoint".into(), checkpoint.display().to_string()),
            ("checkpoint_step".into(), state.step.to_string()),
            ("input".into(), input.display().to_string()),
        ],
        streams: vec![entry.clone()],
    };
    write_manifest(dir, &manifest)?;
    writeln!(
        out,
        "{} frames {} -> {} ({}), written to {}",
        result.len(),
        stream.domain,
        result.domain,
        manifest.settings[0].1,
        entry.dir(dir).display()
    )
    .map_err(io_out)?;
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    data: &Path,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Vec<EvalReport>> {
    let ds = load_dataset(data)?;
    let states = checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let oracle = match ds.scene.config().task {
        crate::data::SceneTask::Labels => {
            let o = train_oracle(&ds.x, &cfg.oracle)?;
            writeln!(out, "oracle segmenter: mean IoU {:.4} on real frames", o.train_iou).map_err(io_out)?;
            Some(o)
        }
        crate::data::SceneTask::Images => None,
    };
    let mut reports = Vec::new();
    for (path, state) in checkpoints.iter().zip(&states) {
        let mode = state.config.entries().into_iter().find(|(k, _)| *k == "loss").map_or_else(String::new, |e| e.1);
        let mut label = mode;
        if reports.iter().any(|r: &EvalReport| r.label == label)  {
            label = path.file_stem().and_then(|s| s.to_str()).map_or(label.clone(), |s| format!("{label}:{s}"));
        }
        let r = evaluate(&label, state.step, &state.params, &ds.x, &ds.y, &ds.scene, oracle.as_ref(), &cfg.eval)?;
        reports.push(r);
    }
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_json_like());
    }
    if reports.len() > 1 {
        text.push_str(&comparison_table(&reports));
    }
    out.write_all(text.as_bytes()).map_err(io_out)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("report.txt"), &text).map_err(|e| Error::io(dir.join("report.txt"), e))?;
        let mut csv = EvalReport::csv_header();
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        fs::write(dir.join("metrics.csv"), csv).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        if reports.len() > 1 {
            let p = dir.join("comparison.txt");
            fs::write(&p, comparison_table(&reports)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(reports)
}

pub fn cmd_verify(opts: &VerifyOptions, out: &mut dyn Write) -> Result<()> {
    let report = run_verification(opts)?;
    out.write_all(report.render().as_bytes()).map_err(io_out)?;
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("{} (value {:.3e}, limit {:.1e})", c.name, c.value, c.limit))
        .collect();
    Err(Error::Numerical(format!("verification failed: {}", failed.join("; "))))
}

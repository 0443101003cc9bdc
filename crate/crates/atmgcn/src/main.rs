//! Command-line driver: synthesize data, train, evaluate, run the LOSO
//! protocol, and inspect model internals (attention maps, adjacency dumps).
//!
//! Exit codes: 0 success, 1 validation/data error, 2 usage error.
//! Log verbosity comes from the `ATMGCN_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use atmgcn::config::{Preset, ResolvedConfig, RunConfig};
use atmgcn::data::{
    load_dataset, load_manifest, oracle_accuracy, synthesize, DatasetManifest, SyntheticSpec,
};
use atmgcn::error::{Error, Result};
use atmgcn::graph::{edge_list_text, matrix_csv};
use atmgcn::metrics::{compute_metrics, Metrics};
use atmgcn::model::{load_checkpoint, predict, save_checkpoint, Variant};
use atmgcn::pgm::write_normalized_pgm;
use atmgcn::train::{run_loso, train_model};

#[derive(Parser)]
#[command(
    name = "atmgcn",
    about = "Micro-expression recognition via adaptive temporal-motion graph convolution",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Pipeline variant (overrides the config).
    #[arg(long)]
    variant: Option<Variant>,
    /// Model-size preset (overrides the config).
    #[arg(long)]
    preset: Option<Preset>,
    /// Worker threads; 0 = one per core (overrides the config).
    #[arg(long)]
    jobs: Option<usize>,
    /// Manifest CSV (overrides the config).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth {
        /// JSON SyntheticSpec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for frames and manifest.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on every clip of the manifest.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the leave-one-subject-out protocol.
    Loso {
        #[command(flatten)]
        common: ConfigArgs,
        /// Run all four variants and emit the ablation table.
        #[arg(long)]
        ablation: bool,
    },
    /// Export attention maps and adjacency matrices for one clip.
    Inspect {
        #[command(flatten)]
        common: ConfigArgs,
        /// Clip directory (as listed in the manifest, or any frame directory
        /// when --apex is given).
        #[arg(long)]
        clip: PathBuf,
        /// Trained checkpoint; seed-initialized parameters when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict attention-map export to one encoder block.
        #[arg(long)]
        block: Option<usize>,
        /// Apex frame index when the clip is not in the manifest.
        #[arg(long)]
        apex: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("ATMGCN_LOG", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out),
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Loso { common, ablation } => cmd_loso(&common, ablation),
        Command::Inspect {
            common,
            clip,
            checkpoint,
            block,
            apex,
        } => cmd_inspect(&common, &clip, checkpoint.as_deref(), block, apex),
    }
}

fn load_run_config(common: &ConfigArgs) -> Result<ResolvedConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(variant) = common.variant {
        cfg.variant = variant;
    }
    if let Some(preset) = common.preset {
        cfg.preset = preset;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = m.display().to_string();
    }
    let resolved = cfg.resolve()?;
    if resolved.jobs > 0 {
        // a second invocation in-process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(resolved.jobs)
            .build_global();
    }
    print!("{}", resolved.echo_json());
    Ok(resolved)
}

/// Write through a temp file and rename, so readers never see partial files.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn cmd_synth(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("spec {}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    println!("{}", serde_json::to_string_pretty(&spec)?);
    let manifest = synthesize(&spec, out)?;
    let acc = oracle_accuracy(&manifest, &spec)?;
    println!(
        "wrote {} clips under {} (pixel-oracle accuracy {:.3})",
        manifest.rows.len(),
        out.display(),
        acc
    );
    Ok(())
}

fn load_clips(
    resolved: &ResolvedConfig,
    manifest: &DatasetManifest,
) -> Result<Vec<atmgcn::motion::FrameSequence>> {
    let clips = load_dataset(manifest, &resolved.preprocess)?;
    for (row, clip) in manifest.rows.iter().zip(clips.iter()) {
        if clip.label() >= resolved.model.n_classes {
            return Err(Error::Validation(format!(
                "clip {}: label {} outside [0, {})",
                row.clip_dir,
                clip.label(),
                resolved.model.n_classes
            )));
        }
    }
    Ok(clips)
}

#[derive(Serialize)]
struct TrainOutput {
    checkpoint: String,
    epochs: usize,
    final_loss: f64,
    final_uf1: f64,
}

fn cmd_train(common: &ConfigArgs) -> Result<()> {
    let resolved = load_run_config(common)?;
    let out_dir = PathBuf::from(&resolved.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let manifest = load_manifest(Path::new(&resolved.manifest))?;
    let clips = load_clips(&resolved, &manifest)?;
    let idx: Vec<usize> = (0..clips.len()).collect();
    let trained = train_model(&clips, &idx, &resolved.model_config, &resolved.train)?;

    let ckpt_path = out_dir.join("checkpoint.json");
    save_checkpoint(&ckpt_path, &trained.params)?;
    write_json(&out_dir.join("history.json"), &trained.history)?;
    write_json(
        &out_dir.join("train_summary.json"),
        &TrainOutput {
            checkpoint: ckpt_path.display().to_string(),
            epochs: trained.history.len(),
            final_loss: trained.history.last().map_or(f64::NAN, |r| r.loss),
            final_uf1: trained.history.last().map_or(f64::NAN, |r| r.uf1),
        },
    )?;
    let _ = write_atomic(
        &out_dir.join("resolved_config.json"),
        resolved.echo_json().as_bytes(),
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ClipOutcome {
    clip_dir: String,
    subject_id: String,
    label: usize,
    predicted: usize,
}

#[derive(Serialize)]
struct EvalOutput {
    variant: String,
    metrics: Metrics,
    clips: Vec<ClipOutcome>,
}

fn cmd_eval(common: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let resolved = load_run_config(common)?;
    let out_dir = PathBuf::from(&resolved.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let manifest = load_manifest(Path::new(&resolved.manifest))?;
    let clips = load_clips(&resolved, &manifest)?;
    let params = load_checkpoint(checkpoint, &resolved.model_config)?;

    let mut outcomes = Vec::with_capacity(clips.len());
    let mut preds = Vec::with_capacity(clips.len());
    let mut labels = Vec::with_capacity(clips.len());
    for (row, clip) in manifest.rows.iter().zip(clips.iter()) {
        let p = predict(
            clip,
            &params,
            &resolved.model_config,
            resolved.train.variant,
            false,
        )?;
        preds.push(p.predicted);
        labels.push(clip.label());
        outcomes.push(ClipOutcome {
            clip_dir: row.clip_dir.clone(),
            subject_id: row.subject_id.clone(),
            label: clip.label(),
            predicted: p.predicted,
        });
    }
    let metrics = compute_metrics(&preds, &labels, resolved.model.n_classes)?;
    println!(
        "UF1 {:.4}  UAR {:.4}  ACC {:.4} over {} clips",
        metrics.uf1,
        metrics.uar,
        metrics.acc,
        clips.len()
    );
    write_json(
        &out_dir.join("eval_report.json"),
        &EvalOutput {
            variant: resolved.train.variant.name().to_string(),
            metrics,
            clips: outcomes,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    subject_mean_uf1: f64,
    subject_mean_uar: f64,
    subject_mean_acc: f64,
    pooled_uf1: f64,
    pooled_uar: f64,
}

fn cmd_loso(common: &ConfigArgs, ablation: bool) -> Result<()> {
    let resolved = load_run_config(common)?;
    let out_dir = PathBuf::from(&resolved.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let manifest = load_manifest(Path::new(&resolved.manifest))?;
    let clips = load_clips(&resolved, &manifest)?;

    let variants: Vec<Variant> = if ablation {
        Variant::ALL.to_vec()
    } else {
        vec![resolved.train.variant]
    };

    let mut table = Vec::new();
    for variant in variants {
        let mut settings = resolved.train.clone();
        settings.variant = variant;
        let report = run_loso(&clips, &resolved.model_config, &settings)?;
        println!(
            "[{}] subject-mean UF1 {:.4} UAR {:.4} ACC {:.4} ({} folds)",
            variant.name(),
            report.subject_mean.uf1,
            report.subject_mean.uar,
            report.subject_mean.acc,
            report.folds.len()
        );
        for fold in &report.folds {
            write_json(
                &out_dir.join(format!("fold_{}_{}.json", variant.name(), fold.subject_id)),
                fold,
            )?;
        }
        table.push(AblationRow {
            variant: variant.name().to_string(),
            subject_mean_uf1: report.subject_mean.uf1,
            subject_mean_uar: report.subject_mean.uar,
            subject_mean_acc: report.subject_mean.acc,
            pooled_uf1: report.pooled.uf1,
            pooled_uar: report.pooled.uar,
        });
        let name = if ablation {
            format!("loso_report_{}.json", variant.name())
        } else {
            "loso_report.json".to_string()
        };
        write_json(&out_dir.join(name), &report)?;
    }

    if ablation {
        println!("\n{:<12} {:>8} {:>8}", "variant", "UF1", "UAR");
        for row in &table {
            println!(
                "{:<12} {:>8.4} {:>8.4}",
                row.variant, row.subject_mean_uf1, row.subject_mean_uar
            );
        }
        write_json(&out_dir.join("ablation.json"), &table)?;
    }
    let _ = write_atomic(
        &out_dir.join("resolved_config.json"),
        resolved.echo_json().as_bytes(),
    );
    Ok(())
}

fn cmd_inspect(
    common: &ConfigArgs,
    clip: &Path,
    checkpoint: Option<&Path>,
    block: Option<usize>,
    apex: Option<usize>,
) -> Result<()> {
    let resolved = load_run_config(common)?;
    let out_dir = PathBuf::from(&resolved.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    // find the clip: manifest row when available, frame directory otherwise
    let clip_key = clip.display().to_string();
    let manifest_path = Path::new(&resolved.manifest);
    let (frames, apex_index, fps, subject, label) = if let Some(apex) = apex {
        let frames = read_loose_clip(clip)?;
        (frames, apex, 30.0, "unknown".to_string(), 0)
    } else {
        let manifest = load_manifest(manifest_path)?;
        let row = manifest
            .rows
            .iter()
            .find(|r| r.clip_dir == clip_key)
            .ok_or_else(|| {
                Error::Input(format!(
                    "clip '{clip_key}' not in manifest {} (pass --apex to inspect a loose directory)",
                    manifest_path.display()
                ))
            })?;
        let frames = atmgcn::data::load_clip_frames(&manifest, row)?;
        (
            frames,
            row.apex_index,
            row.fps,
            row.subject_id.clone(),
            row.label,
        )
    };
    let sequence = atmgcn::data::preprocess(
        &frames,
        apex_index,
        fps,
        &resolved.preprocess,
        &subject,
        label,
    )?;

    let params = match checkpoint {
        Some(p) => load_checkpoint(p, &resolved.model_config)?,
        None => {
            use rand::SeedableRng;
            atmgcn::model::init_params(
                &resolved.model_config,
                &mut rand_chacha::ChaCha8Rng::seed_from_u64(resolved.seed),
            )
        }
    };

    let pred = predict(
        &sequence,
        &params,
        &resolved.model_config,
        resolved.train.variant,
        true,
    )?;
    println!(
        "predicted class {} (probabilities {:?})",
        pred.predicted, pred.probabilities
    );

    // attention maps: one PGM per (block, pair)
    let mut n_maps = 0;
    for (pair_pos, maps) in pred.encoder_maps.iter().enumerate() {
        let pair_index = pair_pos + 2;
        for (b, map) in maps.iter().enumerate() {
            if block.is_some_and(|want| want != b) {
                continue;
            }
            let path = out_dir.join(format!("attn_block{b}_pair{pair_index:02}.pgm"));
            write_normalized_pgm(&path, map)?;
            n_maps += 1;
        }
    }

    // adjacency per layer plus the topology dump
    if let Some(stack) = &pred.adjacency {
        write_atomic(
            &out_dir.join("adjacency_layer0.csv"),
            matrix_csv(&stack.a0).as_bytes(),
        )?;
        for (l, a) in stack.layers.iter().enumerate() {
            write_atomic(
                &out_dir.join(format!("adjacency_layer{}.csv", l + 1)),
                matrix_csv(a).as_bytes(),
            )?;
        }
        let topo = atmgcn::graph::build_topology(
            sequence.len(),
            sequence.apex_index(),
            resolved.model.window,
        )?;
        write_atomic(
            &out_dir.join("topology.txt"),
            edge_list_text(&topo, &stack.a0).as_bytes(),
        )?;
    }
    if let Some(attn) = &pred.classifier_attention {
        write_atomic(
            &out_dir.join("classifier_attention.csv"),
            matrix_csv(attn).as_bytes(),
        )?;
    }
    println!("wrote {n_maps} attention maps to {}", out_dir.display());
    Ok(())
}

/// Read `frame_0001.pgm`-style frames straight from a directory.
fn read_loose_clip(dir: &Path) -> Result<Vec<atmgcn::Tensor>> {
    let mut frames = Vec::new();
    for i in 1.. {
        let pgm = dir.join(format!("frame_{i:04}.pgm"));
        let ppm = dir.join(format!("frame_{i:04}.ppm"));
        if pgm.exists() {
            frames.push(atmgcn::pgm::read_image(&pgm)?);
        } else if ppm.exists() {
            frames.push(atmgcn::pgm::read_image(&ppm)?);
        } else {
            break;
        }
    }
    if frames.len() < 2 {
        return Err(Error::Input(format!(
            "no clip frames found under {}",
            dir.display()
        )));
    }
    Ok(frames)
}

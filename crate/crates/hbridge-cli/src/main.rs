//! Operator entry point for desk-scale HBridge experiments: data
//! generation, expert pretraining, bridged training, sampling, bridge
//! ablation, and gradient checking.

mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hbridge_core::checkpoint::{
    install_params, load_checkpoint, save_checkpoint, LoadedCheckpoint, RngState,
};
use hbridge_core::data::{
    make_dataset, read_dataset, write_dataset, write_ppm, Attrs, DatasetRecord,
};
use hbridge_core::eval::sample_pattern;
use hbridge_core::model::{ModelBundle, Phase};
use hbridge_core::parallel::threads_from_env;
use hbridge_core::rng::Rng;
use hbridge_core::trainer::{finite_diff_check, GradCheckOptions, Trainer};
use hbridge_core::{Config, HbError};

use manifest::{now_ms, DirLock, RunManifest};

#[derive(Parser)]
#[command(
    name = "hbridge",
    about = "Asymmetric two-expert transformer with a mid-layer attention bridge, at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic caption/pattern dataset file.
    GenData {
        /// Number of records.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain one expert in isolation: `und` as a causal language model,
    /// `gen` as an unconditional denoiser (no bridge).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// `und` or `gen`.
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        /// Scalar config overrides, e.g. --set train.steps=300
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Bridged training per the config (fusion mode, skip counts, SRT).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint whose weights seed this run (optimizer and RNG state
        /// start fresh).
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sample one pattern from a checkpoint for a caption "s c q z".
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Four attribute indices: shape color quadrant size.
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer bridge ablation: NMSE drift and validation-loss deltas.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Coordinates sampled per tensor role.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        /// Comma-separated role filter (aligner, srt_bank, gen_block, head,
        /// gen_embed, understanding, vit).
        #[arg(long)]
        roles: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn exit_code_of(err: &HbError) -> u8 {
    match err {
        HbError::Config(_) | HbError::Input(_) => 2,
        HbError::Divergence { .. } => 3,
        HbError::Format(_) | HbError::Io(_) => 4,
        HbError::Internal(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<Config, HbError> {
    let mut cfg = Config::from_file(path)?;
    for assignment in overrides {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<ExitCode, HbError> {
    match cmd {
        Cmd::GenData { n, seed, out } => gen_data(n, seed, &out),
        Cmd::Pretrain {
            config,
            target,
            out,
            set,
        } => {
            let phase = match target.as_str() {
                "und" => Phase::PretrainUnderstanding,
                "gen" => Phase::PretrainGenerative,
                other => {
                    return Err(HbError::Input(format!(
                        "invalid pretrain target `{other}` (expected `und` or `gen`)"
                    )))
                }
            };
            let cfg = load_config(&config, &set)?;
            train_run("pretrain", &cfg, Some(&config), None, phase, &out)
        }
        Cmd::Train {
            config,
            init_from,
            out,
            set,
        } => {
            let cfg = load_config(&config, &set)?;
            train_run(
                "train",
                &cfg,
                Some(&config),
                init_from.as_deref(),
                Phase::BridgeTrain,
                &out,
            )
        }
        Cmd::Sample {
            checkpoint,
            caption,
            steps,
            seed,
            out,
        } => sample(&checkpoint, &caption, steps, seed, &out),
        Cmd::Ablate {
            checkpoint,
            eval_data,
            seed,
            out,
        } => ablate(&checkpoint, &eval_data, seed, &out),
        Cmd::Gradcheck {
            config,
            coords,
            roles,
            set,
        } => gradcheck(&config, coords, roles.as_deref(), &set),
    }
}

fn gen_data(n: usize, seed: u64, out: &Path) -> Result<ExitCode, HbError> {
    let started = now_ms();
    let _lock = DirLock::acquire(out)?;
    let records = make_dataset(n, seed);
    let data_path = out.join("dataset.hbds");
    write_dataset(&data_path, &records)?;

    let config = serde_json::json!({ "n": n, "seed": seed });
    RunManifest {
        command: "gen-data".into(),
        config_path: None,
        config_hash: fnv_hex(&config.to_string()),
        config,
        output_dir: out.display().to_string(),
        seed,
        bridge_plan: None,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        artifacts: vec!["dataset.hbds".into()],
    }
    .write(out)?;
    println!("wrote {} records to {}", n, data_path.display());
    Ok(ExitCode::SUCCESS)
}

fn train_run(
    command: &str,
    cfg: &Config,
    config_path: Option<&Path>,
    init_from: Option<&Path>,
    phase: Phase,
    out: &Path,
) -> Result<ExitCode, HbError> {
    let started = now_ms();
    let _lock = DirLock::acquire(out)?;

    let (bundle, mut params) = ModelBundle::new(cfg)?;
    if let Some(ckpt) = init_from {
        let loaded = load_checkpoint(ckpt)?;
        install_params(&loaded, &bundle, &mut params)?;
    }

    let threads = threads_from_env();
    let mut trainer = Trainer::new(&bundle, params, phase, threads)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut sink = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let steps = cfg.train.steps;
    trainer.run_steps(steps, Some(&mut sink))?;
    sink.flush()?;

    let (batch, flow) = trainer.rng_states();
    let ckpt_path = out.join("checkpoint.hbrd");
    save_checkpoint(
        &ckpt_path,
        cfg,
        &trainer.params,
        Some(&trainer.opt),
        RngState { batch, flow },
        steps,
    )?;

    RunManifest {
        command: command.into(),
        config_path: config_path.map(|p| p.display().to_string()),
        config_hash: cfg.hash_hex(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        output_dir: out.display().to_string(),
        seed: cfg.train.seed,
        bridge_plan: Some(bundle.plan.clone()),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        artifacts: vec!["metrics.jsonl".into(), "checkpoint.hbrd".into()],
    }
    .write(out)?;
    println!(
        "{command} finished: {} steps, checkpoint at {}",
        steps,
        ckpt_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn rebuild_from_checkpoint(path: &Path) -> Result<(ModelBundle, hbridge_core::params::Params, LoadedCheckpoint), HbError> {
    let loaded = load_checkpoint(path)?;
    let (bundle, mut params) = ModelBundle::new(&loaded.header.config)?;
    install_params(&loaded, &bundle, &mut params)?;
    Ok((bundle, params, loaded))
}

fn parse_caption(text: &str) -> Result<Attrs, HbError> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(HbError::Input(format!(
            "caption must be four integers \"shape color quadrant size\", got `{text}`"
        )));
    }
    let mut vals = [0u8; 4];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .parse::<u8>()
            .map_err(|_| HbError::Input(format!("caption field `{part}` is not an integer")))?;
    }
    Attrs::new(vals[0], vals[1], vals[2], vals[3])
}

fn sample(
    checkpoint: &Path,
    caption: &str,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<ExitCode, HbError> {
    let started = now_ms();
    let attrs = parse_caption(caption)?;
    let _lock = DirLock::acquire(out)?;
    let (bundle, params, loaded) = rebuild_from_checkpoint(checkpoint)?;

    let mut rng = Rng::seeded(seed);
    let pattern = sample_pattern(&bundle, &params, attrs, steps, &mut rng)?;
    let decoded = hbridge_core::data::decode_attributes(&pattern, &hbridge_core::data::reference_renders());

    let rec = DatasetRecord {
        tokens: attrs.caption(),
        pattern: pattern.clone(),
    };
    write_dataset(&out.join("sample.hbds"), &[rec])?;
    write_ppm(&out.join("sample.ppm"), &pattern)?;

    println!(
        "requested shape={} color={} quadrant={} size={}",
        attrs.shape, attrs.color, attrs.quadrant, attrs.size
    );
    println!(
        "decoded   shape={} color={} quadrant={} size={} ({})",
        decoded.shape,
        decoded.color,
        decoded.quadrant,
        decoded.size,
        if decoded == attrs { "match" } else { "mismatch" }
    );

    RunManifest {
        command: "sample".into(),
        config_path: Some(checkpoint.display().to_string()),
        config_hash: loaded.header.config.hash_hex(),
        config: serde_json::to_value(&loaded.header.config).expect("config serializes"),
        output_dir: out.display().to_string(),
        seed,
        bridge_plan: None,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        artifacts: vec!["sample.hbds".into(), "sample.ppm".into()],
    }
    .write(out)?;
    Ok(ExitCode::SUCCESS)
}

fn ablate(checkpoint: &Path, eval_data: &Path, seed: u64, out: &Path) -> Result<ExitCode, HbError> {
    let started = now_ms();
    let eval = read_dataset(eval_data)?;
    let _lock = DirLock::acquire(out)?;
    let (bundle, params, loaded) = rebuild_from_checkpoint(checkpoint)?;

    let report = hbridge_core::analysis::drift_profile(&bundle, &params, &eval, seed)?;
    let (csv, svg) = hbridge_core::analysis::emit_report(&report, &out.join("drift"))?;
    for row in &report.rows {
        println!(
            "layer {:>2} bridged={} nmse={:.6e} loss_delta={:+.6e}",
            row.layer, row.bridged, row.nmse, row.loss_delta
        );
    }

    RunManifest {
        command: "ablate".into(),
        config_path: Some(checkpoint.display().to_string()),
        config_hash: loaded.header.config.hash_hex(),
        config: serde_json::to_value(&loaded.header.config).expect("config serializes"),
        output_dir: out.display().to_string(),
        seed,
        bridge_plan: Some(bundle.plan.clone()),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        artifacts: vec![
            csv.file_name().unwrap().to_string_lossy().into_owned(),
            svg.file_name().unwrap().to_string_lossy().into_owned(),
        ],
    }
    .write(out)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(
    config: &Path,
    coords: usize,
    roles: Option<&str>,
    overrides: &[String],
) -> Result<ExitCode, HbError> {
    let cfg = load_config(config, overrides)?;
    let (bundle, params) = ModelBundle::new(&cfg)?;
    let opts = GradCheckOptions {
        coords_per_role: coords,
        roles: roles.map(|r| r.split(',').map(|s| s.trim().to_string()).collect()),
        ..Default::default()
    };
    let report = finite_diff_check(&bundle, &params, &opts)?;
    if report.total_coords == 0 {
        println!(
            "nothing to check: selected roles are frozen ({} tensors skipped)",
            report.skipped_frozen
        );
        return Ok(ExitCode::SUCCESS);
    }
    for role in &report.roles {
        println!(
            "role {:<14} coords {:>3}  max rel err {:.3e}",
            role.role, role.coords, role.max_rel_err
        );
    }
    println!(
        "overall max rel err {:.3e} over {} coordinates",
        report.max_rel_err, report.total_coords
    );
    if report.max_rel_err > 1e-3 {
        return Err(HbError::Divergence {
            step: 0,
            detail: format!(
                "gradient check failed: max rel err {:.3e} > 1e-3",
                report.max_rel_err
            ),
        });
    }
    Ok(ExitCode::SUCCESS)
}

fn fnv_hex(text: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

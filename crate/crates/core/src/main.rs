//! `ssmlab`: reproducible experiments on reparameterized diagonal
//! state-space models. Every command is a pure function of (config, seed)
//! to output bytes, tracked by a manifest.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use ssmlab::error::{Error, Result};
use ssmlab::kernel::MemoryKernel;
use ssmlab::manifest::{content_hash, RunManifest};
use ssmlab::perturb::{sweep, PerturbConfig};
use ssmlab::reparam::{Family, ReparamScheme};
use ssmlab::ssm::{load_checkpoint, save_checkpoint};
use ssmlab::train::{generate_dataset, train, write_telemetry_csv, TrainConfig, TrainStatus};
use ssmlab::TimeMode;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "ssmlab",
    version,
    about = "Train, perturb, and certify reparameterized diagonal state-space models",
    long_about = "Subcommands write CSV outputs plus a manifest recording the resolved \
                  config, seed, and input hash. Config files are TOML or JSON (detected \
                  by extension); the SSMLAB_SEED environment variable overrides the \
                  config seed. Exit codes: 0 success, 1 numeric failure (divergence), \
                  2 usage error, 3 verification failure."
)]
struct Cli {
    /// Cap on internal parallelism (1 is always available and bit-identical
    /// to any other setting).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV: seq,t,x,y) from a target kernel.
    #[command(
        name = "gen-data",
        long_about = "Config keys: target (required; poly:<gamma> | expdecay:<rate> | \
                      csv:<path>), k (sequence length, default 100), n (sequence count, \
                      default 153600), dt (default 1.0), seed (default 0)."
    )]
    GenData(GenDataArgs),
    /// Train a state-space model; writes checkpoint.json and telemetry.csv.
    #[command(
        long_about = "Config keys: target, m, scheme (required); d=1, k=100, n=153600, \
                      batch=512, lr=0.01, optimizer=adam|sgd, epochs=1, seed=0, \
                      loss=mse|l1-kernel, activation=tanh|identity|sigmoid|softsign, \
                      dt=1.0, freeze_bias=false, freeze_input=false, lambda_init=[lo,hi], \
                      quad={dt,horizon,tail_tolerance}. Unknown keys are errors."
    )]
    Train(TrainArgs),
    /// Perturbation-error sweep over trained checkpoints; writes a report CSV.
    #[command(
        long_about = "Config keys: target (required); [perturb] betas (list or \
                      geo:<start>:<ratio>:<count>), samples_per_beta=30, \
                      perturb_set=recurrent-only|all-weights, metric=l1-kernel|\
                      sobolev-empirical, space=weight|eigen, seed=0, \
                      quad={dt,horizon,tail_tolerance}, probe_len=100, probe_count=64."
    )]
    Perturb(PerturbArgs),
    /// Tabulate gradient-scale functions G_f over a weight range.
    Gradscale(GradscaleArgs),
    /// Check the stability certificates; exit 0 iff all hold.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the number of sequences.
    #[arg(long)]
    n: Option<usize>,
    /// Override the sequence length.
    #[arg(long)]
    k: Option<usize>,
    /// Output CSV path.
    #[arg(long, default_value = "dataset.csv")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for checkpoint.json, telemetry.csv, and the manifest.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint JSON files (repeatable), trained on the same target with
    /// the same scheme.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "perturbation.csv")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GradscaleArgs {
    /// Comma-separated scheme specs, e.g. `exp@cont,best:a=1,b=0.5@disc`.
    #[arg(long)]
    schemes: String,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    w_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    w_max: f64,
    #[arg(long, default_value_t = 0.1)]
    w_step: f64,
    #[arg(long, default_value = "gradscale.csv")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Schemes to certify (continuous time).
    #[arg(long, default_value = "exp@cont,softplus@cont,best:a=1,b=1@cont")]
    schemes: String,
    /// Perturbation radii.
    #[arg(long, default_value = "0.01,0.1,0.5,1")]
    betas: String,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    w_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    w_max: f64,
    #[arg(long, default_value_t = 0.1)]
    w_step: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    target: String,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default)]
    seed: u64,
}

fn default_k() -> usize {
    100
}
fn default_n() -> usize {
    153_600
}
fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerturbJob {
    target: String,
    #[serde(default)]
    perturb: PerturbConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if workers == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        // applies to every parallel region in the process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Perturb(args) => cmd_perturb(args),
        Command::Gradscale(args) => cmd_gradscale(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => Ok(toml::from_str(&text)?),
        Some("json") => Ok(serde_json::from_str(&text)?),
        other => Err(Error::config(format!(
            "config must be .toml or .json, got {:?} ({})",
            other,
            path.display()
        ))),
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("SSMLAB_SEED") {
        Ok(v) => {
            let seed = v
                .parse::<u64>()
                .map_err(|_| Error::config(format!("SSMLAB_SEED must be a u64, got `{v}`")))?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

fn refuse_overwrite(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            return Err(Error::config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Extra input files referenced by a target spec (tabulated kernels).
fn target_input_bytes(target: &str) -> Result<Vec<u8>> {
    if let Some(path) = target.strip_prefix("csv:") {
        Ok(std::fs::read(path)?)
    } else {
        Ok(Vec::new())
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut config: GenDataConfig = load_config(&args.config)?;
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    if config.n == 0 || config.k == 0 {
        return Err(Error::config("n and k must be positive".to_string()));
    }
    let target = MemoryKernel::parse(&config.target)?;
    let manifest_out = manifest_path(&args.out);
    refuse_overwrite(&[&args.out, &manifest_out], args.force)?;

    let data = generate_dataset(&target, config.k, config.n, config.dt, config.seed)?;
    data.write_csv(&args.out, config.dt)?;

    let config_json = serde_json::to_value(&config)?;
    let manifest = RunManifest {
        command: "gen-data".to_string(),
        config: config_json.clone(),
        seed: config.seed,
        input_hash: content_hash(&[
            serde_json::to_string(&config_json)?.as_bytes(),
            &target_input_bytes(&config.target)?,
        ]),
        outputs: vec![args.out.display().to_string()],
        duration_secs: start.elapsed().as_secs_f64(),
        status: None,
    };
    manifest.write(&manifest_out)?;
    println!("wrote {} ({} sequences of length {})", args.out.display(), config.n, config.k);
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut config: TrainConfig = load_config(&args.config)?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    config.validate()?;

    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt_path = args.out_dir.join("checkpoint.json");
    let telemetry_path = args.out_dir.join("telemetry.csv");
    let manifest_out = args.out_dir.join("run.manifest.json");
    refuse_overwrite(&[&ckpt_path, &telemetry_path, &manifest_out], args.force)?;

    let outcome = train(&config)?;
    save_checkpoint(&outcome.params, &ckpt_path)?;
    write_telemetry_csv(&outcome.telemetry, &telemetry_path)?;

    let config_json = serde_json::to_value(&config)?;
    let status = match outcome.status {
        TrainStatus::Completed => "completed".to_string(),
        TrainStatus::Diverged { step } => format!("diverged at step {step}"),
    };
    let manifest = RunManifest {
        command: "train".to_string(),
        config: config_json.clone(),
        seed: config.seed,
        input_hash: content_hash(&[
            serde_json::to_string(&config_json)?.as_bytes(),
            &target_input_bytes(&config.target)?,
        ]),
        outputs: vec![ckpt_path.display().to_string(), telemetry_path.display().to_string()],
        duration_secs: start.elapsed().as_secs_f64(),
        status: Some(status),
    };
    manifest.write(&manifest_out)?;

    match outcome.status {
        TrainStatus::Completed => {
            let last = outcome.telemetry.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!("completed {} steps, final loss {last}", outcome.telemetry.len());
            Ok(ExitCode::SUCCESS)
        }
        TrainStatus::Diverged { step } => {
            eprintln!("diverged at step {step}; telemetry retained");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_perturb(args: PerturbArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut job: PerturbJob = load_config(&args.config)?;
    if let Some(seed) = seed_override()? {
        job.perturb.seed = seed;
    }
    job.perturb.validate()?;
    let target = MemoryKernel::parse(&job.target)?;

    let mut checkpoints = Vec::new();
    let mut ckpt_bytes: Vec<Vec<u8>> = Vec::new();
    for path in &args.checkpoints {
        checkpoints.push(load_checkpoint(path)?);
        ckpt_bytes.push(std::fs::read(path)?);
    }
    let scheme0 = checkpoints[0].scheme;
    if checkpoints.iter().any(|c| c.scheme != scheme0) {
        return Err(Error::config(
            "perturbation sweeps compare checkpoints with the same scheme".to_string(),
        ));
    }
    let manifest_out = manifest_path(&args.out);
    refuse_overwrite(&[&args.out, &manifest_out], args.force)?;

    let report = sweep(&checkpoints, &target, &job.perturb)?;
    ssmlab::perturb::write_report_csv(&report, &args.out)?;

    let config_json = serde_json::to_value(&job)?;
    let mut hash_parts: Vec<&[u8]> = Vec::new();
    let config_bytes = serde_json::to_string(&config_json)?;
    hash_parts.push(config_bytes.as_bytes());
    let target_bytes = target_input_bytes(&job.target)?;
    hash_parts.push(&target_bytes);
    for bytes in &ckpt_bytes {
        hash_parts.push(bytes);
    }
    let manifest = RunManifest {
        command: "perturb".to_string(),
        config: config_json,
        seed: job.perturb.seed,
        input_hash: content_hash(&hash_parts),
        outputs: vec![args.out.display().to_string()],
        duration_secs: start.elapsed().as_secs_f64(),
        status: None,
    };
    manifest.write(&manifest_out)?;

    println!("checkpoints: {}", report.checkpoint_ids.join(", "));
    for (m_prev, m_next, crossing) in &report.crossings {
        match crossing {
            Some(beta) => println!("curves m={m_prev} and m={m_next} cross at beta = {beta}"),
            None => println!("curves m={m_prev} and m={m_next} do not cross inside the grid"),
        }
    }
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_scheme_list(specs: &str) -> Result<Vec<ReparamScheme>> {
    // `best:a=1,b=0.5@disc` contains commas, so split between a mode suffix
    // and the next family name
    let mut schemes = Vec::new();
    let mut rest = specs.trim();
    while !rest.is_empty() {
        let at = rest
            .find('@')
            .ok_or_else(|| Error::config(format!("scheme list entry missing `@mode`: `{rest}`")))?;
        let mode_end = rest[at..]
            .find(',')
            .map(|i| at + i)
            .unwrap_or(rest.len());
        schemes.push(ReparamScheme::parse(rest[..mode_end].trim())?);
        rest = rest[mode_end..].trim_start_matches(',').trim();
    }
    if schemes.is_empty() {
        return Err(Error::config("empty scheme list".to_string()));
    }
    Ok(schemes)
}

fn weight_grid(w_min: f64, w_max: f64, w_step: f64) -> Result<Vec<f64>> {
    if !(w_step > 0.0) || !(w_max >= w_min) {
        return Err(Error::config(format!("bad weight grid [{w_min}, {w_max}] step {w_step}")));
    }
    let count = ((w_max - w_min) / w_step).round() as usize;
    Ok((0..=count).map(|i| w_min + i as f64 * w_step).collect())
}

fn cmd_gradscale(args: GradscaleArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let schemes = parse_scheme_list(&args.schemes)?;
    let grid = weight_grid(args.w_min, args.w_max, args.w_step)?;
    let manifest_out = manifest_path(&args.out);
    refuse_overwrite(&[&args.out, &manifest_out], args.force)?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(out, "scheme,w,g,g_over_w,flag")?;
    for scheme in &schemes {
        // best-family specs contain commas; quote the field
        let spec = scheme.spec_string();
        let spec = if spec.contains(',') { format!("\"{spec}\"") } else { spec };
        for &w in &grid {
            match scheme.gradient_scale(w) {
                Ok(g) => {
                    let flag = if scheme.closed_form_in_table() { "ok" } else { "no-table-entry" };
                    let ratio = g / w.abs();
                    writeln!(out, "{spec},{w:?},{g:?},{ratio:?},{flag}")?;
                }
                Err(_) => {
                    writeln!(out, "{spec},{w:?},,,singular")?;
                }
            }
        }
    }
    drop(out);

    let config_json = serde_json::json!({
        "schemes": schemes.iter().map(|s| s.spec_string()).collect::<Vec<_>>(),
        "w_min": args.w_min,
        "w_max": args.w_max,
        "w_step": args.w_step,
    });
    let manifest = RunManifest {
        command: "gradscale".to_string(),
        config: config_json.clone(),
        seed: 0,
        input_hash: content_hash(&[serde_json::to_string(&config_json)?.as_bytes()]),
        outputs: vec![args.out.display().to_string()],
        duration_secs: start.elapsed().as_secs_f64(),
        status: None,
    };
    manifest.write(&manifest_out)?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let schemes = parse_scheme_list(&args.schemes)?;
    let betas: Vec<f64> = args
        .betas
        .split(',')
        .map(|b| {
            b.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad beta `{b}`")))
        })
        .collect::<Result<_>>()?;
    let grid = weight_grid(args.w_min, args.w_max, args.w_step)?;
    let mut all_ok = true;

    // 1. certified bound: gap <= g(beta) + 1e-9 on the grid
    for scheme in &schemes {
        if scheme.time_mode != TimeMode::Continuous {
            println!("SKIP certificate {}: discrete-time scheme", scheme.spec_string());
            continue;
        }
        if scheme.stability_bound_g(0.0, 0.1).is_err() {
            println!("SKIP certificate {}: no certified bound", scheme.spec_string());
            continue;
        }
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut ok = true;
        for &w in &grid {
            for &beta in &betas {
                let gap = scheme.stability_gap(w, beta)?;
                let bound = scheme.stability_bound_g(w, beta)?;
                worst = worst.max(gap - bound);
                if gap > bound + 1e-9 {
                    ok = false;
                }
            }
        }
        all_ok &= ok;
        println!(
            "{} certificate {}: sup(gap - g(beta)) = {worst:.3e}",
            if ok { "PASS" } else { "FAIL" },
            scheme.spec_string()
        );
    }

    // 2. direct parameterization instability law: gap = 1/eps at w = -beta(1+eps)
    {
        let direct = ReparamScheme::new(Family::Direct, TimeMode::Continuous)?;
        let beta = 1e-3;
        let mut ok = true;
        for &eps in &[1.0, 0.1, 0.01, 1e-3] {
            let gap = direct.stability_gap(-beta * (1.0 + eps), beta)?;
            if ((gap - 1.0 / eps) / (1.0 / eps)).abs() > 1e-6 {
                ok = false;
            }
        }
        all_ok &= ok;
        println!(
            "{} direct instability: gap(w = -beta(1+eps)) = 1/eps, unbounded as eps -> 0",
            if ok { "PASS" } else { "FAIL" }
        );
    }

    // 3. endpoint supremum: a 101-point ball scan never beats the endpoints
    {
        let mut ok = true;
        for scheme in &schemes {
            if scheme.time_mode != TimeMode::Continuous {
                continue;
            }
            for &w in &[-2.0, -0.5, 0.0, 0.5, 2.0] {
                for &beta in &betas {
                    let endpoint = scheme.stability_gap(w, beta)?;
                    if endpoint.is_infinite() {
                        continue;
                    }
                    let f_w = scheme.apply(w)?;
                    let mut scan: f64 = 0.0;
                    for i in 0..=100 {
                        let wt = w - beta + 2.0 * beta * (i as f64) / 100.0;
                        let f_t = scheme.apply(wt)?;
                        if !(f_t < 0.0) {
                            scan = f64::INFINITY;
                            break;
                        }
                        scan = scan.max((f_w / f_t - 1.0).abs());
                    }
                    if scan > endpoint + 1e-12 {
                        ok = false;
                    }
                }
            }
        }
        all_ok &= ok;
        println!(
            "{} endpoint supremum: ball scans bounded by endpoint gap",
            if ok { "PASS" } else { "FAIL" }
        );
    }

    if all_ok {
        println!("all certificates hold");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verification failed");
        Ok(ExitCode::from(3))
    }
}

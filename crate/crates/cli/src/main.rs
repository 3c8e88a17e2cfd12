use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use padnet::ablation::{run_grid, Grid};
use padnet::checkpoint::{sha256_hex, Checkpoint};
use padnet::data::{generate_dataset, read_dataset_file, write_dataset_file, LabelMap, SceneConfig};
use padnet::gradcheck::{gradcheck, GradcheckOptions};
use padnet::metrics::{format_table, MetricsRow, RelDenominator};
use padnet::train::{evaluate, format_curve, two_phase_train};
use padnet::{Error, ExperimentConfig, NetworkConfig, Tensor4};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_DIGEST: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "padnet", version, about = "Train, evaluate and ablate the multi-task distillation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training on the configured splits.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Experiment config; defaults to `config.json` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-sample predictions (depth as PFM, labels as PGM).
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[arg(long, default_value = "gt")]
        rel_denominator: RelDenominator,
    },
    /// Train every variant of a grid per seed and tabulate medians.
    Ablate {
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Base experiment; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale analytic conv weight gradients; checks that the checker fails.
        #[arg(long, hide = true)]
        corrupt_conv_grad: Option<f64>,
    },
    /// Write a synthetic dataset file.
    GenData {
        #[arg(long)]
        scene_config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Error carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
            Error::Divergence(_) => EXIT_DIVERGENCE,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval {
            ckpt,
            data,
            config,
            dump_dir,
            rel_denominator,
        } => cmd_eval(&ckpt, &data, config.as_deref(), dump_dir.as_deref(), rel_denominator),
        Command::Ablate { grid, seeds, out, config } => cmd_ablate(&grid, seeds, &out, config.as_deref()),
        Command::Gradcheck {
            config,
            seed,
            corrupt_conv_grad,
        } => cmd_gradcheck(&config, seed, corrupt_conv_grad),
        Command::GenData {
            scene_config,
            count,
            out,
            seed,
        } => cmd_gen_data(&scene_config, count, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_json(&read_text(path)?)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        Failure::new(
            EXIT_CONFIG,
            format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()),
        )
    })
}

fn cmd_train(config_path: &Path, seed: u64, out: &Path) -> CmdResult {
    let cfg = load_experiment(config_path)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    let (train, val) = cfg.data.load_splits()?;
    let digest = cfg.network.digest();
    info!(
        "training {} samples, validating on {}, config digest {digest:016x}",
        train.len(),
        val.len()
    );
    let ckpt_path = out.join("checkpoint.padc");
    let result = two_phase_train(&cfg.network, &cfg.training, &train, seed, |state, mark| {
        Checkpoint::from_state(state, digest).save(&ckpt_path)?;
        let last = state.curve.last().map_or(f64::NAN, |r| r.report.total);
        info!("phase {} epoch {}: L_all {last:.5}", mark.phase, mark.epoch + 1);
        Ok(())
    });
    let state = match result {
        Ok(state) => state,
        Err(failure) => {
            if let Some(good) = &failure.last_good {
                Checkpoint::from_state(good, digest).save(&ckpt_path)?;
                fs::write(out.join("loss_curve.tsv"), format_curve(&good.curve))?;
                warn!("kept the checkpoint of iteration {}", good.iteration);
            }
            return Err(failure.error.into());
        }
    };
    fs::write(out.join("loss_curve.tsv"), format_curve(&state.curve))?;
    let ckpt = Checkpoint::from_state(&state, digest);
    let bytes = ckpt.to_bytes()?;
    fs::write(&ckpt_path, &bytes)?;
    let saved = Checkpoint::from_bytes(&bytes)?;
    let eval = evaluate(&saved.params, &cfg.network, &val, RelDenominator::Gt, false)?;
    let row = MetricsRow {
        method: format!("distill-{}", cfg.network.distill_variant.name()),
        depth: eval.depth,
        parsing: eval.parsing,
    };
    let table = format_table(&[row]);
    fs::write(out.join("metrics.tsv"), &table)?;
    print!("{table}");
    println!("checkpoint sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn cmd_eval(
    ckpt_path: &Path,
    data: &Path,
    config: Option<&Path>,
    dump_dir: Option<&Path>,
    denominator: RelDenominator,
) -> CmdResult {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt_path.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let cfg = load_experiment(&config_path)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let expected = cfg.network.digest();
    if ckpt.config_digest != expected {
        return Err(Failure::new(
            EXIT_DIGEST,
            format!(
                "checkpoint digest {:016x} does not match the architecture in {} ({expected:016x})",
                ckpt.config_digest,
                config_path.display()
            ),
        ));
    }
    let samples = read_dataset_file(data)?;
    let eval = evaluate(&ckpt.params, &cfg.network, &samples, denominator, dump_dir.is_some())?;
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir)?;
        for (i, (depth, labels)) in eval.predictions.iter().enumerate() {
            if let Some(d) = depth {
                fs::write(dir.join(format!("{i:04}_depth.pfm")), pfm(d))?;
            }
            if let Some(l) = labels {
                fs::write(dir.join(format!("{i:04}_labels.pgm")), pgm(l))?;
            }
        }
    }
    if eval.depth.is_none() && eval.parsing.is_none() {
        println!("undefined metrics: no valid pixels");
    }
    let row = MetricsRow {
        method: format!("distill-{}", cfg.network.distill_variant.name()),
        depth: eval.depth,
        parsing: eval.parsing,
    };
    print!("{}", format_table(&[row]));
    Ok(())
}

/// Little-endian single-channel PFM, rows bottom to top.
fn pfm(t: &Tensor4) -> Vec<u8> {
    let s = t.shape();
    let mut out = format!("Pf\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    let plane = t.plane(0, 0);
    for y in (0..s.h).rev() {
        for &v in &plane[y * s.w..(y + 1) * s.w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn pgm(l: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", l.w, l.h).into_bytes();
    out.extend_from_slice(&l.data[..l.h * l.w]);
    out
}

fn cmd_ablate(grid: &str, seeds: u64, out: &Path, config: Option<&Path>) -> CmdResult {
    let grid: Grid = grid.parse()?;
    if seeds == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--seeds must be at least 1"));
    }
    let base = match config {
        Some(p) => load_experiment(p)?,
        None => ExperimentConfig::desk(),
    };
    fs::create_dir_all(out)?;
    let seed_list: Vec<u64> = (0..seeds).collect();
    let report = run_grid(grid, &base, &seed_list, |variant, seed, r| match r {
        Ok(_) => info!("{} seed {seed} done", variant.name),
        Err(e) => warn!("{} seed {seed} failed: {e}", variant.name),
    });
    let table = report.table();
    fs::write(out.join(format!("{}.tsv", grid.name())), &table)?;
    let mut notes = report.notes();
    if grid == Grid::DistillModules {
        let rel = |n: &str| report.row(n).and_then(|r| r.depth.map(|d| d.rel));
        if let (Some(a), Some(b), Some(c)) = (
            rel("PAD-Net (Distillation A + DE)"),
            rel("PAD-Net (Distillation B + DE)"),
            rel("PAD-Net (Distillation C + DE)"),
        ) {
            notes.push(format!(
                "ordering C <= B <= A on rel (not gated): {}",
                if c <= b && b <= a { "holds" } else { "does not hold" }
            ));
        }
    }
    let mut f = fs::File::create(out.join(format!("{}_notes.txt", grid.name())))?;
    for n in &notes {
        writeln!(f, "{n}")?;
    }
    print!("{table}");
    for n in &notes {
        println!("# {n}");
    }
    Ok(())
}

/// Accepts either a bare network config or a full experiment config.
fn load_network(path: &Path) -> Result<NetworkConfig, Failure> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let net: NetworkConfig = if value.get("network").is_some() {
        load_experiment(path)?.network
    } else {
        parse_json(path)?
    };
    net.validate()?;
    Ok(net)
}

fn cmd_gradcheck(config: &Path, seed: u64, corrupt: Option<f64>) -> CmdResult {
    let net = load_network(config)?;
    let widest = net
        .encoder_stages
        .iter()
        .copied()
        .chain([net.head_width, net.distill_width])
        .max()
        .unwrap_or(0);
    if widest > 8 {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("gradcheck needs a tiny config (all widths <= 8), widest is {widest}"),
        ));
    }
    let opts = GradcheckOptions {
        corrupt_conv_weight_grad: corrupt,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&net, seed, &opts)?;
    print!("{}", report.to_table());
    println!("losses: {}", report.losses.join(", "));
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!("gradient mismatch in: {}", report.failing_groups().join(", ")),
        ))
    }
}

fn cmd_gen_data(scene_config: &Path, count: usize, out: &Path, seed: u64) -> CmdResult {
    let scene: SceneConfig = parse_json(scene_config)?;
    scene.validate()?;
    let samples = generate_dataset(seed, count, &scene)?;
    write_dataset_file(out, &samples)?;
    info!("wrote {count} samples to {}", out.display());
    Ok(())
}

//! `dam`: dataset generation, training, evaluation and numerical checks.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dam_core::checkpoint;
use dam_core::config::RunConfig;
use dam_core::gradcheck::{self, CheckOptions};
use dam_core::invariance;
use dam_core::io::labels_to_pgm;
use dam_core::synth::{self, DatasetManifest, Split};
use dam_core::train::{self, Event};
use dam_core::{Error, Network, NetworkSpec};

/// Used by `gradcheck` when no config is given.
const TOY_NETWORK: &str = r#"
mean_depth = 1000.0

[[layers]]
type = "dam_conv"
out_channels = 3
s_r = [1.5]
depth_diff = true

[[layers]]
type = "dam_conv"
out_channels = 4
s_r = [1.0, 2.0, 3.0]
kernel = [3, 1]

[[layers]]
type = "maxpool"
window = 2
stride = 2

[[layers]]
type = "dam_conv"
out_channels = 3
s_r = [0.5, 1.0]
activation = "identity"

[[layers]]
type = "softmax_loss"
lambda = 0.01
"#;

#[derive(Parser)]
#[command(
    name = "dam",
    version,
    about = "Depth-adaptive multiscale convolution networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/val/test splits described by `[data]`.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write PGM previews of every depth and label map.
        #[arg(long)]
        previews: bool,
        /// `key.path=value` config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train the `[network]` on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Report segmentation metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write predicted label maps as PGM files into this directory.
        #[arg(long, value_name = "DIR")]
        emit_pgm: Option<PathBuf>,
        /// Also write the metrics and confusion counts as JSON to this file.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Config with a `[network]` table; a small built-in network otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Show that DaM activations survive a change of viewing distance.
    Invariance {
        /// Distance ratio between the two views.
        #[arg(long, default_value_t = 2)]
        g: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("DAM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("DAM_THREADS={value:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenData {
            config,
            out,
            seed,
            previews,
            overrides,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let seed = seed.unwrap_or(cfg.seed);
            let manifest = synth::generate_dataset(cfg.data()?, seed, &out, previews)?;
            print!("{}", manifest.summary());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => train_command(&config, &data, &out, resume.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            emit_pgm,
            json,
        } => eval_command(
            &checkpoint,
            &data,
            split,
            emit_pgm.as_deref(),
            json.as_deref(),
        ),
        Command::Gradcheck {
            config,
            seed,
            eps,
            tol,
            corrupt_backward,
        } => {
            let spec = match config {
                Some(path) => RunConfig::load(path, &[])?.network()?.clone(),
                None => NetworkSpec::from_toml(TOY_NETWORK)?,
            };
            let mut net = Network::build(&spec, seed)?;
            gradcheck::randomize_biases(&mut net, seed);
            let mean = net.mean_depth();
            let sample = gradcheck::kink_free_sample(&net, seed, 8, 8, (0.4 * mean, 3.0 * mean))?;
            let opts = CheckOptions {
                eps,
                tol,
                corrupt: corrupt_backward,
            };
            let report = gradcheck::check_network(&net, &sample, opts)?;
            print!("{}", report.render());
            println!(
                "worst relative error {:.3e} (tol {tol:.1e}): {}",
                report.worst(),
                if report.passed() { "PASS" } else { "FAIL" }
            );
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
        Command::Invariance { g, seed } => {
            let cases = invariance::check_all(g, seed)?;
            for case in &cases {
                println!("{}", case.render());
            }
            let passed = cases.iter().all(|c| c.passed());
            println!("{}", if passed { "PASS" } else { "FAIL" });
            Ok(if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
    }
}

fn check_dataset(net: &Network, manifest: &DatasetManifest) -> Result<(), Error> {
    if net.classes() != manifest.classes {
        return Err(Error::Config(format!(
            "network predicts {} classes but the dataset has {}",
            net.classes(),
            manifest.classes
        )));
    }
    if net.input_channels() != 1 {
        return Err(Error::Config(format!(
            "network expects {} input channels but depth datasets provide 1",
            net.input_channels()
        )));
    }
    Ok(())
}

fn train_command(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    overrides: &[String],
) -> Result<ExitCode, Error> {
    let cfg = RunConfig::load(config, overrides)?;
    let tcfg = cfg.train()?.clone();
    tcfg.validate()?;
    let manifest = DatasetManifest::load(data)?;

    let best_dir = out.join("best");
    let (mut net, mut opt, best) = match resume {
        Some(dir) => {
            let loaded = checkpoint::load(dir)?;
            let best = match checkpoint::load(&best_dir) {
                Ok(b) => b.score,
                Err(_) => loaded.score,
            };
            (loaded.network, loaded.optimizer, best)
        }
        None => {
            let mut spec = cfg.network()?.clone();
            spec.mean_depth = manifest.mean_depth;
            let net = Network::build(&spec, tcfg.seed)?;
            let opt = tcfg.optimizer(&net)?;
            (net, opt, None)
        }
    };
    check_dataset(&net, &manifest)?;
    if net.mean_depth() != manifest.mean_depth {
        net.set_mean_depth(manifest.mean_depth)?;
    }

    let train_set = train::samples_from(synth::load_split(data, &manifest, Split::Train)?);
    let val_set = train::samples_from(synth::load_split(data, &manifest, Split::Val)?);
    fs::create_dir_all(out)?;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(out.join("train_log.jsonl"))?;
    println!(
        "training {} samples (val {}), iterations {}..{}, mean depth {:.3} mm",
        train_set.len(),
        val_set.len(),
        opt.iter,
        tcfg.iterations,
        manifest.mean_depth
    );

    let summary = train::train(
        &mut net,
        &mut opt,
        &tcfg,
        &train_set,
        &val_set,
        best,
        |event| {
            match event {
                Event::Step(record) => {
                    writeln!(log, "{}", serde_json::to_string(record)?)?;
                    if record.val_score.is_some() || record.iter % 50 == 0 {
                        let val = record
                            .val_score
                            .map(|s| format!("  val {s:.4}"))
                            .unwrap_or_default();
                        println!(
                            "iter {:>6}  loss {:.5}  lr {:.3e}{val}",
                            record.iter, record.loss, record.lr
                        );
                    }
                }
                Event::NewBest { score, net, opt } => {
                    checkpoint::save(&best_dir, net, opt, Some(score))?
                }
            }
            Ok(())
        },
    )?;
    checkpoint::save(out.join("last"), &net, &opt, summary.best_score)?;
    match summary.best_score {
        Some(score) => println!("best validation score {score:.4}"),
        None => println!("no validation score recorded"),
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_command(
    ckpt: &Path,
    data: &Path,
    split: Split,
    emit_pgm: Option<&Path>,
    json: Option<&Path>,
) -> Result<ExitCode, Error> {
    let loaded = checkpoint::load(ckpt)?;
    let net = loaded.network;
    let manifest = DatasetManifest::load(data)?;
    check_dataset(&net, &manifest)?;
    let samples = train::samples_from(synth::load_split(data, &manifest, split)?);
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "the {} split is empty",
            split.name()
        )));
    }
    let cm = train::evaluate(&net, &samples)?;
    let metrics = cm.compute_all()?;
    println!("{} split, {} samples", split.name(), samples.len());
    print!("{}", metrics.table());
    print!("{}", cm.to_csv());
    if let Some(path) = json {
        let counts: Vec<Vec<u64>> = (0..cm.classes())
            .map(|i| (0..cm.classes()).map(|j| cm.get(i, j)).collect())
            .collect();
        let report = serde_json::json!({
            "split": split.name(),
            "samples": samples.len(),
            "metrics": metrics,
            "confusion": counts,
        });
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(dir) = emit_pgm {
        fs::create_dir_all(dir)?;
        for (entry, sample) in manifest.split(split).samples.iter().zip(&samples) {
            let predicted = net.predict(&sample.input, &sample.depth)?;
            labels_to_pgm(
                dir.join(format!("{:05}_pred.pgm", entry.index)),
                &predicted,
                net.classes(),
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

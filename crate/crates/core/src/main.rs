use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pam::harness::gradsuite::check_grad;
use pam::harness::{
    evaluate_checkpoint, generate_synth_stream, report, run_ablation_suite, run_experiment,
    Checkpoint, ExperimentConfig, HarnessError, StreamData,
};
use pam::serve_eval::mean_report;

#[derive(Parser)]
#[command(
    name = "pam",
    about = "Popularity-aware meta-learning for streaming cold-start recommendation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides, e.g. `--set seed=3 --set variant=PF`. Every config key is
    /// also accepted directly as `--key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut c = ExperimentConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            c.apply_text(&text)?;
        }
        c.apply_overrides(&self.set)?;
        c.validate()?;
        Ok(c)
    }
}

/// Rewrites `--key=value` and `--key value` for any config key into
/// `--set key=value` so every config key doubles as a flag.
fn expand_config_flags(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let is_key = |k: &str| ExperimentConfig::KEYS.contains(&k.replace('-', "_").as_str());
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            out.push(tok);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) if is_key(k) => out.extend(["--set".to_string(), format!("{k}={v}")]),
            None if is_key(flag) && it.peek().is_some() => {
                let v = it.next().unwrap_or_default();
                out.extend(["--set".to_string(), format!("{flag}={v}")]);
            }
            _ => out.push(tok),
        }
    }
    out
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate one variant; writes a JSON-lines report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "report.jsonl")]
        out: PathBuf,
        /// Also write a binary checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run PF, PAM-M, PAM-S, PAM-A and PAM-F on one stream.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "ablation")]
        out_dir: PathBuf,
    },
    /// Re-score the test periods of a stream with a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval.jsonl")]
        out: PathBuf,
    },
    /// Train, then write the embedding-masking breakdown as CSV.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
    },
    /// Write a synthetic long-tail stream and its item features as TSV.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "synth.tsv")]
        out: PathBuf,
        #[arg(long, default_value = "synth_features.tsv")]
        features: PathBuf,
    },
    /// Finite-difference check of every analytic gradient on random small models.
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Train {
            cfg,
            out,
            checkpoint,
        } => {
            let c = cfg.resolve()?;
            let started = std::time::Instant::now();
            let res = run_experiment(&c)?;
            let f = fs::File::create(&out)?;
            report::write_jsonl(&res, std::io::BufWriter::new(f))?;
            println!(
                "{}: cold R@10 {:.4}, popular R@10 {:.4} over {} periods ({:.1}s)",
                c.variant,
                res.final_report.cold.recall[1],
                res.final_report.popular.recall[1],
                res.final_report.n_periods,
                started.elapsed().as_secs_f64()
            );
            if let Some(path) = checkpoint {
                let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
                res.checkpoint().write(&mut w)?;
            }
        }
        Cmd::Ablate { cfg, out_dir } => {
            let c = cfg.resolve()?;
            fs::create_dir_all(&out_dir)?;
            let runs = run_ablation_suite(&c)?;
            let mut rows = Vec::new();
            for (v, res) in &runs {
                let f = fs::File::create(out_dir.join(format!("{v}.jsonl")))?;
                report::write_jsonl(res, std::io::BufWriter::new(f))?;
                rows.push((*v, res.final_report.clone()));
            }
            let table = report::ablation_table(&rows);
            fs::write(out_dir.join("ablation.tsv"), &table)?;
            print!("{table}");
        }
        Cmd::Evaluate {
            cfg,
            checkpoint,
            out,
        } => {
            let c = cfg.resolve()?;
            let ckpt =
                Checkpoint::read(&mut std::io::BufReader::new(fs::File::open(&checkpoint)?))?;
            let stream = StreamData::load(&c)?;
            let reports = evaluate_checkpoint(&c, &stream, &ckpt)?;
            let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
            for r in &reports {
                for rec in r.records() {
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                }
            }
            let fin = mean_report(&reports);
            println!(
                "cold R@10 {:.4}, popular R@10 {:.4} over {} periods",
                fin.cold.recall[1], fin.popular.recall[1], fin.n_periods
            );
        }
        Cmd::Probe { cfg, batches, out } => {
            let c = cfg.resolve()?;
            let res = run_experiment(&c)?;
            let probe = res.probe(batches)?;
            fs::write(&out, probe.to_csv())?;
            for r in &probe.rows {
                println!(
                    "{:<8} {:<9} items {:>6}  mse {:.6}",
                    r.slice, r.mask, r.n_items, r.mean
                );
            }
        }
        Cmd::Synth { cfg, out, features } => {
            let c = cfg.resolve()?;
            let s = &c.synth;
            let stream = generate_synth_stream(
                s.n_items,
                s.n_users,
                s.n_interactions,
                s.zipf_exponent,
                c.seed,
            );
            fs::write(&out, stream.to_tsv())?;
            fs::write(&features, stream.features_tsv())?;
            println!(
                "{} interactions -> {}",
                stream.interactions.len(),
                out.display()
            );
        }
        Cmd::CheckGrad { configs, seed } => {
            let rep = check_grad(configs, seed)?;
            println!("{rep:#?}");
            if !rep.passes() {
                return Err("gradient check failed".into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse_from(expand_config_flags(std::env::args()))) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(HarnessError::Config(msg)) = e.downcast_ref::<HarnessError>() {
                eprintln!("config error: {msg}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}

//! `tstlab`: train, sweep, ablate, evaluate and inspect token-superposition
//! runs from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tstlab::analysis::{estimate_mi, eval_ce, fit_power_law, summarize_sweep, MiConfig};
use tstlab::checkpoint::{checkpoint_precision, Checkpoint};
use tstlab::data::{read_text_file, read_token_file, Corpus};
use tstlab::tensor::{Precision, Scalar};
use tstlab::trainer::{
    load_corpora, run_ablation, run_sweep, run_two_phase, AblationKind, DataSpec, RunConfig, RunOutcome,
    SweepGrid,
};
use tstlab::{selftest, Error, Result};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "TSTLAB_OUT";

#[derive(Parser)]
#[command(name = "tstlab", version, about = "Token-superposition pre-training laboratory")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one two-phase training run.
    Train(RunArgs),
    /// Run a grid of (s, r) cells and write a summary table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Bag sizes.
        #[arg(long = "s", value_delimiter = ',', required = true)]
        s_values: Vec<usize>,
        /// Superposition ratios.
        #[arg(long = "r", value_delimiter = ',', required = true)]
        r_values: Vec<f64>,
        /// Concurrent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Derive a different seed for every cell.
        #[arg(long)]
        independent_seeds: bool,
    },
    /// Run one ablation of the superposition phase.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// full, input-only, output-only or reinit-io.
        #[arg(long)]
        kind: AblationKind,
    },
    /// Recompute held-out CE of finished runs; several runs also print the
    /// summary table.
    Eval {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Estimate token mutual information by distance and fit a power law.
    MiFit {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Binary token file (instead of the config's data source).
        #[arg(long, conflicts_with_all = ["config", "text"])]
        tokens: Option<PathBuf>,
        /// Text file read as bytes.
        #[arg(long, conflicts_with = "config")]
        text: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        max_distance: usize,
        #[arg(long)]
        vocab_cap: Option<usize>,
        #[arg(long, default_value_t = 30)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a continuation from a trained model.
    Generate {
        /// Run directory (uses its final checkpoint).
        #[arg(long, required_unless_present = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prompt token ids, comma separated.
        #[arg(long, value_delimiter = ',', required_unless_present = "text")]
        prompt: Vec<u32>,
        /// Prompt as text (byte-level vocabularies).
        #[arg(long, conflicts_with = "prompt")]
        text: Option<String>,
        #[arg(short = 'n', long, default_value_t = 32)]
        tokens: usize,
        /// 0 samples greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check loss identities and model gradients against finite differences.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the model gradient checks.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tst.s=4`. Repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for both initialisation and data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
}

impl RunArgs {
    /// Resolve file, overrides and flags into one config. Relative data paths
    /// are made absolute so the snapshot replays from anywhere.
    fn resolve(&self) -> Result<RunConfig> {
        let (mut cfg, base) = match &self.config {
            Some(p) => (RunConfig::load(p)?, p.parent().map(Path::to_path_buf)),
            None => (RunConfig::default(), None),
        };
        cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.model.init_seed = seed;
            cfg.plan.seed = seed;
        }
        if let Some(p) = self.precision {
            cfg.plan.precision = p;
        }
        let base = match base {
            Some(b) if !b.as_os_str().is_empty() => b,
            _ => PathBuf::from("."),
        };
        if let DataSpec::TokenFile { path } | DataSpec::TextFile { path } = &mut cfg.data {
            if path.is_relative() {
                *path = std::path::absolute(base.join(&*path))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default_name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| out_root().join(default_name))
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_name(cfg: &RunConfig) -> String {
    if cfg.tst.is_baseline() {
        format!("baseline-seed{}", cfg.plan.seed)
    } else {
        format!("s{}_r{}-seed{}", cfg.tst.s, cfg.tst.r, cfg.plan.seed)
    }
}

fn print_outcome(o: &RunOutcome) {
    println!(
        "final_loss={:.4} eval_ce={:.4} tokens={} wallclock={:.1}s dir={}",
        o.final_loss,
        o.final_eval_ce,
        o.data_tokens_seen,
        o.wallclock,
        o.dir.display()
    );
}

fn eval_run(dir: &Path) -> Result<f64> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let (_, holdout) = load_corpora(&cfg)?;
    let ckpt = dir.join("checkpoints").join("final.ckpt");
    fn typed<T: Scalar>(ckpt: &Path, cfg: &RunConfig, holdout: &Corpus) -> Result<f64> {
        let c = Checkpoint::<T>::load(ckpt)?;
        eval_ce(&c.model, holdout, cfg.plan.l_base, cfg.eval.batch_rows)
    }
    match checkpoint_precision(&ckpt)? {
        Precision::Single => typed::<f32>(&ckpt, &cfg, &holdout),
        Precision::Double => typed::<f64>(&ckpt, &cfg, &holdout),
    }
}

fn generate(ckpt: &Path, prompt: &[u32], n: usize, temperature: f64, seed: u64) -> Result<(Vec<u32>, usize)> {
    fn typed<T: Scalar>(ckpt: &Path, p: &[u32], n: usize, t: f64, seed: u64) -> Result<(Vec<u32>, usize)> {
        let c = Checkpoint::<T>::load(ckpt)?;
        Ok((c.model.generate(p, n, t, seed)?, c.model.config.vocab))
    }
    match checkpoint_precision(ckpt)? {
        Precision::Single => typed::<f32>(ckpt, prompt, n, temperature, seed),
        Precision::Double => typed::<f64>(ckpt, prompt, n, temperature, seed),
    }
}

fn dispatch(verb: Verb) -> Result<bool> {
    match verb {
        Verb::Train(args) => {
            let cfg = args.resolve()?;
            let out = run_two_phase(&cfg, &args.out_dir(&run_name(&cfg)))?;
            print_outcome(&out);
        }
        Verb::Sweep {
            run,
            s_values,
            r_values,
            jobs,
            independent_seeds,
        } => {
            let cfg = run.resolve()?;
            let grid = SweepGrid {
                s: s_values,
                r: r_values,
                independent_seeds,
            };
            let (train, holdout) = load_corpora(&cfg)?;
            let report = run_sweep(&grid, &cfg, train, holdout, &run.out_dir("sweep"), jobs)?;
            print!("{}", report.table.to_csv());
            let failed = report.cells.iter().filter(|c| c.result.is_err()).count();
            for c in report.cells.iter().filter(|c| c.result.is_err()) {
                eprintln!("cell s={} r={} failed: {}", c.s, c.r, c.result.as_ref().unwrap_err());
            }
            println!(
                "{} cells, {} failed, table={}",
                report.cells.len(),
                failed,
                report.table_path.display()
            );
            return Ok(failed == 0);
        }
        Verb::Ablate { run, kind } => {
            let cfg = run.resolve()?;
            let name = format!("{}-{kind:?}", run_name(&cfg)).to_lowercase();
            let out = run_ablation(kind, &cfg, &run.out_dir(&name))?;
            print_outcome(&out);
        }
        Verb::Eval { runs } => {
            for dir in &runs {
                println!("{} eval_ce={:.4}", dir.display(), eval_run(dir)?);
            }
            if runs.len() > 1 {
                print!("{}", summarize_sweep(&runs)?.to_csv());
            }
        }
        Verb::MiFit {
            config,
            tokens,
            text,
            max_distance,
            vocab_cap,
            bootstrap,
            seed,
            out,
        } => {
            let corpus = match (config, tokens, text) {
                (_, Some(p), _) => read_token_file(&p)?,
                (_, _, Some(p)) => read_text_file(&p)?,
                (Some(p), ..) => {
                    let cfg = RunConfig::load(&p)?;
                    cfg.data.load(p.parent())?
                }
                (None, None, None) => RunConfig::default().data.load(None)?,
            };
            let curve = estimate_mi(
                &corpus.tokens,
                &MiConfig {
                    max_distance,
                    vocab_cap,
                    bootstrap,
                    seed,
                    ..MiConfig::default()
                },
            )?;
            let fit = fit_power_law(&curve);
            let out = out.unwrap_or_else(|| out_root().join("mi"));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("mi.csv"), curve.to_csv())?;
            let fit = fit?;
            std::fs::write(out.join("fit.json"), serde_json::to_string_pretty(&fit)?)?;
            println!(
                "C0={:.6} a={:.6} k={:.6} rss={:.3e} points={} decaying={} dir={}",
                fit.c0,
                fit.a,
                fit.k,
                fit.rss,
                fit.n_points,
                fit.decaying,
                out.display()
            );
        }
        Verb::Generate {
            run,
            checkpoint,
            prompt,
            text,
            tokens,
            temperature,
            seed,
        } => {
            let ckpt = checkpoint
                .or_else(|| run.map(|r| r.join("checkpoints").join("final.ckpt")))
                .expect("clap requires --run or --checkpoint");
            let prompt = match text {
                Some(t) => t.bytes().map(u32::from).collect(),
                None => prompt,
            };
            let (out, vocab) = generate(&ckpt, &prompt, tokens, temperature, seed)?;
            let ids: Vec<String> = out.iter().map(u32::to_string).collect();
            println!("{}", ids.join(","));
            if vocab == 256 {
                let bytes: Vec<u8> = out.iter().map(|&t| t as u8).collect();
                println!("{}", String::from_utf8_lossy(&bytes));
            }
        }
        Verb::Selftest { seed, quick } => {
            let checks = selftest::run(seed, quick)?;
            for c in &checks {
                println!(
                    "{} {} (error {:.3e}, tolerance {:.0e})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.error,
                    c.tolerance
                );
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.verb) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedskel_core::federation::{
    load_data, run_experiment_with, write_checkpoint, Checkpoint, ClientRecord, Config,
};
use fedskel_core::harness::{collect_summaries, render_csv, render_table, run_bench, shard_stats, BenchConfig};

#[derive(Parser, Debug)]
#[command(name = "fedskel", version, about = "Federated training with skeleton networks")]
struct Args {
    /// Worker threads for client training (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write metrics.csv, summary.json and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<label>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time dense against masked back-prop and write bench.csv.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
    },
    /// Tabulate finished runs (run directories or summary.json files).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show how the training set is split across clients.
    ShardStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let out = out.unwrap_or_else(|| Path::new("runs").join(&cfg.label));
    let data = load_data(&cfg)?;
    log::info!(
        "{} training / {} test examples, {} clients, method {}",
        data.train.len(),
        data.test.len(),
        cfg.clients.count,
        cfg.method.name()
    );
    let run = run_experiment_with(&cfg, &data)?;
    create_dir(&out)?;
    run.report.write_dir(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    let records = run.clients.iter().map(ClientRecord::of).collect();
    let ck = Checkpoint::new(&run.model, run.server.round(), run.server.params(), records);
    write_checkpoint(&out.join("checkpoint.fskl"), &ck)?;

    let s = &run.report.summary;
    let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v));
    println!(
        "{}: {} rounds, local {}, new {}, {} params exchanged ({:.2}% below full exchange), back-prop FLOPs {:.1}% of dense",
        s.label,
        s.rounds,
        pct(s.final_local_acc),
        pct(s.final_new_acc),
        s.params_total,
        100.0 * s.reduction,
        100.0 * s.flop_ratio
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn bench(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => BenchConfig::from_file(&p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = seed {
        cfg.bench.seed = s;
    }
    let model = cfg.model.build()?;
    // Stable timings: everything on the calling thread.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let result = pool.install(|| run_bench(&model, &cfg.bench))?;
    create_dir(out)?;
    result.write_csv(&out.join("bench.csv"))?;
    print!("{}", result.render_table());
    println!("wrote {}", out.join("bench.csv").display());
    Ok(())
}

fn report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let rows = collect_summaries(runs)?;
    print!("{}", render_table(&rows));
    if let Some(dir) = out {
        create_dir(&dir)?;
        fs::write(dir.join("report.csv"), render_csv(&rows)?).context("writing report.csv")?;
    }
    Ok(())
}

fn shards(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = load_data(&cfg)?;
    let stats = shard_stats(&cfg, &data.train)?;
    let distinct = stats.distinct_labels();
    println!("client  train  holdout  labels  histogram");
    for (id, ((tr, ho, h), d)) in stats.clients.iter().zip(&distinct).enumerate() {
        println!("{id:>6}  {tr:>5}  {ho:>7}  {d:>6}  {h:?}");
    }
    let mean = distinct.iter().sum::<usize>() as f64 / distinct.len() as f64;
    println!("mean distinct labels per client: {mean:.2}");
    if let Some(dir) = out {
        create_dir(&dir)?;
        stats.write_csv(&dir.join("shard_stats.csv"))?;
    }
    Ok(())
}

fn run(args: Args) -> Result<()> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match args.command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Bench { config, seed, out } => bench(config, seed, &out),
        Command::Report { runs, out } => report(&runs, out),
        Command::ShardStats { config, seed, out } => shards(&config, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

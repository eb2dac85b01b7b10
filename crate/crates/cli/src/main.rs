use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sleepgate::config::DepthList;
use sleepgate::data::{self, EpisodeKind};
use sleepgate::decode::stream_episode;
use sleepgate::eval::{emit_report, evaluate, parse_results_csv, slopes, summarize, Cell};
use sleepgate::scheduler::SleepMode;
use sleepgate::system::EvalMode;
use sleepgate::training::{train, TrainOptions};
use sleepgate::{checkpoint, gradsuite, theory, HyperParams, Method, ModelConfig};

#[derive(Parser)]
#[command(name = "sleepgate", version, about = "Learned KV-cache forgetting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct HpArgs {
    /// Flat `key = value` file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CycleMode {
    Soft,
    Hard,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an episode file.
    GenData {
        #[arg(long, default_value = "pi")]
        kind: EpisodeKind,
        #[arg(long, default_value = "1,2,5,10,15,20,30")]
        depths: DepthList,
        #[arg(long, default_value_t = 200)]
        per_depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method and write checkpoints plus a run log.
    Train {
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        hp: HpArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on an episode file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        episodes: PathBuf,
        #[command(flatten)]
        hp: HpArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge per-method results into one table with slopes and plot data.
    Report {
        /// Comma-separated directories holding `results.csv`.
        #[arg(long = "in", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every kernel and the composed gate path.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Monte-Carlo check of the stale-entry bound over the default grid.
    Theory {
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token-by-token decoding of one episode with adaptive sleep triggers.
    StreamingDemo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        depth: usize,
        #[arg(long, value_enum, default_value = "soft")]
        mode: CycleMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        hp: HpArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl HpArgs {
    fn resolve(&self) -> Result<HyperParams, Failure> {
        let mut hp = match &self.config {
            None => HyperParams::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| runtime(format!("reading {}: {e}", p.display())))?;
                HyperParams::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
            }
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            hp.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        hp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(hp)
    }
}

fn write_config(dir: &Path, header: &[(&str, String)], hp: Option<&HyperParams>) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))?;
    let mut text = String::new();
    for (k, v) in header {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    if let Some(hp) = hp {
        text.push_str(&hp.to_text());
    }
    let p = dir.join("config.txt");
    fs::write(&p, text).map_err(|e| runtime(format!("writing {}: {e}", p.display())))
}

fn gen_data(kind: EpisodeKind, depths: &DepthList, per_depth: usize, seed: u64, out: &Path) -> Outcome {
    let eps = data::gen_set(kind, &depths.0, per_depth, seed).map_err(runtime)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    data::save(&eps, out).map_err(runtime)?;
    let cfg = format!("# kind = {kind}\n# depths = {depths}\n# per_depth = {per_depth}\n# seed = {seed}\n");
    let mut side = out.as_os_str().to_owned();
    side.push(".config.txt");
    fs::write(PathBuf::from(side), cfg).map_err(runtime)?;
    println!("wrote {} episodes to {}", eps.len(), out.display());
    Ok(())
}

fn print_cells(cells: &[Cell]) {
    println!("{:<10} {:>5} {:>6} {:>9} {:>7}", "method", "depth", "n", "accuracy", "stale");
    for c in cells {
        println!(
            "{:<10} {:>5} {:>6} {:>8.1}% {:>6.1}%",
            c.method,
            c.depth,
            c.episodes,
            100.0 * c.accuracy,
            100.0 * c.stale_rate
        );
    }
}

fn eval_cmd(ckpt: &Path, method: Method, episodes: &Path, hp: &HyperParams, out: &Path, jobs: usize) -> Outcome {
    let cfg = ModelConfig::default();
    let params = checkpoint::load(ckpt).map_err(runtime)?;
    let eps = data::load(episodes).map_err(runtime)?;
    write_config(
        out,
        &[
            ("method", method.to_string()),
            ("checkpoint", ckpt.display().to_string()),
            ("episodes", episodes.display().to_string()),
            ("jobs", jobs.to_string()),
        ],
        Some(hp),
    )?;
    let records = evaluate(&params, &cfg, hp, EvalMode::for_method(method, hp), &eps, jobs).map_err(runtime)?;
    let mut per = String::from("index,depth,length,predicted,gold,correct,stale\n");
    for (i, r) in records.iter().enumerate() {
        per.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            r.depth, r.length, r.predicted, r.gold, r.correct as u8, r.stale as u8
        ));
    }
    fs::write(out.join("episodes.csv"), per).map_err(runtime)?;
    let cells = summarize(method.name(), &records);
    for w in emit_report(&cells, out).map_err(runtime)? {
        eprintln!("warning: {w}");
    }
    print_cells(&cells);
    Ok(())
}

fn report_cmd(inputs: &[PathBuf], out: &Path) -> Outcome {
    let mut cells = Vec::new();
    for dir in inputs {
        let p = dir.join("results.csv");
        let text = fs::read_to_string(&p).map_err(|e| runtime(format!("reading {}: {e}", p.display())))?;
        cells.extend(parse_results_csv(&text).map_err(|e| runtime(format!("{}: {e}", p.display())))?);
    }
    let dirs: Vec<String> = inputs.iter().map(|d| d.display().to_string()).collect();
    write_config(out, &[("inputs", dirs.join(","))], None)?;
    for w in emit_report(&cells, out).map_err(runtime)? {
        eprintln!("warning: {w}");
    }
    print_cells(&cells);
    for (m, all, low) in slopes(&cells) {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.4}"));
        println!("slope {m:<10} all depths {}  depths 1-10 {}", f(all), f(low));
    }
    Ok(())
}

fn gradcheck_cmd(seeds: u64) -> Outcome {
    let reports = gradsuite::run_suite(seeds).map_err(runtime)?;
    let mut failed = 0;
    for r in &reports {
        println!("{r}");
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn theory_cmd(grid: &str, trials: usize, resamples: usize, seed: u64, jobs: usize, out: &Path) -> Outcome {
    if grid != "default" {
        return Err(Failure::Usage(format!("unknown grid {grid:?}; only \"default\" exists")));
    }
    write_config(
        out,
        &[
            ("grid", grid.to_string()),
            ("trials", trials.to_string()),
            ("resamples", resamples.to_string()),
            ("seed", seed.to_string()),
        ],
        None,
    )?;
    let rows = theory::run_grid(trials, resamples, seed, jobs).map_err(runtime)?;
    fs::write(out.join("theory.csv"), theory::grid_csv(&rows)).map_err(runtime)?;
    let mut violations = 0;
    for r in &rows {
        let ok = r.holds(0.99);
        violations += usize::from(!ok);
        println!(
            "p_c={:<5} N={:<4} n={:<5} mean={:>9.4} bound={:>9.4} support={:.3} {}",
            r.p_correct,
            r.interval,
            r.updates,
            r.mc_mean,
            r.bound,
            r.support,
            if ok { "ok" } else { "VIOLATED" }
        );
    }
    for (nn, slope) in theory::flatness(&rows, 0.99) {
        println!("p_c=0.99 N={nn}: survivors slope vs n = {slope:.6}");
    }
    let cb = theory::cache_bound(1, 0.3, 4.0).map_err(runtime)?;
    println!("cache bound at f_e=0.3, c=4: {cb:.4} N");
    if violations > 0 {
        return Err(runtime(format!("{violations} grid points exceed the bound at the 99% level")));
    }
    Ok(())
}

fn streaming_cmd(ckpt: &Path, depth: usize, mode: CycleMode, seed: u64, hp: &HyperParams) -> Outcome {
    let cfg = ModelConfig::default();
    let params = checkpoint::load(ckpt).map_err(runtime)?;
    let ep = data::seeded_pi(seed, "streaming-demo", 0, depth).map_err(runtime)?;
    let mode = match mode {
        CycleMode::Soft => SleepMode::Soft,
        CycleMode::Hard => SleepMode::Hard,
    };
    let rep = stream_episode(&params, &cfg, hp, &ep, mode).map_err(runtime)?;
    for e in &rep.events {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!(
            "step {:>4} trigger {:<8} entropy {:.4} density {:.3} cache {:>4} mean r flagged {} unflagged {}",
            e.step,
            format!("{:?}", e.reason).to_lowercase(),
            e.entropy,
            e.density,
            e.cache_size,
            f(e.mean_r_flagged),
            f(e.mean_r_unflagged)
        );
    }
    let gold = ep.queries[0].gold;
    let pred = rep.predictions[0];
    println!(
        "depth {depth}: {} events, final cache {} entries, predicted {pred}, gold {gold} ({})",
        rep.events.len(),
        rep.final_cache_size,
        if pred == gold { "correct" } else { "wrong" }
    );
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { kind, depths, per_depth, seed, out } => gen_data(kind, &depths, per_depth, seed, &out),
        Command::Train { method, hp, seed, out, quiet } => {
            let hp = hp.resolve()?;
            let opts = TrainOptions { method, seed, out_dir: out, verbose: !quiet };
            let s = train(&ModelConfig::default(), &hp, &opts).map_err(runtime)?;
            println!("trained {method} for {} epochs -> {}", s.epochs, s.final_checkpoint.display());
            Ok(())
        }
        Command::Eval { checkpoint, method, episodes, hp, out, jobs } => {
            let hp = hp.resolve()?;
            eval_cmd(&checkpoint, method, &episodes, &hp, &out, jobs.max(1))
        }
        Command::Report { inputs, out } => report_cmd(&inputs, &out),
        Command::Gradcheck { seeds } => gradcheck_cmd(seeds),
        Command::Theory { grid, trials, resamples, seed, jobs, out } => {
            theory_cmd(&grid, trials, resamples, seed, jobs.max(1), &out)
        }
        Command::StreamingDemo { checkpoint, depth, mode, seed, hp } => {
            let hp = hp.resolve()?;
            streaming_cmd(&checkpoint, depth, mode, seed, &hp)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

mod checks;

use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mcofl::harness::{format_summary, read_run_csv, run_to_dir, summarize, PolicySpec, RunRecord};
use mcofl::{load_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mcofl", version, about = "Multi-provider federated learning co-optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or roll out one policy and write its CSV and round log.
    Run(RunArgs),
    /// Run several policies over a seed range and print the comparison table.
    Compare(CompareArgs),
    /// Contraction, fixed-point and equilibrium-selection checks on small games.
    TabularVerify(SeedArg),
    /// Randomized check of the conjecture error bound.
    BoundCheck(SeedArg),
    /// Finite-difference checks of the network and critic-loss gradients.
    Gradcheck(SeedArg),
    /// Hypervolume fixtures, or the HVI table of the run CSVs in `--out`.
    Hvi(HviArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed range, `N..M` (exclusive) or `N..=M` (inclusive).
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Range<u64>>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(load_config(&text)?)
            }
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn seed_list(&self, default: Range<u64>) -> Vec<u64> {
        match (&self.seeds, self.seed) {
            (Some(r), _) => r.clone().collect(),
            (None, Some(s)) => vec![s],
            (None, None) => default.collect(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "pac")]
    policy: String,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Policies to compare; repeatable. Defaults to all six.
    #[arg(long)]
    policy: Vec<String>,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct HviArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_seeds(s: &str) -> std::result::Result<Range<u64>, String> {
    let bad = || format!("expected N..M or N..=M, got {s:?}");
    let (lo, hi, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let hi = if inclusive { hi + 1 } else { hi };
    if hi <= lo {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok(lo..hi)
}

/// Runs every (policy, seed) pair, spreading seeds over the available cores.
fn run_all(cfg: &ExperimentConfig, policies: &[PolicySpec], seeds: &[u64], out: &Path) -> Result<Vec<RunRecord>> {
    let jobs: Vec<(PolicySpec, u64)> = policies.iter().flat_map(|p| seeds.iter().map(move |s| (*p, *s))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(workers) {
        let done: Vec<Result<RunRecord>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(p, s)| scope.spawn(move || run_to_dir(cfg, p, s, out).with_context(|| format!("{p} seed {s}"))))
                .collect();
            handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
        });
        for (r, (p, s)) in done.into_iter().zip(chunk) {
            let r = r?;
            eprintln!("{p} seed {s}: final-fifth total reward {:.3}", r.final_fifth_total());
            results.push(r);
        }
    }
    Ok(results)
}

fn write_summary(records: &[RunRecord], out: &Path) -> Result<()> {
    let rows = summarize(records)?;
    print!("{}", format_summary(&rows));
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn report(results: Vec<checks::Check>) -> Result<()> {
    let mut failed = 0;
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = args.common.config()?;
            let policy: PolicySpec = args.policy.parse()?;
            let seeds = args.common.seed_list(cfg.seed..cfg.seed + 1);
            let records = run_all(&cfg, &[policy], &seeds, &args.common.out)?;
            write_summary(&records, &args.common.out)
        }
        Command::Compare(args) => {
            let cfg = args.common.config()?;
            let policies: Vec<PolicySpec> = if args.policy.is_empty() {
                PolicySpec::ALL.to_vec()
            } else {
                args.policy.iter().map(|p| p.parse()).collect::<mcofl::Result<_>>()?
            };
            let seeds = args.common.seed_list(0..5);
            let records = run_all(&cfg, &policies, &seeds, &args.common.out)?;
            write_summary(&records, &args.common.out)
        }
        Command::TabularVerify(a) => report(checks::tabular(a.seed)?),
        Command::BoundCheck(a) => report(checks::bound(a.seed)?),
        Command::Gradcheck(a) => report(checks::gradients(a.seed)?),
        Command::Hvi(a) => match a.out {
            Some(dir) => {
                let mut records = Vec::new();
                for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
                    let path = entry?.path();
                    if path.extension().is_some_and(|e| e == "csv") {
                        records.push(read_run_csv(&path).with_context(|| format!("reading {}", path.display()))?);
                    }
                }
                if records.is_empty() {
                    bail!("no run CSVs in {}", dir.display());
                }
                records.sort_by(|a, b| (a.policy.name(), a.seed).cmp(&(b.policy.name(), b.seed)));
                let rows = summarize(&records)?;
                print!("{}", format_summary(&rows));
                Ok(())
            }
            None => report(checks::hvi(a.seed)?),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..5").unwrap(), 0..5);
        assert_eq!(parse_seeds("2..=4").unwrap(), 2..5);
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("x").is_err());
    }
}

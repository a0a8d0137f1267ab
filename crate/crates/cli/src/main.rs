use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use irsim_core::power::BUILTIN_TRACES;
use irsim_core::{
    compare, comparison_csv, comparison_table, run_experiment, run_to_files, ExperimentConfig, MetricsReport, Scheme, Variant,
};

#[derive(Parser)]
#[command(name = "irsim", version, about = "Intermittent-computing runtime simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        trace: Option<String>,
        #[arg(long)]
        duration_ms: Option<u64>,
        #[arg(long)]
        crash_schedule: Option<PathBuf>,
        /// Directory for report.json and events.ndjson.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several schemes on the same trace and seed and tabulate them.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "ours,sys,log")]
        schemes: Vec<Scheme>,
        /// Checkpoint periods for SYS and LOG; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        periods: Vec<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<String>,
        #[arg(long)]
        duration_ms: Option<u64>,
        /// Directory for comparison.csv and one report per variant.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Builtin power traces.
    Traces {
        #[command(subcommand)]
        cmd: TracesCmd,
    },
    /// Print the default configuration file.
    Defaults,
}

#[derive(Subcommand)]
enum TracesCmd {
    List,
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, trace: Option<String>, duration_ms: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = trace {
        cfg.trace = t;
    }
    if let Some(d) = duration_ms {
        cfg.duration_ms = d;
    }
}

fn summary(r: &MetricsReport) -> String {
    let mut s = format!(
        "{} on {} for {} ms (seed {})\n",
        r.scheme,
        r.trace,
        r.duration_ms,
        r.seed
    );
    s += &format!(
        "finished {} ({:.2}/s; short {:.2}/s, lengthy {:.2}/s)\n",
        r.finished_total, r.forward_progress, r.short_class_progress, r.lengthy_class_progress
    );
    for (name, w) in &r.workloads {
        s += &format!("  {name:<10} {:>7}\n", w.finished);
    }
    s += &format!(
        "power failures {}, suspension {:.2} ms, recovery {:.2} ms, recentness {:.2} ms\n",
        r.power_failures, r.suspension_ms, r.recovery_ms, r.recentness_ms
    );
    s += &format!(
        "aborts: validation {}, early {}, power {}\n",
        r.aborts.validation, r.aborts.early, r.aborts.power
    );
    s += &format!("digest {}\n", r.digest);
    s
}

fn variants(schemes: &[Scheme], periods: &[u64], cfg: &ExperimentConfig) -> Vec<Variant> {
    let periods = if periods.is_empty() {
        vec![cfg.checkpoint.period_ms]
    } else {
        periods.to_vec()
    };
    let mut out = Vec::new();
    for &scheme in schemes {
        if scheme.checkpoints() {
            for &p in &periods {
                out.push(Variant {
                    scheme,
                    period_ms: Some(p),
                });
            }
        } else {
            out.push(Variant {
                scheme,
                period_ms: None,
            });
        }
    }
    out
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run {
            config,
            seed,
            scheme,
            trace,
            duration_ms,
            crash_schedule,
            out,
        } => {
            let mut cfg = load(config.as_deref())?;
            overrides(&mut cfg, seed, trace, duration_ms);
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(c) = crash_schedule {
                cfg.crash_schedule = Some(fs::canonicalize(&c).with_context(|| format!("reading {}", c.display()))?);
            }
            cfg.validate()?;
            let r = match &out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    run_to_files(&cfg, &dir.join("report.json"), Some(&dir.join("events.ndjson")))?
                }
                None => run_experiment(&cfg)?,
            };
            print!("{}", summary(&r));
        }
        Cmd::Compare {
            config,
            schemes,
            periods,
            seed,
            trace,
            duration_ms,
            out,
        } => {
            if schemes.is_empty() {
                bail!("no schemes given");
            }
            let mut cfg = load(config.as_deref())?;
            overrides(&mut cfg, seed, trace, duration_ms);
            cfg.validate()?;
            let rows = compare(&cfg, &variants(&schemes, &periods, &cfg))?;
            print!("{}", comparison_table(&rows));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("comparison.csv"), comparison_csv(&rows))?;
                for (v, r) in &rows {
                    let name = v.label().to_lowercase().replace(['(', ')'], "_");
                    fs::write(
                        dir.join(format!("{}.json", name.trim_end_matches('_'))),
                        serde_json::to_string_pretty(r)?,
                    )?;
                }
            }
        }
        Cmd::Traces { cmd: TracesCmd::List } => {
            for (name, w, desc) in BUILTIN_TRACES {
                println!("{name:<8} {:>5.1} mW  {desc}", w * 1e3);
            }
        }
        Cmd::Defaults => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periods_expand_only_checkpointing_schemes() {
        let cfg = ExperimentConfig::default();
        let v = variants(&[Scheme::Ours, Scheme::Log, Scheme::NaiveRerun], &[20, 200], &cfg);
        let labels: Vec<String> = v.iter().map(Variant::label).collect();
        assert_eq!(labels, ["OURS", "LOG(20ms)", "LOG(200ms)", "NAIVE_RERUN"]);
        assert_eq!(variants(&[Scheme::Sys], &[], &cfg)[0].period_ms, Some(cfg.checkpoint.period_ms));
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use teamadapt::env::SuddenChangeDist;
use teamadapt::eval::{cross_play, emit_report, ood_sweep, CrossPlayUnit};
use teamadapt::teammates::TeammatePool;
use teamadapt::trainer::{run_training, Checkpoint, TrainConfig, Trainer};
use teamadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "teamadapt", version, about = "Train and evaluate teams that adapt to changing teammates")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Lbf,
    Pp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config, optionally resuming a checkpoint. When
    /// resuming, only `trainer.total_env_steps` is taken from the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory (metrics, pool, checkpoints). Defaults to the resumed
        /// checkpoint's run, else runs/<config stem>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under several change distributions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "stationary,U5-8,U3-3")]
        dists: Vec<String>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Teammate pool directory. Defaults to the run's `pool/`.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Where `eval_report.json` goes. Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune one policy per unit and play every policy with every unit.
    ///
    /// A unit is `family:<name>`, `cluster:<id>` or `groups:<id>+<id>+...`.
    Crossplay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        units: Vec<String>,
        #[arg(long, default_value_t = 10_000)]
        finetune_steps: u64,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render CSV tables, plots and summary.json from a run directory.
    Report { dir: PathBuf },
    /// Print a default config to stdout.
    Config {
        #[arg(value_enum, default_value = "lbf")]
        preset: Preset,
    },
}

/// `runs/x/checkpoints/ckpt.json` -> `runs/x`.
fn run_dir_of(ckpt: &Path) -> PathBuf {
    ckpt.parent().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_inputs(ckpt: &Path, pool: Option<PathBuf>) -> Result<(Checkpoint, TeammatePool)> {
    let ck = Checkpoint::load(ckpt)?;
    let pool_dir = pool.unwrap_or_else(|| run_dir_of(ckpt).join("pool"));
    Ok((ck, TeammatePool::load(&pool_dir)?))
}

fn majority_cluster(pool: &TeammatePool, groups: &[usize]) -> Result<usize> {
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for g in groups {
        if let Some(c) = pool.get(*g).and_then(|g| g.meta.cluster_id) {
            *votes.entry(c).or_default() += 1;
        }
    }
    votes.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))).map(|(c, _)| c).ok_or(Error::Empty("clustered groups in unit"))
}

fn parse_unit(text: &str, pool: &TeammatePool) -> Result<CrossPlayUnit> {
    let bad = || Error::InvalidArgument(format!("bad unit `{text}`; use family:<name>, cluster:<id> or groups:<id>+<id>"));
    let (kind, arg) = text.split_once(':').ok_or_else(bad)?;
    let (groups, cluster) = match kind {
        "family" => {
            let g: Vec<usize> = pool.groups.iter().filter(|g| g.meta.family == arg).map(|g| g.id()).collect();
            let c = majority_cluster(pool, &g)?;
            (g, c)
        }
        "cluster" => {
            let c: usize = arg.parse().map_err(|_| bad())?;
            (pool.groups.iter().filter(|g| g.meta.cluster_id == Some(c)).map(|g| g.id()).collect(), c)
        }
        "groups" => {
            let g = arg.split('+').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
            if let Some(missing) = g.iter().find(|id| pool.get(**id).is_none()) {
                return Err(Error::InvalidArgument(format!("no group {missing} in pool")));
            }
            let c = majority_cluster(pool, &g)?;
            (g, c)
        }
        _ => return Err(bad()),
    };
    if groups.is_empty() {
        return Err(Error::InvalidArgument(format!("unit `{text}` matches no groups")));
    }
    Ok(CrossPlayUnit { label: text.to_string(), groups, cluster })
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, resume, out } => {
            let cfg = TrainConfig::load(&config)?;
            // a resumed run reloads its pool and registry from the run directory
            let dir = out.or_else(|| resume.as_deref().map(run_dir_of)).unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
                PathBuf::from("runs").join(stem)
            });
            let summary = match resume {
                // networks and pool come from the checkpoint; the file only
                // extends the step budget
                Some(ck) => {
                    let mut t = Trainer::resume(&ck, dir.clone())?;
                    t.config.trainer.total_env_steps = cfg.trainer.total_env_steps;
                    t.run()?
                }
                None => run_training(cfg, &dir, None)?,
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
            eprintln!("run directory: {}", dir.display());
        }
        Cmd::Eval { ckpt, dists, episodes, seed, pool, out } => {
            let (ck, pool) = load_inputs(&ckpt, pool)?;
            let dists = dists.iter().map(|d| SuddenChangeDist::parse(d)).collect::<Result<Vec<_>>>()?;
            let rep = ood_sweep(&ck.learner, &ck.config.env, &pool, &dists, episodes, seed)?;
            for r in &rep.rows {
                println!("{:<12} {:>8.4} +- {:.4}", r.label, r.mean, r.std);
            }
            for (label, d) in &rep.degradation {
                println!("degradation {label}: {d:.4}");
            }
            let path = write_json(&out.unwrap_or_else(|| run_dir_of(&ckpt)), "eval_report.json", &rep)?;
            eprintln!("wrote {}", path.display());
        }
        Cmd::Crossplay { ckpt, units, finetune_steps, episodes, seed, pool, out } => {
            let (ck, pool) = load_inputs(&ckpt, pool)?;
            let units = units.iter().map(|u| parse_unit(u, &pool)).collect::<Result<Vec<_>>>()?;
            let m = cross_play(&ck.learner, &ck.bank, &ck.config, &pool, &units, finetune_steps, episodes, seed)?;
            for (label, row) in m.labels.iter().zip(&m.values) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                println!("{label:<24} {}", cells.join("  "));
            }
            println!("diagonal {:.4}  off-diagonal {:.4}", m.diagonal_mean(), m.off_diagonal_mean());
            let path = write_json(&out.unwrap_or_else(|| run_dir_of(&ckpt)), "crossplay.json", &m)?;
            eprintln!("wrote {}", path.display());
        }
        Cmd::Report { dir } => {
            let s = emit_report(&dir)?;
            for p in &s.written {
                println!("wrote {}", p.display());
            }
            for m in &s.missing {
                eprintln!("skipped (missing): {m}");
            }
        }
        Cmd::Config { preset } => {
            let c = match preset {
                Preset::Lbf => TrainConfig::lbf_default(),
                Preset::Pp => TrainConfig::pp_default(),
            };
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

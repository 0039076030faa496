//! `xlate`: conditioning extraction, training, inference, evaluation and
//! fixture generation from one binary.
//!
//! Exit codes: 0 success, 1 hard failure, 2 completed with warnings.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use xlate::config::{RunConfig, Variant};
use xlate::dataset::{extract_all, Dataset, Split};
use xlate::domain::{DomainId, ImageTensor};
use xlate::evaluation::{emit_grid, pairwise_protocol, ProtocolOptions};
use xlate::exec::Execution;
use xlate::inference::{parse_tasks, run_tasks};
use xlate::trainer::{build_variant, checkpoint, train, TrainingSet};
use xlate::{fixtures, Error};

const CHECKPOINT_FILE: &str = "checkpoint.xlckpt";
const METRICS_FILE: &str = "metrics.jsonl";
const FID_FILE: &str = "fid.jsonl";

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Parser)]
#[command(name = "xlate", version, about = "Exemplar-guided domain translation")]
struct Cli {
    /// Overrides the run seed (training) or the fixture seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "cpu")]
    device: Device,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a conditioning cache for every image in the dataset.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root; defaults to the config's `data_root`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train, writing a checkpoint and per-step metrics to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a task file of `<domain>/<content_id> <style_id> <style_domain> <output>` lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write every injection's scale and bias maps as `.npy`.
        #[arg(long)]
        dump_denorm: bool,
    },
    /// Pairwise content x style protocol with Fréchet distance.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 100)]
        n_content: usize,
        #[arg(long, default_value_t = 100)]
        n_style: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid rows and columns (capped by the set sizes).
        #[arg(long, default_value_t = 6)]
        grid: usize,
    },
    /// Write a procedural stick-figure dataset and a matching config.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "a,b")]
        domains: Vec<String>,
        #[arg(long, default_value_t = 16)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value = "E")]
        variant: String,
    },
}

enum Outcome {
    Clean,
    Warnings(usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .init();
    match run(cli) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Warnings(n)) => {
            eprintln!("completed with {n} warning(s)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let Device::Cpu = cli.device;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Extract { config, data } => {
            let cfg = load_config(&config, cli.seed)?;
            let ds = open_dataset(data.as_deref(), &cfg)?;
            let manifest = cfg.manifest()?;
            let s = extract_all(&ds, &manifest, exec)?;
            println!("wrote {} conditioning caches", s.written);
            for (m, n) in &s.present {
                let rate = if s.written == 0 {
                    0.0
                } else {
                    *n as f64 / s.written as f64
                };
                println!(
                    "  {m:<16} present in {n}/{} ({:.1}%)",
                    s.written,
                    100.0 * rate
                );
            }
            if !s.failures.is_empty() {
                bail!("{} image(s) failed extraction", s.failures.len());
            }
            Ok(outcome(s.warnings.len()))
        }
        Command::Train {
            config,
            out,
            resume,
        } => cmd_train(&config, &out, resume.as_deref(), cli.seed, exec),
        Command::Infer {
            checkpoint: ckpt,
            tasks,
            out,
            data,
            dump_denorm,
        } => {
            let text = std::fs::read_to_string(&tasks)
                .with_context(|| format!("reading {}", tasks.display()))?;
            let state = checkpoint::load(&ckpt, None)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = open_dataset(data.as_deref(), state.model.config())?;
            let (parsed, mut warnings) = parse_tasks(&text);
            let rep = run_tasks(&state.model, &ds, &parsed, &out, dump_denorm, exec);
            warnings.extend(rep.warnings);
            for w in &warnings {
                warn!("{w}");
            }
            for (p, regime) in &rep.written {
                info!("{regime:?}: {}", p.display());
            }
            println!(
                "wrote {} image(s), skipped {}",
                rep.written.len(),
                warnings.len()
            );
            Ok(outcome(warnings.len()))
        }
        Command::Evaluate {
            checkpoint: ckpt,
            source,
            target,
            n_content,
            n_style,
            out,
            data,
            grid,
        } => {
            let state = checkpoint::load(&ckpt, None)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let model = &state.model;
            let (source, target) = (DomainId::new(source), DomainId::new(target));
            model.bundle(&source)?;
            model.bundle(&target)?;
            let ds = open_dataset(data.as_deref(), model.config())?;
            let manifest = model.manifest();
            let take = |d: &DomainId, split: Split, n: usize, what: &str| -> Result<Vec<String>> {
                let ids = ds.ids(d, split)?;
                if ids.len() < n {
                    return Err(Error::TooFew {
                        what: format!("{what} images in {d}/{}", split.as_str()),
                        needed: n,
                        found: ids.len(),
                    }
                    .into());
                }
                Ok(ids.into_iter().take(n).collect())
            };
            let content_ids = take(&source, Split::Val, n_content, "validation")?;
            let style_ids = take(&target, Split::Val, n_style, "validation")?;
            let load = |d: &DomainId, ids: &[String]| -> Result<Vec<_>> {
                Ok(ids
                    .iter()
                    .map(|id| ds.load_sample(d, id, manifest))
                    .collect::<xlate::Result<Vec<_>>>()?)
            };
            let content = load(&source, &content_ids)?;
            let style = load(&target, &style_ids)?;
            let reference: Vec<ImageTensor> = ds
                .ids(&target, Split::Train)?
                .iter()
                .map(|id| ds.load_image(&target, id))
                .collect::<xlate::Result<_>>()?;
            let reference: Vec<&ImageTensor> = reference.iter().collect();
            let (gr, gc) = (grid.min(content.len()), grid.min(style.len()));
            let opts = ProtocolOptions {
                exec,
                archive: Some(out.join("archive")),
                keep: (gr, gc),
                ..Default::default()
            };
            std::fs::create_dir_all(&out)?;
            let res = pairwise_protocol(model, &content, &style, &reference, &opts)?;
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(out.join(FID_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&res.record)?)?;
            let rows: Vec<_> = content[..gr]
                .iter()
                .map(|s| (s.id.clone(), Some(&s.image)))
                .collect();
            let cols: Vec<_> = style[..gc]
                .iter()
                .map(|s| (s.id.clone(), Some(&s.image)))
                .collect();
            let g = emit_grid(
                &out.join("grid.png"),
                model.resolution(),
                &rows,
                &cols,
                &res.kept,
            )?;
            match res.record.fid {
                Some(fid) => println!(
                    "{source} -> {target}: {} pairs, FID {fid:.4}",
                    res.record.n_pairs
                ),
                None => println!(
                    "{source} -> {target}: {} pairs, FID unavailable",
                    res.record.n_pairs
                ),
            }
            Ok(outcome(res.warnings.len() + g.warnings.len()))
        }
        Command::Fixtures {
            out,
            domains,
            train,
            val,
            resolution,
            variant,
        } => {
            let variant: Variant = variant.parse()?;
            let names: Vec<&str> = domains.iter().map(String::as_str).collect();
            let mut cfg = if resolution == 32 {
                fixtures::tiny_config(variant, &names)
            } else {
                let mut c = fixtures::desk_config(variant, &names);
                c.resolution = resolution;
                c.modalities = RunConfig::new(
                    resolution,
                    variant,
                    &names,
                    &fixtures::fixture_manifest(resolution),
                )
                .modalities;
                c
            };
            cfg.seed = cli.seed.unwrap_or(0);
            cfg.data_root = Some(PathBuf::from("."));
            cfg.validate()?;
            fixtures::write_dataset(&out, &names, train, val, resolution, cfg.seed)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            println!(
                "wrote {} domain(s) and {}",
                names.len(),
                out.join("config.toml").display()
            );
            Ok(Outcome::Clean)
        }
    }
}

fn outcome(warnings: usize) -> Outcome {
    if warnings == 0 {
        Outcome::Clean
    } else {
        Outcome::Warnings(warnings)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn open_dataset(explicit: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    let root = explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.data_root.clone())
        .context("no dataset root: pass --data or set `data_root` in the config")?;
    Ok(Dataset::open(root, cfg.resolution)?)
}

fn cmd_train(
    config: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    exec: Execution,
) -> Result<Outcome> {
    // Everything that can be rejected is checked before anything is written.
    let cfg = load_config(config, seed)?;
    let ds = open_dataset(None, &cfg)?;
    for d in &cfg.domains {
        if !ds.has_domain(d) {
            bail!(
                "domain `{d}` has no split file under {}",
                ds.root().display()
            );
        }
    }
    let mut state = match resume {
        Some(p) => {
            let mut s = checkpoint::load(p, Some(&cfg))
                .with_context(|| format!("resuming from {}", p.display()))?;
            if s.model.config().seed != cfg.seed {
                warn!(
                    "resuming with seed {} (checkpoint has {})",
                    cfg.seed,
                    s.model.config().seed
                );
            }
            s.model.set_steps(cfg.steps);
            s
        }
        None => build_variant(&cfg)?,
    };
    let manifest = cfg.manifest()?;
    let mut data = TrainingSet::new();
    for d in &cfg.domains {
        let samples = ds.load_split(d, Split::Train, &manifest, exec)?;
        if samples.is_empty() {
            warn!("domain `{d}` has no training images");
        }
        data.insert(d.clone(), samples);
    }
    let counts: BTreeMap<_, _> = data.iter().map(|(d, s)| (d.as_str(), s.len())).collect();
    info!(
        "training variant {} on {counts:?} from step {}",
        cfg.variant, state.step
    );

    std::fs::create_dir_all(out)?;
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(METRICS_FILE))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    train(
        &mut state,
        &data,
        cfg.steps,
        Some(&mut metrics),
        Some(&ckpt),
    )?;
    println!(
        "trained to step {}; checkpoint {}",
        state.step,
        ckpt.display()
    );
    Ok(Outcome::Clean)
}

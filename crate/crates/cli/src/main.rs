//! `deflect`: command-line experiment runner.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deflect::asyncsim::Strategy;
use deflect::diffnet::PolicyParams;
use deflect::env::Dataset;
use deflect::evalanal::{Method, REFERENCE};
use deflect::experiment::{Battery, Experiment, ExperimentConfig, Threshold, VariantSpec};
use deflect::par::{init_thread_pool, Execution};
use deflect::trainer::TrainMode;
use deflect::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "deflect", version, about = "Delay-robust action-chunk policy experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record expert demonstrations.
    GenDemos {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: Option<u64>,
    },
    /// Train the reference or a post-training variant.
    Train {
        /// reference-bc, deflect, sft-continue, no-anchor, matched-input,
        /// clean-preference or narrow-delay.
        #[arg(long)]
        mode: TrainMode,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda_dpo: Option<f64>,
        /// Pairs below this contrast are left out of the preference term.
        #[arg(long)]
        contrast_threshold: Option<f64>,
    },
    /// Delay sweep over trained checkpoints.
    Eval {
        /// `a..b` (inclusive) or a comma list.
        #[arg(long)]
        delays: Option<DelayList>,
        /// Comma list: oracle, naive, rollforward, reference, or a trained variant.
        #[arg(long, value_delimiter = ',', default_value = "reference")]
        methods: Vec<String>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
    },
    /// Train and compare an ablation battery.
    Ablate {
        /// anchor, matched-input, lambda-sweep, contrast-filter, zero-shot or restart.
        #[arg(long)]
        battery: Battery,
        /// Contrast-filter thresholds, e.g. `p10,p50` or absolute values.
        #[arg(long, value_delimiter = ',', default_value = "p10,p50")]
        thresholds: Vec<Threshold>,
    },
    /// Mechanism probe of a trained variant against the reference.
    Probe {
        #[arg(long, default_value = "deflect")]
        variant: String,
    },
    /// Concatenate every rendered table of this experiment into one report.
    Report,
}

/// Evaluation delays given as `a..b` (inclusive) or `a,b,c`.
#[derive(Debug, Clone)]
struct DelayList(Vec<usize>);

impl std::str::FromStr for DelayList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_delays(s).map(DelayList)
    }
}

fn parse_delays(s: &str) -> std::result::Result<Vec<usize>, String> {
    let err = |_| format!("bad delay list '{s}'");
    let v: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(err)?, b.trim().parse().map_err(err)?);
        if a > b {
            return Err(format!("empty delay range '{s}'"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(err)).collect::<std::result::Result<_, _>>()?
    };
    if v.is_empty() {
        return Err("no delays given".into());
    }
    Ok(v)
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} not found; run the earlier pipeline stage first", path.display())))
    }
}

fn load_dataset(x: &Experiment) -> Result<Dataset> {
    let p = x.dataset_path();
    require(&p, "dataset")?;
    Dataset::load(&p)
}

fn load_checkpoint(x: &Experiment, variant: &str) -> Result<PolicyParams> {
    let p = x.checkpoint_path(variant);
    require(&p, "checkpoint")?;
    let params = PolicyParams::load(&p)?;
    x.model.check_params(&params)?;
    Ok(params)
}

fn save_checkpoint(x: &Experiment, name: &str, params: &PolicyParams) -> Result<PathBuf> {
    x.ensure_output_dir()?;
    let p = x.checkpoint_path(name);
    params.save(&p)?;
    Ok(p)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let exec = Execution::from_env();
    match cli.command {
        Command::GenDemos { episodes } => {
            if let Some(n) = episodes {
                cfg.demos.episodes = n as usize;
            }
            let x = Experiment::new(cfg, exec)?;
            let (ds, summary) = x.demos()?;
            x.ensure_output_dir()?;
            let path = x.dataset_path();
            ds.save(&path)?;
            let text = format!(
                "episodes {}\nretained {}\nexpert success rate {:.4}\n",
                summary.total,
                summary.retained,
                summary.success_rate()
            );
            let summary_path = x.write_text("demos-summary.txt", &text)?;
            x.write_manifest("gen-demos", &[path.clone(), summary_path])?;
            print!("{text}");
            println!("wrote {}", path.display());
        }
        Command::Train { mode, steps, lambda_dpo, contrast_threshold } => {
            let (cfg_steps, target) = if mode == TrainMode::ReferenceBc {
                (&mut cfg.reference.steps, "reference")
            } else {
                (&mut cfg.post.steps, mode.name())
            };
            if let Some(s) = steps {
                *cfg_steps = s;
            }
            let x = Experiment::new(cfg, exec)?;
            let ds = load_dataset(&x)?;
            let (name, outcome) = if mode == TrainMode::ReferenceBc {
                if lambda_dpo.is_some() || contrast_threshold.is_some() {
                    return Err(Error::Config("reference-bc takes no preference options".into()));
                }
                (target.to_string(), x.train_reference(&ds)?)
            } else {
                let reference = load_checkpoint(&x, REFERENCE)?;
                let spec = VariantSpec { mode, lambda_dpo, contrast_threshold };
                (spec.name(), x.train_variant(&ds, &reference, &spec)?)
            };
            let ckpt = save_checkpoint(&x, &name, &outcome.params)?;
            let log = x.write_text(&format!("{name}-log.csv"), &outcome.log.to_csv())?;
            x.write_manifest(&format!("train-{name}"), &[ckpt.clone(), log])?;
            println!(
                "{name}: final anchor loss {:.4}, checksum {}",
                outcome.log.tail_fm_loss(100),
                outcome.params.checksum()
            );
            println!("wrote {}", ckpt.display());
        }
        Command::Eval { delays, methods, n } => {
            if let Some(DelayList(d)) = delays {
                cfg.eval.delays = d;
            }
            if let Some(n) = n {
                cfg.eval.episodes = n as usize;
            }
            let x = Experiment::new(cfg, exec)?;
            let mut loaded: Vec<(String, Strategy, PolicyParams)> = Vec::with_capacity(methods.len());
            for m in &methods {
                let (variant, strategy) = match m.parse::<Strategy>() {
                    Ok(s) => (REFERENCE.to_string(), s),
                    Err(_) if m == REFERENCE => (REFERENCE.to_string(), x.cfg.eval.strategy),
                    Err(_) => {
                        let base = m.split("-lambda").next().unwrap_or(m).split("-min").next().unwrap_or(m);
                        base.parse::<TrainMode>()
                            .map_err(|_| Error::Config(format!("unknown method '{m}'")))?;
                        (m.clone(), x.cfg.eval.strategy)
                    }
                };
                loaded.push((m.clone(), strategy, load_checkpoint(&x, &variant)?));
            }
            let list: Vec<Method<'_>> = loaded
                .iter()
                .map(|(name, strategy, params)| Method { name, params, strategy: *strategy })
                .collect();
            let report = x.sweep(&list)?;
            let csv = x.write_text("sweep.csv", &report.to_csv())?;
            let txt = x.write_text("sweep.txt", &report.render())?;
            x.write_manifest("eval", &[csv, txt])?;
            print!("{}", report.render());
        }
        Command::Ablate { battery, thresholds } => {
            let x = Experiment::new(cfg, exec)?;
            let ds = load_dataset(&x)?;
            let reference = load_checkpoint(&x, REFERENCE)?;
            let report = x.battery(battery, &ds, &reference, &thresholds)?;
            let name = battery.name();
            let a = x.write_text(&format!("ablate-{name}.csv"), &report.table_csv)?;
            let b = x.write_text(&format!("ablate-{name}-sweep.csv"), &report.sweep.to_csv())?;
            let c = x.write_text(&format!("ablate-{name}.txt"), &report.text)?;
            x.write_manifest(&format!("ablate-{name}"), &[a, b, c])?;
            print!("{}", report.text);
        }
        Command::Probe { variant } => {
            let x = Experiment::new(cfg, exec)?;
            let reference = load_checkpoint(&x, REFERENCE)?;
            let theta = load_checkpoint(&x, &variant)?;
            let report = x.probe(&theta, &reference)?;
            let a = x.write_text(&format!("probe-{variant}.csv"), &report.to_csv())?;
            let b = x.write_text(&format!("probe-{variant}.txt"), &report.render())?;
            x.write_manifest(&format!("probe-{variant}"), &[a, b])?;
            print!("{}", report.render());
        }
        Command::Report => {
            let x = Experiment::new(cfg, exec)?;
            let prefix = format!("{}-", x.prefix());
            let dir = &x.cfg.output_dir;
            if !dir.is_dir() {
                return Err(Error::Config(format!("output directory {} does not exist", dir.display())));
            }
            let entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            let mut tables: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                    name.starts_with(&prefix) && name.ends_with(".txt") && !name.ends_with("report.txt")
                })
                .collect();
            tables.sort();
            if tables.is_empty() {
                return Err(Error::Config(format!("no rendered tables under {}", dir.display())));
            }
            let mut text = format!("experiment {} seed {}\n", x.cfg.id, x.cfg.seed);
            for t in &tables {
                let body = fs::read_to_string(t).map_err(|e| Error::Io { path: t.clone(), source: e })?;
                let name = t.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
                text.push_str(&format!("\n== {} ==\n{body}", &name[prefix.len()..]));
            }
            let out = x.write_text("report.txt", &text)?;
            x.write_manifest("report", std::slice::from_ref(&out))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

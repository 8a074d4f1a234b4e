//! Config-driven experiment pipeline: demonstrations, reference, post-training
//! variants, sweeps, ablation batteries and output manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asyncsim::{AsyncConfig, Strategy};
use crate::diffnet::{hex_digest, PolicyParams};
use crate::env::{generate_demos, Dataset, DemoSummary, Env, EnvConfig};
use crate::evalanal::{
    decomposition_table, delay_sweep, mechanism_probe, select_probe_states, DecompositionTable,
    MechanismReport, Method, SweepReport, SweepSpec, DEFLECT, REFERENCE, SFT_CONTINUE,
};
use crate::flowpolicy::{ChunkShape, FlowModel};
use crate::pairgen::{filter_by_contrast, pair_pool, percentile, ContrastFilter, ExampleSampler};
use crate::par::Execution;
use crate::trainer::{train_reference, train_variant, TrainConfig, TrainMode, TrainOutcome, LAMBDA_SWEEP};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub chunk: ChunkShape,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { hidden: vec![128, 128], chunk: ChunkShape::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub episodes: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { episodes: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub delays: Vec<usize>,
    pub episodes: usize,
    pub seed: u64,
    pub n_flow: usize,
    pub confidence: f64,
    /// Context strategy used for every trained method.
    pub strategy: Strategy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            delays: (0..=7).collect(),
            episodes: 1000,
            seed: 1_000_000,
            n_flow: 5,
            confidence: 0.95,
            strategy: Strategy::Rollforward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub delay: usize,
    pub rollouts: usize,
    pub states: usize,
    pub n_noise: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { delay: 6, rollouts: 50, states: 4, n_noise: 200, seed: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    /// Pairs drawn to estimate contrast percentiles.
    pub pool: usize,
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig { pool: 4096, seed: 3_000_000 }
    }
}

fn default_reference() -> TrainConfig {
    TrainConfig { mode: TrainMode::ReferenceBc, steps: 8000, peak_lr: 3e-3, seed: 0, ..TrainConfig::default() }
}

fn default_post() -> TrainConfig {
    TrainConfig { mode: TrainMode::Deflect, steps: 2000, peak_lr: 1e-3, seed: 1, ..TrainConfig::default() }
}

/// Everything one experiment needs. Stage seeds are offsets from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub demos: DemoConfig,
    pub reference: TrainConfig,
    /// Shared schedule for every post-training variant; `mode` is overridden
    /// per variant.
    pub post: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub contrast: ContrastConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "intercept".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            demos: DemoConfig::default(),
            reference: default_reference(),
            post: default_post(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            contrast: ContrastConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Config(format!("experiment id '{}' must be non-empty [A-Za-z0-9_-]", self.id)));
        }
        if let Some(parent) = self.output_dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            if !parent.is_dir() {
                return Err(Error::Config(format!(
                    "output_dir parent {} does not exist",
                    parent.display()
                )));
            }
        }
        self.env.validate()?;
        if self.policy.hidden.is_empty() || self.policy.hidden.contains(&0) {
            return Err(Error::Config("policy.hidden needs at least one non-empty layer".into()));
        }
        if self.policy.chunk.is_empty() {
            return Err(Error::Config("policy.chunk must be non-empty".into()));
        }
        if self.demos.episodes == 0 {
            return Err(Error::Config("demos.episodes must be at least 1".into()));
        }
        if self.reference.mode != TrainMode::ReferenceBc {
            return Err(Error::Config("reference.mode must be reference-bc".into()));
        }
        if self.post.mode == TrainMode::ReferenceBc {
            return Err(Error::Config("post.mode must be a post-training mode".into()));
        }
        self.reference.validate()?;
        self.post.validate()?;
        let e = &self.eval;
        if e.delays.is_empty() || e.episodes == 0 || e.n_flow == 0 {
            return Err(Error::Config("eval needs delays, episodes >= 1 and n_flow >= 1".into()));
        }
        if let Some(&d) = e.delays.iter().find(|&&d| d > self.policy.chunk.horizon) {
            return Err(Error::Config(format!("eval delay {d} exceeds the chunk length")));
        }
        if !(e.confidence > 0.0 && e.confidence < 1.0) {
            return Err(Error::Config("eval.confidence must lie in (0, 1)".into()));
        }
        if self.probe.n_noise < 2 || self.probe.rollouts == 0 || self.probe.states == 0 {
            return Err(Error::Config("probe needs n_noise >= 2, rollouts >= 1, states >= 1".into()));
        }
        if self.probe.delay > self.policy.chunk.horizon {
            return Err(Error::Config("probe.delay exceeds the chunk length".into()));
        }
        if self.contrast.pool == 0 {
            return Err(Error::Config("contrast.pool must be at least 1".into()));
        }
        Ok(())
    }

    fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }
}

/// Preference-pair filter threshold: a pool percentile or an absolute value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Percentile(f64),
    Absolute(f64),
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad threshold '{s}' (expected pNN or a number)"));
        let t = if let Some(p) = s.strip_prefix('p') {
            let q: f64 = p.parse().map_err(|_| bad())?;
            if !(0.0..=100.0).contains(&q) {
                return Err(bad());
            }
            Threshold::Percentile(q)
        } else {
            let v: f64 = s.parse().map_err(|_| bad())?;
            if v.is_nan() || v < 0.0 {
                return Err(bad());
            }
            Threshold::Absolute(v)
        };
        Ok(t)
    }
}

impl Threshold {
    pub fn label(self) -> String {
        match self {
            Threshold::Percentile(q) => format!("p{q}"),
            Threshold::Absolute(v) => format!("c{v}"),
        }
    }
}

/// One post-training run: a mode plus optional overrides of the shared schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSpec {
    pub mode: TrainMode,
    pub lambda_dpo: Option<f64>,
    pub contrast_threshold: Option<f64>,
}

impl VariantSpec {
    pub fn mode(mode: TrainMode) -> Self {
        VariantSpec { mode, lambda_dpo: None, contrast_threshold: None }
    }

    pub fn name(&self) -> String {
        let mut s = self.mode.name().to_string();
        if let Some(l) = self.lambda_dpo {
            let _ = write!(s, "-lambda{l}");
        }
        if let Some(t) = self.contrast_threshold {
            let _ = write!(s, "-min{t:.4}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Battery {
    Anchor,
    MatchedInput,
    LambdaSweep,
    ContrastFilter,
    ZeroShot,
    Restart,
}

impl Battery {
    pub const ALL: [Battery; 6] = [
        Battery::Anchor,
        Battery::MatchedInput,
        Battery::LambdaSweep,
        Battery::ContrastFilter,
        Battery::ZeroShot,
        Battery::Restart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Battery::Anchor => "anchor",
            Battery::MatchedInput => "matched-input",
            Battery::LambdaSweep => "lambda-sweep",
            Battery::ContrastFilter => "contrast-filter",
            Battery::ZeroShot => "zero-shot",
            Battery::Restart => "restart",
        }
    }
}

impl FromStr for Battery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Battery::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown battery '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryReport {
    pub battery: Battery,
    pub sweep: SweepReport,
    /// Battery-specific summary table.
    pub table_csv: String,
    pub text: String,
}

/// Output record written next to every command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub experiment: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub versions: Versions,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub crate_version: String,
    pub checkpoint_format: String,
    pub dataset_format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
}

/// A validated config bound to its environment and model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub env: Env,
    pub model: FlowModel,
    pub exec: Execution,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let env = Env::new(cfg.env.clone())?;
        let model = FlowModel { shape: cfg.policy.chunk, half_width: cfg.env.half_width };
        Ok(Experiment { cfg, env, model, exec })
    }

    fn tag(&self) -> f64 {
        self.cfg.env.task_tag
    }

    /// `<id>-s<seed>-v<version>`, the prefix of every output file.
    pub fn prefix(&self) -> String {
        format!("{}-s{}-v{}", self.cfg.id, self.cfg.seed, VERSION)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(format!("{}-{name}", self.prefix()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.artifact("demos.dset")
    }

    pub fn checkpoint_path(&self, variant: &str) -> PathBuf {
        self.artifact(&format!("{variant}.ckpt"))
    }

    pub fn ensure_output_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.cfg.output_dir).map_err(|e| Error::io(&self.cfg.output_dir, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        self.ensure_output_dir()?;
        let path = self.artifact(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn demos(&self) -> Result<(Dataset, DemoSummary)> {
        generate_demos(&self.env, self.cfg.demos.episodes, self.cfg.seed, self.cfg.policy.chunk.horizon, self.exec)
    }

    pub fn reference_config(&self) -> TrainConfig {
        TrainConfig { seed: self.cfg.stage_seed(self.cfg.reference.seed), ..self.cfg.reference.clone() }
    }

    pub fn variant_config(&self, spec: &VariantSpec) -> TrainConfig {
        let mut c = self.cfg.post.clone();
        c.mode = spec.mode;
        c.seed = self.cfg.stage_seed(self.cfg.post.seed);
        if let Some(l) = spec.lambda_dpo {
            c.weights.lambda_dpo = l;
        }
        if spec.contrast_threshold.is_some() {
            c.contrast_threshold = spec.contrast_threshold;
        }
        c
    }

    pub fn train_reference(&self, dataset: &Dataset) -> Result<TrainOutcome> {
        train_reference(self.model, dataset, &self.cfg.policy.hidden, &self.reference_config(), self.tag(), self.exec)
    }

    pub fn train_variant(&self, dataset: &Dataset, reference: &PolicyParams, spec: &VariantSpec) -> Result<TrainOutcome> {
        train_variant(self.model, dataset, reference, &self.variant_config(spec), self.tag(), self.exec)
    }

    /// Contrast percentiles of a pair pool drawn like the post-training batches.
    pub fn contrast_pool(&self, dataset: &Dataset, reference: &PolicyParams) -> Result<Vec<f64>> {
        let post = self.variant_config(&VariantSpec::mode(TrainMode::Deflect));
        let sampler = ExampleSampler::new(dataset, post.mode.delay_bounds(&post))?;
        let triples = pair_pool(
            &self.model,
            reference,
            &sampler,
            self.cfg.contrast.pool,
            self.cfg.stage_seed(self.cfg.contrast.seed),
            post.n_flow,
            self.tag(),
            self.exec,
        )?;
        Ok(triples.into_iter().map(|t| t.contrast).collect())
    }

    pub fn resolve_threshold(&self, t: Threshold, contrasts: &[f64]) -> Result<f64> {
        match t {
            Threshold::Percentile(q) => percentile(contrasts, q),
            Threshold::Absolute(v) => Ok(v),
        }
    }

    pub fn contrast_summary(&self, contrasts: &[f64], threshold: f64) -> Result<ContrastFilter> {
        filter_by_contrast(contrasts, threshold)
    }

    pub fn sweep_spec(&self) -> SweepSpec<'_> {
        SweepSpec {
            delays: &self.cfg.eval.delays,
            n_episodes: self.cfg.eval.episodes,
            seed: self.cfg.stage_seed(self.cfg.eval.seed),
            n_flow: self.cfg.eval.n_flow,
            confidence: self.cfg.eval.confidence,
        }
    }

    pub fn sweep(&self, methods: &[Method<'_>]) -> Result<SweepReport> {
        delay_sweep(&self.env, &self.model, methods, &self.sweep_spec(), self.exec)
    }

    pub fn decomposition(&self, reference: &PolicyParams, sft: &PolicyParams, deflect: &PolicyParams) -> Result<DecompositionTable> {
        decomposition_table(
            &self.env,
            &self.model,
            [reference, sft, deflect],
            self.cfg.eval.strategy,
            &self.sweep_spec(),
            self.exec,
        )
    }

    pub fn probe(&self, theta: &PolicyParams, reference: &PolicyParams) -> Result<MechanismReport> {
        let p = &self.cfg.probe;
        let acfg = AsyncConfig::standard(p.delay, self.cfg.eval.strategy, self.cfg.eval.n_flow);
        let seed = self.cfg.stage_seed(p.seed);
        let states =
            select_probe_states(&self.env, &self.model, theta, reference, &acfg, p.rollouts, p.states, seed, self.exec)?;
        let contexts: Vec<_> = states.into_iter().map(|s| s.context).collect();
        mechanism_probe(&self.model, theta, reference, &contexts, p.n_noise, self.cfg.eval.n_flow, seed, self.exec)
    }

    /// Trains the battery's variants from `reference`, evaluates them on
    /// shared seeds and returns the combined report.
    pub fn battery(
        &self,
        battery: Battery,
        dataset: &Dataset,
        reference: &PolicyParams,
        thresholds: &[Threshold],
    ) -> Result<BatteryReport> {
        let strategy = self.cfg.eval.strategy;
        let train = |spec: VariantSpec| -> Result<(String, PolicyParams)> {
            let out = self.train_variant(dataset, reference, &spec)?;
            Ok((spec.name(), out.params))
        };
        let evaluate = |named: &[(String, PolicyParams)]| -> Result<SweepReport> {
            let mut methods = vec![Method { name: REFERENCE, params: reference, strategy }];
            methods.extend(named.iter().map(|(n, p)| Method { name: n, params: p, strategy }));
            self.sweep(&methods)
        };
        let band = |s: &SweepReport, m: &str, lo, hi| s.band_average(m, lo, hi).unwrap_or(f64::NAN);
        match battery {
            Battery::Restart => {
                let sft = self.train_variant(dataset, reference, &VariantSpec::mode(TrainMode::SftContinue))?;
                let dfl = self.train_variant(dataset, reference, &VariantSpec::mode(TrainMode::Deflect))?;
                let table = self.decomposition(reference, &sft.params, &dfl.params)?;
                Ok(BatteryReport {
                    battery,
                    text: table.render(),
                    table_csv: table.to_csv(),
                    sweep: table.sweep,
                })
            }
            Battery::LambdaSweep => {
                let named = LAMBDA_SWEEP
                    .iter()
                    .map(|&l| {
                        train(VariantSpec { lambda_dpo: Some(l), ..VariantSpec::mode(TrainMode::Deflect) })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sweep = evaluate(&named)?;
                let mut csv = String::from("lambda_dpo,avg_0_7,avg_5_7\n");
                let mut text = format!("{:>10}  {:>9}  {:>9}\n", "lambda", "avg(0-7)", "avg(5-7)");
                for (l, (name, _)) in LAMBDA_SWEEP.iter().zip(&named) {
                    let (a, b) = (band(&sweep, name, 0, 7), band(&sweep, name, 5, 7));
                    let _ = writeln!(csv, "{l},{a:.6},{b:.6}");
                    let _ = writeln!(text, "{l:>10}  {:>9.1}  {:>9.1}", 100.0 * a, 100.0 * b);
                }
                text.push('\n');
                text.push_str(&sweep.render());
                Ok(BatteryReport { battery, sweep, table_csv: csv, text })
            }
            Battery::ContrastFilter => {
                let contrasts = self.contrast_pool(dataset, reference)?;
                let mut specs = vec![(String::from("none"), 0.0, VariantSpec::mode(TrainMode::Deflect))];
                for &t in thresholds {
                    let v = self.resolve_threshold(t, &contrasts)?;
                    specs.push((
                        t.label(),
                        v,
                        VariantSpec { contrast_threshold: Some(v), ..VariantSpec::mode(TrainMode::Deflect) },
                    ));
                }
                let named = specs.iter().map(|(_, _, s)| train(*s)).collect::<Result<Vec<_>>>()?;
                let sweep = evaluate(&named)?;
                let mut csv = String::from("filter,threshold,excluded_fraction,avg_0_7,avg_5_7\n");
                let mut text = format!(
                    "{:>8}  {:>9}  {:>8}  {:>9}  {:>9}\n",
                    "filter", "threshold", "excluded", "avg(0-7)", "avg(5-7)"
                );
                for ((label, v, _), (name, _)) in specs.iter().zip(&named) {
                    let f = filter_by_contrast(&contrasts, *v)?;
                    let frac = f.n_excluded as f64 / contrasts.len() as f64;
                    let (a, b) = (band(&sweep, name, 0, 7), band(&sweep, name, 5, 7));
                    let _ = writeln!(csv, "{label},{v:.6},{frac:.4},{a:.6},{b:.6}");
                    let _ = writeln!(
                        text,
                        "{label:>8}  {v:>9.4}  {frac:>8.3}  {:>9.1}  {:>9.1}",
                        100.0 * a,
                        100.0 * b
                    );
                }
                text.push('\n');
                text.push_str(&sweep.render());
                Ok(BatteryReport { battery, sweep, table_csv: csv, text })
            }
            Battery::Anchor | Battery::MatchedInput | Battery::ZeroShot => {
                let modes: &[TrainMode] = match battery {
                    Battery::Anchor => &[TrainMode::Deflect, TrainMode::NoAnchor],
                    Battery::MatchedInput => &[TrainMode::Deflect, TrainMode::MatchedInput],
                    _ => &[TrainMode::SftContinue, TrainMode::Deflect, TrainMode::NarrowDelay],
                };
                let named = modes.iter().map(|&m| train(VariantSpec::mode(m))).collect::<Result<Vec<_>>>()?;
                let sweep = evaluate(&named)?;
                let base = if battery == Battery::ZeroShot { SFT_CONTINUE } else { DEFLECT };
                let mut csv = String::from("method,delay,delta_vs_base,lower,upper\n");
                let mut text = sweep.render();
                let _ = writeln!(text, "\npaired differences against {base}:");
                for (name, _) in named.iter().filter(|(n, _)| n != base) {
                    for &d in &sweep.delays {
                        let diff = sweep.paired_diff(name, base, d)?;
                        let _ = writeln!(csv, "{name},{d},{:.6},{:.6},{:.6}", diff.mean, diff.ci.lower, diff.ci.upper);
                        let _ = writeln!(
                            text,
                            "  {name} d={d}: {:+.1} pp [{:+.1}, {:+.1}]",
                            100.0 * diff.mean,
                            100.0 * diff.ci.lower,
                            100.0 * diff.ci.upper
                        );
                    }
                }
                Ok(BatteryReport { battery, sweep, table_csv: csv, text })
            }
        }
    }

    /// Writes `<prefix>-<command>.manifest.toml` covering `artifacts`.
    pub fn write_manifest(&self, command: &str, artifacts: &[PathBuf]) -> Result<PathBuf> {
        let mut records = Vec::with_capacity(artifacts.len());
        for p in artifacts {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let file = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            records.push(ArtifactRecord { file, sha256: hex_digest(&bytes) });
        }
        let manifest = Manifest {
            experiment: self.cfg.id.clone(),
            command: command.to_string(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash()?,
            versions: Versions {
                crate_version: VERSION.to_string(),
                checkpoint_format: "DFLPARM1".into(),
                dataset_format: "DFLDSET2".into(),
            },
            artifacts: records,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
        self.write_text(&format!("{command}.manifest.toml"), &text)
    }
}

//! Batch front end: `srflvm <generate|fit|impute|eval> --config <path>`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bcd::{fit_with, Family, FitConfig, FitState, ResampleMode};
use crate::datasets::{generate, make_mask, MissingMaskSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{imputation_mse, kernel_recovery, knn_cv, labels_from_values, procrustes, EvalReport, KnnScore};
use crate::gaussian::ObservationSet;
use crate::io::{load_idx, read_csv, read_mask, read_vector, write_csv, write_json, write_labels, write_mask};
use crate::latent::CovarianceMode;
use crate::rng::substream;

pub const SEED_ENV: &str = "SRFLVM_SEED";
const IMPUTE_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Parser)]
#[command(name = "srflvm", version, about = "Random-feature latent variable models with DP-mixture spectral kernels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-sample and per-column work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Checkpoint file; `fit` resumes from it when it exists.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic S-curve data set.
    Generate,
    /// Fit a model and write latents, state and report.
    Fit,
    /// Impute masked entries from a fitted state.
    Impute,
    /// Score a fitted state.
    Eval,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub output_dir: PathBuf,
    pub synthetic: Option<SyntheticSpec>,
    pub missing: Option<MissingMaskSpec>,
    pub y: Option<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub y_true: Option<PathBuf>,
    pub x_true: Option<PathBuf>,
    pub k_true: Option<PathBuf>,
    /// Fitted state; defaults to `state.json` in the output directory.
    pub state: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("."),
            synthetic: None,
            missing: None,
            y: None,
            idx_images: None,
            idx_labels: None,
            mask: None,
            labels: None,
            y_true: None,
            x_true: None,
            k_true: None,
            state: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub num_features: usize,
    pub num_components: usize,
    pub family: Family,
    pub covariance: CovarianceMode,
    pub standardize: Option<bool>,
    pub fixed_spectral: bool,
    pub initial_noise_variance: f64,
    pub initial_dispersion: f64,
    pub initial_latent_sd: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            latent_dim: d.latent_dim,
            num_features: d.num_features,
            num_components: d.num_components,
            family: d.family,
            covariance: d.covariance,
            standardize: d.standardize,
            fixed_spectral: d.fixed_spectral,
            initial_noise_variance: d.initial_noise_variance,
            initial_dispersion: d.initial_dispersion,
            initial_latent_sd: d.initial_latent_sd,
            alpha0: d.alpha0,
            beta0: d.beta0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub mc_samples: usize,
    pub outer_iters: usize,
    pub likelihood_block_steps: usize,
    pub z_block_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub early_stop: bool,
    pub resample_mode: ResampleMode,
    /// Outer iterations between checkpoint writes.
    pub checkpoint_every: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            mc_samples: d.mc_samples,
            outer_iters: d.outer_iters,
            likelihood_block_steps: d.likelihood_block_steps,
            z_block_steps: d.z_block_steps,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            seed: d.seed,
            convergence_tol: d.convergence_tol,
            convergence_window: d.convergence_window,
            early_stop: d.early_stop,
            resample_mode: d.resample_mode,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Neighbour counts for KNN; empty skips KNN.
    pub knn_k: Vec<usize>,
    pub folds: usize,
    pub kernel_l_eval: usize,
    /// Monte-Carlo draws for imputation.
    pub impute_samples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { knn_k: Vec::new(), folds: 5, kernel_l_eval: 10_000, impute_samples: 20, seed: 0 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        join(&mut d.output_dir);
        for p in [
            &mut d.y,
            &mut d.idx_images,
            &mut d.idx_labels,
            &mut d.mask,
            &mut d.labels,
            &mut d.y_true,
            &mut d.x_true,
            &mut d.k_true,
            &mut d.state,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    /// Applies the seed override, if set.
    pub fn apply_seed_override(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.optimizer.seed = s;
            if let Some(syn) = self.data.synthetic.as_mut() {
                syn.seed = s;
            }
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        let (m, o) = (&self.model, &self.optimizer);
        FitConfig {
            latent_dim: m.latent_dim,
            num_features: m.num_features,
            num_components: m.num_components,
            family: m.family,
            mc_samples: o.mc_samples,
            outer_iters: o.outer_iters,
            likelihood_block_steps: o.likelihood_block_steps,
            z_block_steps: o.z_block_steps,
            learning_rate: o.learning_rate,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            seed: o.seed,
            convergence_tol: o.convergence_tol,
            convergence_window: o.convergence_window,
            early_stop: o.early_stop,
            resample_mode: o.resample_mode,
            covariance: m.covariance,
            standardize: m.standardize,
            fixed_spectral: m.fixed_spectral,
            initial_noise_variance: m.initial_noise_variance,
            initial_dispersion: m.initial_dispersion,
            initial_latent_sd: m.initial_latent_sd,
            alpha0: m.alpha0,
            beta0: m.beta0,
        }
    }

    fn output(&self, name: &str) -> PathBuf {
        self.data.output_dir.join(name)
    }

    fn state_path(&self) -> PathBuf {
        self.data.state.clone().unwrap_or_else(|| self.output("state.json"))
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(format!("{SEED_ENV} must be a nonnegative integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn load_y(cfg: &RunConfig) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
    let d = &cfg.data;
    match (&d.y, &d.idx_images, &d.idx_labels) {
        (Some(y), None, None) => Ok((read_csv(y)?, None)),
        (None, Some(img), Some(lab)) => {
            let (x, labels) = load_idx(img, lab)?;
            Ok((x, Some(labels)))
        }
        (None, Some(_), None) | (None, None, Some(_)) => {
            Err(Error::validation("data.idx_images and data.idx_labels must be given together"))
        }
        (None, None, None) => Err(Error::validation("data.y (or data.idx_images) is required")),
        _ => Err(Error::validation("give either data.y or the IDX pair, not both")),
    }
}

fn load_observations(cfg: &RunConfig) -> Result<(ObservationSet<f64>, Option<Vec<usize>>)> {
    let (y, idx_labels) = load_y(cfg)?;
    let mask = match (&cfg.data.mask, &cfg.data.missing) {
        (Some(p), _) => read_mask(p)?,
        (None, Some(spec)) => make_mask(y.dim(), spec)?,
        (None, None) => Array2::from_elem(y.raw_dim(), true),
    };
    Ok((ObservationSet::new(y, mask)?, idx_labels))
}

fn load_labels(cfg: &RunConfig, from_idx: Option<Vec<usize>>) -> Result<Option<Vec<usize>>> {
    match &cfg.data.labels {
        Some(p) => Ok(Some(labels_from_values(&read_vector::<f64>(p)?)?)),
        None => Ok(from_idx),
    }
}

fn load_state(cfg: &RunConfig) -> Result<FitState<f64>> {
    let p = cfg.state_path();
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::validation("data.synthetic is required for generate"))?;
    let d = generate::<f64>(spec)?;
    write_csv(cfg.output("X_true.csv"), &d.x_true)?;
    write_csv(cfg.output("Y.csv"), &d.y)?;
    write_csv(cfg.output("K_true.csv"), &d.k_true)?;
    write_labels(cfg.output("labels.csv"), &d.labels)?;
    if let Some(m) = &cfg.data.missing {
        write_mask(cfg.output("mask.csv"), &make_mask(d.y.dim(), m)?)?;
    }
    Ok(())
}

fn cmd_fit(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<()> {
    let fit_cfg = cfg.fit_config();
    fit_cfg.validate()?;
    let (obs, _) = load_observations(cfg)?;
    let resume = match checkpoint.filter(|p| p.exists()) {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let state: FitState<f64> =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
            Some(state)
        }
        None => None,
    };
    let every = cfg.optimizer.checkpoint_every.max(1);
    let mut last_time = resume.as_ref().map_or(0.0, |s| s.report.wall_time_seconds);
    let result = fit_with(&obs, &fit_cfg, resume, |s| {
        let elbo = s.report.elbo_trace.last().copied().unwrap_or(f64::NAN);
        let dt = s.report.wall_time_seconds - last_time;
        last_time = s.report.wall_time_seconds;
        writeln!(out, "{},{},{:.6}", s.iteration, elbo, dt).map_err(|e| Error::io("stdout", e))?;
        if let Some(p) = checkpoint {
            if s.iteration % every == 0 {
                write_json(p, s)?;
            }
        }
        Ok(())
    });
    let state = match result {
        Ok(s) => s,
        Err(abort) => {
            if let Some(partial) = abort.partial {
                write_json(cfg.output("report.json"), &partial.report)?;
                write_json(cfg.output("state.json"), &partial)?;
            }
            return Err(abort.error);
        }
    };
    if let Some(p) = checkpoint {
        write_json(p, &state)?;
    }
    write_csv(cfg.output("latents.csv"), &state.params.latent.mean)?;
    write_json(cfg.output("state.json"), &state)?;
    write_json(cfg.output("report.json"), &state.report)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MseReport {
    imputation_mse: f64,
    masked_entries: usize,
}

fn impute_with_state(state: &FitState<f64>, obs: &ObservationSet<f64>, samples: usize, seed: u64) -> Result<Array2<f64>> {
    state.impute(obs, samples, &mut substream(seed, &[IMPUTE_STREAM]))
}

fn cmd_impute(cfg: &RunConfig) -> Result<()> {
    let (obs, _) = load_observations(cfg)?;
    let state = load_state(cfg)?;
    let out = impute_with_state(&state, &obs, cfg.eval.impute_samples.max(1), cfg.eval.seed)?;
    write_csv(cfg.output("Y_imputed.csv"), &out)?;
    if let Some(p) = &cfg.data.y_true {
        let truth = read_csv::<f64>(p)?;
        let masked = obs.mask.iter().filter(|&&o| !o).count();
        if masked > 0 {
            let mse = imputation_mse(truth.view(), out.view(), obs.mask.view())?;
            write_json(cfg.output("mse.json"), &MseReport { imputation_mse: mse, masked_entries: masked })?;
        }
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let start = std::time::Instant::now();
    let state = load_state(cfg)?;
    let latents = &state.params.latent.mean;
    let mut report = EvalReport::default();
    if !cfg.eval.knn_k.is_empty() {
        let from_idx = match (&cfg.data.idx_images, &cfg.data.idx_labels) {
            (Some(i), Some(l)) => Some(load_idx::<f64>(i, l)?.1),
            _ => None,
        };
        let labels = load_labels(cfg, from_idx)?
            .ok_or_else(|| Error::validation("KNN requested (eval.knn_k) but no labels were given"))?;
        for &k in &cfg.eval.knn_k {
            let (mean, std) = knn_cv(latents.view(), &labels, k, cfg.eval.folds, cfg.eval.seed)?;
            report.knn_accuracy.push(KnnScore { k, mean, std });
        }
        report.knn_folds = Some(cfg.eval.folds);
        report.knn_seed = Some(cfg.eval.seed);
    }
    if let Some(p) = &cfg.data.x_true {
        let x = read_csv::<f64>(p)?;
        report.procrustes_disparity = Some(procrustes(latents.view(), x.view())?);
    }
    if let Some(p) = &cfg.data.k_true {
        let k = read_csv::<f64>(p)?;
        let l_eval = cfg.eval.kernel_l_eval;
        report.kernel_frobenius_rel_err =
            Some(kernel_recovery(k.view(), latents.view(), &state.params.mixture, l_eval, cfg.eval.seed)?);
    }
    if let (Some(yt), true) = (&cfg.data.y_true, cfg.data.y.is_some()) {
        let (obs, _) = load_observations(cfg)?;
        if obs.mask.iter().any(|&o| !o) {
            let out = impute_with_state(&state, &obs, cfg.eval.impute_samples.max(1), cfg.eval.seed)?;
            let truth = read_csv::<f64>(yt)?;
            report.imputation_mse = Some(imputation_mse(truth.view(), out.view(), obs.mask.view())?);
        }
    }
    report.wall_time_seconds = start.elapsed().as_secs_f64();
    write_json(cfg.output("eval.json"), &report)
}

/// Runs one parsed invocation, writing progress lines to `out`.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| Error::validation("--config <path> is required"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_override(seed_from_env()?);
    let mut job = || match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Fit => cmd_fit(&cfg, cli.checkpoint.as_deref(), out),
        Command::Impute => cmd_impute(&cfg),
        Command::Eval => cmd_eval(&cfg),
    };
    match cli.workers {
        Some(0) => Err(Error::validation("--workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::validation(format!("cannot start {n} workers: {e}")))?
            .install(job),
        None => job(),
    }
}

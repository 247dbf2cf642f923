//! Unsupervised training: gradient ascent on the mean weighted sum rate.
//!
//! Every step alternates two optimizations. For the current network output
//! `Φ`, WMMSE computes the precoder `V` on the numeric channel `C(Φ)`; then
//! the network parameters move along `∇_θ WSR(C(Φ(θ)) · V)` with `V` held
//! constant. No gradient flows through WMMSE.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph, Tape};
use crate::channel::{compose_channel, compose_channel_graph, Dataset, RisConfig, ScenarioConfig, ScenarioSample, Split};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::precoder::{wmmse, wsr, wsr_graph, WmmseOptions};
use crate::probing::{extract_features, simulate_pilots, FeatureScaler, FeatureTensor, PilotSnr, ProbeSchedule};
use crate::risnet::{forward, infer, lift, NetworkParams};
use crate::rng::{derive_seed, stream_rng};

// Domain tags that keep the noise streams of different phases apart.
const TAG_TRAIN: u64 = 0x7472_6169_6e;
const TAG_EVAL: u64 = 0x6576_616c;
const TAG_BATCH: u64 = 0x6261_7463_68;
const TAG_SCALER: u64 = 0x7363_616c_65;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ + η ∇WSR`.
    Plain,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_train_eval_samples() -> usize {
    128
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub pilot_snr: PilotSnr,
    /// Evaluate every this many steps (0 disables intermediate points).
    pub eval_every: usize,
    pub seed: u64,
    /// Standardize features with statistics of the training split.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Number of leading training samples used for the logged train WSR.
    #[serde(default = "default_train_eval_samples")]
    pub train_eval_samples: usize,
    #[serde(default)]
    pub wmmse: WmmseOptions,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(epsilon > 0.0) {
                return Err(Error::config("train.optimizer", "Adam needs betas in [0, 1) and epsilon > 0"));
            }
        }
        self.pilot_snr
            .validate()
            .map_err(|e| Error::config("train.pilot_snr", e.to_string()))?;
        if self.wmmse.iters == 0 {
            return Err(Error::config("train.wmmse.iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Link budget and precoder settings shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub noise_power: f64,
    pub power_budget: f64,
    pub wmmse: WmmseOptions,
}

impl Objective {
    pub fn new(config: &ScenarioConfig, wmmse: WmmseOptions) -> Self {
        Self {
            noise_power: config.noise_power,
            power_budget: config.power_budget,
            wmmse,
        }
    }

    /// WSR of `ris` with the WMMSE precoder computed for it.
    pub fn wsr_of(&self, sample: &ScenarioSample, ris: &RisConfig) -> Result<f64> {
        let c = compose_channel(sample, ris)?;
        let out = wmmse(&c, &sample.weights, self.noise_power, self.power_budget, self.wmmse)?;
        wsr(&c, &out.precoder.v, &sample.weights, self.noise_power)
    }
}

/// Network parameters together with the feature standardization they were
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: NetworkParams<f64>,
    pub scaler: Option<FeatureScaler>,
}

impl Model {
    /// Features of `sample` as the network sees them.
    pub fn features(
        &self,
        sample: &ScenarioSample,
        schedule: &ProbeSchedule,
        snr: PilotSnr,
        noise_seed: u64,
    ) -> Result<FeatureTensor> {
        let obs = simulate_pilots(sample, schedule, snr, noise_seed)?;
        let raw = extract_features(&obs);
        match &self.scaler {
            Some(s) => s.apply(&raw),
            None => Ok(raw),
        }
    }

    pub fn configure(
        &self,
        sample: &ScenarioSample,
        schedule: &ProbeSchedule,
        snr: PilotSnr,
        noise_seed: u64,
    ) -> Result<RisConfig> {
        let features = self.features(sample, schedule, snr, noise_seed)?;
        infer(&self.params, &features, schedule)
    }
}

/// Fits a feature scaler on the training split at the given pilot SNR.
pub fn fit_scaler(ds: &Dataset, schedule: &ProbeSchedule, snr: PilotSnr, seed: u64) -> Result<FeatureScaler> {
    let mut tensors = Vec::with_capacity(ds.len());
    for (i, sample) in ds.samples.iter().enumerate() {
        let obs = simulate_pilots(sample, schedule, snr, derive_seed(&[seed, TAG_SCALER, i as u64]))?;
        tensors.push(extract_features(&obs));
    }
    FeatureScaler::fit(&tensors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradient {
    pub wsr: f64,
    /// `∂WSR/∂θ` in parameter serialization order.
    pub grad: Vec<f64>,
    /// The precoder the gradient was taken at.
    pub v: CMatrix,
}

/// WSR and parameter gradient for one sample.
///
/// With `frozen_v` set, that precoder is used instead of running WMMSE.
pub fn sample_gradient(
    model: &Model,
    sample: &ScenarioSample,
    schedule: &ProbeSchedule,
    features: &FeatureTensor,
    objective: &Objective,
    frozen_v: Option<&CMatrix>,
    tape: &mut Tape,
) -> Result<SampleGradient> {
    tape.clear();
    let leaves = lift(tape, &model.params);
    let n_params = tape.len();
    let out = forward(tape, &leaves, features, schedule)?;
    let c_graph = compose_channel_graph(tape, sample, &out.factors)?;
    let c = CMatrix::from_fn(sample.users(), sample.bs_antennas(), |u, m| {
        let (re, im) = c_graph[u * sample.bs_antennas() + m];
        num_complex::Complex64::new(tape.value(re), tape.value(im))
    });
    let v = match frozen_v {
        Some(v) => v.clone(),
        None => {
            wmmse(&c, &sample.weights, objective.noise_power, objective.power_budget, objective.wmmse)?
                .precoder
                .v
        }
    };
    let root = wsr_graph(tape, &c_graph, &v, &sample.weights, objective.noise_power)?;
    let grads = tape.backward(root)?;
    Ok(SampleGradient {
        wsr: tape.value(root),
        grad: grads.as_slice()[..n_params].to_vec(),
        v,
    })
}

/// WSR as a function of the flat parameter vector with `v` fixed; the
/// reference for finite-difference checks of [`sample_gradient`].
pub fn wsr_with_params(
    model: &Model,
    flat: &[f64],
    sample: &ScenarioSample,
    schedule: &ProbeSchedule,
    features: &FeatureTensor,
    v: &CMatrix,
    noise_power: f64,
) -> Result<f64> {
    let params = NetworkParams::from_flat(&model.params.config, flat)?;
    let mut g = Eval;
    let out = forward(&mut g, &params, features, schedule)?;
    let c = compose_channel_graph(&mut g, sample, &out.factors)?;
    wsr_graph(&mut g, &c, v, &sample.weights, noise_power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub mean_wsr: f64,
    pub grad: Vec<f64>,
}

/// Mean WSR and mean gradient over `indices` of the training split.
///
/// Samples are processed independently and summed in index order, so the
/// result does not depend on the number of worker threads.
pub fn batch_gradient(
    model: &Model,
    train: &Dataset,
    indices: &[usize],
    schedule: &ProbeSchedule,
    objective: &Objective,
    snr: PilotSnr,
    noise_seed: impl Fn(usize) -> u64 + Sync,
) -> Result<Vec<SampleGradient>> {
    if train.split != Split::Train {
        return Err(Error::Contract("gradients may only be taken on the training split".into()));
    }
    indices
        .par_iter()
        .map_init(Tape::new, |tape, &i| {
            let sample = &train.samples[i];
            let features = model.features(sample, schedule, snr, noise_seed(i))?;
            sample_gradient(model, sample, schedule, &features, objective, None, tape)
        })
        .collect()
}

/// Averages per-sample results in order.
pub fn reduce_mean(parts: &[SampleGradient]) -> BatchGradient {
    let n = parts.len() as f64;
    let dim = parts.first().map_or(0, |p| p.grad.len());
    let mut grad = vec![0.0; dim];
    let mut total = 0.0;
    for p in parts {
        total += p.wsr;
        for (g, x) in grad.iter_mut().zip(&p.grad) {
            *g += x;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    BatchGradient {
        mean_wsr: total / n,
        grad,
    }
}

/// Optimizer state for ascent on a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, dim: usize) -> Self {
        Self {
            kind,
            step: 0,
            first: vec![0.0; dim],
            second: vec![0.0; dim],
        }
    }

    /// One ascent step on `theta` along `grad`.
    pub fn ascend(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        match self.kind {
            Optimizer::Plain => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t += lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powf(self.step as f64);
                let c2 = 1.0 - beta2.powf(self.step as f64);
                for k in 0..theta.len() {
                    let g = grad[k];
                    self.first[k] = beta1 * self.first[k] + (1.0 - beta1) * g;
                    self.second[k] = beta2 * self.second[k] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[k] / c1;
                    let v_hat = self.second[k] / c2;
                    theta[k] += lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean WSR of `configure(sample)` over `samples`, where `configure` maps a
/// sample and its index to an RIS configuration.
pub fn evaluate_with(
    samples: &[ScenarioSample],
    objective: &Objective,
    configure: impl Fn(usize, &ScenarioSample) -> Result<RisConfig> + Sync,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| objective.wsr_of(s, &configure(i, s)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalResult {
        mean: mean_of(&per_sample),
        per_sample,
    })
}

/// Mean test WSR of the model. Pilot noise for sample `i` is drawn from a
/// stream derived from `seed` and `i` only.
pub fn evaluate(
    model: &Model,
    samples: &[ScenarioSample],
    schedule: &ProbeSchedule,
    snr: PilotSnr,
    seed: u64,
    objective: &Objective,
) -> Result<EvalResult> {
    evaluate_with(samples, objective, |i, s| {
        model.configure(s, schedule, snr, eval_noise_seed(seed, i))
    })
}

/// Pilot-noise seed of test sample `i` under evaluation seed `seed`.
pub fn eval_noise_seed(seed: u64, i: usize) -> u64 {
    derive_seed(&[seed, TAG_EVAL, i as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub train_wsr: f64,
    pub test_wsr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,train_wsr,test_wsr,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{:.12e},{:.12e},{:.6}", r.step, r.train_wsr, r.test_wsr, r.seconds)
                .expect("writing to a String");
        }
        out
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub optimizer: OptimizerState,
}

fn check_datasets(train: &Dataset, test: &Dataset, schedule: &ProbeSchedule) -> Result<()> {
    if train.split != Split::Train {
        return Err(Error::Contract("first dataset must be the training split".into()));
    }
    if test.split != Split::Test {
        return Err(Error::Contract("second dataset must be the test split".into()));
    }
    if train.config != test.config {
        return Err(Error::Contract("training and test datasets use different scenarios".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("datasets must be non-empty".into()));
    }
    if train.config.users < 2 {
        return Err(Error::Contract("training needs at least 2 users".into()));
    }
    if train.config.ris_elements != schedule.ris_elements() {
        return Err(Error::Shape {
            op: "train",
            left: (train.config.ris_elements, 1),
            right: (schedule.ris_elements(), 1),
        });
    }
    Ok(())
}

/// Trains `model` for `cfg.steps` steps.
///
/// If `cfg.standardize` is set and the model has no scaler yet, one is
/// fitted on the training split first. Log rows are written at step 0, every
/// `eval_every` steps and after the last step.
pub fn train(
    model: Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    schedule: &ProbeSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let dim = model.params.num_parameters();
    train_from(model, OptimizerState::new(cfg.optimizer, dim), 0, train_ds, test_ds, schedule, cfg)
}

/// Continues training from `start_step` with an existing optimizer state.
pub fn train_from(
    mut model: Model,
    mut opt: OptimizerState,
    start_step: usize,
    train_ds: &Dataset,
    test_ds: &Dataset,
    schedule: &ProbeSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_datasets(train_ds, test_ds, schedule)?;
    if opt.first.len() != model.params.num_parameters() {
        return Err(Error::Contract("optimizer state does not match the network".into()));
    }
    let objective = Objective::new(&train_ds.config, cfg.wmmse);
    if cfg.standardize && model.scaler.is_none() {
        model.scaler = Some(fit_scaler(train_ds, schedule, cfg.pilot_snr, cfg.seed)?);
    }
    let started = Instant::now();
    let monitor = &train_ds.samples[..cfg.train_eval_samples.clamp(1, train_ds.len())];
    let mut log = TrainLog::default();
    let record = |model: &Model, step: usize, log: &mut TrainLog| -> Result<()> {
        let train_wsr = evaluate(model, monitor, schedule, cfg.pilot_snr, cfg.seed, &objective)?.mean;
        let test_wsr = evaluate(model, &test_ds.samples, schedule, cfg.pilot_snr, cfg.seed, &objective)?.mean;
        log::info!("step {step}: train WSR {train_wsr:.4}, test WSR {test_wsr:.4}");
        log.rows.push(LogRow {
            step,
            train_wsr,
            test_wsr,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    };
    record(&model, start_step, &mut log)?;
    let batch = cfg.batch_size.min(train_ds.len());
    let mut theta = model.params.flatten();
    let end = start_step + cfg.steps;
    for step in start_step..end {
        let mut rng = stream_rng(derive_seed(&[cfg.seed, TAG_BATCH, step as u64]), 0);
        let mut ids = sample_indices(&mut rng, train_ds.len(), batch).into_vec();
        ids.sort_unstable();
        let seed = cfg.seed;
        let parts = batch_gradient(&model, train_ds, &ids, schedule, &objective, cfg.pilot_snr, |i| {
            derive_seed(&[seed, TAG_TRAIN, step as u64, i as u64])
        })?;
        let reduced = reduce_mean(&parts);
        if !reduced.mean_wsr.is_finite() || reduced.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                sample_ids: ids,
                param_norm: model.params.norm(),
            });
        }
        opt.ascend(&mut theta, &reduced.grad, cfg.learning_rate);
        model.params = NetworkParams::from_flat(&model.params.config, &theta)?;
        let done = step + 1;
        if (cfg.eval_every > 0 && (done - start_step) % cfg.eval_every == 0) || done == end {
            record(&model, done, &mut log)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        optimizer: opt,
    })
}

/// Noise-free WSR of one sample under `model`, used by quick checks.
pub fn sample_wsr(
    model: &Model,
    sample: &ScenarioSample,
    schedule: &ProbeSchedule,
    objective: &Objective,
) -> Result<f64> {
    let ris = model.configure(sample, schedule, PilotSnr::Infinite, 0)?;
    objective.wsr_of(sample, &ris)
}

//! `risnet-lab`: dataset generation, training, evaluation and baseline
//! comparison driven by one JSON experiment config.
//!
//! Layout of an output directory:
//!
//! ```text
//! out/
//!   train/  test/            datasets (manifest.json + *.bin)
//!   params.json params.bin   checkpoint
//!   train_log.csv            step,train_wsr,test_wsr,seconds
//!   eval.csv                 sample,wsr
//!   compare.csv              method,mean_wsr,seconds_per_sample
//!   props.csv                property,instances,max_dev,pass
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use risnet_core::baselines::{coordinate_ascent, identity_phases, random_phases, AscentOptions, BaselineKind};
use risnet_core::channel::{generate_scenario, load_dataset, save_dataset, Dataset, ScenarioConfig, Split};
use risnet_core::probing::{make_schedule, PilotSnr, ProbeSchedule};
use risnet_core::props::{run_all, to_csv, PropertySizes};
use risnet_core::risnet::{infer, init_params, load_checkpoint, save_checkpoint, Checkpoint, NetworkConfig};
use risnet_core::rng::derive_seed;
use risnet_core::trainer::{eval_noise_seed, evaluate, evaluate_with, train_from, Model, Objective, OptimizerState, TrainConfig};
use risnet_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, flags or input files.
    #[error("{0}")]
    Input(String),
    /// Training or evaluation hit a numerical failure.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } | CoreError::Evaluation(_) => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn default_eval_seed() -> u64 {
    7
}

fn default_baselines() -> Vec<BaselineKind> {
    vec![BaselineKind::RandomPhase, BaselineKind::CoordinateAscent]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Probe block geometry `(rows, cols)`.
    pub block: (usize, usize),
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineKind>,
    #[serde(default)]
    pub ascent: AscentOptions,
    /// Seed for pilot noise and random baselines at evaluation time.
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field and the relations between them.
    pub fn validate(&self) -> CliResult<()> {
        self.scenario.validate()?;
        if self.train_samples == 0 {
            return Err(CoreError::config("train_samples", "must be at least 1").into());
        }
        if self.test_samples == 0 {
            return Err(CoreError::config("test_samples", "must be at least 1").into());
        }
        self.schedule()?;
        self.network.validate()?;
        if self.network.input_dim != 4 * self.scenario.bs_antennas {
            return Err(CoreError::config(
                "network.input_dim",
                format!("must be 4 x bs_antennas = {}", 4 * self.scenario.bs_antennas),
            )
            .into());
        }
        if self.network.block_size != self.block.0 * self.block.1 {
            return Err(CoreError::config(
                "network.block_size",
                format!("must equal the block area {}", self.block.0 * self.block.1),
            )
            .into());
        }
        if self.scenario.users < 2 {
            return Err(CoreError::config("scenario.users", "RISnet needs at least 2 users").into());
        }
        self.train.validate()?;
        if self.ascent.grid < 2 {
            return Err(CoreError::config("ascent.grid", "must be at least 2").into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> CliResult<ProbeSchedule> {
        Ok(make_schedule(self.scenario.ris_geometry, self.block)?)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(&[self.scenario.seed, 1])
    }

    pub fn test_seed(&self) -> u64 {
        derive_seed(&[self.scenario.seed, 2])
    }
}

/// Scalar overrides given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snr: Option<PilotSnr>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// `--seed` sets both the scenario seed and the training seed.
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> CliResult<()> {
        if let Some(seed) = self.seed {
            cfg.scenario.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(snr) = self.snr {
            cfg.train.pilot_snr = snr;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Input(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> CliResult<Dataset> {
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let ds = load_dataset(&cfg.output_dir.join(name))?;
    if ds.split != split {
        return Err(CliError::Input(format!("{name}/ holds a {:?} dataset", ds.split)));
    }
    if ds.config != cfg.scenario {
        return Err(CliError::Input(format!(
            "{name}/ was generated from a different scenario; rerun gen-data"
        )));
    }
    Ok(ds)
}

/// Writes `train/` and `test/` under the output directory.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset)> {
    let train = generate_scenario(&cfg.scenario, cfg.train_samples, cfg.train_seed(), Split::Train)?;
    let test = generate_scenario(&cfg.scenario, cfg.test_samples, cfg.test_seed(), Split::Test)?;
    save_dataset(&train, &cfg.output_dir.join("train"))?;
    save_dataset(&test, &cfg.output_dir.join("test"))?;
    log::info!(
        "wrote {} training and {} test samples to {}",
        train.len(),
        test.len(),
        cfg.output_dir.display()
    );
    Ok((train, test))
}

pub struct TrainReport {
    pub final_test_wsr: f64,
    pub steps: usize,
}

/// Trains from scratch, or from the checkpoint in `resume`, and writes the
/// checkpoint and `train_log.csv` to the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> CliResult<TrainReport> {
    let train_ds = load_split(cfg, Split::Train)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let schedule = cfg.schedule()?;
    let (model, start) = match resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            if ckpt.params.config != cfg.network {
                return Err(CliError::Input("checkpoint network does not match the config".into()));
            }
            (
                Model {
                    params: ckpt.params,
                    scaler: ckpt.scaler,
                },
                ckpt.step,
            )
        }
        None => (
            Model {
                params: init_params(&cfg.network, cfg.train.seed)?,
                scaler: None,
            },
            0,
        ),
    };
    let opt = OptimizerState::new(cfg.train.optimizer, model.params.num_parameters());
    let out = train_from(model, opt, start, &train_ds, &test_ds, &schedule, &cfg.train)?;
    let last = out.log.last().expect("the log holds the initial evaluation");
    let ckpt = Checkpoint {
        params: out.model.params.clone(),
        seed: cfg.train.seed,
        step: last.step,
        scaler: out.model.scaler.clone(),
    };
    save_checkpoint(&cfg.output_dir, &ckpt)?;
    write_file(&cfg.output_dir.join("train_log.csv"), &out.log.to_csv())?;
    Ok(TrainReport {
        final_test_wsr: last.test_wsr,
        steps: last.step,
    })
}

fn load_model(dir: &Path, cfg: &ExperimentConfig) -> CliResult<Model> {
    if !dir.join("params.json").is_file() {
        return Err(CliError::Input(format!("no checkpoint in {}", dir.display())));
    }
    let ckpt = load_checkpoint(dir)?;
    if ckpt.params.config != cfg.network {
        return Err(CliError::Input("checkpoint network does not match the config".into()));
    }
    Ok(Model {
        params: ckpt.params,
        scaler: ckpt.scaler,
    })
}

/// Per-sample test WSR of the checkpoint, written to `eval.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<f64> {
    let model = load_model(checkpoint, cfg)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let schedule = cfg.schedule()?;
    let objective = Objective::new(&cfg.scenario, cfg.train.wmmse);
    let res = evaluate(&model, &test_ds.samples, &schedule, cfg.train.pilot_snr, cfg.eval_seed, &objective)?;
    let mut csv = String::from("sample,wsr\n");
    for (i, w) in res.per_sample.iter().enumerate() {
        writeln!(csv, "{i},{w:.12e}").expect("String write");
    }
    write_file(&cfg.output_dir.join("eval.csv"), &csv)?;
    Ok(res.mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub mean_wsr: f64,
    pub seconds_per_sample: f64,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("method,mean_wsr,seconds_per_sample\n");
    for r in rows {
        writeln!(out, "{},{:.12e},{:.6e}", r.method, r.mean_wsr, r.seconds_per_sample).expect("String write");
    }
    out
}

/// RISnet against every configured baseline on the test split.
///
/// RISnet timing covers the forward pass only; baseline timing covers
/// producing the configuration.
pub fn cmd_compare(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<Vec<CompareRow>> {
    let model = load_model(checkpoint, cfg)?;
    let test_ds = load_split(cfg, Split::Test)?;
    let schedule = cfg.schedule()?;
    let objective = Objective::new(&cfg.scenario, cfg.train.wmmse);
    let n = cfg.scenario.ris_elements;
    let count = test_ds.len() as f64;
    let mut rows = Vec::new();

    let mut configs = Vec::with_capacity(test_ds.len());
    let mut seconds = 0.0;
    for (i, s) in test_ds.samples.iter().enumerate() {
        let features = model.features(s, &schedule, cfg.train.pilot_snr, eval_noise_seed(cfg.eval_seed, i))?;
        let t = Instant::now();
        let ris = infer(&model.params, &features, &schedule)?;
        seconds += t.elapsed().as_secs_f64();
        configs.push(ris);
    }
    let res = evaluate_with(&test_ds.samples, &objective, |i, _| Ok(configs[i].clone()))?;
    rows.push(CompareRow {
        method: "risnet".into(),
        mean_wsr: res.mean,
        seconds_per_sample: seconds / count,
    });

    for &kind in &cfg.baselines {
        let mut configs = Vec::with_capacity(test_ds.len());
        let t = Instant::now();
        for (i, s) in test_ds.samples.iter().enumerate() {
            configs.push(match kind {
                BaselineKind::RandomPhase => random_phases(n, derive_seed(&[cfg.eval_seed, i as u64])),
                BaselineKind::IdentityPhase => identity_phases(n),
                BaselineKind::CoordinateAscent => {
                    coordinate_ascent(s, &s.weights, cfg.scenario.noise_power, cfg.scenario.power_budget, cfg.ascent)?
                        .config
                }
            });
        }
        let seconds = t.elapsed().as_secs_f64();
        let res = evaluate_with(&test_ds.samples, &objective, |i, _| Ok(configs[i].clone()))?;
        rows.push(CompareRow {
            method: kind.name().into(),
            mean_wsr: res.mean,
            seconds_per_sample: seconds / count,
        });
    }
    write_file(&cfg.output_dir.join("compare.csv"), &compare_csv(&rows))?;
    Ok(rows)
}

/// Runs the property suite and writes `props.csv`. Returns whether every
/// property passed.
pub fn cmd_props(out_dir: &Path, seed: u64, instances: usize) -> CliResult<bool> {
    let reports = run_all(
        seed,
        PropertySizes {
            instances,
            ..Default::default()
        },
    );
    write_file(&out_dir.join("props.csv"), &to_csv(&reports))?;
    Ok(reports.iter().all(|r| r.pass))
}

/// Caps the worker pool; 0 or unset means one worker per core.
pub fn init_threads(var: Option<&str>) -> CliResult<()> {
    let threads = match var {
        None => 0,
        Some(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Input(format!("RISNET_THREADS must be a non-negative integer, got `{v}`")))?,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Input(format!("cannot configure worker threads: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_text() -> String {
        fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.json")).unwrap()
    }

    #[test]
    fn desk_config_is_valid() {
        let cfg: ExperimentConfig = serde_json::from_str(&config_text()).unwrap();
        cfg.validate().unwrap();
        assert_eq!((cfg.train_samples, cfg.test_samples), (512, 128));
    }

    #[test]
    fn mismatched_input_dim_names_the_field() {
        let mut cfg: ExperimentConfig = serde_json::from_str(&config_text()).unwrap();
        cfg.network.input_dim = 12;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("network.input_dim"), "{msg}");
    }

    #[test]
    fn overrides_apply() {
        let mut cfg: ExperimentConfig = serde_json::from_str(&config_text()).unwrap();
        Overrides {
            seed: Some(99),
            snr: Some(PilotSnr::Finite(10.0)),
            steps: Some(3),
            out: Some("/tmp/x".into()),
        }
        .apply(&mut cfg)
        .unwrap();
        assert_eq!(cfg.scenario.seed, 99);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.train.pilot_snr, PilotSnr::Finite(10.0));
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let nf = CoreError::NonFinite {
            step: 1,
            sample_ids: vec![0],
            param_norm: 1.0,
        };
        assert_eq!(CliError::from(nf).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::config("block", "bad")).exit_code(), 2);
    }

    #[test]
    fn compare_csv_layout() {
        let csv = compare_csv(&[CompareRow {
            method: "risnet".into(),
            mean_wsr: 2.0,
            seconds_per_sample: 1e-4,
        }]);
        assert_eq!(csv, "method,mean_wsr,seconds_per_sample\nrisnet,2.000000000000e0,1.000000e-4\n");
    }
}

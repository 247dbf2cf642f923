//! Reference RIS configurations that do not learn.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{compose_channel, RisConfig, ScenarioSample};
use crate::error::{Error, Result};
use crate::precoder::{wmmse, wmmse_from, WmmseOptions};
use crate::rng::stream_rng;

const ACCEPT_MARGIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    RandomPhase,
    IdentityPhase,
    CoordinateAscent,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::RandomPhase,
        BaselineKind::IdentityPhase,
        BaselineKind::CoordinateAscent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RandomPhase => "random-phase",
            BaselineKind::IdentityPhase => "identity-phase",
            BaselineKind::CoordinateAscent => "coordinate-ascent",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("baselines", format!("unknown baseline `{s}`")))
    }
}

/// Phases i.i.d. uniform on `[−1, 1)`, i.e. shifts uniform on `[−π, π)`.
pub fn random_phases(n: usize, seed: u64) -> RisConfig {
    let mut rng = stream_rng(seed, 0);
    RisConfig {
        phases: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Every element at phase zero.
pub fn identity_phases(n: usize) -> RisConfig {
    RisConfig::zeros(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub sweeps: usize,
    /// Candidate phases per element: `−1 + 2k / grid` for `k < grid`.
    pub grid: usize,
    pub wmmse: WmmseOptions,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            sweeps: 8,
            grid: 16,
            wmmse: WmmseOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AscentOutcome {
    pub config: RisConfig,
    /// WSR at the start and after every sweep.
    pub trace: Vec<f64>,
}

fn effective_wsr(eff: &[Complex64], users: usize, weights: &[f64], noise: f64) -> f64 {
    (0..users)
        .map(|u| {
            let row = &eff[u * users..(u + 1) * users];
            let signal = row[u].norm_sqr();
            let interference: f64 = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != u)
                .map(|(_, z)| z.norm_sqr())
                .sum();
            weights[u] * (1.0 + signal / (interference + noise)).log2()
        })
        .sum()
}

/// Cyclic per-element grid search with full channel knowledge.
///
/// Within a sweep the precoder is fixed and a candidate phase is accepted
/// only if it strictly raises the WSR. After each sweep the precoder is
/// refreshed by WMMSE started from the current one; the refresh is kept
/// only if it does not lower the WSR. The trace is therefore
/// non-decreasing.
pub fn coordinate_ascent(
    sample: &ScenarioSample,
    weights: &[f64],
    noise: f64,
    power: f64,
    opts: AscentOptions,
) -> Result<AscentOutcome> {
    if opts.grid < 2 {
        return Err(Error::config("grid", "coordinate ascent needs at least 2 candidates"));
    }
    let (n, users) = (sample.ris_elements(), sample.users());
    let mut config = identity_phases(n);
    let c = compose_channel(sample, &config)?;
    let mut v = wmmse(&c, weights, noise, power, opts.wmmse)?.precoder.v;
    let mut eff = c.matmul(&v)?.as_slice().to_vec();
    let mut current = effective_wsr(&eff, users, weights, noise);
    let mut trace = vec![current];
    let candidates: Vec<(f64, Complex64)> = (0..opts.grid)
        .map(|k| {
            let phi = -1.0 + 2.0 * k as f64 / opts.grid as f64;
            (phi, Complex64::from_polar(1.0, PI * phi))
        })
        .collect();
    let mut trial = eff.clone();
    for _ in 0..opts.sweeps {
        // h_n V for every element, under the current precoder.
        let hv = sample.h.matmul(&v)?;
        for ni in 0..n {
            let old = Complex64::from_polar(1.0, PI * config.phases[ni]);
            let mut best: Option<(f64, f64)> = None;
            for &(phi, factor) in &candidates {
                let delta = factor - old;
                for u in 0..users {
                    let a = sample.g[(u, ni)] * delta;
                    for k in 0..users {
                        trial[u * users + k] = eff[u * users + k] + a * hv[(ni, k)];
                    }
                }
                let value = effective_wsr(&trial, users, weights, noise);
                // The margin keeps rounding in the incremental update from
                // admitting a move that does not really improve.
                let bar = best.map_or(current, |b| b.0);
                if value > bar + ACCEPT_MARGIN * bar.abs().max(1.0) {
                    best = Some((value, phi));
                }
            }
            if let Some((_, phi)) = best {
                let previous = config.phases[ni];
                config.phases[ni] = phi;
                let exact = compose_channel(sample, &config)?.matmul(&v)?.as_slice().to_vec();
                let value = effective_wsr(&exact, users, weights, noise);
                if value >= current {
                    eff = exact;
                    current = value;
                } else {
                    config.phases[ni] = previous;
                }
            }
        }
        let c = compose_channel(sample, &config)?;
        let refreshed = wmmse_from(&c, weights, noise, power, opts.wmmse, &v)?;
        let r_eff = c.matmul(&refreshed.precoder.v)?.as_slice().to_vec();
        let r_value = effective_wsr(&r_eff, users, weights, noise);
        if r_value >= current {
            v = refreshed.precoder.v;
            eff = r_eff;
            current = r_value;
        }
        trace.push(current);
    }
    Ok(AscentOutcome { config, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_scenario, ScenarioConfig, Split};

    fn desk_sample(seed: u64) -> (ScenarioSample, ScenarioConfig) {
        let cfg = ScenarioConfig::desk();
        let ds = generate_scenario(&cfg, 1, seed, Split::Test).unwrap();
        (ds.samples.into_iter().next().unwrap(), cfg)
    }

    #[test]
    fn random_phases_are_seeded() {
        assert_eq!(random_phases(32, 4), random_phases(32, 4));
        assert_ne!(random_phases(32, 4), random_phases(32, 5));
    }

    #[test]
    fn random_phase_moments() {
        let p = random_phases(100_000, 1).phases;
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        // Uniform on [−1, 1) has variance 1/3.
        let sigma = (1.0 / 3.0 / p.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "{mean}");
        assert!(p.iter().all(|&x| (-1.0..1.0).contains(&x)));
        for f in random_phases(1000, 2).factors() {
            assert!((f.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_phases_do_not_depend_on_position() {
        // First and second halves of one long draw have matching moments.
        let p = random_phases(100_000, 3).phases;
        let (a, b) = p.split_at(50_000);
        let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let sigma = (2.0 / 3.0 / 50_000.0f64).sqrt();
        assert!((m(a) - m(b)).abs() < 3.0 * sigma);
    }

    #[test]
    fn zero_sweeps_returns_identity() {
        let (s, cfg) = desk_sample(1);
        let out = coordinate_ascent(
            &s,
            &s.weights,
            cfg.noise_power,
            cfg.power_budget,
            AscentOptions {
                sweeps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.config, identity_phases(16));
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn trace_is_monotone() {
        for seed in 0..5 {
            let (s, cfg) = desk_sample(seed);
            let out = coordinate_ascent(&s, &s.weights, cfg.noise_power, cfg.power_budget, AscentOptions::default()).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", out.trace);
            assert!(out.trace.last().unwrap() > &out.trace[0]);
        }
    }

    #[test]
    fn single_element_matches_exhaustive_scan() {
        let mut cfg = ScenarioConfig::desk();
        cfg.ris_elements = 1;
        cfg.ris_geometry = (1, 1);
        cfg.users = 1;
        cfg.direct_attenuation_db = 0.0;
        let s = generate_scenario(&cfg, 1, 9, Split::Test).unwrap().samples.remove(0);
        let grid = 256;
        let out = coordinate_ascent(
            &s,
            &s.weights,
            cfg.noise_power,
            cfg.power_budget,
            AscentOptions {
                sweeps: 6,
                grid,
                wmmse: WmmseOptions::default(),
            },
        )
        .unwrap();
        // Single user: the optimum over V is matched filtering at full power,
        // so the best phase maximizes the channel norm.
        let best = (0..grid)
            .map(|k| -1.0 + 2.0 * k as f64 / grid as f64)
            .max_by(|&a, &b| {
                let norm = |phi: f64| compose_channel(&s, &RisConfig { phases: vec![phi] }).unwrap().norm_sqr();
                norm(a).total_cmp(&norm(b))
            })
            .unwrap();
        let gap = (out.config.phases[0] - best).abs();
        let gap = gap.min(2.0 - gap);
        assert!(gap <= 2.0 / grid as f64 + 1e-12, "{} vs {best}", out.config.phases[0]);
    }

    #[test]
    fn rejects_tiny_grid() {
        let (s, cfg) = desk_sample(1);
        let opts = AscentOptions {
            grid: 1,
            ..Default::default()
        };
        assert!(coordinate_ascent(&s, &s.weights, cfg.noise_power, cfg.power_budget, opts).is_err());
    }

    #[test]
    fn kinds_round_trip_through_names() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("bcd".parse::<BaselineKind>().is_err());
    }
}

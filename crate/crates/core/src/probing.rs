//! Implicit channel estimation.
//!
//! The RIS is partitioned into `I` disjoint blocks. Each user sends the same
//! pilot `I + 1` times: once with every element at phase 0 and once per
//! block with that block flipped to phase π. Differences of the received
//! pilots expose per-block sums of the cascaded channel, and one fixed
//! combination of all of them cancels the reflected path entirely:
//!
//! ```text
//! y_u(i) − y_u(0)                 = −2 Σ_{n∈Λ_i} h_n g_un      (noise-free)
//! (I − 2) y_u(0) − Σ_i y_u(i)     = −2 d_u
//! ```
//!
//! The second line follows from `(I − 2) Φ(0) − Σ_i Φ(i) = 0`, which holds
//! for any partition because each element is flipped in exactly one of the
//! `I` probing configurations.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::{RisConfig, ScenarioSample};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Partition of the RIS into rectangular blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSchedule {
    ris_geometry: (usize, usize),
    block_geometry: (usize, usize),
    /// `blocks[i][j]` is the element at row-major position `j` of block `i`.
    blocks: Vec<Vec<usize>>,
}

/// Tiles a `rows × cols` RIS with `block_rows × block_cols` blocks in
/// row-major block order.
pub fn make_schedule(ris: (usize, usize), block: (usize, usize)) -> Result<ProbeSchedule> {
    let (rows, cols) = ris;
    let (br, bc) = block;
    if rows == 0 || cols == 0 {
        return Err(Error::config("ris_geometry", "RIS dimensions must be positive"));
    }
    if br == 0 || bc == 0 || rows % br != 0 || cols % bc != 0 {
        return Err(Error::config(
            "block",
            format!("{br}x{bc} blocks do not tile a {rows}x{cols} RIS"),
        ));
    }
    let mut blocks = Vec::with_capacity((rows / br) * (cols / bc));
    for block_row in 0..rows / br {
        for block_col in 0..cols / bc {
            let mut members = Vec::with_capacity(br * bc);
            for r in 0..br {
                for c in 0..bc {
                    members.push((block_row * br + r) * cols + block_col * bc + c);
                }
            }
            blocks.push(members);
        }
    }
    Ok(ProbeSchedule {
        ris_geometry: ris,
        block_geometry: block,
        blocks,
    })
}

impl ProbeSchedule {
    /// Number of blocks `I`.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Elements per block `J`.
    pub fn block_size(&self) -> usize {
        self.block_geometry.0 * self.block_geometry.1
    }

    pub fn ris_elements(&self) -> usize {
        self.ris_geometry.0 * self.ris_geometry.1
    }

    pub fn ris_geometry(&self) -> (usize, usize) {
        self.ris_geometry
    }

    pub fn block_geometry(&self) -> (usize, usize) {
        self.block_geometry
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Element at within-block position `j` of block `i`.
    pub fn element(&self, block: usize, j: usize) -> usize {
        self.blocks[block][j]
    }

    /// Diagonal of Φ(i): all `+1` for `i = 0`, `−1` on block `i` otherwise.
    pub fn probe_diagonal(&self, i: usize) -> Result<Vec<f64>> {
        let mut diag = vec![0.0; self.ris_elements()];
        self.write_probe_diagonal(i, &mut diag)?;
        Ok(diag)
    }

    /// [`probe_diagonal`](Self::probe_diagonal) into a caller-owned buffer
    /// of length N.
    pub fn write_probe_diagonal(&self, i: usize, out: &mut [f64]) -> Result<()> {
        if i > self.num_blocks() {
            return Err(Error::Contract(format!(
                "probe index {i} out of range 0..={}",
                self.num_blocks()
            )));
        }
        if out.len() != self.ris_elements() {
            return Err(Error::Contract(format!(
                "diagonal buffer has {} entries for {} elements",
                out.len(),
                self.ris_elements()
            )));
        }
        out.fill(1.0);
        if i > 0 {
            for &n in &self.blocks[i - 1] {
                out[n] = -1.0;
            }
        }
        Ok(())
    }

    /// Probing configuration `i` as phases (`1.0` means a shift of π).
    pub fn probe_config(&self, i: usize) -> Result<RisConfig> {
        let diag = self.probe_diagonal(i)?;
        Ok(RisConfig {
            phases: diag.iter().map(|&d| if d < 0.0 { 1.0 } else { 0.0 }).collect(),
        })
    }
}

/// Pilot SNR: finite and positive, or infinite (noise-free probing).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PilotSnr {
    Infinite,
    Finite(f64),
}

impl PilotSnr {
    pub fn validate(self) -> Result<Self> {
        match self {
            PilotSnr::Finite(x) if !(x > 0.0 && x.is_finite()) => {
                Err(Error::config("pilot_snr", format!("must be > 0 or inf, got {x}")))
            }
            other => Ok(other),
        }
    }
}

impl fmt::Display for PilotSnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PilotSnr::Infinite => write!(f, "inf"),
            PilotSnr::Finite(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for PilotSnr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(PilotSnr::Infinite);
        }
        let x: f64 = t
            .parse()
            .map_err(|_| Error::config("pilot_snr", format!("cannot parse `{s}`")))?;
        if x.is_infinite() && x > 0.0 {
            return Ok(PilotSnr::Infinite);
        }
        PilotSnr::Finite(x).validate()
    }
}

impl Serialize for PilotSnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PilotSnr::Infinite => s.serialize_str("inf"),
            PilotSnr::Finite(x) => s.serialize_f64(*x),
        }
    }
}

impl<'de> Deserialize<'de> for PilotSnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(x) => PilotSnr::Finite(x).validate(),
            Raw::Str(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Received pilots `y_u(i)` for every user `u` and configuration `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotObservation {
    users: usize,
    configs: usize,
    antennas: usize,
    /// Indexed `[(u * configs + i) * antennas + m]`.
    y: Vec<Complex64>,
    pub pilot_snr: PilotSnr,
    /// Per-antenna complex noise variance actually used.
    pub noise_variance: f64,
}

impl PilotObservation {
    pub fn users(&self) -> usize {
        self.users
    }

    /// Number of blocks `I` (configurations minus one).
    pub fn blocks(&self) -> usize {
        self.configs - 1
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn received(&self, u: usize, i: usize) -> &[Complex64] {
        let start = (u * self.configs + i) * self.antennas;
        &self.y[start..start + self.antennas]
    }

    /// Every received sample, ordered by user, configuration, antenna.
    pub fn samples(&self) -> &[Complex64] {
        &self.y
    }
}

/// Noise-free received pilot `d_u + Hᵀ Φ g_u` (pilot symbol 1).
fn clean_pilot(sample: &ScenarioSample, diag: &[f64], u: usize) -> Vec<Complex64> {
    let m_count = sample.bs_antennas();
    let mut y: Vec<Complex64> = (0..m_count).map(|m| sample.d[(u, m)]).collect();
    for (n, &phi) in diag.iter().enumerate() {
        let a = sample.g[(u, n)] * phi;
        let h_row = sample.h.row(n);
        for (ym, &h) in y.iter_mut().zip(h_row) {
            *ym += h * a;
        }
    }
    y
}

/// Simulates the uplink probing phase.
///
/// Noise is circular Gaussian per antenna with variance chosen so that the
/// mean received signal power (over antennas, users and configurations)
/// divided by the noise variance equals `pilot_snr`.
pub fn simulate_pilots(
    sample: &ScenarioSample,
    schedule: &ProbeSchedule,
    pilot_snr: PilotSnr,
    seed: u64,
) -> Result<PilotObservation> {
    let pilot_snr = pilot_snr.validate()?;
    if sample.ris_elements() != schedule.ris_elements() {
        return Err(Error::Shape {
            op: "simulate_pilots",
            left: (sample.ris_elements(), 1),
            right: (schedule.ris_elements(), 1),
        });
    }
    let (users, antennas) = (sample.users(), sample.bs_antennas());
    let configs = schedule.num_blocks() + 1;
    let mut obs = PilotObservation {
        users,
        configs,
        antennas,
        y: Vec::with_capacity(users * configs * antennas),
        pilot_snr,
        noise_variance: 0.0,
    };
    for u in 0..users {
        for i in 0..configs {
            let diag = schedule.probe_diagonal(i)?;
            obs.y.extend(clean_pilot(sample, &diag, u));
        }
    }
    if let PilotSnr::Finite(snr) = pilot_snr {
        let power = obs.y.iter().map(|z| z.norm_sqr()).sum::<f64>() / obs.y.len() as f64;
        let variance = power / snr;
        let std = (variance / 2.0).sqrt();
        let mut rng = stream_rng(seed, 0);
        for z in obs.y.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z += Complex64::new(re * std, im * std);
        }
        obs.noise_variance = variance;
    }
    Ok(obs)
}

/// Network input: for each (user, block) a vector of `4M` reals: the
/// cascaded difference `y_u(i) − y_u(0)` followed by the direct combination
/// `(I − 2) y_u(0) − Σ_i y_u(i)`, each as interleaved `(re, im)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    users: usize,
    blocks: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(users: usize, blocks: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != users * blocks * dim {
            return Err(Error::Shape {
                op: "feature tensor",
                left: (users * blocks, dim),
                right: (data.len(), 1),
            });
        }
        Ok(Self {
            users,
            blocks,
            dim,
            data,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, u: usize, i: usize) -> &[f64] {
        let start = (u * self.blocks + i) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn get_mut(&mut self, u: usize, i: usize) -> &mut [f64] {
        let start = (u * self.blocks + i) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The cascaded half (first `2M` entries) of `(u, i)`.
    pub fn cascaded(&self, u: usize, i: usize) -> &[f64] {
        &self.get(u, i)[..self.dim / 2]
    }

    /// The direct half (last `2M` entries) of `(u, i)`.
    pub fn direct(&self, u: usize, i: usize) -> &[f64] {
        &self.get(u, i)[self.dim / 2..]
    }

    /// Reorders the user axis: user `k` of the result is user `perm[k]`.
    pub fn permute_users(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &u in perm {
            for i in 0..self.blocks {
                data.extend_from_slice(self.get(u, i));
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }

    /// Reorders the block axis: block `k` of the result is block `perm[k]`.
    pub fn permute_blocks(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for u in 0..self.users {
            for &i in perm {
                data.extend_from_slice(self.get(u, i));
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

fn push_complex(out: &mut Vec<f64>, z: Complex64) {
    out.push(z.re);
    out.push(z.im);
}

pub fn extract_features(obs: &PilotObservation) -> FeatureTensor {
    let (users, blocks, m) = (obs.users(), obs.blocks(), obs.antennas());
    let dim = 4 * m;
    let mut data = Vec::with_capacity(users * blocks * dim);
    for u in 0..users {
        let y0 = obs.received(u, 0);
        let direct: Vec<Complex64> = (0..m)
            .map(|k| {
                let total: Complex64 = (1..=blocks).map(|i| obs.received(u, i)[k]).sum();
                y0[k] * (blocks as f64 - 2.0) - total
            })
            .collect();
        for i in 1..=blocks {
            let yi = obs.received(u, i);
            for k in 0..m {
                push_complex(&mut data, yi[k] - y0[k]);
            }
            for &z in &direct {
                push_complex(&mut data, z);
            }
        }
    }
    FeatureTensor {
        users,
        blocks,
        dim,
        data,
    }
}

/// Per-dimension affine standardization `(x − mean) / std`, fitted on the
/// training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a FeatureTensor>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for t in tensors {
            if sum.is_empty() {
                sum = vec![0.0; t.dim()];
                sum_sq = vec![0.0; t.dim()];
            } else if t.dim() != sum.len() {
                return Err(Error::Shape {
                    op: "FeatureScaler::fit",
                    left: (sum.len(), 1),
                    right: (t.dim(), 1),
                });
            }
            for row in t.as_slice().chunks_exact(t.dim()) {
                for (k, &x) in row.iter().enumerate() {
                    sum[k] += x;
                    sum_sq[k] += x * x;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("cannot fit a scaler on no features".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(&sq, &mu)| {
                let var = (sq / n - mu * mu).max(0.0);
                let sd = var.sqrt();
                // Constant dimensions pass through unscaled.
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, t: &FeatureTensor) -> Result<FeatureTensor> {
        if t.dim() != self.mean.len() {
            return Err(Error::Shape {
                op: "FeatureScaler::apply",
                left: (self.mean.len(), 1),
                right: (t.dim(), 1),
            });
        }
        let mut out = t.clone();
        for row in out.data.chunks_exact_mut(t.dim()) {
            for (k, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[k]) / self.std[k];
            }
        }
        Ok(out)
    }
}

//! Problem instances: synthetic channel generation, persistence, and the
//! end-to-end channel `C = D + G Φ H`.
//!
//! Geometry: the BS is a half-wavelength ULA along x centred at
//! `bs_position`; the RIS is a half-wavelength UPA in the x–z plane whose
//! element `n = r * cols + c` sits at `ris_position + (c·λ/2, 0, r·λ/2)`;
//! users stand on the ground plane `z = 0` inside `user_region`.
//!
//! Every link entry is `√β · (√(κ/(1+κ)) e^{-j2πd/λ} + √(1/(1+κ)) z)` with
//! `β = (λ / 4πd₀)²` the free-space gain at the link's centre distance,
//! `d` the exact element-to-element distance, and `z ~ CN(0, 1)`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::rng::stream_rng;

/// Axis-aligned rectangle on the ground plane, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn default_user_rician() -> Option<f64> {
    Some(10.0)
}

fn default_attenuation() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// BS antennas (M).
    pub bs_antennas: usize,
    /// RIS elements (N).
    pub ris_elements: usize,
    pub users: usize,
    /// Receiver noise power σ², watts.
    pub noise_power: f64,
    /// Transmit power budget, watts.
    pub power_budget: f64,
    /// `(rows, cols)` of the RIS array.
    pub ris_geometry: (usize, usize),
    /// Rician factor κ of the BS–RIS link.
    pub rician_factor: f64,
    /// Rician factor of the RIS–user and BS–user links; `null` means pure
    /// line of sight.
    #[serde(default = "default_user_rician")]
    pub user_rician_factor: Option<f64>,
    pub user_region: Region,
    pub carrier_wavelength: f64,
    pub bs_position: [f64; 3],
    pub ris_position: [f64; 3],
    /// Extra loss on the BS–user link (blockage), dB.
    #[serde(default = "default_attenuation")]
    pub direct_attenuation_db: f64,
    /// Per-user weights; defaults to all ones. Must sum to `users`.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Desk-scale scenario: M = 4, U = 2, 4×4 RIS.
    pub fn desk() -> Self {
        Self {
            bs_antennas: 4,
            ris_elements: 16,
            users: 2,
            noise_power: 1e-12,
            power_budget: 1.0,
            ris_geometry: (4, 4),
            rician_factor: 1.0,
            user_rician_factor: Some(10.0),
            user_region: Region {
                x_min: 10.0,
                x_max: 30.0,
                y_min: 10.0,
                y_max: 30.0,
            },
            carrier_wavelength: 0.1,
            bs_position: [0.0, -20.0, 10.0],
            ris_position: [0.0, 0.0, 5.0],
            direct_attenuation_db: 60.0,
            weights: None,
            seed: 1,
        }
    }

    /// The desk scenario with a 36×36 RIS.
    pub fn full_size() -> Self {
        Self {
            ris_elements: 1296,
            ris_geometry: (36, 36),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bs_antennas < 1 {
            return Err(Error::config("bs_antennas", "must be at least 1"));
        }
        if self.ris_elements < 1 {
            return Err(Error::config("ris_elements", "must be at least 1"));
        }
        if self.users < 1 {
            return Err(Error::config("users", "must be at least 1"));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return Err(Error::config("noise_power", "must be positive and finite"));
        }
        if !(self.power_budget > 0.0 && self.power_budget.is_finite()) {
            return Err(Error::config("power_budget", "must be positive and finite"));
        }
        let (rows, cols) = self.ris_geometry;
        if rows * cols != self.ris_elements {
            return Err(Error::config(
                "ris_geometry",
                format!("{rows}x{cols} does not hold {} elements", self.ris_elements),
            ));
        }
        if !(self.rician_factor >= 0.0 && self.rician_factor.is_finite()) {
            return Err(Error::config("rician_factor", "must be finite and >= 0"));
        }
        if let Some(k) = self.user_rician_factor {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::config("user_rician_factor", "must be finite and >= 0"));
            }
        }
        let r = &self.user_region;
        if !(r.x_max > r.x_min && r.y_max > r.y_min) {
            return Err(Error::config("user_region", "region has zero area"));
        }
        if !(self.carrier_wavelength > 0.0) {
            return Err(Error::config("carrier_wavelength", "must be positive"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.users {
                return Err(Error::config(
                    "weights",
                    format!("{} weights for {} users", w.len(), self.users),
                ));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::config("weights", "weights must be positive"));
            }
            let total: f64 = w.iter().sum();
            if (total - self.users as f64).abs() > 1e-9 * self.users as f64 {
                return Err(Error::config("weights", format!("weights sum to {total}, expected {}", self.users)));
            }
        }
        Ok(())
    }

    pub fn user_weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.users])
    }

    pub fn bs_antenna_position(&self, m: usize) -> [f64; 3] {
        let half = self.carrier_wavelength / 2.0;
        let offset = (m as f64 - (self.bs_antennas as f64 - 1.0) / 2.0) * half;
        let p = self.bs_position;
        [p[0] + offset, p[1], p[2]]
    }

    pub fn ris_element_position(&self, n: usize) -> [f64; 3] {
        let half = self.carrier_wavelength / 2.0;
        let cols = self.ris_geometry.1;
        let (r, c) = (n / cols, n % cols);
        let p = self.ris_position;
        [p[0] + c as f64 * half, p[1], p[2] + r as f64 * half]
    }

    fn ris_centre(&self) -> [f64; 3] {
        let half = self.carrier_wavelength / 2.0;
        let (rows, cols) = self.ris_geometry;
        let p = self.ris_position;
        [
            p[0] + (cols as f64 - 1.0) * half / 2.0,
            p[1],
            p[2] + (rows as f64 - 1.0) * half / 2.0,
        ]
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Free-space power gain `(λ / 4πd)²`.
pub fn free_space_gain(distance: f64, wavelength: f64) -> f64 {
    (wavelength / (4.0 * PI * distance)).powi(2)
}

fn cn01(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// One Rician entry. `kappa = None` is pure line of sight.
fn rician_entry(
    gain: f64,
    kappa: Option<f64>,
    dist: f64,
    wavelength: f64,
    rng: &mut impl Rng,
) -> Complex64 {
    let los = Complex64::from_polar(1.0, -2.0 * PI * dist / wavelength);
    let amp = gain.sqrt();
    match kappa {
        None => los * amp,
        Some(k) => {
            let los_w = (k / (1.0 + k)).sqrt();
            let nlos_w = (1.0 / (1.0 + k)).sqrt();
            (los * los_w + cn01(rng) * nlos_w) * amp
        }
    }
}

/// One problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSample {
    /// BS → RIS, N×M.
    pub h: CMatrix,
    /// RIS → users, U×N.
    pub g: CMatrix,
    /// BS → users, U×M.
    pub d: CMatrix,
    pub weights: Vec<f64>,
}

impl ScenarioSample {
    pub fn bs_antennas(&self) -> usize {
        self.h.cols()
    }

    pub fn ris_elements(&self) -> usize {
        self.h.rows()
    }

    pub fn users(&self) -> usize {
        self.g.rows()
    }

    fn check(&self) -> Result<()> {
        let (n, m, u) = (self.h.rows(), self.h.cols(), self.g.rows());
        if self.g.cols() != n {
            return Err(Error::Shape {
                op: "sample G",
                left: self.g.shape(),
                right: self.h.shape(),
            });
        }
        if self.d.shape() != (u, m) {
            return Err(Error::Shape {
                op: "sample D",
                left: self.d.shape(),
                right: (u, m),
            });
        }
        Ok(())
    }
}

/// Channels of a user standing at `pos`: returns `(g_u, d_u)` rows.
pub fn user_channels(
    config: &ScenarioConfig,
    pos: [f64; 3],
    rng: &mut impl Rng,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let lambda = config.carrier_wavelength;
    let kappa = config.user_rician_factor;
    let g_gain = free_space_gain(distance(config.ris_centre(), pos), lambda);
    let g = (0..config.ris_elements)
        .map(|n| {
            let d = distance(config.ris_element_position(n), pos);
            rician_entry(g_gain, kappa, d, lambda, rng)
        })
        .collect();
    let atten = 10f64.powf(-config.direct_attenuation_db / 10.0);
    let d_gain = free_space_gain(distance(config.bs_position, pos), lambda) * atten;
    let d = (0..config.bs_antennas)
        .map(|m| {
            let dist = distance(config.bs_antenna_position(m), pos);
            rician_entry(d_gain, kappa, dist, lambda, rng)
        })
        .collect();
    (g, d)
}

/// Per-sample random stream: independent of how many samples precede it.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    stream_rng(seed, index)
}

fn generate_sample(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> ScenarioSample {
    let (n, m, u) = (config.ris_elements, config.bs_antennas, config.users);
    let lambda = config.carrier_wavelength;
    let h_gain = free_space_gain(distance(config.bs_position, config.ris_centre()), lambda);
    let kappa = Some(config.rician_factor);
    let mut h = CMatrix::zeros(n, m);
    for ni in 0..n {
        let pe = config.ris_element_position(ni);
        for mi in 0..m {
            let dist = distance(pe, config.bs_antenna_position(mi));
            h[(ni, mi)] = rician_entry(h_gain, kappa, dist, lambda, rng);
        }
    }
    let r = config.user_region;
    let mut g = CMatrix::zeros(u, n);
    let mut d = CMatrix::zeros(u, m);
    for ui in 0..u {
        let pos = [
            rng.random_range(r.x_min..r.x_max),
            rng.random_range(r.y_min..r.y_max),
            0.0,
        ];
        let (gu, du) = user_channels(config, pos, rng);
        for (ni, v) in gu.into_iter().enumerate() {
            g[(ui, ni)] = v;
        }
        for (mi, v) in du.into_iter().enumerate() {
            d[(ui, mi)] = v;
        }
    }
    ScenarioSample {
        h,
        g,
        d,
        weights: config.user_weights(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<ScenarioSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws `count` samples. Sample `k` uses stream `k` of the generator
/// seeded with `seed`.
pub fn generate_scenario(
    config: &ScenarioConfig,
    count: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    let samples = (0..count)
        .map(|k| generate_sample(config, &mut sample_rng(seed, k as u64)))
        .collect();
    Ok(Dataset {
        config: config.clone(),
        split,
        seed,
        samples,
    })
}

/// Unit-modulus RIS configuration. `phases[n] = φ_n` and the applied factor
/// is `e^{jπφ_n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RisConfig {
    pub phases: Vec<f64>,
}

impl RisConfig {
    pub fn zeros(n: usize) -> Self {
        Self {
            phases: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn factors(&self) -> Vec<Complex64> {
        self.phases
            .iter()
            .map(|&p| Complex64::new((PI * p).cos(), (PI * p).sin()))
            .collect()
    }

    /// Φ as an explicit N×N diagonal matrix.
    pub fn matrix(&self) -> CMatrix {
        CMatrix::diag(&self.factors())
    }
}

/// `C = D + G Φ H` for diagonal `Φ` with the given factors.
pub fn compose_with_factors(sample: &ScenarioSample, factors: &[Complex64]) -> Result<CMatrix> {
    sample.check()?;
    let (n, m, u) = (sample.ris_elements(), sample.bs_antennas(), sample.users());
    if factors.len() != n {
        return Err(Error::Shape {
            op: "compose_channel",
            left: (n, n),
            right: (factors.len(), 1),
        });
    }
    let mut c = sample.d.clone();
    for ui in 0..u {
        for ni in 0..n {
            let a = sample.g[(ui, ni)] * factors[ni];
            let h_row = sample.h.row(ni);
            for mi in 0..m {
                c[(ui, mi)] += a * h_row[mi];
            }
        }
    }
    Ok(c)
}

pub fn compose_channel(sample: &ScenarioSample, ris: &RisConfig) -> Result<CMatrix> {
    compose_with_factors(sample, &ris.factors())
}

/// Differentiable `C = D + G Φ H`. `factors[n]` is `(cos πφ_n, sin πφ_n)`
/// as graph values; returns `U·M` entries `(re, im)` in row-major order.
pub fn compose_channel_graph<G: Graph>(
    g: &mut G,
    sample: &ScenarioSample,
    factors: &[(G::V, G::V)],
) -> Result<Vec<(G::V, G::V)>> {
    sample.check()?;
    let (n, m, u) = (sample.ris_elements(), sample.bs_antennas(), sample.users());
    if factors.len() != n {
        return Err(Error::Shape {
            op: "compose_channel",
            left: (n, n),
            right: (factors.len(), 1),
        });
    }
    let vars: Vec<G::V> = factors.iter().flat_map(|&(c, s)| [c, s]).collect();
    let mut re_coef = vec![0.0; 2 * n];
    let mut im_coef = vec![0.0; 2 * n];
    let mut out = Vec::with_capacity(u * m);
    for ui in 0..u {
        for mi in 0..m {
            // g_un h_nm (c_n + j s_n)
            for ni in 0..n {
                let k = sample.g[(ui, ni)] * sample.h[(ni, mi)];
                re_coef[2 * ni] = k.re;
                re_coef[2 * ni + 1] = -k.im;
                im_coef[2 * ni] = k.im;
                im_coef[2 * ni + 1] = k.re;
            }
            let d = sample.d[(ui, mi)];
            let re = g.lincomb(&re_coef, &vars, d.re);
            let im = g.lincomb(&im_coef, &vars, d.im);
            out.push((re, im));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence

const FORMAT: &str = "risnet-dataset/1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub file: String,
    /// `[count, rows, cols]`; complex arrays store two f64 per entry.
    pub shape: Vec<usize>,
    pub complex: bool,
    pub byte_length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ScenarioConfig,
    pub count: usize,
    pub split: Split,
    pub seed: u64,
    pub arrays: std::collections::BTreeMap<String, ArrayEntry>,
}

fn expected_arrays(config: &ScenarioConfig, count: usize) -> Vec<(&'static str, ArrayEntry)> {
    let (n, m, u) = (config.ris_elements, config.bs_antennas, config.users);
    let entry = |name: &str, rows: usize, cols: usize, complex: bool| {
        let per = if complex { 16 } else { 8 };
        ArrayEntry {
            file: format!("{name}.bin"),
            shape: vec![count, rows, cols],
            complex,
            byte_length: (count * rows * cols * per) as u64,
        }
    };
    vec![
        ("H", entry("H", n, m, true)),
        ("G", entry("G", u, n, true)),
        ("D", entry("D", u, m, true)),
        ("w", entry("w", 1, u, false)),
    ]
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn push_complex(buf: &mut Vec<u8>, m: &CMatrix) {
    for z in m.as_slice() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
}

/// Writes `manifest.json` and `{H,G,D,w}.bin` into `dir` (created if needed).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bufs: [Vec<u8>; 4] = Default::default();
    for s in &ds.samples {
        push_complex(&mut bufs[0], &s.h);
        push_complex(&mut bufs[1], &s.g);
        push_complex(&mut bufs[2], &s.d);
        for w in &s.weights {
            bufs[3].extend_from_slice(&w.to_le_bytes());
        }
    }
    let arrays = expected_arrays(&ds.config, ds.len());
    for ((_, entry), buf) in arrays.iter().zip(&bufs) {
        let path = dir.join(&entry.file);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(buf).map_err(io_err(&path))?;
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: ds.config.clone(),
        count: ds.len(),
        split: ds.split,
        seed: ds.seed,
        arrays: arrays.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(())
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn complex_matrices(values: &[f64], rows: usize, cols: usize) -> Vec<CMatrix> {
    values
        .chunks_exact(2 * rows * cols)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect();
            CMatrix::from_vec(rows, cols, data).expect("chunk sized to shape")
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT {
        return Err(Error::corrupt(
            "manifest",
            format!("unknown format `{}`", manifest.format),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::corrupt("manifest", e.to_string()))?;
    let count = manifest.count;
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(4);
    for (name, expected) in expected_arrays(&manifest.config, count) {
        let declared = manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::corrupt(name, "missing from manifest"))?;
        if declared.shape != expected.shape || declared.complex != expected.complex {
            return Err(Error::corrupt(
                name,
                format!(
                    "manifest shape {:?} disagrees with scenario shape {:?}",
                    declared.shape, expected.shape
                ),
            ));
        }
        if declared.byte_length != expected.byte_length {
            return Err(Error::corrupt(
                name,
                format!(
                    "declared byte length {} but shape implies {}",
                    declared.byte_length, expected.byte_length
                ),
            ));
        }
        let path: PathBuf = dir.join(&declared.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() as u64 != expected.byte_length {
            return Err(Error::corrupt(
                name,
                format!(
                    "file holds {} bytes, expected {}",
                    bytes.len(),
                    expected.byte_length
                ),
            ));
        }
        let values = read_f64s(&bytes);
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::corrupt(name, format!("non-finite value at offset {i}")));
        }
        data.push(values);
    }
    let cfg = &manifest.config;
    let (n, m, u) = (cfg.ris_elements, cfg.bs_antennas, cfg.users);
    let hs = complex_matrices(&data[0], n, m);
    let gs = complex_matrices(&data[1], u, n);
    let ds = complex_matrices(&data[2], u, m);
    let ws: Vec<Vec<f64>> = data[3].chunks_exact(u).map(|c| c.to_vec()).collect();
    let mut samples = Vec::with_capacity(count);
    for (k, (((h, g), d), w)) in hs.into_iter().zip(gs).zip(ds).zip(ws).enumerate() {
        if w.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::corrupt("w", format!("non-positive weight in sample {k}")));
        }
        samples.push(ScenarioSample { h, g, d, weights: w });
    }
    Ok(Dataset {
        config: manifest.config,
        split: manifest.split,
        seed: manifest.seed,
        samples,
    })
}

//! Self-check suite: every identity and invariant the pipeline relies on,
//! evaluated on randomized small instances.
//!
//! Failures are reported, never thrown, so one run yields a complete table.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compare_central_differences, Tape};
use crate::channel::{compose_channel, RisConfig, ScenarioSample};
use crate::error::Result;
use crate::linalg::CMatrix;
use crate::precoder::{wmmse, WmmseOptions};
use crate::probing::{extract_features, make_schedule, simulate_pilots, PilotSnr, ProbeSchedule};
use crate::risnet::{expansion_forward, infer, init_params, layer_forward, Grid, NetworkConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::trainer::{sample_gradient, wsr_with_params, Model, Objective, OptimizerState, Optimizer};

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyReport {
    pub property: String,
    pub instances: usize,
    pub max_dev: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Size grid for the random instances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropertySizes {
    pub instances: usize,
    pub max_antennas: usize,
    /// Upper bound on RIS rows and columns.
    pub max_side: usize,
    pub max_users: usize,
}

impl Default for PropertySizes {
    fn default() -> Self {
        Self {
            instances: 100,
            max_antennas: 4,
            max_side: 4,
            max_users: 3,
        }
    }
}

/// Deliberate defects used to confirm that the suite can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FaultInjection {
    /// Negates the cascaded half of every extracted feature.
    pub flip_cascaded_sign: bool,
}

pub fn run_all(seed: u64, sizes: PropertySizes) -> Vec<PropertyReport> {
    run_all_with(seed, sizes, FaultInjection::default())
}

pub fn run_all_with(seed: u64, sizes: PropertySizes, faults: FaultInjection) -> Vec<PropertyReport> {
    type Check = fn(&mut ChaCha8Rng, &PropertySizes, FaultInjection) -> Result<f64>;
    let checks: [(&str, f64, Check); 14] = [
        ("composition_oracle", 1e-12, composition),
        ("unit_modulus_diagonal", 1e-12, unit_modulus),
        ("precoder_power", 1e-9, precoder_power),
        ("update_arithmetic", 0.0, update_arithmetic),
        ("probe_partition", 0.0, probe_partition),
        ("pilot_noise_calibration", 0.05, noise_calibration),
        ("cascaded_feature_closed_form", 1e-12, cascaded_closed_form),
        ("direct_feature_closed_form", 1e-12, direct_closed_form),
        ("zero_sum_probe_identity", 0.0, zero_sum),
        ("layer_loop_oracle", 1e-12, layer_oracle),
        ("expansion_loop_oracle", 1e-12, expansion_oracle),
        ("wmmse_monotonicity", 1e-8, wmmse_monotone),
        ("gradient_check", 1e-4, gradient_check),
        ("user_permutation_invariance", 1e-12, user_permutation),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(k, &(name, tol, check))| {
            let instances = instances_for(name, sizes.instances);
            let mut max_dev: f64 = 0.0;
            let mut failed = false;
            for i in 0..instances {
                let mut rng = stream_rng(derive_seed(&[seed, k as u64]), i as u64);
                match check(&mut rng, &sizes, faults) {
                    Ok(dev) if dev.is_finite() => max_dev = max_dev.max(dev),
                    Ok(_) => failed = true,
                    Err(e) => {
                        log::warn!("property {name} instance {i}: {e}");
                        failed = true;
                    }
                }
            }
            PropertyReport {
                property: name.to_string(),
                instances,
                max_dev: if failed { f64::INFINITY } else { max_dev },
                tolerance: tol,
                pass: !failed && max_dev <= tol,
            }
        })
        .collect()
}

/// Expensive properties run on fewer instances.
fn instances_for(name: &str, requested: usize) -> usize {
    match name {
        "gradient_check" | "update_arithmetic" => requested.clamp(1, 3),
        "pilot_noise_calibration" => requested.clamp(1, 10),
        _ => requested.max(1),
    }
}

pub fn to_csv(reports: &[PropertyReport]) -> String {
    let mut out = String::from("property,instances,max_dev,pass\n");
    for r in reports {
        writeln!(out, "{},{},{:e},{}", r.property, r.instances, r.max_dev, r.pass).expect("String write");
    }
    out
}

struct Instance {
    sample: ScenarioSample,
    schedule: ProbeSchedule,
}

fn random_instance(rng: &mut ChaCha8Rng, sizes: &PropertySizes, min_users: usize) -> Result<Instance> {
    let m = rng.random_range(1..=sizes.max_antennas);
    let users = rng.random_range(min_users..=sizes.max_users.max(min_users));
    let rows = rng.random_range(1..=sizes.max_side);
    let cols = rng.random_range(1..=sizes.max_side);
    let divisors = |x: usize| (1..=x).filter(|d| x % d == 0).collect::<Vec<_>>();
    let (dr, dc) = (divisors(rows), divisors(cols));
    let block = (dr[rng.random_range(0..dr.len())], dc[rng.random_range(0..dc.len())]);
    let schedule = make_schedule((rows, cols), block)?;
    let sample = oracle::random_sample(m, rows * cols, users, rng);
    Ok(Instance { sample, schedule })
}

fn random_phases(rng: &mut ChaCha8Rng, n: usize) -> RisConfig {
    RisConfig {
        phases: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn rel(a: &[Complex64], b: &[Complex64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn composition(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let ris = random_phases(rng, inst.sample.ris_elements());
    let got = compose_channel(&inst.sample, &ris)?;
    let expected = oracle::compose(&inst.sample, &ris)?;
    Ok(rel(got.as_slice(), expected.as_slice()))
}

fn unit_modulus(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 2)?;
    let net = NetworkConfig {
        width: 8,
        ..NetworkConfig::with_defaults(inst.sample.bs_antennas(), inst.schedule.block_size())
    };
    let params = init_params(&net, rng.random())?;
    let obs = simulate_pilots(&inst.sample, &inst.schedule, PilotSnr::Infinite, 0)?;
    let ris = infer(&params, &extract_features(&obs), &inst.schedule)?;
    let phi = ris.matrix();
    let mut dev: f64 = 0.0;
    for r in 0..phi.rows() {
        for c in 0..phi.cols() {
            let z = phi[(r, c)];
            dev = dev.max(if r == c { (z.norm() - 1.0).abs() } else { z.norm() });
        }
    }
    Ok(dev)
}

fn precoder_power(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let ris = random_phases(rng, inst.sample.ris_elements());
    let c = compose_channel(&inst.sample, &ris)?;
    let power = rng.random_range(0.1..10.0);
    let out = wmmse(&c, &inst.sample.weights, 0.1, power, WmmseOptions::default())?;
    Ok((out.precoder.power / power - 1.0).max(0.0))
}

fn update_arithmetic(rng: &mut ChaCha8Rng, _: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let (sample, schedule, model, features) = oracle::gradient_instance(rng.random());
    let objective = Objective {
        noise_power: 0.1,
        power_budget: 1.0,
        wmmse: WmmseOptions::default(),
    };
    let g = sample_gradient(&model, &sample, &schedule, &features, &objective, None, &mut Tape::new())?;
    let lr = rng.random_range(1e-4..1e-1);
    let mut theta = model.params.flatten();
    let before = theta.clone();
    OptimizerState::new(Optimizer::Plain, theta.len()).ascend(&mut theta, &g.grad, lr);
    // Descending −WSR by η must give the same bits.
    Ok(theta
        .iter()
        .zip(&before)
        .zip(&g.grad)
        .map(|((t, b), d)| (t - (b - lr * -d)).abs())
        .fold(0.0, f64::max))
}

fn probe_partition(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let s = &inst.schedule;
    let mut seen = vec![0usize; s.ris_elements()];
    for block in s.blocks() {
        for &n in block {
            seen[n] += 1;
        }
    }
    let bad_cover = seen.iter().filter(|&&c| c != 1).count();
    let bad_size = s.blocks().iter().filter(|b| b.len() != s.block_size()).count();
    Ok((bad_cover + bad_size) as f64)
}

fn noise_calibration(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let snr = rng.random_range(1.0..100.0);
    let clean = simulate_pilots(&inst.sample, &inst.schedule, PilotSnr::Infinite, 0)?;
    let signal: f64 = clean.samples().iter().map(|z| z.norm_sqr()).sum::<f64>() / clean.samples().len() as f64;
    let mut noise_sum = 0.0;
    let mut count = 0usize;
    let mut draw = 0u64;
    while count < 10_000 {
        let noisy = simulate_pilots(&inst.sample, &inst.schedule, PilotSnr::Finite(snr), rng.random())?;
        for (a, b) in noisy.samples().iter().zip(clean.samples()) {
            noise_sum += (a - b).norm_sqr();
        }
        count += clean.samples().len();
        draw += 1;
    }
    let measured = signal / (noise_sum / count as f64);
    log::debug!("noise calibration: {draw} draws, SNR {measured} vs {snr}");
    Ok((measured / snr - 1.0).abs())
}

fn features_of(inst: &Instance, faults: FaultInjection) -> Result<crate::probing::FeatureTensor> {
    let obs = simulate_pilots(&inst.sample, &inst.schedule, PilotSnr::Infinite, 0)?;
    let mut f = extract_features(&obs);
    if faults.flip_cascaded_sign {
        let half = f.dim() / 2;
        for u in 0..f.users() {
            for i in 0..f.blocks() {
                f.get_mut(u, i)[..half].iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    Ok(f)
}

fn as_complex(xs: &[f64]) -> Vec<Complex64> {
    xs.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

fn cascaded_closed_form(rng: &mut ChaCha8Rng, sizes: &PropertySizes, faults: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let f = features_of(&inst, faults)?;
    let mut dev: f64 = 0.0;
    for u in 0..f.users() {
        for i in 0..f.blocks() {
            let expected = oracle::cascaded_feature(&inst.sample, &inst.schedule, u, i);
            dev = dev.max(rel(&as_complex(f.cascaded(u, i)), &expected));
        }
    }
    Ok(dev)
}

fn direct_closed_form(rng: &mut ChaCha8Rng, sizes: &PropertySizes, faults: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let f = features_of(&inst, faults)?;
    let mut dev: f64 = 0.0;
    for u in 0..f.users() {
        let expected = oracle::direct_feature(&inst.sample, u);
        for i in 0..f.blocks() {
            dev = dev.max(rel(&as_complex(f.direct(u, i)), &expected));
        }
    }
    Ok(dev)
}

fn zero_sum(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let s = &inst.schedule;
    let blocks = s.num_blocks();
    let base = s.probe_diagonal(0)?;
    let mut total = vec![0.0; s.ris_elements()];
    for i in 1..=blocks {
        for (t, x) in total.iter_mut().zip(s.probe_diagonal(i)?) {
            *t += x;
        }
    }
    Ok(base
        .iter()
        .zip(&total)
        .map(|(b, t)| ((blocks as f64 - 2.0) * b - t).abs())
        .fold(0.0, f64::max))
}

fn random_grid(rng: &mut ChaCha8Rng, users: usize, units: usize, dim: usize) -> Grid<f64> {
    Grid {
        users,
        units,
        dim,
        data: (0..users * units * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn randomize_biases(rng: &mut ChaCha8Rng, params: &mut crate::risnet::NetworkParams<f64>) {
    for layer in params.pre.iter_mut().chain(&mut params.expansion.groups).chain(&mut params.post) {
        for d in &mut layer.categories {
            d.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
    }
}

fn layer_oracle(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let users = rng.random_range(2..=sizes.max_users.max(2));
    let units = rng.random_range(1..=6);
    let (in_dim, width) = (rng.random_range(1..=6), 4 * rng.random_range(1..=3));
    let cfg = NetworkConfig {
        input_dim: in_dim,
        width,
        pre_layers: 1,
        post_layers: 0,
        block_size: 1,
    };
    let mut params = init_params(&cfg, rng.random())?;
    randomize_biases(rng, &mut params);
    let input = random_grid(rng, users, units, in_dim);
    let got = layer_forward(&mut crate::autodiff::Eval, &params.pre[0], &input)?;
    let expected = oracle::layer(&params.pre[0], &input);
    Ok(max_abs(&got.data, &expected.data))
}

fn expansion_oracle(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 2)?;
    let users = inst.sample.users();
    let s = &inst.schedule;
    let in_dim = rng.random_range(1..=6);
    let cfg = NetworkConfig {
        input_dim: in_dim,
        width: 4 * rng.random_range(1..=3),
        pre_layers: 0,
        post_layers: 0,
        block_size: s.block_size(),
    };
    let mut params = init_params(&cfg, rng.random())?;
    randomize_biases(rng, &mut params);
    let input = random_grid(rng, users, s.num_blocks(), in_dim);
    let got = expansion_forward(&mut crate::autodiff::Eval, &params.expansion, &input, s)?;
    let expected = oracle::expansion(&params.expansion, &input, s);
    Ok(max_abs(&got.data, &expected.data))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn wmmse_monotone(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 1)?;
    let ris = random_phases(rng, inst.sample.ris_elements());
    let c = compose_channel(&inst.sample, &ris)?;
    let noise = 10f64.powf(rng.random_range(-2.0..1.0));
    let out = wmmse(&c, &inst.sample.weights, noise, 1.0, WmmseOptions { iters: 50, tol: 0.0 })?;
    Ok(out.trace.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max))
}

fn gradient_check(rng: &mut ChaCha8Rng, _: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let (sample, schedule, model, features) = oracle::gradient_instance(rng.random());
    let objective = Objective {
        noise_power: 0.1,
        power_budget: 1.0,
        wmmse: WmmseOptions::default(),
    };
    let g = sample_gradient(&model, &sample, &schedule, &features, &objective, None, &mut Tape::new())?;
    let theta = model.params.flatten();
    let coords: Vec<usize> = (0..theta.len()).collect();
    compare_central_differences(
        |p| wsr_with_params(&model, p, &sample, &schedule, &features, &g.v, objective.noise_power),
        &g.grad,
        &theta,
        1e-6,
        &coords,
    )
}

fn user_permutation(rng: &mut ChaCha8Rng, sizes: &PropertySizes, _: FaultInjection) -> Result<f64> {
    let inst = random_instance(rng, sizes, 2)?;
    let net = NetworkConfig {
        width: 8,
        ..NetworkConfig::with_defaults(inst.sample.bs_antennas(), inst.schedule.block_size())
    };
    let params = init_params(&net, rng.random())?;
    let obs = simulate_pilots(&inst.sample, &inst.schedule, PilotSnr::Infinite, 0)?;
    let f = extract_features(&obs);
    let mut perm: Vec<usize> = (0..f.users()).collect();
    perm.reverse();
    let a = infer(&params, &f, &inst.schedule)?;
    let b = infer(&params, &f.permute_users(&perm), &inst.schedule)?;
    Ok(max_abs(&a.phases, &b.phases))
}

/// Direct, loop-by-loop reference implementations.
pub mod oracle {
    use super::*;
    use crate::probing::FeatureTensor;
    use crate::risnet::{Dense, ExpansionParams, LayerParams};
    use rand_distr::StandardNormal;

    fn cn(rng: &mut impl Rng) -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    /// A sample with i.i.d. `CN(0, 1)` links and unit weights.
    pub fn random_sample(m: usize, n: usize, users: usize, rng: &mut impl Rng) -> ScenarioSample {
        ScenarioSample {
            h: CMatrix::from_fn(n, m, |_, _| cn(rng)),
            g: CMatrix::from_fn(users, n, |_, _| cn(rng)),
            d: CMatrix::from_fn(users, m, |_, _| cn(rng)),
            weights: vec![1.0; users],
        }
    }

    /// `D + G Φ H` by explicit matrix products.
    pub fn compose(sample: &ScenarioSample, ris: &RisConfig) -> Result<CMatrix> {
        sample.g.matmul(&ris.matrix())?.matmul(&sample.h)?.add(&sample.d)
    }

    /// `−2 Σ_{n∈Λ_i} h_n g_un` for block `i` (0-based).
    pub fn cascaded_feature(sample: &ScenarioSample, schedule: &ProbeSchedule, u: usize, i: usize) -> Vec<Complex64> {
        let m = sample.bs_antennas();
        let mut out = vec![Complex64::new(0.0, 0.0); m];
        for &n in &schedule.blocks()[i] {
            for (k, o) in out.iter_mut().enumerate() {
                *o += sample.h[(n, k)] * sample.g[(u, n)];
            }
        }
        out.iter().map(|z| z * -2.0).collect()
    }

    /// `−2 d_u`.
    pub fn direct_feature(sample: &ScenarioSample, u: usize) -> Vec<Complex64> {
        sample.d.row(u).iter().map(|z| z * -2.0).collect()
    }

    fn relu_affine(d: &Dense<f64>, x: &[f64], r: usize) -> f64 {
        let mut acc = d.bias[r];
        for c in 0..d.cols {
            acc += d.weight[r * d.cols + c] * x[c];
        }
        acc.max(0.0)
    }

    /// Four-category layer evaluated term by term.
    pub fn layer(params: &LayerParams<f64>, input: &Grid<f64>) -> Grid<f64> {
        let (users, units) = (input.users, input.units);
        let [cc, ca, oc, oa] = &params.categories;
        let q = cc.rows;
        let mut data = Vec::new();
        for u in 0..users {
            for k in 0..units {
                for r in 0..q {
                    data.push(relu_affine(cc, input.get(u, k), r));
                }
                for r in 0..q {
                    let mut s = 0.0;
                    for k2 in 0..units {
                        s += relu_affine(ca, input.get(u, k2), r);
                    }
                    data.push(s / units as f64);
                }
                for r in 0..q {
                    let mut s = 0.0;
                    for u2 in (0..users).filter(|&v| v != u) {
                        s += relu_affine(oc, input.get(u2, k), r);
                    }
                    data.push(s / (users - 1) as f64);
                }
                for r in 0..q {
                    let mut s = 0.0;
                    for u2 in (0..users).filter(|&v| v != u) {
                        for k2 in 0..units {
                            s += relu_affine(oa, input.get(u2, k2), r);
                        }
                    }
                    data.push(s / ((users - 1) * units) as f64);
                }
            }
        }
        Grid {
            users,
            units,
            dim: 4 * q,
            data,
        }
    }

    /// Expansion evaluated element by element.
    pub fn expansion(params: &ExpansionParams<f64>, input: &Grid<f64>, schedule: &ProbeSchedule) -> Grid<f64> {
        let n_total = schedule.ris_elements();
        let out_dim = 4 * params.groups[0].categories[0].rows;
        let mut data = vec![0.0; input.users * n_total * out_dim];
        for (j, group) in params.groups.iter().enumerate() {
            let out = layer(group, input);
            for u in 0..input.users {
                for (block, members) in schedule.blocks().iter().enumerate() {
                    let n = members[j];
                    let start = (u * n_total + n) * out_dim;
                    data[start..start + out_dim].copy_from_slice(out.get(u, block));
                }
            }
        }
        Grid {
            users: input.users,
            units: n_total,
            dim: out_dim,
            data,
        }
    }

    /// The tiny end-to-end instance: M = 2, N = 4 (2×2, blocks of 2),
    /// U = 2, width 8, unit-scale channels.
    pub fn gradient_instance(seed: u64) -> (ScenarioSample, ProbeSchedule, Model, FeatureTensor) {
        let mut rng = stream_rng(seed, 0);
        let sample = random_sample(2, 4, 2, &mut rng);
        let schedule = make_schedule((2, 2), (1, 2)).expect("valid geometry");
        let net = NetworkConfig {
            width: 8,
            ..NetworkConfig::with_defaults(2, 2)
        };
        let mut params = init_params(&net, seed).expect("valid network");
        randomize_biases(&mut rng, &mut params);
        let obs = simulate_pilots(&sample, &schedule, PilotSnr::Infinite, 0).expect("shapes match");
        let features = extract_features(&obs);
        (sample, schedule, Model { params, scaler: None }, features)
    }
}

//! Downlink precoding: WMMSE for weighted-sum-rate maximization and MRT.
//!
//! `C` is the `U × M` end-to-end channel (row `c_k` belongs to user `k`) and
//! `V` the `M × U` precoder (column `v_k` carries user `k`'s symbol).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::linalg::CMatrix;

const PIVOT_TOL: f64 = 1e-13;
const RIDGE: f64 = 1e-12;
const BISECTION_STEPS: usize = 64;
const MAX_GROWTH_STEPS: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct Precoder {
    pub v: CMatrix,
    /// `trace(V Vᴴ)`.
    pub power: f64,
}

impl Precoder {
    pub fn new(v: CMatrix) -> Self {
        let power = v.norm_sqr();
        Self { v, power }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub iters: usize,
    /// Stop once an iteration gains less than this much WSR.
    pub tol: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            iters: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WmmseOutcome {
    pub precoder: Precoder,
    /// WSR of the initial precoder followed by the WSR after every iteration.
    pub trace: Vec<f64>,
    /// Last multiplier chosen by the power bisection.
    pub mu: f64,
    /// Iterations where a singular system was regularized by a small ridge.
    pub ridge_fallbacks: usize,
}

impl WmmseOutcome {
    pub fn wsr(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial WSR")
    }
}

fn check_inputs(c: &CMatrix, weights: &[f64], noise: f64, power: Option<f64>) -> Result<()> {
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(Error::Contract(format!("noise power must be positive, got {noise}")));
    }
    if let Some(p) = power {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::Contract(format!("power budget must be positive, got {p}")));
        }
    }
    if weights.len() != c.rows() {
        return Err(Error::Shape {
            op: "weights",
            left: c.shape(),
            right: (weights.len(), 1),
        });
    }
    if !c.is_finite() {
        return Err(Error::Evaluation("channel contains non-finite entries".into()));
    }
    Ok(())
}

/// `Σ_u w_u log2(1 + |c̃_uu|² / (Σ_{v≠u} |c̃_uv|² + σ²))` with `c̃ = C V`.
pub fn wsr(c: &CMatrix, v: &CMatrix, weights: &[f64], noise: f64) -> Result<f64> {
    check_inputs(c, weights, noise, None)?;
    let eff = c.matmul(v)?;
    if eff.cols() != c.rows() {
        return Err(Error::Shape {
            op: "wsr",
            left: c.shape(),
            right: v.shape(),
        });
    }
    Ok(wsr_effective(&eff, weights, noise))
}

fn wsr_effective(eff: &CMatrix, weights: &[f64], noise: f64) -> f64 {
    (0..eff.rows())
        .map(|u| {
            let row = eff.row(u);
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

/// Differentiable WSR for a channel given as graph values and a constant
/// precoder. `c` holds the `U·M` entries `(re, im)` row-major.
pub fn wsr_graph<G: Graph>(
    g: &mut G,
    c: &[(G::V, G::V)],
    v: &CMatrix,
    weights: &[f64],
    noise: f64,
) -> Result<G::V> {
    let (m, users) = v.shape();
    if c.len() != users * m || weights.len() != users {
        return Err(Error::Shape {
            op: "wsr_graph",
            left: (c.len(), 1),
            right: v.shape(),
        });
    }
    if !(noise > 0.0) {
        return Err(Error::Contract(format!("noise power must be positive, got {noise}")));
    }
    let mut rates = Vec::with_capacity(users);
    for u in 0..users {
        let row = &c[u * m..(u + 1) * m];
        let vars: Vec<G::V> = row.iter().flat_map(|&(re, im)| [re, im]).collect();
        let powers: Vec<G::V> = (0..users)
            .map(|k| {
                let mut re_coef = Vec::with_capacity(2 * m);
                let mut im_coef = Vec::with_capacity(2 * m);
                for mi in 0..m {
                    let w = v[(mi, k)];
                    re_coef.extend([w.re, -w.im]);
                    im_coef.extend([w.im, w.re]);
                }
                let re = g.lincomb(&re_coef, &vars, 0.0);
                let im = g.lincomb(&im_coef, &vars, 0.0);
                g.abs2(re, im)
            })
            .collect();
        let others: Vec<G::V> = powers
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != u)
            .map(|(_, &p)| p)
            .collect();
        let interference = g.sum(&others);
        let denom = g.add_const(interference, noise);
        let inv = g.recip(denom);
        let sinr = g.mul(powers[u], inv);
        let one_plus = g.add_const(sinr, 1.0);
        rates.push(g.log2(one_plus));
    }
    Ok(g.lincomb(weights, &rates, 0.0))
}

/// Maximum-ratio transmission: `v_k ∝ c_kᴴ` with power `E_Tr / U` each.
/// A zero channel row yields a zero column.
pub fn mrt(c: &CMatrix, power: f64) -> Result<Precoder> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::Contract(format!("power budget must be positive, got {power}")));
    }
    let (users, m) = c.shape();
    let per_user = power / users as f64;
    let mut v = CMatrix::zeros(m, users);
    for u in 0..users {
        let row = c.row(u);
        let norm = row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            log::warn!("MRT: user {u} has an all-zero channel; its precoder column is zero");
            continue;
        }
        let s = per_user.sqrt() / norm;
        for (mi, z) in row.iter().enumerate() {
            v[(mi, u)] = z.conj() * s;
        }
    }
    Ok(Precoder::new(v))
}

/// WMMSE from an MRT start at full power.
pub fn wmmse(
    c: &CMatrix,
    weights: &[f64],
    noise: f64,
    power: f64,
    opts: WmmseOptions,
) -> Result<WmmseOutcome> {
    let init = mrt(c, power)?;
    wmmse_from(c, weights, noise, power, opts, &init.v)
}

/// WMMSE from a given feasible start.
///
/// Each iteration updates the scalar MMSE receivers `u_k = c_k v_k / T_k`,
/// the MSE weights `w̃_k = w_k / e_k` and the precoder
/// `v_k = w̃_k u_k (Σ_j w̃_j |u_j|² c_jᴴ c_j + μ I)⁻¹ c_kᴴ`, with `μ ≥ 0`
/// the smallest value that meets the power budget.
pub fn wmmse_from(
    c: &CMatrix,
    weights: &[f64],
    noise: f64,
    power: f64,
    opts: WmmseOptions,
    init: &CMatrix,
) -> Result<WmmseOutcome> {
    check_inputs(c, weights, noise, Some(power))?;
    let (users, m) = c.shape();
    if init.shape() != (m, users) {
        return Err(Error::Shape {
            op: "wmmse_from",
            left: (m, users),
            right: init.shape(),
        });
    }
    let mut v = init.clone();
    let mut eff = c.matmul(&v)?;
    let mut trace = vec![wsr_effective(&eff, weights, noise)];
    let mut mu = 0.0;
    let mut ridge_fallbacks = 0;
    for _ in 0..opts.iters {
        let step = precoder_step(c, &eff, weights, noise, power)?;
        if step.ridge {
            ridge_fallbacks += 1;
        }
        let next_eff = c.matmul(&step.v)?;
        let next = wsr_effective(&next_eff, weights, noise);
        if !next.is_finite() {
            return Err(Error::Evaluation("WMMSE produced a non-finite WSR".into()));
        }
        let prev = *trace.last().expect("non-empty");
        v = step.v;
        eff = next_eff;
        mu = step.mu;
        trace.push(next);
        if next - prev < opts.tol {
            break;
        }
    }
    Ok(WmmseOutcome {
        precoder: Precoder::new(v),
        trace,
        mu,
        ridge_fallbacks,
    })
}

struct Step {
    v: CMatrix,
    mu: f64,
    ridge: bool,
}

fn precoder_step(
    c: &CMatrix,
    eff: &CMatrix,
    weights: &[f64],
    noise: f64,
    power: f64,
) -> Result<Step> {
    let (users, m) = c.shape();
    // Receivers and MSE weights for the current precoder.
    let mut a = CMatrix::zeros(m, m);
    let mut rhs = CMatrix::zeros(m, users);
    for k in 0..users {
        let row = eff.row(k);
        let total: f64 = row.iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
        let u_k = row[k] / total;
        let mse = (1.0 - row[k].norm_sqr() / total).max(f64::MIN_POSITIVE);
        let w = weights[k] / mse;
        let ck = c.row(k);
        let scale = w * u_k.norm_sqr();
        for i in 0..m {
            let ci = ck[i].conj() * scale;
            for j in 0..m {
                a[(i, j)] += ci * ck[j];
            }
            rhs[(i, k)] = ck[i].conj() * u_k * w;
        }
    }
    if rhs.norm_sqr() == 0.0 {
        return Ok(Step {
            v: CMatrix::zeros(m, users),
            mu: 0.0,
            ridge: false,
        });
    }
    let trace_a: f64 = (0..m).map(|i| a[(i, i)].re).sum();
    let ridge = RIDGE * trace_a / m as f64;
    let solve = |mu: f64| -> Result<Option<CMatrix>> {
        let mut shifted = a.clone();
        for i in 0..m {
            shifted[(i, i)] += Complex64::new(mu, 0.0);
        }
        shifted.solve_columns(&rhs, PIVOT_TOL)
    };
    let feasible = |x: &Option<CMatrix>| x.as_ref().is_some_and(|x| x.norm_sqr() <= power);

    // Unconstrained minimizer first; fall back to a small ridge if singular.
    let (floor, at_floor, used_ridge) = match solve(0.0)? {
        Some(x) => (0.0, Some(x), false),
        None => (ridge, solve(ridge)?, true),
    };
    if feasible(&at_floor) {
        if used_ridge {
            log::warn!("WMMSE: singular system with slack power constraint; using ridge {ridge:e}");
        }
        return Ok(Step {
            v: at_floor.expect("feasible implies solved"),
            mu: floor,
            ridge: used_ridge,
        });
    }

    // Bracket the multiplier by doubling, then bisect keeping the feasible end.
    let mut lo = floor;
    let mut hi = ridge.max(floor).max(f64::MIN_POSITIVE);
    let mut best = solve(hi)?;
    let mut growth = 0;
    while !feasible(&best) {
        growth += 1;
        if growth > MAX_GROWTH_STEPS {
            return Err(Error::Evaluation(
                "WMMSE power bisection failed to bracket the multiplier".into(),
            ));
        }
        lo = hi;
        hi *= 2.0;
        best = solve(hi)?;
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let x = solve(mid)?;
        if feasible(&x) {
            hi = mid;
            best = x;
        } else {
            lo = mid;
        }
    }
    Ok(Step {
        v: best.expect("feasible implies solved"),
        mu: hi,
        ridge: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eval, Tape};
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cn(rng: &mut impl Rng) -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn random_channel(users: usize, m: usize, seed: u64) -> CMatrix {
        let mut rng = stream_rng(seed, 0);
        CMatrix::from_fn(users, m, |_, _| cn(&mut rng))
    }

    fn scalar(x: f64) -> CMatrix {
        CMatrix::from_vec(1, 1, vec![Complex64::new(x, 0.0)]).unwrap()
    }

    #[test]
    fn wsr_of_zero_precoder_is_zero() {
        let c = random_channel(2, 3, 1);
        assert_eq!(wsr(&c, &CMatrix::zeros(3, 2), &[1.0, 1.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn wsr_single_user_closed_form() {
        let v = scalar(3f64.sqrt());
        assert!((wsr(&scalar(1.0), &v, &[1.0], 1.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wsr_is_linear_in_weights() {
        let c = random_channel(2, 3, 2);
        let v = mrt(&c, 1.0).unwrap().v;
        let a = wsr(&c, &v, &[0.5, 1.5], 0.3).unwrap();
        let b = wsr(&c, &v, &[1.0, 3.0], 0.3).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn wsr_rejects_bad_noise() {
        let c = random_channel(2, 3, 2);
        let v = CMatrix::zeros(3, 2);
        assert!(matches!(wsr(&c, &v, &[1.0, 1.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn row_phase_is_absorbed() {
        let c = random_channel(2, 3, 3);
        let v = mrt(&c, 1.0).unwrap().v;
        let rotated = CMatrix::from_fn(2, 3, |u, m| {
            c[(u, m)] * Complex64::from_polar(1.0, 0.7 + u as f64)
        });
        let a = wsr(&c, &v, &[1.0, 1.0], 0.1).unwrap();
        let b = wsr(&rotated, &v, &[1.0, 1.0], 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn graph_wsr_matches_numeric() {
        let c = random_channel(3, 2, 4);
        let v = mrt(&c, 2.0).unwrap().v;
        let entries: Vec<(f64, f64)> = c.as_slice().iter().map(|z| (z.re, z.im)).collect();
        let w = [0.5, 1.0, 1.5];
        let g = wsr_graph(&mut Eval, &entries, &v, &w, 0.2).unwrap();
        assert!((g - wsr(&c, &v, &w, 0.2).unwrap()).abs() < 1e-12);
        let mut tape = Tape::new();
        let leaves: Vec<_> = entries.iter().map(|&(r, i)| (tape.leaf(r), tape.leaf(i))).collect();
        let t = wsr_graph(&mut tape, &leaves, &v, &w, 0.2).unwrap();
        assert_eq!(tape.value(t), g);
    }

    #[test]
    fn scalar_case_hits_full_power() {
        let out = wmmse(&scalar(1.0), &[1.0], 1.0, 3.0, WmmseOptions::default()).unwrap();
        assert!((out.wsr() - 2.0).abs() < 1e-12);
        assert!((out.precoder.power - 3.0).abs() < 1e-9);
    }

    #[test]
    fn single_user_is_matched_filter() {
        for seed in 0..20 {
            let m = 1 + (seed as usize % 4);
            let c = random_channel(1, m, 100 + seed);
            let (noise, power) = (0.1, 2.0);
            let out = wmmse(&c, &[1.0], noise, power, WmmseOptions::default()).unwrap();
            let v = out.precoder.v.col(0);
            let dot: Complex64 = c.row(0).iter().zip(&v).map(|(a, b)| a * b).sum();
            let cos = dot.norm() / (c.norm_sqr().sqrt() * out.precoder.power.sqrt());
            assert!(cos >= 1.0 - 1e-9, "cos {cos}");
            assert!((out.precoder.power / power - 1.0).abs() < 1e-6);
            let closed = (1.0 + power * c.norm_sqr() / noise).log2();
            assert!((out.wsr() - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn mrt_power_and_direction() {
        let c = random_channel(3, 4, 5);
        let p = mrt(&c, 2.5).unwrap();
        assert!((p.power - 2.5).abs() < 1e-12);
        for u in 0..3 {
            let col = p.v.col(u);
            let n: f64 = col.iter().map(|z| z.norm_sqr()).sum();
            assert!((n - 2.5 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mrt_zero_row_gives_zero_column() {
        let mut c = random_channel(2, 3, 6);
        for m in 0..3 {
            c[(1, m)] = Complex64::new(0.0, 0.0);
        }
        let p = mrt(&c, 1.0).unwrap();
        assert!(p.v.col(1).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn orthogonal_users_mrt_equals_wmmse() {
        // Equal-norm rows on disjoint antennas: no interference under MRT and
        // an even power split is optimal.
        let mut rng = stream_rng(7, 0);
        let row: Vec<Complex64> = (0..2).map(|_| cn(&mut rng)).collect();
        let c = CMatrix::from_fn(2, 4, |u, m| if m / 2 == u { row[m % 2] } else { Complex64::new(0.0, 0.0) });
        let w = [1.0, 1.0];
        let m = mrt(&c, 2.0).unwrap();
        let wm = wmmse(&c, &w, 0.1, 2.0, WmmseOptions::default()).unwrap();
        let a = wsr(&c, &m.v, &w, 0.1).unwrap();
        assert!((a - wm.wsr()).abs() < 1e-6, "{a} vs {}", wm.wsr());
    }

    #[test]
    fn beats_random_search() {
        let c = random_channel(2, 4, 8);
        let (w, noise, power) = ([1.0, 1.0], 0.05, 1.0);
        let out = wmmse(&c, &w, noise, power, WmmseOptions { iters: 500, tol: 0.0 }).unwrap();
        let mut rng = stream_rng(9, 0);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..100_000 {
            let v = CMatrix::from_fn(4, 2, |_, _| cn(&mut rng));
            let v = v.scale(Complex64::new((power / v.norm_sqr()).sqrt(), 0.0));
            best = best.max(wsr(&c, &v, &w, noise).unwrap());
        }
        assert!(out.wsr() >= best - 1e-6, "{} < {best}", out.wsr());
    }

    #[test]
    fn slack_budget_keeps_zero_multiplier() {
        // Noise-dominated square system: the MSE minimizer sits inside the ball.
        let c = CMatrix::from_vec(1, 1, vec![Complex64::new(0.1, 0.0)]).unwrap();
        let out = wmmse(&c, &[1.0], 100.0, 1e6, WmmseOptions::default()).unwrap();
        if out.mu == 0.0 {
            assert!(out.precoder.power <= 1e6);
        } else {
            assert!((out.precoder.power / 1e6 - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn monotone_and_feasible(seed in 0u64..100_000, users in 1usize..4, m in 1usize..5,
                                 log_noise in -3.0f64..1.0) {
            let c = random_channel(users, m, seed);
            let noise = 10f64.powf(log_noise);
            let mut rng = stream_rng(seed, 1);
            let w: Vec<f64> = (0..users).map(|_| rng.random_range(0.2..2.0)).collect();
            let out = wmmse(&c, &w, noise, 1.0, WmmseOptions { iters: 50, tol: 0.0 }).unwrap();
            for pair in out.trace.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-8, "{:?}", out.trace);
            }
            prop_assert!(out.precoder.power <= 1.0 + 1e-9);
            if out.mu > 0.0 {
                prop_assert!((out.precoder.power - 1.0).abs() < 1e-6);
            }
        }
    }
}

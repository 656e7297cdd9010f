//! First-order output-error model `G(z⁻¹) = θ₁z⁻¹ / (1 + θ₂z⁻¹)`.
//!
//! Time convention: inputs `u_0..u_{n−1}` drive outputs `y_1..y_n`, with
//! zero initial state. In slice terms `x[k] = −θ₂·x[k−1] + θ₁·u[k]` where
//! `x[−1] = 0`, so the first output already depends on θ₁.
//!
//! Unstable denominators (`|θ₂| ≥ 1`) are allowed; the horizon is finite.
//! Anything that overflows surfaces as [`Error::NonFinite`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, factor_gram, Cholesky, Matrix};
use crate::linreg::WeightingChoice;
use crate::perturbation::{rank_of_one, PerformanceVector};
use crate::scalar::Scalar;
use crate::types::{IoDataset, Method, PerturbationSetup, RankRule, TestVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OeTheta<T> {
    /// Numerator gain.
    pub theta1: T,
    /// Denominator coefficient.
    pub theta2: T,
}

impl<T: Scalar> OeTheta<T> {
    pub fn new(theta1: T, theta2: T) -> Self {
        OeTheta { theta1, theta2 }
    }

    pub fn as_array(&self) -> [T; 2] {
        [self.theta1, self.theta2]
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        match v {
            [a, b] => Ok(OeTheta::new(*a, *b)),
            _ => Err(Error::Dimension(format!("OE model has 2 parameters, got {}", v.len()))),
        }
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.theta1 - other.theta1).hypot(self.theta2 - other.theta2)
    }
}

/// Row `t` holds `(∂x_t/∂θ₁, ∂x_t/∂θ₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix<T> {
    pub psi: Vec<[T; 2]>,
}

impl<T: Scalar> SensitivityMatrix<T> {
    /// `ψᵀv`.
    pub fn tr_mul(&self, v: &[T]) -> [T; 2] {
        self.psi.iter().zip(v).fold([T::zero(); 2], |acc, (row, &vi)| {
            [acc[0] + row[0] * vi, acc[1] + row[1] * vi]
        })
    }

    /// `ψᵀψ`.
    pub fn gram(&self) -> Matrix<T> {
        let mut g = Matrix::zeros(2, 2);
        for r in &self.psi {
            g[(0, 0)] += r[0] * r[0];
            g[(0, 1)] += r[0] * r[1];
            g[(1, 1)] += r[1] * r[1];
        }
        g[(1, 0)] = g[(0, 1)];
        g
    }
}

/// Noise-free output of the model.
pub fn simulate<T: Scalar>(theta: &OeTheta<T>, u: &[T]) -> Vec<T> {
    let mut prev = T::zero();
    u.iter()
        .map(|&ut| {
            prev = -theta.theta2 * prev + theta.theta1 * ut;
            prev
        })
        .collect()
}

/// The noise realization consistent with `(θ, u, y)`: `y − simulate(θ, u)`.
pub fn invert_noise<T: Scalar>(theta: &OeTheta<T>, ds: &IoDataset<T>) -> Vec<T> {
    simulate(theta, ds.inputs())
        .into_iter()
        .zip(ds.outputs())
        .map(|(x, &y)| y - x)
        .collect()
}

/// First-order sensitivities by the recursions
/// `s1_t = −θ₂ s1_{t−1} + u_{t−1}` and `s2_t = −θ₂ s2_{t−1} − x_{t−1}`.
pub fn sensitivity<T: Scalar>(theta: &OeTheta<T>, u: &[T]) -> SensitivityMatrix<T> {
    let (mut x, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
    let psi = u
        .iter()
        .map(|&ut| {
            s1 = -theta.theta2 * s1 + ut;
            s2 = -theta.theta2 * s2 - x;
            x = -theta.theta2 * x + theta.theta1 * ut;
            [s1, s2]
        })
        .collect();
    SensitivityMatrix { psi }
}

/// Cost `J(θ) = (1/n)‖y − x(θ)‖²` with its gradient and Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivatives<T> {
    pub cost: T,
    pub gradient: [T; 2],
    pub hessian: [[T; 2]; 2],
}

impl<T: Scalar> CostDerivatives<T> {
    pub fn gradient_norm(&self) -> T {
        self.gradient[0].hypot(self.gradient[1])
    }

    pub fn is_finite(&self) -> bool {
        self.cost.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.iter().flatten().all(|v| v.is_finite())
    }
}

/// Exact derivatives of `J` via first- and second-order sensitivities.
pub fn cost_derivatives<T: Scalar>(theta: &OeTheta<T>, ds: &IoDataset<T>) -> CostDerivatives<T> {
    let a = theta.theta2;
    let (mut x, mut s1, mut s2, mut s12, mut s22) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    let mut cost = T::zero();
    let mut g = [T::zero(); 2];
    let mut h = [[T::zero(); 2]; 2];
    for (&ut, &yt) in ds.inputs().iter().zip(ds.outputs()) {
        // second derivatives first: they use the previous first-order values
        s12 = -a * s12 - s1;
        s22 = -a * s22 - T::lit(2.0) * s2;
        s1 = -a * s1 + ut;
        s2 = -a * s2 - x;
        x = -a * x + theta.theta1 * ut;
        let e = yt - x;
        cost += e * e;
        g[0] -= e * s1;
        g[1] -= e * s2;
        h[0][0] += s1 * s1;
        h[0][1] += s1 * s2 - e * s12;
        h[1][1] += s2 * s2 - e * s22;
    }
    let n = T::count(ds.len());
    let two_n = T::lit(2.0) / n;
    h[1][0] = h[0][1];
    CostDerivatives {
        cost: cost / n,
        gradient: [g[0] * two_n, g[1] * two_n],
        hessian: [
            [h[0][0] * two_n, h[0][1] * two_n],
            [h[1][0] * two_n, h[1][1] * two_n],
        ],
    }
}

pub fn cost<T: Scalar>(theta: &OeTheta<T>, ds: &IoDataset<T>) -> T {
    let e = invert_noise(theta, ds);
    dot(&e, &e) / T::count(ds.len())
}

/// Evaluates all performance values for one θ, sharing the simulation.
#[derive(Debug, Clone)]
pub struct OeEvaluation<T> {
    residual: Vec<T>,
    psi: SensitivityMatrix<T>,
    weight: Option<Cholesky<T>>,
}

impl<T: Scalar> OeEvaluation<T> {
    pub fn new(theta: &OeTheta<T>, ds: &IoDataset<T>, weighting: WeightingChoice) -> Result<Self> {
        let residual = invert_noise(theta, ds);
        let psi = sensitivity(theta, ds.inputs());
        if residual.iter().any(|v| !v.is_finite())
            || psi.psi.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "simulation overflow at θ = ({}, {})",
                theta.theta1, theta.theta2
            )));
        }
        let weight = match weighting {
            WeightingChoice::Identity => None,
            WeightingChoice::CovarianceEstimate => {
                Some(factor_gram(&psi.gram(), "sensitivity Gram matrix ψᵀψ")?)
            }
        };
        Ok(OeEvaluation { residual, psi, weight })
    }

    /// `−(2/n)·ψᵀ·(α ⊙ e)`.
    pub fn gradient(&self, sign_row: &[T]) -> Result<[T; 2]> {
        if sign_row.len() != self.residual.len() {
            return Err(Error::Dimension("sign row length".into()));
        }
        let we: Vec<T> = self.residual.iter().zip(sign_row).map(|(&e, &s)| e * s).collect();
        let g = self.psi.tr_mul(&we);
        let k = -T::lit(2.0) / T::count(self.residual.len());
        Ok([g[0] * k, g[1] * k])
    }

    pub fn z(&self, sign_row: &[T]) -> Result<T> {
        let g = self.gradient(sign_row)?;
        let z = match &self.weight {
            None => g[0] * g[0] + g[1] * g[1],
            Some(ch) => ch.inv_quadratic(&g)? * T::count(self.residual.len()),
        };
        if z.is_finite() {
            Ok(z)
        } else {
            Err(Error::NonFinite("performance value".into()))
        }
    }
}

/// `‖∂J⁽ⁱ⁾/∂θ‖²_S` on the sign-perturbed data.
pub fn sps_z_oe<T: Scalar>(
    theta: &OeTheta<T>,
    ds: &IoDataset<T>,
    sign_row: &[T],
    weighting: WeightingChoice,
) -> Result<T> {
    OeEvaluation::new(theta, ds, weighting)?.z(sign_row)
}

/// Sign-perturbed membership test for the OE model.
pub fn test_membership_oe<T: Scalar>(
    ds: &IoDataset<T>,
    theta: &OeTheta<T>,
    setup: &PerturbationSetup,
    rule: &RankRule,
    weighting: WeightingChoice,
) -> Result<TestVerdict<T>> {
    setup.check_compatible(ds.len(), rule)?;
    if setup.method != Method::SignFlip {
        return Err(Error::Domain(
            "the output-error model supports sign-flip setups only".into(),
        ));
    }
    let eval = OeEvaluation::new(theta, ds, weighting)?;
    let z = (0..setup.m)
        .map(|i| {
            let row = setup
                .sign_row::<T>(i)
                .ok_or_else(|| Error::Domain("setup lacks sign row".into()))?;
            eval.z(&row)
        })
        .collect::<Result<Vec<T>>>()?;
    let z = PerformanceVector::new(z)?;
    let (_, rank) = rank_of_one(&z, &setup.tie_perm)?;
    Ok(TestVerdict {
        accepted: rule.accepts(rank),
        rank_of_one: rank,
        z_values: z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PemOptions<T> {
    /// Starts per axis; the total is its square.
    pub starts_per_axis: usize,
    pub max_iter: usize,
    pub grad_tol: T,
}

impl<T: Scalar> Default for PemOptions<T> {
    fn default() -> Self {
        PemOptions {
            starts_per_axis: 5,
            max_iter: 500,
            grad_tol: T::lit(1e-9),
        }
    }
}

fn finite_cost<T: Scalar>(theta: &OeTheta<T>, ds: &IoDataset<T>) -> T {
    let c = cost(theta, ds);
    if c.is_finite() {
        c
    } else {
        T::infinity()
    }
}

fn solve2<T: Scalar>(a: [[T; 2]; 2], b: [T; 2]) -> Option<[T; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = (a[0][0].abs() + a[0][1].abs()) * (a[1][0].abs() + a[1][1].abs());
    if !(det.abs() > T::epsilon() * scale) || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

/// Gauss–Newton with backtracking, then Newton polishing on the exact
/// Hessian. Returns the final iterate and its derivatives.
fn local_minimize<T: Scalar>(
    start: OeTheta<T>,
    ds: &IoDataset<T>,
    opts: &PemOptions<T>,
) -> (OeTheta<T>, CostDerivatives<T>) {
    let mut theta = start;
    let mut d = cost_derivatives(&theta, ds);
    for _ in 0..opts.max_iter {
        if !d.is_finite() || d.gradient_norm() < opts.grad_tol {
            break;
        }
        let n = T::count(ds.len());
        let gn = {
            let psi = sensitivity(&theta, ds.inputs());
            let g = psi.gram();
            let jtj = [
                [g[(0, 0)] * T::lit(2.0) / n, g[(0, 1)] * T::lit(2.0) / n],
                [g[(1, 0)] * T::lit(2.0) / n, g[(1, 1)] * T::lit(2.0) / n],
            ];
            solve2(jtj, [-d.gradient[0], -d.gradient[1]])
        };
        let newton = solve2(d.hessian, [-d.gradient[0], -d.gradient[1]]);
        let h_pd = d.hessian[0][0] > T::zero()
            && d.hessian[0][0] * d.hessian[1][1] - d.hessian[0][1] * d.hessian[1][0] > T::zero();
        // Newton near a minimizer converges quadratically; GN is the robust default.
        let mut candidates = Vec::with_capacity(3);
        if h_pd {
            candidates.extend(newton);
        }
        candidates.extend(gn);
        candidates.push([-d.gradient[0], -d.gradient[1]]);
        let mut moved = false;
        'dirs: for step in candidates {
            let slope = step[0] * d.gradient[0] + step[1] * d.gradient[1];
            if !(slope < T::zero()) {
                continue;
            }
            let mut t = T::one();
            for _ in 0..60 {
                let trial = OeTheta::new(theta.theta1 + t * step[0], theta.theta2 + t * step[1]);
                let c = finite_cost(&trial, ds);
                if c <= d.cost + T::lit(1e-4) * t * slope {
                    let nd = cost_derivatives(&trial, ds);
                    if nd.is_finite() {
                        theta = trial;
                        d = nd;
                        moved = true;
                        break 'dirs;
                    }
                }
                t = t * T::lit(0.5);
            }
        }
        if !moved {
            break;
        }
    }
    (theta, d)
}

fn grid_starts<T: Scalar>(lower: &OeTheta<T>, upper: &OeTheta<T>, per_axis: usize) -> Vec<OeTheta<T>> {
    let k = per_axis.max(1);
    let frac = |i: usize| T::count(2 * i + 1) / T::count(2 * k);
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            out.push(OeTheta::new(
                lower.theta1 + (upper.theta1 - lower.theta1) * frac(i),
                lower.theta2 + (upper.theta2 - lower.theta2) * frac(j),
            ));
        }
    }
    out
}

/// Prediction-error estimate: the lowest-cost local minimizer reached from
/// a grid of starts over the box.
pub fn pem_estimate<T: Scalar>(
    ds: &IoDataset<T>,
    lower: &OeTheta<T>,
    upper: &OeTheta<T>,
    opts: &PemOptions<T>,
) -> Result<OeTheta<T>> {
    let mut best: Option<(OeTheta<T>, T)> = None;
    let mut best_any: Option<(OeTheta<T>, T, T)> = None;
    for start in grid_starts(lower, upper, opts.starts_per_axis) {
        let (theta, d) = local_minimize(start, ds, opts);
        if !d.is_finite() {
            continue;
        }
        let gnorm = d.gradient_norm();
        if best_any.is_none_or(|(_, c, _)| d.cost < c) {
            best_any = Some((theta, d.cost, gnorm));
        }
        let h = d.hessian;
        let is_min = h[0][0] >= T::zero() && h[0][0] * h[1][1] - h[0][1] * h[1][0] >= T::zero();
        if gnorm < opts.grad_tol && is_min && best.is_none_or(|(_, c)| d.cost < c) {
            best = Some((theta, d.cost));
        }
    }
    match best {
        Some((theta, _)) => Ok(theta),
        None => {
            let (b, _, g) = best_any.unwrap_or((*lower, T::infinity(), T::infinity()));
            Err(Error::Optimization {
                message: "no start converged to a local minimizer".into(),
                best: vec![b.theta1.to_f64_lossy(), b.theta2.to_f64_lossy()],
                grad_norm: g.to_f64_lossy(),
            })
        }
    }
}

/// Levenberg–Marquardt on the gradient equations `∇J(θ) = 0`, minimizing
/// `‖∇J‖²`. Unlike [`pem_estimate`] this also lands on saddles.
pub fn minimize_gradient_norm<T: Scalar>(
    start: OeTheta<T>,
    ds: &IoDataset<T>,
    max_iter: usize,
) -> (OeTheta<T>, CostDerivatives<T>) {
    let mut theta = start;
    let mut d = cost_derivatives(&theta, ds);
    let mut lambda = T::lit(1e-3);
    for _ in 0..max_iter {
        if !d.is_finite() {
            break;
        }
        let g = d.gradient;
        let h = d.hessian;
        let f0 = g[0] * g[0] + g[1] * g[1];
        if f0.sqrt() < T::lit(1e-14) {
            break;
        }
        // HᵀH + λ·diag(HᵀH)
        let hth = [
            [h[0][0] * h[0][0] + h[1][0] * h[1][0], h[0][0] * h[0][1] + h[1][0] * h[1][1]],
            [h[0][1] * h[0][0] + h[1][1] * h[1][0], h[0][1] * h[0][1] + h[1][1] * h[1][1]],
        ];
        let htg = [h[0][0] * g[0] + h[1][0] * g[1], h[0][1] * g[0] + h[1][1] * g[1]];
        let mut improved = false;
        for _ in 0..40 {
            let damp = [
                [hth[0][0] * (T::one() + lambda) + lambda * T::lit(1e-12), hth[0][1]],
                [hth[1][0], hth[1][1] * (T::one() + lambda) + lambda * T::lit(1e-12)],
            ];
            if let Some(step) = solve2(damp, [-htg[0], -htg[1]]) {
                let trial = OeTheta::new(theta.theta1 + step[0], theta.theta2 + step[1]);
                let nd = cost_derivatives(&trial, ds);
                let f1 = nd.gradient[0] * nd.gradient[0] + nd.gradient[1] * nd.gradient[1];
                if nd.is_finite() && f1 < f0 {
                    theta = trial;
                    d = nd;
                    lambda = (lambda * T::lit(0.3)).max(T::lit(1e-15));
                    improved = true;
                    break;
                }
            }
            lambda = lambda * T::lit(10.0);
            if lambda > T::lit(1e16) {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    (theta, d)
}

/// Nominal parameters of the disconnected-region example.
pub const FIXTURE_THETA: (f64, f64) = (0.9, -0.1);
/// Noise realization of the example.
pub const FIXTURE_NOISE: [f64; 7] = [-0.021, -0.008, -0.003, -0.004, 0.010, 0.007, 0.015];
/// Second sign sequence of the example (the first is all ones).
pub const FIXTURE_SIGN_ROW: [i8; 7] = [1, -1, 1, -1, 1, 1, -1];

/// Seven-sample unit-step experiment whose half-level sign-perturbed
/// confidence region is not connected.
///
/// Returns the dataset, the `m = 2` setup with tie order `[1, 2]`, and the
/// rule `q = 1`.
pub fn disconnected_region_fixture<T: Scalar>() -> (IoDataset<T>, PerturbationSetup, RankRule) {
    let u = vec![T::one(); FIXTURE_NOISE.len()];
    let x = simulate(&OeTheta::new(T::lit(FIXTURE_THETA.0), T::lit(FIXTURE_THETA.1)), &u);
    let y = x.iter().zip(FIXTURE_NOISE).map(|(&x, n)| x + T::lit(n)).collect();
    let ds = IoDataset::new(u, y).expect("fixture dataset is valid");
    let setup = PerturbationSetup {
        method: Method::SignFlip,
        m: 2,
        n: FIXTURE_NOISE.len(),
        sign_matrix: Some(vec![vec![1; FIXTURE_NOISE.len()], FIXTURE_SIGN_ROW.to_vec()]),
        permutations: None,
        tie_perm: vec![0, 1],
        seed: 0,
    };
    (ds, setup, RankRule::new(1, 2).expect("valid rule"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_setup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn th(a: f64, b: f64) -> OeTheta<f64> {
        OeTheta::new(a, b)
    }

    #[test]
    fn step_response_by_hand() {
        let x = simulate(&th(0.9, -0.1), &[1.0; 4]);
        let expected = [0.9, 0.99, 0.999, 0.9999];
        for (a, b) in x.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_parameters() {
        let u = [0.3, -1.0, 2.0, 0.5];
        let x = simulate(&th(1.7, 0.0), &u);
        for (xi, ui) in x.iter().zip(u) {
            assert_eq!(*xi, 1.7 * ui);
        }
        assert!(simulate(&th(0.0, 0.6), &u).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..50).map(|_| rng.random_range(-0.1..0.1)).collect();
        let t0 = th(0.4, 0.7);
        let y: Vec<f64> = simulate(&t0, &u).iter().zip(&noise).map(|(a, b)| a + b).collect();
        let ds = IoDataset::new(u.clone(), y.clone()).unwrap();
        for (a, b) in invert_noise(&t0, &ds).iter().zip(&noise) {
            assert!((a - b).abs() < 1e-12);
        }
        // zero gain: the noise is the output itself
        assert_eq!(invert_noise(&th(0.0, 0.0), &ds), y);
        // y = x + n exactly, even for an unstable pole
        let wild = th(-1.3, 1.4);
        let n = invert_noise(&wild, &ds);
        for ((x, e), y) in simulate(&wild, &u).iter().zip(&n).zip(&y) {
            assert!((x + e - y).abs() <= 1e-12 * y.abs().max(x.abs()).max(1.0));
        }
    }

    #[test]
    fn fixture_recovers_noise() {
        let (ds, setup, rule) = disconnected_region_fixture::<f64>();
        let n = invert_noise(&th(0.9, -0.1), &ds);
        for (a, b) in n.iter().zip(FIXTURE_NOISE) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(validate_setup(&setup).is_ok());
        assert_eq!((rule.q(), rule.m()), (1, 2));
        assert_eq!(setup.sign_matrix.as_ref().unwrap()[1], vec![1, -1, 1, -1, 1, 1, -1]);
    }

    #[test]
    fn sensitivity_special_cases() {
        let psi = sensitivity(&th(2.0, 0.0), &[1.0; 6]);
        assert!(psi.psi.iter().all(|r| r[0] == 1.0));
        let psi = sensitivity(&th(0.9, -0.1), &[1.0; 3]);
        assert_eq!(psi.psi[0], [1.0, 0.0]);
    }

    fn fd_check(theta: OeTheta<f64>, u: &[f64]) -> f64 {
        let psi = sensitivity(&theta, u);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            let (mut p, mut m) = (theta, theta);
            if k == 0 {
                p.theta1 += h;
                m.theta1 -= h;
            } else {
                p.theta2 += h;
                m.theta2 -= h;
            }
            let (xp, xm) = (simulate(&p, u), simulate(&m, u));
            for t in 0..u.len() {
                let fd = (xp[t] - xm[t]) / (2.0 * h);
                let an = psi.psi[t][k];
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
        }
        worst
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..20 {
            let t = th(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let err = fd_check(t, &u);
            assert!(err < 1e-6, "{t:?}: {err}");
        }
    }

    #[test]
    fn cost_derivatives_match_finite_differences() {
        let (ds, _, _) = disconnected_region_fixture::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = th(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
            let d = cost_derivatives(&t, &ds);
            let h = 1e-6;
            for k in 0..2 {
                let (mut p, mut m) = (t, t);
                if k == 0 {
                    p.theta1 += h;
                    m.theta1 -= h;
                } else {
                    p.theta2 += h;
                    m.theta2 -= h;
                }
                let fd = (cost(&p, &ds) - cost(&m, &ds)) / (2.0 * h);
                assert!((fd - d.gradient[k]).abs() <= 1e-5 * d.gradient[k].abs().max(1.0));
                let dp = cost_derivatives(&p, &ds).gradient;
                let dm = cost_derivatives(&m, &ds).gradient;
                for j in 0..2 {
                    let fdh = (dp[j] - dm[j]) / (2.0 * h);
                    assert!((fdh - d.hessian[j][k]).abs() <= 1e-5 * d.hessian[j][k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn unperturbed_z_is_squared_gradient() {
        let (ds, _, _) = disconnected_region_fixture::<f64>();
        let t = th(1.2, 0.3);
        let z = sps_z_oe(&t, &ds, &[1.0; 7], WeightingChoice::Identity).unwrap();
        let g = cost_derivatives(&t, &ds).gradient;
        assert!((z - (g[0] * g[0] + g[1] * g[1])).abs() <= 1e-14 * z);
        let neg = FIXTURE_SIGN_ROW.map(|s| -(s as f64));
        let pos = FIXTURE_SIGN_ROW.map(|s| s as f64);
        for w in [WeightingChoice::Identity, WeightingChoice::CovarianceEstimate] {
            let a = sps_z_oe(&t, &ds, &pos, w).unwrap();
            let b = sps_z_oe(&t, &ds, &neg, w).unwrap();
            assert!((a - b).abs() <= 1e-14 * a);
        }
    }

    #[test]
    fn covariance_weighting_flags_singular_sensitivities() {
        let (ds, _, _) = disconnected_region_fixture::<f64>();
        // zero gain: ∂x/∂θ₂ vanishes identically
        assert!(matches!(
            sps_z_oe(&th(0.0, 0.2), &ds, &[1.0; 7], WeightingChoice::CovarianceEstimate),
            Err(Error::Conditioning { .. })
        ));
    }

    #[test]
    fn pem_noiseless_recovers_truth() {
        let u: Vec<f64> = (0..30).map(|k| if (k / 3) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = simulate(&th(0.9, -0.1), &u);
        let ds = IoDataset::new(u, y).unwrap();
        let est = pem_estimate(&ds, &th(0.0, -0.9), &th(2.0, 0.9), &PemOptions::default()).unwrap();
        assert!(est.distance(&th(0.9, -0.1)) < 1e-6, "{est:?}");
    }

    #[test]
    fn pem_small_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1e-3).unwrap();
        let u: Vec<f64> = (0..60).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let y: Vec<f64> = simulate(&th(0.5, 0.3), &u)
            .into_iter()
            .map(|x| x + normal.sample(&mut rng))
            .collect();
        let ds = IoDataset::new(u, y).unwrap();
        let est = pem_estimate(&ds, &th(0.0, -0.9), &th(2.0, 0.9), &PemOptions::default()).unwrap();
        assert!(est.distance(&th(0.5, 0.3)) < 0.05, "{est:?}");
        assert!(cost_derivatives(&est, &ds).gradient_norm() < 1e-9);
    }

    #[test]
    fn pem_on_fixture_is_near_nominal_and_accepted() {
        let (ds, setup, rule) = disconnected_region_fixture::<f64>();
        let est = pem_estimate(&ds, &th(0.0, -1.0), &th(2.0, 1.0), &PemOptions::default()).unwrap();
        assert!(est.distance(&th(0.9, -0.1)) < 0.05, "{est:?}");
        let d = cost_derivatives(&est, &ds);
        assert!(d.gradient_norm() < 1e-9);
        let z1 = sps_z_oe(&est, &ds, &[1.0; 7], WeightingChoice::Identity).unwrap();
        assert!(z1 < 1e-17);
        for w in [WeightingChoice::Identity, WeightingChoice::CovarianceEstimate] {
            let v = test_membership_oe(&ds, &est, &setup, &rule, w).unwrap();
            assert!(v.accepted, "{w:?}: {v:?}");
        }
    }

    #[test]
    fn fixture_verdict_is_deterministic() {
        let (ds, setup, rule) = disconnected_region_fixture::<f64>();
        let t = th(0.9, -0.1);
        let a = test_membership_oe(&ds, &t, &setup, &rule, WeightingChoice::Identity).unwrap();
        let b = test_membership_oe(&ds, &t, &setup, &rule, WeightingChoice::Identity).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_norm_minimizer_finds_zero_gain_saddle() {
        // On θ₁ = 0 the θ₂-derivative vanishes identically; the θ₁-derivative
        // is a polynomial in θ₂ with a root, which is a saddle of J.
        let (ds, _, _) = disconnected_region_fixture::<f64>();
        let (t, d) = minimize_gradient_norm(th(0.05, 1.8), &ds, 200);
        assert!(d.gradient_norm() < 1e-10, "{t:?} {d:?}");
        let det = d.hessian[0][0] * d.hessian[1][1] - d.hessian[0][1] * d.hessian[1][0];
        assert!(det < 0.0, "expected a saddle at {t:?}");
    }

    #[test]
    fn permute_setup_rejected_for_oe() {
        let (ds, _, rule) = disconnected_region_fixture::<f64>();
        let setup = crate::perturbation::gen_setup(Method::Permute, 2, 7, 0).unwrap();
        assert!(test_membership_oe(&ds, &th(0.9, -0.1), &setup, &rule, WeightingChoice::Identity).is_err());
    }

    #[test]
    fn single_precision_simulation() {
        let x = simulate(&OeTheta::<f32>::new(0.9, -0.1), &[1.0; 4]);
        assert!((x[3] - 0.9999).abs() < 1e-6);
    }
}

//! Monte-Carlo coverage of the exact tests at the true parameter, and of
//! the textbook Gaussian ellipsoid for comparison.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::linreg::{test_membership, WeightingChoice};
use crate::oe::{simulate, test_membership_oe, OeTheta, FIXTURE_THETA};
use crate::perturbation::gen_setup;
use crate::types::{IoDataset, Method, RankRule, RegressionDataset};

/// True parameter of the linear-regression trials (intercept, slope).
pub const LINREG_THETA: [f64; 2] = [1.0, -0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    LinRegSign,
    LinRegPerm,
    OeSign,
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linreg_sign" | "linreg-sign" => Ok(Problem::LinRegSign),
            "linreg_perm" | "linreg-perm" => Ok(Problem::LinRegPerm),
            "oe_sign" | "oe-sign" => Ok(Problem::OeSign),
            _ => Err(Error::Domain(format!("unknown problem `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    Gaussian,
    Laplace,
    /// `Exp(1) − 1/2`: skewed, with nonzero mean.
    ShiftedExponential,
    StudentT3,
}

impl NoiseModel {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, NoiseModel::ShiftedExponential)
    }
}

impl FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(NoiseModel::None),
            "gaussian" => Ok(NoiseModel::Gaussian),
            "laplace" => Ok(NoiseModel::Laplace),
            "shifted_exponential" => Ok(NoiseModel::ShiftedExponential),
            "student_t3" => Ok(NoiseModel::StudentT3),
            _ => Err(Error::Domain(format!("unknown noise model `{s}`"))),
        }
    }
}

/// i.i.d. noise: `scale` times a draw from the unit-scale `model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub scale: f64,
}

impl NoiseSpec {
    pub fn new(model: NoiseModel, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("noise scale must be positive, got {scale}")));
        }
        Ok(NoiseSpec { model, scale })
    }

    pub fn unit(model: NoiseModel) -> Self {
        NoiseSpec { model, scale: 1.0 }
    }

    fn standard<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.model {
            NoiseModel::None => 0.0,
            NoiseModel::Gaussian => StandardNormal.sample(rng),
            NoiseModel::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            NoiseModel::ShiftedExponential => {
                let e: f64 = Exp1.sample(rng);
                e - 0.5
            }
            NoiseModel::StudentT3 => StudentT::new(3.0).expect("valid dof").sample(rng),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.scale * self.standard(rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub accepted: usize,
    pub empirical: f64,
    pub nominal: f64,
    pub std_err: f64,
    /// `(empirical − nominal)/std_err`; zero when both coincide at a
    /// degenerate nominal level.
    pub z_score: f64,
}

impl CoverageReport {
    pub fn from_counts(trials: usize, accepted: usize, nominal: f64) -> Self {
        let empirical = accepted as f64 / trials as f64;
        let std_err = (nominal * (1.0 - nominal) / trials as f64).sqrt();
        let diff = empirical - nominal;
        let z_score = if std_err > 0.0 {
            diff / std_err
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::MAX
        };
        CoverageReport {
            trials,
            accepted,
            empirical,
            nominal,
            std_err,
            z_score,
        }
    }

    pub fn within(&self, half_width: f64) -> bool {
        (self.empirical - self.nominal).abs() <= half_width
    }
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>8} {:>10} {:>10} {:>10} {:>8}",
            "trials", "accepted", "empirical", "nominal", "std_err", "z"
        )?;
        write!(
            f,
            "{:>8} {:>8} {:>10.5} {:>10.5} {:>10.5} {:>8.3}",
            self.trials, self.accepted, self.empirical, self.nominal, self.std_err, self.z_score
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub problem: Problem,
    pub noise: NoiseSpec,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub weighting: WeightingChoice,
}

pub const MIN_TRIALS: usize = 1000;

/// Report plus the verdict of every trial, in trial order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRun {
    pub report: CoverageReport,
    pub verdicts: Vec<bool>,
}

/// Independent stream per trial, so results do not depend on scheduling.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Intercept row plus a standard-normal row. Redraws the (practically
/// impossible) ill-conditioned case.
fn draw_regressors<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix<f64> {
    loop {
        let slope: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let x = Matrix::from_fn(2, n, |r, k| if r == 0 { 1.0 } else { slope[k] });
        if crate::linalg::factor_gram(&x.gram(), "regressors").is_ok() {
            return x;
        }
    }
}

fn linreg_dataset<R: Rng + ?Sized>(n: usize, noise: &NoiseSpec, rng: &mut R) -> Result<RegressionDataset<f64>> {
    let x = draw_regressors(n, rng);
    let e = noise.sample(n, rng);
    let fit = x.tr_matvec(&LINREG_THETA)?;
    let y = fit.iter().zip(e).map(|(f, e)| f + e).collect();
    RegressionDataset::new(x, y)
}

fn run_trial(cfg: &CoverageConfig, rule: &RankRule, trial: usize) -> Result<bool> {
    let mut rng = trial_rng(cfg.seed, trial);
    let verdict = match cfg.problem {
        Problem::LinRegSign | Problem::LinRegPerm => {
            let ds = linreg_dataset(cfg.n, &cfg.noise, &mut rng)?;
            let method = if cfg.problem == Problem::LinRegSign {
                Method::SignFlip
            } else {
                Method::Permute
            };
            let setup = gen_setup(method, cfg.m, cfg.n, rng.random())?;
            test_membership(&ds, &LINREG_THETA, &setup, rule, cfg.weighting)?.accepted
        }
        Problem::OeSign => {
            let theta = OeTheta::new(FIXTURE_THETA.0, FIXTURE_THETA.1);
            let u: Vec<f64> = (0..cfg.n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e = cfg.noise.sample(cfg.n, &mut rng);
            let y = simulate(&theta, &u).iter().zip(e).map(|(x, e)| x + e).collect();
            let ds = IoDataset::new(u, y)?;
            let setup = gen_setup(Method::SignFlip, cfg.m, cfg.n, rng.random())?;
            test_membership_oe(&ds, &theta, &setup, rule, cfg.weighting)?.accepted
        }
    };
    Ok(verdict)
}

/// Coverage of the exact test at the true parameter over fresh noise and a
/// fresh setup per trial. Method/noise compatibility is not checked, so
/// broken assumptions can be observed.
pub fn empirical_coverage(cfg: &CoverageConfig) -> Result<CoverageRun> {
    if cfg.trials < MIN_TRIALS {
        return Err(Error::Domain(format!("need at least {MIN_TRIALS} trials, got {}", cfg.trials)));
    }
    if cfg.n < 2 {
        return Err(Error::Domain("need n >= 2 samples".into()));
    }
    let rule = RankRule::new(cfg.q, cfg.m)?;
    let verdicts = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &rule, t))
        .collect::<Result<Vec<bool>>>()?;
    let accepted = verdicts.iter().filter(|&&v| v).count();
    Ok(CoverageRun {
        report: CoverageReport::from_counts(cfg.trials, accepted, rule.confidence()),
        verdicts,
    })
}

/// Coverage of `{θ : (θ̂−θ)ᵀXXᵀ(θ̂−θ)/σ̂² ≤ χ²₂(level)}` at the true
/// parameter, on the same linear-regression trials.
pub fn asymptotic_ellipsoid_coverage(
    noise: &NoiseSpec,
    n: usize,
    level: f64,
    trials: usize,
    seed: u64,
) -> Result<CoverageReport> {
    const N_THETA: usize = 2;
    if n <= N_THETA {
        return Err(Error::Domain(format!("need n > {N_THETA} for a variance estimate, got {n}")));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1], got {level}")));
    }
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    let quantile = if level >= 1.0 {
        f64::INFINITY
    } else {
        ChiSquared::new(N_THETA as f64)
            .expect("valid dof")
            .inverse_cdf(level)
    };
    let verdicts = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let mut rng = trial_rng(seed, t);
            let ds = linreg_dataset(n, noise, &mut rng)?;
            let est = crate::linreg::ls_estimate(&ds)?;
            let r = ds.residual(&est)?;
            let sigma2 = r.iter().map(|v| v * v).sum::<f64>() / (n - N_THETA) as f64;
            let d: Vec<f64> = est.iter().zip(LINREG_THETA).map(|(a, b)| a - b).collect();
            let dist = ds.regressors().gram().bilinear(&d, &d)?;
            Ok(quantile.is_infinite() || dist <= quantile * sigma2)
        })
        .collect::<Result<Vec<bool>>>()?;
    let accepted = verdicts.iter().filter(|&&v| v).count();
    Ok(CoverageReport::from_counts(trials, accepted, level))
}

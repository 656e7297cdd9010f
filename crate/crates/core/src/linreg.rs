//! Performance measures and membership tests for `Y = Xᵀθ + N`.
//!
//! Two measures are provided:
//!
//! * sign flips: the squared (weighted) norm of the gradient of the
//!   least-squares cost on the sign-perturbed data, evaluated at θ;
//! * permutations: the distance between θ and the least-squares estimate of
//!   the permuted data, weighted by `XXᵀ`.
//!
//! For the permutation measure each half-level set `{Z_1 ≤ Z_i}` is the
//! sublevel set of a convex quadratic whose curvature is the excitation
//! matrix `Q = XXᵀ − XPᵀXᵀ(XXᵀ)⁻¹XPXᵀ`; see [`half_set_form`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, factor_gram, sym_eigenvalues, Cholesky, Matrix};
use crate::perturbation::{apply_permutation, rank_of_one, PerformanceVector};
use crate::scalar::Scalar;
use crate::types::{Method, PerturbationSetup, RankRule, RegressionDataset, TestVerdict};

/// Weighting matrix `S` of the gradient norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingChoice {
    #[default]
    Identity,
    /// `S = (G/n)⁻¹` for the problem's Gram matrix `G`.
    CovarianceEstimate,
}

impl std::str::FromStr for WeightingChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity" | "i" => Ok(WeightingChoice::Identity),
            "covariance" | "covariance_estimate" | "cov" => Ok(WeightingChoice::CovarianceEstimate),
            other => Err(Error::Parse {
                field: "weighting".into(),
                message: format!("unknown weighting `{other}`"),
            }),
        }
    }
}

/// `θ ↦ θᵀAθ + 2bᵀθ + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm<T> {
    a: Matrix<T>,
    b: Vec<T>,
    c: T,
}

impl<T: Scalar> QuadraticForm<T> {
    /// Symmetrizes `a` after checking it is symmetric to a relative `1e-12`.
    pub fn new(a: Matrix<T>, b: Vec<T>, c: T) -> Result<Self> {
        if !a.is_square() || a.rows() != b.len() {
            return Err(Error::Dimension("quadratic form operands".into()));
        }
        let asym = a.sub(&a.transpose())?.max_abs();
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(10.0)) * a.max_abs().max(T::one());
        if asym > tol {
            return Err(Error::Domain(format!("quadratic part is not symmetric (asymmetry {asym})")));
        }
        Ok(QuadraticForm {
            a: a.symmetrized(),
            b,
            c,
        })
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn c(&self) -> T {
        self.c
    }

    pub fn eval(&self, theta: &[T]) -> Result<T> {
        Ok(self.a.bilinear(theta, theta)? + T::lit(2.0) * dot(&self.b, theta) + self.c)
    }
}

/// Cached factorization of `XXᵀ` for repeated evaluations on one dataset.
#[derive(Debug, Clone)]
pub struct LinRegProblem<'a, T> {
    ds: &'a RegressionDataset<T>,
    gram: Matrix<T>,
    chol: Cholesky<T>,
}

impl<'a, T: Scalar> LinRegProblem<'a, T> {
    pub fn new(ds: &'a RegressionDataset<T>) -> Result<Self> {
        let gram = ds.regressors().gram();
        let chol = factor_gram(&gram, "regressor Gram matrix XXᵀ")?;
        Ok(LinRegProblem { ds, gram, chol })
    }

    pub fn dataset(&self) -> &RegressionDataset<T> {
        self.ds
    }

    pub fn ls_estimate(&self) -> Result<Vec<T>> {
        let xy = self.ds.regressors().matvec(self.ds.outputs())?;
        self.chol.solve(&xy)
    }

    fn check_theta(&self, theta: &[T]) -> Result<()> {
        if theta.len() != self.ds.n_theta() {
            return Err(Error::Dimension(format!(
                "θ has {} entries, model has {} parameters",
                theta.len(),
                self.ds.n_theta()
            )));
        }
        Ok(())
    }

    /// Gradient of `(1/n)‖W(Y − Xᵀθ̃)‖²` at `θ̃ = θ`: `−(2/n)·X·W·e`.
    pub fn sign_gradient(&self, theta: &[T], sign_row: &[T]) -> Result<Vec<T>> {
        self.check_theta(theta)?;
        if sign_row.len() != self.ds.len() {
            return Err(Error::Dimension("sign row length".into()));
        }
        let e = self.ds.residual(theta)?;
        let we: Vec<T> = e.iter().zip(sign_row).map(|(&r, &s)| r * s).collect();
        let scale = -T::lit(2.0) / T::count(self.ds.len());
        Ok(self.ds.regressors().matvec(&we)?.into_iter().map(|v| v * scale).collect())
    }

    pub fn sps_sign_z(&self, theta: &[T], sign_row: &[T], weighting: WeightingChoice) -> Result<T> {
        let g = self.sign_gradient(theta, sign_row)?;
        Ok(match weighting {
            WeightingChoice::Identity => dot(&g, &g),
            WeightingChoice::CovarianceEstimate => {
                self.chol.inv_quadratic(&g)? * T::count(self.ds.len())
            }
        })
    }

    /// `(XXᵀ)⁻¹ X P e`: the shift from θ to the permuted-data LS estimate.
    pub fn perturbed_shift(&self, theta: &[T], perm: &[usize]) -> Result<Vec<T>> {
        let w = self.permuted_moment(theta, perm)?;
        self.chol.solve(&w)
    }

    fn permuted_moment(&self, theta: &[T], perm: &[usize]) -> Result<Vec<T>> {
        self.check_theta(theta)?;
        let e = self.ds.residual(theta)?;
        let pe = apply_permutation(perm, &e)?;
        self.ds.regressors().matvec(&pe)
    }

    pub fn perm_z(&self, theta: &[T], perm: &[usize]) -> Result<T> {
        let w = self.permuted_moment(theta, perm)?;
        self.chol.inv_quadratic(&w)
    }

    /// `M = X P Xᵀ`, i.e. `M[a][b] = Σ_k X[a][k]·X[b][p[k]]`.
    fn mixed_gram(&self, perm: &[usize]) -> Result<Matrix<T>> {
        let x = self.ds.regressors();
        if perm.len() != x.cols() {
            return Err(Error::Dimension("permutation length".into()));
        }
        let d = x.rows();
        Ok(Matrix::from_fn(d, d, |a, b| {
            perm.iter().enumerate().map(|(k, &pk)| x[(a, k)] * x[(b, pk)]).sum()
        }))
    }

    pub fn excitation_matrix(&self, perm: &[usize]) -> Result<Matrix<T>> {
        let m = self.mixed_gram(perm)?;
        // Mᵀ G⁻¹ M, column by column
        let d = m.rows();
        let mut ginv_m = Matrix::zeros(d, d);
        for j in 0..d {
            let col: Vec<T> = (0..d).map(|i| m[(i, j)]).collect();
            let s = self.chol.solve(&col)?;
            for i in 0..d {
                ginv_m[(i, j)] = s[i];
            }
        }
        let mt_ginv_m = m.transpose().matmul(&ginv_m)?;
        Ok(self.gram.sub(&mt_ginv_m)?.symmetrized())
    }

    pub fn half_set_form(&self, perm: &[usize]) -> Result<QuadraticForm<T>> {
        let q = self.excitation_matrix(perm)?;
        let x = self.ds.regressors();
        let y = self.ds.outputs();
        let a1 = x.matvec(y)?;
        let ai = x.matvec(&apply_permutation(perm, y)?)?;
        let mi = self.mixed_gram(perm)?;
        let ginv_ai = self.chol.solve(&ai)?;
        let b: Vec<T> = mi
            .tr_matvec(&ginv_ai)?
            .into_iter()
            .zip(&a1)
            .map(|(u, &v)| u - v)
            .collect();
        let c = self.chol.inv_quadratic(&a1)? - self.chol.inv_quadratic(&ai)?;
        QuadraticForm::new(q, b, c)
    }

    /// All `m` performance values under the setup.
    pub fn performance(
        &self,
        theta: &[T],
        setup: &PerturbationSetup,
        weighting: WeightingChoice,
    ) -> Result<PerformanceVector<T>> {
        let z = (0..setup.m)
            .map(|i| match setup.method {
                Method::SignFlip => {
                    let row = setup
                        .sign_row::<T>(i)
                        .ok_or_else(|| Error::Domain("setup lacks sign row".into()))?;
                    self.sps_sign_z(theta, &row, weighting)
                }
                Method::Permute => {
                    let p = setup
                        .permutation(i)
                        .ok_or_else(|| Error::Domain("setup lacks permutation".into()))?;
                    self.perm_z(theta, p)
                }
            })
            .collect::<Result<Vec<T>>>()?;
        PerformanceVector::new(z)
    }

    pub fn test(
        &self,
        theta: &[T],
        setup: &PerturbationSetup,
        rule: &RankRule,
        weighting: WeightingChoice,
    ) -> Result<TestVerdict<T>> {
        setup.check_compatible(self.ds.len(), rule)?;
        let z = self.performance(theta, setup, weighting)?;
        let (_, rank) = rank_of_one(&z, &setup.tie_perm)?;
        Ok(TestVerdict {
            accepted: rule.accepts(rank),
            rank_of_one: rank,
            z_values: z,
        })
    }
}

/// `[XXᵀ]⁻¹ X Y`.
pub fn ls_estimate<T: Scalar>(ds: &RegressionDataset<T>) -> Result<Vec<T>> {
    LinRegProblem::new(ds)?.ls_estimate()
}

pub fn sps_sign_z<T: Scalar>(
    ds: &RegressionDataset<T>,
    theta: &[T],
    sign_row: &[T],
    weighting: WeightingChoice,
) -> Result<T> {
    LinRegProblem::new(ds)?.sps_sign_z(theta, sign_row, weighting)
}

/// `(Y − Xᵀθ)ᵀ Pᵀ Xᵀ (XXᵀ)⁻¹ X P (Y − Xᵀθ)`.
pub fn perm_z<T: Scalar>(ds: &RegressionDataset<T>, theta: &[T], perm: &[usize]) -> Result<T> {
    LinRegProblem::new(ds)?.perm_z(theta, perm)
}

pub fn excitation_matrix<T: Scalar>(ds: &RegressionDataset<T>, perm: &[usize]) -> Result<Matrix<T>> {
    LinRegProblem::new(ds)?.excitation_matrix(perm)
}

/// Smallest eigenvalue of `Q` for the permutation.
pub fn excitation_min_eigenvalue<T: Scalar>(ds: &RegressionDataset<T>, perm: &[usize]) -> Result<T> {
    let q = excitation_matrix(ds, perm)?;
    Ok(sym_eigenvalues(&q)?[0])
}

/// True iff `λ_min(Q) > tol · max(1, ‖Q‖₂)`.
pub fn is_sufficiently_exciting<T: Scalar>(
    ds: &RegressionDataset<T>,
    perm: &[usize],
    tol: T,
) -> Result<bool> {
    let q = excitation_matrix(ds, perm)?;
    let ev = sym_eigenvalues(&q)?;
    let spectral = ev.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    Ok(ev[0] > tol * spectral.max(T::one()))
}

/// Quadratic form whose non-positive set is `{θ : Z_1(θ) ≤ Z_i(θ)}`.
///
/// The form is `Z_1 − Z_i` expanded in θ; its quadratic part is the
/// excitation matrix of `perm_i`, hence positive semidefinite.
pub fn half_set_form<T: Scalar>(ds: &RegressionDataset<T>, perm_i: &[usize]) -> Result<QuadraticForm<T>> {
    LinRegProblem::new(ds)?.half_set_form(perm_i)
}

pub fn test_membership<T: Scalar>(
    ds: &RegressionDataset<T>,
    theta: &[T],
    setup: &PerturbationSetup,
    rule: &RankRule,
    weighting: WeightingChoice,
) -> Result<TestVerdict<T>> {
    LinRegProblem::new(ds)?.test(theta, setup, rule, weighting)
}

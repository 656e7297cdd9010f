//! Datasets, the frozen perturbation setup, rank rules and verdicts.
//!
//! A [`PerturbationSetup`] carries the realized sign sequences or
//! permutations together with the tie-break permutation. Every membership
//! query in a region scan must see the same setup, so the serialized form
//! stores the realized randomness rather than only the seed.
//!
//! Permutations are 0-based in memory and 1-based on the wire.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{factor_gram, Matrix};
use crate::perturbation::PerformanceVector;
use crate::scalar::Scalar;

/// Version tag written into every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Name of the generator used to realize setups, recorded alongside them.
pub const PRNG_NAME: &str = "chacha8/rand_chacha-0.9";

/// Linear regression data `Y = Xᵀθ + N`.
///
/// `regressors` is `n_theta × n`: one row per parameter, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset<T> {
    regressors: Matrix<T>,
    outputs: Vec<T>,
}

impl<T: Scalar> RegressionDataset<T> {
    pub fn new(regressors: Matrix<T>, outputs: Vec<T>) -> Result<Self> {
        if regressors.cols() != outputs.len() {
            return Err(Error::Dimension(format!(
                "regressors have {} columns but there are {} outputs",
                regressors.cols(),
                outputs.len()
            )));
        }
        if regressors.rows() == 0 {
            return Err(Error::Domain("at least one regressor row is required".into()));
        }
        if outputs.len() < regressors.rows() {
            return Err(Error::Domain(format!(
                "n = {} samples is fewer than n_theta = {}",
                outputs.len(),
                regressors.rows()
            )));
        }
        if regressors.as_slice().iter().chain(&outputs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        factor_gram(&regressors.gram(), "regressor Gram matrix XXᵀ")?;
        Ok(RegressionDataset { regressors, outputs })
    }

    /// Builds a dataset from per-sample regressor vectors (the CSV row layout).
    pub fn from_samples(samples: &[Vec<T>], outputs: Vec<T>) -> Result<Self> {
        let x = Matrix::from_rows(samples)?.transpose();
        Self::new(x, outputs)
    }

    pub fn regressors(&self) -> &Matrix<T> {
        &self.regressors
    }

    pub fn outputs(&self) -> &[T] {
        &self.outputs
    }

    pub fn n_theta(&self) -> usize {
        self.regressors.rows()
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Residual `Y − Xᵀθ`.
    pub fn residual(&self, theta: &[T]) -> Result<Vec<T>> {
        let fit = self.regressors.tr_matvec(theta)?;
        Ok(self.outputs.iter().zip(fit).map(|(&y, f)| y - f).collect())
    }

    /// Replaces the outputs, keeping the regressors (and their validated Gram matrix).
    pub fn with_outputs(&self, outputs: Vec<T>) -> Result<Self> {
        if outputs.len() != self.outputs.len() {
            return Err(Error::Dimension("replacement outputs length".into()));
        }
        Ok(RegressionDataset {
            regressors: self.regressors.clone(),
            outputs,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        let mut header: Vec<String> = (1..=self.n_theta()).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(|e| Error::io(path, e))?;
        for t in 0..self.len() {
            let mut rec: Vec<String> = (0..self.n_theta())
                .map(|k| fmt_num(self.regressors[(k, t)]))
                .collect();
            rec.push(fmt_num(self.outputs[t]));
            w.write_record(&rec).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, rows) = read_numeric_csv::<T>(path)?;
        let k = header.len();
        if k < 2 || header[k - 1] != "y" || header[..k - 1].iter().enumerate().any(|(i, h)| *h != format!("x{}", i + 1)) {
            return Err(Error::Parse {
                field: "header".into(),
                message: format!("expected `x1,...,xk,y`, found `{}`", header.join(",")),
            });
        }
        let samples: Vec<Vec<T>> = rows.iter().map(|r| r[..k - 1].to_vec()).collect();
        let outputs = rows.iter().map(|r| r[k - 1]).collect();
        Self::from_samples(&samples, outputs)
    }
}

/// Input/output time series for a dynamical model.
#[derive(Debug, Clone, PartialEq)]
pub struct IoDataset<T> {
    inputs: Vec<T>,
    outputs: Vec<T>,
}

impl<T: Scalar> IoDataset<T> {
    pub fn new(inputs: Vec<T>, outputs: Vec<T>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::Dimension(format!(
                "{} inputs vs {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Domain("time series must have at least one sample".into()));
        }
        if inputs.iter().chain(&outputs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(IoDataset { inputs, outputs })
    }

    pub fn inputs(&self) -> &[T] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[T] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        w.write_record(["u", "y"]).map_err(|e| Error::io(path, e))?;
        for (u, y) in self.inputs.iter().zip(&self.outputs) {
            w.write_record([fmt_num(*u), fmt_num(*y)])
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, rows) = read_numeric_csv::<T>(path)?;
        if header != ["u", "y"] {
            return Err(Error::Parse {
                field: "header".into(),
                message: format!("expected `u,y`, found `{}`", header.join(",")),
            });
        }
        Self::new(rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect())
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_num<T: Scalar>(v: T) -> String {
    format!("{v}")
}

fn read_numeric_csv<T: Scalar>(path: &Path) -> Result<(Vec<String>, Vec<Vec<T>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::io(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                field: format!("row {}", line + 1),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let row = rec
            .iter()
            .zip(&header)
            .map(|(s, h)| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .and_then(T::from_f64)
                    .ok_or_else(|| Error::Parse {
                        field: format!("{h} (row {})", line + 1),
                        message: format!("not a number: `{s}`"),
                    })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// How the perturbed datasets are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Flip residual signs; exact under symmetric noise.
    SignFlip,
    /// Permute residuals; exact under exchangeable noise.
    Permute,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sign_flip" | "sign" | "sps" => Ok(Method::SignFlip),
            "permute" | "perm" | "permutation" => Ok(Method::Permute),
            other => Err(Error::Parse {
                field: "method".into(),
                message: format!("unknown method `{other}`"),
            }),
        }
    }
}

/// The realized random object shared by every θ tested against one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSetup {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    /// `m × n` entries in {−1, +1}; present iff `method == SignFlip`.
    pub sign_matrix: Option<Vec<Vec<i8>>>,
    /// `m` permutations of `0..n`; present iff `method == Permute`.
    pub permutations: Option<Vec<Vec<usize>>>,
    /// Tie-break permutation of `0..m`.
    pub tie_perm: Vec<usize>,
    pub seed: u64,
}

impl PerturbationSetup {
    /// Sign row `i` (0-based) as scalars.
    pub fn sign_row<T: Scalar>(&self, i: usize) -> Option<Vec<T>> {
        self.sign_matrix
            .as_ref()
            .and_then(|s| s.get(i))
            .map(|row| row.iter().map(|&a| if a < 0 { -T::one() } else { T::one() }).collect())
    }

    pub fn permutation(&self, i: usize) -> Option<&[usize]> {
        self.permutations.as_ref().and_then(|p| p.get(i)).map(Vec::as_slice)
    }

    /// Cheap shape check used before each membership test.
    pub(crate) fn check_compatible(&self, n: usize, rule: &RankRule) -> Result<()> {
        if self.n != n {
            return Err(Error::Dimension(format!(
                "setup is for n = {} samples, dataset has {}",
                self.n, n
            )));
        }
        if rule.m() != self.m {
            return Err(Error::Dimension(format!(
                "rank rule is for m = {}, setup has m = {}",
                rule.m(),
                self.m
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serialize_setup(self)
    }
}

fn is_permutation(p: &[usize], len: usize) -> bool {
    if p.len() != len {
        return false;
    }
    let mut seen = vec![false; len];
    for &i in p {
        if i >= len || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Checks every setup invariant, listing all violations.
pub fn validate_setup(setup: &PerturbationSetup) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    let (m, n) = (setup.m, setup.n);
    if m < 2 {
        errs.push(format!("m must be at least 2, got {m}"));
    }
    if n < 1 {
        errs.push("n must be at least 1".to_string());
    }
    if !is_permutation(&setup.tie_perm, m) {
        errs.push(format!("tie_perm must be a permutation of 1..{m}"));
    }
    match setup.method {
        Method::SignFlip => {
            if setup.permutations.is_some() {
                errs.push("sign_flip setup must not carry permutations".into());
            }
            match &setup.sign_matrix {
                None => errs.push("sign_flip setup requires sign_matrix".into()),
                Some(rows) => {
                    if rows.len() != m {
                        errs.push(format!("sign_matrix must have m = {m} rows, has {}", rows.len()));
                    }
                    for (i, r) in rows.iter().enumerate() {
                        if r.len() != n {
                            errs.push(format!("sign_matrix row {} has length {}, expected {n}", i + 1, r.len()));
                        }
                        if r.iter().any(|&a| a != 1 && a != -1) {
                            errs.push(format!("sign_matrix row {} has entries outside {{-1, +1}}", i + 1));
                        }
                    }
                    if let Some(first) = rows.first() {
                        if first.iter().any(|&a| a != 1) {
                            errs.push("first sequence must be all-one".into());
                        }
                    }
                }
            }
        }
        Method::Permute => {
            if setup.sign_matrix.is_some() {
                errs.push("permute setup must not carry sign_matrix".into());
            }
            match &setup.permutations {
                None => errs.push("permute setup requires permutations".into()),
                Some(perms) => {
                    if perms.len() != m {
                        errs.push(format!("permutations must have m = {m} entries, has {}", perms.len()));
                    }
                    for (i, p) in perms.iter().enumerate() {
                        if !is_permutation(p, n) {
                            errs.push(format!("permutation {} is not a permutation of 1..{n}", i + 1));
                        }
                    }
                    if let Some(first) = perms.first() {
                        if first.iter().enumerate().any(|(k, &v)| k != v) {
                            errs.push("first permutation must be the identity".into());
                        }
                    }
                }
            }
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Serialize, Deserialize)]
struct SetupWire {
    #[serde(default = "default_schema")]
    schema_version: u32,
    method: Method,
    m: usize,
    n: usize,
    seed: u64,
    #[serde(default)]
    prng: Option<String>,
    tie_perm: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    sign_matrix: Option<Vec<Vec<i8>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    permutations: Option<Vec<Vec<usize>>>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn to_one_based(p: &[usize]) -> Vec<usize> {
    p.iter().map(|&i| i + 1).collect()
}

fn from_one_based(p: &[usize], field: &str) -> Result<Vec<usize>> {
    p.iter()
        .map(|&i| {
            i.checked_sub(1).ok_or_else(|| Error::Parse {
                field: field.to_string(),
                message: "indices are 1-based; found 0".into(),
            })
        })
        .collect()
}

pub fn serialize_setup(setup: &PerturbationSetup) -> String {
    let wire = SetupWire {
        schema_version: SCHEMA_VERSION,
        method: setup.method,
        m: setup.m,
        n: setup.n,
        seed: setup.seed,
        prng: Some(PRNG_NAME.to_string()),
        tie_perm: to_one_based(&setup.tie_perm),
        sign_matrix: setup.sign_matrix.clone(),
        permutations: setup
            .permutations
            .as_ref()
            .map(|ps| ps.iter().map(|p| to_one_based(p)).collect()),
    };
    serde_json::to_string_pretty(&wire).expect("setup serializes")
}

/// Parses and validates a setup.
pub fn deserialize_setup(bytes: &[u8]) -> Result<PerturbationSetup> {
    let wire: SetupWire = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        field: json_error_field(&e),
        message: e.to_string(),
    })?;
    if wire.schema_version > SCHEMA_VERSION {
        return Err(Error::Parse {
            field: "schema_version".into(),
            message: format!("unsupported schema version {}", wire.schema_version),
        });
    }
    let permutations = match &wire.permutations {
        Some(ps) => Some(
            ps.iter()
                .enumerate()
                .map(|(i, p)| from_one_based(p, &format!("permutations[{i}]")))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let setup = PerturbationSetup {
        method: wire.method,
        m: wire.m,
        n: wire.n,
        sign_matrix: wire.sign_matrix,
        permutations,
        tie_perm: from_one_based(&wire.tie_perm, "tie_perm")?,
        seed: wire.seed,
    };
    validate_setup(&setup).map_err(Error::InvalidSetup)?;
    Ok(setup)
}

/// Best-effort extraction of the field a serde_json error refers to.
fn json_error_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    if e.is_eof() {
        "<document: truncated>".into()
    } else {
        format!("<document: line {} column {}>", e.line(), e.column())
    }
}

/// Accept θ unless `Z_1` is among the `q` largest of `m` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRule {
    q: usize,
    m: usize,
}

impl RankRule {
    pub fn new(q: usize, m: usize) -> Result<Self> {
        if m < 2 || q < 1 || q >= m {
            return Err(Error::Domain(format!(
                "rank rule needs 1 <= q <= m-1 with m >= 2, got q = {q}, m = {m}"
            )));
        }
        Ok(RankRule { q, m })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Exact confidence level `1 − q/m`.
    pub fn confidence(&self) -> f64 {
        1.0 - self.q as f64 / self.m as f64
    }

    pub fn accepts(&self, rank_of_one: usize) -> bool {
        rank_of_one > self.q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestVerdict<T> {
    pub accepted: bool,
    /// 1-based position of dataset 1 in the decreasing ordering.
    pub rank_of_one: usize,
    pub z_values: PerformanceVector<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbation::gen_setup;

    fn sign_setup() -> PerturbationSetup {
        PerturbationSetup {
            method: Method::SignFlip,
            m: 2,
            n: 7,
            sign_matrix: Some(vec![vec![1; 7], vec![1, -1, 1, -1, 1, 1, -1]]),
            permutations: None,
            tie_perm: vec![0, 1],
            seed: 0,
        }
    }

    #[test]
    fn valid_sign_setup_passes() {
        assert_eq!(validate_setup(&sign_setup()), Ok(()));
    }

    #[test]
    fn first_sign_row_must_be_all_ones() {
        let mut s = sign_setup();
        s.sign_matrix.as_mut().unwrap()[0][1] = -1;
        let errs = validate_setup(&s).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("first sequence must be all-one")));
    }

    #[test]
    fn first_permutation_must_be_identity() {
        let mut s = gen_setup(Method::Permute, 3, 5, 9).unwrap();
        s.permutations.as_mut().unwrap()[0] = vec![1, 0, 2, 3, 4];
        let errs = validate_setup(&s).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("identity")));
    }

    #[test]
    fn every_mutation_is_reported() {
        let mut s = sign_setup();
        s.tie_perm = vec![0, 0];
        s.sign_matrix.as_mut().unwrap()[1].pop();
        s.sign_matrix.as_mut().unwrap()[0][0] = 3;
        let errs = validate_setup(&s).unwrap_err();
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn fixture_sign_row_round_trips() {
        let s = sign_setup();
        let text = serialize_setup(&s);
        assert!(text.contains("\"tie_perm\": [\n    1,\n    2\n  ]"));
        let back = deserialize_setup(text.as_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.sign_matrix.unwrap()[1], vec![1, -1, 1, -1, 1, 1, -1]);
    }

    #[test]
    fn truncated_payload_is_a_parse_error() {
        let text = serialize_setup(&sign_setup());
        let cut = &text.as_bytes()[..text.len() / 2];
        match deserialize_setup(cut) {
            Err(Error::Parse { field, .. }) => assert!(field.contains("truncated")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let err = deserialize_setup(br#"{"method":"sign_flip","m":2,"n":1,"seed":0}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "tie_perm"), "{err}");
    }

    #[test]
    fn zero_index_on_the_wire_is_rejected() {
        let err = deserialize_setup(
            br#"{"method":"sign_flip","m":2,"n":1,"seed":0,"tie_perm":[0,1],"sign_matrix":[[1],[1]]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "tie_perm"));
    }

    #[test]
    fn regression_dataset_checks_shapes() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(RegressionDataset::new(x.clone(), vec![1.0]).is_err());
        assert!(RegressionDataset::new(x, vec![1.0, 2.0]).is_ok());
        let collinear = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        assert!(matches!(
            RegressionDataset::new(collinear, vec![0.0; 3]),
            Err(Error::Conditioning { .. })
        ));
    }

    #[test]
    fn rank_rule_bounds() {
        assert!(RankRule::new(0, 4).is_err());
        assert!(RankRule::new(4, 4).is_err());
        let r = RankRule::new(1, 8).unwrap();
        assert_eq!(r.confidence(), 0.875);
        assert!(r.accepts(2) && !r.accepts(1));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lr.csv");
        let ds = RegressionDataset::from_samples(
            &[vec![1.0, 0.25], vec![1.0, -1.5], vec![1.0, 3.0]],
            vec![0.1, 0.2, -0.3],
        )
        .unwrap();
        ds.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("x1,x2,y\n"));
        assert_eq!(RegressionDataset::<f64>::read_csv(&p).unwrap(), ds);

        let io = IoDataset::new(vec![1.0, 1.0], vec![0.879, 0.982]).unwrap();
        let p = dir.path().join("io.csv");
        io.write_csv(&p).unwrap();
        assert_eq!(IoDataset::<f64>::read_csv(&p).unwrap(), io);
        assert!(RegressionDataset::<f64>::read_csv(&p).is_err());
    }
}

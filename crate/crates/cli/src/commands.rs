use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use fsr_core::coverage::{asymptotic_ellipsoid_coverage, empirical_coverage};
use fsr_core::linalg::Matrix;
use fsr_core::linreg::{excitation_min_eigenvalue, is_sufficiently_exciting, test_membership};
use fsr_core::oe::{simulate, test_membership_oe};
use fsr_core::perturbation::gen_setup;
use fsr_core::region::{export_grid, label_components, render_svg, scan};
use fsr_core::repro::{run_repro, write_repro};
use fsr_core::types::{deserialize_setup, serialize_setup, SCHEMA_VERSION};
use fsr_core::{
    Connectivity, CoverageConfig, GridSpec, IoDataset, Method, NoiseModel, NoiseSpec, OeTheta,
    PerturbationSetup, Problem, RankRule, RegressionDataset, ReproOptions, Scalar, TestVerdict,
    WeightingChoice,
};

use crate::config::{describe, resolve, sidecar, write_json};

pub const EXIT_OK: u8 = 0;
pub const EXIT_REJECT: u8 = 1;

/// Writes a line to stdout; a closed pipe (`fsr ... | head`) is not an error.
fn emit(text: impl Display) -> anyhow::Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Linreg,
    Oe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Unit step.
    #[default]
    Step,
    /// White standard-normal input.
    Gaussian,
    /// Random ±1 input.
    Binary,
}

fn need_seed(seed: Option<u64>, why: &str) -> anyhow::Result<u64> {
    seed.ok_or_else(|| anyhow!("{why} needs a seed: pass --seed, set it in --config, or set FSR_SEED"))
}

enum Data {
    Linreg(RegressionDataset<f64>),
    Oe(IoDataset<f64>),
}

impl Data {
    fn len(&self) -> usize {
        match self {
            Data::Linreg(d) => d.len(),
            Data::Oe(d) => d.len(),
        }
    }
}

/// Reads a dataset; the model follows the header (`u,y` is input/output
/// data) unless given explicitly.
fn load_data(path: &Path, model: Option<Model>) -> anyhow::Result<Data> {
    let model = match model {
        Some(m) => m,
        None => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if text.lines().next().map(str::trim) == Some("u,y") {
                Model::Oe
            } else {
                Model::Linreg
            }
        }
    };
    Ok(match model {
        Model::Linreg => Data::Linreg(RegressionDataset::read_csv(path)?),
        Model::Oe => Data::Oe(IoDataset::read_csv(path)?),
    })
}

fn load_setup(
    path: Option<&Path>,
    method: Option<Method>,
    m: Option<usize>,
    seed: Option<u64>,
    n: usize,
) -> anyhow::Result<PerturbationSetup> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(deserialize_setup(&bytes).with_context(|| format!("setup file {}", p.display()))?)
        }
        None => {
            let method = method.ok_or_else(|| anyhow!("give --setup or --method with --m"))?;
            let m = m.ok_or_else(|| anyhow!("--m is required without --setup"))?;
            Ok(gen_setup(method, m, n, need_seed(seed, "generating a setup")?)?)
        }
    }
}

fn run_test(data: &Data, theta: &[f64], setup: &PerturbationSetup, rule: &RankRule, w: WeightingChoice) -> fsr_core::Result<TestVerdict<f64>> {
    match data {
        Data::Linreg(ds) => test_membership(ds, theta, setup, rule, w),
        Data::Oe(ds) => test_membership_oe(ds, &OeTheta::from_slice(theta)?, setup, rule, w),
    }
}

// ---------------------------------------------------------------- gen

#[derive(Args, Serialize)]
pub struct GenArgs {
    #[arg(value_enum)]
    model: Option<Model>,
    /// True parameter, comma separated (linreg: one value per regressor row)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<NoiseModel>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Literal noise realization; overrides --noise
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    noise_values: Option<Vec<f64>>,
    /// Input signal of the OE model
    #[arg(long, value_enum)]
    input: Option<InputKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; the resolved config goes to `<out>.config.json`
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_noise() -> NoiseModel {
    NoiseModel::None
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct GenConfig {
    model: Model,
    theta: Vec<f64>,
    n: usize,
    #[serde(default = "default_noise")]
    noise: NoiseModel,
    #[serde(default = "one")]
    noise_scale: f64,
    #[serde(default)]
    noise_values: Option<Vec<f64>>,
    #[serde(default)]
    input: InputKind,
    #[serde(default)]
    seed: Option<u64>,
    out: PathBuf,
}

pub fn gen(args: &GenArgs, config: Option<&Path>) -> anyhow::Result<u8> {
    let cfg: GenConfig = resolve(config, args)?;
    let noise = NoiseSpec::new(cfg.noise, cfg.noise_scale)?;
    let random_noise = cfg.noise_values.is_none() && cfg.noise != NoiseModel::None;
    let random_input = cfg.model == Model::Linreg || cfg.input != InputKind::Step;
    let mut rng = if random_noise || random_input {
        Some(ChaCha8Rng::seed_from_u64(need_seed(cfg.seed, "random data generation")?))
    } else {
        None
    };
    let draw_noise = |rng: &mut Option<ChaCha8Rng>| -> anyhow::Result<Vec<f64>> {
        match (&cfg.noise_values, rng) {
            (Some(v), _) if v.len() != cfg.n => bail!("--noise-values has {} entries, --n is {}", v.len(), cfg.n),
            (Some(v), _) => Ok(v.clone()),
            (None, Some(r)) => Ok(noise.sample(cfg.n, r)),
            (None, None) => Ok(vec![0.0; cfg.n]),
        }
    };
    match cfg.model {
        Model::Linreg => {
            let k = cfg.theta.len();
            if k == 0 {
                bail!("--theta needs at least one value");
            }
            let r = rng.as_mut().expect("linreg draws regressors");
            let normal = NoiseSpec::unit(NoiseModel::Gaussian).sample((k - 1) * cfg.n, r);
            let x = Matrix::from_fn(k, cfg.n, |row, col| if row == 0 { 1.0 } else { normal[(row - 1) * cfg.n + col] });
            let e = draw_noise(&mut rng)?;
            let y = x.tr_matvec(&cfg.theta)?.iter().zip(e).map(|(f, e)| f + e).collect();
            RegressionDataset::new(x, y)?.write_csv(&cfg.out)?;
        }
        Model::Oe => {
            let theta = OeTheta::from_slice(&cfg.theta)?;
            let u: Vec<f64> = match cfg.input {
                InputKind::Step => vec![1.0; cfg.n],
                InputKind::Gaussian => NoiseSpec::unit(NoiseModel::Gaussian).sample(cfg.n, rng.as_mut().expect("seeded")),
                InputKind::Binary => {
                    use rand::Rng;
                    let r = rng.as_mut().expect("seeded");
                    (0..cfg.n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
                }
            };
            let e = draw_noise(&mut rng)?;
            let y = simulate(&theta, &u).iter().zip(e).map(|(x, e)| x + e).collect();
            IoDataset::new(u, y)?.write_csv(&cfg.out)?;
        }
    }
    write_json(&sidecar(&cfg.out), &describe("gen", &cfg))?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- test

#[derive(Args, Serialize)]
pub struct TestArgs {
    /// Dataset CSV (`x1..xk,y` or `u,y`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model of the dataset; detected from the header when omitted
    #[arg(long, value_enum)]
    model: Option<Model>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Serialized setup; otherwise one is drawn from --method/--m/--seed
    #[arg(long)]
    setup: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weighting: Option<WeightingChoice>,
    /// Also write the verdict here (with `<out>.config.json`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct TestConfig {
    data: PathBuf,
    #[serde(default)]
    model: Option<Model>,
    theta: Vec<f64>,
    #[serde(default)]
    setup: Option<PathBuf>,
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    m: Option<usize>,
    q: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    weighting: WeightingChoice,
    #[serde(default)]
    out: Option<PathBuf>,
}

pub fn test(args: &TestArgs, config: Option<&Path>) -> anyhow::Result<u8> {
    let cfg: TestConfig = resolve(config, args)?;
    let data = load_data(&cfg.data, cfg.model)?;
    let setup = load_setup(cfg.setup.as_deref(), cfg.method, cfg.m, cfg.seed, data.len())?;
    let rule = RankRule::new(cfg.q, setup.m)?;
    let v = run_test(&data, &cfg.theta, &setup, &rule, cfg.weighting)?;
    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "accepted": v.accepted,
        "rank_of_one": v.rank_of_one,
        "z_values": v.z_values.values(),
        "confidence": rule.confidence(),
    });
    emit(serde_json::to_string_pretty(&out)?)?;
    if let Some(p) = &cfg.out {
        write_json(p, &out)?;
        write_json(&sidecar(p), &describe("test", &cfg))?;
    }
    Ok(if v.accepted { EXIT_OK } else { EXIT_REJECT })
}

// ---------------------------------------------------------------- scan

#[derive(Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    #[arg(long)]
    setup: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weighting: Option<WeightingChoice>,
    /// Box lower corner, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Option<Vec<f64>>,
    /// Cells per axis; one value applies to every axis
    #[arg(long, value_delimiter = ',')]
    resolution: Option<Vec<usize>>,
    /// `orthogonal` (default) or `full`
    #[arg(long)]
    connectivity: Option<Connectivity>,
    /// Output prefix for `.grid.csv`, `.components.json`, `.svg`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ScanConfig {
    data: PathBuf,
    #[serde(default)]
    model: Option<Model>,
    #[serde(default)]
    setup: Option<PathBuf>,
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    m: Option<usize>,
    q: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    weighting: WeightingChoice,
    lower: Vec<f64>,
    upper: Vec<f64>,
    resolution: Vec<usize>,
    #[serde(default)]
    connectivity: Connectivity,
    out: PathBuf,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    s.into()
}

pub fn scan_cmd(args: &ScanArgs, config: Option<&Path>) -> anyhow::Result<u8> {
    let cfg: ScanConfig = resolve(config, args)?;
    let data = load_data(&cfg.data, cfg.model)?;
    let setup = load_setup(cfg.setup.as_deref(), cfg.method, cfg.m, cfg.seed, data.len())?;
    let rule = RankRule::new(cfg.q, setup.m)?;
    let resolution = match cfg.resolution.as_slice() {
        [r] => vec![*r; cfg.lower.len()],
        r => r.to_vec(),
    };
    let spec = GridSpec::new(cfg.lower.clone(), cfg.upper.clone(), resolution)?;
    let result = scan(|t| run_test(&data, t, &setup, &rule, cfg.weighting), &spec, None)?;
    let labeling = label_components(&result.grid, cfg.connectivity, Some(&result.z1));
    export_grid(&result.grid, &labeling, &cfg.out)?;
    if spec.dim() == 2 {
        let svg = with_ext(&cfg.out, ".svg");
        std::fs::write(&svg, render_svg(&result.grid, &labeling, &[])?).with_context(|| format!("writing {}", svg.display()))?;
    }
    std::fs::write(with_ext(&cfg.out, ".setup.json"), serialize_setup(&setup))?;
    write_json(&with_ext(&cfg.out, ".config.json"), &describe("scan", &cfg))?;
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "cells": spec.total_cells(),
        "accepted_cells": result.grid.accepted_count(),
        "failed_cells": result.failures.len(),
        "component_count": labeling.component_count(),
    });
    emit(serde_json::to_string_pretty(&summary)?)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- coverage

#[derive(Args, Serialize)]
pub struct CoverageArgs {
    /// linreg_sign, linreg_perm or oe_sign
    #[arg(long)]
    problem: Option<Problem>,
    /// gaussian, laplace, shifted_exponential, student_t3 or none
    #[arg(long)]
    noise: Option<NoiseModel>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weighting: Option<WeightingChoice>,
    /// Study the Gaussian ellipsoid at this level instead of an exact test
    #[arg(long)]
    ellipsoid_level: Option<f64>,
    /// JSON report path (with `<out>.config.json`)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_trials() -> usize {
    10_000
}

#[derive(Serialize, Deserialize)]
struct CoverageCmdConfig {
    #[serde(default)]
    problem: Option<Problem>,
    noise: NoiseModel,
    #[serde(default = "one")]
    noise_scale: f64,
    n: usize,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    q: Option<usize>,
    #[serde(default = "default_trials")]
    trials: usize,
    seed: Option<u64>,
    #[serde(default)]
    weighting: WeightingChoice,
    #[serde(default)]
    ellipsoid_level: Option<f64>,
    #[serde(default)]
    out: Option<PathBuf>,
}

pub fn coverage(args: &CoverageArgs, config: Option<&Path>) -> anyhow::Result<u8> {
    let cfg: CoverageCmdConfig = resolve(config, args)?;
    let seed = need_seed(cfg.seed, "a coverage study")?;
    let noise = NoiseSpec::new(cfg.noise, cfg.noise_scale)?;
    let (kind, report) = match cfg.ellipsoid_level {
        Some(level) => (
            "asymptotic_ellipsoid",
            asymptotic_ellipsoid_coverage(&noise, cfg.n, level, cfg.trials, seed)?,
        ),
        None => {
            let run = empirical_coverage(&CoverageConfig {
                problem: cfg.problem.ok_or_else(|| anyhow!("--problem is required"))?,
                noise,
                n: cfg.n,
                m: cfg.m.ok_or_else(|| anyhow!("--m is required"))?,
                q: cfg.q.ok_or_else(|| anyhow!("--q is required"))?,
                trials: cfg.trials,
                seed,
                weighting: cfg.weighting,
            })?;
            ("exact", run.report)
        }
    };
    emit(&report)?;
    if let Some(p) = &cfg.out {
        write_json(p, &json!({ "schema_version": SCHEMA_VERSION, "kind": kind, "report": report }))?;
        write_json(&sidecar(p), &describe("coverage", &cfg))?;
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- repro-oe

#[derive(Args, Serialize)]
pub struct ReproArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Cells per axis
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    weighting: Option<WeightingChoice>,
    #[arg(long)]
    connectivity: Option<Connectivity>,
    /// Skip the doubled-resolution stability scan
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    skip_refinement: Option<bool>,
}

fn default_resolution() -> usize {
    400
}

#[derive(Serialize, Deserialize)]
struct ReproConfig {
    out_dir: PathBuf,
    #[serde(default = "default_resolution")]
    resolution: usize,
    #[serde(default)]
    weighting: WeightingChoice,
    #[serde(default)]
    connectivity: Connectivity,
    #[serde(default)]
    skip_refinement: bool,
}

pub fn repro_oe(args: &ReproArgs, config: Option<&Path>, jobs: Option<usize>) -> anyhow::Result<u8> {
    let cfg: ReproConfig = resolve(config, args)?;
    let opts = ReproOptions {
        resolution: cfg.resolution,
        weighting: cfg.weighting,
        connectivity: cfg.connectivity,
        check_refinement: !cfg.skip_refinement,
        ..Default::default()
    };
    let outcome = run_repro(&opts, jobs)?;
    write_repro(&outcome, &cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), &describe("repro-oe", &cfg))?;
    let s = &outcome.summary;
    emit(format_args!(
        "components: {}  pem component: {:?}  theta2=0 component: {:?}  stable under doubling: {:?}  passed: {}",
        s.topology.component_count,
        s.topology.pem_component,
        s.topology.separate_theta2_zero_component,
        s.checks.stable_under_doubling,
        s.passed
    ))?;
    if !s.passed {
        eprintln!("topology checks failed; evidence kept in {}", cfg.out_dir.display());
    }
    Ok(if s.passed { EXIT_OK } else { EXIT_REJECT })
}

// ---------------------------------------------------------------- excitation

#[derive(Args, Serialize)]
pub struct ExcitationArgs {
    /// Linear-regression dataset CSV
    #[arg(long)]
    data: Option<PathBuf>,
    /// Permutation setup; otherwise drawn from --m/--seed
    #[arg(long)]
    setup: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ExcitationConfig {
    data: PathBuf,
    #[serde(default)]
    setup: Option<PathBuf>,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

pub fn excitation(args: &ExcitationArgs, config: Option<&Path>) -> anyhow::Result<u8> {
    let cfg: ExcitationConfig = resolve(config, args)?;
    let Data::Linreg(ds) = load_data(&cfg.data, Some(Model::Linreg))? else {
        unreachable!()
    };
    let setup = load_setup(cfg.setup.as_deref(), Some(Method::Permute), cfg.m, cfg.seed, ds.len())?;
    let perms = setup
        .permutations
        .as_ref()
        .ok_or_else(|| anyhow!("excitation needs a permutation setup"))?;
    let tol = f64::conditioning_tol();
    let rows = perms
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let ev = excitation_min_eigenvalue(&ds, p)?;
            let ok = is_sufficiently_exciting(&ds, p, tol)?;
            Ok(json!({ "index": i + 1, "min_eigenvalue": ev, "sufficiently_exciting": ok }))
        })
        .collect::<fsr_core::Result<Vec<_>>>()?;
    let out = json!({ "schema_version": SCHEMA_VERSION, "relative_tolerance": tol, "permutations": rows });
    emit(serde_json::to_string_pretty(&out)?)?;
    Ok(EXIT_OK)
}

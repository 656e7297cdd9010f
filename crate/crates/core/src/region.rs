//! Point-sampled exploration of a confidence region.
//!
//! A [`GridSpec`] box is tested at every cell center against a frozen
//! membership test; accepted cells are then grouped into connected
//! components. The result only describes what the scan saw: nothing here
//! certifies that the whole region (or all of its components) lies inside
//! the box.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oe::{cost_derivatives, minimize_gradient_norm, OeTheta};
use crate::types::{IoDataset, TestVerdict, SCHEMA_VERSION};

/// Written into every component summary.
pub const SCAN_DISCLAIMER: &str = "point-sampled scan of a bounded box: components outside the box \
or thinner than a cell may be missed, and no volume or coverage of the full region is certified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        let spec = GridSpec {
            lower,
            upper,
            resolution,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square 2-D grid.
    pub fn square_2d(lower: [f64; 2], upper: [f64; 2], cells: usize) -> Result<Self> {
        Self::new(lower.to_vec(), upper.to_vec(), vec![cells, cells])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.resolution.len() != d {
            return Err(Error::Dimension("grid bounds and resolution must share a dimension".into()));
        }
        for k in 0..d {
            if !(self.lower[k] < self.upper[k]) || !self.lower[k].is_finite() || !self.upper[k].is_finite() {
                return Err(Error::Domain(format!("grid axis {k}: need finite lower < upper")));
            }
            if self.resolution[k] < 2 {
                return Err(Error::Domain(format!("grid axis {k}: resolution must be >= 2")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn total_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.resolution[axis] as f64
    }

    /// Row-major: the last axis varies fastest.
    pub fn unravel(&self, mut linear: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = linear % self.resolution[k];
            linear /= self.resolution[k];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.resolution)
            .fold(0, |acc, (&i, &r)| acc * r + i)
    }

    pub fn center(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(k, &i)| self.lower[k] + (i as f64 + 0.5) * self.cell_width(k))
            .collect()
    }

    /// Cell containing `theta`, if it lies inside the box.
    pub fn locate(&self, theta: &[f64]) -> Option<Vec<usize>> {
        if theta.len() != self.dim() {
            return None;
        }
        theta
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let f = (v - self.lower[k]) / self.cell_width(k);
                (f >= 0.0 && f < self.resolution[k] as f64).then_some(f as usize)
            })
            .collect()
    }

    /// Same box, resolution doubled along every axis.
    pub fn doubled(&self) -> Self {
        GridSpec {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            resolution: self.resolution.iter().map(|r| r * 2).collect(),
        }
    }
}

/// Accept/reject lattice over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipGrid {
    pub spec: GridSpec,
    pub accepted: Vec<bool>,
}

impl MembershipGrid {
    pub fn new(spec: GridSpec, accepted: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if accepted.len() != spec.total_cells() {
            return Err(Error::Dimension(format!(
                "lattice has {} cells, spec needs {}",
                accepted.len(),
                spec.total_cells()
            )));
        }
        Ok(MembershipGrid { spec, accepted })
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    pub fn is_accepted(&self, idx: &[usize]) -> bool {
        self.accepted[self.spec.ravel(idx)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: usize,
    pub message: String,
}

/// Grid plus the per-cell evidence behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub grid: MembershipGrid,
    /// `Z_1` at each cell center (NaN where the tester failed).
    pub z1: Vec<f64>,
    /// Cells whose test errored; they are recorded as rejected.
    pub failures: Vec<CellFailure>,
}

/// Tests every cell center. `jobs = None` uses rayon's global pool.
///
/// Tester errors reject the cell and are kept as diagnostics. The result is
/// identical for any worker count.
pub fn scan<F>(tester: F, spec: &GridSpec, jobs: Option<usize>) -> Result<ScanResult>
where
    F: Fn(&[f64]) -> Result<TestVerdict<f64>> + Sync,
{
    spec.validate()?;
    let run = || {
        (0..spec.total_cells())
            .into_par_iter()
            .map(|cell| tester(&spec.center(&spec.unravel(cell))))
            .collect::<Vec<_>>()
    };
    let verdicts = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Domain(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut accepted = Vec::with_capacity(verdicts.len());
    let mut z1 = Vec::with_capacity(verdicts.len());
    let mut failures = Vec::new();
    for (cell, v) in verdicts.into_iter().enumerate() {
        match v {
            Ok(v) => {
                accepted.push(v.accepted);
                z1.push(v.z_values.values()[0]);
            }
            Err(e) => {
                accepted.push(false);
                z1.push(f64::NAN);
                failures.push(CellFailure {
                    cell,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(ScanResult {
        grid: MembershipGrid::new(spec.clone(), accepted)?,
        z1,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// Neighbors differ by one along a single axis (4-connectivity in 2-D).
    #[default]
    Orthogonal,
    /// Any neighbor in the surrounding 3^d block (8-connectivity in 2-D).
    Full,
}

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" | "4" => Ok(Connectivity::Orthogonal),
            "full" | "8" => Ok(Connectivity::Full),
            _ => Err(Error::Parse {
                field: "connectivity".into(),
                message: format!("unknown connectivity `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    /// Cell-center coordinates.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub index_lower: Vec<usize>,
    pub index_upper: Vec<usize>,
}

impl BoundingBox {
    /// True if `theta` lies within the box grown by half a cell on each side.
    pub fn contains(&self, theta: &[f64], spec: &GridSpec) -> bool {
        theta.iter().enumerate().all(|(k, &v)| {
            let h = 0.5 * spec.cell_width(k);
            v >= self.lower[k] - h && v <= self.upper[k] + h
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub index: Vec<usize>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub label: u32,
    pub cells: usize,
    pub bbox: BoundingBox,
    pub representative: Representative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    /// 0 for rejected cells, otherwise the component id (1-based).
    pub labels: Vec<u32>,
    pub connectivity: Connectivity,
    pub components: Vec<ComponentSummary>,
}

impl ComponentLabeling {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn label_at(&self, spec: &GridSpec, idx: &[usize]) -> u32 {
        self.labels[spec.ravel(idx)]
    }

    pub fn component(&self, label: u32) -> Option<&ComponentSummary> {
        label
            .checked_sub(1)
            .and_then(|l| self.components.get(l as usize))
    }
}

fn neighbor_offsets(d: usize, conn: Connectivity) -> Vec<Vec<isize>> {
    match conn {
        Connectivity::Orthogonal => (0..d)
            .flat_map(|k| {
                [-1isize, 1].into_iter().map(move |s| {
                    let mut o = vec![0; d];
                    o[k] = s;
                    o
                })
            })
            .collect(),
        Connectivity::Full => {
            let mut out = vec![];
            for code in 0..3usize.pow(d as u32) {
                let mut c = code;
                let o: Vec<isize> = (0..d)
                    .map(|_| {
                        let v = (c % 3) as isize - 1;
                        c /= 3;
                        v
                    })
                    .collect();
                if o.iter().any(|&v| v != 0) {
                    out.push(o);
                }
            }
            out
        }
    }
}

/// Flood-fill labeling in row-major discovery order.
///
/// `scores` (usually `Z_1` per cell) picks each component's representative
/// as its minimal-score cell, ties by index; without scores the first
/// discovered cell is used.
pub fn label_components(
    grid: &MembershipGrid,
    connectivity: Connectivity,
    scores: Option<&[f64]>,
) -> ComponentLabeling {
    let spec = &grid.spec;
    let d = spec.dim();
    let offsets = neighbor_offsets(d, connectivity);
    let mut labels = vec![0u32; grid.accepted.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..grid.accepted.len() {
        if !grid.accepted[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut cells = 0usize;
        let mut lo = spec.unravel(start);
        let mut hi = lo.clone();
        let mut best = start;
        while let Some(cell) = queue.pop_front() {
            cells += 1;
            let idx = spec.unravel(cell);
            for k in 0..d {
                lo[k] = lo[k].min(idx[k]);
                hi[k] = hi[k].max(idx[k]);
            }
            if let Some(s) = scores {
                let (a, b) = (s[cell], s[best]);
                // NaN never wins; ties go to the smaller index
                if a < b || (a == b && cell < best) || (b.is_nan() && !a.is_nan()) {
                    best = cell;
                }
            } else if cell < best {
                best = cell;
            }
            'nb: for off in &offsets {
                let mut nb = Vec::with_capacity(d);
                for k in 0..d {
                    let v = idx[k] as isize + off[k];
                    if v < 0 || v >= spec.resolution[k] as isize {
                        continue 'nb;
                    }
                    nb.push(v as usize);
                }
                let n = spec.ravel(&nb);
                if grid.accepted[n] && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        let rep_idx = spec.unravel(best);
        components.push(ComponentSummary {
            label,
            cells,
            bbox: BoundingBox {
                lower: spec.center(&lo),
                upper: spec.center(&hi),
                index_lower: lo,
                index_upper: hi,
            },
            representative: Representative {
                theta: spec.center(&rep_idx),
                index: rep_idx,
            },
        });
    }
    ComponentLabeling {
        labels,
        connectivity,
        components,
    }
}

/// Groups accepted cells whose L∞ cell distance is at most `band`, so two
/// components in different clusters are separated by at least `band`
/// rejected cells. Returns the cluster id of each component (by label).
fn band_clusters(grid: &MembershipGrid, labeling: &ComponentLabeling, band: usize) -> Vec<usize> {
    let spec = &grid.spec;
    let d = spec.dim();
    let r = band as isize;
    let width = 2 * band + 1;
    let offsets: Vec<Vec<isize>> = (0..width.pow(d as u32))
        .map(|mut code| {
            (0..d)
                .map(|_| {
                    let v = (code % width) as isize - r;
                    code /= width;
                    v
                })
                .collect()
        })
        .collect();
    let mut cluster = vec![usize::MAX; grid.accepted.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..grid.accepted.len() {
        if !grid.accepted[start] || cluster[start] != usize::MAX {
            continue;
        }
        cluster[start] = next;
        stack.push(start);
        while let Some(cell) = stack.pop() {
            let idx = spec.unravel(cell);
            'nb: for off in &offsets {
                let mut nb = Vec::with_capacity(d);
                for k in 0..d {
                    let v = idx[k] as isize + off[k];
                    if v < 0 || v >= spec.resolution[k] as isize {
                        continue 'nb;
                    }
                    nb.push(v as usize);
                }
                let n = spec.ravel(&nb);
                if grid.accepted[n] && cluster[n] == usize::MAX {
                    cluster[n] = next;
                    stack.push(n);
                }
            }
        }
        next += 1;
    }
    let mut of_label = vec![0; labeling.component_count()];
    for (cell, &l) in labeling.labels.iter().enumerate() {
        if l != 0 {
            of_label[l as usize - 1] = cluster[cell];
        }
    }
    of_label
}

/// Pairs of coarse components that a finer scan joined although the coarse
/// scan separated them by a rejected band at least `band` cells wide.
///
/// `fine` must be the same box at exactly twice the resolution.
pub fn refinement_merges(
    coarse_grid: &MembershipGrid,
    coarse: &ComponentLabeling,
    fine_grid: &MembershipGrid,
    fine: &ComponentLabeling,
    band: usize,
) -> Result<Vec<(u32, u32)>> {
    let cs = &coarse_grid.spec;
    if fine_grid.spec != cs.doubled() {
        return Err(Error::Domain("fine grid must double the coarse resolution".into()));
    }
    let clusters = band_clusters(coarse_grid, coarse, band);
    // coarse components touched by each fine component
    let mut touched: Vec<Vec<u32>> = vec![Vec::new(); fine.component_count()];
    for (cell, &fl) in fine.labels.iter().enumerate() {
        if fl == 0 {
            continue;
        }
        let idx = fine_grid.spec.unravel(cell);
        let parent: Vec<usize> = idx.iter().map(|i| i / 2).collect();
        let cl = coarse.labels[cs.ravel(&parent)];
        let t = &mut touched[fl as usize - 1];
        if cl != 0 && !t.contains(&cl) {
            t.push(cl);
        }
    }
    let mut merges = Vec::new();
    for t in touched {
        for (i, &a) in t.iter().enumerate() {
            for &b in &t[i + 1..] {
                let (a, b) = (a.min(b), a.max(b));
                let separated = clusters[a as usize - 1] != clusters[b as usize - 1];
                if separated && !merges.contains(&(a, b)) {
                    merges.push((a, b));
                }
            }
        }
    }
    merges.sort_unstable();
    Ok(merges)
}

/// Classification of a zero of the cost gradient by its Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationaryKind {
    Minimum,
    Maximum,
    Saddle,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub theta: OeTheta<f64>,
    pub cost: f64,
    pub gradient_norm: f64,
    pub kind: StationaryKind,
}

/// Zeros of the OE cost gradient inside the box.
///
/// Starts from the cell centers of a coarse `starts_per_axis²` grid over
/// the box and minimizes `‖∇J‖²`, so saddles and maxima are found as well
/// as minima. Points closer than `1e-4` are merged; the list is sorted by
/// cost.
pub fn find_stationary_points(
    ds: &IoDataset<f64>,
    spec: &GridSpec,
    starts_per_axis: usize,
) -> Result<Vec<StationaryPoint>> {
    spec.validate()?;
    if spec.dim() != 2 {
        return Err(Error::Dimension("the OE model has two parameters".into()));
    }
    const TOL: f64 = 1e-8;
    let coarse = GridSpec::new(
        spec.lower.clone(),
        spec.upper.clone(),
        vec![starts_per_axis.max(2); 2],
    )?;
    let candidates: Vec<StationaryPoint> = (0..coarse.total_cells())
        .into_par_iter()
        .filter_map(|cell| {
            let c = coarse.center(&coarse.unravel(cell));
            let (theta, d) = minimize_gradient_norm(OeTheta::new(c[0], c[1]), ds, 300);
            let inside = theta.theta1 >= spec.lower[0]
                && theta.theta1 <= spec.upper[0]
                && theta.theta2 >= spec.lower[1]
                && theta.theta2 <= spec.upper[1];
            (d.is_finite() && d.gradient_norm() < TOL && inside).then(|| {
                let h = d.hessian;
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                let scale = h[0][0].abs().max(h[1][1].abs()).max(h[0][1].abs()).powi(2);
                let kind = if det.abs() <= 1e-12 * scale {
                    StationaryKind::Degenerate
                } else if det < 0.0 {
                    StationaryKind::Saddle
                } else if h[0][0] > 0.0 {
                    StationaryKind::Minimum
                } else {
                    StationaryKind::Maximum
                };
                StationaryPoint {
                    theta,
                    cost: d.cost,
                    gradient_norm: d.gradient_norm(),
                    kind,
                }
            })
        })
        .collect();
    let mut out: Vec<StationaryPoint> = Vec::new();
    for p in candidates {
        match out.iter_mut().find(|q| q.theta.distance(&p.theta) <= 1e-4) {
            Some(q) if p.gradient_norm < q.gradient_norm => *q = p,
            Some(_) => {}
            None => out.push(p),
        }
    }
    out.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.theta.theta1.total_cmp(&b.theta.theta1))
            .then(a.theta.theta2.total_cmp(&b.theta.theta2))
    });
    // derivatives recomputed at the final point so the record is self-consistent
    for p in &mut out {
        let d = cost_derivatives(&p.theta, ds);
        p.cost = d.cost;
        p.gradient_norm = d.gradient_norm();
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ComponentsFile {
    schema_version: u32,
    grid: GridSpec,
    connectivity: Connectivity,
    accepted_cells: usize,
    component_count: usize,
    disclaimer: String,
    components: Vec<ComponentSummary>,
}

fn axis_names(d: usize) -> (Vec<String>, Vec<String>) {
    if d == 2 {
        (vec!["i".into(), "j".into()], vec!["theta1".into(), "theta2".into()])
    } else {
        (
            (1..=d).map(|k| format!("i{k}")).collect(),
            (1..=d).map(|k| format!("theta{k}")).collect(),
        )
    }
}

/// Writes `<prefix>.grid.csv` and `<prefix>.components.json`; returns both paths.
pub fn export_grid(
    grid: &MembershipGrid,
    labeling: &ComponentLabeling,
    prefix: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let csv_path = with_suffix(prefix, "grid.csv");
    let json_path = with_suffix(prefix, "components.json");
    let spec = &grid.spec;
    let (idx_names, theta_names) = axis_names(spec.dim());
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut header = idx_names;
    header.extend(theta_names);
    header.push("accepted".into());
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::io(&csv_path, e))?;
    for cell in 0..spec.total_cells() {
        let idx = spec.unravel(cell);
        let mut rec: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        rec.extend(spec.center(&idx).iter().map(|v| format!("{v}")));
        rec.push(if grid.accepted[cell] { "1" } else { "0" }.into());
        rec.push(labeling.labels[cell].to_string());
        w.write_record(&rec).map_err(|e| Error::io(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let file = ComponentsFile {
        schema_version: SCHEMA_VERSION,
        grid: spec.clone(),
        connectivity: labeling.connectivity,
        accepted_cells: grid.accepted_count(),
        component_count: labeling.component_count(),
        disclaimer: SCAN_DISCLAIMER.into(),
        components: labeling.components.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("summary serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

/// Reads back what [`export_grid`] wrote.
pub fn import_grid(prefix: &Path) -> Result<(MembershipGrid, ComponentLabeling)> {
    let csv_path = with_suffix(prefix, "grid.csv");
    let json_path = with_suffix(prefix, "components.json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let file: ComponentsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        field: json_path.display().to_string(),
        message: e.to_string(),
    })?;
    let spec = file.grid;
    spec.validate()?;
    let d = spec.dim();
    let mut accepted = vec![false; spec.total_cells()];
    let mut labels = vec![0u32; spec.total_cells()];
    let mut seen = vec![false; spec.total_cells()];
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::io(&csv_path, e))?;
        let bad = |what: &str| Error::Parse {
            field: format!("{} row {}", csv_path.display(), row + 1),
            message: what.to_string(),
        };
        if rec.len() != 2 * d + 2 {
            return Err(bad("wrong number of fields"));
        }
        let idx = (0..d)
            .map(|k| rec[k].parse::<usize>().map_err(|_| bad("bad index")))
            .collect::<Result<Vec<_>>>()?;
        if idx.iter().zip(&spec.resolution).any(|(i, r)| i >= r) {
            return Err(bad("index outside grid"));
        }
        let cell = spec.ravel(&idx);
        accepted[cell] = match &rec[2 * d] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("accepted must be 0 or 1")),
        };
        labels[cell] = rec[2 * d + 1].parse().map_err(|_| bad("bad label"))?;
        seen[cell] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Parse {
            field: csv_path.display().to_string(),
            message: "grid file does not cover every cell".into(),
        });
    }
    Ok((
        MembershipGrid::new(spec, accepted)?,
        ComponentLabeling {
            labels,
            connectivity: file.connectivity,
            components: file.components,
        },
    ))
}

fn with_suffix(prefix: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    s.into()
}

/// A labeled point drawn on top of a rendered grid.
#[derive(Debug, Clone)]
pub struct Marker {
    pub theta: [f64; 2],
    pub label: String,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Static SVG of the accepted cells of a 2-D grid, colored by component.
pub fn render_svg(grid: &MembershipGrid, labeling: &ComponentLabeling, markers: &[Marker]) -> Result<String> {
    let spec = &grid.spec;
    if spec.dim() != 2 {
        return Err(Error::Dimension("SVG rendering needs a 2-D grid".into()));
    }
    let (w, h, pad) = (600.0, 600.0, 50.0);
    let sx = |v: f64| pad + (v - spec.lower[0]) / (spec.upper[0] - spec.lower[0]) * w;
    let sy = |v: f64| pad + h - (v - spec.lower[1]) / (spec.upper[1] - spec.lower[1]) * h;
    let cw = w / spec.resolution[0] as f64;
    let ch = h / spec.resolution[1] as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        w + 2.0 * pad,
        h + 2.0 * pad,
        w + 2.0 * pad,
        h + 2.0 * pad
    );
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{w}" height="{h}" fill="white" stroke="black"/>"#);
    for cell in 0..spec.total_cells() {
        let l = labeling.labels[cell];
        if l == 0 {
            continue;
        }
        let idx = spec.unravel(cell);
        let c = spec.center(&idx);
        let _ = writeln!(
            s,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
            sx(c[0]) - cw / 2.0,
            sy(c[1]) - ch / 2.0,
            cw,
            ch,
            PALETTE[(l as usize - 1) % PALETTE.len()]
        );
    }
    for m in markers {
        let (x, y) = (sx(m.theta[0]), sy(m.theta[1]));
        let _ = writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="4" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" font-size="12">{}</text>"#, x + 6.0, y - 6.0, xml_escape(&m.label));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">theta1 [{}, {}]</text>"#,
        pad + w / 2.0,
        h + 2.0 * pad - 15.0,
        spec.lower[0],
        spec.upper[0]
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 15 {})">theta2 [{}, {}]</text>"#,
        pad + h / 2.0,
        pad + h / 2.0,
        spec.lower[1],
        spec.upper[1]
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

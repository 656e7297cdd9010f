//! End-to-end run of the disconnected-region example: fixture, PEM
//! estimate, stationary points, grid scan, labeling and a refinement check.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linreg::WeightingChoice;
use crate::oe::{
    disconnected_region_fixture, pem_estimate, test_membership_oe, OeTheta, PemOptions, FIXTURE_THETA,
};
use crate::region::{
    export_grid, find_stationary_points, label_components, refinement_merges, render_svg, scan,
    ComponentLabeling, ComponentSummary, Connectivity, GridSpec, Marker, MembershipGrid, ScanResult,
    StationaryPoint, SCAN_DISCLAIMER,
};
use crate::types::{serialize_setup, IoDataset, PerturbationSetup, RankRule, SCHEMA_VERSION};

pub const REPRO_LOWER: [f64; 2] = [0.0, -1.0];
pub const REPRO_UPPER: [f64; 2] = [2.0, 1.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproOptions {
    pub resolution: usize,
    pub weighting: WeightingChoice,
    pub connectivity: Connectivity,
    /// Starts per axis for the stationary-point search.
    pub stationary_starts: usize,
    pub check_refinement: bool,
}

impl Default for ReproOptions {
    fn default() -> Self {
        ReproOptions {
            resolution: 400,
            weighting: WeightingChoice::Identity,
            connectivity: Connectivity::Orthogonal,
            stationary_starts: 15,
            check_refinement: true,
        }
    }
}

/// Topology of one labeled scan relative to the PEM estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub resolution: usize,
    pub accepted_cells: usize,
    pub failed_cells: usize,
    pub component_count: usize,
    pub pem_component: Option<u32>,
    /// False when the PEM cell center was rejected and the component of
    /// the nearest accepted cell stands in for it.
    pub pem_cell_accepted: bool,
    /// Grid rows (θ₂ index) whose centers are nearest θ₂ = 0.
    pub theta2_zero_rows: Vec<usize>,
    pub theta2_zero_components: Vec<u32>,
    /// A component on those rows other than the PEM one.
    pub separate_theta2_zero_component: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub fine: Topology,
    /// Coarse component pairs, separated by at least two rejected cells,
    /// that the finer scan joined.
    pub merged_pairs: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproChecks {
    pub component_count_at_least_two: bool,
    pub pem_and_theta2_zero_distinct: bool,
    pub stable_under_doubling: Option<bool>,
}

impl ReproChecks {
    pub fn passed(&self) -> bool {
        self.component_count_at_least_two
            && self.pem_and_theta2_zero_distinct
            && self.stable_under_doubling.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub schema_version: u32,
    pub disclaimer: String,
    pub weighting: WeightingChoice,
    pub connectivity: Connectivity,
    pub grid: GridSpec,
    pub nominal_theta: OeTheta<f64>,
    pub pem_estimate: OeTheta<f64>,
    pub pem_cost: f64,
    pub nominal_in_pem_component_bbox: bool,
    pub stationary_points: Vec<StationaryPoint>,
    pub stationary_point_near_theta2_zero: bool,
    pub topology: Topology,
    pub components: Vec<ComponentSummary>,
    pub refinement: Option<Refinement>,
    pub checks: ReproChecks,
    pub passed: bool,
}

/// Everything a run produced, kept so callers can write it out.
#[derive(Debug, Clone)]
pub struct ReproOutcome {
    pub dataset: IoDataset<f64>,
    pub setup: PerturbationSetup,
    pub rule: RankRule,
    pub scan: ScanResult,
    pub labeling: ComponentLabeling,
    pub summary: ReproSummary,
}

fn scan_fixture(
    ds: &IoDataset<f64>,
    setup: &PerturbationSetup,
    rule: &RankRule,
    weighting: WeightingChoice,
    spec: &GridSpec,
    jobs: Option<usize>,
) -> Result<ScanResult> {
    scan(
        |t| test_membership_oe(ds, &OeTheta::new(t[0], t[1]), setup, rule, weighting),
        spec,
        jobs,
    )
}

/// Label of the component containing `theta`, or of the accepted cell
/// nearest to it when its own cell was rejected.
fn component_near(grid: &MembershipGrid, labeling: &ComponentLabeling, theta: &[f64]) -> Option<u32> {
    let spec = &grid.spec;
    if let Some(idx) = spec.locate(theta) {
        let l = labeling.label_at(spec, &idx);
        if l != 0 {
            return Some(l);
        }
    }
    let mut best: Option<(f64, u32)> = None;
    for (cell, &l) in labeling.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = spec.center(&spec.unravel(cell));
        let d = (c[0] - theta[0]).hypot(c[1] - theta[1]);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, l));
        }
    }
    best.map(|(_, l)| l)
}

fn topology(scan: &ScanResult, labeling: &ComponentLabeling, pem: &OeTheta<f64>) -> Topology {
    let spec = &scan.grid.spec;
    let pem_component = component_near(&scan.grid, labeling, &pem.as_array());
    let centers: Vec<f64> = (0..spec.resolution[1]).map(|j| spec.center(&[0, j])[1]).collect();
    let nearest = centers.iter().map(|c| c.abs()).fold(f64::INFINITY, f64::min);
    let rows: Vec<usize> = (0..centers.len())
        .filter(|&j| centers[j].abs() <= nearest + 1e-12)
        .collect();
    let mut on_rows = Vec::new();
    for &j in &rows {
        for i in 0..spec.resolution[0] {
            let l = labeling.label_at(spec, &[i, j]);
            if l != 0 && !on_rows.contains(&l) {
                on_rows.push(l);
            }
        }
    }
    on_rows.sort_unstable();
    Topology {
        resolution: spec.resolution[0],
        accepted_cells: scan.grid.accepted_count(),
        failed_cells: scan.failures.len(),
        component_count: labeling.component_count(),
        pem_component,
        pem_cell_accepted: spec
            .locate(&pem.as_array())
            .is_some_and(|idx| scan.grid.is_accepted(&idx)),
        separate_theta2_zero_component: on_rows.iter().copied().find(|&l| Some(l) != pem_component),
        theta2_zero_rows: rows,
        theta2_zero_components: on_rows,
    }
}

/// Runs the example. `jobs = None` uses all cores; the result does not
/// depend on it.
pub fn run_repro(opts: &ReproOptions, jobs: Option<usize>) -> Result<ReproOutcome> {
    let (ds, setup, rule) = disconnected_region_fixture::<f64>();
    let spec = GridSpec::square_2d(REPRO_LOWER, REPRO_UPPER, opts.resolution)?;
    let lower = OeTheta::new(REPRO_LOWER[0], REPRO_LOWER[1]);
    let upper = OeTheta::new(REPRO_UPPER[0], REPRO_UPPER[1]);
    let pem = pem_estimate(&ds, &lower, &upper, &PemOptions::default())?;
    let pem_cost = crate::oe::cost(&pem, &ds);
    let stationary = find_stationary_points(&ds, &spec, opts.stationary_starts)?;

    let coarse = scan_fixture(&ds, &setup, &rule, opts.weighting, &spec, jobs)?;
    let labeling = label_components(&coarse.grid, opts.connectivity, Some(&coarse.z1));
    let topo = topology(&coarse, &labeling, &pem);

    let nominal = OeTheta::new(FIXTURE_THETA.0, FIXTURE_THETA.1);
    let nominal_in_bbox = topo
        .pem_component
        .and_then(|l| labeling.component(l))
        .is_some_and(|c| c.bbox.contains(&nominal.as_array(), &spec));

    let refinement = if opts.check_refinement {
        let fine_spec = spec.doubled();
        let fine = scan_fixture(&ds, &setup, &rule, opts.weighting, &fine_spec, jobs)?;
        let fine_labels = label_components(&fine.grid, opts.connectivity, Some(&fine.z1));
        let merged_pairs = refinement_merges(&coarse.grid, &labeling, &fine.grid, &fine_labels, 2)?;
        Some(Refinement {
            fine: topology(&fine, &fine_labels, &pem),
            merged_pairs,
        })
    } else {
        None
    };

    let checks = ReproChecks {
        component_count_at_least_two: topo.component_count >= 2,
        pem_and_theta2_zero_distinct: topo.pem_component.is_some()
            && topo.separate_theta2_zero_component.is_some(),
        stable_under_doubling: refinement.as_ref().map(|r| {
            r.merged_pairs.is_empty()
                && r.fine.component_count >= 2
                && r.fine.pem_component.is_some()
                && r.fine.separate_theta2_zero_component.is_some()
        }),
    };
    let summary = ReproSummary {
        schema_version: SCHEMA_VERSION,
        disclaimer: SCAN_DISCLAIMER.into(),
        weighting: opts.weighting,
        connectivity: opts.connectivity,
        grid: spec,
        nominal_theta: nominal,
        pem_estimate: pem,
        pem_cost,
        nominal_in_pem_component_bbox: nominal_in_bbox,
        stationary_point_near_theta2_zero: stationary
            .iter()
            .any(|p| p.theta.theta2.abs() < 0.05 && p.theta.distance(&pem) > 1e-4),
        stationary_points: stationary,
        topology: topo,
        components: labeling.components.clone(),
        refinement,
        passed: checks.passed(),
        checks,
    };
    Ok(ReproOutcome {
        dataset: ds,
        setup,
        rule,
        scan: coarse,
        labeling,
        summary,
    })
}

/// Writes the fixture, scan outputs, figure and summary into `dir`.
pub fn write_repro(outcome: &ReproOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let data = dir.join("dataset.csv");
    outcome.dataset.write_csv(&data)?;
    written.push(data);
    let setup = dir.join("setup.json");
    std::fs::write(&setup, serialize_setup(&outcome.setup)).map_err(|e| Error::io(&setup, e))?;
    written.push(setup);
    let (csv, json) = export_grid(&outcome.scan.grid, &outcome.labeling, &dir.join("scan"))?;
    written.extend([csv, json]);

    let s = &outcome.summary;
    let mut markers = vec![
        Marker {
            theta: s.nominal_theta.as_array(),
            label: "nominal".into(),
        },
        Marker {
            theta: s.pem_estimate.as_array(),
            label: "pem".into(),
        },
    ];
    markers.extend(
        s.stationary_points
            .iter()
            .filter(|p| p.theta.distance(&s.pem_estimate) > 1e-4)
            .map(|p| Marker {
                theta: p.theta.as_array(),
                label: "stationary".into(),
            }),
    );
    let svg = dir.join("scan.svg");
    std::fs::write(&svg, render_svg(&outcome.scan.grid, &outcome.labeling, &markers)?)
        .map_err(|e| Error::io(&svg, e))?;
    written.push(svg);
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(s).expect("summary serializes") + "\n";
    std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
    written.push(summary);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_run_is_deterministic_and_split() {
        let opts = ReproOptions {
            resolution: 100,
            check_refinement: false,
            ..Default::default()
        };
        let a = run_repro(&opts, Some(1)).unwrap();
        let b = run_repro(&opts, Some(3)).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.scan.grid, b.scan.grid);
        assert!(a.summary.topology.component_count >= 2, "{:?}", a.summary.topology);
    }

    #[test]
    fn both_weightings_split_the_region() {
        for weighting in [WeightingChoice::Identity, WeightingChoice::CovarianceEstimate] {
            let opts = ReproOptions {
                weighting,
                stationary_starts: 5,
                check_refinement: false,
                ..Default::default()
            };
            let s = run_repro(&opts, None).unwrap().summary;
            assert!(s.checks.component_count_at_least_two, "{weighting:?}");
            assert!(s.checks.pem_and_theta2_zero_distinct, "{weighting:?}");
        }
    }

    #[test]
    fn nearest_rows_straddle_zero() {
        let opts = ReproOptions {
            resolution: 40,
            check_refinement: false,
            stationary_starts: 3,
            ..Default::default()
        };
        let out = run_repro(&opts, None).unwrap();
        assert_eq!(out.summary.topology.theta2_zero_rows, vec![19, 20]);
    }

    #[test]
    fn written_files_are_reproducible() {
        let opts = ReproOptions {
            resolution: 60,
            check_refinement: false,
            stationary_starts: 5,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = write_repro(&run_repro(&opts, Some(2)).unwrap(), d1.path()).unwrap();
        write_repro(&run_repro(&opts, Some(1)).unwrap(), d2.path()).unwrap();
        for p in f1 {
            let name = p.file_name().unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(d2.path().join(name)).unwrap(), "{name:?}");
        }
    }
}

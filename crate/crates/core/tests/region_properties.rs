use fsr_core::linreg::test_membership;
use fsr_core::oe::{cost_derivatives, disconnected_region_fixture, sps_z_oe, test_membership_oe};
use fsr_core::perturbation::gen_setup;
use fsr_core::region::{find_stationary_points, label_components, scan, Connectivity, GridSpec};
use fsr_core::types::{deserialize_setup, serialize_setup};
use fsr_core::{Matrix, Method, OeTheta, RankRule, RegressionDataset, WeightingChoice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linreg_problem(seed: u64) -> RegressionDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let x = Matrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
    let y = x
        .tr_matvec(&[0.3, 0.8])
        .unwrap()
        .into_iter()
        .map(|f| f + rng.random_range(-0.4..0.4))
        .collect();
    RegressionDataset::new(x, y).unwrap()
}

#[test]
fn accepted_sets_nest_in_q() {
    for method in [Method::SignFlip, Method::Permute] {
        let ds = linreg_problem(1);
        let setup = gen_setup(method, 8, ds.len(), 17).unwrap();
        let spec = GridSpec::square_2d([-3.0, -3.0], [3.0, 3.0], 48).unwrap();
        let grids: Vec<_> = (1..8)
            .map(|q| {
                let rule = RankRule::new(q, 8).unwrap();
                scan(|t| test_membership(&ds, t, &setup, &rule, WeightingChoice::Identity), &spec, None)
                    .unwrap()
                    .grid
            })
            .collect();
        for w in grids.windows(2) {
            assert!(w[1].accepted.iter().zip(&w[0].accepted).all(|(&fine, &coarse)| !fine || coarse), "{method:?}");
        }
        assert!(grids[0].accepted_count() > grids[6].accepted_count());
    }
}

#[test]
fn scan_from_serialized_setup_is_bit_identical() {
    let ds = linreg_problem(2);
    let setup = gen_setup(Method::SignFlip, 10, ds.len(), 5).unwrap();
    let reloaded = deserialize_setup(serialize_setup(&setup).as_bytes()).unwrap();
    let rule = RankRule::new(2, 10).unwrap();
    let spec = GridSpec::square_2d([-2.0, -2.0], [2.0, 2.0], 40).unwrap();
    let run = |s: &fsr_core::PerturbationSetup, jobs| {
        scan(|t| test_membership(&ds, t, s, &rule, WeightingChoice::Identity), &spec, Some(jobs)).unwrap()
    };
    let a = run(&setup, 1);
    let b = run(&reloaded, 4);
    assert_eq!(a.grid, b.grid);
    assert_eq!(
        a.z1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.z1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn stationary_points_are_accepted() {
    let (ds, setup, rule) = disconnected_region_fixture::<f64>();
    let spec = GridSpec::square_2d([-0.5, -1.0], [2.0, 2.5], 2).unwrap();
    let points = find_stationary_points(&ds, &spec, 15).unwrap();
    assert!(points.len() >= 2, "{points:?}");
    let ones = vec![1.0; ds.len()];
    for p in &points {
        let z1 = sps_z_oe(&p.theta, &ds, &ones, WeightingChoice::Identity).unwrap();
        let g = cost_derivatives(&p.theta, &ds).gradient;
        // Z_1 is the squared gradient norm, so it vanishes with the gradient
        assert!(z1 <= 1e-14 && g[0].hypot(g[1]) < 1e-8, "{p:?}");
        let v = test_membership_oe(&ds, &p.theta, &setup, &rule, WeightingChoice::Identity).unwrap();
        assert!(v.z_values.values()[1] > 0.0);
        assert!(v.accepted, "{p:?}");
    }
}

#[test]
fn fixture_region_is_split_at_full_resolution() {
    let (ds, setup, rule) = disconnected_region_fixture::<f64>();
    let spec = GridSpec::square_2d([0.0, -1.0], [2.0, 1.0], 400).unwrap();
    let r = scan(
        |t| test_membership_oe(&ds, &OeTheta::new(t[0], t[1]), &setup, &rule, WeightingChoice::Identity),
        &spec,
        None,
    )
    .unwrap();
    let l = label_components(&r.grid, Connectivity::Orthogonal, Some(&r.z1));
    assert!(l.component_count() >= 2);
    let near_nominal = spec.locate(&[0.9, -0.1]).unwrap();
    let window = (near_nominal[0] - 10..=near_nominal[0] + 10)
        .flat_map(|i| (near_nominal[1] - 10..=near_nominal[1] + 10).map(move |j| [i, j]));
    assert!(window.into_iter().any(|idx| r.grid.is_accepted(&idx)));
}

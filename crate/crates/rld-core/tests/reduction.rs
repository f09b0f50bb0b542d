//! Network-reduction checks: aggregation weights on trees, rings, and
//! random cycle networks, the locational price decomposition, the
//! certified effective-price form, and the single-generator mapping
//! under nominal shedding.

mod common;

use common::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rld_core::dcopf::{solve_nda_opf, CostModel, FlowDirection};
use rld_core::eval::{brute_force_two_stage, sample_scenarios, DeltaGrid};
use rld_core::network::{
    build_flow_structure, build_flow_structure_with_leading_branch, Branch, Network,
};
use rld_core::rld::{
    gamma_weights, network_rld, pos_part_mean, q_inv, reduce_to_two_bus,
    reduce_to_two_bus_with_form, solve_two_bus_equilibrium, two_bus_recourse_mean,
    DeltaMap, EffectivePriceForm,
};

/// n-bus single-cycle network: branch e runs e -> (e+1) mod n.
fn ring(susceptance: &[f64], caps: &[Option<f64>]) -> Network {
    let n = susceptance.len();
    let branches = (0..n)
        .map(|e| Branch {
            from: e,
            to: (e + 1) % n,
            susceptance: susceptance[e],
            capacity: caps[e],
        })
        .collect();
    Network::new(n, branches).unwrap()
}

#[test]
fn tree_weights_are_side_indicators() {
    // Two buses joined by one branch: the endpoints take it all.
    let branch = Branch { from: 0, to: 1, susceptance: 2.0, capacity: Some(10.0) };
    let net = Network::new(2, vec![branch]).unwrap();
    let fs = build_flow_structure_with_leading_branch(&net, 0).unwrap();
    let fwd = gamma_weights(&net, &fs, 0, FlowDirection::Forward).unwrap();
    assert_eq!((fwd[0], fwd[1]), (1.0, 0.0));
    let rev = gamma_weights(&net, &fs, 0, FlowDirection::Reverse).unwrap();
    assert_eq!((rev[0], rev[1]), (0.0, 1.0));

    // A four-bus path congested in the middle splits into whole sides.
    let branches = vec![
        Branch { from: 0, to: 1, susceptance: 1.0, capacity: None },
        Branch { from: 1, to: 2, susceptance: 0.5, capacity: Some(20.0) },
        Branch { from: 2, to: 3, susceptance: 2.0, capacity: None },
    ];
    let net = Network::new(4, branches).unwrap();
    let fs = build_flow_structure_with_leading_branch(&net, 1).unwrap();
    let gamma = gamma_weights(&net, &fs, 1, FlowDirection::Forward).unwrap();
    let want = [1.0, 1.0, 0.0, 0.0];
    for i in 0..4 {
        assert!((gamma[i] - want[i]).abs() <= 1e-10, "bus {i}: gamma {}", gamma[i]);
    }
}

#[test]
fn ring_weight_splits_by_interior_susceptance() {
    // Equal susceptances put the off-line bus exactly halfway.
    let net = ring(&[1.0, 1.0, 1.0], &[None; 3]);
    let fs = build_flow_structure_with_leading_branch(&net, 0).unwrap();
    let gamma = gamma_weights(&net, &fs, 0, FlowDirection::Forward).unwrap();
    assert!((gamma[0] - 1.0).abs() <= 1e-10);
    assert!(gamma[1].abs() <= 1e-10);
    assert!((gamma[2] - 0.5).abs() <= 1e-10, "gamma2 = {}", gamma[2]);

    // Reversing the congestion swaps the endpoint roles, not the split.
    let rev = gamma_weights(&net, &fs, 0, FlowDirection::Reverse).unwrap();
    assert!(rev[0].abs() <= 1e-10);
    assert!((rev[1] - 1.0).abs() <= 1e-10);
    assert!((rev[2] - 0.5).abs() <= 1e-10);

    // With the congested flow frozen, an injection at the interior bus
    // divides between the endpoints as its connecting susceptances,
    // here b20 : b12 = 3 : 1.
    let net = ring(&[1.0, 1.0, 3.0], &[None; 3]);
    let fs = build_flow_structure_with_leading_branch(&net, 0).unwrap();
    let gamma = gamma_weights(&net, &fs, 0, FlowDirection::Forward).unwrap();
    assert!((gamma[2] - 0.75).abs() <= 1e-10, "gamma2 = {}", gamma[2]);
}

#[test]
fn cycle_networks_decompose_prices_through_unit_interval_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let demand = DVector::from_vec(vec![0.0, 30.0, 40.0, 0.0, 25.0, 35.0]);
    let alpha = DVector::from_vec(vec![0.5, 1.3, 1.3, 1.0, 1.3, 1.3]);
    let costs = CostModel::new(alpha, DVector::from_element(6, 2.0)).unwrap();

    let mut congested_draws = 0;
    for _ in 0..5 {
        let sus: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();

        // The weights depend on topology alone and stay inside [0, 1] on
        // a single-cycle network, whichever branch congests.
        let net = ring(&sus, &[None; 6]);
        for e in 0..6 {
            let fs = build_flow_structure_with_leading_branch(&net, e).unwrap();
            for dir in [FlowDirection::Forward, FlowDirection::Reverse] {
                let gamma = gamma_weights(&net, &fs, e, dir).unwrap();
                for i in 0..6 {
                    assert!(
                        (-1e-12..=1.0 + 1e-12).contains(&gamma[i]),
                        "branch {e} bus {i}: gamma {}",
                        gamma[i]
                    );
                }
            }
        }

        // Derate the busiest branch to four fifths of its free flow and
        // check the price decomposition when exactly one line binds.
        let fs = build_flow_structure(&net, 0).unwrap();
        let free = solve_nda_opf(&net, &fs, &costs, &demand).unwrap();
        let busiest = (0..6)
            .max_by(|&a, &b| free.flows[a].abs().total_cmp(&free.flows[b].abs()))
            .unwrap();
        let mut caps = [None; 6];
        caps[busiest] = Some(0.8 * free.flows[busiest].abs());
        let net = ring(&sus, &caps);
        let fs = build_flow_structure(&net, 0).unwrap();
        let sol = solve_nda_opf(&net, &fs, &costs, &demand).unwrap();
        if sol.congested.len() != 1 {
            continue;
        }
        congested_draws += 1;

        let (e, dir) = sol.congested[0];
        let (u, v) = match dir {
            FlowDirection::Forward => (net.branches()[e].from, net.branches()[e].to),
            FlowDirection::Reverse => (net.branches()[e].to, net.branches()[e].from),
        };
        let fs_lead = build_flow_structure_with_leading_branch(&net, e).unwrap();
        let gamma = gamma_weights(&net, &fs_lead, e, dir).unwrap();
        for i in 0..6 {
            let mixed = sol.bus_duals[u] * gamma[i] + sol.bus_duals[v] * (1.0 - gamma[i]);
            assert!(
                (sol.bus_duals[i] - mixed).abs() <= 1e-6,
                "bus {i}: LMP {} vs decomposition {mixed}",
                sol.bus_duals[i]
            );
        }
    }
    assert!(
        congested_draws >= 3,
        "only {congested_draws} of 5 derated draws congested a single line"
    );
}

/// Frozen solution of the three-bus certification instance, from an
/// independent high-precision solve: the winning form's reduced and
/// per-bus perturbations and the true two-stage cost of each candidate
/// form's dispatch.
const CERT_DELTA_A: (f64, f64) = (-0.49177418, 0.02255382);
const CERT_BUS_DELTA_A: (f64, f64) = (-0.51432800, 0.04510764);
const CERT_COST_A: f64 = 107.63596;
const CERT_COST_B: f64 = 107.96851;

#[test]
fn matrix_inverse_price_form_wins_the_certification_instance() {
    let net = ring(&[1.0, 1.0, 1.0], &[Some(45.0), None, None]);
    let fs = build_flow_structure(&net, 0).unwrap();
    let costs = CostModel::new(
        DVector::from_vec(vec![0.8, 1.4, 0.9]),
        DVector::from_element(3, 1.5),
    )
    .unwrap();
    let forecast = iid_forecast(DVector::from_vec(vec![0.0, 120.0, 0.0]), 1.0);

    let nominal = solve_nda_opf(&net, &fs, &costs, &forecast.d_hat).unwrap();
    let g_ref = [15.0, 0.0, 105.0];
    let lmp_ref = [0.8, 1.0, 0.9];
    for i in 0..3 {
        assert!((nominal.generation[i] - g_ref[i]).abs() <= 1e-6);
        assert!((nominal.bus_duals[i] - lmp_ref[i]).abs() <= 1e-9);
    }
    assert_eq!(nominal.congested, vec![(0, FlowDirection::Forward)]);

    let a = reduce_to_two_bus(&net, &fs, &costs, &forecast, &nominal).unwrap();
    // The winning form reproduces the endpoint locational prices, and
    // gamma = (1, 0, 1/2) aggregates the unit covariance to [[5,1],[1,5]]/4.
    assert!((a.alpha1 - 0.8).abs() <= 1e-12);
    assert!((a.alpha2 - 1.0).abs() <= 1e-12);
    assert!((a.cov[(0, 0)] - 1.25).abs() <= 1e-12);
    assert!((a.cov[(0, 1)] - 0.25).abs() <= 1e-12);
    assert!((a.cov[(1, 1)] - 1.25).abs() <= 1e-12);
    let DeltaMap::TwoGenerators { buses, .. } = &a.delta_map else {
        panic!("expected a two-generator mapping");
    };
    assert_eq!(*buses, (0, 2));

    let eq_a = solve_two_bus_equilibrium(&a).unwrap();
    assert!(
        (eq_a.delta1 - CERT_DELTA_A.0).abs() <= 1e-6
            && (eq_a.delta2 - CERT_DELTA_A.1).abs() <= 1e-6,
        "reduced dispatch ({}, {})",
        eq_a.delta1,
        eq_a.delta2
    );
    let da = a.bus_deltas(3, eq_a.delta1, eq_a.delta2);
    assert!((da[0] - CERT_BUS_DELTA_A.0).abs() <= 1e-6);
    assert_eq!(da[1], 0.0);
    assert!((da[2] - CERT_BUS_DELTA_A.1).abs() <= 1e-6);

    // The rival form prices the split generator off the theorem text and
    // dispatches from there.
    let b = reduce_to_two_bus_with_form(
        &net,
        &fs,
        &costs,
        &forecast,
        &nominal,
        EffectivePriceForm::TheoremText,
    )
    .unwrap();
    assert!((b.alpha1 - 0.8).abs() <= 1e-12);
    assert!((b.alpha2 - 1.4).abs() <= 1e-12);
    let eq_b = solve_two_bus_equilibrium(&b).unwrap();
    let db = b.bus_deltas(3, eq_b.delta1, eq_b.delta2);

    // True two-stage cost of each candidate dispatch, analytic and
    // sampled on common scenarios; the matrix-inverse point must win.
    let true_cost = |d: &DVector<f64>| {
        let stage1 = 0.8 * (15.0 + d[0]) + 0.9 * (105.0 + d[2]);
        let d1 = d[0] + 0.5 * d[2];
        let d2 = 0.5 * d[2];
        stage1 + two_bus_recourse_mean(&a, d1, d2).unwrap()
    };
    let ca = true_cost(&da);
    let cb = true_cost(&db);
    assert!((ca - CERT_COST_A).abs() <= 1e-4, "analytic cost {ca}");
    assert!((cb - CERT_COST_B).abs() <= 1e-4, "analytic cost {cb}");

    let batch = sample_scenarios(&forecast, 31416, 200_000).unwrap();
    let sampled_at = |d: &DVector<f64>| {
        let grid = DeltaGrid {
            buses: vec![0, 2],
            ranges: vec![(d[0], d[0]), (d[2], d[2])],
            step: 0.01,
        };
        brute_force_two_stage(&net, &fs, &costs, &forecast, &grid, &batch)
            .unwrap()
            .best_cost
    };
    let sa = sampled_at(&da);
    let sb = sampled_at(&db);
    assert!((sa - ca).abs() <= 0.03, "sampled {sa} vs analytic {ca}");
    assert!((sb - cb).abs() <= 0.03, "sampled {sb} vs analytic {cb}");
    assert!(sb - sa >= 0.25, "certification margin {}", sb - sa);

    // The sampled optimum also sits at the winner's point.
    let window = DeltaGrid {
        buses: vec![0, 2],
        ranges: vec![(da[0] - 0.3, da[0] + 0.3), (da[2] - 0.3, da[2] + 0.3)],
        step: 0.05,
    };
    let bf = brute_force_two_stage(&net, &fs, &costs, &forecast, &window, &batch).unwrap();
    assert!(!bf.on_boundary);
    assert!((bf.best_delta[0] - da[0]).abs() <= 0.075);
    assert!((bf.best_delta[2] - da[2]).abs() <= 0.075);
}

#[test]
fn single_generator_with_upstream_shedding_prices_only_downstream_risk() {
    // A fixed 60 MW infeed at bus 0 oversupplies the congested side: the
    // nominal optimum dumps 25 MW there, and the only dispatchable
    // generator sits at bus 2 with side weight one half.
    let net = ring(&[1.0, 1.0, 1.0], &[Some(45.0), None, None]);
    let fs = build_flow_structure(&net, 0).unwrap();
    let costs = CostModel::new(
        DVector::from_vec(vec![1.45, 1.45, 0.6]),
        DVector::from_element(3, 1.5),
    )
    .unwrap();
    let forecast = iid_forecast(DVector::from_vec(vec![-60.0, 100.0, 0.0]), 1.0);

    let nominal = solve_nda_opf(&net, &fs, &costs, &forecast.d_hat).unwrap();
    let g_ref = [0.0, 0.0, 65.0];
    // The shedding bus prices at zero; the decomposition still holds.
    let lmp_ref = [0.0, 1.2, 0.6];
    for i in 0..3 {
        assert!((nominal.generation[i] - g_ref[i]).abs() <= 1e-6);
        assert!((nominal.bus_duals[i] - lmp_ref[i]).abs() <= 1e-6);
    }
    assert!((nominal.cost - 39.0).abs() <= 1e-9);
    assert_eq!(nominal.congested, vec![(0, FlowDirection::Forward)]);

    let p = reduce_to_two_bus(&net, &fs, &costs, &forecast, &nominal).unwrap();
    let DeltaMap::SingleGenerator { bus, weight, relief } = &p.delta_map else {
        panic!("expected a single-generator mapping");
    };
    assert_eq!(*bus, 2);
    assert!((weight - 0.5).abs() <= 1e-9);
    assert!(relief.upstream && !relief.downstream);

    // The dump absorbs every upstream deficit inside the clamp box, so
    // the dispatch prices the downstream aggregate alone, delivered at
    // one minus the weight per scheduled MW.
    let dispatch = network_rld(&net, &fs, &costs, &forecast).unwrap();
    let s2 = 1.25f64.sqrt();
    let x = q_inv(0.6 / (1.5 * 0.5)).unwrap();
    let want = s2 * x / 0.5;
    assert!(
        (dispatch.delta[2] - want).abs() <= 1e-9,
        "generator cut {} vs {want}",
        dispatch.delta[2]
    );
    assert_eq!((dispatch.delta[0], dispatch.delta[1]), (0.0, 0.0));
    let want_price = 0.6 * want + 1.5 * s2 * pos_part_mean(x);
    assert!((dispatch.price_of_uncertainty - want_price).abs() <= 1e-9);
    assert!((dispatch.g_star[2] - (65.0 + want)).abs() <= 1e-9);

    // Independent oracle. Per scenario, with dump D at bus 0 and
    // purchases B1, B2 downstream, the binding line forces D + B1 >= K
    // and balance forces B1 + B2 - dumps = T; eliminating the slack
    // leaves a recourse of 1.5 * max(T, (K + T) / 2, 0) with
    // T = sum(z) - 25 - d and K = 25 - z0 + z1.
    let batch = sample_scenarios(&forecast, 2026, 200_000).unwrap();
    let terms: Vec<(f64, f64)> = (0..batch.count)
        .map(|i| {
            let (z0, z1, z2) = (
                batch.z_samples[(i, 0)],
                batch.z_samples[(i, 1)],
                batch.z_samples[(i, 2)],
            );
            (z0 + z1 + z2 - 25.0, 25.0 - z0 + z1)
        })
        .collect();
    let mean_recourse = |d: f64| {
        let acc: f64 = terms
            .iter()
            .map(|&(t0, k)| {
                let t = t0 - d;
                1.5 * t.max(0.5 * (k + t)).max(0.0)
            })
            .sum();
        acc / batch.count as f64
    };
    let mut best = (f64::INFINITY, f64::NAN);
    let steps = ((1.0f64 - -3.2) / 0.01).round() as usize;
    for s in 0..=steps {
        let d = -3.2 + 0.01 * s as f64;
        let cost = 0.6 * d + mean_recourse(d);
        if cost < best.0 {
            best = (cost, d);
        }
    }
    assert!(
        (best.1 - want).abs() <= 0.03,
        "sampled argmin {} vs analytic {want}",
        best.1
    );

    // The hand recourse must agree with the full linear program scenario
    // for scenario, at the dispatch point and at zero reserve.
    let small = sample_scenarios(&forecast, 99, 1200).unwrap();
    for d in [want, 0.0] {
        let grid = DeltaGrid { buses: vec![2], ranges: vec![(d, d)], step: 0.01 };
        let bf = brute_force_two_stage(&net, &fs, &costs, &forecast, &grid, &small).unwrap();
        let acc: f64 = (0..small.count)
            .map(|i| {
                let (z0, z1, z2) = (
                    small.z_samples[(i, 0)],
                    small.z_samples[(i, 1)],
                    small.z_samples[(i, 2)],
                );
                let t = z0 + z1 + z2 - 25.0 - d;
                let k = 25.0 - z0 + z1;
                1.5 * t.max(0.5 * (k + t)).max(0.0)
            })
            .sum();
        let hand = 39.0 + 0.6 * d + acc / small.count as f64;
        assert!(
            (bf.best_cost - hand).abs() <= 1e-6,
            "program cost {} vs hand recourse {hand} at d = {d}",
            bf.best_cost
        );
    }
}

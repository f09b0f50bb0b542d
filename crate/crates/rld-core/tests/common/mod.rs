//! Shared fixtures: the 9-bus benchmark network and small helper grids.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rld_core::dcopf::CostModel;
use rld_core::network::{Branch, Network};
use rld_core::rld::Forecast;

/// Branch list of the 9-bus benchmark: (from, to, reactance, capacity),
/// 0-indexed buses. Susceptance is 1/reactance.
pub const CASE9_BRANCHES: &[(usize, usize, f64, f64)] = &[
    (0, 3, 0.0576, 250.0),
    (3, 4, 0.092, 250.0),
    (4, 5, 0.17, 150.0),
    (2, 5, 0.0586, 300.0),
    (5, 6, 0.1008, 150.0),
    (6, 7, 0.072, 250.0),
    (7, 1, 0.0625, 250.0),
    (7, 8, 0.161, 250.0),
    (8, 3, 0.085, 250.0),
];

/// Reference day-ahead schedule for the 9-bus case (quadratic-cost DC
/// dispatch of the benchmark data, which the uniform-price model adopts).
pub const CASE9_REFERENCE_G: [f64; 3] = [86.572517, 134.357347, 94.070136];

pub fn case9_network() -> Network {
    let branches = CASE9_BRANCHES
        .iter()
        .map(|&(f, t, x, c)| Branch {
            from: f,
            to: t,
            susceptance: 1.0 / x,
            capacity: Some(c),
        })
        .collect();
    Network::new(9, branches).unwrap()
}

/// Same topology with bus-5 load raised to 150 and the 5-6 line derated
/// to 75, which congests exactly that line.
pub fn case9_congested_network() -> Network {
    let branches = CASE9_BRANCHES
        .iter()
        .map(|&(f, t, x, c)| Branch {
            from: f,
            to: t,
            susceptance: 1.0 / x,
            capacity: Some(if (f, t) == (4, 5) { 75.0 } else { c }),
        })
        .collect();
    Network::new(9, branches).unwrap()
}

pub fn case9_demand() -> DVector<f64> {
    DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 90.0, 0.0, 100.0, 0.0, 125.0])
}

pub fn case9_congested_demand() -> DVector<f64> {
    DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 150.0, 0.0, 100.0, 0.0, 125.0])
}

/// Uniform day-ahead price 1, uniform real-time price `beta`.
pub fn case9_costs(beta: f64) -> CostModel {
    CostModel::new(
        DVector::from_element(9, 1.0),
        DVector::from_element(9, beta),
    )
    .unwrap()
}

/// Day-ahead prices that keep exactly two generators marginal in the
/// congested variant: bus 2 is cheapest, bus 1 is priced out. Buses
/// without a generator are priced above every locational price (the
/// congested maximum is about 1.144) so they never dispatch day-ahead.
pub fn case9_congested_costs(beta: f64) -> CostModel {
    let mut alpha = DVector::from_element(9, 1.45);
    alpha[0] = 1.1;
    alpha[1] = 1.2;
    alpha[2] = 0.9;
    CostModel::new(alpha, DVector::from_element(9, beta)).unwrap()
}

pub fn iid_forecast(d_hat: DVector<f64>, sigma_e: f64) -> Forecast {
    let n = d_hat.len();
    Forecast::new(d_hat, sigma_e, DMatrix::identity(n, n)).unwrap()
}

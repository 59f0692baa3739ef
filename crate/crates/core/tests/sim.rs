mod common;

use dcmg_roa_core::certify::{certify_network, CertifyOptions};
use dcmg_roa_core::netmodel::build_dynamics;
use dcmg_roa_core::sim::{
    box_converges, box_vertices, lyapunov_trace, roa_grid_2d, simulate, Classification, Integrator,
    SimOptions,
};
use dcmg_roa_core::steadystate::power_flow;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn one_bus_at(
    u: f64,
) -> (
    dcmg_roa_core::netmodel::SystemMatrices,
    DVector<f64>,
    DVector<f64>,
) {
    let spec = common::one_bus();
    let u = DVector::from_element(1, u);
    let x_e = power_flow(&spec, &u).unwrap().x_vector();
    (build_dynamics(&spec), u, x_e)
}

#[test]
fn certified_setpoint_attracts_every_vertex() {
    let spec = common::one_bus();
    let opts = SimOptions::for_network(&spec);
    assert!(box_converges(&spec, &DVector::from_element(1, 64.8), &opts).unwrap());
    // well below the borderline design the box is not attracted
    assert!(!box_converges(&spec, &DVector::from_element(1, 55.0), &opts).unwrap());
}

#[test]
fn grid_region_contains_the_box() {
    let spec = common::one_bus();
    let opts = SimOptions::for_network(&spec);
    for u in [64.8, 200.0] {
        let (m, u, x_e) = one_bus_at(u);
        let grid = roa_grid_2d(
            &m,
            &m.p_load,
            &u,
            &x_e,
            &spec.halfwidth_vector(),
            21,
            2.0,
            &opts,
        )
        .unwrap();
        assert!(grid.box_inside, "u = {}", u[0]);
        let [conv, _, und] = grid.counts();
        assert_eq!(und, 0);
        assert!(conv > 0);
    }
}

#[test]
fn fixed_step_and_adaptive_integrators_agree() {
    let spec = common::one_bus();
    let (m, u, x_e) = one_bus_at(64.8);
    let x0 = &x_e + DVector::from_vec(vec![15.0, -15.0]);
    let base = SimOptions {
        t_max: 0.02,
        ..SimOptions::for_network(&spec)
    };
    let a = simulate(&m, &m.p_load, &u, &x_e, &x0, &base).unwrap();
    let b = simulate(
        &m,
        &m.p_load,
        &u,
        &x_e,
        &x0,
        &SimOptions {
            integrator: Integrator::Rk4 { step: 1e-6 },
            ..base.clone()
        },
    )
    .unwrap();
    let diff = (a.last() - b.last()).amax();
    assert!(diff < 1e-5, "endpoint difference {diff}");
}

#[test]
fn lyapunov_decreases_from_certified_box() {
    let spec = common::one_bus();
    let (cert, _) = certify_network(&spec, &CertifyOptions::default()).unwrap();
    let (m, u, x_e) = one_bus_at(64.8);
    let p = cert.p_matrix();
    for x0 in box_vertices(&x_e, &spec.halfwidth_vector()) {
        let t = simulate(
            &m,
            &m.p_load,
            &u,
            &x_e,
            &x0,
            &SimOptions::for_network(&spec),
        )
        .unwrap();
        assert_eq!(t.status, Classification::Converged);
        let trace = lyapunov_trace(&t, &p, &x_e);
        assert!(trace.max_forward_difference <= 1e-9);
        assert!(trace.values.last().unwrap() < &trace.values[0]);
    }
}

#[test]
fn deep_sag_collapses() {
    let spec = common::one_bus();
    let (m, u, x_e) = one_bus_at(64.8);
    let x0 = DVector::from_vec(vec![0.0, 5.0]);
    let t = simulate(
        &m,
        &m.p_load,
        &u,
        &x_e,
        &x0,
        &SimOptions::for_network(&spec),
    )
    .unwrap();
    assert_eq!(t.status, Classification::Diverged);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Starting at the equilibrium of any random network stays there.
    #[test]
    fn equilibrium_is_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = common::random_network(&mut rng).working().unwrap();
        let u = DVector::from_element(spec.n_sources(), 120.0 / spec.voltage_scale());
        if let Ok(pt) = power_flow(&spec, &u) {
            let m = build_dynamics(&spec);
            let x_e = pt.x_vector();
            let opts = SimOptions { t_max: 0.05, record: false, ..SimOptions::for_network(&spec) };
            let t = simulate(&m, &m.p_load, &u, &x_e, &x_e, &opts).unwrap();
            prop_assert_eq!(t.status, Classification::Converged);
        }
    }

    /// Vertex enumeration returns 2ⁿ distinct corners of the box.
    #[test]
    fn vertices_are_distinct_corners(n in 1usize..10, w in 0.1f64..5.0) {
        let x = DVector::from_fn(n, |i, _| i as f64);
        let hw = DVector::from_element(n, w);
        let v = box_vertices(&x, &hw);
        prop_assert_eq!(v.len(), 1 << n);
        for p in &v {
            prop_assert!((p - &x).iter().all(|d| (d.abs() - w).abs() < 1e-12));
        }
        for i in 0..v.len() {
            for j in 0..i {
                prop_assert!(v[i] != v[j]);
            }
        }
    }
}

mod common;

use dcmg_roa_core::netmodel::{build_dynamics, parse_network};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `A` splits into a non-positive diagonal and a skew part: the
    /// circuit without CPLs is passive.
    #[test]
    fn state_matrix_is_dissipative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = common::random_network(&mut rng).working().unwrap();
        let m = build_dynamics(&spec);
        let n = m.n();
        prop_assert_eq!(n, spec.n_states());
        prop_assert!(m.d.iter().all(|&d| d > 0.0));
        let diag = m.a_diag();
        let skew = m.a_skew();
        prop_assert!((&diag + &skew - &m.a).amax() <= 1e-12 * m.a.amax());
        prop_assert!((&skew + skew.transpose()).amax() <= 1e-12 * m.a.amax());
        for i in 0..n {
            prop_assert!(diag[(i, i)] <= 0.0);
        }
        let sym = &m.a + m.a.transpose();
        let max_eig = sym.symmetric_eigen().eigenvalues.max();
        prop_assert!(max_eig <= 1e-12 * m.a.amax());
    }

    /// `C1` selects exactly the CPL bus voltages.
    #[test]
    fn load_selector_is_a_coordinate_projection(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = common::random_network(&mut rng).working().unwrap();
        let m = build_dynamics(&spec);
        let c1 = m.c1();
        prop_assert_eq!(c1.nrows(), spec.n_cpl());
        for r in 0..c1.nrows() {
            let row = c1.row(r);
            prop_assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            prop_assert_eq!(row.iter().filter(|&&x| x == 0.0).count(), c1.ncols() - 1);
        }
    }

    /// Serialising and re-parsing a network preserves it and its hash.
    #[test]
    fn json_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = common::random_network(&mut rng);
        let back = parse_network(&serde_json::to_string(&spec).unwrap()).unwrap();
        prop_assert_eq!(back.fingerprint(), spec.fingerprint());
        prop_assert_eq!(back, spec);
    }

    /// Per-unit conversion rescales every voltage bound by the base.
    #[test]
    fn per_unit_bounds_scale(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = common::random_network(&mut rng);
        spec.per_unit = true;
        let pu = spec.working().unwrap();
        let (lo, hi) = spec.voltage_bounds();
        let (plo, phi) = pu.voltage_bounds();
        let vb = spec.base.voltage;
        for k in 0..lo.len() {
            prop_assert!((plo[k] * vb - lo[k]).abs() <= 1e-12 * lo[k].abs().max(1.0));
            prop_assert!((phi[k] * vb - hi[k]).abs() <= 1e-12 * hi[k].abs().max(1.0));
        }
    }
}

//! Certification checked against independent oracles.

mod common;

use approx::assert_relative_eq;
use dcmg_roa_core::certify::{
    certify_network, default_h0, gevp_bisection, lpv_matrix, set_covering, support_inf,
    CertifyOptions,
};
use dcmg_roa_core::netmodel::{build_dynamics, NetworkSpec};
use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Eigenvalues of a real 2×2 matrix as (re, im) pairs.
fn eig2(m: &Matrix2<f64>) -> [(f64, f64); 2] {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        [(tr / 2.0 + s, 0.0), (tr / 2.0 - s, 0.0)]
    } else {
        let s = (-disc).sqrt();
        [(tr / 2.0, s), (tr / 2.0, -s)]
    }
}

fn hurwitz(m: &Matrix2<f64>) -> bool {
    eig2(m).iter().all(|e| e.0 < 0.0)
}

fn has_negative_real_eigenvalue(m: &Matrix2<f64>) -> bool {
    eig2(m).iter().any(|&(re, im)| im == 0.0 && re < 0.0)
}

/// Two Hurwitz 2×2 matrices share a quadratic Lyapunov function iff
/// `A0 A1` and `A0 A1⁻¹` have no negative real eigenvalues.
fn common_lyapunov_exists(a0: &Matrix2<f64>, a1: &Matrix2<f64>) -> bool {
    hurwitz(a0)
        && hurwitz(a1)
        && !has_negative_real_eigenvalue(&(a0 * a1))
        && a1
            .try_inverse()
            .is_some_and(|inv| !has_negative_real_eigenvalue(&(a0 * inv)))
}

/// Largest `h` such that the decay-rate-½ shifted vertex pair at `0` and
/// `h` admits a common Lyapunov function, by bisection.
fn cqlf_threshold(spec: &NetworkSpec) -> f64 {
    let m = build_dynamics(spec);
    let shifted = |h: f64| {
        let a = lpv_matrix(&m, &DVector::from_element(1, h));
        Matrix2::new(a[(0, 0)] + 0.5, a[(0, 1)], a[(1, 0)], a[(1, 1)] + 0.5)
    };
    let a0 = shifted(0.0);
    let ok = |h: f64| common_lyapunov_exists(&a0, &shifted(h));
    let (mut lo, mut hi) = (0.0, 1.0);
    while ok(hi) {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn one_bus_variant(c: f64, ls: f64, rs: f64) -> NetworkSpec {
    let mut s = common::one_bus();
    s.buses[0].capacitance = c;
    s.buses[0].source_inductance = Some(ls);
    s.buses[0].source_resistance = Some(rs);
    s
}

#[test]
fn line_search_matches_two_by_two_common_lyapunov_test() {
    for spec in [
        common::one_bus(),
        one_bus_variant(1e-3, 1e-3, 0.5),
        one_bus_variant(5e-4, 2e-3, 0.5),
        one_bus_variant(2e-4, 1e-3, 0.2),
    ] {
        let m = build_dynamics(&spec);
        let h0 = default_h0(&spec);
        let opts = CertifyOptions::default();
        let g =
            gevp_bisection(&m, &h0, &spec.halfwidth_vector(), &opts.schedule, &opts.tol).unwrap();
        let oracle = cqlf_threshold(&spec);
        let ours = g.beta * h0[0];
        assert!(
            (ours - oracle).abs() <= 0.02 * oracle,
            "beta·h0 {ours} vs oracle {oracle}"
        );
    }
}

#[test]
fn larger_box_never_raises_beta() {
    let mut last_beta = f64::INFINITY;
    let mut last_floor = 0.0;
    for w in [5.0, 10.0, 20.0, 30.0] {
        let (cert, _) = certify_network(
            &common::one_bus_case(w, w, -300.0),
            &CertifyOptions::default(),
        )
        .unwrap();
        assert!(
            cert.beta <= last_beta * (1.0 + 1e-6),
            "box {w}: beta {}",
            cert.beta
        );
        assert!(
            cert.floor[0] >= last_floor - 1e-6,
            "box {w}: floor {}",
            cert.floor[0]
        );
        last_beta = cert.beta;
        last_floor = cert.floor[0];
    }
}

#[derive(Deserialize)]
struct CodesignFixture {
    beta: f64,
    h0: Vec<f64>,
    p: Vec<Vec<f64>>,
}

#[test]
fn codesign_matches_reference_solver() {
    let text = std::fs::read_to_string(common::fixture("one_bus_codesign.json")).unwrap();
    let reference: CodesignFixture = serde_json::from_str(&text).unwrap();
    let (cert, _) = certify_network(&common::one_bus(), &CertifyOptions::default()).unwrap();
    assert_relative_eq!(cert.beta, reference.beta, max_relative = 1e-4);
    assert_relative_eq!(cert.h0[0], reference.h0[0], max_relative = 1e-12);
    for (row, ref_row) in cert.p.iter().zip(&reference.p) {
        for (x, y) in row.iter().zip(ref_row) {
            assert_relative_eq!(*x, *y, max_relative = 1e-4);
        }
    }
}

#[test]
fn per_unit_and_si_agree() {
    let si = common::one_bus();
    let mut pu = si.clone();
    pu.per_unit = true;
    let opts = CertifyOptions::default();
    let (a, _) = certify_network(&si, &opts).unwrap();
    let (b, _) = certify_network(&pu, &opts).unwrap();
    assert_relative_eq!(a.floor_volts()[0], b.floor_volts()[0], max_relative = 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let spec = common::random_network(&mut rng);
        let (mut si, mut pu) = (spec.clone(), spec);
        si.per_unit = false;
        pu.per_unit = true;
        let (Ok((a, _)), Ok((b, _))) = (certify_network(&si, &opts), certify_network(&pu, &opts))
        else {
            continue;
        };
        for (x, y) in a.floor_volts().iter().zip(b.floor_volts()) {
            assert_relative_eq!(*x, y, max_relative = 1e-3);
        }
    }
}

#[test]
fn zero_load_caps_beta() {
    let (cert, _) = certify_network(
        &common::one_bus_case(20.0, 20.0, 0.0),
        &CertifyOptions::default(),
    )
    .unwrap();
    assert!(cert.beta_capped);
    assert_eq!(cert.beta, CertifyOptions::default().schedule.cap);
}

fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

/// `min c·x` over `xᵀPx ≤ 1` through the eigendecomposition of `P`.
fn support_by_eigen(p: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let e = SymmetricEigen::new(p.clone());
    let w = e.eigenvectors.transpose() * c;
    -w.iter()
        .zip(e.eigenvalues.iter())
        .map(|(wi, li)| wi * wi / li)
        .sum::<f64>()
        .sqrt()
}

/// Riemannian gradient descent for `min c·x` on the ellipsoid boundary
/// (tangent-projected gradient, radial retraction) from random starts.
fn support_by_descent(p: &DMatrix<f64>, c: &DVector<f64>, rng: &mut impl Rng) -> f64 {
    let n = c.len();
    let retract = |x: DVector<f64>| {
        let r = x.dot(&(p * &x)).sqrt();
        x / r
    };
    let mut best = f64::INFINITY;
    for _ in 0..20 {
        let mut x = retract(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
        let mut step = 0.1;
        for _ in 0..100_000 {
            let normal = p * &x;
            let g = c - &normal * (c.dot(&normal) / normal.norm_squared());
            if g.norm() < 1e-13 * c.norm() {
                break;
            }
            let next = retract(&x - &g * step);
            if c.dot(&next) < c.dot(&x) {
                x = next;
                step *= 1.5;
            } else {
                step *= 0.5;
                if step < 1e-16 {
                    break;
                }
            }
        }
        best = best.min(c.dot(&x));
    }
    best
}

#[test]
fn support_function_matches_two_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 3, 5, 8] {
        let p = random_spd(&mut rng, n);
        let c1 = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
        let ours = support_inf(&p, &c1).unwrap();
        for k in 0..2 {
            let c = c1.row(k).transpose();
            let eig = support_by_eigen(&p, &c);
            let descent = support_by_descent(&p, &c, &mut rng);
            assert_relative_eq!(ours[k], eig, max_relative = 1e-9);
            assert_relative_eq!(ours[k], descent, max_relative = 1e-6);
        }
    }
}

#[test]
fn set_covering_is_the_worst_vertex() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 2, 5, 8, 12] {
        let p = random_spd(&mut rng, n);
        let hw = DVector::from_fn(n, |_, _| rng.random_range(0.1..3.0));
        let mut worst = f64::NEG_INFINITY;
        for mask in 0..(1usize << n) {
            let x = DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { hw[i] } else { -hw[i] });
            worst = worst.max(x.dot(&(&p * &x)));
        }
        let ours = set_covering(&p, &hw).unwrap();
        assert_relative_eq!(ours, worst, max_relative = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A scaled box is covered by the correspondingly scaled level.
    #[test]
    fn covering_level_is_quadratic_in_box(seed in any::<u64>(), n in 1usize..6, s in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_spd(&mut rng, n);
        let hw = DVector::from_fn(n, |_, _| rng.random_range(0.1..3.0));
        let a = set_covering(&p, &hw).unwrap();
        let b = set_covering(&p, &(&hw * s)).unwrap();
        prop_assert!((b - a * s * s).abs() <= 1e-9 * b);
    }

    /// The support infimum is attained: no sampled boundary point goes lower.
    #[test]
    fn support_is_a_lower_bound(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_spd(&mut rng, n);
        let c1 = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let inf = support_inf(&p, &c1).unwrap()[0];
        for _ in 0..200 {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let x = &x / x.dot(&(&p * &x)).sqrt();
            prop_assert!((&c1 * x)[0] >= inf - 1e-9 * inf.abs().max(1.0));
        }
    }
}

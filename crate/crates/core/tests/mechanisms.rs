mod common;

use common::*;
use ldp_fusion::mechanisms::{Mechanism, OutputSupport};
use ldp_fusion::Mechanism64;
use ldp_fusion::MechanismKind::{self, Laplace, Pm, Sr, Sw};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn draws(m: &Mechanism<f64>, v: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| m.perturb(v, &mut rng).unwrap()).collect()
}

#[test]
fn sr_variance_at_zero() {
    let m = Mechanism64::new(Sr, 1.0).unwrap();
    let want = sr_atom(1.0).powi(2);
    assert!((want - 4.6827).abs() < 1e-4);
    assert!((m.variance(0.0) - want).abs() < 1e-12);
    let (_, var) = mean_var(&draws(&m, 0.0, 1_000_000, 1));
    assert!((var / want - 1.0).abs() < 0.01, "empirical {var}, closed form {want}");
}

#[test]
fn laplace_closed_forms() {
    let m = Mechanism64::new(Laplace, 2.0).unwrap();
    assert!((m.density(0.3, 0.3) - 0.5).abs() < 1e-15);
    assert_eq!(m.variance(-0.7), 2.0);
}

#[test]
fn pm_in_piece_mass_and_density() {
    let eps = 2.0;
    let m = Mechanism64::new(Pm, eps).unwrap();
    let c = pm_c(eps);
    assert!((c - (1f64.exp() + 1.0) / (1f64.exp() - 1.0)).abs() < 1e-12);
    let pieces = pm_pieces(0.0, eps);
    let (l, r, hi) = pieces[1];
    assert!((l + (c - 1.0) / 2.0).abs() < 1e-12 && (r - (c - 1.0) / 2.0).abs() < 1e-12);
    let mass = m.step_density(0.0).unwrap().mass(l, r);
    assert!((mass - (c - 1.0) * hi).abs() < 1e-12);
    for eps in [0.3, 1.0, 4.0] {
        let m = Mechanism64::new(Pm, eps).unwrap();
        let (h, e) = ((eps / 2.0).exp(), eps.exp());
        let p = pm_pieces(0.4, eps)[1];
        let want = (e - h) / (2.0 * (h + 1.0));
        assert!((m.density((p.0 + p.1) / 2.0, 0.4) - want).abs() < 1e-12);
    }
}

#[test]
fn sw_window_at_eps_one() {
    let (b, p, q) = sw_params(1.0);
    let e = 1f64.exp();
    assert!((b - 1.0 / (2.0 * e * (e - 2.0))).abs() < 1e-12);
    assert!((b - 0.256083).abs() < 1e-6);
    let m = Mechanism64::new(Sw, 1.0).unwrap();
    let (mb, mp, mq) = m.sw_params().unwrap();
    assert!((mb - b).abs() < 1e-12 && (mp - p).abs() < 1e-12 && (mq - q).abs() < 1e-12);
    let (mass, _, _) = piece_moments(&sw_pieces(0.5, 1.0));
    assert!((mass - 1.0).abs() < 1e-12);
    let sd = m.step_density(0.5).unwrap();
    assert!((sd.mass(0.5 - b, 0.5 + b) - 2.0 * b * p).abs() < 1e-12);
    assert!((sd.mass(-b, 1.0 + b) - 1.0).abs() < 1e-12);
}

#[test]
fn sw_expectation_at_zero_and_half() {
    let eps = 1.0;
    let (b, p, q) = sw_params(eps);
    let m = Mechanism64::new(Sw, eps).unwrap();
    assert!((m.expectation(0.0) - (q / 2.0 + q * b)).abs() < 1e-12);
    assert!((m.expectation(0.5) - 0.5 * (q + 2.0 * q * b + 2.0 * b * (p - q))).abs() < 1e-12);

    let n = 1_000_000;
    let (mean, _) = mean_var(&draws(&m, 0.0, n, 2));
    let sd = piece_moments(&sw_pieces(0.0, eps)).2.sqrt();
    assert!((mean - (q / 2.0 + q * b)).abs() < 4.0 * sd / (n as f64).sqrt());

    // empirical means at three inputs lie on one line
    let n = 400_000;
    let means: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &u)| mean_var(&draws(&m, u, n, 10 + i as u64)).0)
        .collect();
    let band = 4.0 * 1.5 * piece_moments(&sw_pieces(0.5, eps)).2.sqrt() / (n as f64).sqrt();
    assert!((means[1] - (means[0] + means[2]) / 2.0).abs() < band);
    assert!(means[2] > means[0]);
}

#[test]
fn sw_unbias_monte_carlo() {
    let m = Mechanism64::new(Sw, 1.0).unwrap();
    let n = 1_000_000;
    let est: Vec<f64> = draws(&m, 0.25, n, 3).into_iter().map(|y| m.unbias(y)).collect();
    let (mean, var) = mean_var(&est);
    let want_var = canonical_unbiased_variance(Sw, -0.5, 1.0) / 4.0;
    assert!((m.unbiased_variance(0.25) / want_var - 1.0).abs() < 1e-12);
    assert!((mean - 0.25).abs() < 4.0 * want_var.sqrt() / 1e3);
    assert!((var / want_var - 1.0).abs() < 0.03);
}

#[test]
fn pm_unbiased_at_point_three() {
    for eps in [0.5, 2.0] {
        let m = Mechanism64::new(Pm, eps).unwrap();
        assert_eq!(m.expectation(0.3), 0.3);
        let n = 500_000;
        let (mean, _) = mean_var(&draws(&m, 0.3, n, 4));
        let sd = canonical_unbiased_variance(Pm, 0.3, eps).sqrt();
        assert!((mean - 0.3).abs() < 4.0 * sd / (n as f64).sqrt());
    }
}

#[test]
fn closed_form_variances_match_oracles() {
    for kind in MechanismKind::ALL {
        for eps in [0.1, 0.5, 1.0, 4.0] {
            let m = Mechanism64::new(kind, eps).unwrap();
            for v in [-1.0, -0.8, 0.0, 0.5, 1.0] {
                let want = canonical_unbiased_variance(kind, v, eps);
                let got = m.unbiased_variance_canonical(v);
                assert!((got / want - 1.0).abs() < 1e-9, "{kind} eps={eps} v={v}: {got} vs {want}");
            }
        }
    }
}

fn laplace_mass(m: &Mechanism<f64>, v: f64) -> f64 {
    // Simpson on either side of the kink, out to 60 scales
    let s = m.laplace_scale().unwrap();
    let simpson = |a: f64, b: f64| {
        let k = 20_000;
        let h = (b - a) / k as f64;
        (0..=k)
            .map(|i| {
                let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * m.density(a + i as f64 * h, v)
            })
            .sum::<f64>()
            * h
            / 3.0
    };
    simpson(v - 60.0 * s, v) + simpson(v, v + 60.0 * s)
}

fn oracle_pieces(kind: MechanismKind, v: f64, eps: f64) -> Vec<(f64, f64, f64)> {
    match kind {
        Pm => pm_pieces(v, eps),
        Sw => sw_pieces((v + 1.0) / 2.0, eps),
        _ => unreachable!(),
    }
}

fn kind_strategy() -> impl Strategy<Value = MechanismKind> {
    prop_oneof![Just(Laplace), Just(Sr), Just(Pm), Just(Sw)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ldp_ratio_bound(kind in kind_strategy(), eps in 0.05f64..6.0,
                       v in -1.0f64..=1.0, w in -1.0f64..=1.0, t in 0.0f64..=1.0) {
        let m = Mechanism64::new(kind, eps).unwrap();
        let bound = eps.exp() * (1.0 + 1e-9);
        match m.output_support() {
            OutputSupport::Atoms([a, b]) => {
                for x in [a, b] {
                    let r = m.density_canonical(x, v) / m.density_canonical(x, w);
                    prop_assert!(r <= bound);
                }
            }
            OutputSupport::Interval(lo, hi) => {
                let x = lo + t * (hi - lo);
                let r = m.density_canonical(x, v) / m.density_canonical(x, w);
                prop_assert!(r <= bound, "ratio {r} at x={x}");
            }
            OutputSupport::RealLine => {
                let x = -20.0 + 40.0 * t;
                let r = m.density_canonical(x, v) / m.density_canonical(x, w);
                prop_assert!(r <= bound);
            }
        }
    }

    #[test]
    fn densities_normalised(kind in kind_strategy(), eps in 0.05f64..6.0, v in -1.0f64..=1.0) {
        let m = Mechanism64::new(kind, eps).unwrap();
        let total = match kind {
            Sr => {
                let a = sr_atom(eps);
                m.density(a, v) + m.density(-a, v)
            }
            Laplace => laplace_mass(&m, v),
            _ => oracle_pieces(kind, v, eps)
                .iter()
                .map(|&(a, b, _)| (b - a) * m.density_canonical((a + b) / 2.0, v))
                .sum(),
        };
        prop_assert!((total - 1.0).abs() < 1e-9, "{kind}: {total}");
        if kind == Sr {
            prop_assert!((m.density(sr_atom(eps), v) - sr_plus(v, eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn sw_expectation_affine(eps in 0.05f64..6.0, u in 0.0f64..=1.0) {
        let m = Mechanism64::new(Sw, eps).unwrap();
        let slope = m.expectation_slope();
        prop_assert!(slope > 0.0);
        let direct = piece_moments(&sw_pieces(u, eps)).1;
        prop_assert!((m.expectation(u) - direct).abs() < 1e-9);
        prop_assert!((m.expectation(u) - m.expectation(0.0) - slope * u).abs() < 1e-12);
        prop_assert!((m.unbias(m.expectation(u)) - u).abs() < 1e-9);
    }

    #[test]
    fn piecewise_densities_match_oracle(kind in prop_oneof![Just(Pm), Just(Sw)],
                                        eps in 0.05f64..6.0, v in -1.0f64..=1.0, t in 0.0f64..1.0) {
        let m = Mechanism64::new(kind, eps).unwrap();
        let pieces = oracle_pieces(kind, v, eps);
        let (lo, hi) = (pieces[0].0, pieces[2].1);
        let x = lo + t * (hi - lo);
        // skip points within rounding of a breakpoint
        prop_assume!(pieces.iter().all(|p| (x - p.0).abs() > 1e-9 && (x - p.1).abs() > 1e-9));
        prop_assert!((m.density_canonical(x, v) - piece_density(&pieces, x)).abs() < 1e-12);
    }
}

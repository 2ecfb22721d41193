#![allow(dead_code)]
//! Closed forms and exact piecewise integrals written independently of the
//! library, used as test oracles.

use ldp_fusion::MechanismKind;

pub fn sr_atom(eps: f64) -> f64 {
    (eps.exp() + 1.0) / (eps.exp() - 1.0)
}

pub fn sr_plus(v: f64, eps: f64) -> f64 {
    let e = eps.exp();
    (e - 1.0) / (2.0 * e + 2.0) * v + 0.5
}

pub fn pm_c(eps: f64) -> f64 {
    let h = (eps / 2.0).exp();
    (h + 1.0) / (h - 1.0)
}

/// `(lo, hi, density)` pieces of the PM output density for input `v`.
pub fn pm_pieces(v: f64, eps: f64) -> Vec<(f64, f64, f64)> {
    let c = pm_c(eps);
    let h = (eps / 2.0).exp();
    let e = eps.exp();
    let hi = (e - h) / (2.0 * (h + 1.0));
    let lo = (h - 1.0) / (2.0 * (h + e));
    let l = (c + 1.0) / 2.0 * v - (c - 1.0) / 2.0;
    let r = l + c - 1.0;
    vec![(-c, l, lo), (l, r, hi), (r, c, lo)]
}

pub fn sw_params(eps: f64) -> (f64, f64, f64) {
    let e = eps.exp();
    let b = (eps * e - e + 1.0) / (2.0 * e * (e - eps - 1.0));
    let p = e / (2.0 * b * e + 1.0);
    let q = 1.0 / (2.0 * b * e + 1.0);
    (b, p, q)
}

/// Pieces of the SW output density for native input `u` in `[0, 1]`.
pub fn sw_pieces(u: f64, eps: f64) -> Vec<(f64, f64, f64)> {
    let (b, p, q) = sw_params(eps);
    vec![(-b, u - b, q), (u - b, u + b, p), (u + b, 1.0 + b, q)]
}

/// Total mass, mean and variance of a piecewise-constant density.
pub fn piece_moments(pieces: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for &(a, b, h) in pieces {
        m0 += h * (b - a);
        m1 += h * (b * b - a * a) / 2.0;
        m2 += h * (b.powi(3) - a.powi(3)) / 3.0;
    }
    (m0, m1, m2 - m1 * m1)
}

pub fn piece_density(pieces: &[(f64, f64, f64)], x: f64) -> f64 {
    pieces.iter().find(|&&(a, b, _)| x >= a && x <= b).map_or(0.0, |p| p.2)
}

/// Variance of the unbiased estimate of a canonical value `v` in `[-1, 1]`.
pub fn canonical_unbiased_variance(kind: MechanismKind, v: f64, eps: f64) -> f64 {
    match kind {
        MechanismKind::Laplace => 8.0 / (eps * eps),
        MechanismKind::Sr => sr_atom(eps).powi(2) - v * v,
        MechanismKind::Pm => piece_moments(&pm_pieces(v, eps)).2,
        MechanismKind::Sw => {
            let (b, p, q) = sw_params(eps);
            let slope = 2.0 * b * (p - q);
            // unbiased u is (y - c) / slope; canonical is 2u - 1
            4.0 * piece_moments(&sw_pieces((v + 1.0) / 2.0, eps)).2 / (slope * slope)
        }
    }
}

/// Sample mean and (population) variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

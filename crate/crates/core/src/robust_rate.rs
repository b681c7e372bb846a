//! Nominal and worst-case achievable rate under bounded CSI error.
//!
//! Channels are rows: the effective gain of beam `w` over `h` is `h·w`.

use nalgebra::DVector;

use crate::channel::{CMatrix, CVector, CsiEstimate, C64};
use crate::scenario::{CsiBoundModel, Point2};

/// Per-BS beamforming matrices `W_b` (N×U, column `u` is `w_{b,u}`).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformSet {
    pub w: Vec<CMatrix>,
}

impl BeamformSet {
    pub fn zeros(num_bs: usize, n: usize, u: usize) -> Self {
        BeamformSet { w: vec![CMatrix::zeros(n, u); num_bs] }
    }

    pub fn num_bs(&self) -> usize {
        self.w.len()
    }

    pub fn num_users(&self) -> usize {
        self.w.first().map_or(0, |m| m.ncols())
    }

    /// Σ_b ‖W_b‖_F².
    pub fn total_power(&self) -> f64 {
        self.w.iter().map(|m| m.norm_squared()).sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        BeamformSet { w: self.w.iter().map(|m| m * C64::new(k, 0.0)).collect() }
    }

    /// Stacked `(B·N·U)` view, BS-major then column-major.
    pub fn stacked(&self) -> CVector {
        let mut out = Vec::new();
        for m in &self.w {
            out.extend(m.iter().copied());
        }
        DVector::from_vec(out)
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

fn gain(row: &CVector, w: &CMatrix, col: usize) -> C64 {
    row.iter().zip(w.column(col).iter()).map(|(h, x)| h * x).sum()
}

fn sel(c: &[bool], b: usize) -> f64 {
    if c[b] {
        1.0
    } else {
        0.0
    }
}

/// Per-user SINR over channel rows indexed `b * U + u`.
pub fn sinr(rows: &[CVector], w: &BeamformSet, c: &[bool], noise: f64) -> Vec<f64> {
    let nb = w.num_bs();
    let nu = w.num_users();
    (0..nu)
        .map(|u| {
            let mut signal = 0.0;
            let mut interference = 0.0;
            for b in 0..nb {
                let cb = sel(c, b);
                let row = &rows[b * nu + u];
                signal += cb * gain(row, &w.w[b], u).norm_sqr();
                for up in (0..nu).filter(|&x| x != u) {
                    interference += cb * gain(row, &w.w[b], up).norm_sqr();
                }
            }
            signal / (interference + noise)
        })
        .collect()
}

/// `log2(1 + SINR_u)` on the estimated channels.
pub fn nominal_rate(rows: &[CVector], w: &BeamformSet, c: &[bool], noise: f64) -> Vec<f64> {
    sinr(rows, w, c, noise).into_iter().map(|s| (1.0 + s).log2()).collect()
}

/// `N‖ĥ̃‖² + 2NLε̄`, the gain-only upper bound on `‖Δh‖²`.
pub fn delta_h_bound(est_gains_norm_sq: f64, n: usize, l: usize, eps_bar: f64) -> f64 {
    let n = n as f64;
    n * est_gains_norm_sq + 2.0 * n * l as f64 * eps_bar
}

/// `Σ_n (δ_n‖ĥ̃‖₁ + √L·ε̄)²` with `δ_n = min(2, k‖t_n‖(ε_θ+ε_φ))`.
pub fn angle_aware_bound(est: &CsiEstimate, positions: &[Point2], wavelength: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let l1: f64 = est.gains.iter().map(|g| g.norm()).sum();
    let gain_term = (est.gains.len() as f64).sqrt() * est.eps_gain;
    positions
        .iter()
        .map(|t| {
            let delta = (k * t[0].hypot(t[1]) * (est.eps_theta + est.eps_phi)).min(2.0);
            (delta * l1 + gain_term).powi(2)
        })
        .sum()
}

/// Bound on `‖Δh_{b,u}‖²` under the selected model.
pub fn csi_error_bound(model: CsiBoundModel, est: &CsiEstimate, positions: &[Point2], wavelength: f64) -> f64 {
    match model {
        CsiBoundModel::Verbatim => {
            delta_h_bound(est.gains.norm_squared(), positions.len(), est.gains.len(), est.eps_gain)
        }
        CsiBoundModel::AngleAware => angle_aware_bound(est, positions, wavelength),
    }
}

/// Worst-case numerator `A_u` and the interference part of `B_u`
/// (without noise), so that scaling all beams by `k` scales both by `k²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCaseTerms {
    pub a: f64,
    pub interference: f64,
    pub noise: f64,
}

impl WorstCaseTerms {
    pub fn b(&self) -> f64 {
        self.interference + self.noise
    }

    pub fn ratio(&self) -> f64 {
        self.a / self.b()
    }
}

/// `A_u` and `B_u` per user; `bounds` is indexed `b * U + u`.
pub fn worst_case_terms(rows: &[CVector], w: &BeamformSet, c: &[bool], bounds: &[f64], noise: f64) -> Vec<WorstCaseTerms> {
    let nb = w.num_bs();
    let nu = w.num_users();
    (0..nu)
        .map(|u| {
            let mut a = 0.0;
            let mut interference = 0.0;
            for b in 0..nb {
                let cb = sel(c, b);
                let row = &rows[b * nu + u];
                let bound = bounds[b * nu + u];
                let wb = &w.w[b];
                let s = gain(row, wb, u).norm();
                let e2 = bound * wb.column(u).norm_squared();
                a += cb * cb * s * s - cb * e2 - 2.0 * cb * cb * s * e2.sqrt();
                for up in (0..nu).filter(|&x| x != u) {
                    let s = gain(row, wb, up).norm();
                    let e2 = bound * wb.column(up).norm_squared();
                    interference += cb * cb * s * s + cb * e2 + 2.0 * cb * cb * s * e2.sqrt();
                }
            }
            WorstCaseTerms { a, interference, noise }
        })
        .collect()
}

/// `A_u / B_u ≥ 2^{γ_u} − 1`, boundary-inclusive.
pub fn worst_case_ok(a: f64, b: f64, gamma_u: f64) -> bool {
    a / b >= rate_threshold(gamma_u)
}

pub fn rate_threshold(gamma_u: f64) -> f64 {
    2f64.powf(gamma_u) - 1.0
}

/// Per-user rate diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub nominal: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub ratio: Vec<f64>,
    pub satisfied: Vec<bool>,
}

impl RateReport {
    pub fn evaluate(rows: &[CVector], w: &BeamformSet, c: &[bool], bounds: &[f64], noise: f64, gamma_u: f64) -> Self {
        let nominal = nominal_rate(rows, w, c, noise);
        let terms = worst_case_terms(rows, w, c, bounds, noise);
        let a: Vec<f64> = terms.iter().map(|t| t.a).collect();
        let b: Vec<f64> = terms.iter().map(|t| t.b()).collect();
        let ratio: Vec<f64> = terms.iter().map(|t| t.ratio()).collect();
        let satisfied = terms.iter().map(|t| worst_case_ok(t.a, t.b(), gamma_u)).collect();
        RateReport { nominal, a, b, ratio, satisfied }
    }

    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }

    /// Smallest `C_u − (2^{γ_u} − 1)` over users.
    pub fn min_margin(&self, gamma_u: f64) -> f64 {
        let t = rate_threshold(gamma_u);
        self.ratio.iter().map(|r| r - t).fold(f64::INFINITY, f64::min)
    }
}

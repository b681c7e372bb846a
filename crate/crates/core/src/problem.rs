//! Constraint evaluation for one network instance: worst-case rate per user,
//! HCRLB per sensing receiver, and the layout rules.

use nalgebra::DMatrix;

use crate::channel::{CVector, ChannelSet};
use crate::env::BeamformAction;
use crate::error::{CisacError, Result};
use crate::robust_rate::{csi_error_bound, rate_threshold, worst_case_terms, BeamformSet, RateReport, WorstCaseTerms};
use crate::scenario::{MaLayout, Scenario};
use crate::sensing::{hcrlb_from_ofim, ofim_at, FreqGrid, HcrlbReport};

/// A scenario together with its channel draw.
#[derive(Debug, Clone)]
pub struct Problem {
    pub scenario: Scenario,
    pub channels: ChannelSet,
    pub grid: FreqGrid,
}

/// Outcome of checking an action against every constraint.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub power: f64,
    pub rate: RateReport,
    /// `None` when some receiver's information matrix is singular.
    pub sensing: Option<Vec<HcrlbReport>>,
    pub singular: Option<String>,
    pub layout_ok: bool,
    pub rate_ok: bool,
    pub sensing_ok: bool,
    pub power_ok: bool,
}

impl Evaluation {
    pub fn feasible(&self) -> bool {
        self.layout_ok && self.rate_ok && self.sensing_ok && self.power_ok
    }

    /// Largest `tr(HCRLB_b)`, infinite when singular.
    pub fn max_trace(&self) -> f64 {
        self.sensing.as_ref().map_or(f64::INFINITY, |r| r.iter().map(|x| x.trace).fold(0.0, f64::max))
    }

    pub fn trace_sum(&self) -> f64 {
        self.sensing.as_ref().map_or(f64::INFINITY, |r| r.iter().map(|x| x.trace).sum())
    }
}

/// Unit-scale quantities of a beam direction, from which the constraints
/// at any scale `k` follow without recomputing channels.
#[derive(Debug, Clone)]
pub struct ScaledTerms {
    pub rate: Vec<WorstCaseTerms>,
    pub ofims: Vec<DMatrix<f64>>,
    pub per_bs_power: Vec<f64>,
}

impl Problem {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let channels = ChannelSet::synthesize(&scenario)?;
        let grid = FreqGrid::from_scenario(&scenario)?;
        Ok(Problem { scenario, channels, grid })
    }

    /// Estimated channel rows and their error bounds, both indexed `b * U + u`.
    pub fn rate_inputs(&self, layout: &MaLayout) -> (Vec<CVector>, Vec<f64>) {
        let s = &self.scenario;
        let rows = self.channels.estimated_rows(s, layout);
        let mut bounds = Vec::with_capacity(rows.len());
        for b in 0..s.num_bs() {
            for u in 0..s.num_users() {
                let est = &self.channels.estimate[self.channels.index(b, u)];
                bounds.push(csi_error_bound(s.bound_model, est, &layout.bs[b].tx, s.phys.wavelength));
            }
        }
        (rows, bounds)
    }

    pub fn rate_report(&self, action: &BeamformAction) -> RateReport {
        let (rows, bounds) = self.rate_inputs(&action.layout);
        RateReport::evaluate(&rows, &action.w, &action.c, &bounds, self.scenario.phys.noise_power, self.scenario.rate_target)
    }

    pub fn ofims(&self, layout: &MaLayout, w: &BeamformSet, c: &[bool]) -> Result<Vec<DMatrix<f64>>> {
        (0..self.scenario.num_bs()).map(|b| ofim_at(&self.scenario, layout, w, c, &self.grid, b)).collect()
    }

    pub fn sensing_reports(&self, action: &BeamformAction) -> Result<Vec<HcrlbReport>> {
        self.ofims(&action.layout, &action.w, &action.c)?
            .iter()
            .map(|o| hcrlb_from_ofim(o, self.scenario.sync_std))
            .collect()
    }

    /// Strict check of rate, sensing, layout and per-BS power cap.
    pub fn evaluate(&self, action: &BeamformAction) -> Evaluation {
        let s = &self.scenario;
        let rate = self.rate_report(action);
        let (sensing, singular) = match self.sensing_reports(action) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let sensing_ok = s.sense_target.is_infinite() || sensing.as_ref().is_some_and(|r| r.iter().all(|x| x.trace <= s.sense_target));
        let power_ok = action.w.w.iter().all(|m| m.norm_squared() <= s.action.p_max * (1.0 + 1e-12));
        Evaluation {
            power: action.w.total_power(),
            rate_ok: rate.all_satisfied(),
            rate,
            sensing,
            singular,
            layout_ok: action.layout.is_feasible(s),
            sensing_ok,
            power_ok,
        }
    }

    pub fn scaled_terms(&self, action: &BeamformAction) -> Result<ScaledTerms> {
        let (rows, bounds) = self.rate_inputs(&action.layout);
        let rate = worst_case_terms(&rows, &action.w, &action.c, &bounds, self.scenario.phys.noise_power);
        let ofims = self.ofims(&action.layout, &action.w, &action.c)?;
        let per_bs_power = action.w.w.iter().map(|m| m.norm_squared()).collect();
        Ok(ScaledTerms { rate, ofims, per_bs_power })
    }

    /// Smallest `k²` for which `k·W` meets rate and sensing targets and
    /// stays under the power cap, or `None` if no scale works.
    pub fn minimal_scale_sq(&self, terms: &ScaledTerms) -> Option<f64> {
        let s = &self.scenario;
        let t = rate_threshold(s.rate_target);
        let cap = terms
            .per_bs_power
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| s.action.p_max / p)
            .fold(f64::INFINITY, f64::min);
        if !cap.is_finite() {
            return None;
        }
        let mut need: f64 = 0.0;
        for r in &terms.rate {
            let slope = r.a - t * r.interference;
            if t == 0.0 {
                // k = 0 already meets a zero rate target.
                continue;
            } else if slope > 0.0 {
                need = need.max(t * r.noise / slope);
            } else {
                return None;
            }
        }
        for o in &terms.ofims {
            need = need.max(sensing_scale_sq(o, s.sync_std, s.sense_target, cap)?);
        }
        (need <= cap).then_some(need)
    }
}

/// Smallest `k²` in `(0, cap]` with `tr(HCRLB(k²·O + P)) ≤ target`.
pub fn sensing_scale_sq(ofim: &DMatrix<f64>, sigma_xi: f64, target: f64, cap: f64) -> Option<f64> {
    let trace_at = |k2: f64| hcrlb_from_ofim(&(ofim * k2), sigma_xi).map(|r| r.trace).unwrap_or(f64::INFINITY);
    if target.is_infinite() {
        return Some(0.0);
    }
    if trace_at(cap) > target {
        return None;
    }
    if sigma_xi == 0.0 {
        // Trace scales exactly as 1/k².
        let k2 = trace_at(1.0) / target;
        return (k2 <= cap).then_some(k2.min(cap));
    }
    let (mut lo, mut hi) = (cap * 1e-30, cap);
    if trace_at(lo) <= target {
        return Some(lo);
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if trace_at(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    Some(hi)
}

pub fn ensure_dims(scenario: &Scenario, action: &BeamformAction) -> Result<()> {
    let ok = action.w.num_bs() == scenario.num_bs()
        && action.c.len() == scenario.num_bs()
        && action.w.w.iter().all(|m| m.shape() == (scenario.num_tx(), scenario.num_users()));
    if ok {
        Ok(())
    } else {
        Err(CisacError::Usage("action dimensions do not match the scenario".into()))
    }
}

//! Reference solvers: fixed-position arrays, zero-forcing beams and a
//! cross-entropy random search used as the power-minimization oracle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::channel::{CMatrix, CVector, C64};
use crate::env::{ActionCodec, BeamformAction};
use crate::error::{CisacError, Result};
use crate::problem::{Evaluation, Problem};
use crate::robust_rate::{rate_threshold, BeamformSet};
use crate::scenario::{feasible_grid_layout, MaLayout, Scenario};

/// Best action found by a solver.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub action: BeamformAction,
    pub power: f64,
    pub feasible: bool,
    pub evaluations: usize,
    /// Normalized constraint violation of the returned action; 0 when feasible.
    pub gap: f64,
}

/// Rigid λ/2-pitch grid centered in every region.
pub fn fpa_layout(scenario: &Scenario) -> Result<MaLayout> {
    feasible_grid_layout(scenario)
}

/// Pseudo-inverse beams for one BS: column `u` is the unit-norm ZF direction
/// for row `u` of `rows`, scaled to `powers[u]`.
pub fn zf_beamforming(rows: &[CVector], powers: &[f64]) -> Result<CMatrix> {
    let u = rows.len();
    if u == 0 || powers.len() != u {
        return Err(CisacError::Usage("zero-forcing needs one power per user".into()));
    }
    let n = rows[0].len();
    let h = CMatrix::from_fn(u, n, |i, j| rows[i][j]);
    let sv = h.clone().svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if u > n || !(hi > 0.0) || lo < 1e-10 * hi {
        return Err(CisacError::Domain("stacked channel is rank deficient".into()));
    }
    let gram = &h * h.adjoint();
    let inv = gram.try_inverse().ok_or_else(|| CisacError::Domain("stacked channel is rank deficient".into()))?;
    let mut w = h.adjoint() * inv;
    for (k, mut col) in w.column_iter_mut().enumerate() {
        let norm = col.norm();
        col *= C64::new(powers[k].sqrt() / norm, 0.0);
    }
    Ok(w)
}

/// Normalized violation: rate shortfall relative to `2^γ − 1`, trace excess
/// relative to `γ_b`, plus a unit per layout or singularity failure.
pub fn infeasibility_gap(problem: &Problem, eval: &Evaluation) -> f64 {
    let s = &problem.scenario;
    let t = rate_threshold(s.rate_target);
    let mut gap = 0.0;
    for r in &eval.rate.ratio {
        if t > 0.0 && *r < t {
            gap += ((t - r) / t).min(1.0);
        }
    }
    match &eval.sensing {
        Some(reps) if s.sense_target.is_finite() => {
            for rep in reps {
                if rep.trace > s.sense_target {
                    gap += (rep.trace / s.sense_target).ln();
                }
            }
        }
        Some(_) => {}
        None if s.sense_target.is_finite() => gap += 1e3,
        None => {}
    }
    if !eval.layout_ok {
        gap += 1.0;
    }
    if !eval.power_ok {
        gap += 1.0;
    }
    gap
}

/// Scale `action`'s beams to the least power meeting every constraint,
/// audited at a marginally larger scale. Returns the audited action.
pub fn scale_to_feasible(problem: &Problem, action: &BeamformAction) -> Option<(BeamformAction, Evaluation)> {
    let terms = problem.scaled_terms(action).ok()?;
    let k2 = problem.minimal_scale_sq(&terms)?;
    let k = k2.sqrt() * (1.0 + 1e-9);
    let scaled = BeamformAction { w: action.w.scaled(k), layout: action.layout.clone(), c: action.c.clone() };
    let eval = problem.evaluate(&scaled);
    if eval.feasible() {
        Some((scaled, eval))
    } else {
        // The audit can miss by round-off right at the cap.
        let cap_ok = action.w.w.iter().all(|m| m.norm_squared() * k * k <= problem.scenario.action.p_max);
        if cap_ok {
            let k = k2.sqrt() * (1.0 + 1e-6);
            let scaled = BeamformAction { w: action.w.scaled(k), layout: action.layout.clone(), c: action.c.clone() };
            let eval = problem.evaluate(&scaled);
            if eval.feasible() {
                return Some((scaled, eval));
            }
        }
        None
    }
}

/// Zero-forcing beams with equal per-user power on the fixed grid layout,
/// scaled to the least feasible power.
pub fn zf_fpa(problem: &Problem) -> Result<SolveResult> {
    let s = &problem.scenario;
    let layout = fpa_layout(s)?;
    let rows = problem.channels.estimated_rows(s, &layout);
    let nu = s.num_users();
    let mut w = Vec::with_capacity(s.num_bs());
    for b in 0..s.num_bs() {
        w.push(zf_beamforming(&rows[b * nu..(b + 1) * nu], &vec![1.0; nu])?);
    }
    let unit = BeamformAction { w: BeamformSet { w }, layout, c: vec![true; s.num_bs()] };
    Ok(match scale_to_feasible(problem, &unit) {
        Some((action, eval)) => SolveResult { power: eval.power, action, feasible: true, evaluations: 1, gap: 0.0 },
        None => {
            let capped = unit.w.scaled((s.action.p_max / nu as f64).sqrt());
            let action = BeamformAction { w: capped, ..unit };
            let eval = problem.evaluate(&action);
            SolveResult { power: eval.power, gap: infeasibility_gap(problem, &eval), action, feasible: false, evaluations: 1 }
        }
    })
}

/// Raw action with every BS active on the lattice layout, each user's beam
/// a mix of its zero-forcing direction and the transmit response towards
/// the target projected off the other users' channels.
pub fn structured_start(problem: &Problem, sense_weight: f64) -> Result<Vec<f64>> {
    let s = &problem.scenario;
    let layout = fpa_layout(s)?;
    let rows = problem.channels.estimated_rows(s, &layout);
    let (nb, nu, n) = (s.num_bs(), s.num_users(), s.num_tx());
    let mut w = Vec::with_capacity(nb);
    for b in 0..nb {
        let own = &rows[b * nu..(b + 1) * nu];
        let zf = zf_beamforming(own, &vec![1.0; nu]).unwrap_or_else(|_| CMatrix::zeros(n, nu));
        let ang = crate::channel::bs_target_angles(s.bs_positions[b], s.target);
        let steer = crate::channel::array_response(&layout.bs[b].tx, ang.theta, ang.phi, s.phys.wavelength).map(|z| z.conj());
        let mut wb = CMatrix::zeros(n, nu);
        for u in 0..nu {
            let mut v = steer.clone();
            // Gram-Schmidt against the other users' rows (as conjugated vectors).
            let others: Vec<CVector> = (0..nu).filter(|&x| x != u).map(|x| own[x].map(|z| z.conj())).collect();
            let mut basis: Vec<CVector> = Vec::new();
            for o in others {
                let mut e = o;
                for q in &basis {
                    let proj = q.dotc(&e);
                    e -= q * proj;
                }
                let norm = e.norm();
                if norm > 1e-12 {
                    basis.push(e / C64::new(norm, 0.0));
                }
            }
            for q in &basis {
                let proj = q.dotc(&v);
                v -= q * proj;
            }
            let vn = v.norm();
            let sense = if vn > 0.0 { v / C64::new(vn, 0.0) } else { v };
            let col = zf.column(u).into_owned() * C64::new(1.0 - sense_weight, 0.0) + sense * C64::new(sense_weight, 0.0);
            wb.set_column(u, &col);
        }
        w.push(wb);
    }
    let mut action = BeamformAction { w: BeamformSet { w }, layout, c: vec![true; nb] };
    // Fit the beams inside the raw box.
    let codec = ActionCodec::new(s);
    let peak = action.w.w.iter().flat_map(|m| m.iter()).map(|z| z.re.abs().max(z.im.abs())).fold(0.0, f64::max);
    if peak > 0.0 {
        action.w = action.w.scaled(0.5 * codec.amplitude / peak);
    }
    Ok(codec.encode(&action))
}

/// Cross-entropy search settings.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub budget: usize,
    pub population: usize,
    pub elites: usize,
    pub init_std: f64,
    pub min_std: f64,
    pub smoothing: f64,
    /// Re-center the sampler on the incumbent with the initial spread after
    /// this many candidates. The restart points do not depend on the budget.
    pub restart_every: usize,
    /// Keep antennas on the fixed grid and search beams only.
    pub fixed_layout: bool,
    /// Evaluated first and used as the initial mean. Without one the
    /// search starts from [`structured_start`].
    pub warm_start: Option<Vec<f64>>,
    /// Mix between zero-forcing and target-steered beams in the default start.
    pub sense_weight: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: 10_000,
            population: 32,
            elites: 8,
            init_std: 0.3,
            min_std: 0.02,
            smoothing: 0.7,
            restart_every: usize::MAX,
            fixed_layout: false,
            warm_start: None,
            sense_weight: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
struct Scored {
    index: usize,
    raw: Vec<f64>,
    feasible: bool,
    /// Power when feasible, gap otherwise.
    score: f64,
    result: Option<(BeamformAction, Evaluation)>,
}

fn score_candidate(problem: &Problem, codec: &ActionCodec, fixed: Option<&MaLayout>, index: usize, raw: Vec<f64>) -> Scored {
    let mut action = codec.decode(&raw).expect("candidate has the codec dimension");
    if let Some(l) = fixed {
        action.layout = l.clone();
    }
    match scale_to_feasible(problem, &action) {
        Some((a, e)) => Scored { index, raw, feasible: true, score: e.power, result: Some((a, e)) },
        None => {
            // Rank infeasible directions at the power cap.
            let s = &problem.scenario;
            let peak = action.w.w.iter().map(|m| m.norm_squared()).fold(0.0, f64::max);
            let k = if peak > 0.0 { (s.action.p_max / peak).sqrt() } else { 1.0 };
            let capped = BeamformAction { w: action.w.scaled(k), ..action };
            let e = problem.evaluate(&capped);
            Scored { index, raw, feasible: false, score: infeasibility_gap(problem, &e), result: Some((capped, e)) }
        }
    }
}

fn better(a: &Scored, b: &Scored) -> bool {
    (!a.feasible, a.score, a.index) < (!b.feasible, b.score, b.index)
}

/// Minimize total power over the decode box. Every candidate is scaled to
/// its least feasible power, so the search runs over beam directions,
/// antenna positions and selection bits. The candidate sequence does not
/// depend on `budget`, so the result is nonincreasing in it.
pub fn random_search_minimize<R: Rng + ?Sized>(problem: &Problem, config: &SearchConfig, rng: &mut R) -> Result<SolveResult> {
    if config.budget == 0 || config.population == 0 || config.elites == 0 {
        return Err(CisacError::Usage("search budget, population and elites must be >= 1".into()));
    }
    let codec = ActionCodec::new(&problem.scenario);
    let dim = codec.dim();
    let fixed = if config.fixed_layout { Some(fpa_layout(&problem.scenario)?) } else { None };
    let w0 = match &config.warm_start {
        Some(w0) => w0.clone(),
        None => structured_start(problem, config.sense_weight)?,
    };
    if w0.len() != dim {
        return Err(CisacError::Usage("warm start has the wrong dimension".into()));
    }
    let initial_mean = w0.clone();
    let mut mean = w0.clone();
    let mut std = vec![config.init_std; dim];
    let mut best = Some(score_candidate(problem, &codec, fixed.as_ref(), 0, w0));
    let mut evaluations = 1;

    let restart_every = config.restart_every.max(config.population);
    let mut since_restart = 0;
    while evaluations < config.budget {
        if since_restart >= restart_every {
            mean = match &best {
                Some(b) if b.feasible => b.raw.clone(),
                _ => initial_mean.clone(),
            };
            std = vec![config.init_std; dim];
            since_restart = 0;
        }
        let count = config.population.min(config.budget - evaluations);
        let mut batch = Vec::with_capacity(config.population);
        for i in 0..config.population {
            let raw: Vec<f64> = (0..dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    (mean[j] + std[j] * z).clamp(-1.0, 1.0)
                })
                .collect();
            if i < count {
                batch.push((evaluations + i, raw));
            }
        }
        let mut scored: Vec<Scored> = batch
            .into_par_iter()
            .map(|(idx, raw)| score_candidate(problem, &codec, fixed.as_ref(), idx, raw))
            .collect();
        evaluations += count;
        since_restart += config.population;
        scored.sort_by(|a, b| (!a.feasible, a.score, a.index).partial_cmp(&(!b.feasible, b.score, b.index)).unwrap());
        if let Some(top) = scored.first() {
            if best.as_ref().is_none_or(|b| better(top, b)) {
                best = Some(top.clone());
            }
        }
        // The incumbent always stays in the elite set.
        let mut elites: Vec<Scored> = scored[..config.elites.min(scored.len())].to_vec();
        if let Some(b) = best.as_ref().filter(|b| b.feasible && elites.iter().all(|e| e.index != b.index)) {
            elites.pop();
            elites.insert(0, b.clone());
        }
        let elites = &elites[..];
        for j in 0..dim {
            let m = elites.iter().map(|e| e.raw[j]).sum::<f64>() / elites.len() as f64;
            let v = elites.iter().map(|e| (e.raw[j] - m).powi(2)).sum::<f64>() / elites.len() as f64;
            let a = config.smoothing;
            mean[j] = a * m + (1.0 - a) * mean[j];
            std[j] = (a * v.sqrt() + (1.0 - a) * std[j]).max(config.min_std);
        }
    }

    let best = best.expect("at least one candidate was scored");
    let (action, eval) = best.result.expect("scored candidates carry their action");
    Ok(SolveResult {
        power: eval.power,
        feasible: best.feasible,
        gap: if best.feasible { 0.0 } else { best.score },
        action,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, ScenarioConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cvec(rng: &mut ChaCha8Rng, n: usize) -> CVector {
        CVector::from_fn(n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn fpa_is_fixed_half_wavelength_grid() {
        let s = build_scenario(&ScenarioConfig::default()).unwrap();
        let a = fpa_layout(&s).unwrap();
        assert_eq!(a, fpa_layout(&s).unwrap());
        assert_eq!(a.bs[0].tx.len(), 8);
        assert!((crate::scenario::min_pairwise_distance(&a.bs[0].tx) - s.min_spacing).abs() < 1e-12);
    }

    #[test]
    fn zf_single_user_is_matched_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = cvec(&mut rng, 4);
        let w = zf_beamforming(std::slice::from_ref(&h), &[2.0]).unwrap();
        let mf = h.map(|z| z.conj()) * C64::new(2f64.sqrt() / h.norm(), 0.0);
        assert!((w.column(0) - mf).norm() < 1e-12);
    }

    #[test]
    fn zf_orthonormal_rows() {
        let rows = vec![
            CVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]),
            CVector::from_vec(vec![C64::new(0.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, 0.0)]),
        ];
        let w = zf_beamforming(&rows, &[1.0, 1.0]).unwrap();
        for u in 0..2 {
            let expect = rows[u].map(|z| z.conj());
            assert!((w.column(u) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn zf_suppresses_interference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let rows: Vec<CVector> = (0..3).map(|_| cvec(&mut rng, 5)).collect();
            let w = zf_beamforming(&rows, &[1.0, 0.5, 2.0]).unwrap();
            for u in 0..3 {
                let sig: C64 = rows[u].iter().zip(w.column(u).iter()).map(|(a, b)| a * b).sum();
                for v in (0..3).filter(|&v| v != u) {
                    let leak: C64 = rows[v].iter().zip(w.column(u).iter()).map(|(a, b)| a * b).sum();
                    assert!(leak.norm_sqr() / sig.norm_sqr() < 1e-10);
                }
            }
        }
        let h = cvec(&mut rng, 3);
        let same = vec![h.clone(), h];
        assert!(zf_beamforming(&same, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn vacuous_constraints_give_zero_power() {
        let mut cfg = ScenarioConfig::toy();
        cfg.targets.rate = 0.0;
        cfg.targets.sensing = f64::INFINITY;
        let p = Problem::new(build_scenario(&cfg).unwrap()).unwrap();
        let cfg = SearchConfig { budget: 64, ..SearchConfig::default() };
        let r = random_search_minimize(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.feasible);
        assert_eq!(r.power, 0.0);
    }

    #[test]
    fn budget_one_is_deterministic_and_budget_monotone() {
        let p = Problem::new(build_scenario(&ScenarioConfig::toy()).unwrap()).unwrap();
        let one = SearchConfig { budget: 1, ..SearchConfig::default() };
        let a = random_search_minimize(&p, &one, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_search_minimize(&p, &one, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.evaluations, 1);
        assert_eq!((a.power, a.feasible), (b.power, b.feasible));
        let mut last = (false, f64::INFINITY);
        for budget in [1, 10, 64, 100, 300] {
            let cfg = SearchConfig { budget, ..SearchConfig::default() };
            let r = random_search_minimize(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(r.evaluations, budget);
            if last.0 {
                assert!(r.feasible && r.power <= last.1);
            }
            if r.feasible {
                last = (true, r.power);
            }
        }
    }

    #[test]
    fn feasible_results_pass_the_audit() {
        let p = Problem::new(build_scenario(&ScenarioConfig::toy()).unwrap()).unwrap();
        let cfg = SearchConfig { budget: 256, ..SearchConfig::default() };
        let r = random_search_minimize(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(r.feasible);
        assert!(p.evaluate(&r.action).feasible());
        let z = zf_fpa(&p).unwrap();
        if z.feasible {
            assert!(p.evaluate(&z.action).feasible());
        }
    }

    #[test]
    fn search_never_worse_than_its_warm_start() {
        let p = Problem::new(build_scenario(&ScenarioConfig::desk()).unwrap()).unwrap();
        let v = structured_start(&p, 0.7).unwrap();
        let start = crate::env::ActionCodec::new(&p.scenario).decode(&v).unwrap();
        let (_, witness) = scale_to_feasible(&p, &start).expect("structured start scales to feasibility");
        let cfg = SearchConfig { budget: 100, warm_start: Some(v), ..SearchConfig::default() };
        let r = random_search_minimize(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(r.feasible);
        assert!(r.power <= witness.power, "{} > {}", r.power, witness.power);
    }
}

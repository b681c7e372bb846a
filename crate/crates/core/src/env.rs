//! Constrained MDP wrapper: action coding, reward and cost signals and the
//! episode loop over a static channel realization.

use std::io::Write;

use crate::channel::{synth_sense_channel, C64};
use crate::error::{CisacError, Result};
use crate::problem::{ensure_dims, Evaluation, Problem};
use crate::robust_rate::{rate_threshold, BeamformSet};
use crate::scenario::{distance2, feasible_grid_layout, lattice_points, min_pairwise_distance, spacing_ok, BsLayout, MaLayout, Point2, Region, Scenario};

/// Beamformers, antenna positions and per-BS selection bits.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformAction {
    pub w: BeamformSet,
    pub layout: MaLayout,
    pub c: Vec<bool>,
}

/// Number of candidate directions tried around each conflicting antenna.
const REPAIR_DIRECTIONS: usize = 64;

/// Move antennas one at a time to the nearest point at least `d` from every
/// antenna already placed. Falls back to the lattice layout when the greedy
/// pass gets stuck; the flag reports that case.
pub fn repair_positions(points: &[Point2], region: &Region, d: f64, nx: usize, ny: usize) -> (Vec<Point2>, bool) {
    let far_enough = |p: Point2, placed: &[Point2]| placed.iter().all(|&q| distance2(p, q) >= d);
    let mut placed: Vec<Point2> = Vec::with_capacity(points.len());
    for &raw in points {
        let p = region.clamp(raw);
        if far_enough(p, &placed) {
            placed.push(p);
            continue;
        }
        let r = d * (1.0 + 1e-9);
        let mut best: Option<(f64, Point2)> = None;
        for &q in &placed {
            let dist = distance2(p, q);
            let mut cands = Vec::with_capacity(REPAIR_DIRECTIONS + 1);
            if dist > 0.0 {
                cands.push([q[0] + (p[0] - q[0]) / dist * r, q[1] + (p[1] - q[1]) / dist * r]);
            }
            for k in 0..REPAIR_DIRECTIONS {
                let a = 2.0 * std::f64::consts::PI * k as f64 / REPAIR_DIRECTIONS as f64;
                cands.push([q[0] + r * a.cos(), q[1] + r * a.sin()]);
            }
            for cand in cands {
                let cand = region.clamp(cand);
                if !far_enough(cand, &placed) {
                    continue;
                }
                let shift = distance2(cand, p);
                if best.is_none_or(|(s, _)| shift < s) {
                    best = Some((shift, cand));
                }
            }
        }
        match best {
            Some((_, cand)) => placed.push(cand),
            None => {
                let grid = lattice_points(region, points.len(), nx, ny, d).expect("region capacity is checked at scenario build");
                return (grid, true);
            }
        }
    }
    (placed, false)
}

/// Maps between the flat `[-1, 1]^d` action box and [`BeamformAction`].
///
/// Per BS the raw vector holds `Re(W)` and `Im(W)` (column-major, N·U each),
/// then `x, y` of every transmit antenna, then of every receive antenna,
/// then one selection gate.
#[derive(Debug, Clone)]
pub struct ActionCodec {
    pub num_bs: usize,
    pub n: usize,
    pub m: usize,
    pub u: usize,
    pub amplitude: f64,
    pub p_max: f64,
    pub repair: bool,
    scenario: Scenario,
}

impl ActionCodec {
    pub fn new(scenario: &Scenario) -> Self {
        let (n, u) = (scenario.num_tx(), scenario.num_users());
        ActionCodec {
            num_bs: scenario.num_bs(),
            n,
            m: scenario.num_rx(),
            u,
            amplitude: (scenario.action.p_max / (n * u) as f64).sqrt(),
            p_max: scenario.action.p_max,
            repair: scenario.action.repair,
            scenario: scenario.clone(),
        }
    }

    pub fn per_bs(&self) -> usize {
        2 * self.n * self.u + 2 * self.n + 2 * self.m + 1
    }

    pub fn dim(&self) -> usize {
        self.num_bs * self.per_bs()
    }

    /// Offset of BS `b`'s gate in the raw vector.
    pub fn gate_index(&self, b: usize) -> usize {
        (b + 1) * self.per_bs() - 1
    }

    fn map_positions(raw: &[f64], region: &Region) -> Vec<Point2> {
        let c = region.center();
        raw.chunks(2)
            .map(|xy| [c[0] + xy[0].clamp(-1.0, 1.0) * 0.5 * region.width(), c[1] + xy[1].clamp(-1.0, 1.0) * 0.5 * region.height()])
            .collect()
    }

    fn unmap_positions(points: &[Point2], region: &Region, out: &mut Vec<f64>) {
        let c = region.center();
        for p in points {
            out.push(((p[0] - c[0]) / (0.5 * region.width())).clamp(-1.0, 1.0));
            out.push(((p[1] - c[1]) / (0.5 * region.height())).clamp(-1.0, 1.0));
        }
    }

    /// Total function from the box to actions; the layout satisfies the
    /// region and spacing rules whenever repair is enabled.
    pub fn decode(&self, raw: &[f64]) -> Result<BeamformAction> {
        if raw.len() != self.dim() {
            return Err(CisacError::Usage(format!("action has {} entries, expected {}", raw.len(), self.dim())));
        }
        let s = &self.scenario;
        let (n, u, m) = (self.n, self.u, self.m);
        let mut w = Vec::with_capacity(self.num_bs);
        let mut layout = Vec::with_capacity(self.num_bs);
        let mut c = Vec::with_capacity(self.num_bs);
        for chunk in raw.chunks(self.per_bs()) {
            let nu = n * u;
            let gate = chunk[self.per_bs() - 1] >= 0.0;
            let mut wb = crate::channel::CMatrix::from_fn(n, u, |i, j| {
                let k = j * n + i;
                C64::new(chunk[k].clamp(-1.0, 1.0), chunk[nu + k].clamp(-1.0, 1.0)) * self.amplitude
            });
            let p = wb.norm_squared();
            if p > self.p_max {
                wb *= C64::new((self.p_max / p).sqrt(), 0.0);
            }
            if !gate {
                wb.fill(C64::new(0.0, 0.0));
            }
            let tx_raw = &chunk[2 * nu..2 * nu + 2 * n];
            let rx_raw = &chunk[2 * nu + 2 * n..2 * nu + 2 * n + 2 * m];
            let mut tx = Self::map_positions(tx_raw, &s.tx_region);
            let mut rx = Self::map_positions(rx_raw, &s.rx_region);
            if self.repair {
                tx = repair_positions(&tx, &s.tx_region, s.min_spacing, s.n_x, s.n_y).0;
                rx = repair_positions(&rx, &s.rx_region, s.min_spacing, s.m_x, s.m_y).0;
            }
            w.push(wb);
            layout.push(BsLayout { tx, rx });
            c.push(gate);
        }
        let action = BeamformAction { w: BeamformSet { w }, layout: MaLayout { bs: layout }, c };
        if self.repair {
            assert!(action.layout.is_feasible(s), "repaired layout must be feasible");
        }
        Ok(action)
    }

    /// Inverse of [`decode`](Self::decode) for actions inside the box.
    pub fn encode(&self, action: &BeamformAction) -> Vec<f64> {
        let s = &self.scenario;
        let mut out = Vec::with_capacity(self.dim());
        for b in 0..self.num_bs {
            let wb = &action.w.w[b];
            out.extend(wb.iter().map(|z| (z.re / self.amplitude).clamp(-1.0, 1.0)));
            out.extend(wb.iter().map(|z| (z.im / self.amplitude).clamp(-1.0, 1.0)));
            Self::unmap_positions(&action.layout.bs[b].tx, &s.tx_region, &mut out);
            Self::unmap_positions(&action.layout.bs[b].rx, &s.rx_region, &mut out);
            out.push(if action.c[b] { 1.0 } else { -1.0 });
        }
        out
    }
}

/// Flattened real view of the estimated channels seen by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
}

impl EnvState {
    /// Values divided by the largest magnitude, for network input.
    pub fn features(&self) -> Vec<f64> {
        let peak = self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak == 0.0 {
            return self.values.clone();
        }
        self.values.iter().map(|v| v / peak).collect()
    }
}

/// Per-step signals and diagnostics.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub cost: f64,
    pub next_state: EnvState,
    pub done: bool,
    pub power: f64,
    pub rate_margin: f64,
    pub hcrlb_trace: f64,
    pub singular: bool,
    pub feasible: bool,
}

/// Components of the per-step cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub trace_sum: f64,
    pub ratio_sum: f64,
    pub spacing_sum: f64,
    pub singular: bool,
    pub total: f64,
}

/// Per-step threshold `γ_b + 2^{γ_u} − 1 + 2D`.
pub fn eta_c(gamma_b: f64, gamma_u: f64, d: f64) -> f64 {
    gamma_b + rate_threshold(gamma_u) + 2.0 * d
}

/// Network threshold: one sensing and two spacing terms per BS, one rate term per user.
pub fn network_eta_c(scenario: &Scenario) -> f64 {
    let b = scenario.num_bs() as f64;
    let u = scenario.num_users() as f64;
    b * (scenario.sense_target + 2.0 * scenario.min_spacing) + u * rate_threshold(scenario.rate_target)
}

/// `Γ_c = Σ_{n<horizon} −γⁿ·η_c`.
pub fn threshold_from_eta(eta: f64, horizon: usize, discount: f64) -> f64 {
    let mut g = 0.0;
    let mut w = 1.0;
    for _ in 0..horizon {
        g -= w * eta;
        w *= discount;
    }
    g
}

pub fn threshold_gamma_c(gamma_b: f64, gamma_u: f64, d: f64, horizon: usize, discount: f64) -> Result<f64> {
    if horizon == 0 {
        return Err(CisacError::Usage("horizon must be >= 1".into()));
    }
    Ok(threshold_from_eta(eta_c(gamma_b, gamma_u, d), horizon, discount))
}

fn spacing_term(points: &[Point2], d: f64) -> f64 {
    if points.len() < 2 {
        d
    } else {
        min_pairwise_distance(points)
    }
}

/// Episode environment over one scenario and channel draw.
#[derive(Debug, Clone)]
pub struct CisacEnv {
    pub problem: Problem,
    pub codec: ActionCodec,
    state: EnvState,
    step_index: usize,
    horizon: usize,
}

impl CisacEnv {
    pub fn new(problem: Problem) -> Result<Self> {
        let codec = ActionCodec::new(&problem.scenario);
        let state = Self::observe(&problem)?;
        let horizon = problem.scenario.action.horizon;
        Ok(CisacEnv { problem, codec, state, step_index: 0, horizon })
    }

    pub fn from_scenario(scenario: Scenario) -> Result<Self> {
        Self::new(Problem::new(scenario)?)
    }

    fn observe(problem: &Problem) -> Result<EnvState> {
        let s = &problem.scenario;
        let layout = feasible_grid_layout(s)?;
        let mut values = Vec::new();
        for row in problem.channels.estimated_rows(s, &layout) {
            values.extend(row.iter().map(|z| z.re));
            values.extend(row.iter().map(|z| z.im));
        }
        for tx in 0..s.num_bs() {
            for rx in 0..s.num_bs() {
                let h = synth_sense_channel(s, &layout, tx, rx)?.h;
                values.extend(h.iter().map(|z| z.re));
                values.extend(h.iter().map(|z| z.im));
            }
        }
        Ok(EnvState { values })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.problem.scenario
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn set_horizon(&mut self, horizon: usize) {
        self.horizon = horizon.max(1);
    }

    pub fn state_dim(&self) -> usize {
        self.state.values.len()
    }

    pub fn action_dim(&self) -> usize {
        self.codec.dim()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reset(&mut self) -> EnvState {
        self.step_index = 0;
        self.state.clone()
    }

    pub fn decode(&self, raw: &[f64]) -> Result<BeamformAction> {
        self.codec.decode(raw)
    }

    /// `−Σ‖W_b‖²` minus the selection and region penalties.
    pub fn reward(&self, action: &BeamformAction) -> f64 {
        let s = self.scenario();
        let a = &s.action;
        let mut r = -action.w.total_power();
        for b in 0..s.num_bs() {
            // Every user of BS b shares its bit, so c_{b,u} = c_b always holds.
            if a.literal_selection_penalty {
                r -= a.selection_penalty * s.num_users() as f64;
            }
            let l = &action.layout.bs[b];
            let tx_bad = !(l.tx.iter().all(|&p| s.tx_region.contains(p)) && spacing_ok(&l.tx, s.min_spacing));
            let rx_bad = !(l.rx.iter().all(|&p| s.rx_region.contains(p)) && spacing_ok(&l.rx, s.min_spacing));
            if tx_bad {
                r -= a.tx_region_penalty;
            }
            if rx_bad {
                r -= a.rx_region_penalty;
            }
        }
        r
    }

    /// `Σ_b tr(HCRLB_b) − Σ_u C_u − Σ_b (min spacing of t̃_b and r̃_b)`.
    pub fn cost_terms(&self, action: &BeamformAction, eval: &Evaluation) -> CostTerms {
        let s = self.scenario();
        let ratio_sum: f64 = eval.rate.ratio.iter().sum();
        let spacing_sum: f64 = action
            .layout
            .bs
            .iter()
            .map(|l| spacing_term(&l.tx, s.min_spacing) + spacing_term(&l.rx, s.min_spacing))
            .sum();
        match &eval.sensing {
            Some(r) => {
                let trace_sum: f64 = r.iter().map(|x| x.trace).sum();
                CostTerms { trace_sum, ratio_sum, spacing_sum, singular: false, total: trace_sum - ratio_sum - spacing_sum }
            }
            None => CostTerms { trace_sum: f64::INFINITY, ratio_sum, spacing_sum, singular: true, total: s.action.cost_ceiling },
        }
    }

    pub fn cost(&self, action: &BeamformAction) -> f64 {
        self.cost_terms(action, &self.problem.evaluate(action)).total
    }

    pub fn step(&mut self, action: &BeamformAction) -> Result<StepOutcome> {
        if self.step_index >= self.horizon {
            return Err(CisacError::Usage("step called after the episode ended".into()));
        }
        ensure_dims(self.scenario(), action)?;
        self.step_index += 1;
        let eval = self.problem.evaluate(action);
        let terms = self.cost_terms(action, &eval);
        Ok(StepOutcome {
            reward: self.reward(action),
            cost: terms.total,
            next_state: self.state.clone(),
            done: self.step_index >= self.horizon,
            power: eval.power,
            rate_margin: eval.rate.min_margin(self.scenario().rate_target),
            hcrlb_trace: eval.max_trace(),
            singular: terms.singular,
            feasible: eval.feasible(),
        })
    }

    pub fn step_raw(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        let action = self.decode(raw)?;
        self.step(&action)
    }
}

/// Streams per-step rows `n,reward,cost,power,rate_margin,hcrlb_trace,feasible`.
pub struct EpisodeTrace<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> EpisodeTrace<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["n", "reward", "cost", "power", "rate_margin", "hcrlb_trace", "feasible"])?;
        Ok(EpisodeTrace { writer })
    }

    pub fn record(&mut self, n: usize, o: &StepOutcome) -> Result<()> {
        self.writer.write_record([
            n.to_string(),
            format!("{:e}", o.reward),
            format!("{:e}", o.cost),
            format!("{:e}", o.power),
            format!("{:e}", o.rate_margin),
            format!("{:e}", o.hcrlb_trace),
            o.feasible.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, ScenarioConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_env() -> CisacEnv {
        CisacEnv::from_scenario(build_scenario(&ScenarioConfig::toy()).unwrap()).unwrap()
    }

    #[test]
    fn zero_action_decodes_to_centered_feasible_layout() {
        let env = toy_env();
        let a = env.decode(&vec![0.0; env.action_dim()]).unwrap();
        assert_eq!(a.w.total_power(), 0.0);
        assert!(a.c.iter().all(|&c| c));
        assert!(a.layout.is_feasible(env.scenario()));
        let s = env.scenario();
        // The first antenna stays at the center; the rest move the minimum distance.
        assert_eq!(a.layout.bs[0].tx[0], s.tx_region.center());
        assert!((distance2(a.layout.bs[0].tx[1], s.tx_region.center()) - s.min_spacing).abs() < 1e-6 * s.min_spacing);
    }

    #[test]
    fn corner_action_is_repaired() {
        let env = toy_env();
        let a = env.decode(&vec![1.0; env.action_dim()]).unwrap();
        let s = env.scenario();
        assert_eq!(a.layout.bs[0].tx[0], [s.tx_region.x_max, s.tx_region.y_max]);
        assert!(a.layout.is_feasible(s));
        assert!(a.w.w[0].norm_squared() <= s.action.p_max * (1.0 + 1e-12));
    }

    #[test]
    fn decode_is_idempotent() {
        let s = build_scenario(&ScenarioConfig::desk()).unwrap();
        let env = CisacEnv::from_scenario(s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..env.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = env.decode(&raw).unwrap();
            let b = env.decode(&env.codec.encode(&a)).unwrap();
            assert_eq!(a.c, b.c);
            assert!((&a.w.stacked() - &b.w.stacked()).norm() <= 1e-12 * a.w.stacked().norm().max(1e-300));
            for (x, y) in a.layout.bs.iter().zip(&b.layout.bs) {
                for (p, q) in x.tx.iter().chain(&x.rx).zip(y.tx.iter().chain(&y.rx)) {
                    assert!(distance2(*p, *q) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn repair_fallback_is_feasible() {
        let region = Region::symmetric(0.05);
        let pts = vec![[0.0, 0.0]; 9];
        let (out, _) = repair_positions(&pts, &region, 0.05, 3, 3);
        assert!(spacing_ok(&out, 0.05));
        assert!(out.iter().all(|&p| region.contains(p)));
    }

    #[test]
    fn reward_cases() {
        let mut env = toy_env();
        let s = env.scenario().clone();
        let mut a = env.decode(&vec![0.0; env.action_dim()]).unwrap();
        assert_eq!(env.reward(&a), 0.0);
        a.w.w[0][(0, 0)] = C64::new(1.0, 0.0);
        a.w.w[0][(1, 0)] = C64::new(0.0, 1.0);
        assert!((env.reward(&a) + 2.0).abs() < 1e-15);

        let mut cfg = ScenarioConfig::toy();
        cfg.action.repair = false;
        env = CisacEnv::from_scenario(build_scenario(&cfg).unwrap()).unwrap();
        let mut raw = vec![0.0; env.action_dim()];
        raw[0] = 0.5;
        let a = env.decode(&raw).unwrap();
        let power = a.w.total_power();
        assert!(!a.layout.is_feasible(env.scenario()));
        let expect = -power - s.action.tx_region_penalty - s.action.rx_region_penalty;
        assert!((env.reward(&a) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_beams_hit_the_cost_ceiling() {
        let env = toy_env();
        let a = env.decode(&vec![0.0; env.action_dim()]).unwrap();
        assert_eq!(env.cost(&a), env.scenario().action.cost_ceiling);
    }

    #[test]
    fn threshold_cases() {
        assert_eq!(threshold_from_eta(1.0, 5, 0.0), -1.0);
        assert!((eta_c(0.05, 2.0, 0.05) - 3.15).abs() < 1e-12);
        let a = threshold_gamma_c(0.05, 2.0, 0.05, 10, 0.0).unwrap();
        let b = threshold_gamma_c(0.05, 2.0, 0.05, 20, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(threshold_gamma_c(0.05, 2.0, 0.05, 0, 0.5).is_err());
        let g = threshold_gamma_c(0.05, 2.0, 0.05, 200, 0.5).unwrap();
        assert!((g + 3.15 * (1.0 - 0.5f64.powi(200)) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn episode_contract() {
        let mut env = toy_env();
        env.set_horizon(3);
        let s0 = env.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw: Vec<f64> = (0..env.action_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let o1 = env.step_raw(&raw).unwrap();
        let o2 = env.step_raw(&raw).unwrap();
        assert_eq!((o1.reward, o1.cost), (o2.reward, o2.cost));
        assert_eq!(o1.next_state, s0);
        assert!(o1.reward <= 0.0);
        let o3 = env.step_raw(&raw).unwrap();
        assert!(o3.done);
        assert!(matches!(env.step_raw(&raw), Err(CisacError::Usage(_))));
        assert_eq!(env.reset(), s0);
        let again = toy_env().reset();
        assert_eq!(again, s0);
    }

    #[test]
    fn discounted_sum_matches_geometric_series() {
        let mut env = toy_env();
        env.set_horizon(10);
        env.reset();
        let raw = vec![0.3; env.action_dim()];
        let gamma: f64 = 0.5;
        let mut total = 0.0;
        let mut w = 1.0;
        let mut r = 0.0;
        for _ in 0..10 {
            let o = env.step_raw(&raw).unwrap();
            r = o.reward;
            total += w * o.reward;
            w *= gamma;
        }
        let closed = r * (1.0 - gamma.powi(10)) / (1.0 - gamma);
        assert!((total - closed).abs() <= 1e-12 * closed.abs());
    }

    #[test]
    fn cost_tracks_sync_error() {
        let mut cfg = ScenarioConfig::desk();
        cfg.errors.sync_std = 2e-7;
        let loose = CisacEnv::from_scenario(build_scenario(&cfg).unwrap()).unwrap();
        cfg.errors.sync_std = 1e-8;
        let tight = CisacEnv::from_scenario(build_scenario(&cfg).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..loose.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = loose.decode(&raw).unwrap();
        assert!(tight.cost(&a) <= loose.cost(&a));
    }

    #[test]
    fn trace_csv_rows() {
        let mut env = toy_env();
        env.set_horizon(2);
        env.reset();
        let mut buf = Vec::new();
        {
            let mut t = EpisodeTrace::new(&mut buf).unwrap();
            for n in 0..2 {
                let o = env.step_raw(&vec![0.2; env.action_dim()]).unwrap();
                t.record(n, &o).unwrap();
            }
            t.finish().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("n,reward,cost,power"));
    }
}

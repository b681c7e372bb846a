//! Field-response channel synthesis for the communication and sensing links.
//!
//! Phase offsets follow `ρ = x·cosθ·cosφ + y·cosθ·sinφ` for every field
//! response vector in the crate, communication and sensing alike.

use std::io::Write;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CisacError, Result};
use crate::scenario::{distance3, GainErrorMode, MaLayout, PhysConstants, Point2, Point3, Scenario, Stream};

pub type C64 = Complex<f64>;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

/// Per-path elevation/azimuth angles, radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PathAngles {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl PathAngles {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Propagation distance difference of a point relative to the array origin.
pub fn phase_offset(pos: Point2, theta: f64, phi: f64) -> f64 {
    let ct = theta.cos();
    pos[0] * ct * phi.cos() + pos[1] * ct * phi.sin()
}

/// `exp(j·2π/λ·ρ_l(pos))` for each path `l`.
pub fn transmit_frv(pos: Point2, angles: &PathAngles, wavelength: f64) -> CVector {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    CVector::from_iterator(
        angles.len(),
        angles
            .theta
            .iter()
            .zip(&angles.phi)
            .map(|(&t, &p)| C64::from_polar(1.0, k * phase_offset(pos, t, p))),
    )
}

/// L×N matrix whose n-th column is the FRV of antenna n.
pub fn transmit_frm(positions: &[Point2], angles: &PathAngles, wavelength: f64) -> CMatrix {
    let mut frm = CMatrix::zeros(angles.len(), positions.len());
    for (n, &pos) in positions.iter().enumerate() {
        frm.set_column(n, &transmit_frv(pos, angles, wavelength));
    }
    frm
}

/// Single-direction array response over antennas (one LoS path).
pub fn array_response(positions: &[Point2], theta: f64, phi: f64, wavelength: f64) -> CVector {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    CVector::from_iterator(
        positions.len(),
        positions.iter().map(|&p| C64::from_polar(1.0, k * phase_offset(p, theta, phi))),
    )
}

/// Entries of the row channel `h = h̃^H A`, stored as a column.
pub fn assemble_comm(gains: &CVector, frm: &CMatrix) -> CVector {
    frm.transpose() * gains.map(|g| g.conj())
}

/// Path gains and angles of one BS-user link; independent of the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CommPaths {
    pub gains: CVector,
    pub angles: PathAngles,
}

impl CommPaths {
    pub fn channel(&self, positions: &[Point2], wavelength: f64) -> CommChannel {
        let frm = transmit_frm(positions, &self.angles, wavelength);
        let h = assemble_comm(&self.gains, &frm);
        CommChannel { gains: self.gains.clone(), frm, h }
    }
}

/// Communication channel of one BS-user link for a given layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CommChannel {
    pub gains: CVector,
    pub frm: CMatrix,
    pub h: CVector,
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

/// Draw path gains (total power `PL(d)`) and uniform angles for every (b,u),
/// indexed `b * U + u`.
pub fn draw_comm_paths<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Vec<CommPaths> {
    let l = scenario.paths;
    let mut out = Vec::with_capacity(scenario.num_bs() * scenario.num_users());
    for &bs in &scenario.bs_positions {
        for &user in &scenario.user_positions {
            let d = distance3(bs, user);
            let pl = scenario
                .phys
                .path_loss(d, scenario.phys.pathloss_exp_comm)
                .expect("BS and user positions coincide");
            let gains = CVector::from_iterator(l, (0..l).map(|_| complex_gaussian(rng, pl / l as f64)));
            let theta = (0..l).map(|_| rng.random_range(0.0..=std::f64::consts::PI)).collect();
            let phi = (0..l).map(|_| rng.random_range(0.0..=std::f64::consts::PI)).collect();
            out.push(CommPaths { gains, angles: PathAngles { theta, phi } });
        }
    }
    out
}

/// Draw and assemble every communication channel for `layout`.
pub fn synth_comm_channel<R: Rng + ?Sized>(scenario: &Scenario, layout: &MaLayout, rng: &mut R) -> Vec<CommChannel> {
    let u = scenario.num_users();
    draw_comm_paths(scenario, rng)
        .iter()
        .enumerate()
        .map(|(i, p)| p.channel(&layout.bs[i / u].tx, scenario.phys.wavelength))
        .collect()
}

/// Elevation/azimuth pair of one BS towards the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsAngles {
    pub theta: f64,
    pub phi: f64,
}

/// Departure angles at the transmitting BS and arrival angles at the receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkAngles {
    pub departure: BsAngles,
    pub arrival: BsAngles,
}

/// `θ = arctan(Δx/Δy) + π` and `φ = arctan(z_b/r) + π`, both reduced into
/// `[0, π)`; the two-argument arctangent covers `Δy = 0`.
pub fn bs_target_angles(bs: Point3, target: Point2) -> BsAngles {
    let dx = target[0] - bs[0];
    let dy = target[1] - bs[1];
    let r = dx.hypot(dy);
    let pi = std::f64::consts::PI;
    BsAngles { theta: dx.atan2(dy).rem_euclid(pi), phi: bs[2].atan2(r).rem_euclid(pi) }
}

pub fn target_angles(tx_bs: Point3, rx_bs: Point3, target: Point2) -> LinkAngles {
    LinkAngles { departure: bs_target_angles(tx_bs, target), arrival: bs_target_angles(rx_bs, target) }
}

/// Rank-one BS-target-BS channel `H = α a(r̃) a(t̃)^H` (M×N).
#[derive(Debug, Clone, PartialEq)]
pub struct SenseChannel {
    pub alpha: C64,
    pub a_rx: CVector,
    pub a_tx: CVector,
    pub h: CMatrix,
}

/// Two-hop reflection amplitude `sqrt(α·PL(d_tx)·PL(d_rx))` with zero phase.
pub fn reflection_amplitude(phys: &PhysConstants, tx_bs: Point3, rx_bs: Point3, target: Point2) -> Result<f64> {
    let t = [target[0], target[1], 0.0];
    let pl_tx = phys.path_loss(distance3(tx_bs, t), phys.pathloss_exp_sense)?;
    let pl_rx = phys.path_loss(distance3(t, rx_bs), phys.pathloss_exp_sense)?;
    Ok((phys.rcs * pl_tx * pl_rx).sqrt())
}

/// Sensing channel from the transmit array of `tx_bs` via the target to the
/// receive array of `rx_bs`.
pub fn sense_channel_at(
    phys: &PhysConstants,
    tx_bs: Point3,
    rx_bs: Point3,
    target: Point2,
    tx_positions: &[Point2],
    rx_positions: &[Point2],
) -> Result<SenseChannel> {
    let angles = target_angles(tx_bs, rx_bs, target);
    let alpha = C64::new(reflection_amplitude(phys, tx_bs, rx_bs, target)?, 0.0);
    let a_tx = array_response(tx_positions, angles.departure.theta, angles.departure.phi, phys.wavelength);
    let a_rx = array_response(rx_positions, angles.arrival.theta, angles.arrival.phi, phys.wavelength);
    let h = (&a_rx * a_tx.adjoint()) * alpha;
    Ok(SenseChannel { alpha, a_rx, a_tx, h })
}

/// Sensing channel from BS `tx` to the receiver of BS `rx` at the scenario target.
pub fn synth_sense_channel(scenario: &Scenario, layout: &MaLayout, tx: usize, rx: usize) -> Result<SenseChannel> {
    sense_channel_at(
        &scenario.phys,
        scenario.bs_positions[tx],
        scenario.bs_positions[rx],
        scenario.target,
        &layout.bs[tx].tx,
        &layout.bs[rx].rx,
    )
}

/// Estimated path parameters and the error radii they are known to within.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiEstimate {
    pub gains: CVector,
    pub angles: PathAngles,
    pub eps_theta: f64,
    pub eps_phi: f64,
    pub eps_gain: f64,
}

impl CsiEstimate {
    pub fn paths(&self) -> CommPaths {
        CommPaths { gains: self.gains.clone(), angles: self.angles.clone() }
    }

    /// Reconstructed channel `ĥ` for the given antenna positions.
    pub fn channel(&self, positions: &[Point2], wavelength: f64) -> CommChannel {
        self.paths().channel(positions, wavelength)
    }
}

fn symmetric_uniform<R: Rng + ?Sized>(rng: &mut R, eps: f64) -> f64 {
    if eps > 0.0 {
        rng.random_range(-eps..eps)
    } else {
        0.0
    }
}

/// Uniform sample from the complex ball of radius `radius` in C^len.
pub fn ball_sample<R: Rng + ?Sized>(rng: &mut R, len: usize, radius: f64) -> CVector {
    if radius <= 0.0 || len == 0 {
        return CVector::zeros(len);
    }
    let dir = CVector::from_iterator(
        len,
        (0..len).map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re, im)
        }),
    );
    let norm = dir.norm();
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / (2 * len) as f64);
    dir * C64::new(r / norm, 0.0)
}

/// Estimate = truth − bounded error, for angles and gains alike.
pub fn perturb_csi<R: Rng + ?Sized>(
    truth: &CommPaths,
    eps_theta: f64,
    eps_phi: f64,
    eps_gain: f64,
    rng: &mut R,
) -> Result<CsiEstimate> {
    if eps_theta < 0.0 || eps_phi < 0.0 || eps_gain < 0.0 {
        return Err(CisacError::Domain("CSI error bounds must be >= 0".into()));
    }
    let theta = truth.angles.theta.iter().map(|&t| t - symmetric_uniform(rng, eps_theta)).collect();
    let phi = truth.angles.phi.iter().map(|&p| p - symmetric_uniform(rng, eps_phi)).collect();
    let gains = &truth.gains - ball_sample(rng, truth.gains.len(), eps_gain);
    Ok(CsiEstimate { gains, angles: PathAngles { theta, phi }, eps_theta, eps_phi, eps_gain })
}

/// True and estimated communication paths for every (b,u), indexed `b * U + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub num_bs: usize,
    pub num_users: usize,
    pub truth: Vec<CommPaths>,
    pub estimate: Vec<CsiEstimate>,
}

impl ChannelSet {
    /// Draw from the scenario's channel and CSI-error streams.
    pub fn synthesize(scenario: &Scenario) -> Result<ChannelSet> {
        let mut rng = scenario.rng(Stream::Channel);
        let truth = draw_comm_paths(scenario, &mut rng);
        let mut err_rng = scenario.rng(Stream::CsiError);
        let estimate = truth
            .iter()
            .map(|p| {
                let radius = match scenario.gain_err_mode {
                    GainErrorMode::Absolute => scenario.gain_err,
                    GainErrorMode::Relative => scenario.gain_err * p.gains.norm(),
                };
                perturb_csi(p, scenario.angle_err_theta, scenario.angle_err_phi, radius, &mut err_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelSet { num_bs: scenario.num_bs(), num_users: scenario.num_users(), truth, estimate })
    }

    pub fn index(&self, b: usize, u: usize) -> usize {
        b * self.num_users + u
    }

    pub fn estimated(&self, scenario: &Scenario, layout: &MaLayout, b: usize, u: usize) -> CommChannel {
        self.estimate[self.index(b, u)].channel(&layout.bs[b].tx, scenario.phys.wavelength)
    }

    pub fn true_channel(&self, scenario: &Scenario, layout: &MaLayout, b: usize, u: usize) -> CommChannel {
        self.truth[self.index(b, u)].channel(&layout.bs[b].tx, scenario.phys.wavelength)
    }

    /// Estimated channel rows `ĥ_{b,u}` for all pairs, indexed `b * U + u`.
    pub fn estimated_rows(&self, scenario: &Scenario, layout: &MaLayout) -> Vec<CVector> {
        (0..self.num_bs)
            .flat_map(|b| (0..self.num_users).map(move |u| (b, u)))
            .map(|(b, u)| self.estimated(scenario, layout, b, u).h)
            .collect()
    }

    /// Dump estimated/true comm channels and sensing channels as CSV rows
    /// `kind,b,u_or_rx,row,col,re,im`.
    pub fn write_csv<W: Write>(&self, scenario: &Scenario, layout: &MaLayout, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "b", "u_or_rx", "row", "col", "re", "im"])?;
        for b in 0..self.num_bs {
            for u in 0..self.num_users {
                for (kind, ch) in [
                    ("h_est", self.estimated(scenario, layout, b, u)),
                    ("h_true", self.true_channel(scenario, layout, b, u)),
                ] {
                    for (n, v) in ch.h.iter().enumerate() {
                        w.write_record([kind.to_string(), b.to_string(), u.to_string(), "0".into(), n.to_string(), format!("{:e}", v.re), format!("{:e}", v.im)])?;
                    }
                }
            }
        }
        for tx in 0..self.num_bs {
            for rx in 0..self.num_bs {
                let s = synth_sense_channel(scenario, layout, tx, rx)?;
                for r in 0..s.h.nrows() {
                    for c in 0..s.h.ncols() {
                        let v = s.h[(r, c)];
                        w.write_record(["H".to_string(), tx.to_string(), rx.to_string(), r.to_string(), c.to_string(), format!("{:e}", v.re), format!("{:e}", v.im)])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_scenario, feasible_grid_layout, ScenarioConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const LAMBDA: f64 = 0.1;

    fn angles(theta: &[f64], phi: &[f64]) -> PathAngles {
        PathAngles { theta: theta.to_vec(), phi: phi.to_vec() }
    }

    #[test]
    fn phase_offset_cases() {
        assert_eq!(phase_offset([0.0, 0.0], 0.3, 1.1), 0.0);
        assert!(phase_offset([0.7, -0.2], PI / 2.0, 0.4).abs() < 1e-16);
        assert!((phase_offset([LAMBDA / 2.0, 0.0], 0.0, 0.0) - LAMBDA / 2.0).abs() < 1e-16);
    }

    #[test]
    fn frv_cases() {
        let a = angles(&[0.2, 1.0, 2.5], &[0.1, 0.7, 3.0]);
        let v = transmit_frv([0.0, 0.0], &a, LAMBDA);
        assert!(v.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
        // ρ = λ/4 with θ = φ = 0 at x = λ/4.
        let one = angles(&[0.0], &[0.0]);
        let j = transmit_frv([LAMBDA / 4.0, 0.0], &one, LAMBDA)[0];
        assert!((j - C64::new(0.0, 1.0)).norm() < 1e-12);
        let p = [0.03, -0.07];
        let delta = [0.011, 0.004];
        let shifted = transmit_frv([p[0] + delta[0], p[1] + delta[1]], &a, LAMBDA);
        let base = transmit_frv(p, &a, LAMBDA);
        let ramp = transmit_frv(delta, &a, LAMBDA);
        for l in 0..3 {
            assert!((shifted[l] - base[l] * ramp[l]).norm() < 1e-12);
        }
        assert!((v.norm_squared() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn frm_cases() {
        let a = angles(&[0.2, 1.0, 2.5], &[0.1, 0.7, 3.0]);
        let single = transmit_frm(&[[0.02, 0.01]], &a, LAMBDA);
        assert_eq!(single.column(0).into_owned(), transmit_frv([0.02, 0.01], &a, LAMBDA));
        let origin = transmit_frm(&[[0.0, 0.0]; 4], &a, LAMBDA);
        assert!(origin.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
        let pos: Vec<Point2> = (0..6).map(|i| [0.013 * i as f64, -0.021 * i as f64]).collect();
        let frm = transmit_frm(&pos, &a, LAMBDA);
        assert!((frm.norm_squared() - 18.0).abs() < 1e-10);
        assert!(frm.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn target_angle_cases() {
        // Δx = Δy gives arctan(1) + π, reduced to π/4.
        let a = bs_target_angles([0.0, 0.0, 10.0], [20.0, 20.0]);
        assert!((a.theta - PI / 4.0).abs() < 1e-15);
        // z_b = 0: arctan(0) + π = π, reduced to 0.
        let g = bs_target_angles([0.0, 0.0, 0.0], [20.0, 5.0]);
        assert!(g.phi.abs() < 1e-15);
        let p = [3.0, 4.0, 10.0];
        let q = [90.0, -5.0, 12.0];
        let t = [40.0, 30.0];
        let fwd = target_angles(p, q, t);
        let rev = target_angles(q, p, t);
        assert_eq!(fwd.departure, rev.arrival);
        assert_eq!(fwd.arrival, rev.departure);
        // Δy = 0 is handled without a division by zero.
        let side = bs_target_angles([0.0, 0.0, 10.0], [15.0, 0.0]);
        assert!((side.theta - PI / 2.0).abs() < 1e-15);
        for ang in [a, g, side, fwd.departure, fwd.arrival] {
            assert!((0.0..=PI).contains(&ang.theta) && (0.0..=PI).contains(&ang.phi));
        }
    }

    #[test]
    fn single_path_all_ones_channel_is_conjugate_gain() {
        let g = CVector::from_vec(vec![C64::new(0.3, -0.4)]);
        let frm = CMatrix::from_element(1, 5, C64::new(1.0, 0.0));
        let h = assemble_comm(&g, &frm);
        assert!(h.iter().all(|z| (z - C64::new(0.3, 0.4)).norm() < 1e-15));
    }

    #[test]
    fn gain_power_matches_path_loss() {
        let s = build_scenario(&ScenarioConfig::default()).unwrap();
        let pl = s.phys.path_loss(distance3(s.bs_positions[0], s.user_positions[0]), s.phys.pathloss_exp_comm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mean = (0..n).map(|_| draw_comm_paths(&s, &mut rng)[0].gains.norm_squared()).sum::<f64>() / n as f64;
        let sigma = pl / ((n * s.paths) as f64).sqrt();
        assert!((mean - pl).abs() < 3.0 * sigma, "mean {mean:e} vs {pl:e}");
    }

    #[test]
    fn comm_synthesis_is_deterministic_and_pure() {
        let s = build_scenario(&ScenarioConfig::default()).unwrap();
        let layout = feasible_grid_layout(&s).unwrap();
        let a = synth_comm_channel(&s, &layout, &mut s.rng(Stream::Channel));
        let b = synth_comm_channel(&s, &layout, &mut s.rng(Stream::Channel));
        assert_eq!(a, b);
        let set = ChannelSet::synthesize(&s).unwrap();
        assert_eq!(set.true_channel(&s, &layout, 1, 1), set.true_channel(&s, &layout, 1, 1));
        assert_eq!(set.true_channel(&s, &layout, 1, 1).h, a[s.num_users() + 1].h);
    }

    #[test]
    fn sense_channel_structure() {
        let s = build_scenario(&ScenarioConfig::default()).unwrap();
        let layout = feasible_grid_layout(&s).unwrap();
        let ch = synth_sense_channel(&s, &layout, 0, 2).unwrap();
        assert_eq!(ch.h.shape(), (4, 8));
        let expect = ch.alpha.norm_sqr() * 32.0;
        assert!((ch.h.norm_squared() - expect).abs() < 1e-12 * expect);
        let sv = ch.h.clone().svd(false, false).singular_values;
        let big = sv.iter().filter(|&&x| x > 1e-12 * ch.h.norm()).count();
        assert_eq!(big, 1);

        let phys = s.phys;
        let one = sense_channel_at(&phys, s.bs_positions[0], s.bs_positions[1], s.target, &[[0.0, 0.0]], &[[0.0, 0.0]]).unwrap();
        assert!((one.h[(0, 0)] - one.alpha).norm() < 1e-30);
    }

    #[test]
    fn zero_bounds_leave_csi_untouched() {
        let s = build_scenario(&ScenarioConfig::default()).unwrap();
        let mut rng = s.rng(Stream::Channel);
        let truth = &draw_comm_paths(&s, &mut rng)[0];
        let est = perturb_csi(truth, 0.0, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(est.paths(), *truth);
        let layout = feasible_grid_layout(&s).unwrap();
        assert_eq!(est.channel(&layout.bs[0].tx, 0.1).h, truth.channel(&layout.bs[0].tx, 0.1).h);
        assert!(perturb_csi(truth, -1.0, 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn perturbation_respects_bounds() {
        let s = build_scenario(&ScenarioConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = draw_comm_paths(&s, &mut rng).swap_remove(0);
        let eps_gain = 0.3 * truth.gains.norm();
        for _ in 0..1000 {
            let est = perturb_csi(&truth, 0.01, 0.02, eps_gain, &mut rng).unwrap();
            assert!((&truth.gains - &est.gains).norm() <= eps_gain * (1.0 + 1e-12));
            for l in 0..truth.angles.len() {
                assert!((truth.angles.theta[l] - est.angles.theta[l]).abs() < 0.01);
                assert!((truth.angles.phi[l] - est.angles.phi[l]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn channel_dump_has_header_and_rows() {
        let s = build_scenario(&ScenarioConfig::toy()).unwrap();
        let layout = feasible_grid_layout(&s).unwrap();
        let set = ChannelSet::synthesize(&s).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&s, &layout, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,b,u_or_rx,row,col,re,im"));
        // 2 comm rows of N=2 entries plus one 2x2 sensing matrix.
        assert_eq!(text.lines().count(), 1 + 4 + 4);
    }
}

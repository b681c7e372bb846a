//! Frequency-domain sensing model, Fisher information and the hybrid CRLB on
//! the target position under time-synchronization error.
//!
//! Receiver `b` observes every transmitter `b'`. Its parameter vector is
//! `ζ_b = [x_T, y_T, ξ_{0,b}, …, ξ_{B-1,b}]`; the self entry `ξ_{b,b}` does
//! not enter the signal and is pinned by its prior alone.

use nalgebra::{DMatrix, Matrix2};

use crate::channel::{bs_target_angles, phase_offset, reflection_amplitude, sense_channel_at, CMatrix, CVector, C64};
use crate::error::{CisacError, Result};
use crate::robust_rate::BeamformSet;
use crate::scenario::{distance3, MaLayout, MonostaticDelay, PhysConstants, PilotKind, Point2, Point3, Scenario};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

/// Sample frequencies `f_s = 2π·s·Δf` (rad/s) and the pilot layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqGrid {
    pub freqs: Vec<f64>,
    pub pilots: PilotKind,
    pub users: usize,
}

impl FreqGrid {
    pub fn new(samples: usize, spacing_hz: f64, pilots: PilotKind, users: usize) -> Result<Self> {
        if samples == 0 || !(spacing_hz > 0.0) || users == 0 {
            return Err(CisacError::Domain("frequency grid needs samples, spacing and users".into()));
        }
        let freqs = (1..=samples).map(|s| 2.0 * std::f64::consts::PI * s as f64 * spacing_hz).collect();
        Ok(FreqGrid { freqs, pilots, users })
    }

    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        FreqGrid::new(s.subcarriers, s.subcarrier_spacing_hz, s.pilots, s.num_users())
    }

    /// Pilot symbols per subcarrier as a U×P block.
    pub fn pilot_block(&self) -> CMatrix {
        match self.pilots {
            PilotKind::Flat => CMatrix::from_element(self.users, 1, C64::new(1.0, 0.0)),
            PilotKind::Orthogonal => CMatrix::identity(self.users, self.users),
        }
    }

    pub fn symbols(&self) -> usize {
        match self.pilots {
            PilotKind::Flat => 1,
            PilotKind::Orthogonal => self.users,
        }
    }

    /// Length of the stacked receive vector for `m` receive antennas.
    pub fn signal_len(&self, m: usize) -> usize {
        self.freqs.len() * self.symbols() * m
    }
}

/// `(‖p_tx − p_T‖ + ‖p_T − p_rx‖)/c`.
pub fn geometric_delay(tx_bs: Point3, rx_bs: Point3, target: Point2, c: f64) -> f64 {
    let t = [target[0], target[1], 0.0];
    (distance3(tx_bs, t) + distance3(t, rx_bs)) / c
}

/// Delay of the `tx → target → rx` echo including the sync offset `xi`.
pub fn link_delay(scenario: &Scenario, tx: usize, rx: usize, target: Point2, xi: f64) -> f64 {
    let c = scenario.phys.speed_of_light;
    let (p, q) = (scenario.bs_positions[tx], scenario.bs_positions[rx]);
    if tx != rx {
        geometric_delay(p, q, target, c) + xi
    } else {
        match scenario.monostatic_delay {
            MonostaticDelay::TwoHop => geometric_delay(p, q, target, c),
            MonostaticDelay::Zero => 0.0,
        }
    }
}

fn horizontal_offset(bs: Point3, target: Point2, axis: Axis) -> f64 {
    target[axis.index()] - bs[axis.index()]
}

/// `∂τ/∂axis = ((a_T − a_tx)/v_tx + (a_T − a_rx)/v_rx)/c`.
pub fn dtau_dposition(tx_bs: Point3, rx_bs: Point3, target: Point2, axis: Axis, c: f64) -> Result<f64> {
    let t = [target[0], target[1], 0.0];
    let v_tx = distance3(tx_bs, t);
    let v_rx = distance3(rx_bs, t);
    if v_tx == 0.0 || v_rx == 0.0 {
        return Err(CisacError::Domain("target coincides with a BS".into()));
    }
    Ok((horizontal_offset(tx_bs, target, axis) / v_tx + horizontal_offset(rx_bs, target, axis) / v_rx) / c)
}

fn link_dtau(scenario: &Scenario, tx: usize, rx: usize, target: Point2, axis: Axis) -> Result<f64> {
    if tx == rx && scenario.monostatic_delay == MonostaticDelay::Zero {
        return Ok(0.0);
    }
    dtau_dposition(scenario.bs_positions[tx], scenario.bs_positions[rx], target, axis, scenario.phys.speed_of_light)
}

/// `(∂θ/∂axis, ∂φ/∂axis)` of the BS-target angles.
pub fn angle_derivatives(bs: Point3, target: Point2, axis: Axis) -> (f64, f64) {
    let dx = target[0] - bs[0];
    let dy = target[1] - bs[1];
    let z = bs[2];
    let r2 = dx * dx + dy * dy;
    let r = r2.sqrt();
    let (dtheta, dr) = match axis {
        Axis::X => (dy / r2, dx / r),
        Axis::Y => (-dx / r2, dy / r),
    };
    let dphi = -z / (r2 + z * z) * dr;
    (dtheta, dphi)
}

/// `∂ρ/∂θ` and `∂ρ/∂φ` for one antenna position.
pub fn phase_offset_gradient(pos: Point2, theta: f64, phi: f64) -> (f64, f64) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (-st * (pos[0] * cp + pos[1] * sp), ct * (-pos[0] * sp + pos[1] * cp))
}

fn array_response_derivative(positions: &[Point2], bs: Point3, target: Point2, axis: Axis, wavelength: f64) -> CVector {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let ang = bs_target_angles(bs, target);
    let (dtheta, dphi) = angle_derivatives(bs, target, axis);
    CVector::from_iterator(
        positions.len(),
        positions.iter().map(|&p| {
            let (gt, gp) = phase_offset_gradient(p, ang.theta, ang.phi);
            let drho = gt * dtheta + gp * dphi;
            C64::from_polar(1.0, k * phase_offset(p, ang.theta, ang.phi)) * C64::new(0.0, k * drho)
        }),
    )
}

fn dalpha_dposition(phys: &PhysConstants, tx_bs: Point3, rx_bs: Point3, target: Point2, axis: Axis) -> Result<f64> {
    let t = [target[0], target[1], 0.0];
    let alpha = reflection_amplitude(phys, tx_bs, rx_bs, target)?;
    let v_tx = distance3(tx_bs, t);
    let v_rx = distance3(rx_bs, t);
    let dlog = horizontal_offset(tx_bs, target, axis) / (v_tx * v_tx) + horizontal_offset(rx_bs, target, axis) / (v_rx * v_rx);
    Ok(-0.5 * phys.pathloss_exp_sense * alpha * dlog)
}

/// `∂H/∂axis` for the `tx → target → rx` sensing channel, including the
/// position dependence of the reflection amplitude.
pub fn dh_dposition(
    phys: &PhysConstants,
    tx_bs: Point3,
    rx_bs: Point3,
    target: Point2,
    tx_positions: &[Point2],
    rx_positions: &[Point2],
    axis: Axis,
) -> Result<CMatrix> {
    let ch = sense_channel_at(phys, tx_bs, rx_bs, target, tx_positions, rx_positions)?;
    let da_rx = array_response_derivative(rx_positions, rx_bs, target, axis, phys.wavelength);
    let da_tx = array_response_derivative(tx_positions, tx_bs, target, axis, phys.wavelength);
    let dalpha = C64::new(dalpha_dposition(phys, tx_bs, rx_bs, target, axis)?, 0.0);
    Ok(&ch.a_rx * ch.a_tx.adjoint() * dalpha + (&da_rx * ch.a_tx.adjoint() + &ch.a_rx * da_tx.adjoint()) * ch.alpha)
}

fn selected(c: &[bool], b: usize) -> bool {
    c.get(b).copied().unwrap_or(true)
}

/// Place `block` (M×P) for subcarrier `s` into the stacked vector.
fn add_block(out: &mut CVector, block: &CMatrix, s: usize, scale: C64) {
    let (m, p) = block.shape();
    for j in 0..p {
        for i in 0..m {
            out[(s * p + j) * m + i] += block[(i, j)] * scale;
        }
    }
}

/// Stacked noiseless receive vector of BS `rx`, index `(s·P + p)·M + m`,
/// for target position `target` and sync offsets `xi[b']` of each transmitter.
pub fn freq_signal_mean(
    scenario: &Scenario,
    layout: &MaLayout,
    w: &BeamformSet,
    c: &[bool],
    grid: &FreqGrid,
    rx: usize,
    target: Point2,
    xi: &[f64],
) -> Result<CVector> {
    let m = layout.bs[rx].rx.len();
    let mut out = CVector::zeros(grid.signal_len(m));
    let pilots = grid.pilot_block();
    for tx in 0..scenario.num_bs() {
        if !selected(c, tx) {
            continue;
        }
        let ch = sense_channel_at(
            &scenario.phys,
            scenario.bs_positions[tx],
            scenario.bs_positions[rx],
            target,
            &layout.bs[tx].tx,
            &layout.bs[rx].rx,
        )?;
        let block = &ch.h * &w.w[tx] * &pilots;
        let tau = link_delay(scenario, tx, rx, target, xi[tx]);
        for (s, &f) in grid.freqs.iter().enumerate() {
            add_block(&mut out, &block, s, C64::from_polar(1.0, -f * tau));
        }
    }
    Ok(out)
}

/// Columns `∂x̃_b/∂ζ_b[o]` for `o` over `[x_T, y_T, ξ_{0,b}, …]`.
pub fn dx_dparam(
    scenario: &Scenario,
    layout: &MaLayout,
    w: &BeamformSet,
    c: &[bool],
    grid: &FreqGrid,
    rx: usize,
    target: Point2,
    xi: &[f64],
) -> Result<CMatrix> {
    let nb = scenario.num_bs();
    let m = layout.bs[rx].rx.len();
    let mut d = CMatrix::zeros(grid.signal_len(m), nb + 2);
    let pilots = grid.pilot_block();
    let phys = &scenario.phys;
    for tx in 0..nb {
        if !selected(c, tx) {
            continue;
        }
        let (p_tx, p_rx) = (scenario.bs_positions[tx], scenario.bs_positions[rx]);
        let (tpos, rpos) = (&layout.bs[tx].tx, &layout.bs[rx].rx);
        let ch = sense_channel_at(phys, p_tx, p_rx, target, tpos, rpos)?;
        let ws = &w.w[tx] * &pilots;
        let base = &ch.h * &ws;
        let tau = link_delay(scenario, tx, rx, target, xi[tx]);
        for axis in [Axis::X, Axis::Y] {
            let dh = dh_dposition(phys, p_tx, p_rx, target, tpos, rpos, axis)? * &ws;
            let dtau = link_dtau(scenario, tx, rx, target, axis)?;
            let mut col = CVector::zeros(d.nrows());
            for (s, &f) in grid.freqs.iter().enumerate() {
                let ramp = C64::from_polar(1.0, -f * tau);
                add_block(&mut col, &dh, s, ramp);
                add_block(&mut col, &base, s, ramp * C64::new(0.0, -f * dtau));
            }
            let mut target_col = d.column_mut(axis.index());
            target_col += col;
        }
        if tx != rx {
            let mut col = CVector::zeros(d.nrows());
            for (s, &f) in grid.freqs.iter().enumerate() {
                add_block(&mut col, &base, s, C64::from_polar(1.0, -f * tau) * C64::new(0.0, -f));
            }
            d.set_column(2 + tx, &col);
        }
    }
    Ok(d)
}

/// `(2/σ²)·Re(DᴴD)`.
pub fn ofim(d: &CMatrix, noise_power: f64) -> DMatrix<f64> {
    let g = d.adjoint() * d;
    let mut out = g.map(|z| 2.0 * z.re / noise_power);
    // Re(DᴴD) is symmetric in exact arithmetic; remove round-off asymmetry.
    let t = out.transpose();
    out = (&out + &t) * 0.5;
    out
}

/// Prior information: `(1/σ_ξ²)·I` on the sync block, zero elsewhere.
pub fn pfim(sigma_xi: f64, num_bs: usize) -> Result<DMatrix<f64>> {
    if !(sigma_xi > 0.0) {
        return Err(CisacError::DegeneratePrior(format!("sync std must be > 0, got {sigma_xi}")));
    }
    let mut p = DMatrix::zeros(num_bs + 2, num_bs + 2);
    for i in 0..num_bs {
        p[(2 + i, 2 + i)] = 1.0 / (sigma_xi * sigma_xi);
    }
    Ok(p)
}

/// Hybrid FIM split into position and sync blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherBlocks {
    pub ofim: DMatrix<f64>,
    pub hfim: DMatrix<f64>,
}

impl FisherBlocks {
    pub fn assemble(ofim: DMatrix<f64>, sigma_xi: f64) -> Result<Self> {
        let b = ofim.nrows() - 2;
        let hfim = &ofim + pfim(sigma_xi, b)?;
        Ok(FisherBlocks { ofim, hfim })
    }

    pub fn pp(&self) -> Matrix2<f64> {
        self.hfim.fixed_view::<2, 2>(0, 0).into_owned()
    }

    pub fn p_xi(&self) -> DMatrix<f64> {
        self.hfim.view((0, 2), (2, self.hfim.ncols() - 2)).into_owned()
    }

    pub fn xi_xi(&self) -> DMatrix<f64> {
        let b = self.hfim.ncols() - 2;
        self.hfim.view((2, 2), (b, b)).into_owned()
    }

    pub fn report(&self) -> Result<HcrlbReport> {
        hcrlb_position(&self.hfim)
    }
}

/// Position bound and its split into the sync-free CRLB and the extra term.
#[derive(Debug, Clone, PartialEq)]
pub struct HcrlbReport {
    pub hcrlb: Matrix2<f64>,
    pub trace: f64,
    pub crlb_only: Matrix2<f64>,
    pub extra: Matrix2<f64>,
}

/// Condition number of a symmetric matrix; infinite when not positive definite.
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    if lo <= 0.0 || !lo.is_finite() || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn guarded_inverse2(m: &Matrix2<f64>, what: &str) -> Result<Matrix2<f64>> {
    let dm = DMatrix::from_column_slice(2, 2, m.as_slice());
    let cond = symmetric_condition(&dm);
    if cond > MAX_CONDITION {
        return Err(CisacError::Singular { reason: format!("{what} is not invertible"), condition: cond });
    }
    m.try_inverse().ok_or(CisacError::Singular { reason: format!("{what} is not invertible"), condition: cond })
}

/// `(Ξ_pp − Ξ_pξ Ξ_ξξ⁻¹ Ξ_pξᵀ)⁻¹` with the sync-free split.
pub fn hcrlb_position(hfim: &DMatrix<f64>) -> Result<HcrlbReport> {
    let pp: Matrix2<f64> = hfim.fixed_view::<2, 2>(0, 0).into_owned();
    let crlb_only = guarded_inverse2(&pp, "position block")?;
    let b = hfim.ncols() - 2;
    let schur = if b == 0 {
        pp
    } else {
        let pxi = hfim.view((0, 2), (2, b)).into_owned();
        let xixi = hfim.view((2, 2), (b, b)).into_owned();
        let chol = xixi.cholesky().ok_or(CisacError::Singular {
            reason: "sync block is not positive definite".into(),
            condition: f64::INFINITY,
        })?;
        let solved = chol.solve(&pxi.transpose());
        let corr = &pxi * solved;
        let mut s = pp - Matrix2::from_column_slice(corr.as_slice());
        s = (s + s.transpose()) * 0.5;
        s
    };
    let hcrlb = guarded_inverse2(&schur, "Schur complement")?;
    Ok(HcrlbReport { hcrlb, trace: hcrlb.trace(), crlb_only, extra: hcrlb - crlb_only })
}

/// HCRLB from an OFIM; `sigma_xi = 0` takes the pinned-sync limit `(Ξ_pp)⁻¹`.
pub fn hcrlb_from_ofim(ofim: &DMatrix<f64>, sigma_xi: f64) -> Result<HcrlbReport> {
    if sigma_xi == 0.0 {
        let pp: Matrix2<f64> = ofim.fixed_view::<2, 2>(0, 0).into_owned();
        let inv = guarded_inverse2(&pp, "position block")?;
        return Ok(HcrlbReport { hcrlb: inv, trace: inv.trace(), crlb_only: inv, extra: Matrix2::zeros() });
    }
    FisherBlocks::assemble(ofim.clone(), sigma_xi)?.report()
}

/// `tr(HCRLB) ≤ γ_b`, boundary-inclusive.
pub fn sensing_ok(report: &HcrlbReport, gamma_b: f64) -> bool {
    report.trace <= gamma_b
}

/// OFIM of receiver `rx` at the true target and zero sync offset.
pub fn ofim_at(scenario: &Scenario, layout: &MaLayout, w: &BeamformSet, c: &[bool], grid: &FreqGrid, rx: usize) -> Result<DMatrix<f64>> {
    let xi = vec![0.0; scenario.num_bs()];
    let d = dx_dparam(scenario, layout, w, c, grid, rx, scenario.target, &xi)?;
    Ok(ofim(&d, scenario.phys.noise_power))
}

/// OFIMs of every receiver.
pub fn all_ofims(scenario: &Scenario, layout: &MaLayout, w: &BeamformSet, c: &[bool]) -> Result<Vec<DMatrix<f64>>> {
    let grid = FreqGrid::from_scenario(scenario)?;
    (0..scenario.num_bs()).map(|b| ofim_at(scenario, layout, w, c, &grid, b)).collect()
}

/// HCRLB of every receiver at the scenario's sync error level.
pub fn evaluate_sensing(scenario: &Scenario, layout: &MaLayout, w: &BeamformSet, c: &[bool]) -> Result<Vec<HcrlbReport>> {
    all_ofims(scenario, layout, w, c)?.iter().map(|o| hcrlb_from_ofim(o, scenario.sync_std)).collect()
}

/// Full HFIM rows of every receiver as CSV `rx,row,col,value`.
pub fn write_fim_csv<W: std::io::Write>(scenario: &Scenario, layout: &MaLayout, w: &BeamformSet, c: &[bool], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["rx", "kind", "row", "col", "value"])?;
    for (b, o) in all_ofims(scenario, layout, w, c)?.into_iter().enumerate() {
        let hfim = if scenario.sync_std > 0.0 { &o + pfim(scenario.sync_std, scenario.num_bs())? } else { o.clone() };
        for (kind, m) in [("ofim", &o), ("hfim", &hfim)] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    wr.write_record([b.to_string(), kind.to_string(), i.to_string(), j.to_string(), format!("{:e}", m[(i, j)])])?;
                }
            }
        }
    }
    wr.flush()?;
    Ok(())
}

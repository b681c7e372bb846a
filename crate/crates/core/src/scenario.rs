//! Experiment geometry, physical constants and seeded randomness.
//!
//! A [`Scenario`] is built from a [`ScenarioConfig`] (TOML on disk) and is the
//! only input every downstream module needs. Lengths are stored in meters and
//! powers in watts; the config file uses wavelength units for the antenna
//! regions and dB/dBm for the reference path loss and noise floor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CisacError, Result};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

/// Carrier and propagation constants, all in linear units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysConstants {
    pub wavelength: f64,
    pub speed_of_light: f64,
    /// Reference path loss in dB (negative).
    pub ref_path_loss_db: f64,
    pub ref_distance: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
    pub pathloss_exp_comm: f64,
    pub pathloss_exp_sense: f64,
    pub rcs: f64,
}

impl PhysConstants {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CisacError::Config(format!("{what} must be positive")));
        if !(self.wavelength > 0.0) {
            return bad("wavelength");
        }
        if !(self.speed_of_light > 0.0) {
            return bad("speed_of_light");
        }
        if !(self.ref_distance > 0.0) {
            return bad("ref_distance");
        }
        if !(self.noise_power > 0.0) {
            return bad("noise_power");
        }
        if self.pathloss_exp_comm < 0.0 || self.pathloss_exp_sense < 0.0 {
            return Err(CisacError::Config("path-loss exponents must be >= 0".into()));
        }
        if self.rcs < 0.0 {
            return Err(CisacError::Config("rcs must be >= 0".into()));
        }
        Ok(())
    }

    /// Large-scale power gain `PL0 (d/d0)^-exp` in linear scale.
    pub fn path_loss(&self, distance: f64, exponent: f64) -> Result<f64> {
        path_loss(distance, exponent, self.ref_path_loss_db, self.ref_distance)
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength
    }
}

/// `10^(pl0_db/10) * (d/d0)^(-exponent)`.
pub fn path_loss(distance: f64, exponent: f64, pl0_db: f64, d0: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(CisacError::Domain(format!("path loss needs d > 0, got {distance}")));
    }
    Ok(10f64.powf(pl0_db / 10.0) * (distance / d0).powf(-exponent))
}

/// Axis-aligned rectangle in meters, relative to the array origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn symmetric(half: f64) -> Self {
        Region { x_min: -half, x_max: half, y_min: -half, y_max: half }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point2 {
        [0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)]
    }

    pub fn contains(&self, p: Point2) -> bool {
        const SLACK: f64 = 1e-12;
        p[0] >= self.x_min - SLACK
            && p[0] <= self.x_max + SLACK
            && p[1] >= self.y_min - SLACK
            && p[1] <= self.y_max + SLACK
    }

    pub fn clamp(&self, p: Point2) -> Point2 {
        [p[0].clamp(self.x_min, self.x_max), p[1].clamp(self.y_min, self.y_max)]
    }

    /// Lattice points per axis at the given pitch.
    pub fn grid_capacity(&self, pitch: f64) -> (usize, usize) {
        let per_axis = |len: f64| ((len / pitch) + 1e-9).floor() as usize + 1;
        (per_axis(self.width()), per_axis(self.height()))
    }
}

/// How the sampled CSI-error radius `‖Δh‖²` is bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsiBoundModel {
    /// `N‖ĥ̃‖² + 2NLε̄`, independent of the angle-error magnitudes.
    Verbatim,
    /// Per-antenna Lipschitz bound on the field-response phase error.
    AngleAware,
}

/// Whether `ε̄` is an absolute radius or a fraction of the true gain norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainErrorMode {
    Absolute,
    Relative,
}

/// Pilot structure per subcarrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotKind {
    /// One all-ones U-vector per subcarrier.
    Flat,
    /// U orthogonal unit symbols per subcarrier (identity pilot block).
    Orthogonal,
}

/// Delay model for the monostatic (b = b') echo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonostaticDelay {
    /// Phase reference at the monostatic echo: τ_bb = 0.
    Zero,
    /// Round-trip geometric delay 2‖p_b − p_T‖/c.
    TwoHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysSection {
    pub wavelength: f64,
    pub speed_of_light: f64,
    pub ref_path_loss_db: f64,
    pub ref_distance: f64,
    pub noise_power_dbm: f64,
    pub pathloss_exp_comm: f64,
    pub pathloss_exp_sense: f64,
    pub rcs: f64,
}

impl Default for PhysSection {
    fn default() -> Self {
        PhysSection {
            wavelength: 0.1,
            speed_of_light: 299_792_458.0,
            ref_path_loss_db: -30.0,
            ref_distance: 1.0,
            noise_power_dbm: -120.0,
            pathloss_exp_comm: 2.8,
            pathloss_exp_sense: 2.2,
            rcs: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub bs_positions: Vec<Point3>,
    pub user_positions: Vec<Point3>,
    pub target: Point2,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            bs_positions: vec![[0.0, 0.0, 10.0], [100.0, 0.0, 10.0], [50.0, 86.6, 10.0]],
            user_positions: vec![[25.0, 30.0, 0.0], [75.0, 30.0, 0.0]],
            target: [55.0, 35.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySection {
    pub n_x: usize,
    pub n_y: usize,
    pub m_x: usize,
    pub m_y: usize,
    /// `[x_min, x_max, y_min, y_max]` in wavelengths.
    pub tx_region: [f64; 4],
    pub rx_region: [f64; 4],
    /// Minimum inter-antenna spacing in wavelengths.
    pub min_spacing: f64,
    pub paths: usize,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection {
            n_x: 4,
            n_y: 2,
            m_x: 2,
            m_y: 2,
            tx_region: [-2.0, 2.0, -2.0, 2.0],
            rx_region: [-2.0, 2.0, -2.0, 2.0],
            min_spacing: 0.5,
            paths: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorSection {
    /// Time-synchronization error std in seconds.
    pub sync_std: f64,
    pub angle_err_theta: f64,
    pub angle_err_phi: f64,
    pub gain_err: f64,
    pub gain_err_mode: GainErrorMode,
    pub bound_model: CsiBoundModel,
    /// Delay measurement noise in seconds (signal generation only).
    pub delay_noise: f64,
}

impl Default for ErrorSection {
    fn default() -> Self {
        ErrorSection {
            sync_std: 100e-9,
            angle_err_theta: 1e-3,
            angle_err_phi: 1e-3,
            gain_err: 0.01,
            gain_err_mode: GainErrorMode::Relative,
            bound_model: CsiBoundModel::AngleAware,
            delay_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    /// Per-user rate target in bit/s/Hz.
    pub rate: f64,
    /// Per-receiver bound on tr(HCRLB) in m².
    pub sensing: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection { rate: 2.0, sensing: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensingSection {
    pub subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub pilots: PilotKind,
    pub monostatic_delay: MonostaticDelay,
}

impl Default for SensingSection {
    fn default() -> Self {
        SensingSection {
            subcarriers: 64,
            subcarrier_spacing_hz: 120e3,
            pilots: PilotKind::Orthogonal,
            monostatic_delay: MonostaticDelay::TwoHop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionSection {
    /// Per-BS power ceiling in watts.
    pub p_max: f64,
    pub selection_penalty: f64,
    pub tx_region_penalty: f64,
    pub rx_region_penalty: f64,
    /// Penalize `c_bu == c_b` instead of the mismatch.
    pub literal_selection_penalty: bool,
    /// Repair decoded layouts to the minimum spacing.
    pub repair: bool,
    pub horizon: usize,
    pub cost_ceiling: f64,
}

impl Default for ActionSection {
    fn default() -> Self {
        ActionSection {
            p_max: 10.0,
            selection_penalty: 10.0,
            tx_region_penalty: 10.0,
            rx_region_penalty: 10.0,
            literal_selection_penalty: false,
            repair: true,
            horizon: 200,
            cost_ceiling: 1e6,
        }
    }
}

/// On-disk experiment configuration. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub phys: PhysSection,
    pub geometry: GeometrySection,
    pub array: ArraySection,
    pub errors: ErrorSection,
    pub targets: TargetSection,
    pub sensing: SensingSection,
    pub action: ActionSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            phys: PhysSection::default(),
            geometry: GeometrySection::default(),
            array: ArraySection::default(),
            errors: ErrorSection::default(),
            targets: TargetSection::default(),
            sensing: SensingSection::default(),
            action: ActionSection::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Named configurations: `full` (alias `default`), `desk` and `toy`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" | "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(CisacError::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Two BSs, two users, small arrays and 16 subcarriers.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.geometry = GeometrySection {
            bs_positions: vec![[0.0, 0.0, 10.0], [80.0, 0.0, 10.0]],
            user_positions: vec![[20.0, 35.0, 0.0], [65.0, 30.0, 0.0]],
            target: [35.0, 25.0],
        };
        cfg.array.n_x = 2;
        cfg.array.n_y = 2;
        cfg.array.m_x = 2;
        cfg.array.m_y = 1;
        cfg.sensing.subcarriers = 16;
        cfg.sensing.subcarrier_spacing_hz = 2e6;
        cfg.targets.sensing = 100.0;
        cfg.action.p_max = 1.0;
        cfg
    }

    /// One BS serving one user with a two-element transmit array.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.geometry = GeometrySection {
            bs_positions: vec![[0.0, 0.0, 10.0]],
            user_positions: vec![[30.0, 40.0, 0.0]],
            target: [20.0, 15.0],
        };
        cfg.array.n_x = 2;
        cfg.array.n_y = 1;
        cfg.array.m_x = 2;
        cfg.array.m_y = 1;
        cfg.array.tx_region = [-1.0, 1.0, -1.0, 1.0];
        cfg.array.rx_region = [-1.0, 1.0, -1.0, 1.0];
        cfg.sensing.subcarriers = 16;
        cfg.sensing.subcarrier_spacing_hz = 2e6;
        cfg.action.horizon = 10;
        cfg.action.p_max = 1e-2;
        cfg
    }

    /// Split an antenna count into a near-square `(n_x, n_y)` with `n_x >= n_y`.
    pub fn split_count(count: usize) -> (usize, usize) {
        let mut ny = (count as f64).sqrt().floor() as usize;
        while ny > 1 && count % ny != 0 {
            ny -= 1;
        }
        let ny = ny.max(1);
        (count / ny, ny)
    }
}

/// Named, independent random streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Channel,
    CsiError,
    SyncError,
    AgentInit,
    Exploration,
    Search,
    Replay,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Channel => 1,
            Stream::CsiError => 2,
            Stream::SyncError => 3,
            Stream::AgentInit => 4,
            Stream::Exploration => 5,
            Stream::Search => 6,
            Stream::Replay => 7,
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phys: PhysConstants,
    pub bs_positions: Vec<Point3>,
    pub user_positions: Vec<Point3>,
    pub target: Point2,
    pub n_x: usize,
    pub n_y: usize,
    pub m_x: usize,
    pub m_y: usize,
    pub tx_region: Region,
    pub rx_region: Region,
    /// Minimum spacing D in meters.
    pub min_spacing: f64,
    pub paths: usize,
    pub sync_std: f64,
    pub angle_err_theta: f64,
    pub angle_err_phi: f64,
    pub gain_err: f64,
    pub gain_err_mode: GainErrorMode,
    pub bound_model: CsiBoundModel,
    pub delay_noise: f64,
    pub rate_target: f64,
    pub sense_target: f64,
    pub subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub pilots: PilotKind,
    pub monostatic_delay: MonostaticDelay,
    pub action: ActionSection,
    pub seed: u64,
}

impl Scenario {
    pub fn num_bs(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_positions.len()
    }

    pub fn num_tx(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn num_rx(&self) -> usize {
        self.m_x * self.m_y
    }

    pub fn target3(&self) -> Point3 {
        [self.target[0], self.target[1], 0.0]
    }

    /// Deterministic RNG for a named stream.
    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.id());
        rng
    }

    /// Same geometry with a different root seed.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario { seed, ..self.clone() }
    }
}

pub fn distance3(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn distance2(a: Point2, b: Point2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn region_from(bounds: [f64; 4], wavelength: f64, what: &str) -> Result<Region> {
    let r = Region {
        x_min: bounds[0] * wavelength,
        x_max: bounds[1] * wavelength,
        y_min: bounds[2] * wavelength,
        y_max: bounds[3] * wavelength,
    };
    if !(r.width() > 0.0 && r.height() > 0.0) {
        return Err(CisacError::Config(format!("{what} region is degenerate")));
    }
    Ok(r)
}

/// Validate a configuration and resolve it into a [`Scenario`].
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    let p = &config.phys;
    let phys = PhysConstants {
        wavelength: p.wavelength,
        speed_of_light: p.speed_of_light,
        ref_path_loss_db: p.ref_path_loss_db,
        ref_distance: p.ref_distance,
        noise_power: 10f64.powf((p.noise_power_dbm - 30.0) / 10.0),
        pathloss_exp_comm: p.pathloss_exp_comm,
        pathloss_exp_sense: p.pathloss_exp_sense,
        rcs: p.rcs,
    };
    phys.validate()?;

    let g = &config.geometry;
    if g.bs_positions.is_empty() {
        return Err(CisacError::Config("at least one BS is required".into()));
    }
    if g.user_positions.is_empty() {
        return Err(CisacError::Config("at least one user is required".into()));
    }
    let a = &config.array;
    if a.n_x == 0 || a.n_y == 0 || a.m_x == 0 || a.m_y == 0 {
        return Err(CisacError::Config("antenna counts must be >= 1".into()));
    }
    if a.paths == 0 {
        return Err(CisacError::Config("path count must be >= 1".into()));
    }
    if !(a.min_spacing > 0.0) {
        return Err(CisacError::Config("minimum spacing must be positive".into()));
    }
    let tx_region = region_from(a.tx_region, phys.wavelength, "transmit")?;
    let rx_region = region_from(a.rx_region, phys.wavelength, "receive")?;
    let min_spacing = a.min_spacing * phys.wavelength;

    for (region, count, what) in [
        (&tx_region, a.n_x * a.n_y, "transmit"),
        (&rx_region, a.m_x * a.m_y, "receive"),
    ] {
        let (cx, cy) = region.grid_capacity(min_spacing);
        if cx * cy < count {
            return Err(CisacError::Config(format!(
                "{what} region holds at most {} antennas at spacing D, {count} requested",
                cx * cy
            )));
        }
    }

    let e = &config.errors;
    if e.sync_std < 0.0 || e.angle_err_theta < 0.0 || e.angle_err_phi < 0.0 || e.gain_err < 0.0 {
        return Err(CisacError::Config("error bounds must be >= 0".into()));
    }
    let s = &config.sensing;
    if s.subcarriers == 0 || !(s.subcarrier_spacing_hz > 0.0) {
        return Err(CisacError::Config("sensing grid needs >= 1 subcarrier and positive spacing".into()));
    }
    if !(config.action.p_max > 0.0) || config.action.horizon == 0 {
        return Err(CisacError::Config("p_max and horizon must be positive".into()));
    }
    if config.targets.rate < 0.0 || config.targets.sensing < 0.0 {
        return Err(CisacError::Config("constraint targets must be >= 0".into()));
    }

    Ok(Scenario {
        phys,
        bs_positions: g.bs_positions.clone(),
        user_positions: g.user_positions.clone(),
        target: g.target,
        n_x: a.n_x,
        n_y: a.n_y,
        m_x: a.m_x,
        m_y: a.m_y,
        tx_region,
        rx_region,
        min_spacing,
        paths: a.paths,
        sync_std: e.sync_std,
        angle_err_theta: e.angle_err_theta,
        angle_err_phi: e.angle_err_phi,
        gain_err: e.gain_err,
        gain_err_mode: e.gain_err_mode,
        bound_model: e.bound_model,
        delay_noise: e.delay_noise,
        rate_target: config.targets.rate,
        sense_target: config.targets.sensing,
        subcarriers: s.subcarriers,
        subcarrier_spacing_hz: s.subcarrier_spacing_hz,
        pilots: s.pilots,
        monostatic_delay: s.monostatic_delay,
        action: config.action.clone(),
        seed: config.seed,
    })
}

/// Movable-antenna positions (meters, array-origin frame) for one BS.
#[derive(Debug, Clone, PartialEq)]
pub struct BsLayout {
    pub tx: Vec<Point2>,
    pub rx: Vec<Point2>,
}

/// Positions of every transmit and receive antenna in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MaLayout {
    pub bs: Vec<BsLayout>,
}

/// Smallest pairwise distance, `f64::INFINITY` for fewer than two points.
pub fn min_pairwise_distance(points: &[Point2]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.min(distance2(points[i], points[j]));
        }
    }
    best
}

/// Spacing check with a relative tolerance for lattice round-off.
pub fn spacing_ok(points: &[Point2], min_spacing: f64) -> bool {
    min_pairwise_distance(points) >= min_spacing * (1.0 - 1e-9)
}

impl MaLayout {
    pub fn tx_ok(&self, scenario: &Scenario, b: usize) -> bool {
        let l = &self.bs[b];
        l.tx.iter().all(|&p| scenario.tx_region.contains(p)) && spacing_ok(&l.tx, scenario.min_spacing)
    }

    pub fn rx_ok(&self, scenario: &Scenario, b: usize) -> bool {
        let l = &self.bs[b];
        l.rx.iter().all(|&p| scenario.rx_region.contains(p)) && spacing_ok(&l.rx, scenario.min_spacing)
    }

    /// Region membership and minimum spacing for every BS.
    pub fn is_feasible(&self, scenario: &Scenario) -> bool {
        self.bs.len() == scenario.num_bs()
            && (0..self.bs.len()).all(|b| {
                self.bs[b].tx.len() == scenario.num_tx()
                    && self.bs[b].rx.len() == scenario.num_rx()
                    && self.tx_ok(scenario, b)
                    && self.rx_ok(scenario, b)
            })
    }

    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        if self.is_feasible(scenario) {
            Ok(())
        } else {
            Err(CisacError::Infeasible("layout violates region or spacing constraints".into()))
        }
    }
}

/// `count` points on a `pitch` lattice centered in `region`, filling
/// `(nx, ny)` when it fits and row-major over the full capacity otherwise.
pub fn lattice_points(region: &Region, count: usize, nx: usize, ny: usize, pitch: f64) -> Result<Vec<Point2>> {
    let (cap_x, cap_y) = region.grid_capacity(pitch);
    if cap_x * cap_y < count {
        return Err(CisacError::Infeasible(format!(
            "region fits {} points at pitch {pitch:.4} m, {count} requested",
            cap_x * cap_y
        )));
    }
    let (gx, gy) = if nx <= cap_x && ny <= cap_y && nx * ny == count {
        (nx, ny)
    } else {
        let gx = cap_x.min(count);
        (gx, count.div_ceil(gx))
    };
    let c = region.center();
    let x0 = c[0] - 0.5 * (gx as f64 - 1.0) * pitch;
    let y0 = c[1] - 0.5 * (gy as f64 - 1.0) * pitch;
    let mut out = Vec::with_capacity(count);
    'outer: for iy in 0..gy {
        for ix in 0..gx {
            if out.len() == count {
                break 'outer;
            }
            out.push(region.clamp([x0 + ix as f64 * pitch, y0 + iy as f64 * pitch]));
        }
    }
    Ok(out)
}

/// Deterministic lattice layout at pitch D inside every region.
pub fn feasible_grid_layout(scenario: &Scenario) -> Result<MaLayout> {
    let d = scenario.min_spacing;
    let tx = lattice_points(&scenario.tx_region, scenario.num_tx(), scenario.n_x, scenario.n_y, d)?;
    let rx = lattice_points(&scenario.rx_region, scenario.num_rx(), scenario.m_x, scenario.m_y, d)?;
    let layout = MaLayout { bs: vec![BsLayout { tx, rx }; scenario.num_bs()] };
    debug_assert!(layout.is_feasible(scenario));
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_scenario() -> Scenario {
        build_scenario(&ScenarioConfig::default()).unwrap()
    }

    #[test]
    fn default_is_three_bs_two_user_setup() {
        let s = default_scenario();
        assert_eq!(s.num_bs(), 3);
        assert_eq!(s.num_users(), 2);
        assert_eq!((s.n_x, s.n_y, s.num_tx()), (4, 2, 8));
        assert_eq!((s.m_x, s.m_y, s.num_rx()), (2, 2, 4));
        assert!((s.min_spacing - 0.05).abs() < 1e-15);
        assert!((s.tx_region.x_max - 0.2).abs() < 1e-15);
        assert!((s.rx_region.y_min + 0.2).abs() < 1e-15);
        assert!((s.phys.noise_power - 1e-15).abs() < 1e-27);
    }

    #[test]
    fn empty_network_is_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.geometry.bs_positions.clear();
        assert!(matches!(build_scenario(&cfg), Err(CisacError::Config(_))));
    }

    #[test]
    fn overfull_region_is_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.array.n_x = 10;
        cfg.array.n_y = 10;
        cfg.array.tx_region = [-0.5, 0.5, -0.5, 0.5];
        assert!(matches!(build_scenario(&cfg), Err(CisacError::Config(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = default_scenario();
        let b = default_scenario();
        assert_eq!(a, b);
        use rand::Rng;
        let x: u64 = a.rng(Stream::Channel).random();
        let y: u64 = b.rng(Stream::Channel).random();
        assert_eq!(x, y);
        let z: u64 = a.rng(Stream::CsiError).random();
        assert_ne!(x, z);
    }

    #[test]
    fn path_loss_reference_values() {
        for omega in [0.0, 2.2, 2.8] {
            assert!((path_loss(1.0, omega, -30.0, 1.0).unwrap() - 1e-3).abs() < 1e-18);
        }
        assert!((path_loss(57.0, 0.0, -30.0, 1.0).unwrap() - 1e-3).abs() < 1e-18);
        // -30 dB - 20 dB = -50 dB
        let db = -30.0 - 20.0 * 10f64.log10();
        let expected = 10f64.powf(db / 10.0);
        assert!((path_loss(10.0, 2.0, -30.0, 1.0).unwrap() - expected).abs() < 1e-20);
        assert!((expected - 1e-5).abs() < 1e-20);
        assert!(path_loss(0.0, 2.0, -30.0, 1.0).is_err());
        assert!(path_loss(-1.0, 2.0, -30.0, 1.0).is_err());
    }

    #[test]
    fn grid_layout_is_half_wavelength_lattice() {
        let s = default_scenario();
        let layout = feasible_grid_layout(&s).unwrap();
        assert!(layout.is_feasible(&s));
        let tx = &layout.bs[0].tx;
        assert_eq!(tx.len(), 8);
        assert!((min_pairwise_distance(tx) - 0.05).abs() < 1e-12);
        let xs: std::collections::BTreeSet<i64> = tx.iter().map(|p| (p[0] * 1e9).round() as i64).collect();
        let ys: std::collections::BTreeSet<i64> = tx.iter().map(|p| (p[1] * 1e9).round() as i64).collect();
        assert_eq!((xs.len(), ys.len()), (4, 2));
    }

    #[test]
    fn single_antenna_sits_at_center() {
        let mut cfg = ScenarioConfig::default();
        cfg.array.n_x = 1;
        cfg.array.n_y = 1;
        cfg.array.tx_region = [0.0, 2.0, -1.0, 3.0];
        let s = build_scenario(&cfg).unwrap();
        let layout = feasible_grid_layout(&s).unwrap();
        let c = s.tx_region.center();
        assert!(distance2(layout.bs[0].tx[0], c) < 1e-15);
    }

    #[test]
    fn packing_bound_matches_grid_count() {
        // 1λ x 1λ at D = λ/2 holds floor(2*1)+1 = 3 points per axis.
        let region = Region::symmetric(0.05);
        assert_eq!(region.grid_capacity(0.05), (3, 3));
        assert!(matches!(lattice_points(&region, 100, 10, 10, 0.05), Err(CisacError::Infeasible(_))));
        assert_eq!(lattice_points(&region, 9, 3, 3, 0.05).unwrap().len(), 9);
    }

    #[test]
    fn split_count_shapes() {
        assert_eq!(ScenarioConfig::split_count(2), (2, 1));
        assert_eq!(ScenarioConfig::split_count(4), (2, 2));
        assert_eq!(ScenarioConfig::split_count(8), (4, 2));
        assert_eq!(ScenarioConfig::split_count(16), (4, 4));
        assert_eq!(ScenarioConfig::split_count(7), (7, 1));
    }

    #[test]
    fn presets_build() {
        for name in ["full", "default", "desk", "toy"] {
            let cfg = ScenarioConfig::preset(name).unwrap();
            let s = build_scenario(&cfg).unwrap();
            assert!(feasible_grid_layout(&s).unwrap().is_feasible(&s));
            let round = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            assert_eq!(round, cfg);
        }
        assert!(ScenarioConfig::preset("nope").is_err());
    }

    #[test]
    fn partial_config_file_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("seed = 9\n[array]\nn_x = 2\nn_y = 1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.array.n_x, 2);
        assert_eq!(cfg.array.m_x, 2);
        assert!(ScenarioConfig::from_toml_str("bogus = 1").is_err());
    }

    proptest::proptest! {
        #[test]
        fn path_loss_decreases_with_distance(d1 in 0.01f64..1e4, d2 in 0.01f64..1e4, omega in 0.1f64..4.0) {
            proptest::prop_assume!((d1 - d2).abs() > 1e-9 * d1.max(d2));
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            proptest::prop_assert!(path_loss(lo, omega, -30.0, 1.0).unwrap() > path_loss(hi, omega, -30.0, 1.0).unwrap());
        }
    }
}

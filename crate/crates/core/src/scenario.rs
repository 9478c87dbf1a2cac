//! Synthetic ground-truth generation.
//!
//! A [`Scenario`] bundles everything one Monte-Carlo trial needs: the cell
//! layout, user positions and activity, the true channel matrix `X` (users x
//! all access-point antennas), the pilot matrix `S`, and the per-access-point
//! noisy observations `R_b = S H_b + N_b`.
//!
//! Conventions:
//! * distances in km, powers in linear mW inside all computations; dB/dBm
//!   appear only at configuration boundaries,
//! * hexagons are flat-top with `cell_radius` measured centre-to-vertex, so
//!   adjacent access points are `sqrt(3) * cell_radius` apart,
//! * every random quantity is drawn from a named sub-stream of the scenario
//!   seed (see [`crate::seed`]), so `(config, seed)` reproduces bit-identical
//!   scenarios.

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Distance below which user-to-AP distances are clamped before path-loss
/// evaluation; the log-distance model diverges at zero range.
pub const MIN_DISTANCE_KM: f64 = 0.005;

/// Convert a dBm power to linear mW.
pub fn dbm_to_linear_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Log-distance path loss in dB for a distance in km.
///
/// Callers are expected to clamp `d` to a minimum range first; `d <= 0` is a
/// domain error.
pub fn path_loss_db(d_km: f64) -> Result<f64> {
    if d_km <= 0.0 || !d_km.is_finite() {
        return Err(Error::numerical(format!(
            "path loss undefined for distance {d_km} km"
        )));
    }
    Ok(128.1 + 37.6 * d_km.log10())
}

/// Amplitude gain corresponding to a path-loss attenuation in dB.
pub fn path_gain_amplitude(pl_db: f64) -> f64 {
    10f64.powf(-pl_db / 20.0)
}

fn complex_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * scale, im * scale)
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// Positions of the per-cell access points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkLayout {
    pub cell_radius_km: f64,
    /// One access point per cell, cell `b` at `ap_positions[b]`.
    pub ap_positions: Vec<[f64; 2]>,
}

impl NetworkLayout {
    /// Number of cells.
    pub fn cells(&self) -> usize {
        self.ap_positions.len()
    }

    /// Build a layout from explicit coordinates (for cell counts without a
    /// native packing).
    pub fn from_positions(cell_radius_km: f64, ap_positions: Vec<[f64; 2]>) -> Result<Self> {
        if cell_radius_km <= 0.0 {
            return Err(Error::config("cell radius must be positive"));
        }
        if ap_positions.is_empty() {
            return Err(Error::config("layout needs at least one access point"));
        }
        for i in 0..ap_positions.len() {
            for j in (i + 1)..ap_positions.len() {
                if ap_positions[i] == ap_positions[j] {
                    return Err(Error::config(format!(
                        "access points {i} and {j} share a position"
                    )));
                }
            }
        }
        Ok(NetworkLayout {
            cell_radius_km,
            ap_positions,
        })
    }

    pub fn distance(&self, b: usize, point: [f64; 2]) -> f64 {
        let ap = self.ap_positions[b];
        ((ap[0] - point[0]).powi(2) + (ap[1] - point[1]).powi(2)).sqrt()
    }
}

/// Deterministic hexagonal packing: a single cell, or a centre cell plus its
/// six first-tier neighbours. Other cell counts require explicit coordinates
/// via [`NetworkLayout::from_positions`].
pub fn generate_layout(cells: usize, cell_radius_km: f64) -> Result<NetworkLayout> {
    if cell_radius_km <= 0.0 {
        return Err(Error::config("cell radius must be positive"));
    }
    let r = cell_radius_km;
    let positions = match cells {
        1 => vec![[0.0, 0.0]],
        7 => {
            let half = 3f64.sqrt() / 2.0 * r;
            vec![
                [0.0, 0.0],
                [1.5 * r, half],
                [0.0, 3f64.sqrt() * r],
                [-1.5 * r, half],
                [-1.5 * r, -half],
                [0.0, -3f64.sqrt() * r],
                [1.5 * r, -half],
            ]
        }
        other => {
            return Err(Error::config(format!(
                "no native packing for {other} cells; supply explicit access-point coordinates"
            )))
        }
    };
    NetworkLayout::from_positions(cell_radius_km, positions)
}

/// True when `point` lies inside the flat-top hexagon of radius `r` centred
/// at `centre` (boundary inclusive).
pub fn inside_hexagon(centre: [f64; 2], r: f64, point: [f64; 2]) -> bool {
    let dx = (point[0] - centre[0]).abs();
    let dy = (point[1] - centre[1]).abs();
    let sqrt3 = 3f64.sqrt();
    dy <= sqrt3 / 2.0 * r && sqrt3 * dx + dy <= sqrt3 * r
}

// ---------------------------------------------------------------------------
// Users and activity
// ---------------------------------------------------------------------------

/// How the set of active users is drawn.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ActivityModel {
    /// Exactly `count` active users network-wide, chosen uniformly.
    GlobalCount { count: usize },
    /// A fixed fraction of all users, rounded to the nearest integer.
    GlobalFraction { fraction: f64 },
    /// Exactly `count` active users in every cell.
    PerCellCount { count: usize },
    /// Independent activation with the given probability.
    Bernoulli { probability: f64 },
}

/// User placement and activity for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UserPopulation {
    pub positions: Vec<[f64; 2]>,
    pub home_cell: Vec<usize>,
    pub activity: Vec<bool>,
    pub users_per_cell: usize,
}

impl UserPopulation {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.activity.iter().filter(|&&a| a).count()
    }
}

/// Place `users_per_cell` users uniformly inside each cell's hexagon.
///
/// Rejection sampling from the hexagon's bounding box; exactly uniform and
/// reproducible from the seed. Activity is left all-inactive; see
/// [`draw_activity`].
pub fn place_users(layout: &NetworkLayout, users_per_cell: usize, seed: u64) -> Result<UserPopulation> {
    if users_per_cell == 0 {
        return Err(Error::config("users_per_cell must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = layout.cell_radius_km;
    let half_height = 3f64.sqrt() / 2.0 * r;
    let mut positions = Vec::with_capacity(layout.cells() * users_per_cell);
    let mut home_cell = Vec::with_capacity(layout.cells() * users_per_cell);
    for (b, ap) in layout.ap_positions.iter().enumerate() {
        for _ in 0..users_per_cell {
            loop {
                let x = rng.random_range(-r..=r);
                let y = rng.random_range(-half_height..=half_height);
                let p = [ap[0] + x, ap[1] + y];
                if inside_hexagon(*ap, r, p) {
                    positions.push(p);
                    home_cell.push(b);
                    break;
                }
            }
        }
    }
    let total = positions.len();
    Ok(UserPopulation {
        positions,
        home_cell,
        activity: vec![false; total],
        users_per_cell,
    })
}

/// Draw an activity vector over `users` users (grouped in cells of
/// `users_per_cell` for the per-cell mode).
pub fn draw_activity(
    users: usize,
    users_per_cell: usize,
    model: ActivityModel,
    seed: u64,
) -> Result<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut activity = vec![false; users];
    match model {
        ActivityModel::GlobalCount { count } => {
            if count > users {
                return Err(Error::config(format!(
                    "requested {count} active users out of {users}"
                )));
            }
            for idx in rand::seq::index::sample(&mut rng, users, count) {
                activity[idx] = true;
            }
        }
        ActivityModel::GlobalFraction { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::config("active fraction must lie in [0, 1]"));
            }
            let count = (fraction * users as f64).round() as usize;
            for idx in rand::seq::index::sample(&mut rng, users, count.min(users)) {
                activity[idx] = true;
            }
        }
        ActivityModel::PerCellCount { count } => {
            if users_per_cell == 0 || users % users_per_cell != 0 {
                return Err(Error::config("per-cell activity needs equal-size cells"));
            }
            if count > users_per_cell {
                return Err(Error::config(format!(
                    "requested {count} active users in cells of {users_per_cell}"
                )));
            }
            let cells = users / users_per_cell;
            for b in 0..cells {
                for idx in rand::seq::index::sample(&mut rng, users_per_cell, count) {
                    activity[b * users_per_cell + idx] = true;
                }
            }
        }
        ActivityModel::Bernoulli { probability } => {
            if !(0.0..=1.0).contains(&probability) {
                return Err(Error::config("activation probability must lie in [0, 1]"));
            }
            for a in activity.iter_mut() {
                *a = rng.random_range(0.0..1.0) < probability;
            }
        }
    }
    Ok(activity)
}

// ---------------------------------------------------------------------------
// Channels
// ---------------------------------------------------------------------------

/// Small-scale multipath channel for one user-AP link: a sum of `paths`
/// unit-variance complex path gains, each steering a uniform linear array of
/// `antennas` elements at half-wavelength spacing.
pub fn draw_small_scale_channel(antennas: usize, paths: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); antennas];
    for _ in 0..paths {
        let beta = complex_gaussian(rng, 1.0);
        let aoa: f64 = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let phi = 0.5 * aoa.sin();
        for (m, entry) in h.iter_mut().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * phi * m as f64;
            *entry += beta * Complex64::new(phase.cos(), phase.sin());
        }
    }
    h
}

/// Seeded wrapper around [`draw_small_scale_channel`].
pub fn draw_small_scale_channel_seeded(antennas: usize, paths: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_small_scale_channel(antennas, paths, &mut rng)
}

/// Assemble the full channel matrix `X` (users x all AP antennas).
///
/// The block for user `k` and access point `b` is
/// `alpha_k * sqrt(P_mw) * g_{b,k} * h_{b,k}`, with `g` the amplitude path
/// gain after clamping the distance to `min_distance_km`, and the per-link
/// path count drawn uniformly from `path_range` (inclusive).
///
/// RNG consumption order is user-major, then access point; this order is part
/// of the reproducibility contract.
#[allow(clippy::too_many_arguments)]
pub fn assemble_channel_matrix(
    population: &UserPopulation,
    layout: &NetworkLayout,
    antennas_per_ap: usize,
    power_dbm: f64,
    path_range: (usize, usize),
    min_distance_km: f64,
    seed: u64,
) -> Result<Array2<Complex64>> {
    if antennas_per_ap == 0 {
        return Err(Error::config("antennas_per_ap must be at least 1"));
    }
    let (lo, hi) = path_range;
    if lo == 0 || hi < lo {
        return Err(Error::config("path count range must satisfy 1 <= lo <= hi"));
    }
    if population.home_cell.iter().any(|&b| b >= layout.cells()) {
        return Err(Error::dimension(
            "population references a cell outside the layout",
        ));
    }
    let users = population.len();
    let cells = layout.cells();
    let amplitude = dbm_to_linear_mw(power_dbm).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((users, cells * antennas_per_ap));
    for k in 0..users {
        for b in 0..cells {
            let paths = rng.random_range(lo..=hi);
            let small = draw_small_scale_channel(antennas_per_ap, paths, &mut rng);
            if !population.activity[k] {
                continue; // row stays zero; RNG still consumed for pairing
            }
            let d = layout.distance(b, population.positions[k]).max(min_distance_km);
            let gain = path_gain_amplitude(path_loss_db(d)?);
            for (m, &h) in small.iter().enumerate() {
                x[[k, b * antennas_per_ap + m]] = h * (amplitude * gain);
            }
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Pilots and observations
// ---------------------------------------------------------------------------

/// I.i.d. unit-variance circularly-symmetric complex Gaussian pilot matrix
/// (`pilot_length` x `users`).
pub fn generate_pilots(pilot_length: usize, users: usize, seed: u64) -> Result<Array2<Complex64>> {
    if pilot_length == 0 || users == 0 {
        return Err(Error::config("pilot matrix needs positive dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array2::from_shape_fn((pilot_length, users), |_| {
        complex_gaussian(&mut rng, 1.0)
    }))
}

/// Per-access-point noisy observations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Observation {
    /// One `G x M_c` block per access point, in access-point order.
    pub per_ap: Vec<Array2<Complex64>>,
    /// Linear noise power per receive dimension.
    pub noise_variance: f64,
    /// Seed that re-synthesizes the noise realization exactly.
    pub noise_seed: u64,
}

impl Observation {
    pub fn pilot_length(&self) -> usize {
        self.per_ap.first().map_or(0, |r| r.nrows())
    }

    pub fn antennas_per_ap(&self) -> usize {
        self.per_ap.first().map_or(0, |r| r.ncols())
    }
}

/// Draw the noise matrices `N_b` for the given seed; AP-major, row-major
/// within each block. This order is part of the reproducibility contract.
pub fn synthesize_noise(
    cells: usize,
    pilot_length: usize,
    antennas_per_ap: usize,
    noise_variance: f64,
    seed: u64,
) -> Vec<Array2<Complex64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cells)
        .map(|_| {
            Array2::from_shape_fn((pilot_length, antennas_per_ap), |_| {
                complex_gaussian(&mut rng, noise_variance)
            })
        })
        .collect()
}

/// Form `R_b = S H_b + N_b` for every access point.
pub fn synthesize_observation(
    pilots: &Array2<Complex64>,
    channel: &Array2<Complex64>,
    antennas_per_ap: usize,
    noise_variance: f64,
    seed: u64,
) -> Result<Observation> {
    if pilots.ncols() != channel.nrows() {
        return Err(Error::dimension(format!(
            "pilots are for {} users but the channel has {} rows",
            pilots.ncols(),
            channel.nrows()
        )));
    }
    if antennas_per_ap == 0 || channel.ncols() % antennas_per_ap != 0 {
        return Err(Error::dimension(format!(
            "channel width {} is not a multiple of {} antennas per access point",
            channel.ncols(),
            antennas_per_ap
        )));
    }
    if noise_variance < 0.0 || !noise_variance.is_finite() {
        return Err(Error::config("noise power must be finite and non-negative"));
    }
    let cells = channel.ncols() / antennas_per_ap;
    let noise = synthesize_noise(cells, pilots.nrows(), antennas_per_ap, noise_variance, seed);
    let mut per_ap = Vec::with_capacity(cells);
    for (b, n_b) in noise.into_iter().enumerate() {
        let h_b = channel.slice(s![.., b * antennas_per_ap..(b + 1) * antennas_per_ap]);
        let mut r_b = pilots.dot(&h_b);
        if noise_variance > 0.0 {
            r_b += &n_b;
        }
        per_ap.push(r_b);
    }
    Ok(Observation {
        per_ap,
        noise_variance,
        noise_seed: seed,
    })
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Scenario generation parameters; all values at configuration (dB) scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    pub cells: usize,
    pub users_per_cell: usize,
    pub cell_radius_km: f64,
    pub activity: ActivityModel,
    pub transmit_power_dbm: f64,
    pub noise_density_dbm_hz: f64,
    pub bandwidth_hz: f64,
    pub path_count_min: usize,
    pub path_count_max: usize,
    pub antennas_per_ap: usize,
    pub pilot_length: usize,
    /// Slots per frame; only the first `pilot_length` carry pilots. Recorded
    /// for bookkeeping, otherwise unused.
    pub frame_length: usize,
    #[serde(default = "default_min_distance")]
    pub min_distance_km: f64,
    /// Explicit AP coordinates for cell counts without a native packing.
    #[serde(default)]
    pub ap_positions: Option<Vec<[f64; 2]>>,
}

fn default_min_distance() -> f64 {
    MIN_DISTANCE_KM
}

impl ScenarioConfig {
    pub fn users(&self) -> usize {
        self.cells * self.users_per_cell
    }

    pub fn total_antennas(&self) -> usize {
        self.cells * self.antennas_per_ap
    }

    /// Linear noise power in mW over the configured bandwidth.
    pub fn noise_power_mw(&self) -> f64 {
        dbm_to_linear_mw(self.noise_density_dbm_hz + 10.0 * self.bandwidth_hz.log10())
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::config("need at least one cell"));
        }
        if self.users_per_cell == 0 {
            return Err(Error::config("users_per_cell must be at least 1"));
        }
        if self.cell_radius_km <= 0.0 {
            return Err(Error::config("cell radius must be positive"));
        }
        if self.antennas_per_ap == 0 {
            return Err(Error::config("antennas_per_ap must be at least 1"));
        }
        if self.pilot_length == 0 {
            return Err(Error::config("pilot_length must be at least 1"));
        }
        if self.frame_length < self.pilot_length {
            return Err(Error::config("frame_length must be at least pilot_length"));
        }
        if self.path_count_min == 0 || self.path_count_max < self.path_count_min {
            return Err(Error::config("path count range must satisfy 1 <= min <= max"));
        }
        if self.bandwidth_hz <= 0.0 {
            return Err(Error::config("bandwidth must be positive"));
        }
        if self.min_distance_km <= 0.0 {
            return Err(Error::config("min_distance_km must be positive"));
        }
        if let Some(pos) = &self.ap_positions {
            if pos.len() != self.cells {
                return Err(Error::config(format!(
                    "{} explicit access-point positions for {} cells",
                    pos.len(),
                    self.cells
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<NetworkLayout> {
        match &self.ap_positions {
            Some(pos) => NetworkLayout::from_positions(self.cell_radius_km, pos.clone()),
            None => generate_layout(self.cells, self.cell_radius_km),
        }
    }
}

/// Full synthetic ground truth for one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub layout: NetworkLayout,
    pub users: UserPopulation,
    /// True channel matrix `X`, users x all AP antennas.
    pub channel: Array2<Complex64>,
    /// Pilot matrix `S`, pilot_length x users.
    pub pilots: Array2<Complex64>,
    pub observation: Observation,
}

impl Scenario {
    pub fn generate(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
        config.validate()?;
        let layout = config.layout()?;
        let mut users = place_users(&layout, config.users_per_cell, seed::derive(seed, stream::POSITIONS))?;
        users.activity = draw_activity(
            users.len(),
            config.users_per_cell,
            config.activity,
            seed::derive(seed, stream::ACTIVITY),
        )?;
        let channel = assemble_channel_matrix(
            &users,
            &layout,
            config.antennas_per_ap,
            config.transmit_power_dbm,
            (config.path_count_min, config.path_count_max),
            config.min_distance_km,
            seed::derive(seed, stream::CHANNELS),
        )?;
        let pilots = generate_pilots(
            config.pilot_length,
            users.len(),
            seed::derive(seed, stream::PILOTS),
        )?;
        let observation = synthesize_observation(
            &pilots,
            &channel,
            config.antennas_per_ap,
            config.noise_power_mw(),
            seed::derive(seed, stream::NOISE),
        )?;
        Ok(Scenario {
            config: config.clone(),
            seed,
            layout,
            users,
            channel,
            pilots,
            observation,
        })
    }

    /// FNV-1a digest over the scenario's numerical content. Used to assert
    /// that paired deployments really consumed the same scenario.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.seed);
        h.write_u64(self.users.len() as u64);
        for p in &self.users.positions {
            h.write_f64(p[0]);
            h.write_f64(p[1]);
        }
        for &a in &self.users.activity {
            h.write_u64(a as u64);
        }
        for v in self.channel.iter().chain(self.pilots.iter()) {
            h.write_f64(v.re);
            h.write_f64(v.im);
        }
        for block in &self.observation.per_ap {
            for v in block.iter() {
                h.write_f64(v.re);
                h.write_f64(v.im);
            }
        }
        h.finish()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x1000_0000_01b3);
        }
    }
    fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

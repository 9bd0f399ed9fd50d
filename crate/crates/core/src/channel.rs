//! Synthetic site generator and channel synthesizer.
//!
//! A [`Scenario`] describes a 2D site: BS position, a rectangular UE region,
//! point scatterers with reflection loss, and line-segment blockers with
//! penetration loss. Channels are superpositions of the line-of-sight path
//! and one first-order reflection per visible scatterer, with a common
//! log-normal shadowing draw per realization.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math::complexmat::norm_sqr;
use crate::rng::{stream, substream};

/// Loss floor below which a path is dropped (linear power gain).
const PATH_GAIN_FLOOR: f64 = 1e-30;

/// Retries per UE index when a draw produces an empty channel.
const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }
}

/// Point reflector with a reflection loss in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: [f64; 2],
    pub reflection_loss_db: f64,
}

/// Line-segment obstacle. `penetration_loss_db: None` means opaque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blocker {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub penetration_loss_db: Option<f64>,
}

/// Geometric site description from which channels are synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub bs_position: [f64; 2],
    pub ue_region: Rect,
    #[serde(default)]
    pub scatterers: Vec<Scatterer>,
    #[serde(default)]
    pub blockers: Vec<Blocker>,
    /// Carrier wavelength in meters.
    pub wavelength_m: f64,
    pub num_antennas: usize,
    /// Element spacing in meters (half wavelength by default).
    pub antenna_spacing_m: f64,
    /// Path loss exponent, between 2 and 4.
    pub pathloss_exponent: f64,
    /// Reference gain at 1 m, linear.
    pub reference_gain: f64,
    /// Log-variance of the shadowing in dB².
    pub shadow_db_var: f64,
    pub max_paths: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig { message: m });
        if self.num_antennas < 2 {
            return bad(format!("num_antennas must be >= 2, got {}", self.num_antennas));
        }
        if !(2.0..=4.0).contains(&self.pathloss_exponent) {
            return bad(format!(
                "pathloss_exponent must lie in [2, 4], got {}",
                self.pathloss_exponent
            ));
        }
        if self.shadow_db_var < 0.0 {
            return bad("shadow_db_var must be >= 0".into());
        }
        if self.ue_region.x_max <= self.ue_region.x_min
            || self.ue_region.y_max <= self.ue_region.y_min
        {
            return bad("ue_region is degenerate".into());
        }
        if self.wavelength_m <= 0.0 || self.antenna_spacing_m <= 0.0 {
            return bad("wavelength_m and antenna_spacing_m must be positive".into());
        }
        if self.reference_gain <= 0.0 {
            return bad("reference_gain must be positive".into());
        }
        if self.max_paths < 1 {
            return bad("max_paths must be >= 1".into());
        }
        Ok(())
    }

    pub fn spacing_over_wavelength(&self) -> f64 {
        self.antenna_spacing_m / self.wavelength_m
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|_| CoreError::MissingArtifact {
            path: path.display().to_string(),
        })?;
        let sc: Scenario = serde_json::from_str(&text).map_err(|e| CoreError::InvalidConfig {
            message: format!("{}: {}", path.display(), e),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    /// Stable content hash used to tie datasets to the scenario that
    /// produced them.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("scenario serializes"));
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Wavelength at 28 GHz, the carrier both presets use.
pub const WAVELENGTH_28GHZ_M: f64 = 299_792_458.0 / 28.0e9;

/// Open region with weak scatterers; line of sight everywhere.
pub fn los_park(num_antennas: usize) -> Scenario {
    Scenario {
        name: "los_park".into(),
        bs_position: [0.0, 0.0],
        ue_region: Rect {
            x_min: 30.0,
            x_max: 130.0,
            y_min: -50.0,
            y_max: 50.0,
        },
        scatterers: vec![
            Scatterer {
                position: [60.0, 35.0],
                reflection_loss_db: 18.0,
            },
            Scatterer {
                position: [90.0, -40.0],
                reflection_loss_db: 20.0,
            },
            Scatterer {
                position: [40.0, -25.0],
                reflection_loss_db: 16.0,
            },
        ],
        blockers: vec![],
        wavelength_m: WAVELENGTH_28GHZ_M,
        num_antennas,
        antenna_spacing_m: WAVELENGTH_28GHZ_M / 2.0,
        pathloss_exponent: 2.6,
        reference_gain: reference_gain_at_1m(WAVELENGTH_28GHZ_M),
        shadow_db_var: 1.0,
        max_paths: 4,
    }
}

/// Central opaque wall plus stronger reflectors; mixed LoS/NLoS.
pub fn blocked_street(num_antennas: usize) -> Scenario {
    Scenario {
        name: "blocked_street".into(),
        bs_position: [0.0, 0.0],
        ue_region: Rect {
            x_min: 30.0,
            x_max: 130.0,
            y_min: -50.0,
            y_max: 50.0,
        },
        scatterers: vec![
            Scatterer {
                position: [45.0, 40.0],
                reflection_loss_db: 8.0,
            },
            Scatterer {
                position: [50.0, -45.0],
                reflection_loss_db: 9.0,
            },
            Scatterer {
                position: [70.0, 45.0],
                reflection_loss_db: 7.0,
            },
            Scatterer {
                position: [85.0, -50.0],
                reflection_loss_db: 8.0,
            },
            Scatterer {
                position: [110.0, 30.0],
                reflection_loss_db: 9.0,
            },
            Scatterer {
                position: [35.0, -15.0],
                reflection_loss_db: 10.0,
            },
        ],
        blockers: vec![Blocker {
            start: [55.0, -25.0],
            end: [55.0, 20.0],
            penetration_loss_db: None,
        }],
        wavelength_m: WAVELENGTH_28GHZ_M,
        num_antennas,
        antenna_spacing_m: WAVELENGTH_28GHZ_M / 2.0,
        pathloss_exponent: 2.6,
        reference_gain: reference_gain_at_1m(WAVELENGTH_28GHZ_M),
        shadow_db_var: 1.0,
        max_paths: 5,
    }
}

/// Free-space gain at a 1 m reference distance.
pub fn reference_gain_at_1m(wavelength_m: f64) -> f64 {
    let r = wavelength_m / (4.0 * std::f64::consts::PI);
    r * r
}

pub fn preset(name: &str, num_antennas: usize) -> Result<Scenario> {
    match name {
        "los_park" => Ok(los_park(num_antennas)),
        "blocked_street" => Ok(blocked_street(num_antennas)),
        other => Err(CoreError::InvalidConfig {
            message: format!("unknown preset '{other}' (try los_park or blocked_street)"),
        }),
    }
}

/// One resolved propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    /// Angle of departure at the BS array broadside, radians.
    pub aod_rad: f64,
    /// Linear amplitude, the square root of the large-scale power gain.
    pub amplitude: f64,
    /// Propagation phase, uniform on [-pi, pi).
    pub phase_rad: f64,
    pub distance_m: f64,
    /// True when the path crossed at least one (finite-loss) blocker.
    pub blocked: bool,
    pub line_of_sight: bool,
}

impl PropagationPath {
    pub fn power_gain(&self) -> f64 {
        self.amplitude * self.amplitude
    }
}

/// The resolved paths for one BS–UE link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<PropagationPath>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn has_line_of_sight(&self) -> bool {
        self.paths.iter().any(|p| p.line_of_sight && !p.blocked)
    }
}

/// A channel vector together with everything needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<Complex64>,
    pub paths: PathSet,
    /// Common large-scale shadowing draw, linear.
    pub shadow_linear: f64,
    pub ue_position: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Transmit steering vector of a uniform linear array: element `n` carries
/// phase 2π (d/λ) n sin φ, referenced to element 0, angle from broadside.
pub fn steering_vector(aod_rad: f64, num_antennas: usize, d_over_lambda: f64) -> Vec<Complex64> {
    let step = 2.0 * std::f64::consts::PI * d_over_lambda * aod_rad.sin();
    (0..num_antennas)
        .map(|n| Complex64::from_polar(1.0, step * n as f64))
        .collect()
}

fn orientation(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Segment intersection including endpoint touching and collinear overlap.
pub fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orientation(q1, q2, p1);
    let d2 = orientation(q1, q2, p2);
    let d3 = orientation(p1, p2, q1);
    let d4 = orientation(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Sum of penetration losses along a segment; infinite when any crossed
/// blocker is opaque.
fn blockage_loss_db(scenario: &Scenario, from: [f64; 2], to: [f64; 2]) -> f64 {
    let mut loss = 0.0;
    for b in &scenario.blockers {
        if segments_intersect(from, to, b.start, b.end) {
            match b.penetration_loss_db {
                Some(db) => loss += db,
                None => return f64::INFINITY,
            }
        }
    }
    loss
}

struct CandidatePath {
    aod_rad: f64,
    beta: f64,
    distance_m: f64,
    blocked: bool,
    line_of_sight: bool,
}

/// Resolves the deterministic path geometry for one UE, then draws one
/// propagation phase per surviving path.
pub fn trace_paths(scenario: &Scenario, ue: [f64; 2], rng: &mut impl Rng) -> Result<PathSet> {
    if !scenario.ue_region.contains(ue) {
        return Err(CoreError::InvalidConfig {
            message: format!("UE ({}, {}) outside ue_region", ue[0], ue[1]),
        });
    }
    let bs = scenario.bs_position;
    let mut candidates: Vec<CandidatePath> = Vec::with_capacity(1 + scenario.scatterers.len());

    let los_block = blockage_loss_db(scenario, bs, ue);
    if los_block.is_finite() {
        let d = distance(bs, ue);
        let beta = scenario.reference_gain
            * d.powf(-scenario.pathloss_exponent)
            * db_to_linear(-los_block);
        candidates.push(CandidatePath {
            aod_rad: (ue[1] - bs[1]).atan2(ue[0] - bs[0]),
            beta,
            distance_m: d,
            blocked: los_block > 0.0,
            line_of_sight: true,
        });
    }

    for s in &scenario.scatterers {
        let leg_a = blockage_loss_db(scenario, bs, s.position);
        let leg_b = blockage_loss_db(scenario, s.position, ue);
        let extra = leg_a + leg_b;
        if !extra.is_finite() {
            continue;
        }
        let d = distance(bs, s.position) + distance(s.position, ue);
        let beta = scenario.reference_gain
            * d.powf(-scenario.pathloss_exponent)
            * db_to_linear(-(s.reflection_loss_db + extra));
        candidates.push(CandidatePath {
            aod_rad: (s.position[1] - bs[1]).atan2(s.position[0] - bs[0]),
            beta,
            distance_m: d,
            blocked: extra > 0.0,
            line_of_sight: false,
        });
    }

    candidates.retain(|c| c.beta > PATH_GAIN_FLOOR);
    if candidates.is_empty() {
        return Err(CoreError::EmptyChannel { x: ue[0], y: ue[1] });
    }

    // Keep the strongest max_paths, then restore the stable LoS-first order
    // so phase draws stay deterministic.
    if candidates.len() > scenario.max_paths {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            candidates[b]
                .beta
                .partial_cmp(&candidates[a].beta)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut keep = vec![false; candidates.len()];
        for &i in order.iter().take(scenario.max_paths) {
            keep[i] = true;
        }
        let mut i = 0;
        candidates.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    let paths = candidates
        .into_iter()
        .map(|c| PropagationPath {
            aod_rad: c.aod_rad,
            amplitude: c.beta.sqrt(),
            phase_rad: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            distance_m: c.distance_m,
            blocked: c.blocked,
            line_of_sight: c.line_of_sight,
        })
        .collect();
    Ok(PathSet { paths })
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// h = Σ_l √(S β_l) e^{jψ_l} a(φ_l). Pure in its inputs; storing the path
/// set and shadow draw regenerates the channel bit-exact.
pub fn synthesize_channel(
    paths: &PathSet,
    shadow_linear: f64,
    scenario: &Scenario,
    ue_position: [f64; 2],
) -> Result<ChannelRealization> {
    let n = scenario.num_antennas;
    let d_over_lambda = scenario.spacing_over_wavelength();
    let mut h = vec![Complex64::new(0.0, 0.0); n];
    let mut total_beta = 0.0;
    for p in &paths.paths {
        let gain = (shadow_linear * p.power_gain()).sqrt();
        total_beta += p.power_gain();
        let rot = Complex64::from_polar(gain, p.phase_rad);
        for (hn, a) in h.iter_mut().zip(steering_vector(p.aod_rad, n, d_over_lambda)) {
            *hn += rot * a;
        }
    }
    // Reject destructively-cancelled channels: compare coherent power to the
    // incoherent budget.
    let budget = shadow_linear * total_beta * n as f64;
    if norm_sqr(&h) <= 1e-20 * budget || budget == 0.0 {
        return Err(CoreError::EmptyChannel {
            x: ue_position[0],
            y: ue_position[1],
        });
    }
    Ok(ChannelRealization {
        h,
        paths: paths.clone(),
        shadow_linear,
        ue_position,
    })
}

fn draw_shadow(shadow_db_var: f64, rng: &mut impl Rng) -> f64 {
    if shadow_db_var == 0.0 {
        return 1.0;
    }
    let db: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * shadow_db_var.sqrt();
    db_to_linear(db)
}

/// How UE positions are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    Uniform,
    Grid,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub realization: ChannelRealization,
    pub split: SplitTag,
}

/// Channels for a set of UE positions, split 80/10/10 by index.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub scenario: Scenario,
    pub seed: u64,
    pub placement: PlacementMode,
    pub entries: Vec<DatasetEntry>,
}

fn split_for_index(i: usize, n: usize) -> SplitTag {
    let train_end = (n * 8) / 10;
    let val_end = (n * 9) / 10;
    if i < train_end {
        SplitTag::Train
    } else if i < val_end {
        SplitTag::Val
    } else {
        SplitTag::Test
    }
}

fn grid_position(region: &Rect, i: usize, n: usize) -> [f64; 2] {
    let side = (n as f64).sqrt().ceil() as usize;
    let (r, c) = (i / side, i % side);
    let fx = (c as f64 + 0.5) / side as f64;
    let fy = (r as f64 + 0.5) / side as f64;
    [
        region.x_min + fx * (region.x_max - region.x_min),
        region.y_min + fy * (region.y_max - region.y_min),
    ]
}

/// Generates one entry; independent RNG streams per (seed, index, attempt)
/// make serial and parallel generation agree bit-exact.
fn generate_entry(
    scenario: &Scenario,
    seed: u64,
    index: usize,
    total: usize,
    placement: PlacementMode,
) -> Result<DatasetEntry> {
    for attempt in 0..MAX_RETRIES {
        let draw_id = (index as u64) * (MAX_RETRIES as u64 + 1) + attempt as u64;
        let pos = match placement {
            PlacementMode::Uniform => {
                let mut rng = substream(seed, stream::UE_POSITION, draw_id);
                [
                    rng.gen_range(scenario.ue_region.x_min..scenario.ue_region.x_max),
                    rng.gen_range(scenario.ue_region.y_min..scenario.ue_region.y_max),
                ]
            }
            PlacementMode::Grid => grid_position(&scenario.ue_region, index, total),
        };
        let mut path_rng = substream(seed, stream::PATH_PHASE, draw_id);
        let paths = match trace_paths(scenario, pos, &mut path_rng) {
            Ok(p) => p,
            Err(CoreError::EmptyChannel { .. }) if placement == PlacementMode::Uniform => continue,
            Err(e) => return Err(e),
        };
        let mut shadow_rng = substream(seed, stream::SHADOWING, draw_id);
        let shadow = draw_shadow(scenario.shadow_db_var, &mut shadow_rng);
        match synthesize_channel(&paths, shadow, scenario, pos) {
            Ok(real) => {
                return Ok(DatasetEntry {
                    realization: real,
                    split: split_for_index(index, total),
                })
            }
            Err(CoreError::EmptyChannel { .. }) if placement == PlacementMode::Uniform => continue,
            Err(e) => return Err(e),
        }
    }
    Err(CoreError::RetriesExhausted {
        index,
        retries: MAX_RETRIES,
    })
}

/// Draws `n_ues` positions and synthesizes their channels, deterministically
/// under `seed`. `threads` > 1 parallelizes over UEs with identical output.
pub fn generate_dataset(
    scenario: &Scenario,
    n_ues: usize,
    seed: u64,
    placement: PlacementMode,
    threads: usize,
) -> Result<SiteDataset> {
    scenario.validate()?;
    if n_ues == 0 {
        return Err(CoreError::DatasetTooSmall {
            what: "generate_dataset",
            needed: 1,
            got: 0,
        });
    }
    let entries: Vec<Result<DatasetEntry>> = if threads <= 1 {
        (0..n_ues)
            .map(|i| generate_entry(scenario, seed, i, n_ues, placement))
            .collect()
    } else {
        let mut out: Vec<Option<Result<DatasetEntry>>> = (0..n_ues).map(|_| None).collect();
        let chunk = n_ues.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slice) in out.chunks_mut(chunk).enumerate() {
                let base = t * chunk;
                scope.spawn(move || {
                    for (off, slot) in slice.iter_mut().enumerate() {
                        *slot =
                            Some(generate_entry(scenario, seed, base + off, n_ues, placement));
                    }
                });
            }
        });
        out.into_iter().map(|o| o.expect("entry computed")).collect()
    };
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SiteDataset {
        scenario: scenario.clone(),
        seed,
        placement,
        entries,
    })
}

/// Phase-conjugate beam: w_n = exp(j∠h_n). Optimal among per-element
/// unit-modulus beamformers.
pub fn mrt_beamformer(h: &[Complex64]) -> Result<Vec<Complex64>> {
    if norm_sqr(h) == 0.0 {
        return Err(CoreError::ZeroChannel);
    }
    Ok(h.iter()
        .map(|v| Complex64::from_polar(1.0, v.arg()))
        .collect())
}

impl SiteDataset {
    pub fn indices(&self, split: SplitTag) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn channel(&self, index: usize) -> &ChannelRealization {
        &self.entries[index].realization
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn los_fraction(&self) -> f64 {
        let los = self
            .entries
            .iter()
            .filter(|e| e.realization.paths.has_line_of_sight())
            .count();
        los as f64 / self.entries.len().max(1) as f64
    }

    pub fn mean_path_count(&self) -> f64 {
        let total: usize = self.entries.iter().map(|e| e.realization.paths.len()).sum();
        total as f64 / self.entries.len().max(1) as f64
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = DatasetFile {
            scenario_hash: self.scenario.content_hash(),
            scenario: self.scenario.clone(),
            seed: self.seed,
            placement: self.placement,
            n_ues: self.entries.len(),
            entries: self
                .entries
                .iter()
                .map(|e| StoredEntry {
                    ue_position: e.realization.ue_position,
                    shadow_linear: e.realization.shadow_linear,
                    paths: e.realization.paths.clone(),
                    split: e.split,
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    /// Loads a dataset, regenerating channel vectors from stored paths and
    /// shadowing draws.
    pub fn load_json(path: &Path) -> Result<SiteDataset> {
        let text = std::fs::read_to_string(path).map_err(|_| CoreError::MissingArtifact {
            path: path.display().to_string(),
        })?;
        let file: DatasetFile = serde_json::from_str(&text)?;
        if file.scenario.content_hash() != file.scenario_hash {
            return Err(CoreError::InvalidConfig {
                message: format!("{}: scenario hash mismatch", path.display()),
            });
        }
        let entries = file
            .entries
            .into_iter()
            .map(|e| {
                synthesize_channel(&e.paths, e.shadow_linear, &file.scenario, e.ue_position)
                    .map(|realization| DatasetEntry {
                        realization,
                        split: e.split,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SiteDataset {
            scenario: file.scenario,
            seed: file.seed,
            placement: file.placement,
            entries,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredEntry {
    ue_position: [f64; 2],
    shadow_linear: f64,
    paths: PathSet,
    split: SplitTag,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    scenario_hash: String,
    scenario: Scenario,
    seed: u64,
    placement: PlacementMode,
    n_ues: usize,
    entries: Vec<StoredEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn bare_scenario() -> Scenario {
        Scenario {
            scatterers: vec![],
            ..los_park(4)
        }
    }

    #[test]
    fn steering_broadside_all_ones() {
        let a = steering_vector(0.0, 4, 0.5);
        for v in a {
            assert_eq!(v, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn steering_endfire_alternates() {
        // exp(jπn) = [1, -1, 1, -1]
        let a = steering_vector(FRAC_PI_2, 4, 0.5);
        for (n, v) in a.iter().enumerate() {
            let want = if n % 2 == 0 { 1.0 } else { -1.0 };
            assert!((v.re - want).abs() < 1e-12 && v.im.abs() < 1e-12, "n={n}: {v}");
        }
    }

    #[test]
    fn steering_unit_modulus_and_self_product() {
        let mut rng = substream(3, 77, 0);
        for _ in 0..20 {
            let phi: f64 = rng.gen_range(-1.5..1.5);
            let a = steering_vector(phi, 16, 0.5);
            for v in &a {
                assert!((v.norm() - 1.0).abs() < 1e-15);
            }
            let p = crate::math::complexmat::inner_product(&a, &a).unwrap();
            assert!((p.re - 16.0).abs() < 1e-12 && p.im.abs() < 1e-12);
        }
    }

    #[test]
    fn lone_los_path_when_nothing_else_exists() {
        let sc = bare_scenario();
        let mut rng = substream(1, 1, 0);
        let paths = trace_paths(&sc, [50.0, 10.0], &mut rng).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths.paths[0].line_of_sight);
    }

    #[test]
    fn blocked_los_leaves_visible_scatterers() {
        // Opaque wall right in front of the UE; two scatterers off to the
        // side stay visible. Segment-intersection oracle: the LoS segment
        // (0,0)->(100,0) crosses x=90, |y|<=5; scatterer legs do not.
        let mut sc = bare_scenario();
        sc.blockers = vec![Blocker {
            start: [90.0, -5.0],
            end: [90.0, 5.0],
            penetration_loss_db: None,
        }];
        sc.scatterers = vec![
            Scatterer {
                position: [50.0, 40.0],
                reflection_loss_db: 10.0,
            },
            Scatterer {
                position: [50.0, -40.0],
                reflection_loss_db: 10.0,
            },
        ];
        let mut rng = substream(1, 1, 0);
        let paths = trace_paths(&sc, [100.0, 0.0], &mut rng).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths.paths.iter().all(|p| !p.line_of_sight));
    }

    #[test]
    fn inverse_square_law_at_exponent_two() {
        let mut sc = bare_scenario();
        sc.pathloss_exponent = 2.0;
        let mut rng = substream(1, 1, 0);
        let near = trace_paths(&sc, [40.0, 0.0], &mut rng).unwrap();
        let far = trace_paths(&sc, [80.0, 0.0], &mut rng).unwrap();
        let ratio = near.paths[0].power_gain() / far.paths[0].power_gain();
        assert!((ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_path_unit_gain_channel_is_all_ones() {
        let sc = bare_scenario();
        let paths = PathSet {
            paths: vec![PropagationPath {
                aod_rad: 0.0,
                amplitude: 1.0,
                phase_rad: 0.0,
                distance_m: 1.0,
                blocked: false,
                line_of_sight: true,
            }],
        };
        let ch = synthesize_channel(&paths, 1.0, &sc, [50.0, 0.0]).unwrap();
        for v in ch.h {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn destructive_pair_rejected_as_empty() {
        let sc = bare_scenario();
        let mk = |phase| PropagationPath {
            aod_rad: 0.3,
            amplitude: 1.0,
            phase_rad: phase,
            distance_m: 1.0,
            blocked: false,
            line_of_sight: false,
        };
        let paths = PathSet {
            paths: vec![mk(0.0), mk(PI)],
        };
        match synthesize_channel(&paths, 1.0, &sc, [50.0, 0.0]) {
            Err(CoreError::EmptyChannel { .. }) => {}
            other => panic!("expected EmptyChannel, got {other:?}"),
        }
    }

    #[test]
    fn channel_power_scales_linearly_in_shadow() {
        let sc = bare_scenario();
        let mut rng = substream(9, 1, 0);
        let paths = trace_paths(&sc, [60.0, 20.0], &mut rng).unwrap();
        let a = synthesize_channel(&paths, 1.0, &sc, [60.0, 20.0]).unwrap();
        let b = synthesize_channel(&paths, 3.0, &sc, [60.0, 20.0]).unwrap();
        let ratio = norm_sqr(&b.h) / norm_sqr(&a.h);
        assert!((ratio - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_is_bit_exact() {
        let sc = los_park(8);
        let ds = generate_dataset(&sc, 16, 42, PlacementMode::Uniform, 1).unwrap();
        for e in &ds.entries {
            let re = synthesize_channel(
                &e.realization.paths,
                e.realization.shadow_linear,
                &sc,
                e.realization.ue_position,
            )
            .unwrap();
            assert_eq!(re.h, e.realization.h);
        }
    }

    #[test]
    fn dataset_deterministic_and_parallel_equal() {
        let sc = blocked_street(8);
        let a = generate_dataset(&sc, 40, 7, PlacementMode::Uniform, 1).unwrap();
        let b = generate_dataset(&sc, 40, 7, PlacementMode::Uniform, 1).unwrap();
        let c = generate_dataset(&sc, 40, 7, PlacementMode::Uniform, 4).unwrap();
        for i in 0..40 {
            assert_eq!(a.entries[i].realization.h, b.entries[i].realization.h);
            assert_eq!(a.entries[i].realization.h, c.entries[i].realization.h);
        }
    }

    #[test]
    fn los_only_scenario_yields_single_path_entries() {
        let sc = bare_scenario();
        let ds = generate_dataset(&sc, 50, 3, PlacementMode::Uniform, 1).unwrap();
        assert!(ds.entries.iter().all(|e| e.realization.paths.len() == 1));
        assert_eq!(ds.los_fraction(), 1.0);
    }

    #[test]
    fn uniform_sampling_mean_near_region_center() {
        let sc = bare_scenario();
        let n = 2000;
        let ds = generate_dataset(&sc, n, 11, PlacementMode::Uniform, 1).unwrap();
        let center = sc.ue_region.center();
        let mean_x: f64 = ds
            .entries
            .iter()
            .map(|e| e.realization.ue_position[0])
            .sum::<f64>()
            / n as f64;
        let mean_y: f64 = ds
            .entries
            .iter()
            .map(|e| e.realization.ue_position[1])
            .sum::<f64>()
            / n as f64;
        // CLT bound: sigma of U(a,b) is (b-a)/sqrt(12)
        let sx = (sc.ue_region.x_max - sc.ue_region.x_min) / 12f64.sqrt();
        let sy = (sc.ue_region.y_max - sc.ue_region.y_min) / 12f64.sqrt();
        let bound = 3.0 / (n as f64).sqrt();
        assert!((mean_x - center[0]).abs() < sx * bound);
        assert!((mean_y - center[1]).abs() < sy * bound);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let sc = bare_scenario();
        let ds = generate_dataset(&sc, 100, 5, PlacementMode::Uniform, 1).unwrap();
        let (tr, va, te) = (
            ds.indices(SplitTag::Train).len(),
            ds.indices(SplitTag::Val).len(),
            ds.indices(SplitTag::Test).len(),
        );
        assert_eq!((tr, va, te), (80, 10, 10));
    }

    #[test]
    fn mrt_matches_triangle_equality() {
        let mut rng = substream(21, 5, 0);
        for _ in 0..20 {
            let h: Vec<Complex64> = (0..8)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let w = mrt_beamformer(&h).unwrap();
            let g = crate::math::complexmat::inner_product(&h, &w).unwrap();
            let want: f64 = h.iter().map(|v| v.norm()).sum();
            assert!((g.re - want).abs() < 1e-12 && g.im.abs() < 1e-12);
        }
    }

    #[test]
    fn mrt_of_one_j_is_itself() {
        let h = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        let w = mrt_beamformer(&h).unwrap();
        assert!((w[0] - h[0]).norm() < 1e-15);
        assert!((w[1] - h[1]).norm() < 1e-15);
        let g = crate::math::complexmat::inner_product(&h, &w).unwrap();
        assert!((g.norm_sqr() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mrt_real_positive_channel_gives_all_ones() {
        let h = vec![Complex64::new(0.5, 0.0), Complex64::new(2.0, 0.0)];
        let w = mrt_beamformer(&h).unwrap();
        assert!(w.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn zero_channel_rejected() {
        let h = vec![Complex64::new(0.0, 0.0); 4];
        assert!(matches!(mrt_beamformer(&h), Err(CoreError::ZeroChannel)));
    }

    #[test]
    fn dataset_file_roundtrip_bit_exact() {
        let sc = blocked_street(4);
        let ds = generate_dataset(&sc, 20, 13, PlacementMode::Uniform, 1).unwrap();
        let dir = std::env::temp_dir().join("sitebeam_test_ds.json");
        ds.save_json(&dir).unwrap();
        let back = SiteDataset::load_json(&dir).unwrap();
        for (a, b) in ds.entries.iter().zip(&back.entries) {
            assert_eq!(a.realization.h, b.realization.h);
            assert_eq!(a.split, b.split);
        }
        std::fs::remove_file(dir).ok();
    }
}

//! RSRP measurement operator: exact SSB simulation, Gaussian-approximation
//! fast path, and dB-domain vector measurements with noise.
//!
//! The Gaussian path is differentiable (it is re-derived on the autodiff
//! tape inside the codebook objective) and is the default for codebook
//! optimization; the exact path is the default for final evaluation.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{db_to_linear, linear_to_db, ChannelRealization};
use crate::codebook::Codebook;
use crate::error::{CoreError, Result};
use crate::math::complexmat::inner_product;

/// dB per neper: 10 / ln 10.
pub const DB_PER_NEPER: f64 = 4.342944819032518;

/// Gains below this dB value are clamped and flagged.
pub const GAIN_CLAMP_DB: f64 = -300.0;

/// Transmit power, noise, and averaging-length configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Transmit power in dBm.
    pub tx_power_dbm: f64,
    /// Noise power spectral density in dBm/Hz.
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_hz: f64,
    /// Number of averaged SSB symbols.
    pub ssb_symbols: usize,
    /// Log-variance of the shadowing in dB².
    pub shadow_db_var: f64,
    /// Treat the averaging length as infinite: estimation noise vanishes.
    #[serde(default)]
    pub infinite_averaging: bool,
    /// Constant-modulus SSB symbols (|s|² = P_t exactly) instead of complex
    /// Gaussian symbols.
    #[serde(default)]
    pub deterministic_symbols: bool,
    /// Include the dB-domain mean bias term in gaussian mode.
    #[serde(default = "default_true")]
    pub include_mean_bias: bool,
}

fn default_true() -> bool {
    true
}

impl NoiseConfig {
    /// Table-style defaults: 40 dBm, -170 dBm/Hz over 100 MHz, 5 symbols.
    pub fn new(shadow_db_var: f64) -> Self {
        NoiseConfig {
            tx_power_dbm: 40.0,
            noise_psd_dbm_hz: -170.0,
            bandwidth_hz: 100.0e6,
            ssb_symbols: 5,
            shadow_db_var,
            infinite_averaging: false,
            deterministic_symbols: false,
            include_mean_bias: true,
        }
    }

    /// Direct linear parameterization (test convenience): transmit power and
    /// noise power in mW over a 1 Hz bandwidth.
    pub fn from_linear(tx_power_mw: f64, noise_power_mw: f64, ssb_symbols: usize) -> Self {
        NoiseConfig {
            tx_power_dbm: linear_to_db(tx_power_mw),
            noise_psd_dbm_hz: if noise_power_mw == 0.0 {
                f64::NEG_INFINITY
            } else {
                linear_to_db(noise_power_mw)
            },
            bandwidth_hz: 1.0,
            ssb_symbols,
            shadow_db_var: 0.0,
            infinite_averaging: false,
            deterministic_symbols: false,
            include_mean_bias: true,
        }
    }

    /// σ_n² = 0, σ_sh² as given, infinite averaging: measurements equal the
    /// noiseless RSRP in both modes.
    pub fn noiseless(shadow_db_var: f64) -> Self {
        NoiseConfig {
            tx_power_dbm: 40.0,
            noise_psd_dbm_hz: f64::NEG_INFINITY,
            bandwidth_hz: 100.0e6,
            ssb_symbols: 5,
            shadow_db_var,
            infinite_averaging: true,
            deterministic_symbols: true,
            include_mean_bias: true,
        }
    }

    pub fn tx_power_mw(&self) -> f64 {
        db_to_linear(self.tx_power_dbm)
    }

    pub fn noise_power_dbm(&self) -> f64 {
        self.noise_psd_dbm_hz + 10.0 * self.bandwidth_hz.log10()
    }

    /// Thermal noise power σ_n² in mW.
    pub fn noise_power_mw(&self) -> f64 {
        if self.noise_psd_dbm_hz == f64::NEG_INFINITY {
            0.0
        } else {
            db_to_linear(self.noise_power_dbm())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ssb_symbols < 1 {
            return Err(CoreError::InvalidConfig {
                message: "ssb_symbols must be >= 1".into(),
            });
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(CoreError::InvalidConfig {
                message: "bandwidth_hz must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Measurement route for RSRP vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    Exact,
    Gaussian,
}

/// One K-beam dB-domain measurement with its noiseless component.
#[derive(Debug, Clone, PartialEq)]
pub struct RsrpVector {
    /// Measured RSRP per beam, dBm.
    pub y: Vec<f64>,
    /// Noiseless component per beam, dBm.
    pub y0: Vec<f64>,
    /// Content id of the codebook that produced the measurement.
    pub codebook_id: u64,
    pub mode: MeasurementMode,
    /// Beams whose gain underflowed the clamp floor.
    pub clamped: Vec<bool>,
}

impl RsrpVector {
    pub fn num_beams(&self) -> usize {
        self.y.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

/// Deterministic array gain |hᴴw|².
pub fn array_gain(h: &[Complex64], w: &[Complex64]) -> Result<f64> {
    Ok(inner_product(h, w)?.norm_sqr())
}

/// Shadow-stripped array gain |hᴴw|²/S for a known realization.
pub fn array_gain_shadow_stripped(ch: &ChannelRealization, w: &[Complex64]) -> Result<f64> {
    Ok(array_gain(&ch.h, w)? / ch.shadow_linear)
}

/// Mean and variance of the linear-power RSRP estimate:
/// μ_p = P_t|hᴴw|² + σ_n², σ_p² = (σ_n⁴ + 2σ_n²P_t|hᴴw|²)/L_s².
pub fn rsrp_moments(h: &[Complex64], w: &[Complex64], cfg: &NoiseConfig) -> Result<(f64, f64)> {
    let gain = array_gain(h, w)?;
    Ok(rsrp_moments_from_gain(gain, cfg))
}

pub fn rsrp_moments_from_gain(gain: f64, cfg: &NoiseConfig) -> (f64, f64) {
    let pt = cfg.tx_power_mw();
    let n2 = cfg.noise_power_mw();
    let mean = pt * gain + n2;
    let var = if cfg.infinite_averaging {
        0.0
    } else {
        let ls = cfg.ssb_symbols as f64;
        (n2 * n2 + 2.0 * n2 * pt * gain) / (ls * ls)
    };
    (mean, var)
}

/// Simulates the finite-length power average over `L_s` received SSB
/// symbols; returns linear mW.
pub fn rsrp_exact(
    h: &[Complex64],
    w: &[Complex64],
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let g = inner_product(h, w)?;
    Ok(rsrp_exact_from_response(g, cfg, rng))
}

/// Same, starting from the complex beam response hᴴw.
pub fn rsrp_exact_from_response(g: Complex64, cfg: &NoiseConfig, rng: &mut impl Rng) -> f64 {
    let pt = cfg.tx_power_mw();
    let n2 = cfg.noise_power_mw();
    if cfg.infinite_averaging {
        return pt * g.norm_sqr() + n2;
    }
    let ls = cfg.ssb_symbols;
    let mut acc = 0.0;
    for _ in 0..ls {
        let s = if cfg.deterministic_symbols {
            Complex64::new(pt.sqrt(), 0.0)
        } else {
            complex_gaussian(pt, rng)
        };
        let n = complex_gaussian(n2, rng);
        acc += (g * s + n).norm_sqr();
    }
    acc / ls as f64
}

/// Circularly-symmetric complex Gaussian with total variance `power`.
pub fn complex_gaussian(power: f64, rng: &mut impl Rng) -> Complex64 {
    if power == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let s = (power / 2.0).sqrt();
    let re: f64 = rng.sample(rand_distr::StandardNormal);
    let im: f64 = rng.sample(rand_distr::StandardNormal);
    Complex64::new(re * s, im * s)
}

/// dB-domain mean bias of the measurement noise for shadow-stripped gain.
pub fn mean_bias_db(gain_stripped: f64, cfg: &NoiseConfig) -> f64 {
    let n2 = cfg.noise_power_mw();
    if n2 == 0.0 || !cfg.include_mean_bias {
        return 0.0;
    }
    DB_PER_NEPER * n2 / (cfg.tx_power_mw() * gain_stripped)
}

/// dB-domain noise variance: shadowing plus the finite-averaging thermal
/// term, evaluated at the shadow-stripped gain.
pub fn noise_var_db2(gain_stripped: f64, cfg: &NoiseConfig) -> f64 {
    let n2 = cfg.noise_power_mw();
    let thermal = if cfg.infinite_averaging || n2 == 0.0 {
        0.0
    } else {
        let pt = cfg.tx_power_mw();
        let ls = cfg.ssb_symbols as f64;
        DB_PER_NEPER * DB_PER_NEPER * (n2 * n2 + 2.0 * n2 * pt * gain_stripped)
            / (pt * pt * gain_stripped * gain_stripped * ls * ls)
    };
    cfg.shadow_db_var + thermal
}

/// Measures all beams of a codebook against one channel realization.
pub fn measure_rsrp_vector(
    codebook: &Codebook,
    ch: &ChannelRealization,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
    mode: MeasurementMode,
) -> Result<RsrpVector> {
    let k = codebook.num_beams;
    let mut y = Vec::with_capacity(k);
    let mut y0 = Vec::with_capacity(k);
    let mut clamped = Vec::with_capacity(k);
    let pt_db = cfg.tx_power_dbm;
    for b in 0..k {
        let beam = codebook.beam(b);
        let gain = array_gain(&ch.h, &beam)?;
        let mut gain_db = linear_to_db(gain);
        let mut was_clamped = false;
        if !(gain_db > GAIN_CLAMP_DB) {
            gain_db = GAIN_CLAMP_DB;
            was_clamped = true;
        }
        let noiseless = pt_db + gain_db;
        let measured = match mode {
            MeasurementMode::Exact => {
                let p = rsrp_exact(&ch.h, &beam, cfg, rng)?;
                let mut v = linear_to_db(p);
                if !(v > pt_db + GAIN_CLAMP_DB) {
                    v = pt_db + GAIN_CLAMP_DB;
                    was_clamped = true;
                }
                v
            }
            MeasurementMode::Gaussian => {
                let stripped = db_to_linear(gain_db) / ch.shadow_linear;
                let sigma = noise_var_db2(stripped, cfg).sqrt();
                let draw: f64 = if sigma > 0.0 {
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma
                } else {
                    0.0
                };
                noiseless + mean_bias_db(stripped, cfg) + draw
            }
        };
        y.push(measured);
        y0.push(noiseless);
        clamped.push(was_clamped);
    }
    Ok(RsrpVector {
        y,
        y0,
        codebook_id: codebook.id(),
        mode,
        clamped,
    })
}

/// Writes measurement batches as CSV rows
/// (ue_index, beam_index, y_db, y0_db, mode).
pub fn write_rsrp_csv(path: &Path, rows: &[(usize, &RsrpVector)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ue_index,beam_index,y_db,y0_db,mode")?;
    for (ue, v) in rows {
        let mode = match v.mode {
            MeasurementMode::Exact => "exact",
            MeasurementMode::Gaussian => "gaussian",
        };
        for (b, (&yv, &y0v)) in v.y.iter().zip(&v.y0).enumerate() {
            writeln!(f, "{ue},{b},{yv},{y0v},{mode}")?;
        }
    }
    Ok(())
}

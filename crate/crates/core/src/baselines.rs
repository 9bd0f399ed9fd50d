//! Comparison methods: a discriminative MLP regressor, two-tier hierarchical
//! codebook search, and idealized LMMSE channel-estimation beamforming.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{mrt_beamformer, SiteDataset, SplitTag};
use crate::cfm::{
    normalize_rsrp, project_unit_modulus, stack_beam, CfmTrainConfig, LossTraceRow,
};
use crate::codebook::{dft_codebook, Codebook};
use crate::error::{CoreError, Result};
use crate::math::tape::{matmul_raw, silu_raw, layer_norm_rows_raw};
use crate::math::tensor::RealTensor;
use crate::math::Tape;
use crate::measurement::{
    array_gain, measure_rsrp_vector, rsrp_exact, MeasurementMode, NoiseConfig,
};
use crate::rng::{stream, substream};

const LN_EPS: f64 = 1e-5;

/// Discriminative baseline: regress the stacked MRT beam directly from the
/// normalized RSRP shape. Same normalization front-end as the flow model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub num_antennas: usize,
    pub num_beams: usize,
    pub hidden_dim: usize,
    /// w1 (K, H), b1, w2 (H, H), b2, w3 (H, 2N_t), b3
    pub weights: Vec<RealTensor>,
}

const MLP_PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl MlpModel {
    pub fn init(num_antennas: usize, num_beams: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, stream::MODEL_INIT, 1);
        let zdim = 2 * num_antennas;
        let shapes = [
            vec![num_beams, hidden_dim],
            vec![hidden_dim],
            vec![hidden_dim, hidden_dim],
            vec![hidden_dim],
            vec![hidden_dim, zdim],
            vec![zdim],
        ];
        let weights = shapes
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    RealTensor::zeros(shape)
                } else {
                    let (fi, fo) = (shape[0], shape[1]);
                    let limit = (6.0 / (fi + fo) as f64).sqrt();
                    let n = fi * fo;
                    RealTensor {
                        shape,
                        data: (0..n).map(|_| rng.gen_range(-limit..limit)).collect(),
                    }
                }
            })
            .collect();
        MlpModel {
            num_antennas,
            num_beams,
            hidden_dim,
            weights,
        }
    }

    /// Forward pass for a batch of normalized shapes, (B, K) row-major.
    pub fn forward_rows(&self, y_norm: &[f64], rows: usize) -> Vec<f64> {
        let h = self.hidden_dim;
        let lin = |x: &[f64], r: usize, ind: usize, w: &RealTensor, b: &RealTensor| {
            let mut y = matmul_raw(x, &w.data, r, ind, w.shape[1]);
            for rr in 0..r {
                for j in 0..w.shape[1] {
                    y[rr * w.shape[1] + j] += b.data[j];
                }
            }
            y
        };
        let u1 = lin(y_norm, rows, self.num_beams, &self.weights[0], &self.weights[1]);
        let a1: Vec<f64> = layer_norm_rows_raw(&u1, rows, h, LN_EPS)
            .iter()
            .map(|&v| silu_raw(v))
            .collect();
        let u2 = lin(&a1, rows, h, &self.weights[2], &self.weights[3]);
        let a2: Vec<f64> = layer_norm_rows_raw(&u2, rows, h, LN_EPS)
            .iter()
            .map(|&v| silu_raw(v))
            .collect();
        lin(&a2, rows, h, &self.weights[4], &self.weights[5])
    }

    /// Unit-modulus beam for one RSRP vector.
    pub fn infer_beam(&self, y: &[f64]) -> Vec<Complex64> {
        let feats = normalize_rsrp(y);
        let z = self.forward_rows(&feats.y_norm, 1);
        project_unit_modulus(&z)
    }

    pub fn save_json(&self, path: &Path, seed: u64, config_hash: &str) -> Result<()> {
        let file = MlpFile {
            num_antennas: self.num_antennas,
            num_beams: self.num_beams,
            hidden_dim: self.hidden_dim,
            seed,
            config_hash: config_hash.to_string(),
            params: MLP_PARAM_NAMES
                .iter()
                .zip(&self.weights)
                .map(|(n, t)| (n.to_string(), t.shape.clone(), t.data.clone()))
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<MlpModel> {
        let text = std::fs::read_to_string(path).map_err(|_| CoreError::MissingArtifact {
            path: path.display().to_string(),
        })?;
        let file: MlpFile = serde_json::from_str(&text)?;
        let mut model = MlpModel::init(file.num_antennas, file.num_beams, file.hidden_dim, 0);
        if file.params.len() != model.weights.len() {
            return Err(CoreError::InvalidConfig {
                message: "unexpected parameter count in MLP checkpoint".into(),
            });
        }
        for (slot, (_, shape, data)) in model.weights.iter_mut().zip(file.params) {
            if slot.shape != shape {
                return Err(CoreError::shape(
                    "mlp checkpoint",
                    slot.shape_string(),
                    format!("{:?}", shape),
                ));
            }
            slot.data = data;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    num_antennas: usize,
    num_beams: usize,
    hidden_dim: usize,
    seed: u64,
    config_hash: String,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Regression loss ‖f(ỹ) − z₁‖² averaged over the batch, with gradients.
fn mlp_loss(
    model: &MlpModel,
    y_norm: &RealTensor,
    targets: &RealTensor,
    with_grad: bool,
) -> Result<(f64, Option<Vec<RealTensor>>)> {
    let tape = Tape::new();
    let vars: Vec<_> = model
        .weights
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.leaf(y_norm.clone())?;
    let t = tape.leaf(targets.clone())?;
    let u1 = tape.linear(x, vars[0], vars[1])?;
    let a1 = tape.silu(tape.layer_norm_last(u1, LN_EPS));
    let u2 = tape.linear(a1, vars[2], vars[3])?;
    let a2 = tape.silu(tape.layer_norm_last(u2, LN_EPS));
    let out = tape.linear(a2, vars[4], vars[5])?;
    let diff = tape.sub(out, t)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / y_norm.shape[0] as f64);
    let value = tape.value_scalar(loss);
    let grads = if with_grad {
        Some(tape.grad(loss, &vars)?)
    } else {
        None
    };
    Ok((value, grads))
}

#[derive(Debug)]
pub struct MlpTrainOutcome {
    pub model: MlpModel,
    pub trace: Vec<LossTraceRow>,
    pub completed: bool,
    pub failure: Option<String>,
}

/// Trains the MLP with the same data pipeline as the flow model: fresh
/// exact-mode measurements per batch, MRT targets, one gradient step per
/// iteration.
pub fn train_mlp(
    hidden_dim: usize,
    dataset: &SiteDataset,
    codebook: &Codebook,
    noise: &NoiseConfig,
    cfg: &CfmTrainConfig,
) -> Result<MlpTrainOutcome> {
    cfg.validate()?;
    let train = dataset.indices(SplitTag::Train);
    if train.is_empty() {
        return Err(CoreError::DatasetTooSmall {
            what: "train_mlp train split",
            needed: 1,
            got: 0,
        });
    }
    let mut val = dataset.indices(SplitTag::Val);
    if val.is_empty() {
        val = train.clone();
    }
    val.truncate(64);

    let n_t = dataset.scenario.num_antennas;
    let k = codebook.num_beams;
    let zdim = 2 * n_t;
    let mut model = MlpModel::init(n_t, k, hidden_dim, cfg.seed);

    // Optimizer state mirrors the CFM trainer (Adam behind the same flag).
    let mut m_state: Vec<RealTensor> = model
        .weights
        .iter()
        .map(|t| RealTensor::zeros(t.shape.clone()))
        .collect();
    let mut v_state = m_state.clone();
    let mut step = 0usize;

    let assemble = |idx: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Result<(RealTensor, RealTensor)> {
        let mut ys = Vec::with_capacity(idx.len() * k);
        let mut ts = Vec::with_capacity(idx.len() * zdim);
        for &i in idx {
            let ch = dataset.channel(i);
            let y = measure_rsrp_vector(codebook, ch, noise, rng, MeasurementMode::Exact)?.y;
            ys.extend(normalize_rsrp(&y).y_norm);
            ts.extend(stack_beam(&mrt_beamformer(&ch.h)?));
        }
        Ok((
            RealTensor::matrix(idx.len(), k, ys)?,
            RealTensor::matrix(idx.len(), zdim, ts)?,
        ))
    };

    let mut val_rng = substream(cfg.seed, stream::TRAIN_MEASURE, 0);
    let (val_x, val_t) = assemble(&val, &mut val_rng)?;
    let gap_subset: Vec<usize> = val.iter().copied().take(16).collect();

    let start = std::time::Instant::now();
    let mut trace = Vec::new();
    let mut completed = true;
    let mut failure = None;

    for it in 1..=cfg.iterations {
        let mut batch_rng = substream(cfg.seed, stream::TRAIN_BATCH, it as u64);
        let idx = crate::cfm::sample_batch_indices(&train, cfg.batch_size, &mut batch_rng);
        let mut measure_rng = substream(cfg.seed, stream::TRAIN_MEASURE, it as u64);
        let (x, t) = assemble(&idx, &mut measure_rng)?;
        let (loss, grads) = mlp_loss(&model, &x, &t, true)?;
        if !loss.is_finite() {
            completed = false;
            failure = Some(format!("non-finite loss at iteration {it}"));
            break;
        }
        let grads = grads.expect("gradients requested");
        step += 1;
        if cfg.adam {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            let bc1 = 1.0 - b1.powi(step as i32);
            let bc2 = 1.0 - b2.powi(step as i32);
            for ((w, g), (ms, vs)) in model
                .weights
                .iter_mut()
                .zip(&grads)
                .zip(m_state.iter_mut().zip(v_state.iter_mut()))
            {
                for i in 0..w.data.len() {
                    let gv = g.data[i];
                    ms.data[i] = b1 * ms.data[i] + (1.0 - b1) * gv;
                    vs.data[i] = b2 * vs.data[i] + (1.0 - b2) * gv * gv;
                    w.data[i] -=
                        cfg.learning_rate * (ms.data[i] / bc1) / ((vs.data[i] / bc2).sqrt() + eps);
                }
            }
        } else {
            for (w, g) in model.weights.iter_mut().zip(&grads) {
                for (p, gv) in w.data.iter_mut().zip(&g.data) {
                    *p -= cfg.learning_rate * gv;
                }
            }
        }

        if it % cfg.eval_every == 0 || it == cfg.iterations || it == 1 {
            let (val_loss, _) = mlp_loss(&model, &val_x, &val_t, false)?;
            let val_gap = mlp_median_gap(&model, dataset, &gap_subset, codebook, noise, cfg.seed)?;
            trace.push(LossTraceRow {
                iter: it,
                train_loss: loss,
                val_loss,
                val_gap_db: val_gap,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }

    Ok(MlpTrainOutcome {
        model,
        trace,
        completed,
        failure,
    })
}

fn mlp_median_gap(
    model: &MlpModel,
    dataset: &SiteDataset,
    subset: &[usize],
    codebook: &Codebook,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<f64> {
    if subset.is_empty() {
        return Ok(f64::NAN);
    }
    let mut gaps = Vec::with_capacity(subset.len());
    for &i in subset {
        let ch = dataset.channel(i);
        let mut rng = substream(seed, stream::SAMPLER, i as u64);
        let y = measure_rsrp_vector(codebook, ch, noise, &mut rng, MeasurementMode::Exact)?.y;
        let w = model.infer_beam(&y);
        let g = array_gain(&ch.h, &w)?;
        let mrt = mrt_beamformer(&ch.h)?;
        let g_star = array_gain(&ch.h, &mrt)?;
        gaps.push(10.0 * (g_star / g.max(1e-30)).log10());
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = gaps.len();
    Ok(if n % 2 == 0 {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    } else {
        gaps[n / 2]
    })
}

/// Hierarchical search outcome.
#[derive(Debug, Clone)]
pub struct PmiOutcome {
    pub beam: Vec<Complex64>,
    /// Spatial frequency of the winning tier-2 beam, cycles per element.
    pub spatial_freq: f64,
    pub measured_beams: usize,
}

/// Spatial frequency (cycles per element, wrapped to [-1/2, 1/2)) of DFT
/// beam `k` in a codebook with `denom = max(K, N_t)` phase steps.
fn dft_spatial_freq(k: usize, denom: usize) -> f64 {
    let u = k as f64 / denom as f64;
    if u >= 0.5 {
        u - 1.0
    } else {
        u
    }
}

fn wrapped_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Two-tier hierarchical sweep: measure a DFT codebook, then measure the
/// oversampled-DFT beams whose steering frequencies fall nearest the tier-1
/// winner, and return the tier-2 argmax.
pub fn pmi_search(
    h: &[Complex64],
    tier1_beams: usize,
    tier2_beams: usize,
    oversample: usize,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<PmiOutcome> {
    if tier1_beams < 1 || tier2_beams < 1 || oversample < 1 {
        return Err(CoreError::InvalidConfig {
            message: "pmi tiers and oversample must be >= 1".into(),
        });
    }
    let n_t = h.len();
    let tier1 = dft_codebook(n_t, tier1_beams)?;
    let denom1 = n_t.max(tier1_beams);
    let mut best1 = 0;
    let mut best1_p = f64::NEG_INFINITY;
    for k in 0..tier1_beams {
        let p = rsrp_exact(h, &tier1.beam(k), noise, rng)?;
        if p > best1_p {
            best1_p = p;
            best1 = k;
        }
    }
    let center = dft_spatial_freq(best1, denom1);

    let total2 = tier1_beams * oversample;
    let tier2 = dft_codebook(n_t, total2)?;
    let denom2 = n_t.max(total2);
    let mut order: Vec<usize> = (0..total2).collect();
    order.sort_by(|&a, &b| {
        let da = wrapped_distance(dft_spatial_freq(a, denom2), center);
        let db = wrapped_distance(dft_spatial_freq(b, denom2), center);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let candidates: Vec<usize> = order.into_iter().take(tier2_beams.min(total2)).collect();

    let mut best2 = candidates[0];
    let mut best2_p = f64::NEG_INFINITY;
    for &k in &candidates {
        let p = rsrp_exact(h, &tier2.beam(k), noise, rng)?;
        if p > best2_p {
            best2_p = p;
            best2 = k;
        }
    }
    Ok(PmiOutcome {
        beam: tier2.beam(best2),
        spatial_freq: dft_spatial_freq(best2, denom2),
        measured_beams: tier1_beams + candidates.len(),
    })
}

/// Idealized channel-estimation baseline: perturb the true channel with
/// white Gaussian error at the LMMSE floor NMSE = 1/(1 + L_s·SNR), then
/// beamform with MRT on the estimate. SNR is the per-antenna average
/// receive SNR P_t‖h‖²/(N_t σ_n²).
pub fn srs_lmmse_beam(
    h: &[Complex64],
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Complex64>> {
    let n_t = h.len() as f64;
    let h_norm2: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if h_norm2 == 0.0 {
        return Err(CoreError::ZeroChannel);
    }
    let nmse = srs_nmse(h, noise)?;
    let per_elem_var = nmse * h_norm2 / n_t;
    let est: Vec<Complex64> = h
        .iter()
        .map(|v| v + crate::measurement::complex_gaussian(per_elem_var, rng))
        .collect();
    mrt_beamformer(&est)
}

/// The LMMSE NMSE floor for the given channel and noise settings.
pub fn srs_nmse(h: &[Complex64], noise: &NoiseConfig) -> Result<f64> {
    let n_t = h.len() as f64;
    let h_norm2: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if h_norm2 == 0.0 {
        return Err(CoreError::ZeroChannel);
    }
    let n2 = noise.noise_power_mw();
    if n2 == 0.0 {
        return Ok(0.0);
    }
    let snr = noise.tx_power_mw() * h_norm2 / (n_t * n2);
    Ok(1.0 / (1.0 + noise.ssb_symbols as f64 * snr))
}

//! Metrics and experiment pipelines: gain gaps to MRT, RSRP distance CDFs,
//! beam-pattern export, and the probe → generate → select → lock loop over a
//! test split with all baselines.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::{pmi_search, srs_lmmse_beam, MlpModel};
use crate::cfm::{sample_candidates, select_beam, CfmModel, SamplerConfig};
use crate::channel::{linear_to_db, mrt_beamformer, ChannelRealization, SiteDataset, SplitTag};
use crate::codebook::{dft_codebook, sample_covariance, Codebook};
use crate::error::{CoreError, Result};
use crate::math::linalg;
use crate::math::tensor::RealTensor;
use crate::measurement::{array_gain, measure_rsrp_vector, MeasurementMode, NoiseConfig};
use crate::rng::{stream, substream};

/// Gaps above this value are clamped and flagged (fully blocked or
/// orthogonal beams would otherwise produce infinities).
pub const GAP_CLAMP_DB: f64 = 100.0;

/// Per-UE array-gain gap to MRT in dB with aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub gaps_db: Vec<f64>,
    pub clamped: Vec<bool>,
    pub mean_db: f64,
    pub median_db: f64,
    pub p95_db: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 0 {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl GapReport {
    pub fn from_gaps(gaps_db: Vec<f64>, clamped: Vec<bool>) -> GapReport {
        let mut sorted = gaps_db.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = gaps_db.iter().sum::<f64>() / gaps_db.len().max(1) as f64;
        GapReport {
            mean_db: mean,
            median_db: median(&sorted),
            p95_db: nearest_rank(&sorted, 0.95),
            gaps_db,
            clamped,
        }
    }
}

/// Gap of each supplied beam to the MRT optimum on its channel.
pub fn gain_gap(channels: &[&ChannelRealization], beams: &[Vec<Complex64>]) -> Result<GapReport> {
    if channels.len() != beams.len() {
        return Err(CoreError::shape(
            "gain_gap",
            format!("{} channels", channels.len()),
            format!("{} beams", beams.len()),
        ));
    }
    let mut gaps = Vec::with_capacity(channels.len());
    let mut clamped = Vec::with_capacity(channels.len());
    for (ch, w) in channels.iter().zip(beams) {
        let mrt = mrt_beamformer(&ch.h)?;
        let g_star = array_gain(&ch.h, &mrt)?;
        let g = array_gain(&ch.h, w)?;
        let gap = 10.0 * (g_star / g).log10();
        if gap.is_finite() && gap <= GAP_CLAMP_DB {
            gaps.push(gap.max(0.0));
            clamped.push(false);
        } else {
            gaps.push(GAP_CLAMP_DB);
            clamped.push(true);
        }
    }
    Ok(GapReport::from_gaps(gaps, clamped))
}

/// Pairwise Euclidean and Mahalanobis distances with empirical CDF grids.
#[derive(Debug, Clone)]
pub struct DistanceReport {
    /// Quantile grid in (0, 1].
    pub quantiles: Vec<f64>,
    pub euclidean_cdf: Vec<f64>,
    pub mahalanobis_cdf: Vec<f64>,
    pub median_euclidean: f64,
    pub median_mahalanobis: f64,
}

/// All-pairs distances between RSRP vectors; Mahalanobis uses the ε-loaded
/// inverse sample covariance.
pub fn distance_cdfs(
    rsrp_batch: &[Vec<f64>],
    cov: &RealTensor,
    diag_loading: f64,
) -> Result<DistanceReport> {
    let n = rsrp_batch.len();
    if n < 2 {
        return Err(CoreError::DatasetTooSmall {
            what: "distance_cdfs",
            needed: 2,
            got: n,
        });
    }
    let k = cov.shape[0];
    let mut loaded = cov.data.clone();
    for i in 0..k {
        loaded[i * k + i] += diag_loading;
    }
    let factor = linalg::cholesky(&loaded, k)?;
    let mut euclid = Vec::with_capacity(n * (n - 1) / 2);
    let mut mahal = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff: Vec<f64> = rsrp_batch[i]
                .iter()
                .zip(&rsrp_batch[j])
                .map(|(a, b)| a - b)
                .collect();
            let e2: f64 = diff.iter().map(|v| v * v).sum();
            euclid.push(e2.sqrt());
            let solved = linalg::solve_from_factor(&factor, k, &diff);
            let m2: f64 = diff.iter().zip(&solved).map(|(a, b)| a * b).sum();
            mahal.push(m2.max(0.0).sqrt());
        }
    }
    euclid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mahal.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantiles: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let euclidean_cdf = quantiles.iter().map(|&q| nearest_rank(&euclid, q)).collect();
    let mahalanobis_cdf = quantiles.iter().map(|&q| nearest_rank(&mahal, q)).collect();
    Ok(DistanceReport {
        quantiles,
        euclidean_cdf,
        mahalanobis_cdf,
        median_euclidean: median(&euclid),
        median_mahalanobis: median(&mahal),
    })
}

/// Per-beam gain over an angle grid, normalized so each beam peaks at 0 dB.
/// Rows follow the grid, columns the beams.
pub fn beam_patterns(cb: &Codebook, angle_grid_rad: &[f64]) -> Result<RealTensor> {
    if angle_grid_rad.is_empty() {
        return Err(CoreError::InvalidConfig {
            message: "beam_patterns needs a nonempty grid".into(),
        });
    }
    let k = cb.num_beams;
    let n_t = cb.num_antennas;
    let rows = angle_grid_rad.len();
    let mut gains = vec![0.0; rows * k];
    for (r, &phi) in angle_grid_rad.iter().enumerate() {
        let a = crate::channel::steering_vector(phi, n_t, 0.5);
        for b in 0..k {
            gains[r * k + b] = array_gain(&a, &cb.beam(b))?;
        }
    }
    // normalize each beam to a 0 dB peak
    for b in 0..k {
        let peak = (0..rows)
            .map(|r| gains[r * k + b])
            .fold(f64::NEG_INFINITY, f64::max);
        for r in 0..rows {
            let v = gains[r * k + b] / peak;
            gains[r * k + b] = linear_to_db(v.max(1e-30));
        }
    }
    RealTensor::matrix(rows, k, gains)
}

/// Pipeline settings for the evaluation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    /// Candidate-count sweep evaluated on nested prefixes of one sampled
    /// candidate list.
    #[serde(default)]
    pub m_sweep: Vec<usize>,
    /// Transmit-power sweep (dBm) re-measuring RSRP for the flow model and
    /// the channel-estimation baseline.
    #[serde(default)]
    pub power_sweep_dbm: Vec<f64>,
    pub pmi_tier1: usize,
    pub pmi_tier2: usize,
    pub pmi_oversample: usize,
    pub run_mlp: bool,
    pub run_pmi: bool,
    pub run_srs: bool,
    pub eval_seed: u64,
    /// Noise redraws per UE for the log-determinant table.
    pub logdet_noise_draws: usize,
    pub diag_loading: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sampler: SamplerConfig::default(),
            m_sweep: vec![],
            power_sweep_dbm: vec![],
            pmi_tier1: 32,
            pmi_tier2: 16,
            pmi_oversample: 4,
            run_mlp: true,
            run_pmi: true,
            run_srs: true,
            eval_seed: 1,
            logdet_noise_draws: 1,
            diag_loading: 1e-6,
        }
    }
}

/// Everything the evaluate command reports.
#[derive(Debug)]
pub struct PipelineReport {
    /// (method label, gaps) at the default operating point.
    pub gaps: Vec<(String, GapReport)>,
    /// (M, gaps) over nested candidate prefixes.
    pub m_sweep: Vec<(usize, GapReport)>,
    /// (power dBm, flow-model gaps, estimation-baseline gaps).
    pub power_sweep: Vec<(f64, GapReport, GapReport)>,
    /// (codebook label, split label, K, logdet).
    pub logdet_rows: Vec<(String, String, usize, f64)>,
    /// (codebook label, distances) on the test split.
    pub distances: Vec<(String, DistanceReport)>,
    /// (method label, measured beams per UE).
    pub overhead: Vec<(String, usize)>,
}

/// Runs probe → generate → select → lock for every test UE and collects the
/// report bundle. `threads` parallelizes over UEs with per-index random
/// streams, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    dataset: &SiteDataset,
    codebook: &Codebook,
    cfm: &CfmModel,
    mlp: Option<&MlpModel>,
    noise: &NoiseConfig,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<PipelineReport> {
    let test = dataset.indices(SplitTag::Test);
    if test.is_empty() {
        return Err(CoreError::DatasetTooSmall {
            what: "run_pipeline test split",
            needed: 1,
            got: 0,
        });
    }
    let max_m = cfg
        .m_sweep
        .iter()
        .copied()
        .chain(std::iter::once(cfg.sampler.num_candidates))
        .max()
        .expect("nonempty");

    struct UeOutcome {
        cfm_prefix_beams: Vec<Vec<Complex64>>,
        mlp_beam: Option<Vec<Complex64>>,
        pmi_beam: Option<Vec<Complex64>>,
        srs_beam: Option<Vec<Complex64>>,
        power_beams: Vec<(Vec<Complex64>, Vec<Complex64>)>,
    }

    let eval_one = |i: usize| -> Result<UeOutcome> {
        let ch = dataset.channel(test[i]);
        let mut rng = substream(cfg.eval_seed, stream::EVAL, test[i] as u64);
        let y = measure_rsrp_vector(codebook, ch, noise, &mut rng, MeasurementMode::Exact)?.y;
        let mut sampler = cfg.sampler;
        sampler.num_candidates = max_m;
        let candidates = sample_candidates(cfm, &y, &sampler, &mut rng)?;
        let mut prefix_beams = Vec::new();
        for &m in cfg
            .m_sweep
            .iter()
            .chain(std::iter::once(&cfg.sampler.num_candidates))
        {
            let (_, best) = select_beam(&candidates[..m.min(candidates.len())], &ch.h)?;
            prefix_beams.push(best);
        }
        let mlp_beam = match mlp {
            Some(model) if cfg.run_mlp => Some(model.infer_beam(&y)),
            _ => None,
        };
        let pmi_beam = if cfg.run_pmi {
            Some(
                pmi_search(
                    &ch.h,
                    cfg.pmi_tier1,
                    cfg.pmi_tier2,
                    cfg.pmi_oversample,
                    noise,
                    &mut rng,
                )?
                .beam,
            )
        } else {
            None
        };
        let srs_beam = if cfg.run_srs {
            Some(srs_lmmse_beam(&ch.h, noise, &mut rng)?)
        } else {
            None
        };
        let mut power_beams = Vec::new();
        for (pi, &p) in cfg.power_sweep_dbm.iter().enumerate() {
            let mut swept = *noise;
            swept.tx_power_dbm = p;
            let mut rng_p = substream(
                cfg.eval_seed,
                stream::EVAL,
                ((pi as u64 + 1) << 32) | test[i] as u64,
            );
            let y_p =
                measure_rsrp_vector(codebook, ch, &swept, &mut rng_p, MeasurementMode::Exact)?.y;
            let mut sampler_p = cfg.sampler;
            sampler_p.num_candidates = cfg.sampler.num_candidates;
            let cands_p = sample_candidates(cfm, &y_p, &sampler_p, &mut rng_p)?;
            let (_, cfm_p) = select_beam(&cands_p, &ch.h)?;
            let srs_p = srs_lmmse_beam(&ch.h, &swept, &mut rng_p)?;
            power_beams.push((cfm_p, srs_p));
        }
        Ok(UeOutcome {
            cfm_prefix_beams: prefix_beams,
            mlp_beam,
            pmi_beam,
            srs_beam,
            power_beams,
        })
    };

    let outcomes: Vec<UeOutcome> = if threads <= 1 {
        (0..test.len()).map(eval_one).collect::<Result<Vec<_>>>()?
    } else {
        let mut slots: Vec<Option<Result<UeOutcome>>> = (0..test.len()).map(|_| None).collect();
        let chunk = test.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slice) in slots.chunks_mut(chunk).enumerate() {
                let base = t * chunk;
                let eval_ref = &eval_one;
                scope.spawn(move || {
                    for (off, slot) in slice.iter_mut().enumerate() {
                        *slot = Some(eval_ref(base + off));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("computed"))
            .collect::<Result<Vec<_>>>()?
    };

    let channels: Vec<&ChannelRealization> = test.iter().map(|&i| dataset.channel(i)).collect();

    let mut gaps: Vec<(String, GapReport)> = Vec::new();
    let sweep_len = cfg.m_sweep.len();
    let default_beams: Vec<Vec<Complex64>> = outcomes
        .iter()
        .map(|o| o.cfm_prefix_beams[sweep_len].clone())
        .collect();
    gaps.push((
        format!("cfm_m{}", cfg.sampler.num_candidates),
        gain_gap(&channels, &default_beams)?,
    ));
    if cfg.run_mlp && mlp.is_some() {
        let beams: Vec<Vec<Complex64>> = outcomes
            .iter()
            .map(|o| o.mlp_beam.clone().expect("mlp enabled"))
            .collect();
        gaps.push(("mlp".into(), gain_gap(&channels, &beams)?));
    }
    if cfg.run_pmi {
        let beams: Vec<Vec<Complex64>> = outcomes
            .iter()
            .map(|o| o.pmi_beam.clone().expect("pmi enabled"))
            .collect();
        gaps.push(("pmi".into(), gain_gap(&channels, &beams)?));
    }
    if cfg.run_srs {
        let beams: Vec<Vec<Complex64>> = outcomes
            .iter()
            .map(|o| o.srs_beam.clone().expect("srs enabled"))
            .collect();
        gaps.push(("srs".into(), gain_gap(&channels, &beams)?));
    }

    let mut m_sweep_reports = Vec::new();
    for (mi, &m) in cfg.m_sweep.iter().enumerate() {
        let beams: Vec<Vec<Complex64>> = outcomes
            .iter()
            .map(|o| o.cfm_prefix_beams[mi].clone())
            .collect();
        m_sweep_reports.push((m, gain_gap(&channels, &beams)?));
    }

    let mut power_reports = Vec::new();
    for (pi, &p) in cfg.power_sweep_dbm.iter().enumerate() {
        let cfm_beams: Vec<Vec<Complex64>> = outcomes
            .iter()
            .map(|o| o.power_beams[pi].0.clone())
            .collect();
        let srs_beams: Vec<Vec<Complex64>> = outcomes
            .iter()
            .map(|o| o.power_beams[pi].1.clone())
            .collect();
        power_reports.push((
            p,
            gain_gap(&channels, &cfm_beams)?,
            gain_gap(&channels, &srs_beams)?,
        ));
    }

    // Log-determinant table and distance CDFs: learned vs DFT on held-out UEs.
    let dft = dft_codebook(dataset.scenario.num_antennas, codebook.num_beams)?;
    let mut logdet_rows = Vec::new();
    let mut distances = Vec::new();
    for (label, cb) in [("learned", codebook), ("dft", &dft)] {
        let ld = crate::codebook::logdet_metric(
            cb,
            dataset,
            SplitTag::Test,
            noise,
            cfg.logdet_noise_draws,
            cfg.diag_loading,
            cfg.eval_seed,
        )?;
        logdet_rows.push((label.to_string(), "test".to_string(), cb.num_beams, ld));

        let mut rows = Vec::with_capacity(test.len());
        for (&i, _) in test.iter().zip(&channels) {
            let mut rng = substream(cfg.eval_seed, stream::LOGDET_METRIC, (i as u64) << 8);
            rows.push(
                measure_rsrp_vector(cb, dataset.channel(i), noise, &mut rng, MeasurementMode::Exact)?
                    .y,
            );
        }
        let cov = sample_covariance(&rows)?;
        distances.push((label.to_string(), distance_cdfs(&rows, &cov, cfg.diag_loading)?));
    }

    let overhead = vec![
        (
            format!("cfm_m{}", cfg.sampler.num_candidates),
            codebook.num_beams + cfg.sampler.num_candidates,
        ),
        ("mlp".into(), codebook.num_beams),
        ("pmi".into(), cfg.pmi_tier1 + cfg.pmi_tier2),
        ("srs".into(), 0),
    ];

    Ok(PipelineReport {
        gaps,
        m_sweep: m_sweep_reports,
        power_sweep: power_reports,
        logdet_rows,
        distances,
        overhead,
    })
}

/// Writes per-UE gaps: method, variant, ue_index, gap_db, clamped.
pub fn write_gaps_csv(path: &Path, report: &PipelineReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,variant,ue_index,gap_db,clamped")?;
    let mut dump = |method: &str, variant: String, rep: &GapReport| -> Result<()> {
        for (i, (&g, &c)) in rep.gaps_db.iter().zip(&rep.clamped).enumerate() {
            writeln!(f, "{method},{variant},{i},{g},{}", c as u8)?;
        }
        Ok(())
    };
    for (m, rep) in &report.gaps {
        dump(m, String::new(), rep)?;
    }
    for (m, rep) in &report.m_sweep {
        dump("cfm_sweep", format!("m={m}"), rep)?;
    }
    for (p, cfm, srs) in &report.power_sweep {
        dump("cfm_power", format!("p={p}"), cfm)?;
        dump("srs_power", format!("p={p}"), srs)?;
    }
    Ok(())
}

/// Writes the log-determinant table: codebook, split, k, logdet.
pub fn write_logdet_csv(path: &Path, report: &PipelineReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "codebook,split,k,logdet")?;
    for (cb, split, k, ld) in &report.logdet_rows {
        writeln!(f, "{cb},{split},{k},{ld}")?;
    }
    Ok(())
}

/// Writes distance CDFs: codebook, quantile, euclidean, mahalanobis.
pub fn write_distances_csv(path: &Path, report: &PipelineReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "codebook,quantile,euclidean,mahalanobis")?;
    for (label, d) in &report.distances {
        for ((q, e), m) in d
            .quantiles
            .iter()
            .zip(&d.euclidean_cdf)
            .zip(&d.mahalanobis_cdf)
        {
            writeln!(f, "{label},{q},{e},{m}")?;
        }
    }
    Ok(())
}

/// Writes beam patterns over a grid: angle_deg then one dB column per beam.
pub fn write_patterns_csv(path: &Path, angle_grid_rad: &[f64], patterns: &RealTensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let k = patterns.shape[1];
    let header: Vec<String> = (0..k).map(|b| format!("beam_{b}_db")).collect();
    writeln!(f, "angle_deg,{}", header.join(","))?;
    for (r, &phi) in angle_grid_rad.iter().enumerate() {
        let row: Vec<String> = (0..k).map(|b| patterns.at(r, b).to_string()).collect();
        writeln!(f, "{},{}", phi.to_degrees(), row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{self, steering_vector, PlacementMode};
    use crate::rng::substream;
    use rand::Rng;

    fn toy_channels(n_t: usize, count: usize, seed: u64) -> Vec<ChannelRealization> {
        let sc = channel::los_park(n_t);
        let ds = channel::generate_dataset(&sc, count, seed, PlacementMode::Uniform, 1).unwrap();
        ds.entries.into_iter().map(|e| e.realization).collect()
    }

    #[test]
    fn mrt_beams_have_zero_gap() {
        let chans = toy_channels(8, 10, 50);
        let refs: Vec<&ChannelRealization> = chans.iter().collect();
        let beams: Vec<Vec<Complex64>> = chans
            .iter()
            .map(|c| mrt_beamformer(&c.h).unwrap())
            .collect();
        let rep = gain_gap(&refs, &beams).unwrap();
        assert!(rep.gaps_db.iter().all(|&g| g.abs() < 1e-9));
        assert!(rep.mean_db.abs() < 1e-9);
    }

    #[test]
    fn orthogonal_beam_is_clamped() {
        let chans = toy_channels(2, 1, 51);
        let mut ch = chans[0].clone();
        ch.h = vec![Complex64::new(1e-5, 0.0), Complex64::new(-1e-5, 0.0)];
        let refs = vec![&ch];
        // all-ones beam is exactly orthogonal to [c, -c]
        let beams = vec![vec![Complex64::new(1.0, 0.0); 2]];
        let rep = gain_gap(&refs, &beams).unwrap();
        assert_eq!(rep.gaps_db[0], GAP_CLAMP_DB);
        assert!(rep.clamped[0]);
    }

    #[test]
    fn random_beam_mean_gap_near_array_factor() {
        // E|h^H w|² over random unit-modulus phases equals ‖h‖², so the
        // linear-mean gap is 10·log10(N_t²/N_t) ≈ 12 dB for LoS channels.
        let n_t = 16;
        let chans = toy_channels(n_t, 400, 52);
        let mut rng = substream(52, 120, 0);
        let mut acc_star = 0.0;
        let mut acc_rand = 0.0;
        for ch in &chans {
            for _ in 0..25 {
                let w: Vec<Complex64> = (0..n_t)
                    .map(|_| {
                        Complex64::from_polar(
                            1.0,
                            rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                        )
                    })
                    .collect();
                let mrt = mrt_beamformer(&ch.h).unwrap();
                acc_star += array_gain(&ch.h, &mrt).unwrap();
                acc_rand += array_gain(&ch.h, &w).unwrap();
            }
        }
        let mean_gap_db = 10.0 * (acc_star / acc_rand).log10();
        let want = 10.0 * (n_t as f64).log10();
        assert!(
            (mean_gap_db - want).abs() < 2.0,
            "linear-mean gap {mean_gap_db} vs {want}"
        );
    }

    #[test]
    fn identity_covariance_makes_distances_agree() {
        let batch = vec![
            vec![0.0, 1.0, -2.0],
            vec![1.5, 0.5, 0.0],
            vec![-1.0, 2.0, 1.0],
        ];
        let eye = RealTensor::eye(3);
        let rep = distance_cdfs(&batch, &eye, 0.0).unwrap();
        for (e, m) in rep.euclidean_cdf.iter().zip(&rep.mahalanobis_cdf) {
            assert!((e - m).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_vectors_have_zero_distance() {
        let batch = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let eye = RealTensor::eye(2);
        let rep = distance_cdfs(&batch, &eye, 1e-9).unwrap();
        assert_eq!(rep.median_euclidean, 0.0);
        assert_eq!(rep.median_mahalanobis, 0.0);
    }

    #[test]
    fn all_ones_beam_peaks_at_broadside() {
        let cb = crate::codebook::Codebook::from_phases(8, 1, vec![0.0; 8], None).unwrap();
        let grid: Vec<f64> = (-90..=90).map(|d| (d as f64).to_radians()).collect();
        let pat = beam_patterns(&cb, &grid).unwrap();
        let peak_row = (0..grid.len())
            .max_by(|&a, &b| pat.at(a, 0).partial_cmp(&pat.at(b, 0)).unwrap())
            .unwrap();
        assert_eq!(grid[peak_row], 0.0);
        assert_eq!(pat.at(peak_row, 0), 0.0);
        // pre-normalization peak gain is N_t²
        let a = steering_vector(0.0, 8, 0.5);
        assert!((array_gain(&a, &cb.beam(0)).unwrap() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn dft_beam_peaks_at_nominal_angle() {
        let n_t = 16;
        let cb = crate::codebook::dft_codebook(n_t, 8).unwrap();
        let grid: Vec<f64> = (-9000..=9000)
            .map(|d| (d as f64 / 100.0).to_radians())
            .collect();
        let pat = beam_patterns(&cb, &grid).unwrap();
        for k in 1..4 {
            // nominal angle: sin phi = k / (N_t · d/λ) with half-wave spacing
            let want = ((k as f64 / n_t as f64) / 0.5).asin();
            let peak_row = (0..grid.len())
                .max_by(|&a, &b| pat.at(a, k).partial_cmp(&pat.at(b, k)).unwrap())
                .unwrap();
            assert!(
                (grid[peak_row] - want).abs() < 0.02,
                "beam {k}: peak {} vs {want}",
                grid[peak_row]
            );
        }
    }

    #[test]
    fn global_phase_leaves_pattern_unchanged() {
        let cb = crate::codebook::dft_codebook(8, 4).unwrap();
        let mut rotated = cb.phases.clone();
        for (i, p) in rotated.iter_mut().enumerate() {
            if i % 4 == 1 {
                *p += 1.234;
            }
        }
        let cb_rot = crate::codebook::Codebook::from_phases(8, 4, rotated, None).unwrap();
        let grid: Vec<f64> = (-90..=90).map(|d| (d as f64).to_radians()).collect();
        let a = beam_patterns(&cb, &grid).unwrap();
        let b = beam_patterns(&cb_rot, &grid).unwrap();
        for r in 0..grid.len() {
            assert!((a.at(r, 1) - b.at(r, 1)).abs() < 1e-9);
        }
    }
}

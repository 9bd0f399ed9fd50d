//! Scratch pilot for flow-matching training on the LoS park.

use sitebeam_core::cfm::{
    sample_candidates, select_beam, train_cfm, CfmArch, CfmTrainConfig, SamplerConfig,
};
use sitebeam_core::channel::{generate_dataset, los_park, mrt_beamformer, PlacementMode, SplitTag};
use sitebeam_core::codebook::{design_codebook, CodebookDesignConfig};
use sitebeam_core::measurement::{array_gain, measure_rsrp_vector, MeasurementMode, NoiseConfig};
use sitebeam_core::rng::{stream, substream};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let adam: bool = args.get(3).map(|s| s == "adam").unwrap_or(true);

    let sc = los_park(16);
    let ds = generate_dataset(&sc, 2000, 7, PlacementMode::Uniform, 4).unwrap();
    let noise = NoiseConfig::new(sc.shadow_db_var);

    let mut cb_cfg = CodebookDesignConfig::new(8, 11);
    cb_cfg.step_size = 0.1;
    let cb = design_codebook(&ds, &cb_cfg, &noise).unwrap().codebook;

    let arch = CfmArch::reference(16, 8);
    let mut cfg = CfmTrainConfig::new(21);
    cfg.learning_rate = lr;
    cfg.iterations = iters;
    cfg.adam = adam;
    cfg.eval_every = iters / 6;

    let t0 = std::time::Instant::now();
    let out = train_cfm(arch, &ds, &cb, &noise, &cfg).unwrap();
    println!("trained in {:?} ok={} fail={:?}", t0.elapsed(), out.completed, out.failure);
    for r in &out.trace {
        println!(
            "  iter {:5}: train {:8.4} val {:8.4} gap {:6.3} dB ({} ms)",
            r.iter, r.train_loss, r.val_loss, r.val_gap_db, r.wall_ms
        );
    }

    // test-split best-of-8 median gap
    let test = ds.indices(SplitTag::Test);
    let sampler = SamplerConfig::default();
    let mut gaps: Vec<f64> = Vec::new();
    for &i in &test {
        let ch = ds.channel(i);
        let mut rng = substream(99, stream::EVAL, i as u64);
        let y = measure_rsrp_vector(&cb, ch, &noise, &mut rng, MeasurementMode::Exact)
            .unwrap()
            .y;
        let cands = sample_candidates(&out.model, &y, &sampler, &mut rng).unwrap();
        let (_, best) = select_beam(&cands, &ch.h).unwrap();
        let g = array_gain(&ch.h, &best).unwrap();
        let gs = array_gain(&ch.h, &mrt_beamformer(&ch.h).unwrap()).unwrap();
        gaps.push(10.0 * (gs / g).log10());
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "test gaps: median {:.3} dB, mean {:.3} dB, p95 {:.3} dB (n={})",
        gaps[gaps.len() / 2],
        gaps.iter().sum::<f64>() / gaps.len() as f64,
        gaps[(gaps.len() * 95) / 100],
        gaps.len()
    );
}

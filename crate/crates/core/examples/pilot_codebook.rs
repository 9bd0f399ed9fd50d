//! Scratch pilot: wide fan-favoring park, momentum on.

use sitebeam_core::channel::{generate_dataset, los_park, PlacementMode, Rect, Scatterer, SplitTag};
use sitebeam_core::codebook::{
    design_codebook, dft_codebook, logdet_metric, orthogonality_penalty, CodebookDesignConfig,
};
use sitebeam_core::measurement::NoiseConfig;

fn main() {
    let mut sc = los_park(16);
    sc.pathloss_exponent = 2.0;
    sc.ue_region = Rect { x_min: 20.0, x_max: 120.0, y_min: -110.0, y_max: 110.0 };
    sc.scatterers = vec![
        Scatterer { position: [60.0, 80.0], reflection_loss_db: 16.0 },
        Scatterer { position: [90.0, -85.0], reflection_loss_db: 18.0 },
        Scatterer { position: [35.0, -50.0], reflection_loss_db: 17.0 },
    ];
    let ds = generate_dataset(&sc, 2000, 7, PlacementMode::Uniform, 4).unwrap();
    let noise = NoiseConfig::new(sc.shadow_db_var);

    let cb0 = dft_codebook(16, 8).unwrap();
    let mut worst: f64 = f64::INFINITY;
    let mut typ = 0.0;
    for i in 0..400 {
        let ch = ds.channel(i);
        for k in 0..8 {
            let g = sitebeam_core::measurement::array_gain(&ch.h, &cb0.beam(k)).unwrap();
            let snr = noise.tx_power_mw() * g / noise.noise_power_mw();
            worst = worst.min(snr);
            typ += 10.0 * snr.log10();
        }
    }
    println!("probe SNR: mean {:.1} dB, worst {:.1} dB", typ / 3200.0, 10.0 * worst.log10());
    let ld_dft = logdet_metric(&cb0, &ds, SplitTag::Test, &noise, 1, 1e-6, 3).unwrap();
    println!("dft test logdet = {ld_dft:.3}");

    for (step, momentum, iters) in [
        (0.01, Some(0.9), 500usize),
        (0.02, Some(0.9), 500),
        (0.03, Some(0.9), 500),
        (0.01, Some(0.95), 500),
        (0.03, None, 20000),
    ] {
        let mut cfg = CodebookDesignConfig::new(8, 11);
        cfg.step_size = step;
        cfg.iterations = iters;
        cfg.momentum = momentum;
        let out = design_codebook(&ds, &cfg, &noise).unwrap();
        let lo = orthogonality_penalty(&out.codebook);
        let traj: Vec<String> = out.trace.iter().step_by(iters / 4)
            .map(|r| format!("(i{} or {:.2})", r.iter, r.orthogonality)).collect();
        let ld_val0 = logdet_metric(&out.initial_codebook, &ds, SplitTag::Val, &noise, 1, 1e-6, 3).unwrap();
        let ld_val = logdet_metric(&out.codebook, &ds, SplitTag::Val, &noise, 1, 1e-6, 3).unwrap();
        let ld_test = logdet_metric(&out.codebook, &ds, SplitTag::Test, &noise, 1, 1e-6, 3).unwrap();
        println!(
            "step {step:-5} mom {momentum:?} I={iters}: L_orth {lo:-9.5} val {ld_val0:.2}->{ld_val:.2} test {ld_test:.2} {}",
            traj.join(" ")
        );
    }
}

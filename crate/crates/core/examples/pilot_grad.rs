//! Diagnostic: does the optimizer stay near an orthogonal fan it starts at?

use sitebeam_core::channel::{generate_dataset, los_park, PlacementMode, Rect, Scatterer, SplitTag};
use sitebeam_core::codebook::{batch_objective, orthogonality_penalty, Codebook, CodebookDesignConfig};
use sitebeam_core::math::tensor::RealTensor;
use sitebeam_core::measurement::NoiseConfig;
use sitebeam_core::rng::{stream, substream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

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
    let train = ds.indices(SplitTag::Train);
    let cfg = CodebookDesignConfig::new(8, 11);

    // spread fan: every other column of the 16-point DFT grid
    let mut phases = vec![0.0; 16 * 8];
    for n in 0..16 {
        for (col, k) in (0..16).step_by(2).enumerate() {
            phases[n * 8 + col] = (2.0 * std::f64::consts::PI * (n * k) as f64 / 16.0)
                .rem_euclid(2.0 * std::f64::consts::PI);
        }
    }
    let mut phi = RealTensor::matrix(16, 8, phases).unwrap();

    for &step in &[0.01, 0.1] {
        let mut p = phi.clone();
        for it in 1..=500u64 {
            let mut rng = substream(11, stream::CODEBOOK_BATCH, it);
            let mut pool = train.clone();
            let (chosen, _) = pool.partial_shuffle(&mut rng, 64);
            let batch: Vec<_> = chosen.iter().map(|&i| ds.channel(i)).collect();
            let mut nrng = substream(11, stream::CODEBOOK_NOISE, it);
            let draws = RealTensor::matrix(64, 8, (0..512).map(|_| nrng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
            let (_, g) = batch_objective(&p, &batch, &cfg, &noise, &draws).unwrap();
            for (pp, gg) in p.data.iter_mut().zip(&g.data) {
                *pp = (*pp + step * gg).rem_euclid(2.0 * std::f64::consts::PI);
            }
            if it % 100 == 0 {
                let cb = Codebook::from_phases(16, 8, p.data.clone(), None).unwrap();
                print!("(i{it} or {:.3}) ", orthogonality_penalty(&cb));
            }
        }
        println!(" <- step {step} from fan start");
    }
    let _ = &mut phi;
}

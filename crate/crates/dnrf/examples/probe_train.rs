// Timing/dynamics probe for the training loop on the reference scene.
use dnrf::dataset::{generate_synthetic_scene, load_scene, SyntheticSceneSpec};
use dnrf::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let rays: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(512);
    let res: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);

    let dir = std::env::temp_dir().join(format!("dnrf_probe_{res}"));
    if !dir.join("manifest").exists() {
        let t = Instant::now();
        generate_synthetic_scene(
            &dir,
            &SyntheticSceneSpec {
                seed: 7,
                frames: 60,
                resolution: res,
                amplitude: 0.15,
            },
        )
        .unwrap();
        println!("generate: {:.1}s", t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    let scene = load_scene(&dir).unwrap();
    println!("load: {:.1}s", t.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        total_steps: steps,
        rays_per_step: rays,
        seed: 7,
        threads: 1,
        holdout_last: 10,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut last = Instant::now();
    let ckpt = train(&scene, &cfg, None, |s| {
        if s.step % 20 == 0 {
            println!(
                "step {:4}  loss {:9.3}  psnr_est {:5.2}  occ {:7}  {:6.3}s/20steps",
                s.step,
                s.loss,
                s.psnr_estimate,
                s.occupied_cells,
                last.elapsed().as_secs_f64()
            );
            last = Instant::now();
        }
    })
    .unwrap();
    println!(
        "total {:.1}s for {} steps ({:.3} s/step)",
        start.elapsed().as_secs_f64(),
        steps,
        start.elapsed().as_secs_f64() / steps as f64
    );

    let t = Instant::now();
    let (_, mean) = dnrf::trainer::evaluate(&scene, &ckpt, 10, false).unwrap();
    println!(
        "eval: psnr {:.2} mse {:.5} ssim {:.3} ({:.1}s)",
        mean.psnr,
        mean.mse,
        mean.ssim,
        t.elapsed().as_secs_f64()
    );
}

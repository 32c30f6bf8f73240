// Init-density distribution probe.
use dnrf::dataset::{load_scene, SyntheticSceneSpec};
use dnrf::encoding::HashGridConfig;
use dnrf::field::{NeuralField, RadianceField};
use dnrf::network::ExpressionCode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let dir = std::env::temp_dir().join("dnrf_probe_64");
    if !dir.join("manifest").exists() {
        dnrf::dataset::generate_synthetic_scene(
            &dir,
            &SyntheticSceneSpec {
                seed: 7,
                frames: 60,
                resolution: 64,
                amplitude: 0.15,
            },
        )
        .unwrap();
    }
    let scene = load_scene(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let field =
        NeuralField::<f32>::new(HashGridConfig::with_bounding_box(scene.canonical_bbox), &mut rng)
            .unwrap();
    let ctx = scene.frame_context(0);
    let ones = ExpressionCode::ones().as_scalars::<f32>();
    let bb = scene.deformed_bbox;
    let mut over = 0;
    let mut max_d = 0.0f32;
    let n = 2000;
    for _ in 0..n {
        let p = nalgebra::Vector3::new(
            bb.min.x + rng.random::<f64>() * (bb.max.x - bb.min.x),
            bb.min.y + rng.random::<f64>() * (bb.max.y - bb.min.y),
            bb.min.z + rng.random::<f64>() * (bb.max.z - bb.min.z),
        );
        let hit = ctx.bvh.nearest(&p);
        let c = ctx.gradients.canonicalize(&p, hit.face);
        let d = field.density([c.x as f32, c.y as f32, c.z as f32], &ones);
        if d > 0.01 {
            over += 1;
        }
        max_d = max_d.max(d);
    }
    println!("init density: {over}/{n} above 0.01, max {max_d:.5}");
}

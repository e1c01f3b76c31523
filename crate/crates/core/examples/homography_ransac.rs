//! Robust homography fitting on correspondences with 50% outliers.

use edm::homography::{corner_error, estimate_homography_dlt};
use edm::synth::{random_homography, DataConfig};
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let h = random_homography(&mut rng, 256, &DataConfig::default());
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..100 {
        let p = (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0));
        src.push(p);
        dst.push(if i % 2 == 0 {
            h.apply(p).unwrap()
        } else {
            (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0))
        });
    }
    match estimate_homography_dlt(&src, &dst, 1000, 3.0, &mut rng) {
        Some(r) => println!(
            "{} inliers, corner error {:.2e} px",
            r.num_inliers(),
            corner_error(&r.h, &h, (256, 256))
        ),
        None => println!("no estimate"),
    }
}

//! Naive and max-stabilised dual-softmax: agreement and speed.

use edm::bench::bench_dual_softmax;
use edm::coarse::{dual_softmax_efficient, dual_softmax_naive};
use edm::Tensor;
use rand::SeedableRng;

fn main() -> edm::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let s = Tensor::<f64>::rand_normal(&[64, 48], 5.0, &mut rng);
    let diff = dual_softmax_naive(&s)?.max_abs_diff(&dual_softmax_efficient(&s)?);
    println!("64x48 max abs difference: {diff:.3e}");
    for n in [256, 512, 1024] {
        let b = bench_dual_softmax(n, 20, 0)?;
        println!(
            "{n:>5}: naive {:>8.3} ms  efficient {:>8.3} ms  ({:.2}x)",
            b.naive.as_secs_f64() * 1e3,
            b.efficient.as_secs_f64() * 1e3,
            b.speedup()
        );
    }
    Ok(())
}

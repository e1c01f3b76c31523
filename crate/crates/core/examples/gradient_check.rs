//! Finite-difference check of a small attention computation in 64-bit.

use edm::cim::qkn_attention;
use edm::gradcheck::check_inputs;
use edm::Tensor;
use rand::SeedableRng;

fn main() -> edm::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::rand_normal(&[1, 5, 8], 1.0, &mut rng)).collect();
    let err = check_inputs(&inputs, |g, v| Ok(qkn_attention(g, v[0], v[1], v[2], 20.0)?.0))?;
    println!("attention relative gradient error: {err:.3e}");
    let x = Tensor::<f64>::rand_normal(&[4, 6], 1.0, &mut rng);
    let err = check_inputs(&[x], |g, v| {
        let s = g.sigmoid(v[0])?;
        g.softmax(s, 1)
    })?;
    println!("sigmoid+softmax relative gradient error: {err:.3e}");
    Ok(())
}

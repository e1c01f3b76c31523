//! Per-stage wall-clock timing of the matcher and the dual-softmax
//! micro-benchmark.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coarse::{dual_softmax_efficient, dual_softmax_naive};
use crate::error::Result;
use crate::model::{EdmModel, StageTimes};
use crate::params::ParamStore;
use crate::synth::gen_synthetic_pair;
use crate::tensor::Tensor;

pub const STAGES: [&str; 4] = ["extraction", "transform", "coarse", "fine"];

pub fn median(mut v: Vec<Duration>) -> Duration {
    if v.is_empty() {
        return Duration::ZERO;
    }
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub size: usize,
    pub repeats: usize,
    /// Median per stage, in [`STAGES`] order.
    pub stages: [Duration; 4],
    /// Median end-to-end time of a run.
    pub total: Duration,
}

impl StageReport {
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = STAGES
            .iter()
            .zip(&self.stages)
            .map(|(n, d)| format!("{n:<12} {:>10.3} ms", d.as_secs_f64() * 1e3))
            .collect();
        out.push(format!("{:<12} {:>10.3} ms", "total", self.total.as_secs_f64() * 1e3));
        out
    }
}

/// Times `repeats` matches of one synthetic pair after a warmup run.
pub fn bench_stages(model: &EdmModel, store: &mut ParamStore<f32>, size: usize, repeats: usize) -> Result<StageReport> {
    let pair = gen_synthetic_pair(0, size, &model.config.data)?;
    model.match_images(store, &pair.a, &pair.b, false)?;
    let mut per_stage: [Vec<Duration>; 4] = Default::default();
    let mut totals = Vec::new();
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let out = model.match_images(store, &pair.a, &pair.b, false)?;
        totals.push(t0.elapsed());
        let StageTimes { extraction, transform, coarse, fine } = out.times;
        for (slot, d) in per_stage.iter_mut().zip([extraction, transform, coarse, fine]) {
            slot.push(d);
        }
    }
    Ok(StageReport {
        size,
        repeats: repeats.max(1),
        stages: per_stage.map(median),
        total: median(totals),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SoftmaxBench {
    pub n: usize,
    pub naive: Duration,
    pub efficient: Duration,
}

impl SoftmaxBench {
    pub fn speedup(&self) -> f64 {
        self.naive.as_secs_f64() / self.efficient.as_secs_f64().max(1e-12)
    }
}

/// Median times of both dual-softmax forms on a random `n × n` matrix.
pub fn bench_dual_softmax(n: usize, repeats: usize, seed: u64) -> Result<SoftmaxBench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Tensor::<f32>::rand_normal(&[n, n], 3.0, &mut rng);
    let time = |f: &dyn Fn() -> Result<Tensor<f32>>| -> Result<Duration> {
        f()?;
        let mut v = Vec::with_capacity(repeats);
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            std::hint::black_box(f()?);
            v.push(t.elapsed());
        }
        Ok(median(v))
    };
    let naive = time(&|| dual_softmax_naive(&s))?;
    let efficient = time(&|| dual_softmax_efficient(&s))?;
    Ok(SoftmaxBench { n, naive, efficient })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        let ms = Duration::from_millis;
        assert_eq!(median(vec![ms(3), ms(1), ms(2)]), ms(2));
        assert_eq!(median(vec![ms(4), ms(2)]), ms(3));
        assert_eq!(median(vec![]), Duration::ZERO);
    }
}

use std::hint::black_box;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::tensor::{random_feature_map, FeatureMapSpec, Scalar};

pub const MIN_TIMED_RUNS: usize = 30;

const INPUT_SEED: u64 = 0x1a7e;

static BUSY: AtomicBool = AtomicBool::new(false);

struct BusyGuard;

impl BusyGuard {
    fn acquire() -> Result<Self> {
        BUSY.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| BusyGuard)
            .map_err(|_| Error::BenchmarkBusy)
    }
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        BUSY.store(false, Ordering::Release);
    }
}

/// Per-image inference latency statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Median over timed runs of batch time / batch size.
    pub per_image_ms: f64,
    /// Interquartile range of the same samples.
    pub iqr_ms: f64,
    pub n_warmup: usize,
    pub n_timed: usize,
    pub batch_size: usize,
    pub device_label: String,
}

/// Linear-interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `n_timed` forward passes (after `n_warmup` untimed ones) on a fixed
/// random batch. Only one benchmark may run per process at a time; a second
/// concurrent call fails with [`Error::BenchmarkBusy`].
pub fn benchmark_latency<T: Scalar>(
    model: &HybridModel<T>,
    input_size: usize,
    batch_size: usize,
    n_warmup: usize,
    n_timed: usize,
) -> Result<LatencyReport> {
    if n_timed < MIN_TIMED_RUNS {
        return Err(Error::invalid(format!(
            "n_timed must be at least {MIN_TIMED_RUNS}, got {n_timed}"
        )));
    }
    let spec = FeatureMapSpec::new(batch_size, 3, input_size, input_size)?;
    let _guard = BusyGuard::acquire()?;
    let x = random_feature_map::<T, _>(spec, &mut ChaCha8Rng::seed_from_u64(INPUT_SEED));
    for _ in 0..n_warmup {
        black_box(model.predict(black_box(&x))?);
    }
    let mut samples = Vec::with_capacity(n_timed);
    for _ in 0..n_timed {
        let start = Instant::now();
        let out = model.predict(black_box(&x))?;
        let elapsed = start.elapsed();
        black_box(out);
        samples.push(elapsed.as_secs_f64() * 1e3 / batch_size as f64);
    }
    samples.sort_by(f64::total_cmp);
    let median = quantile(&samples, 0.5);
    Ok(LatencyReport {
        per_image_ms: median,
        iqr_ms: quantile(&samples, 0.75) - quantile(&samples, 0.25),
        n_warmup,
        n_timed,
        batch_size,
        device_label: "cpu".to_string(),
    })
}

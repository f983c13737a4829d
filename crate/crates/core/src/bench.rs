//! Wall-time comparison of the scan kernels.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, ScsmError};
use crate::ssm::{self, DiagStateMatrix};
use crate::tensor::Tensor;

fn checksum_of(bytes: impl Iterator<Item = u8>) -> String {
    let mut h = Sha256::new();
    h.update(bytes.collect::<Vec<u8>>());
    hex::encode(h.finalize())[..16].to_string()
}

/// Best-of-`reps` wall time of `f`, in seconds.
fn best_time(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

pub struct BenchRow {
    pub kernel: &'static str,
    pub seconds: f64,
    pub checksum: String,
}

/// Sequential and parallel scans in fp64 and fp32 over the same inputs.
pub fn run_bench(len: usize, lanes: usize, batch: usize, reps: usize, workers: usize) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = DiagStateMatrix::new((1..=lanes).map(|i| -(i as f64) / lanes as f64).collect())?;
    let shape = [batch, len, lanes];
    let disc = ssm::zoh_discretize(&a, &Tensor::randn(&shape, &mut rng), 0.5)?;
    let c = Tensor::randn(&shape, &mut rng);
    let x = Tensor::randn(&shape, &mut rng);
    let n = x.numel();
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let (a32, b32, c32, x32) = (f32s(&disc.a_d), f32s(disc.b_d.data()), f32s(c.data()), f32s(x.data()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ScsmError::arg(format!("thread pool: {e}")))?;
    let mut rows = Vec::new();
    let mut y = vec![0.0f64; n];
    let t = best_time(reps, || ssm::scan_sequential_slice(&disc.a_d, disc.b_d.data(), c.data(), x.data(), &mut y, None, len));
    rows.push(BenchRow { kernel: "sequential_f64", seconds: t, checksum: checksum_of(y.iter().flat_map(|v| v.to_le_bytes())) });
    let t = pool.install(|| best_time(reps, || ssm::scan_parallel_slice(&disc.a_d, disc.b_d.data(), c.data(), x.data(), &mut y, len)));
    rows.push(BenchRow { kernel: "parallel_f64", seconds: t, checksum: checksum_of(y.iter().flat_map(|v| v.to_le_bytes())) });
    let mut y32 = vec![0.0f32; n];
    let t = best_time(reps, || ssm::scan_sequential_slice(&a32, &b32, &c32, &x32, &mut y32, None, len));
    rows.push(BenchRow { kernel: "sequential_f32", seconds: t, checksum: checksum_of(y32.iter().flat_map(|v| v.to_le_bytes())) });
    let t = pool.install(|| best_time(reps, || ssm::scan_parallel_slice(&a32, &b32, &c32, &x32, &mut y32, len)));
    rows.push(BenchRow { kernel: "parallel_f32", seconds: t, checksum: checksum_of(y32.iter().flat_map(|v| v.to_le_bytes())) });
    Ok(rows)
}

//! State-matrix construction, zero-order-hold discretisation and the
//! diagonal state-space scan.
//!
//! The recurrence runs independently per feature lane `d`:
//!
//! ```text
//! h[t] = A_d[d] * h[t-1] + B_d[t,d] * x[t,d]      (h[-1] = 0)
//! y[t] = c[t,d] * h[t]
//! ```
//!
//! Tensors are laid out `[batch, length, lanes]`.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Result, ScsmError};
use crate::tensor::Tensor;

/// Below this magnitude `(exp(z) - 1) / z` is evaluated by its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Tile length of the parallel scan. Must be a power of two.
pub const SCAN_TILE: usize = 256;

/// Dense HiPPO-LegS matrix:
/// `A[n][k] = -sqrt(2n+1) sqrt(2k+1)` below the diagonal, `-(n+1)` on it, `0` above.
pub fn hippo_legs(d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(ScsmError::arg("HiPPO dimension must be positive"));
    }
    Ok(Tensor::from_fn(&[d, d], |i| {
        let (n, k) = (i / d, i % d);
        if n > k {
            -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
        } else if n == k {
            -((n + 1) as f64)
        } else {
            0.0
        }
    }))
}

/// Diagonal continuous-time state matrix with strictly negative entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagStateMatrix {
    a: Vec<f64>,
}

impl DiagStateMatrix {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(ScsmError::arg("state matrix must be non-empty"));
        }
        if let Some(bad) = a.iter().find(|v| !(v.is_finite() && **v < 0.0)) {
            return Err(ScsmError::arg(format!("state matrix entries must be negative, got {bad}")));
        }
        Ok(Self { a })
    }

    /// Entries `a = -exp(theta)`; negativity holds for any finite `theta`.
    pub fn from_log(theta: &[f64]) -> Result<Self> {
        Self::new(theta.iter().map(|t| -t.exp()).collect())
    }

    pub fn to_log(&self) -> Vec<f64> {
        self.a.iter().map(|v| (-v).ln()).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// The HiPPO-LegS diagonal, `a_d = -(d+1)`.
pub fn s4d_real_init(d: usize) -> DiagStateMatrix {
    DiagStateMatrix {
        a: (0..d).map(|i| -((i + 1) as f64)).collect(),
    }
}

/// Which eigenvalue magnitude sets the time scale `dt = 1/sqrt(lambda)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DtReading {
    /// `lambda = max |a_d|`
    #[default]
    SpectralRadius,
    /// `lambda = min |a_d|`
    SmallestMagnitude,
}

impl std::str::FromStr for DtReading {
    type Err = ScsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral_radius" => Ok(DtReading::SpectralRadius),
            "smallest_magnitude" => Ok(DtReading::SmallestMagnitude),
            _ => Err(ScsmError::arg(format!("unknown dt reading '{s}'"))),
        }
    }
}

impl std::fmt::Display for DtReading {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DtReading::SpectralRadius => "spectral_radius",
            DtReading::SmallestMagnitude => "smallest_magnitude",
        })
    }
}

pub fn compute_dt(a: &[f64], reading: DtReading) -> Result<f64> {
    Ok(compute_dt_source(a, reading)?.0)
}

/// `dt` together with the index of the eigenvalue that set it.
pub fn compute_dt_source(a: &[f64], reading: DtReading) -> Result<(f64, usize)> {
    if a.is_empty() {
        return Err(ScsmError::arg("compute_dt needs a non-empty state matrix"));
    }
    if a.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(ScsmError::arg("compute_dt: zero or non-finite eigenvalue"));
    }
    let mut best = 0;
    for (i, v) in a.iter().enumerate() {
        let better = match reading {
            DtReading::SpectralRadius => v.abs() > a[best].abs(),
            DtReading::SmallestMagnitude => v.abs() < a[best].abs(),
        };
        if better {
            best = i;
        }
    }
    Ok((1.0 / a[best].abs().sqrt(), best))
}

/// `(exp(z) - 1) / z`, continuous at zero.
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_factor`].
pub fn zoh_factor_grad(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Discretised parameters of one scan.
#[derive(Clone, Debug)]
pub struct Discretized {
    /// `exp(dt * a_d)` per lane.
    pub a_d: Vec<f64>,
    /// Per-position input matrix `[B, L, D]`.
    pub b_d: Tensor,
    pub dt: f64,
}

pub fn zoh_discretize(a: &DiagStateMatrix, b_t: &Tensor, dt: f64) -> Result<Discretized> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ScsmError::arg(format!("time scale must be positive, got {dt}")));
    }
    let d = a.len();
    if b_t.ndim() != 3 || b_t.shape()[2] != d {
        return Err(ScsmError::dim("zoh_discretize", b_t.shape(), &[d]));
    }
    let scale: Vec<f64> = a.values().iter().map(|&v| zoh_factor(dt * v) * dt).collect();
    let mut b_d = b_t.clone();
    for row in b_d.data_mut().chunks_mut(d) {
        for (v, s) in row.iter_mut().zip(&scale) {
            *v *= s;
        }
    }
    Ok(Discretized {
        a_d: a.values().iter().map(|&v| (dt * v).exp()).collect(),
        b_d,
        dt,
    })
}

fn check_scan_shapes(disc: &Discretized, c_t: &Tensor, x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = disc.b_d.shape();
    if s.len() != 3 || s[2] != disc.a_d.len() {
        return Err(ScsmError::dim("ssm_scan (B_d)", s, &[disc.a_d.len()]));
    }
    if c_t.shape() != s {
        return Err(ScsmError::dim("ssm_scan (C)", c_t.shape(), s));
    }
    if x.shape() != s {
        return Err(ScsmError::dim("ssm_scan (x)", x.shape(), s));
    }
    Ok((s[0], s[1], s[2]))
}

/// Sequential scan over contiguous `[batch, len, lanes]` buffers. Writes the
/// hidden states into `h` when given.
pub fn scan_sequential_slice<T: Float>(
    a_d: &[T],
    b_d: &[T],
    c: &[T],
    x: &[T],
    y: &mut [T],
    mut h_out: Option<&mut [T]>,
    len: usize,
) {
    let d = a_d.len();
    let mut h = vec![T::zero(); d];
    for (row, ((bb, cc), xx)) in b_d.chunks(d).zip(c.chunks(d)).zip(x.chunks(d)).enumerate() {
        if row % len == 0 {
            h.iter_mut().for_each(|v| *v = T::zero());
        }
        let yrow = &mut y[row * d..(row + 1) * d];
        for i in 0..d {
            h[i] = a_d[i] * h[i] + bb[i] * xx[i];
            yrow[i] = cc[i] * h[i];
        }
        if let Some(hs) = h_out.as_deref_mut() {
            hs[row * d..(row + 1) * d].copy_from_slice(&h);
        }
    }
}

/// Composition of affine maps `h -> a h + b`: apply `first`, then `second`.
#[inline]
pub fn compose<T: Float>(first: (T, T), second: (T, T)) -> (T, T) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Blelloch exclusive scan of per-lane affine maps stored as `[n][lanes]`.
/// `n` must be a power of two; the identity map is `(1, 0)`.
fn blelloch_exclusive<T: Float>(ma: &mut [T], mb: &mut [T], n: usize, lanes: usize) {
    debug_assert!(n.is_power_of_two());
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            let l = i - stride;
            for k in 0..lanes {
                let (a, b) = compose((ma[l * lanes + k], mb[l * lanes + k]), (ma[i * lanes + k], mb[i * lanes + k]));
                ma[i * lanes + k] = a;
                mb[i * lanes + k] = b;
            }
            i += 2 * stride;
        }
        stride *= 2;
    }
    for k in 0..lanes {
        ma[(n - 1) * lanes + k] = T::one();
        mb[(n - 1) * lanes + k] = T::zero();
    }
    stride = n / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < n {
            let l = i - stride;
            for k in 0..lanes {
                let left = (ma[l * lanes + k], mb[l * lanes + k]);
                let here = (ma[i * lanes + k], mb[i * lanes + k]);
                ma[l * lanes + k] = here.0;
                mb[l * lanes + k] = here.1;
                let (a, b) = compose(here, left);
                ma[i * lanes + k] = a;
                mb[i * lanes + k] = b;
            }
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Tiled parallel scan: full tiles of [`SCAN_TILE`] positions are reduced to
/// affine maps in parallel, combined with a Blelloch exclusive scan, then
/// re-expanded in parallel; the remainder is a sequential tail. The
/// combination tree depends only on `len`, never on the worker count.
pub fn scan_parallel_slice<T: Float + Send + Sync>(
    a_d: &[T],
    b_d: &[T],
    c: &[T],
    x: &[T],
    y: &mut [T],
    len: usize,
) {
    let d = a_d.len();
    let batch = b_d.len() / (len * d);
    let n_tiles = len / SCAN_TILE;
    let tile_sz = SCAN_TILE * d;
    let padded = n_tiles.next_power_of_two().max(1);

    // per-batch carries into each full tile plus the state after the last one
    let carries: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let base = b * len * d;
            let mut ma = vec![T::one(); padded * d];
            let mut mb = vec![T::zero(); padded * d];
            let tiles: Vec<Vec<T>> = (0..n_tiles)
                .into_par_iter()
                .map(|t| {
                    let off = base + t * tile_sz;
                    let mut h = vec![T::zero(); d];
                    for (bb, xx) in b_d[off..off + tile_sz].chunks(d).zip(x[off..off + tile_sz].chunks(d)) {
                        for i in 0..d {
                            h[i] = a_d[i] * h[i] + bb[i] * xx[i];
                        }
                    }
                    h
                })
                .collect();
            let a_pow: Vec<T> = a_d.iter().map(|&a| a.powi(SCAN_TILE as i32)).collect();
            for (t, h) in tiles.iter().enumerate() {
                ma[t * d..(t + 1) * d].copy_from_slice(&a_pow);
                mb[t * d..(t + 1) * d].copy_from_slice(h);
            }
            let (last_a, last_b) = if n_tiles > 0 {
                (a_pow.clone(), tiles[n_tiles - 1].clone())
            } else {
                (vec![T::one(); d], vec![T::zero(); d])
            };
            blelloch_exclusive(&mut ma, &mut mb, padded, d);
            let mut tail = vec![T::zero(); d];
            if n_tiles > 0 {
                let l = n_tiles - 1;
                for k in 0..d {
                    tail[k] = compose((ma[l * d + k], mb[l * d + k]), (last_a[k], last_b[k])).1;
                }
            }
            (mb[..n_tiles * d].to_vec(), tail)
        })
        .collect();

    y.par_chunks_mut(len * d).enumerate().for_each(|(b, yb)| {
        let base = b * len * d;
        let (carry, tail) = &carries[b];
        let run = |yseg: &mut [T], start: usize, h0: &[T]| {
            let mut h = h0.to_vec();
            let n = yseg.len();
            for (r, yrow) in yseg.chunks_mut(d).enumerate() {
                let off = base + start + r * d;
                for i in 0..d {
                    h[i] = a_d[i] * h[i] + b_d[off + i] * x[off + i];
                    yrow[i] = c[off + i] * h[i];
                }
            }
            debug_assert_eq!(n % d, 0);
        };
        let (full, rest) = yb.split_at_mut(n_tiles * tile_sz);
        full.par_chunks_mut(tile_sz)
            .enumerate()
            .for_each(|(t, seg)| run(seg, t * tile_sz, &carry[t * d..(t + 1) * d]));
        run(rest, n_tiles * tile_sz, tail);
    });
}

pub fn ssm_scan_sequential(disc: &Discretized, c_t: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (_, l, _) = check_scan_shapes(disc, c_t, x)?;
    let mut y = vec![0.0; x.numel()];
    scan_sequential_slice(&disc.a_d, disc.b_d.data(), c_t.data(), x.data(), &mut y, None, l);
    Tensor::new(x.shape(), y)
}

pub fn ssm_scan_parallel(disc: &Discretized, c_t: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (_, l, _) = check_scan_shapes(disc, c_t, x)?;
    let mut y = vec![0.0; x.numel()];
    scan_parallel_slice(&disc.a_d, disc.b_d.data(), c_t.data(), x.data(), &mut y, l);
    Tensor::new(x.shape(), y)
}

/// Forward pass that also keeps the hidden states for backward.
pub fn scan_with_states(disc: &Discretized, c_t: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, l, _) = check_scan_shapes(disc, c_t, x)?;
    let mut y = vec![0.0; x.numel()];
    let mut h = vec![0.0; x.numel()];
    scan_sequential_slice(&disc.a_d, disc.b_d.data(), c_t.data(), x.data(), &mut y, Some(&mut h), l);
    Ok((Tensor::new(x.shape(), y)?, Tensor::new(x.shape(), h)?))
}

/// Gradients of a discretised scan.
pub struct ScanGrads {
    pub x: Tensor,
    pub b_t: Tensor,
    pub c_t: Tensor,
    /// With respect to the continuous diagonal `a`, holding `dt` fixed.
    pub a: Vec<f64>,
    /// With respect to `dt`, holding `a` fixed.
    pub dt: f64,
}

/// Reverse-time adjoint of [`scan_with_states`] composed with
/// [`zoh_discretize`]. `g[t] = c[t] gy[t] + A_d g[t+1]` is the total
/// derivative of the loss with respect to `h[t]`.
pub fn scan_backward(
    a: &DiagStateMatrix,
    disc: &Discretized,
    b_t: &Tensor,
    c_t: &Tensor,
    x: &Tensor,
    h: &Tensor,
    gy: &Tensor,
) -> ScanGrads {
    let [batch, l, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let dt = disc.dt;
    let (xd, hd, gyd, cd, bd, bt) = (x.data(), h.data(), gy.data(), c_t.data(), disc.b_d.data(), b_t.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gb = vec![0.0; x.numel()];
    let mut gc = vec![0.0; x.numel()];
    let mut g_ad = vec![0.0; d];
    let mut g_bt_weighted = vec![0.0; d];
    let scale: Vec<f64> = a.values().iter().map(|&v| zoh_factor(dt * v) * dt).collect();
    let mut carry = vec![0.0; d];
    for b in 0..batch {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..l).rev() {
            let off = (b * l + t) * d;
            for i in 0..d {
                let k = off + i;
                gc[k] = gyd[k] * hd[k];
                let g = cd[k] * gyd[k] + disc.a_d[i] * carry[i];
                carry[i] = g;
                gx[k] = g * bd[k];
                let g_bbar = g * xd[k];
                gb[k] = g_bbar * scale[i];
                g_bt_weighted[i] += g_bbar * bt[k];
                if t > 0 {
                    g_ad[i] += g * hd[k - d];
                }
            }
        }
    }
    let mut gdt = 0.0;
    let ga = a
        .values()
        .iter()
        .enumerate()
        .map(|(i, &av)| {
            let z = dt * av;
            let dz = zoh_factor_grad(z);
            gdt += g_ad[i] * av * z.exp() + g_bt_weighted[i] * (dz * av * dt + zoh_factor(z));
            g_ad[i] * dt * z.exp() + g_bt_weighted[i] * dz * dt * dt
        })
        .collect();
    ScanGrads {
        x: Tensor::new(x.shape(), gx).expect("shape"),
        b_t: Tensor::new(x.shape(), gb).expect("shape"),
        c_t: Tensor::new(x.shape(), gc).expect("shape"),
        a: ga,
        dt: gdt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hippo_small_cases() {
        assert_eq!(hippo_legs(1).unwrap().data(), &[-1.0]);
        let h2 = hippo_legs(2).unwrap();
        assert_eq!(h2.data(), &[-1.0, 0.0, -(3f64.sqrt()), -2.0]);
        let h4 = hippo_legs(4).unwrap();
        let diag: Vec<f64> = (0..4).map(|i| h4.at(&[i, i])).collect();
        assert_eq!(diag, vec![-1.0, -2.0, -3.0, -4.0]);
        assert!(hippo_legs(0).is_err());
    }

    #[test]
    fn s4d_init_is_negative_ramp() {
        assert_eq!(s4d_real_init(3).values(), &[-1.0, -2.0, -3.0]);
    }

    #[test]
    fn dt_readings() {
        assert_eq!(compute_dt(&[-1.0], DtReading::SpectralRadius).unwrap(), 1.0);
        assert_eq!(compute_dt(&[-1.0, -2.0, -3.0, -4.0], DtReading::SpectralRadius).unwrap(), 0.5);
        let dt = compute_dt(&[-9.0, -1.0], DtReading::SpectralRadius).unwrap();
        assert!((dt - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(compute_dt(&[-9.0, -1.0], DtReading::SmallestMagnitude).unwrap(), 1.0);
        assert!(compute_dt(&[-1.0, 0.0], DtReading::SpectralRadius).is_err());
        assert!(compute_dt(&[], DtReading::SpectralRadius).is_err());
    }

    #[test]
    fn zoh_scalar_case() {
        let a = DiagStateMatrix::new(vec![-1.0]).unwrap();
        let b = Tensor::ones(&[1, 1, 1]);
        let disc = zoh_discretize(&a, &b, 1.0).unwrap();
        assert!((disc.a_d[0] - 0.36787944117144233).abs() < 1e-15);
        assert!((disc.b_d.data()[0] - 0.6321205588285577).abs() < 1e-15);
        assert!(zoh_discretize(&a, &b, 0.0).is_err());
        assert!(zoh_discretize(&a, &b, -1.0).is_err());
    }

    #[test]
    fn zoh_series_limit() {
        let a = DiagStateMatrix::new(vec![-1e-12]).unwrap();
        let disc = zoh_discretize(&a, &Tensor::ones(&[1, 1, 1]), 0.25).unwrap();
        assert!((disc.b_d.data()[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn zoh_factor_grad_matches_difference() {
        for &z in &[-3.0, -0.5, -2e-3, -5e-4, -1e-7, 0.0] {
            let h = 1e-6;
            let fd = (zoh_factor(z + h) - zoh_factor(z - h)) / (2.0 * h);
            assert!((fd - zoh_factor_grad(z)).abs() < 1e-7, "z={z}");
        }
    }

    #[test]
    fn memoryless_and_integrator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 5, 3], &mut rng);
        let c = Tensor::randn(&[2, 5, 3], &mut rng);
        let b = Tensor::randn(&[2, 5, 3], &mut rng);
        let disc = Discretized { a_d: vec![0.0; 3], b_d: b.clone(), dt: 1.0 };
        let y = ssm_scan_sequential(&disc, &c, &x).unwrap();
        let want = Tensor::from_fn(x.shape(), |i| c.data()[i] * b.data()[i] * x.data()[i]);
        assert!(y.max_abs_diff(&want) < 1e-15);

        let disc = Discretized { a_d: vec![1.0; 3], b_d: Tensor::ones(x.shape()), dt: 1.0 };
        let y = ssm_scan_sequential(&disc, &Tensor::ones(x.shape()), &x).unwrap();
        for b in 0..2 {
            for d in 0..3 {
                let mut acc = 0.0;
                for t in 0..5 {
                    acc += x.at(&[b, t, d]);
                    assert!((y.at(&[b, t, d]) - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn parallel_length_one_and_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &l in &[1usize, 7, SCAN_TILE, SCAN_TILE + 3, 3 * SCAN_TILE + 17] {
            let d = 4;
            let x = Tensor::randn(&[2, l, d], &mut rng);
            let c = Tensor::randn(&[2, l, d], &mut rng);
            let b = Tensor::randn(&[2, l, d], &mut rng);
            let a = DiagStateMatrix::new((0..d).map(|_| -rng.gen_range(0.01..2.0)).collect()).unwrap();
            let disc = zoh_discretize(&a, &b, 0.5).unwrap();
            let ys = ssm_scan_sequential(&disc, &c, &x).unwrap();
            let yp = ssm_scan_parallel(&disc, &c, &x).unwrap();
            assert!(ys.max_abs_diff(&yp) < 1e-10, "L={l}");
        }
    }

    #[test]
    fn scan_shape_mismatch() {
        let disc = Discretized { a_d: vec![0.5; 2], b_d: Tensor::ones(&[1, 3, 2]), dt: 1.0 };
        assert!(ssm_scan_sequential(&disc, &Tensor::ones(&[1, 3, 2]), &Tensor::ones(&[1, 4, 2])).is_err());
        assert!(ssm_scan_parallel(&disc, &Tensor::ones(&[1, 2, 2]), &Tensor::ones(&[1, 3, 2])).is_err());
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight matrices with a SIMD-friendly copy for the narrow precisions.
//!
//! Rows are grouped eight at a time and stored column-interleaved in
//! binary32, so one AVX lane holds one output row. For single32 the native
//! binary32 multiply and add are exactly the emulated operations; for half16
//! each binary32 result is narrowed with the hardware binary16 conversion,
//! which gives the correctly rounded binary16 result because binary32 carries
//! at least 2·11 + 2 significand bits. The kernel is therefore bit-identical
//! to the scalar one and is only a speed path.

use super::reduce::{matvec_raw, Precision, ReductionOrder};

const LANES: usize = 8;

#[derive(Debug, Clone)]
pub(crate) struct PackedMatrix {
    n_out: usize,
    n_in: usize,
    rows: Vec<f64>,
    tiles: Vec<f32>,
}

impl PackedMatrix {
    /// `rows` is output-major `[n_out][n_in]` with entries representable in `p`.
    pub(crate) fn new(rows: Vec<f64>, n_out: usize, n_in: usize, p: Precision) -> Self {
        debug_assert_eq!(rows.len(), n_out * n_in);
        let mut tiles = Vec::new();
        if p != Precision::Double64Oracle {
            let full = n_out / LANES;
            tiles = vec![0.0f32; full * n_in * LANES];
            for g in 0..full {
                for i in 0..n_in {
                    for r in 0..LANES {
                        tiles[(g * n_in + i) * LANES + r] = rows[(g * LANES + r) * n_in + i] as f32;
                    }
                }
            }
        }
        PackedMatrix { n_out, n_in, rows, tiles }
    }

    pub(crate) fn n_out(&self) -> usize {
        self.n_out
    }

    pub(crate) fn matvec(&self, x: &[f64], out: &mut [f64], p: Precision, ord: ReductionOrder) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(out.len(), self.n_out);
        let block = match ord {
            ReductionOrder::Sequential => Some(self.n_in.max(1)),
            ReductionOrder::Blocked { block_size } => Some(block_size.get()),
            ReductionOrder::PairwiseTree => None,
        };
        if let (Some(block), false, true) = (block, self.tiles.is_empty(), self.n_in > 0) {
            if simd::available() {
                let done = simd::matvec(&self.tiles, self.n_in, x, out, p == Precision::Half16, block);
                let n = self.n_in;
                matvec_raw(&self.rows[done * n..], x, &mut out[done..], p, ord);
                return;
            }
        }
        matvec_raw(&self.rows, x, out, p, ord);
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::LANES;

    pub(super) fn available() -> bool {
        is_x86_feature_detected!("avx") && is_x86_feature_detected!("f16c")
    }

    /// Fills the rows covered by whole tiles and returns how many that was.
    pub(super) fn matvec(tiles: &[f32], n: usize, x: &[f64], out: &mut [f64], half: bool, block: usize) -> usize {
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let n_tiles = tiles.len() / (n * LANES);
        let mut g = 0;
        // SAFETY: `available()` was checked by the caller.
        unsafe {
            while g + 4 <= n_tiles {
                if half {
                    kernel::<4, true>(tiles, n, g, &xf, out, block);
                } else {
                    kernel::<4, false>(tiles, n, g, &xf, out, block);
                }
                g += 4;
            }
            while g < n_tiles {
                if half {
                    kernel::<1, true>(tiles, n, g, &xf, out, block);
                } else {
                    kernel::<1, false>(tiles, n, g, &xf, out, block);
                }
                g += 1;
            }
        }
        n_tiles * LANES
    }

    #[inline]
    #[target_feature(enable = "avx,f16c")]
    fn narrow<const HALF: bool>(v: __m256) -> __m256 {
        if HALF {
            _mm256_cvtph_ps(_mm256_cvtps_ph::<_MM_FROUND_TO_NEAREST_INT>(v))
        } else {
            v
        }
    }

    #[target_feature(enable = "avx,f16c")]
    unsafe fn kernel<const T: usize, const HALF: bool>(
        tiles: &[f32],
        n: usize,
        g0: usize,
        x: &[f32],
        out: &mut [f64],
        block: usize,
    ) {
        let base: [usize; T] = std::array::from_fn(|t| (g0 + t) * n * LANES);
        assert!(base[T - 1] + n * LANES <= tiles.len() && x.len() == n);
        let ptr = tiles.as_ptr();
        let load = |t: usize, i: usize| unsafe { _mm256_loadu_ps(ptr.add(base[t] + i * LANES)) };
        let mut total = [_mm256_setzero_ps(); T];
        let mut start = 0;
        while start < n {
            let end = (start + block).min(n);
            let xs = _mm256_set1_ps(x[start]);
            let mut part: [__m256; T] = std::array::from_fn(|t| narrow::<HALF>(_mm256_mul_ps(load(t, start), xs)));
            for (i, &xv) in x.iter().enumerate().take(end).skip(start + 1) {
                let xi = _mm256_set1_ps(xv);
                for t in 0..T {
                    let prod = narrow::<HALF>(_mm256_mul_ps(load(t, i), xi));
                    part[t] = narrow::<HALF>(_mm256_add_ps(part[t], prod));
                }
            }
            for t in 0..T {
                total[t] = if start == 0 { part[t] } else { narrow::<HALF>(_mm256_add_ps(total[t], part[t])) };
            }
            start = end;
        }
        for t in 0..T {
            let mut buf = [0.0f32; LANES];
            unsafe { _mm256_storeu_ps(buf.as_mut_ptr(), total[t]) };
            let o = (g0 + t) * LANES;
            for r in 0..LANES {
                out[o + r] = buf[r] as f64;
            }
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod simd {
    pub(super) fn available() -> bool {
        false
    }

    pub(super) fn matvec(_: &[f32], _: usize, _: &[f64], _: &mut [f64], _: bool, _: usize) -> usize {
        unreachable!()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn check(p: Precision, n_out: usize, n_in: usize, scale: f64, seed: u64) {
        let mut rng = stream(seed, Domain::Misc, &[n_out as u64, n_in as u64]);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| p.round(rng.sample::<f64, _>(StandardNormal) * scale);
        let rows: Vec<f64> = (0..n_out * n_in).map(|_| draw(&mut rng)).collect();
        let x: Vec<f64> = (0..n_in).map(|_| draw(&mut rng)).collect();
        let m = PackedMatrix::new(rows.clone(), n_out, n_in, p);
        for ord in [
            ReductionOrder::Sequential,
            ReductionOrder::blocked(1),
            ReductionOrder::blocked(5),
            ReductionOrder::blocked(8),
            ReductionOrder::PairwiseTree,
        ] {
            let mut a = vec![0.0; n_out];
            let mut b = vec![0.0; n_out];
            m.matvec(&x, &mut a, p, ord);
            matvec_raw(&rows, &x, &mut b, p, ord);
            for (u, v) in a.iter().zip(&b) {
                assert!(u.to_bits() == v.to_bits() || (u.is_nan() && v.is_nan()), "{p} {ord}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn packed_matches_scalar() {
        for p in Precision::ALL {
            for (o, i) in [(8, 1), (40, 37), (64, 256), (13, 9), (3, 4)] {
                check(p, o, i, 1.0, 0);
            }
            // subnormal products and overflowing sums on the half grid
            check(p, 48, 64, 1e-3, 1);
            check(p, 48, 64, 300.0, 2);
        }
    }
}

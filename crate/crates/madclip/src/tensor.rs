//! Dense row-major tensors with the handful of eager operations the
//! encoders and the autodiff tape need.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Row-major dense tensor. Rank is 1 or 2 almost everywhere; images keep a
/// `[h, w, 3]` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(data: Vec<S>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor { data, shape }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![S::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            data: vec![v],
            shape: vec![1],
        }
    }

    pub fn from_f64_slice(vals: &[f64], shape: &[usize]) -> Self {
        Tensor::new(vals.iter().map(|&v| S::from_f64(v)).collect(), shape.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows/cols of a rank-2 tensor; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Self {
        Tensor::new(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            self.shape.clone(),
        )
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }

    /// `self [m, k] x rhs [k, n] -> [m, n]`. Rows are computed independently
    /// (in parallel for large outputs) so results do not depend on the thread
    /// count.
    pub fn matmul(&self, rhs: &Self) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        let body = |(row_out, a_row): (&mut [S], &[S])| {
            for (p, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in row_out.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * n * k > 1 << 18 {
            out.par_chunks_mut(n)
                .zip(self.data.par_chunks(k))
                .for_each(body);
        } else {
            out.chunks_mut(n).zip(self.data.chunks(k)).for_each(body);
        }
        Tensor::new(out, vec![m, n])
    }

    /// `self [m, k] x rhs^T where rhs is [n, k] -> [m, n]`.
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (rhs.rows(), rhs.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(out, vec![m, n])
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(out, vec![n, m])
    }
}

/// Precomputed bilinear resampling taps from a `src_h x src_w` grid to a
/// `dst_h x dst_w` grid (half-pixel centers, clamped at borders).
pub struct BilinearPlan<S: Scalar> {
    pub dst_h: usize,
    pub dst_w: usize,
    /// For each destination pixel: four (source index, weight) taps.
    pub taps: Vec<[(usize, S); 4]>,
}

impl<S: Scalar> BilinearPlan<S> {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        let sy = src_h as f64 / dst_h as f64;
        let sx = src_w as f64 / dst_w as f64;
        for dy in 0..dst_h {
            let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(src_h - 1);
            let wy = fy - y0 as f64;
            for dx in 0..dst_w {
                let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(src_w - 1);
                let wx = fx - x0 as f64;
                taps.push([
                    (y0 * src_w + x0, S::from_f64((1.0 - wy) * (1.0 - wx))),
                    (y0 * src_w + x1, S::from_f64((1.0 - wy) * wx)),
                    (y1 * src_w + x0, S::from_f64(wy * (1.0 - wx))),
                    (y1 * src_w + x1, S::from_f64(wy * wx)),
                ]);
            }
        }
        BilinearPlan { dst_h, dst_w, taps }
    }

    /// Resample one channel stored row-major.
    pub fn apply(&self, src: &[S]) -> Vec<S> {
        self.taps
            .iter()
            .map(|t| {
                t.iter()
                    .fold(S::zero(), |acc, &(idx, w)| acc + src[idx] * w)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_f64_slice(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::<f64>::from_f64_slice(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
        let d = a.matmul_nt(&b.transpose());
        assert_eq!(d.data, c.data);
    }

    #[test]
    fn bilinear_identity() {
        let plan = BilinearPlan::<f64>::new(3, 3, 3, 3);
        let src: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(plan.apply(&src), src);
    }

    #[test]
    fn bilinear_preserves_constant() {
        let plan = BilinearPlan::<f64>::new(4, 4, 9, 9);
        let src = vec![0.7; 16];
        for v in plan.apply(&src) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}

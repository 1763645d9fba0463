use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `n x c x h x w` array in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::DimensionMismatch {
                what: "tensor data",
                expected: n * c * h * w,
                got: data.len(),
            });
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Elements belonging to sample `i`.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn plane(&self, i: usize, ch: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (i * self.c + ch) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, i: usize, ch: usize) -> &mut [f64] {
        let p = self.plane_len();
        let start = (i * self.c + ch) * p;
        &mut self.data[start..start + p]
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let (n, h, w) = (first.n, first.h, first.w);
        for p in parts {
            if (p.n, p.h, p.w) != (n, h, w) {
                return Err(Error::InvalidInput(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(i));
            }
        }
        Ok(Tensor { n, c, h, w, data })
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if sizes.iter().sum::<usize>() != self.c {
            return Err(Error::DimensionMismatch {
                what: "channel split",
                expected: self.c,
                got: sizes.iter().sum(),
            });
        }
        let p = self.plane_len();
        let mut out: Vec<Tensor> = sizes
            .iter()
            .map(|&c| Tensor::zeros(self.n, c, self.h, self.w))
            .collect();
        for i in 0..self.n {
            let mut offset = 0;
            let src = self.sample(i);
            for t in out.iter_mut() {
                let len = t.c * p;
                t.sample_mut(i).copy_from_slice(&src[offset..offset + len]);
                offset += len;
            }
        }
        Ok(out)
    }
}

/// 2x2 mean pooling with stride 2. Odd trailing rows and columns are
/// dropped.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for i in 0..x.n {
        for ch in 0..x.c {
            let src = x.plane(i, ch);
            let dst = y.plane_mut(i, ch);
            for r in 0..h {
                for c in 0..w {
                    let a = src[2 * r * x.w + 2 * c];
                    let b = src[2 * r * x.w + 2 * c + 1];
                    let d = src[(2 * r + 1) * x.w + 2 * c];
                    let e = src[(2 * r + 1) * x.w + 2 * c + 1];
                    dst[r * w + c] = 0.25 * (a + b + d + e);
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_vec(2, 1, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(2, 2, 2, 2, (10..26).map(f64::from).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.c, 3);
        assert_eq!(c.plane(1, 0), a.plane(1, 0));
        assert_eq!(c.plane(1, 2), b.plane(1, 1));
        let parts = c.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Tensor::from_vec(1, 1, 4, 4, vec![3.0; 16]).unwrap();
        let y = avg_pool2(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert!(y.data.iter().all(|v| *v == 3.0));
    }
}

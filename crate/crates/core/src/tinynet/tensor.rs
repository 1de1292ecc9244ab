use rand::Rng;

use super::{Scalar, TinyError};

/// Dense rank-4 array in `(batch, channels, height, width)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self, TinyError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TinyError::Length {
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TinyError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// Independent uniform draws from `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)).unwrap())
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let o = self.offset(n, c, h, w);
        self.data[o] = value;
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        if self.shape != other.shape {
            return Err(TinyError::Shape {
                expected: self.shape,
                found: other.shape,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    /// Stack along the channel axis. All parts must agree on batch and spatial size.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>, TinyError> {
        let first = parts.first().ok_or(TinyError::EmptyChain)?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(TinyError::Shape {
                    expected: [n, p.shape[1], h, w],
                    found: p.shape,
                });
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        let plane = h * w;
        for b in 0..n {
            let mut c0 = 0;
            for p in parts {
                let pc = p.shape[1];
                let src = &p.data[b * pc * plane..(b + 1) * pc * plane];
                let start = (b * c + c0) * plane;
                out.data[start..start + pc * plane].copy_from_slice(src);
                c0 += pc;
            }
        }
        Ok(out)
    }

    /// Channel range `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor<T> {
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            data.extend_from_slice(&self.data[from..from + count * plane]);
        }
        Tensor {
            shape: [n, count, h, w],
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

use rand::Rng;

use super::{Scalar, Tensor, TinyError};

/// 2-D convolution with zero same-padding `dilation * (k - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    weights: Tensor<T>,
    bias: Option<Vec<T>>,
    stride: usize,
    dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    /// `weights` has shape `(c_out, c_in, k, k)`.
    pub fn new(
        weights: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        dilation: usize,
    ) -> Result<Self, TinyError> {
        let [c_out, c_in, kh, kw] = weights.shape();
        if kh != kw || kh % 2 == 0 || c_out == 0 || c_in == 0 {
            return Err(TinyError::Kernel(format!(
                "weights must be (c_out, c_in, k, k) with odd k, got {:?}",
                weights.shape()
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(TinyError::Kernel(
                "stride and dilation must be at least 1".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(TinyError::Length {
                    expected: c_out,
                    found: b.len(),
                });
            }
        }
        Ok(Self {
            weights,
            bias,
            stride,
            dilation,
        })
    }

    pub fn zeros(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self, TinyError> {
        Self::new(
            Tensor::zeros([c_out, c_in, k, k]),
            bias.then(|| vec![T::zero(); c_out]),
            stride,
            dilation,
        )
    }

    /// Weights and bias drawn uniformly from `[lo, hi)`.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        (lo, hi): (f64, f64),
    ) -> Result<Self, TinyError> {
        let weights = Tensor::random([c_out, c_in, k, k], lo, hi, rng);
        let bias = bias.then(|| {
            (0..c_out)
                .map(|_| T::from_f64(rng.gen_range(lo..hi)).unwrap())
                .collect()
        });
        Self::new(weights, bias, stride, dilation)
    }

    /// Identity kernel: a single centre tap of 1 per matching channel.
    pub fn delta(channels: usize, k: usize, dilation: usize) -> Result<Self, TinyError> {
        let mut w = Tensor::zeros([channels, channels, k, k]);
        for c in 0..channels {
            w.set(c, c, k / 2, k / 2, T::one());
        }
        Self::new(w, None, 1, dilation)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn with_weights(&self, weights: Tensor<T>) -> Result<Self, TinyError> {
        Self::new(weights, self.bias.clone(), self.stride, self.dilation)
    }

    pub fn with_bias(&self, bias: Option<Vec<T>>) -> Result<Self, TinyError> {
        Self::new(self.weights.clone(), bias, self.stride, self.dilation)
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn output_size(&self, size: usize) -> usize {
        let span = self.dilation * (self.kernel() - 1);
        (size + 2 * self.padding() - span - 1) / self.stride + 1
    }

    fn output_shape(&self, x: &Tensor<T>) -> Result<[usize; 4], TinyError> {
        if x.channels() != self.c_in() {
            return Err(TinyError::Channels {
                expected: self.c_in(),
                found: x.channels(),
            });
        }
        if x.height() == 0 || x.width() == 0 {
            return Err(TinyError::Shape {
                expected: [x.batch(), self.c_in(), 1, 1],
                found: x.shape(),
            });
        }
        Ok([
            x.batch(),
            self.c_out(),
            self.output_size(x.height()),
            self.output_size(x.width()),
        ])
    }

    /// Input coordinate read by output position `o` through tap `t`, if inside.
    #[inline]
    fn tap(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation).checked_sub(self.padding())?;
        (pos < size).then_some(pos)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        let shape = self.output_shape(x)?;
        let [n, c_out, h_out, w_out] = shape;
        let k = self.kernel();
        let mut y = Tensor::zeros(shape);
        for b in 0..n {
            for o in 0..c_out {
                let bias = self.bias.as_ref().map_or(T::zero(), |v| v[o]);
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut acc = bias;
                        for c in 0..self.c_in() {
                            for ki in 0..k {
                                let Some(r) = self.tap(i, ki, x.height()) else {
                                    continue;
                                };
                                for kj in 0..k {
                                    let Some(s) = self.tap(j, kj, x.width()) else {
                                        continue;
                                    };
                                    acc = acc + self.weights.get(o, c, ki, kj) * x.get(b, c, r, s);
                                }
                            }
                        }
                        y.set(b, o, i, j, acc);
                    }
                }
            }
        }
        Ok(y)
    }

    /// Gradients of `sum(grad_out * forward(x))` with respect to input, weights and bias.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>, TinyError> {
        let shape = self.output_shape(x)?;
        if grad_out.shape() != shape {
            return Err(TinyError::Shape {
                expected: shape,
                found: grad_out.shape(),
            });
        }
        let [n, c_out, h_out, w_out] = shape;
        let k = self.kernel();
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weights.shape());
        let mut gb = self.bias.as_ref().map(|_| vec![T::zero(); c_out]);

        for b in 0..n {
            for o in 0..c_out {
                for i in 0..h_out {
                    for j in 0..w_out {
                        let g = grad_out.get(b, o, i, j);
                        if let Some(gb) = gb.as_mut() {
                            gb[o] = gb[o] + g;
                        }
                        if g == T::zero() {
                            continue;
                        }
                        for c in 0..self.c_in() {
                            for ki in 0..k {
                                let Some(r) = self.tap(i, ki, x.height()) else {
                                    continue;
                                };
                                for kj in 0..k {
                                    let Some(s) = self.tap(j, kj, x.width()) else {
                                        continue;
                                    };
                                    let xo = gx.offset(b, c, r, s);
                                    gx.data_mut()[xo] =
                                        gx.data()[xo] + self.weights.get(o, c, ki, kj) * g;
                                    let wo = gw.offset(o, c, ki, kj);
                                    gw.data_mut()[wo] = gw.data()[wo] + x.get(b, c, r, s) * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: gx,
            weights: gw,
            bias: gb,
        })
    }
}

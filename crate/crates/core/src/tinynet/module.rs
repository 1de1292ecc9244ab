use rand::Rng;

use super::{ConvLayer, Scalar, Tensor, TinyError};

/// Dilation rates of the three parallel 3x3 branches.
pub const MODULE_DILATIONS: [usize; 3] = [1, 4, 8];

/// A differentiable feed-forward block.
pub trait Block<T: Scalar> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TinyError>;

    /// Gradient of `sum(grad_out * forward(x))` with respect to `x`.
    fn backward_input(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TinyError>;

    /// Side length of the input window that can influence one output element.
    fn receptive_field(&self) -> usize;

    /// Product of strides from input to output.
    fn total_stride(&self) -> usize;
}

impl<T: Scalar> Block<T> for ConvLayer<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        ConvLayer::forward(self, x)
    }

    fn backward_input(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        Ok(self.backward(x, grad_out)?.input)
    }

    fn receptive_field(&self) -> usize {
        super::receptive_field_analytic(std::slice::from_ref(self))
    }

    fn total_stride(&self) -> usize {
        self.stride()
    }
}

/// Layers applied in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvChain<T> {
    layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> ConvChain<T> {
    pub fn new(layers: Vec<ConvLayer<T>>) -> Result<Self, TinyError> {
        if layers.is_empty() {
            return Err(TinyError::EmptyChain);
        }
        for w in layers.windows(2) {
            if w[0].c_out() != w[1].c_in() {
                return Err(TinyError::Channels {
                    expected: w[1].c_in(),
                    found: w[0].c_out(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }
}

impl<T: Scalar> Block<T> for ConvChain<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    fn backward_input(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        let mut inputs = vec![x.clone()];
        for l in &self.layers[..self.layers.len() - 1] {
            let next = l.forward(inputs.last().unwrap())?;
            inputs.push(next);
        }
        let mut g = grad_out.clone();
        for (l, input) in self.layers.iter().zip(&inputs).rev() {
            g = l.backward(input, &g)?.input;
        }
        Ok(g)
    }

    fn receptive_field(&self) -> usize {
        super::receptive_field_analytic(&self.layers)
    }

    fn total_stride(&self) -> usize {
        self.layers.iter().map(ConvLayer::stride).product()
    }
}

/// The identity map.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Shortcut;

impl<T: Scalar> Block<T> for Shortcut {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        Ok(x.clone())
    }

    fn backward_input(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        if x.shape() != grad_out.shape() {
            return Err(TinyError::Shape {
                expected: x.shape(),
                found: grad_out.shape(),
            });
        }
        Ok(grad_out.clone())
    }

    fn receptive_field(&self) -> usize {
        1
    }

    fn total_stride(&self) -> usize {
        1
    }
}

/// Multi-rate dilated block:
/// `y = x + fuse(concat(b1(x), b4(x), b8(x)))`, where `b_r` is a 3x3 convolution at
/// dilation `r` from `c` to `c / divisor` channels and `fuse` is a 1x1 convolution
/// back to `c` channels. Shape preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedModule<T> {
    branches: Vec<ConvLayer<T>>,
    fuse: ConvLayer<T>,
}

impl<T: Scalar> DilatedModule<T> {
    pub fn new(branches: Vec<ConvLayer<T>>, fuse: ConvLayer<T>) -> Result<Self, TinyError> {
        let Some(first) = branches.first() else {
            return Err(TinyError::EmptyChain);
        };
        let c = first.c_in();
        for b in &branches {
            if b.c_in() != c || b.c_out() != first.c_out() || b.stride() != 1 {
                return Err(TinyError::Kernel(
                    "branches must share input/output widths and use stride 1".into(),
                ));
            }
        }
        let cat = first.c_out() * branches.len();
        if fuse.c_in() != cat || fuse.c_out() != c || fuse.kernel() != 1 || fuse.stride() != 1 {
            return Err(TinyError::Kernel(format!(
                "fuse must be a stride-1 1x1 convolution {cat} -> {c}"
            )));
        }
        Ok(Self { branches, fuse })
    }

    /// Random weights uniform in `range`, standard dilations, branch width
    /// `channels / divisor`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        divisor: usize,
        bias: bool,
        range: (f64, f64),
    ) -> Result<Self, TinyError> {
        let width = branch_width(channels, divisor)?;
        let branches = MODULE_DILATIONS
            .iter()
            .map(|&d| ConvLayer::random(rng, channels, width, 3, 1, d, bias, range))
            .collect::<Result<Vec<_>, _>>()?;
        let fuse = ConvLayer::random(
            rng,
            width * MODULE_DILATIONS.len(),
            channels,
            1,
            1,
            1,
            bias,
            range,
        )?;
        Self::new(branches, fuse)
    }

    /// All weights and biases zero; the block then reduces to its shortcut.
    pub fn zeros(channels: usize, divisor: usize) -> Result<Self, TinyError> {
        let width = branch_width(channels, divisor)?;
        let branches = MODULE_DILATIONS
            .iter()
            .map(|&d| ConvLayer::zeros(channels, width, 3, 1, d, true))
            .collect::<Result<Vec<_>, _>>()?;
        let fuse = ConvLayer::zeros(width * MODULE_DILATIONS.len(), channels, 1, 1, 1, true)?;
        Self::new(branches, fuse)
    }

    pub fn channels(&self) -> usize {
        self.fuse.c_out()
    }

    pub fn branches(&self) -> &[ConvLayer<T>] {
        &self.branches
    }

    pub fn fuse(&self) -> &ConvLayer<T> {
        &self.fuse
    }

    pub fn param_count(&self) -> usize {
        self.branches
            .iter()
            .map(ConvLayer::param_count)
            .sum::<usize>()
            + self.fuse.param_count()
    }

    fn branch_outputs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, TinyError> {
        self.branches.iter().map(|b| b.forward(x)).collect()
    }
}

fn branch_width(channels: usize, divisor: usize) -> Result<usize, TinyError> {
    if divisor == 0 || channels == 0 || !channels.is_multiple_of(divisor) {
        return Err(TinyError::Indivisible { channels, divisor });
    }
    Ok(channels / divisor)
}

impl<T: Scalar> Block<T> for DilatedModule<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        if x.channels() != self.channels() {
            return Err(TinyError::Channels {
                expected: self.channels(),
                found: x.channels(),
            });
        }
        let cat = Tensor::concat_channels(&self.branch_outputs(x)?)?;
        x.add(&self.fuse.forward(&cat)?)
    }

    fn backward_input(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, TinyError> {
        if grad_out.shape() != x.shape() {
            return Err(TinyError::Shape {
                expected: x.shape(),
                found: grad_out.shape(),
            });
        }
        let cat = Tensor::concat_channels(&self.branch_outputs(x)?)?;
        let g_cat = self.fuse.backward(&cat, grad_out)?.input;
        let width = self.branches[0].c_out();
        let mut gx = grad_out.clone();
        for (i, b) in self.branches.iter().enumerate() {
            let g = b
                .backward(x, &g_cat.slice_channels(i * width, width))?
                .input;
            gx = gx.add(&g)?;
        }
        Ok(gx)
    }

    fn receptive_field(&self) -> usize {
        self.branches
            .iter()
            .map(|b| super::receptive_field_analytic(&[b.clone(), self.fuse.clone()]))
            .max()
            .unwrap_or(1)
    }

    fn total_stride(&self) -> usize {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_reduce_to_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DilatedModule::<f64>::zeros(8, 4).unwrap();
        let x = Tensor::random([1, 8, 12, 12], -1.0, 1.0, &mut rng);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DilatedModule::<f64>::random(&mut rng, 8, 4, true, (-1.0, 1.0)).unwrap();
        for hw in [1, 5, 17] {
            let x = Tensor::random([2, 8, hw, hw + 1], -1.0, 1.0, &mut rng);
            assert_eq!(m.forward(&x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn indivisible_channels() {
        assert_eq!(
            DilatedModule::<f64>::zeros(30, 4),
            Err(TinyError::Indivisible {
                channels: 30,
                divisor: 4
            })
        );
    }

    #[test]
    fn module_param_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m32 = DilatedModule::<f64>::random(&mut rng, 32, 4, true, (0.1, 1.0)).unwrap();
        assert_eq!(m32.param_count(), 3 * (9 * 32 * 8 + 8) + 24 * 32 + 32);
        assert!(m32.param_count() <= 20_000);
        let m64 = DilatedModule::<f64>::random(&mut rng, 64, 4, true, (0.1, 1.0)).unwrap();
        assert!(m64.param_count() <= 40_000);
    }

    #[test]
    fn receptive_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DilatedModule::<f64>::random(&mut rng, 4, 4, false, (0.1, 1.0)).unwrap();
        assert_eq!(m.receptive_field(), 17);
        assert_eq!(Block::<f64>::receptive_field(&Shortcut), 1);
    }
}

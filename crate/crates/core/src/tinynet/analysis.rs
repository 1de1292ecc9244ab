use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Block, ConvLayer, Scalar, Tensor, TinyError};

/// Lower bound on the denominator of [`relative_error`]; gradient components
/// smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Extent of the input window seen by one output element of a sequential chain:
/// `rf += (k - 1) * d * jump; jump *= s`, starting from `rf = jump = 1`.
pub fn receptive_field_analytic<T: Scalar>(chain: &[ConvLayer<T>]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for l in chain {
        rf += (l.kernel() - 1) * l.dilation() * jump;
        jump *= l.stride();
    }
    rf
}

/// Input positions (of one channel) whose gradient is nonzero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SupportMask {
    pub channel: usize,
    pub height: usize,
    pub width: usize,
    /// Input position the output element is centred on.
    pub center: (usize, usize),
    marked: Vec<bool>,
}

impl SupportMask {
    pub fn count(&self) -> usize {
        self.marked.iter().filter(|&&m| m).count()
    }

    pub fn is_marked(&self, row: usize, col: usize) -> bool {
        self.marked[row * self.width + col]
    }

    /// Marked positions relative to the centre, sorted.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let (cr, cc) = (self.center.0 as isize, self.center.1 as isize);
        let mut out: Vec<(isize, isize)> = (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_marked(r, c))
            .map(|(r, c)| (r as isize - cr, c as isize - cc))
            .collect();
        out.sort();
        out
    }

    pub fn contains_offset(&self, dr: isize, dc: isize) -> bool {
        let r = self.center.0 as isize + dr;
        let c = self.center.1 as isize + dc;
        (0..self.height as isize).contains(&r)
            && (0..self.width as isize).contains(&c)
            && self.is_marked(r as usize, c as usize)
    }

    /// `(rows, cols)` of the tightest box around the marked positions.
    pub fn bounding_extent(&self) -> (usize, usize) {
        let offs = self.offsets();
        if offs.is_empty() {
            return (0, 0);
        }
        let span = |f: fn(&(isize, isize)) -> isize| {
            let lo = offs.iter().map(f).min().unwrap();
            let hi = offs.iter().map(f).max().unwrap();
            (hi - lo + 1) as usize
        };
        (span(|o| o.0), span(|o| o.1))
    }
}

/// Gradient support of output element `(out_channel, out_pos)` over every input
/// channel, for an input of `channels x height x width` drawn from `seed`.
///
/// Weights should be strictly positive so that no tap cancels by accident.
pub fn gradient_support<T: Scalar, B: Block<T>>(
    net: &B,
    channels: usize,
    (height, width): (usize, usize),
    out_channel: usize,
    out_pos: (usize, usize),
    seed: u64,
) -> Result<Vec<SupportMask>, TinyError> {
    let extent = net.receptive_field();
    let half = (extent - 1) / 2;
    let stride = net.total_stride();
    let center = (out_pos.0 * stride, out_pos.1 * stride);
    let inside = |c: usize, size: usize| c >= half && c + half < size;
    if !inside(center.0, height) || !inside(center.1, width) {
        return Err(TinyError::Border {
            extent,
            row: center.0,
            col: center.1,
            height,
            width,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::random([1, channels, height, width], -1.0, 1.0, &mut rng);
    let y = net.forward(&x)?;
    if out_channel >= y.channels() || out_pos.0 >= y.height() || out_pos.1 >= y.width() {
        return Err(TinyError::Shape {
            expected: [1, out_channel + 1, out_pos.0 + 1, out_pos.1 + 1],
            found: y.shape(),
        });
    }
    let mut grad_out = Tensor::zeros(y.shape());
    grad_out.set(0, out_channel, out_pos.0, out_pos.1, T::one());
    let gx = net.backward_input(&x, &grad_out)?;

    Ok((0..channels)
        .map(|c| SupportMask {
            channel: c,
            height,
            width,
            center,
            marked: (0..height)
                .flat_map(|r| (0..width).map(move |w| (r, w)))
                .map(|(r, w)| gx.get(0, c, r, w) != T::zero())
                .collect(),
        })
        .collect())
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    fn push(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(relative_error(analytic, numeric));
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            checked: self.checked + other.checked,
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn weighted_sum<T: Scalar>(y: &Tensor<T>, w: &Tensor<T>) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a.to_f64().unwrap() * b.to_f64().unwrap())
        .sum()
}

fn central<T: Scalar>(
    f: impl Fn(T) -> Result<f64, TinyError>,
    v: T,
    eps: T,
) -> Result<f64, TinyError> {
    let plus = f(v + eps)?;
    let minus = f(v - eps)?;
    Ok((plus - minus) / (2.0 * eps.to_f64().unwrap()))
}

/// Check a layer's input, weight and bias gradients of `sum(grad_out * y)` against
/// central finite differences with step `eps`.
pub fn finite_difference_check<T: Scalar>(
    layer: &ConvLayer<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: T,
) -> Result<GradCheck, TinyError> {
    let analytic = layer.backward(x, grad_out)?;
    let mut check = finite_difference_input(layer, x, grad_out, eps)?;

    for i in 0..layer.weights().len() {
        let numeric = central(
            |v| {
                let mut w = layer.weights().clone();
                w.data_mut()[i] = v;
                Ok(weighted_sum(&layer.with_weights(w)?.forward(x)?, grad_out))
            },
            layer.weights().data()[i],
            eps,
        )?;
        check.push(analytic.weights.data()[i].to_f64().unwrap(), numeric);
    }

    if let (Some(bias), Some(gb)) = (layer.bias(), &analytic.bias) {
        for i in 0..bias.len() {
            let numeric = central(
                |v| {
                    let mut b = bias.to_vec();
                    b[i] = v;
                    Ok(weighted_sum(
                        &layer.with_bias(Some(b))?.forward(x)?,
                        grad_out,
                    ))
                },
                bias[i],
                eps,
            )?;
            check.push(gb[i].to_f64().unwrap(), numeric);
        }
    }
    Ok(check)
}

/// Input-gradient check for any block.
pub fn finite_difference_input<T: Scalar, B: Block<T>>(
    block: &B,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: T,
) -> Result<GradCheck, TinyError> {
    let analytic = block.backward_input(x, grad_out)?;
    let mut check = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
    };
    for i in 0..x.len() {
        let numeric = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                Ok(weighted_sum(&block.forward(&xp)?, grad_out))
            },
            x.data()[i],
            eps,
        )?;
        check.push(analytic.data()[i].to_f64().unwrap(), numeric);
    }
    Ok(check)
}

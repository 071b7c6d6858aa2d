//! Dense and convolutional building blocks with explicit backward passes.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::Scalar;

pub(crate) fn cast<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 constant representable")
}

/// Uniform initializer `U(-bound, bound)`.
pub(crate) fn uniform<F: Scalar, R: Rng>(rng: &mut R, bound: f64) -> F {
    cast(rng.random_range(-bound..=bound))
}

/// Affine map `y = W x + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, bound: f64, rng: &mut R) -> Self {
        Linear {
            weight: Array2::from_shape_simple_fn((output, input), || uniform(rng, bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-wise forward over a batch `(n, in) -> (n, out)`.
    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) -> Array2<F> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

/// 2-D convolution over `(channels, height, width)` maps, evaluated as a
/// matrix product on unfolded patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    /// `(out_channels, in_channels, kernel, kernel)`.
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        Conv2d {
            weight: Array4::from_shape_simple_fn(
                (out_channels, in_channels, kernel, kernel),
                || uniform(rng, bound),
            ),
            bias: Array1::zeros(out_channels),
            stride,
            padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous conv weight")
    }

    /// Returns the output map and the unfolded input (needed by backward).
    pub fn forward(&self, x: ArrayView3<F>) -> (Array3<F>, Array2<F>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(x, self.kernel(), self.stride, self.padding, oh, ow);
        let mut y = self.weight_matrix().dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("conv output shape");
        (y, cols)
    }

    /// Accumulate parameter gradients; return `dL/dx` when `input_shape` is given.
    pub fn backward(
        &self,
        cols: &Array2<F>,
        dy: ArrayView3<F>,
        grad: &mut Conv2d<F>,
        input_shape: Option<(usize, usize, usize)>,
    ) -> Option<Array3<F>> {
        let (c, oh, ow) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, oh * ow))
            .expect("conv grad shape");
        let dw = dy2.dot(&cols.t());
        let (o, i, k, _) = grad.weight.dim();
        {
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("contiguous conv grad");
            gw += &dw;
        }
        grad.bias += &dy2.sum_axis(Axis(1));
        input_shape.map(|(ci, h, w)| {
            let dcols = self.weight_matrix().t().dot(&dy2);
            col2im(dcols.view(), ci, h, w, k, self.stride, self.padding, oh, ow)
        })
    }
}

fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, iy as usize, ..]);
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<F> {
    let mut x = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst = x.slice_mut(s![ci, iy as usize, ..]);
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    let half: F = cast(0.5);
    let inner = cast::<F>(GELU_C) * (x + cast::<F>(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half: F = cast(0.5);
    let c: F = cast(GELU_C);
    let a: F = cast(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let dinner = c * (F::one() + cast::<F>(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Non-overlapping 2x2 mean pooling.
pub fn avg_pool2<F: Scalar>(x: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let quarter: F = cast(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<F: Scalar>(dy: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = dy.dim();
    let quarter: F = cast(0.25);
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, x)| {
        dy[[ci, y / 2, x / 2]] * quarter
    })
}

/// Spatial mean of every channel.
pub fn global_mean<F: Scalar>(x: ArrayView3<F>) -> Array1<F> {
    let (c, h, w) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("feature map");
    flat.mean_axis(Axis(1)).expect("non-empty map")
}

pub(crate) fn as_row<F: Scalar>(v: &Array1<F>) -> ArrayView2<'_, F> {
    v.view().insert_axis(Axis(0))
}

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

use super::layers::{avg_pool2, avg_pool2_backward, gelu, gelu_grad, global_mean, Conv2d};
use super::{check_input_size, Scalar};
use crate::error::{Error, Result};

const STEM_PATCH: usize = 4;

/// Patchify stem followed by four `3x3 conv + GELU` stages, with 2x2 mean
/// pooling in front of stages 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub stem: Conv2d<F>,
    pub stages: [Conv2d<F>; 4],
}

/// Output of the encoder for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature<F> {
    /// Spatial mean of `map`, length 8K.
    pub pooled: Array1<F>,
    /// Final-stage map, `(8K, H/32, W/32)`.
    pub map: Array3<F>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<F> {
    stem_cols: Array2<F>,
    stage_cols: [Array2<F>; 4],
    stage_pre: [Array3<F>; 4],
    stage_input_shapes: [(usize, usize, usize); 4],
}

impl<F: Scalar> Encoder<F> {
    pub fn init<R: Rng>(base_width: usize, rng: &mut R) -> Self {
        let k = base_width;
        let gelu_gain = 2f64.sqrt();
        let stem = Conv2d::init(3, k, STEM_PATCH, STEM_PATCH, 0, 1.0, rng);
        let dims = [(k, k), (k, 2 * k), (2 * k, 4 * k), (4 * k, 8 * k)];
        let stages = dims.map(|(i, o)| Conv2d::init(i, o, 3, 1, 1, gelu_gain, rng));
        Encoder { stem, stages }
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            stem: self.stem.zeros_like(),
            stages: [
                self.stages[0].zeros_like(),
                self.stages[1].zeros_like(),
                self.stages[2].zeros_like(),
                self.stages[3].zeros_like(),
            ],
        }
    }

    pub fn base_width(&self) -> usize {
        self.stem.out_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.stages[3].out_channels()
    }

    pub fn forward(&self, image: ArrayView3<F>) -> Result<(ImageFeature<F>, EncoderTrace<F>)> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        check_input_size(h, w)?;
        let (mut x, stem_cols) = self.stem.forward(image);
        let mut stage_cols = Vec::with_capacity(4);
        let mut stage_pre = Vec::with_capacity(4);
        let mut shapes = Vec::with_capacity(4);
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(x.view());
            }
            shapes.push(x.dim());
            let (pre, cols) = conv.forward(x.view());
            x = pre.mapv(gelu);
            stage_cols.push(cols);
            stage_pre.push(pre);
        }
        let pooled = global_mean(x.view());
        let trace = EncoderTrace {
            stem_cols,
            stage_cols: stage_cols.try_into().expect("four stages"),
            stage_pre: stage_pre.try_into().expect("four stages"),
            stage_input_shapes: shapes.try_into().expect("four stages"),
        };
        Ok((ImageFeature { pooled, map: x }, trace))
    }

    /// Backpropagate `dL/dmap` through the encoder, accumulating into `grad`.
    pub fn backward(&self, trace: &EncoderTrace<F>, dmap: Array3<F>, grad: &mut Encoder<F>) {
        let mut d = dmap;
        for i in (0..4).rev() {
            let mut dpre = d;
            dpre.zip_mut_with(&trace.stage_pre[i], |g, &p| *g *= gelu_grad(p));
            let dx = self.stages[i]
                .backward(
                    &trace.stage_cols[i],
                    dpre.view(),
                    &mut grad.stages[i],
                    Some(trace.stage_input_shapes[i]),
                )
                .expect("input gradient requested");
            d = if i > 0 {
                avg_pool2_backward(dx.view())
            } else {
                dx
            };
        }
        self.stem
            .backward(&trace.stem_cols, d.view(), &mut grad.stem, None);
    }
}

/// Gradient of a loss w.r.t. the final map, given its gradient w.r.t. the
/// pooled feature vector.
pub fn pooled_to_map_grad<F: Scalar>(
    dpooled: &Array1<F>,
    map_shape: (usize, usize, usize),
) -> Array3<F> {
    let (c, h, w) = map_shape;
    let scale = F::one() / F::from(h * w).expect("map size");
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| dpooled[ci] * scale)
}

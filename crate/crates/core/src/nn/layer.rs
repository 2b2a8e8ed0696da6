//! Layer kernels. Activations are single images in height × width × channels order.

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Result, UapError};
use crate::scalar::Scalar;

/// Layer operation and its parameters.
///
/// Convolution weights are laid out `[ky][kx][in][out]` followed by `out`
/// biases; dense weights are `[out][in]` followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind<T> {
    /// `x * scale + shift`, used for input normalization.
    Affine { scale: T, shift: T },
    /// 3×3 convolution, stride 1, zero "same" padding.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        params: Vec<T>,
    },
    Relu,
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    /// 2× nearest-neighbour upsampling.
    Upsample2,
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
        params: Vec<T>,
    },
    /// `bound * tanh(x)`.
    BoundedTanh { bound: T },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind<T>,
}

impl<T: Scalar> LayerKind<T> {
    pub fn params(&self) -> &[T] {
        match self {
            LayerKind::Conv3x3 { params, .. } | LayerKind::Dense { params, .. } => params,
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        match self {
            LayerKind::Conv3x3 { params, .. } | LayerKind::Dense { params, .. } => params,
            _ => &mut [],
        }
    }

    pub fn output_shape(&self, input: ImageShape) -> Result<ImageShape> {
        let ImageShape {
            height: h,
            width: w,
            channels: c,
        } = input;
        match self {
            LayerKind::Affine { .. } | LayerKind::Relu | LayerKind::BoundedTanh { .. } => Ok(input),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                params,
            } => {
                if *in_channels != c {
                    return Err(UapError::shape(
                        format!("{in_channels} input channels"),
                        format!("{c} channels"),
                    ));
                }
                let want = 9 * in_channels * out_channels + out_channels;
                if params.len() != want {
                    return Err(UapError::shape(
                        format!("{want} conv parameters"),
                        params.len(),
                    ));
                }
                Ok(ImageShape::new(h, w, *out_channels))
            }
            LayerKind::MaxPool2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(UapError::shape("even height and width", input));
                }
                Ok(ImageShape::new(h / 2, w / 2, c))
            }
            LayerKind::Upsample2 => Ok(ImageShape::new(h * 2, w * 2, c)),
            LayerKind::GlobalAvgPool => Ok(ImageShape::new(1, 1, c)),
            LayerKind::Dense {
                inputs,
                outputs,
                params,
            } => {
                if *inputs != input.len() {
                    return Err(UapError::shape(format!("{inputs} dense inputs"), input));
                }
                if params.len() != inputs * outputs + outputs {
                    return Err(UapError::shape(
                        format!("{} dense parameters", inputs * outputs + outputs),
                        params.len(),
                    ));
                }
                Ok(ImageShape::new(1, 1, *outputs))
            }
        }
    }

    pub fn forward(&self, x: &[T], s: ImageShape) -> Vec<T> {
        match self {
            LayerKind::Affine { scale, shift } => x.iter().map(|&v| v * *scale + *shift).collect(),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                params,
            } => conv3x3_forward(x, s, *in_channels, *out_channels, params),
            LayerKind::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            LayerKind::MaxPool2 => maxpool_forward(x, s),
            LayerKind::Upsample2 => upsample_forward(x, s),
            LayerKind::GlobalAvgPool => {
                let n = T::lit(s.pixels() as f64);
                let mut out = vec![T::zero(); s.channels];
                for px in x.chunks_exact(s.channels) {
                    for (o, &v) in out.iter_mut().zip(px) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n);
                out
            }
            LayerKind::Dense {
                inputs,
                outputs,
                params,
            } => {
                let (w, b) = params.split_at(inputs * outputs);
                (0..*outputs)
                    .map(|o| {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        b[o] + dot(row, x)
                    })
                    .collect()
            }
            LayerKind::BoundedTanh { bound } => x.iter().map(|&v| *bound * v.tanh()).collect(),
        }
    }

    /// Given the layer input `x` and the gradient w.r.t. its output, returns the
    /// gradient w.r.t. the input and accumulates parameter gradients into `pgrad`
    /// (when provided, same layout as the parameters).
    pub fn backward(
        &self,
        x: &[T],
        s: ImageShape,
        gy: &[T],
        pgrad: Option<&mut [T]>,
    ) -> Vec<T> {
        match self {
            LayerKind::Affine { scale, .. } => gy.iter().map(|&g| g * *scale).collect(),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
                params,
            } => conv3x3_backward(x, s, *in_channels, *out_channels, params, gy, pgrad),
            LayerKind::Relu => x
                .iter()
                .zip(gy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            LayerKind::MaxPool2 => maxpool_backward(x, s, gy),
            LayerKind::Upsample2 => upsample_backward(s, gy),
            LayerKind::GlobalAvgPool => {
                let n = T::lit(s.pixels() as f64);
                let mut gx = Vec::with_capacity(x.len());
                for _ in 0..s.pixels() {
                    gx.extend(gy.iter().map(|&g| g / n));
                }
                gx
            }
            LayerKind::Dense {
                inputs,
                outputs,
                params,
            } => {
                let (w, _) = params.split_at(inputs * outputs);
                let mut gx = vec![T::zero(); *inputs];
                for o in 0..*outputs {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    axpy(gy[o], row, &mut gx);
                }
                if let Some(pg) = pgrad {
                    let (gw, gb) = pg.split_at_mut(inputs * outputs);
                    for o in 0..*outputs {
                        axpy(gy[o], x, &mut gw[o * inputs..(o + 1) * inputs]);
                        gb[o] += gy[o];
                    }
                }
                gx
            }
            LayerKind::BoundedTanh { bound } => x
                .iter()
                .zip(gy)
                .map(|(&v, &g)| {
                    let t = v.tanh();
                    g * *bound * (T::one() - t * t)
                })
                .collect(),
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Yields `(kernel tap, input pixel index)` for the valid taps around `(oy, ox)`.
#[inline]
fn taps(h: usize, w: usize, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3usize).flat_map(move |ky| {
        (0..3usize).filter_map(move |kx| {
            let iy = (oy + ky).checked_sub(1)?;
            let ix = (ox + kx).checked_sub(1)?;
            (iy < h && ix < w).then_some((ky * 3 + kx, iy * w + ix))
        })
    })
}

fn conv3x3_forward<T: Scalar>(
    x: &[T],
    s: ImageShape,
    cin: usize,
    cout: usize,
    params: &[T],
) -> Vec<T> {
    let (h, w) = (s.height, s.width);
    let (weights, bias) = params.split_at(9 * cin * cout);
    let mut y = vec![T::zero(); h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            let acc = &mut y[(oy * w + ox) * cout..][..cout];
            acc.copy_from_slice(bias);
            for (tap, ipx) in taps(h, w, oy, ox) {
                let xin = &x[ipx * cin..][..cin];
                let wk = &weights[tap * cin * cout..][..cin * cout];
                for (i, &xi) in xin.iter().enumerate() {
                    axpy(xi, &wk[i * cout..][..cout], acc);
                }
            }
        }
    }
    y
}

fn conv3x3_backward<T: Scalar>(
    x: &[T],
    s: ImageShape,
    cin: usize,
    cout: usize,
    params: &[T],
    gy: &[T],
    pgrad: Option<&mut [T]>,
) -> Vec<T> {
    let (h, w) = (s.height, s.width);
    let nw = 9 * cin * cout;
    let weights = &params[..nw];
    let mut gx = vec![T::zero(); h * w * cin];
    let mut pgrad = pgrad;
    for oy in 0..h {
        for ox in 0..w {
            let g = &gy[(oy * w + ox) * cout..][..cout];
            for (tap, ipx) in taps(h, w, oy, ox) {
                let wk = &weights[tap * cin * cout..][..cin * cout];
                let gxi = &mut gx[ipx * cin..][..cin];
                for (i, gv) in gxi.iter_mut().enumerate() {
                    *gv += dot(&wk[i * cout..][..cout], g);
                }
                if let Some(pg) = pgrad.as_deref_mut() {
                    let xin = &x[ipx * cin..][..cin];
                    let gw = &mut pg[tap * cin * cout..][..cin * cout];
                    for (i, &xi) in xin.iter().enumerate() {
                        axpy(xi, g, &mut gw[i * cout..][..cout]);
                    }
                }
            }
            if let Some(pg) = pgrad.as_deref_mut() {
                axpy(T::one(), g, &mut pg[nw..]);
            }
        }
    }
    gx
}

/// Index of the winning input element for each pooled output (first maximum in scan order).
fn maxpool_argmax<T: Scalar>(x: &[T], s: ImageShape) -> Vec<usize> {
    let (h, w, c) = (s.height, s.width, s.channels);
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (2 * oy * w + 2 * ox) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

fn maxpool_forward<T: Scalar>(x: &[T], s: ImageShape) -> Vec<T> {
    maxpool_argmax(x, s).into_iter().map(|i| x[i]).collect()
}

fn maxpool_backward<T: Scalar>(x: &[T], s: ImageShape, gy: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); x.len()];
    for (i, &g) in maxpool_argmax(x, s).into_iter().zip(gy) {
        gx[i] += g;
    }
    gx
}

fn upsample_forward<T: Scalar>(x: &[T], s: ImageShape) -> Vec<T> {
    let (h, w, c) = (s.height, s.width, s.channels);
    let mut y = Vec::with_capacity(4 * x.len());
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let src = ((oy / 2) * w + ox / 2) * c;
            y.extend_from_slice(&x[src..src + c]);
        }
    }
    y
}

fn upsample_backward<T: Scalar>(s: ImageShape, gy: &[T]) -> Vec<T> {
    let (h, w, c) = (s.height, s.width, s.channels);
    let mut gx = vec![T::zero(); h * w * c];
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let dst = ((oy / 2) * w + ox / 2) * c;
            let src = (oy * 2 * w + ox) * c;
            axpy(T::one(), &gy[src..src + c], &mut gx[dst..dst + c]);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut params = vec![0.0f64; 10];
        params[4] = 1.0;
        let conv = LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 1,
            params,
        };
        let s = ImageShape::new(2, 3, 1);
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(conv.forward(&x, s), x);
    }

    #[test]
    fn conv_border_uses_zero_padding() {
        // all-ones kernel sums the 3x3 neighbourhood
        let mut params = vec![1.0f64; 9];
        params.push(0.0);
        let conv = LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 1,
            params,
        };
        let y = conv.forward(&[1.0; 9], ImageShape::new(3, 3, 1));
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let s = ImageShape::new(2, 2, 1);
        let x = [1.0f64, 5.0, 3.0, 2.0];
        assert_eq!(LayerKind::MaxPool2.forward(&x, s), vec![5.0]);
        assert_eq!(
            LayerKind::MaxPool2.backward(&x, s, &[2.0], None),
            vec![0.0, 2.0, 0.0, 0.0]
        );
        let up = LayerKind::<f64>::Upsample2.forward(&[7.0], ImageShape::new(1, 1, 1));
        assert_eq!(up, vec![7.0; 4]);
        let g = LayerKind::<f64>::Upsample2.backward(&[7.0], ImageShape::new(1, 1, 1), &[1.0; 4], None);
        assert_eq!(g, vec![4.0]);
        assert!(LayerKind::<f64>::MaxPool2
            .output_shape(ImageShape::new(3, 2, 1))
            .is_err());
    }
}

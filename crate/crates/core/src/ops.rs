//! Raw NCHW kernels shared by the autodiff graph and the inference paths.
//!
//! Everything here works on flat slices; shape validation happens in
//! [`crate::graph`]. Convolutions are im2col + GEMM, one sample at a time,
//! with weight gradients summed in sample order so results never depend on
//! scheduling.

use crate::tensor::Element;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix: `C_in * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw_out = ho * wo;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let (ho, wo) = (g.out_height(), g.out_width());
    let hw_out = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = w ⋆ x + b`, output `[N, C_out, H_out, W_out]`.
pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw_out = g.out_height() * g.out_width();
    let kk = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * hw_out;
    let mut y = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw_out]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let yn = &mut y[n * out_len..(n + 1) * out_len];
        T::gemm(
            g.out_channels,
            kk,
            hw_out,
            weight,
            (kk as isize, 1),
            cols_ref,
            (hw_out as isize, 1),
            T::zero(),
            yn,
            (hw_out as isize, 1),
        );
        if let Some(b) = bias {
            for (o, plane) in yn.chunks_mut(hw_out).enumerate() {
                let bo = b[o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]; each is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    (need_input, need_weight, need_bias): (bool, bool, bool),
) -> ConvGrads<T> {
    let hw_out = g.out_height() * g.out_width();
    let kk = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * hw_out;

    let mut dx = need_input.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_weight.then(|| vec![T::zero(); g.out_channels * kk]);
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for n in 0..g.batch {
            for (o, plane) in dy[n * out_len..(n + 1) * out_len].chunks(hw_out).enumerate() {
                db[o] += plane.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        db
    });

    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * hw_out }];
    let mut dcols = vec![T::zero(); if need_input && !pointwise { kk * hw_out } else { 0 }];

    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW += dY_n · colsᵀ
            T::gemm(
                g.out_channels,
                hw_out,
                kk,
                dyn_,
                (hw_out as isize, 1),
                cols_ref,
                (1, hw_out as isize),
                T::one(),
                dw,
                (kk as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            // dcols = Wᵀ · dY_n
            if pointwise {
                T::gemm(
                    kk,
                    g.out_channels,
                    hw_out,
                    weight,
                    (1, kk as isize),
                    dyn_,
                    (hw_out as isize, 1),
                    T::zero(),
                    dxn,
                    (hw_out as isize, 1),
                );
            } else {
                T::gemm(
                    kk,
                    g.out_channels,
                    hw_out,
                    weight,
                    (1, kk as isize),
                    dyn_,
                    (hw_out as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (hw_out as isize, 1),
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2×2 max pooling with stride 2; returns the output and, per output element,
/// the flat input index that won.
pub fn maxpool2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

/// Nearest-neighbour 2× upsampling of `planes` H×W planes.
pub fn upsample2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = row[ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, c: usize, h: usize, w: usize, o: usize, k: usize, s: usize, p: usize) -> ConvGeom {
        ConvGeom {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: k,
            stride: s,
            pad: p,
        }
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let g = geom(1, 1, 3, 3, 1, 3, 1, 0);
        let y = conv2d_forward(&[1.0f32; 9], &[1.0; 9], None, &g);
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn strided_padded_geometry() {
        let g = geom(1, 1, 8, 8, 1, 3, 2, 1);
        assert_eq!((g.out_height(), g.out_width()), (4, 4));
    }

    #[test]
    fn pointwise_matches_generic_path() {
        // 1×1 conv with pad 1 goes through im2col; compare its interior to the fast path
        let x: Vec<f64> = (0..2 * 9).map(|i| i as f64 * 0.1 - 0.5).collect();
        let w = [0.3, -0.7, 1.1, 0.2];
        let fast = conv2d_forward(&x, &w, None, &geom(1, 2, 3, 3, 2, 1, 1, 0));
        let padded = conv2d_forward(&x, &w, None, &geom(1, 2, 3, 3, 2, 1, 1, 1));
        for o in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let a = fast[o * 9 + i * 3 + j];
                    let b = padded[o * 25 + (i + 1) * 5 + j + 1];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_block_max() {
        let (y, arg) = maxpool2_forward(&[1.0f32, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(y, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn upsample_replicates() {
        assert_eq!(upsample2_forward(&[5.0f32], 1, 1, 1), vec![5.0; 4]);
        assert_eq!(upsample2_backward(&[1.0f32, 2.0, 3.0, 4.0], 1, 1, 1), vec![10.0]);
    }
}

use super::{gemm, Graph, Mat, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Stride and zero-padding per `(t, h, w)` axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: [1; 3], padding: [0; 3] }
    }
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` when that is below one.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl Dims {
    fn patch(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }
    fn positions(&self) -> usize {
        self.output.iter().product()
    }
    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }
}

/// Output positions `lo..hi` along one axis whose input index
/// `o·stride + offset − pad` lands inside `0..len`.
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    // smallest o with o·stride + offset >= pad
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // largest o with o·stride + offset − pad < len
    let hi = if offset >= pad + len { 0 } else { ((pad + len - offset - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// Gathers every receptive field of sample `x` (shape `C×T×H×W`) into
/// columns `col_offset..col_offset + P` of a `patch × row_len` matrix.
fn im2col<S: Real>(x: &[S], d: &Dims, cols: &mut [S], row_len: usize, col_offset: usize) {
    let [it, ih, iw] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot, oh, ow] = d.output;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.padding;
    let mut row = 0;
    for c in 0..d.c_in {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(ot, st, dt, pt, it);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(oh, sh, dh, ph, ih);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(ow, sw, dw, pw, iw);
                    let dst = &mut cols[row * row_len + col_offset..][..ot * oh * ow];
                    dst.fill(S::zero());
                    for t in t_lo..t_hi {
                        let ti = t * st + dt - pt;
                        for h in h_lo..h_hi {
                            let hi = h * sh + dh - ph;
                            let src = &xc[(ti * ih + hi) * iw..][..iw];
                            let out = &mut dst[(t * oh + h) * ow..][..ow];
                            if sw == 1 {
                                let w0 = w_lo + dw - pw;
                                out[w_lo..w_hi].copy_from_slice(&src[w0..w0 + (w_hi - w_lo)]);
                            } else {
                                for w in w_lo..w_hi {
                                    out[w] = src[w * sw + dw - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
fn col2im<S: Real>(cols: &[S], d: &Dims, dx: &mut [S], row_len: usize, col_offset: usize) {
    let [it, ih, iw] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot, oh, ow] = d.output;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.padding;
    let mut row = 0;
    for c in 0..d.c_in {
        let xc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(ot, st, dt, pt, it);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(oh, sh, dh, ph, ih);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(ow, sw, dw, pw, iw);
                    let src = &cols[row * row_len + col_offset..][..ot * oh * ow];
                    for t in t_lo..t_hi {
                        let ti = t * st + dt - pt;
                        for h in h_lo..h_hi {
                            let hi = h * sh + dh - ph;
                            let dst = &mut xc[(ti * ih + hi) * iw..][..iw];
                            let g = &src[(t * oh + h) * ow..][..ow];
                            if sw == 1 {
                                let w0 = w_lo + dw - pw;
                                for (a, &b) in dst[w0..w0 + (w_hi - w_lo)].iter_mut().zip(&g[w_lo..w_hi]) {
                                    *a += b;
                                }
                            } else {
                                for w in w_lo..w_hi {
                                    dst[w * sw + dw - pw] += g[w];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<S: Real> Graph<S> {
    /// 3D cross-correlation of `x: B×C_in×T×H×W` with `w: C_out×C_in×k_t×k_h×k_w`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::shape("conv3d", &xs, &ws));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_len(xs[a + 2], ws[a + 2], geom.stride[a], geom.padding[a]).ok_or_else(|| {
                Error::invalid(
                    "conv3d",
                    format!("input {:?} too small for kernel {:?} with {:?}", &xs[2..], &ws[2..], geom),
                )
            })?;
        }
        let d = Dims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            output,
            geom,
        };
        let (patch, pos, vol) = (d.patch(), d.positions(), d.input_volume());
        let row_len = d.batch * pos;

        let xv = self.value(x).data();
        let mut cols = vec![S::zero(); patch * row_len];
        for b in 0..d.batch {
            im2col(&xv[b * d.c_in * vol..(b + 1) * d.c_in * vol], &d, &mut cols, row_len, b * pos);
        }
        let mut ymat = vec![S::zero(); d.c_out * row_len];
        gemm(Mat::new(self.value(w).data(), d.c_out, patch), Mat::new(&cols, patch, row_len), &mut ymat, false);
        // [C_out, B·P] -> [B, C_out, P]
        let mut out = vec![S::zero(); d.batch * d.c_out * pos];
        for o in 0..d.c_out {
            for b in 0..d.batch {
                out[(b * d.c_out + o) * pos..][..pos].copy_from_slice(&ymat[o * row_len + b * pos..][..pos]);
            }
        }
        let value = Tensor::new(vec![d.batch, d.c_out, output[0], output[1], output[2]], out)?;
        let y = self.record(
            value,
            &[x, w],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gmat = vec![S::zero(); d.c_out * row_len];
                for o in 0..d.c_out {
                    for b in 0..d.batch {
                        gmat[o * row_len + b * pos..][..pos].copy_from_slice(&g[(b * d.c_out + o) * pos..][..pos]);
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut dcols = vec![S::zero(); patch * row_len];
                    gemm(
                        Mat::t(ctx.inputs[1].data(), patch, d.c_out),
                        Mat::new(&gmat, d.c_out, row_len),
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![S::zero(); d.batch * d.c_in * vol];
                    for b in 0..d.batch {
                        col2im(&dcols, &d, &mut dx[b * d.c_in * vol..(b + 1) * d.c_in * vol], row_len, b * pos);
                    }
                    Tensor::new(ctx.inputs[0].shape().to_vec(), dx).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let mut dw = vec![S::zero(); d.c_out * patch];
                    gemm(Mat::new(&gmat, d.c_out, row_len), Mat::t(&cols, row_len, patch), &mut dw, false);
                    Tensor::new(ctx.inputs[1].shape().to_vec(), dw).unwrap()
                });
                vec![gx, gw]
            }),
        );
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 2D cross-correlation of `x: B×C_in×H×W` with `w: C_out×C_in×k_h×k_w`;
    /// runs the 3D kernel with a unit temporal axis.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let geom = ConvGeometry { stride: [1, stride[0], stride[1]], padding: [0, padding[0], padding[1]] };
        let y5 = self.conv3d(x5, w5, bias, geom)?;
        let ys = self.shape(y5).to_vec();
        self.reshape(y5, &[ys[0], ys[1], ys[3], ys[4]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-deep loop over output and kernel positions.
    fn brute_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let out: Vec<usize> =
            (0..3).map(|a| conv_output_len(xs[a + 2], ws[a + 2], g.stride[a], g.padding[a]).unwrap()).collect();
        let mut y = vec![0.0; xs[0] * ws[0] * out.iter().product::<usize>()];
        let mut i = 0;
        for b in 0..xs[0] {
            for o in 0..ws[0] {
                for t in 0..out[0] {
                    for h in 0..out[1] {
                        for wq in 0..out[2] {
                            let mut acc = 0.0;
                            for c in 0..ws[1] {
                                for dt in 0..ws[2] {
                                    for dh in 0..ws[3] {
                                        for dw in 0..ws[4] {
                                            let ti = (t * g.stride[0] + dt) as isize - g.padding[0] as isize;
                                            let hi = (h * g.stride[1] + dh) as isize - g.padding[1] as isize;
                                            let wi = (wq * g.stride[2] + dw) as isize - g.padding[2] as isize;
                                            if ti < 0 || hi < 0 || wi < 0 {
                                                continue;
                                            }
                                            let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                            if ti >= xs[2] || hi >= xs[3] || wi >= xs[4] {
                                                continue;
                                            }
                                            let xv =
                                                x.data()[(((b * xs[1] + c) * xs[2] + ti) * xs[3] + hi) * xs[4] + wi];
                                            let wv =
                                                w.data()[(((o * ws[1] + c) * ws[2] + dt) * ws[3] + dh) * ws[4] + dw];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y[i] = acc;
                            i += 1;
                        }
                    }
                }
            }
        }
        let mut shape = vec![xs[0], ws[0]];
        shape.extend(out);
        Tensor::new(shape, y).unwrap()
    }

    fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matches_brute_force_across_geometries() {
        let cases = [
            ([2, 3, 4, 5, 6], [4, 3, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 2, 5, 7, 7], [3, 2, 3, 3, 3], [1, 2, 2], [0, 1, 1]),
            ([2, 2, 3, 6, 5], [2, 2, 1, 1, 1], [1, 2, 1], [0, 0, 0]),
            ([1, 1, 6, 4, 4], [2, 1, 3, 1, 1], [2, 1, 1], [1, 0, 0]),
        ];
        for (i, (xs, ws, stride, padding)) in cases.into_iter().enumerate() {
            let x = lcg_tensor(&xs, i as u64);
            let w = lcg_tensor(&ws, 100 + i as u64);
            let geom = ConvGeometry { stride, padding };
            let mut g = Graph::<f64>::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv3d(xv, wv, None, geom).unwrap();
            let expected = brute_conv3d(&x, &w, geom);
            assert_eq!(g.shape(y), expected.shape());
            assert!(g.value(y).max_abs_diff(&expected).unwrap() < 1e-12, "case {i}");
        }
    }

    #[test]
    fn conv2d_hand_example() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let w = g.constant(Tensor::new([1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap());
        let y = g.conv2d(x, w, None, [1, 1], [0, 0]).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.]);
    }

    #[test]
    fn valid_range_matches_enumeration() {
        for out in 1..6 {
            for stride in 1..4 {
                for offset in 0..4 {
                    for pad in 0..3 {
                        for len in 1..7 {
                            let ok: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + offset) as isize - pad as isize;
                                    i >= 0 && (i as usize) < len
                                })
                                .collect();
                            let (lo, hi) = valid_range(out, stride, offset, pad, len);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), ok, "{out} {stride} {offset} {pad} {len}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_output_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_len(8, 3, 1, 0), Some(6));
        assert_eq!(conv_output_len(2, 3, 1, 0), None);
        assert_eq!(conv_output_len(1, 1, 1, 0), Some(1));
    }

    #[test]
    fn rejects_channel_mismatch_and_tiny_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 3, 3, 3]));
        let w = g.constant(Tensor::zeros([1, 3, 1, 1, 1]));
        assert!(matches!(g.conv3d(x, w, None, ConvGeometry::default()), Err(Error::ShapeMismatch { .. })));
        let w = g.constant(Tensor::zeros([1, 2, 4, 1, 1]));
        assert!(g.conv3d(x, w, None, ConvGeometry::default()).is_err());
    }
}

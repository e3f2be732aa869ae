//! Forward and backward kernels for the fixed layer catalogue.
//!
//! Spatial activations are NHWC, conv kernels are `[k, k, c_in, c_out]`,
//! dense kernels are `[in, units]`.

use super::Padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// Output extent for one spatial axis, plus the leading pad.
    /// `same` follows the usual ceil(in / stride) rule with the extra pixel
    /// of an odd total pad going to the trailing edge.
    pub fn axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
        match padding {
            Padding::Valid => {
                if input < kernel {
                    None
                } else {
                    Some(((input - kernel) / stride + 1, 0))
                }
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let needed = (out - 1) * stride + kernel;
                let total = needed.saturating_sub(input);
                Some((out, total / 2))
            }
        }
    }

    #[inline]
    fn input_index(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w * g.in_c;
    let out_plane = g.out_h * g.out_w * g.out_c;
    let mut out = vec![0.0; batch * out_plane];
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let y = &mut out[n * out_plane..(n + 1) * out_plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = &mut y[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
                o.copy_from_slice(bias);
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let Some((iy, ix)) = g.input_index(oy, ky, ox, kx) else {
                            continue;
                        };
                        let xin = &x[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                        let wbase = (ky * g.kernel + kx) * g.in_c * g.out_c;
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &kernel[wbase + ci * g.out_c..][..g.out_c];
                            for (acc, w) in o.iter_mut().zip(wrow) {
                                *acc += xv * w;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_plane = g.in_h * g.in_w * g.in_c;
    let out_plane = g.out_h * g.out_w * g.out_c;
    let mut dx = vec![0.0; batch * in_plane];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; g.out_c];
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
        let dy = &dout[n * out_plane..(n + 1) * out_plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gy = &dy[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
                for (b, gv) in db.iter_mut().zip(gy) {
                    *b += gv;
                }
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let Some((iy, ix)) = g.input_index(oy, ky, ox, kx) else {
                            continue;
                        };
                        let xoff = (iy * g.in_w + ix) * g.in_c;
                        let wbase = (ky * g.kernel + kx) * g.in_c * g.out_c;
                        for ci in 0..g.in_c {
                            let xv = x[xoff + ci];
                            let woff = wbase + ci * g.out_c;
                            let wrow = &kernel[woff..][..g.out_c];
                            let dkrow = &mut dk[woff..][..g.out_c];
                            let mut acc = 0.0;
                            for ((dkv, w), gv) in dkrow.iter_mut().zip(wrow).zip(gy) {
                                *dkv += xv * gv;
                                acc += w * gv;
                            }
                            dxn[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

pub(crate) fn dense_forward(
    batch: usize,
    inputs: usize,
    units: usize,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; batch * units];
    for n in 0..batch {
        let x = &input[n * inputs..(n + 1) * inputs];
        let y = &mut out[n * units..(n + 1) * units];
        y.copy_from_slice(bias);
        for (i, &xv) in x.iter().enumerate() {
            let wrow = &kernel[i * units..(i + 1) * units];
            for (acc, w) in y.iter_mut().zip(wrow) {
                *acc += xv * w;
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn dense_backward(
    batch: usize,
    inputs: usize,
    units: usize,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; batch * inputs];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; units];
    for n in 0..batch {
        let x = &input[n * inputs..(n + 1) * inputs];
        let gy = &dout[n * units..(n + 1) * units];
        for (b, gv) in db.iter_mut().zip(gy) {
            *b += gv;
        }
        let dxn = &mut dx[n * inputs..(n + 1) * inputs];
        for (i, &xv) in x.iter().enumerate() {
            let wrow = &kernel[i * units..(i + 1) * units];
            let dkrow = &mut dk[i * units..(i + 1) * units];
            let mut acc = 0.0;
            for ((dkv, w), gv) in dkrow.iter_mut().zip(wrow).zip(gy) {
                *dkv += xv * gv;
                acc += w * gv;
            }
            dxn[i] = acc;
        }
    }
    (dx, dk, db)
}

pub(crate) fn relu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(input: &[f64], dout: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(dout)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

pub(crate) fn gap_forward(batch: usize, pixels: usize, channels: usize, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; batch * channels];
    let scale = 1.0 / pixels as f64;
    for n in 0..batch {
        let o = &mut out[n * channels..(n + 1) * channels];
        for p in 0..pixels {
            let px = &input[(n * pixels + p) * channels..][..channels];
            for (acc, v) in o.iter_mut().zip(px) {
                *acc += v;
            }
        }
        for v in o.iter_mut() {
            *v *= scale;
        }
    }
    out
}

pub(crate) fn gap_backward(batch: usize, pixels: usize, channels: usize, dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; batch * pixels * channels];
    let scale = 1.0 / pixels as f64;
    for n in 0..batch {
        let g = &dout[n * channels..(n + 1) * channels];
        for p in 0..pixels {
            let d = &mut dx[(n * pixels + p) * channels..][..channels];
            for (dv, gv) in d.iter_mut().zip(g) {
                *dv = gv * scale;
            }
        }
    }
    dx
}

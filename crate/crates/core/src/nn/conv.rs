//! Grouped 2-D convolution kernels (forward and both adjoints), computed
//! per group over the unfolded input so inner loops run over whole planes.
//!
//! Layout is NCHW. Kernels are `[C_out, C_in/G, kH, kW]`, or
//! `[B, C_out, C_in/G, kH, kW]` when every sample carries its own kernel
//! (predicted kernels). Work is split over the batch; per-sample partial
//! kernel gradients are summed in sample order so the result does not depend
//! on how many threads ran.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub per_sample: bool,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Validates shapes of `input` and `kernel` and derives the output size.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let [batch, c_in, h, w] = match input {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::Shape(format!("conv input must be rank 4, got {input:?}"))),
        };
        let (per_sample, kshape) = match *kernel {
            [o, i, kh, kw] => (false, [o, i, kh, kw]),
            [kb, o, i, kh, kw] => {
                if kb != batch {
                    return Err(Error::Shape(format!(
                        "per-sample kernel batch {kb} != input batch {batch}"
                    )));
                }
                (true, [o, i, kh, kw])
            }
            _ => return Err(Error::Shape(format!("conv kernel must be rank 4 or 5, got {kernel:?}"))),
        };
        let [c_out, cin_g, kh, kw] = kshape;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Shape(format!(
                "channels {c_in}->{c_out} not divisible by {groups} groups"
            )));
        }
        if cin_g != c_in / groups {
            return Err(Error::Shape(format!(
                "kernel expects {cin_g} input channels per group, input gives {}",
                c_in / groups
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            groups,
            per_sample,
            ho,
            wo,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Elements in one sample's kernel.
    fn kernel_len(&self) -> usize {
        self.c_out * self.cin_g() * self.kh * self.kw
    }

    /// Multiply-accumulates for one forward pass.
    pub fn macs(&self) -> usize {
        self.batch * self.c_out * self.ho * self.wo * self.cin_g() * self.kh * self.kw
    }
}

/// Range of output indices `o` for which `o*stride + k - pad` lands in `0..len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every (output row slice, input row slice) pairing for a single
/// kernel tap. `f(out_offset, in_offset, count)` with unit output stride and
/// input stride `stride`.
#[inline]
fn for_each_tap<F: FnMut(usize, usize, usize)>(g: &ConvGeom, ky: usize, kx: usize, mut f: F) {
    let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.pad, g.stride);
    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.pad, g.stride);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * g.stride + ky - g.pad;
        let ix0 = ox_lo * g.stride + kx - g.pad;
        f(oy * g.wo + ox_lo, iy * g.w + ix0, ox_hi - ox_lo);
    }
}

fn sample_kernel<'a, T>(g: &ConvGeom, kernel: &'a [T], b: usize) -> &'a [T] {
    if g.per_sample {
        &kernel[b * g.kernel_len()..(b + 1) * g.kernel_len()]
    } else {
        kernel
    }
}

impl ConvGeom {
    /// Rows of the unfolded input of one group: `cin_g · kh · kw`.
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    /// A 1×1, stride-1, unpadded conv reads its input planes as columns
    /// directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds group `grp` of one sample into `[cin_g·kh·kw, ho·wo]` columns.
fn im2col<T: Scalar>(g: &ConvGeom, x_b: &[T], grp: usize, cols: &mut [T]) {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    cols.fill(T::zero());
    for icg in 0..g.cin_g() {
        let x = &x_b[(grp * g.cin_g() + icg) * in_plane..][..in_plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((icg * g.kh + ky) * g.kw + kx) * out_plane..][..out_plane];
                for_each_tap(g, ky, kx, |o, i, n| {
                    if g.stride == 1 {
                        row[o..o + n].copy_from_slice(&x[i..i + n]);
                    } else {
                        for (j, r) in row[o..o + n].iter_mut().enumerate() {
                            *r = x[i + j * g.stride];
                        }
                    }
                });
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], grp: usize, dx_b: &mut [T]) {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for icg in 0..g.cin_g() {
        let d = &mut dx_b[(grp * g.cin_g() + icg) * in_plane..][..in_plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((icg * g.kh + ky) * g.kw + kx) * out_plane..][..out_plane];
                for_each_tap(g, ky, kx, |o, i, n| {
                    if g.stride == 1 {
                        for (dv, &c) in d[i..i + n].iter_mut().zip(&row[o..o + n]) {
                            *dv = *dv + c;
                        }
                    } else {
                        for (j, &c) in row[o..o + n].iter().enumerate() {
                            let p = i + j * g.stride;
                            d[p] = d[p] + c;
                        }
                    }
                });
            }
        }
    }
}

/// `y += a · x`.
#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

/// Dot product with eight fixed partial sums, so the compiler can vectorize
/// while the summation order stays fixed.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Runs `f(grp, cols)` for each group of one sample, with `cols` the
/// unfolded input (borrowed directly for pointwise convs).
fn with_cols<T: Scalar>(g: &ConvGeom, x_b: &[T], scratch: &mut Vec<T>, mut f: impl FnMut(usize, &[T])) {
    let out_plane = g.ho * g.wo;
    let rows = g.col_rows();
    for grp in 0..g.groups {
        if g.is_pointwise() {
            f(grp, &x_b[grp * rows * out_plane..(grp + 1) * rows * out_plane]);
        } else {
            scratch.resize(rows * out_plane, T::zero());
            im2col(g, x_b, grp, scratch);
            f(grp, scratch);
        }
    }
}

pub fn forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_plane = g.ho * g.wo;
    let (rows, cout_g) = (g.col_rows(), g.cout_g());
    let mut out = vec![T::zero(); g.batch * g.c_out * out_plane];
    par::for_each_chunk(&mut out, g.c_out * out_plane, |b, out_b| {
        let k_b = sample_kernel(g, kernel, b);
        let mut scratch = Vec::new();
        with_cols(g, &input[b * in_len..(b + 1) * in_len], &mut scratch, |grp, cols| {
            for oc in grp * cout_g..(grp + 1) * cout_g {
                let y = &mut out_b[oc * out_plane..(oc + 1) * out_plane];
                for (r, &wv) in k_b[oc * rows..(oc + 1) * rows].iter().enumerate() {
                    axpy(y, wv, &cols[r * out_plane..(r + 1) * out_plane]);
                }
            }
        });
    });
    out
}

/// Gradient with respect to the input.
pub fn backward_input<T: Scalar>(g: &ConvGeom, kernel: &[T], grad_out: &[T]) -> Vec<T> {
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let (rows, cout_g) = (g.col_rows(), g.cout_g());
    let mut dx = vec![T::zero(); g.batch * g.c_in * in_plane];
    par::for_each_chunk(&mut dx, g.c_in * in_plane, |b, dx_b| {
        let gy_b = &grad_out[b * g.c_out * out_plane..(b + 1) * g.c_out * out_plane];
        let k_b = sample_kernel(g, kernel, b);
        let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * out_plane }];
        for grp in 0..g.groups {
            let target: &mut [T] = if g.is_pointwise() {
                &mut dx_b[grp * rows * in_plane..(grp + 1) * rows * in_plane]
            } else {
                dcols.fill(T::zero());
                &mut dcols
            };
            for oc in grp * cout_g..(grp + 1) * cout_g {
                let gy = &gy_b[oc * out_plane..(oc + 1) * out_plane];
                for (r, &wv) in k_b[oc * rows..(oc + 1) * rows].iter().enumerate() {
                    axpy(&mut target[r * out_plane..(r + 1) * out_plane], wv, gy);
                }
            }
            if !g.is_pointwise() {
                col2im(g, &dcols, grp, dx_b);
            }
        }
    });
    dx
}

fn kernel_grad_sample<T: Scalar>(g: &ConvGeom, x_b: &[T], gy_b: &[T], dk: &mut [T], scratch: &mut Vec<T>) {
    let out_plane = g.ho * g.wo;
    let (rows, cout_g) = (g.col_rows(), g.cout_g());
    with_cols(g, x_b, scratch, |grp, cols| {
        for oc in grp * cout_g..(grp + 1) * cout_g {
            let gy = &gy_b[oc * out_plane..(oc + 1) * out_plane];
            for (r, d) in dk[oc * rows..(oc + 1) * rows].iter_mut().enumerate() {
                *d = *d + dot(gy, &cols[r * out_plane..(r + 1) * out_plane]);
            }
        }
    });
}

/// Gradient with respect to the kernel. Per-sample kernels get per-sample
/// gradients; a shared kernel gets the batch sum.
pub fn backward_kernel<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.ho * g.wo;
    let klen = g.kernel_len();
    let slices = |b: usize| {
        (
            &input[b * in_len..(b + 1) * in_len],
            &grad_out[b * out_len..(b + 1) * out_len],
        )
    };
    if g.per_sample {
        let mut dk = vec![T::zero(); g.batch * klen];
        par::for_each_chunk(&mut dk, klen, |b, dk_b| {
            let (x, gy) = slices(b);
            kernel_grad_sample(g, x, gy, dk_b, &mut Vec::new());
        });
        return dk;
    }
    let partials = par::map_range(g.batch, |b| {
        let (x, gy) = slices(b);
        let mut dk = vec![T::zero(); klen];
        kernel_grad_sample(g, x, gy, &mut dk, &mut Vec::new());
        dk
    });
    let mut dk = vec![T::zero(); klen];
    for p in partials {
        for (d, v) in dk.iter_mut().zip(p) {
            *d = *d + v;
        }
    }
    dk
}

//! Raw convolution kernels on row-major slices (im2col + GEMM).

use crate::tensor::{gemm, MatRef, Real};

/// Geometry of one 2D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let ph = self.in_h + 2 * self.pad;
        let pw = self.in_w + 2 * self.pad;
        if self.stride == 0 || ph < self.kh || pw < self.kw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    fn out_hw(&self) -> (usize, usize) {
        self.output_hw().expect("validated conv geometry")
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        let (oh, ow) = self.out_hw();
        oh * ow
    }
}

/// Output columns `ox` whose input column `ox·stride + k − pad` lies inside `0..in_w`.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    // smallest ox with ox·stride + k ≥ pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest ox with ox·stride + k − pad ≤ len − 1
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one sample `(C, H, W)` into a `(C·kh·kw) × (oh·ow)` matrix whose
/// rows are `ld` apart (so several samples can share one wide matrix).
pub fn im2col_strided<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize) {
    let (oh, ow) = g.out_hw();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(oh, g.stride, ki, g.pad, g.in_h);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(ow, g.stride, kj, g.pad, g.in_w);
                let dst = &mut cols[row * ld..row * ld + oh * ow];
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    let ix0 = xlo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (d, s) in drow[xlo..xhi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Unfold one sample `(C, H, W)` into a `(C·kh·kw) × (oh·ow)` matrix.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    im2col_strided(g, x, cols, g.col_cols())
}

/// Unfold one sample into a patch-major `(oh·ow) × (C·kh·kw)` matrix, the
/// transpose of [`im2col`]. Used for weight gradients, where a row-major
/// right operand keeps the long reduction cache-friendly.
pub fn im2row<T: Real>(g: &ConvGeom, x: &[T], rows_out: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let rows = g.col_rows();
    let taps = g.kh * g.kw;
    let plane = g.in_h * g.in_w;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut rows_out[(oy * ow + ox) * rows..][..rows];
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let x0 = (ox * g.stride) as isize - g.pad as isize;
            let inside = y0 >= 0
                && x0 >= 0
                && y0 as usize + g.kh <= g.in_h
                && x0 as usize + g.kw <= g.in_w;
            if inside {
                let (y0, x0) = (y0 as usize, x0 as usize);
                for c in 0..g.in_channels {
                    let xc = &x[c * plane..(c + 1) * plane];
                    for ki in 0..g.kh {
                        let src = &xc[(y0 + ki) * g.in_w + x0..][..g.kw];
                        dst[c * taps + ki * g.kw..][..g.kw].copy_from_slice(src);
                    }
                }
                continue;
            }
            for c in 0..g.in_channels {
                let xc = &x[c * plane..(c + 1) * plane];
                for ki in 0..g.kh {
                    let iy = y0 + ki as isize;
                    for kj in 0..g.kw {
                        let ix = x0 + kj as isize;
                        let ok = iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w;
                        dst[c * taps + ki * g.kw + kj] =
                            if ok { xc[iy as usize * g.in_w + ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_strided`]: scatter-add columns back into `(C, H, W)`.
pub fn col2im_add_strided<T: Real>(g: &ConvGeom, cols: &[T], ld: usize, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(oh, g.stride, ki, g.pad, g.in_h);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(ow, g.stride, kj, g.pad, g.in_w);
                let src = &cols[row * ld..row * ld + oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut dxc[iy * g.in_w..(iy + 1) * g.in_w];
                    let srow = &src[oy * ow + xlo..oy * ow + xhi];
                    let ix0 = xlo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`].
pub fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    col2im_add_strided(g, cols, g.col_cols(), dx)
}

const CHUNK_ELEMS: usize = 200_000;

/// Samples per GEMM; keeps the unfolded buffer cache-resident.
fn chunk_len(g: &ConvGeom, batch: usize) -> usize {
    let per_sample = g.col_rows() * g.col_cols();
    (CHUNK_ELEMS / per_sample.max(1)).clamp(1, batch.max(1))
}

/// Batched forward convolution. `x` is `(N, C, H, W)`, `w` is `(O, C, kh, kw)`.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let o = g.out_channels;
    let out_len = o * plane;
    let mut out = vec![T::zero(); batch * out_len];
    let chunk = chunk_len(g, batch);
    let mut cols = vec![T::zero(); rows * plane * chunk];
    let mut wide = vec![T::zero(); o * plane * chunk];
    for start in (0..batch).step_by(chunk) {
        let nb = chunk.min(batch - start);
        let ld = nb * plane;
        for k in 0..nb {
            let n = start + k;
            im2col_strided(g, &x[n * in_len..(n + 1) * in_len], &mut cols[k * plane..], ld);
        }
        gemm(MatRef::new(w, o, rows), MatRef::new(&cols[..rows * ld], rows, ld), T::zero(), &mut wide[..o * ld]);
        for k in 0..nb {
            let y = &mut out[(start + k) * out_len..(start + k + 1) * out_len];
            for (oc, yo) in y.chunks_exact_mut(plane).enumerate() {
                let src = &wide[oc * ld + k * plane..oc * ld + (k + 1) * plane];
                match bias {
                    Some(b) => yo.iter_mut().zip(src).for_each(|(d, &s)| *d = s + b[oc]),
                    None => yo.copy_from_slice(src),
                }
            }
        }
    }
    out
}

/// Gradients of a batched convolution. Each output slot is filled only when requested;
/// `dw` and `db` are accumulated into, `dx` is accumulated into as well.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let in_len = g.in_channels * g.in_h * g.in_w;
    let (rows, plane) = (g.col_rows(), g.col_cols());
    let o = g.out_channels;
    let out_len = o * plane;
    if let Some(db) = db {
        for n in 0..batch {
            for (oc, d) in dy[n * out_len..(n + 1) * out_len].chunks_exact(plane).enumerate() {
                db[oc] = db[oc] + d.iter().copied().sum::<T>();
            }
        }
    }
    // Stride-1 input gradients are a forward convolution of dy with the
    // flipped, channel-transposed kernel, which avoids the col2im scatter.
    let direct_dx = g.stride == 1 && g.kh == g.kw && g.pad < g.kh;
    if direct_dx {
        if let Some(dx) = dx.take() {
            let (oh, ow) = g.out_hw();
            let flipped = ConvGeom {
                in_channels: o,
                in_h: oh,
                in_w: ow,
                out_channels: g.in_channels,
                kh: g.kh,
                kw: g.kw,
                stride: 1,
                pad: g.kh - 1 - g.pad,
            };
            let taps = g.kh * g.kw;
            let mut wf = vec![T::zero(); w.len()];
            for oc in 0..o {
                for c in 0..g.in_channels {
                    let src = &w[(oc * g.in_channels + c) * taps..][..taps];
                    let dst = &mut wf[(c * o + oc) * taps..][..taps];
                    for t in 0..taps {
                        dst[t] = src[taps - 1 - t];
                    }
                }
            }
            let full = conv2d_forward(&flipped, batch, dy, &wf, None);
            for (a, &v) in dx.iter_mut().zip(&full) {
                *a = *a + v;
            }
        }
    }
    if dw.is_none() && dx.is_none() {
        return;
    }
    let chunk = chunk_len(g, batch);
    let mut cols = vec![T::zero(); rows * plane * chunk];
    let mut wide = vec![T::zero(); o * plane * chunk];
    for start in (0..batch).step_by(chunk) {
        let nb = chunk.min(batch - start);
        let ld = nb * plane;
        // dy as an (O, nb·plane) matrix
        for k in 0..nb {
            let dyn_ = &dy[(start + k) * out_len..(start + k + 1) * out_len];
            for (oc, d) in dyn_.chunks_exact(plane).enumerate() {
                wide[oc * ld + k * plane..oc * ld + (k + 1) * plane].copy_from_slice(d);
            }
        }
        let dyw = MatRef::new(&wide[..o * ld], o, ld);
        if let Some(dw) = dw.as_deref_mut() {
            for k in 0..nb {
                let n = start + k;
                im2row(g, &x[n * in_len..(n + 1) * in_len], &mut cols[k * plane * rows..(k + 1) * plane * rows]);
            }
            gemm(dyw, MatRef::new(&cols[..rows * ld], ld, rows), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(MatRef::t(w, o, rows), dyw, T::zero(), &mut cols[..rows * ld]);
            for k in 0..nb {
                let n = start + k;
                col2im_add_strided(g, &cols[k * plane..], ld, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = g.output_hw().unwrap();
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    acc += x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                                        * w[((o * g.in_channels + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
            let g = ConvGeom {
                in_channels: 2,
                in_h: 7,
                in_w: 6,
                out_channels: 3,
                kh: 3,
                kw: 3,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..84).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..54).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let got = conv2d_forward(&g, 1, &x, &w, None);
            assert_eq!(got, naive(&g, &x, &w), "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_channels: 2,
            in_h: 5,
            in_w: 5,
            out_channels: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&g, &c, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
            let g = ConvGeom { in_channels: 3, in_h: 6, in_w: 7, out_channels: 2, kh: 3, kw: 3, stride, pad };
            let batch = 2;
            let x: Vec<f64> = (0..batch * 126).map(|i| ((i * 31 % 17) as f64) * 0.1 - 0.8).collect();
            let w: Vec<f64> = (0..54).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.6).collect();
            let y = conv2d_forward(&g, batch, &x, &w, None);
            let dy: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            conv2d_backward(&g, batch, &x, &w, &dy, Some(&mut dx), Some(&mut dw), None);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9, "dx stride {stride} pad {pad}");
            assert!((lhs - via_w).abs() < 1e-9, "dw stride {stride} pad {pad}");
        }
    }
}

//! Convolution kernels on raw buffers.
//!
//! Both directions share one geometry: a "big" image `[cb, hb, wb]` and a
//! "small" image `[cs, hs, ws]` related by a `[cs, cb, k, k]` kernel with
//! the given stride and padding. `conv2d` maps big to small; the transposed
//! convolution maps small to big and is its exact adjoint.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cb: usize,
    pub hb: usize,
    pub wb: usize,
    pub cs: usize,
    pub hs: usize,
    pub ws: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn big_len(&self) -> usize {
        self.cb * self.hb * self.wb
    }

    pub fn small_len(&self) -> usize {
        self.cs * self.hs * self.ws
    }

    fn col_rows(&self) -> usize {
        self.cb * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.hs * self.ws
    }
}

/// `c[m,n] = a[m,k] · b[k,n] + beta · c`, where `a_t`/`b_t` mean the stored
/// operand is the transpose (`[k,m]` / `[n,k]` row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p_total = g.col_cols();
    for c in 0..g.cb {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * p_total..(row + 1) * p_total];
                for oy in 0..g.hs {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ws..(oy + 1) * g.ws];
                    if iy < 0 || iy >= g.hb as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(c * g.hb + iy as usize) * g.wb..][..g.wb];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.wb as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p_total = g.col_cols();
    for c in 0..g.cb {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * p_total..(row + 1) * p_total];
                for oy in 0..g.hs {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.hb as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.hb + iy as usize) * g.wb..][..g.wb];
                    for (ox, s) in src_row[oy * g.ws..(oy + 1) * g.ws].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.wb {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// big -> small (ordinary convolution without bias).
pub(crate) fn big_to_small(big: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * p];
    let mut out = vec![0.0; g.batch * g.small_len()];
    for n in 0..g.batch {
        im2col(&big[n * g.big_len()..(n + 1) * g.big_len()], g, &mut cols);
        gemm(
            g.cs,
            rows,
            p,
            weight,
            false,
            &cols,
            false,
            &mut out[n * g.small_len()..(n + 1) * g.small_len()],
            0.0,
        );
    }
    out
}

/// small -> big (transposed convolution without bias).
pub(crate) fn small_to_big(small: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * p];
    let mut out = vec![0.0; g.batch * g.big_len()];
    for n in 0..g.batch {
        gemm(
            rows,
            g.cs,
            p,
            weight,
            true,
            &small[n * g.small_len()..(n + 1) * g.small_len()],
            false,
            &mut cols,
            0.0,
        );
        col2im(&cols, g, &mut out[n * g.big_len()..(n + 1) * g.big_len()]);
    }
    out
}

/// Kernel gradient shared by both directions: `Σ_n small_n · im2col(big_n)ᵀ`.
pub(crate) fn weight_grad(big: &[f64], small: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * p];
    let mut dw = vec![0.0; g.cs * rows];
    for n in 0..g.batch {
        im2col(&big[n * g.big_len()..(n + 1) * g.big_len()], g, &mut cols);
        gemm(
            g.cs,
            p,
            rows,
            &small[n * g.small_len()..(n + 1) * g.small_len()],
            false,
            &cols,
            true,
            &mut dw,
            1.0,
        );
    }
    dw
}

/// Adds a per-channel bias to a `[batch, channels, plane]` buffer.
pub(crate) fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Sums a `[batch, channels, plane]` buffer over batch and plane.
pub(crate) fn channel_sums(buf: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut s = vec![0.0; channels];
    for (i, chunk) in buf.chunks(plane).enumerate() {
        s[i % channels] += chunk.iter().sum::<f64>();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { batch: 1, cb: 2, hb: 5, wb: 4, cs: 1, hs: 3, ws: 2, k: 3, stride: 2, pad: 1 };
        let img: Vec<f64> = (0..g.big_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_in: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_in.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_in, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_in).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

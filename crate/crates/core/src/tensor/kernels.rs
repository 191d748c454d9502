//! Raw slice kernels behind the tape ops. All loops accumulate in a fixed
//! order so results are bit-reproducible run to run.

use super::Element;

/// C[m,n] += A[m,k] * B[k,n], row major. The k-middle loop keeps the inner
/// loop streaming contiguously over B and C rows, which autovectorizes.
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + ap * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T (dot-product form; k contiguous in both).
pub fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            crow[j] = crow[j] + s;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n] (axpy form over the shared k dimension).
pub fn matmul_tn_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let ap = arow[i];
            if ap == E::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + ap * brow[j];
            }
        }
    }
}

/// Output spatial size of a convolution: floor((size + 2*pad - k) / stride) + 1.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unpack one image [c,h,w] into columns [c*kh*kw, oh*ow] for conv-as-matmul.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    x: &[E],
    cols: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let out = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let orow = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in orow.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        orow[ox] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add columns back into an image; inverse map of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Element>(
    cols: &[E],
    x: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] = xrow[ix as usize] + srow[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-wise softmax over the last dimension, numerically shifted by the max.
pub fn softmax_rows<E: Element>(x: &[E], out: &mut [E], rows: usize, n: usize) {
    for r in 0..rows {
        let xi = &x[r * n..(r + 1) * n];
        let oi = &mut out[r * n..(r + 1) * n];
        let mut mx = xi[0];
        for &v in xi.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for j in 0..n {
            let e = (xi[j] - mx).exp();
            oi[j] = e;
            sum = sum + e;
        }
        for v in oi.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax_rows<E: Element>(x: &[E], out: &mut [E], rows: usize, n: usize) {
    for r in 0..rows {
        let xi = &x[r * n..(r + 1) * n];
        let oi = &mut out[r * n..(r + 1) * n];
        let mut mx = xi[0];
        for &v in xi.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for &v in xi.iter() {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for j in 0..n {
            oi[j] = xi[j] - lse;
        }
    }
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus<E: Element>(x: E) -> E {
    let zero = E::zero();
    let pos = if x > zero { x } else { zero };
    pos + (-(x.abs())).exp().ln_1p()
}

//! Raw numeric loops shared by forward evaluation and backward accumulation.
//!
//! All kernels write each output element exactly once (or accumulate in a
//! fixed loop order), so results are bit-deterministic for fixed inputs.

/// c[m,n] = a[m,k] @ b[k,n]
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// out[cols,rows] = transpose of a[rows,cols]
pub fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn tconv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// 2-D convolution: x[ci,h,w] * w[co,ci,kh,kw] -> out[co,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    (ci, h, wd): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let oh = conv_out_len(h, kh, sh, ph);
    let ow = conv_out_len(wd, kw, sw, pw);
    debug_assert_eq!(out.len(), co * oh * ow);
    out.fill(0.0);
    for oc in 0..co {
        for ic in 0..ci {
            let xc = &x[ic * h * wd..(ic + 1) * h * wd];
            let wk = &w[(oc * ci + ic) * kh * kw..(oc * ci + ic + 1) * kh * kw];
            for i in 0..oh {
                for ki in 0..kh {
                    let ih = (i * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &xc[ih as usize * wd..(ih as usize + 1) * wd];
                    let orow = &mut out[(oc * oh + i) * ow..(oc * oh + i + 1) * ow];
                    for kj in 0..kw {
                        let wv = wk[ki * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        // iw = j*sw + kj - pw must lie in [0, wd)
                        for j in 0..ow {
                            let iw = (j * sw + kj) as isize - pw as isize;
                            if iw >= 0 && iw < wd as isize {
                                orow[j] += wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv2d w.r.t. input and weights given upstream d_out.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    (ci, h, wd): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let oh = conv_out_len(h, kh, sh, ph);
    let ow = conv_out_len(wd, kw, sw, pw);
    for oc in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let g = d_out[(oc * oh + i) * ow + j];
                if g == 0.0 {
                    continue;
                }
                for ic in 0..ci {
                    let base_x = ic * h * wd;
                    let base_w = (oc * ci + ic) * kh * kw;
                    for ki in 0..kh {
                        let ih = (i * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let iw = (j * sw + kj) as isize - pw as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            let xi = base_x + ih as usize * wd + iw as usize;
                            let wi = base_w + ki * kw + kj;
                            dx[xi] += g * w[wi];
                            dw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// Transposed 2-D convolution, the exact adjoint of `conv2d` with the same
/// stride and padding: x[ci,h,w] * w[ci,co,kh,kw] -> out[co,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn tconv2d(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    (ci, h, wd): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let oh = tconv_out_len(h, kh, sh, ph);
    let ow = tconv_out_len(wd, kw, sw, pw);
    debug_assert_eq!(out.len(), co * oh * ow);
    out.fill(0.0);
    for ic in 0..ci {
        for a in 0..h {
            for b in 0..wd {
                let xv = x[(ic * h + a) * wd + b];
                if xv == 0.0 {
                    continue;
                }
                for oc in 0..co {
                    let wk = &w[(ic * co + oc) * kh * kw..(ic * co + oc + 1) * kh * kw];
                    for ki in 0..kh {
                        let i = (a * sh + ki) as isize - ph as isize;
                        if i < 0 || i >= oh as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let j = (b * sw + kj) as isize - pw as isize;
                            if j < 0 || j >= ow as isize {
                                continue;
                            }
                            out[(oc * oh + i as usize) * ow + j as usize] += xv * wk[ki * kw + kj];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of tconv2d w.r.t. input and weights given upstream d_out.
#[allow(clippy::too_many_arguments)]
pub fn tconv2d_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    (ci, h, wd): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) {
    let oh = tconv_out_len(h, kh, sh, ph);
    let ow = tconv_out_len(wd, kw, sw, pw);
    for ic in 0..ci {
        for a in 0..h {
            for b in 0..wd {
                let xv = x[(ic * h + a) * wd + b];
                let mut acc = 0.0;
                for oc in 0..co {
                    let wk = &w[(ic * co + oc) * kh * kw..(ic * co + oc + 1) * kh * kw];
                    for ki in 0..kh {
                        let i = (a * sh + ki) as isize - ph as isize;
                        if i < 0 || i >= oh as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let j = (b * sw + kj) as isize - pw as isize;
                            if j < 0 || j >= ow as isize {
                                continue;
                            }
                            let g = d_out[(oc * oh + i as usize) * ow + j as usize];
                            acc += g * wk[ki * kw + kj];
                            dw[(ic * co + oc) * kh * kw + ki * kw + kj] += g * xv;
                        }
                    }
                }
                dx[(ic * h + a) * wd + b] += acc;
            }
        }
    }
}

/// Mean of each column of a row-major [rows, cols] matrix, summed in sorted
/// order so the result is invariant under any permutation of the rows.
pub fn column_means_sorted(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    let mut col = vec![0.0f64; rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = a[r * cols + c];
        }
        col.sort_by(f64::total_cmp);
        let mut s = 0.0;
        for v in &col {
            s += v;
        }
        out[c] = s / rows as f64;
    }
}

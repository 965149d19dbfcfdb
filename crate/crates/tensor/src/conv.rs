//! 3x3 same-padding convolution kernels (forward and backward) via im2col.
//!
//! Layout is `[N, C, H, W]` row-major. The im2col buffer is `[H*W, C*9]`
//! per sample, so the convolution is one GEMM against the `[Cout, Cin*9]`
//! weight matrix.

use crate::gemm::{gemm_nn, gemm_tn};

/// Fills `col` (`h*w` rows by `cin*9` columns) from one `[cin, h, w]` plane
/// stack with zero padding of 1.
fn im2col3(x: &[f32], cin: usize, h: usize, w: usize, col: &mut [f32]) {
    let k = cin * 9;
    debug_assert_eq!(col.len(), h * w * k);
    col.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let col_idx = c * 9 + ky * 3 + kx;
                // Output pixel (y, x) reads input (y + ky - 1, x + kx - 1).
                let y0 = 1usize.saturating_sub(ky);
                let y1 = if ky <= 1 { h } else { h - 1 };
                let x0 = 1usize.saturating_sub(kx);
                let x1 = if kx <= 1 { w } else { w - 1 };
                for oy in y0..y1 {
                    let iy = oy + ky - 1;
                    let src = &plane[iy * w + (x0 + kx - 1)..iy * w + (x1 + kx - 1)];
                    let row_base = oy * w;
                    for (ox, v) in (x0..x1).zip(src) {
                        col[(row_base + ox) * k + col_idx] = *v;
                    }
                }
            }
        }
    }
}

/// Scatters a column buffer back onto an input-shaped gradient (accumulates).
fn col2im3(col: &[f32], cin: usize, h: usize, w: usize, dx: &mut [f32]) {
    let k = cin * 9;
    debug_assert_eq!(col.len(), h * w * k);
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let col_idx = c * 9 + ky * 3 + kx;
                let y0 = 1usize.saturating_sub(ky);
                let y1 = if ky <= 1 { h } else { h - 1 };
                let x0 = 1usize.saturating_sub(kx);
                let x1 = if kx <= 1 { w } else { w - 1 };
                for oy in y0..y1 {
                    let iy = oy + ky - 1;
                    let row_base = oy * w;
                    for ox in x0..x1 {
                        plane[iy * w + ox + kx - 1] += col[(row_base + ox) * k + col_idx];
                    }
                }
            }
        }
    }
}

/// out[n] = weight (cout x cin*9) applied to x[n]; out layout [N, Cout, H, W].
pub fn conv3x3_forward(
    x: &[f32],
    weight: &[f32],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    out: &mut [f32],
) {
    let hw = h * w;
    let k = cin * 9;
    let mut col = vec![0.0f32; hw * k];
    for s in 0..n {
        im2col3(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &mut col);
        // [hw, k] * [cout, k]^T -> [hw, cout], written transposed into [cout, hw].
        let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
        unsafe {
            matrixmultiply::sgemm(
                hw, k, cout, 1.0,
                col.as_ptr(), k as isize, 1,
                weight.as_ptr(), 1, k as isize,
                0.0,
                dst.as_mut_ptr(), 1, hw as isize,
            );
        }
    }
}

/// Accumulates dx and dw for the forward above given dy (same layout as out).
pub fn conv3x3_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let hw = h * w;
    let k = cin * 9;
    let mut col = vec![0.0f32; hw * k];
    let mut dcol = vec![0.0f32; hw * k];
    let mut dx = dx;
    let mut dw = dw;
    for s in 0..n {
        let dy_s = &dy[s * cout * hw..(s + 1) * cout * hw]; // [cout, hw]
        if dw.is_some() {
            im2col3(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &mut col);
            // dw += dy_s (cout x hw) * col (hw x k)
            gemm_nn(cout, hw, k, 1.0, dy_s, &col, 1.0, dw.as_deref_mut().unwrap());
        }
        if let Some(dx_buf) = dx.as_deref_mut() {
            // dcol (hw x k) = dy_s^T (hw x cout) * weight (cout x k)
            gemm_tn(hw, cout, k, 1.0, dy_s, weight, 0.0, &mut dcol);
            col2im3(
                &dcol,
                cin,
                h,
                w,
                &mut dx_buf[s * cin * hw..(s + 1) * cin * hw],
            );
        }
    }
}

pub fn avg_pool2_forward(x: &[f32], planes: usize, h: usize, w: usize, f: usize, out: &mut [f32]) {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f32;
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..f {
                    let row = (oy * f + dy) * w + ox * f;
                    for dx in 0..f {
                        acc += src[row + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
}

pub fn avg_pool2_backward(dy: &[f32], planes: usize, h: usize, w: usize, f: usize, dx: &mut [f32]) {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f32;
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * inv;
                for dy_ in 0..f {
                    let row = (oy * f + dy_) * w + ox * f;
                    for dx_ in 0..f {
                        dst[row + dx_] += g;
                    }
                }
            }
        }
    }
}

pub fn upsample_nearest_forward(x: &[f32], planes: usize, h: usize, w: usize, f: usize, out: &mut [f32]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / f) * w + (ox / f)];
            }
        }
    }
}

pub fn upsample_nearest_backward(dy: &[f32], planes: usize, h: usize, w: usize, f: usize, dx: &mut [f32]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / f) * w + (ox / f)] += src[oy * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_ref(x: &[f32], w_: &[f32], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; cout * h * w];
        for co in 0..cout {
            for oy in 0..h as isize {
                for ox in 0..w as isize {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        for ky in -1isize..=1 {
                            for kx in -1isize..=1 {
                                let (iy, ix) = (oy + ky, ox + kx);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = w_[co * cin * 9 + ci * 9 + ((ky + 1) * 3 + kx + 1) as usize];
                                acc += wv * x[ci * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[co * h * w + (oy as usize) * w + ox as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_loops() {
        let (cin, cout, h, w) = (2, 3, 5, 4);
        let x: Vec<f32> = (0..cin * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let wt: Vec<f32> = (0..cout * cin * 9).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut out = vec![0.0f32; cout * h * w];
        conv3x3_forward(&x, &wt, 1, cin, cout, h, w, &mut out);
        let want = conv_ref(&x, &wt, cin, cout, h, w);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn pool_then_backward_is_uniform() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut out = vec![0.0f32; 4];
        avg_pool2_forward(&x, 1, 4, 4, 2, &mut out);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        let mut dx = vec![0.0f32; 16];
        avg_pool2_backward(&[1.0, 1.0, 1.0, 1.0], 1, 4, 4, 2, &mut dx);
        assert!(dx.iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }
}

//! Convolution and transposed convolution on NCHW batches via im2col + GEMM.
//!
//! Every output element is produced by a fixed sequence of multiply-adds over
//! its own input window, so results do not depend on values outside that
//! window and are reproducible bit-for-bit.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Geometry of a sliding window over an image of `channels x height x width`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Number of window positions along each axis.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Window {
    pub fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let grid_h = (height + 2 * padding - kernel) / stride + 1;
        let grid_w = (width + 2 * padding - kernel) / stride + 1;
        Window { channels, height, width, kernel, stride, padding, grid_h, grid_w }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Unfolds `image` (one `channels x height x width` block) into a
    /// `(channels * k * k) x (grid_h * grid_w)` matrix.
    fn im2col(&self, image: &[f32]) -> Array2<f32> {
        let mut cols = Array2::<f32>::zeros((self.rows(), self.cols()));
        let out = cols.as_slice_mut().expect("standard layout");
        let n = self.cols();
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut out[((c * k + ky) * k + kx) * n..][..n];
                    for gy in 0..self.grid_h {
                        let y = (gy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let src = &plane[y as usize * self.width..][..self.width];
                        let dst = &mut row[gy * self.grid_w..][..self.grid_w];
                        for (gx, d) in dst.iter_mut().enumerate() {
                            let x = (gx * self.stride + kx) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                *d = src[x as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Window::im2col`]: scatters columns back, summing overlaps.
    fn col2im(&self, cols: ArrayView2<f32>, image: &mut [f32]) {
        let n = self.cols();
        let k = self.kernel;
        let cols = cols.as_standard_layout();
        let src_all = cols.as_slice().expect("standard layout");
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &src_all[((c * k + ky) * k + kx) * n..][..n];
                    for gy in 0..self.grid_h {
                        let y = (gy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..][..self.width];
                        let src = &row[gy * self.grid_w..][..self.grid_w];
                        for (gx, v) in src.iter().enumerate() {
                            let x = (gx * self.stride + kx) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn image_slice<'a>(x: &'a ArrayView4<f32>, n: usize) -> std::borrow::Cow<'a, [f32]> {
    let view = x.index_axis(Axis(0), n);
    match view.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(view.iter().copied().collect()),
    }
}

fn weight_matrix<'a>(w: &ArrayView4<'a, f32>) -> ArrayView2<'a, f32> {
    let (a, b, c, d) = w.dim();
    (*w).into_shape_with_order((a, b * c * d)).expect("weights are contiguous")
}

/// Forward convolution. `weight` is `[out, in, k, k]`.
pub(crate) fn conv2d(
    x: ArrayView4<f32>,
    weight: ArrayView4<f32>,
    bias: &Array1<f32>,
    stride: usize,
    padding: usize,
) -> Array4<f32> {
    let (batch, cin, h, w) = x.dim();
    let (cout, _, k, _) = weight.dim();
    let win = Window::conv(cin, h, w, k, stride, padding);
    let wm = weight_matrix(&weight);
    let mut out = Array4::<f32>::zeros((batch, cout, win.grid_h, win.grid_w));
    for n in 0..batch {
        let img = image_slice(&x, n);
        let cols = win.im2col(&img);
        let mut o = out
            .index_axis_mut(Axis(0), n)
            .into_shape_with_order((cout, win.cols()))
            .expect("contiguous");
        for (mut row, &b) in o.outer_iter_mut().zip(bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(1.0, &wm, &cols, 1.0, &mut o);
    }
    out
}

/// Gradients of a convolution given the output gradient `dy`.
/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward(
    x: ArrayView4<f32>,
    weight: ArrayView4<f32>,
    dy: ArrayView4<f32>,
    stride: usize,
    padding: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (batch, cin, h, w) = x.dim();
    let (cout, _, k, _) = weight.dim();
    let win = Window::conv(cin, h, w, k, stride, padding);
    let wm = weight_matrix(&weight);
    let mut dx = Array4::<f32>::zeros((batch, cin, h, w));
    let mut dw = Array2::<f32>::zeros((cout, win.rows()));
    let mut db = Array1::<f32>::zeros(cout);
    let mut dcols = Array2::<f32>::zeros((win.rows(), win.cols()));
    for n in 0..batch {
        let img = image_slice(&x, n);
        let cols = win.im2col(&img);
        let g = dy.index_axis(Axis(0), n);
        let g = g.to_shape((cout, win.cols())).expect("reshape");
        for (d, row) in db.iter_mut().zip(g.outer_iter()) {
            *d += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut dw);
        general_mat_mul(1.0, &wm.t(), &g, 0.0, &mut dcols);
        let mut dxn = dx.index_axis_mut(Axis(0), n);
        win.col2im(dcols.view(), dxn.as_slice_mut().expect("contiguous"));
    }
    let dw = dw.into_shape_with_order((cout, cin, k, k)).expect("reshape");
    (dx, dw, db)
}

/// Output extent of a transposed convolution along one axis.
pub(crate) fn tconv_extent(input: usize, kernel: usize, stride: usize, padding: usize, output_padding: usize) -> usize {
    (input - 1) * stride + kernel + output_padding - 2 * padding
}

/// Forward transposed convolution. `weight` is `[in, out, k, k]`.
pub(crate) fn tconv2d(
    x: ArrayView4<f32>,
    weight: ArrayView4<f32>,
    bias: &Array1<f32>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Array4<f32> {
    let (batch, cin, h, w) = x.dim();
    let (_, cout, k, _) = weight.dim();
    let ho = tconv_extent(h, k, stride, padding, output_padding);
    let wo = tconv_extent(w, k, stride, padding, output_padding);
    let win = Window::conv(cout, ho, wo, k, stride, padding);
    debug_assert_eq!((win.grid_h, win.grid_w), (h, w));
    let wm = weight_matrix(&weight);
    let mut out = Array4::<f32>::zeros((batch, cout, ho, wo));
    let mut cols = Array2::<f32>::zeros((win.rows(), h * w));
    for n in 0..batch {
        let img = x.index_axis(Axis(0), n);
        let img = img.to_shape((cin, h * w)).expect("reshape");
        general_mat_mul(1.0, &wm.t(), &img, 0.0, &mut cols);
        let mut o = out.index_axis_mut(Axis(0), n);
        let slice = o.as_slice_mut().expect("contiguous");
        win.col2im(cols.view(), slice);
        for (c, &b) in bias.iter().enumerate() {
            for v in &mut slice[c * ho * wo..(c + 1) * ho * wo] {
                *v += b;
            }
        }
    }
    out
}

/// Gradients of a transposed convolution. Returns `(dx, dweight, dbias)`.
pub(crate) fn tconv2d_backward(
    x: ArrayView4<f32>,
    weight: ArrayView4<f32>,
    dy: ArrayView4<f32>,
    stride: usize,
    padding: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (batch, cin, h, w) = x.dim();
    let (_, cout, k, _) = weight.dim();
    let (_, _, ho, wo) = dy.dim();
    let win = Window::conv(cout, ho, wo, k, stride, padding);
    let wm = weight_matrix(&weight);
    let mut dx = Array4::<f32>::zeros((batch, cin, h, w));
    let mut dw = Array2::<f32>::zeros((cin, win.rows()));
    let mut db = Array1::<f32>::zeros(cout);
    for n in 0..batch {
        let g = image_slice(&dy, n);
        for (c, d) in db.iter_mut().enumerate() {
            *d += g[c * ho * wo..(c + 1) * ho * wo].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        let dcols = win.im2col(&g);
        let img = x.index_axis(Axis(0), n);
        let img = img.to_shape((cin, h * w)).expect("reshape");
        general_mat_mul(1.0, &img, &dcols.t(), 1.0, &mut dw);
        let mut dxn = dx
            .index_axis_mut(Axis(0), n)
            .into_shape_with_order((cin, h * w))
            .expect("contiguous");
        general_mat_mul(1.0, &wm, &dcols, 0.0, &mut dxn);
    }
    let dw = dw.into_shape_with_order((cin, cout, k, k)).expect("reshape");
    (dx, dw, db)
}

/// Channel-wise concatenation of NCHW tensors with equal batch and spatial size.
pub(crate) fn concat_channels(parts: &[ArrayView4<f32>]) -> Array4<f32> {
    let (n, _, h, w) = parts[0].dim();
    let c: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let mut at = 0;
    for p in parts {
        let pc = p.dim().1;
        out.slice_mut(s![.., at..at + pc, .., ..]).assign(p);
        at += pc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    // Direct loop definitions, independent of im2col.
    fn naive_conv(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, s: usize, p: usize) -> Array4<f32> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Array4::<f32>::zeros((n, cout, ho, wo));
        for b_ in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = (oy * s + ky) as isize - p as isize;
                                    let xx = (ox * s + kx) as isize - p as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += (x[[b_, ci, y as usize, xx as usize]] * w[[co, ci, ky, kx]]) as f64;
                                    }
                                }
                            }
                        }
                        out[[b_, co, oy, ox]] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn naive_tconv(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, s: usize, p: usize, op: usize) -> Array4<f32> {
        let (n, cin, h, wd) = x.dim();
        let (_, cout, k, _) = w.dim();
        let ho = tconv_extent(h, k, s, p, op);
        let wo = tconv_extent(wd, k, s, p, op);
        let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
        for b_ in 0..n {
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..wd {
                        for co in 0..cout {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = (iy * s + ky) as isize - p as isize;
                                    let xx = (ix * s + kx) as isize - p as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < ho && (xx as usize) < wo {
                                        out[[b_, co, y as usize, xx as usize]] +=
                                            (x[[b_, ci, iy, ix]] * w[[ci, co, ky, kx]]) as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for b_ in 0..n {
            for co in 0..cout {
                out.slice_mut(s![b_, co, .., ..]).mapv_inplace(|v| v + b[co] as f64);
            }
        }
        out.mapv(|v| v as f32)
    }

    fn close(a: &Array4<f32>, b: &Array4<f32>, tol: f32) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (5, 1, 0)] {
            let x = random4(&mut rng, (2, 3, 9, 8));
            let w = random4(&mut rng, (4, 3, k, k));
            let b = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            close(&conv2d(x.view(), w.view(), &b, s, p), &naive_conv(&x, &w, &b, s, p), 1e-4);
        }
    }

    #[test]
    fn tconv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p, op) in &[(3, 1, 1, 0), (3, 2, 1, 1), (4, 2, 1, 0)] {
            let x = random4(&mut rng, (2, 3, 5, 6));
            let w = random4(&mut rng, (3, 4, k, k));
            let b = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
            let got = tconv2d(x.view(), w.view(), &b, s, p, op);
            close(&got, &naive_tconv(&x, &w, &b, s, p, op), 1e-4);
        }
        // stride 2 doubles the resolution in both configurations
        assert_eq!(tconv_extent(112, 3, 2, 1, 1), 224);
        assert_eq!(tconv_extent(112, 4, 2, 1, 0), 224);
    }

    type Forward<'a> = dyn Fn(&Array4<f32>, &Array4<f32>) -> Array4<f32> + 'a;

    // <dy, f(x)> is linear in x and w, so its gradient is checked by
    // evaluating the forward pass at perturbed points.
    fn check_grads(
        fwd: &Forward<'_>,
        x: &Array4<f32>,
        w: &Array4<f32>,
        dy: &Array4<f32>,
        dx: &Array4<f32>,
        dw: &Array4<f32>,
    ) {
        let dot = |a: &Array4<f32>| a.iter().zip(dy.iter()).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>();
        let h = 1e-2f32;
        for idx in [0usize, 7, x.len() / 2, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (dot(&fwd(&xp, w)) - dot(&fwd(&xm, w))) / (2.0 * h as f64);
            let an = dx.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dx[{idx}]: {fd} vs {an}");
        }
        for idx in [0usize, 3, w.len() / 2, w.len() - 1] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (dot(&fwd(x, &wp)) - dot(&fwd(x, &wm))) / (2.0 * h as f64);
            let an = dw.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dw[{idx}]: {fd} vs {an}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random4(&mut rng, (2, 3, 7, 7));
        let w = random4(&mut rng, (2, 3, 3, 3));
        let b = Array1::zeros(2);
        let y = conv2d(x.view(), w.view(), &b, 2, 1);
        let dy = random4(&mut rng, y.dim());
        let (dx, dw, db) = conv2d_backward(x.view(), w.view(), dy.view(), 2, 1);
        let f = |x: &Array4<f32>, w: &Array4<f32>| conv2d(x.view(), w.view(), &b, 2, 1);
        check_grads(&f, &x, &w, &dy, &dx, &dw);
        let expect_db: Vec<f32> = (0..2).map(|c| dy.slice(s![.., c, .., ..]).sum()).collect();
        for (a, e) in db.iter().zip(expect_db) {
            assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random4(&mut rng, (2, 3, 4, 5));
        let w = random4(&mut rng, (3, 2, 3, 3));
        let b = Array1::zeros(2);
        let y = tconv2d(x.view(), w.view(), &b, 2, 1, 1);
        let dy = random4(&mut rng, y.dim());
        let (dx, dw, _) = tconv2d_backward(x.view(), w.view(), dy.view(), 2, 1);
        let f = |x: &Array4<f32>, w: &Array4<f32>| tconv2d(x.view(), w.view(), &b, 2, 1, 1);
        check_grads(&f, &x, &w, &dy, &dx, &dw);
    }
}

//! Dense convolution kernels on raw buffers.
//!
//! Convolutions lower to GEMM through im2col: each output position becomes a
//! column of the patch matrix, rows ordered `(c, kz, ky, kx)`. Transposed
//! convolution is the exact adjoint, so it reuses the same geometry with the
//! roles of input and output swapped.

use std::borrow::Cow;

/// `C[m×n] = op(A)[m×k] · op(B)[k×n] + beta·C`, all row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m×k, k×n and m×n elements (asserted
    // above), and the strides address them in bounds for either layout.
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

/// Geometry of a forward convolution `[ci, in] → [co, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Patch matrix `[ci·K, P]` of one sample `[ci, D, H, W]`.
fn im2col<'a>(x: &'a [f64], g: &ConvGeom) -> Cow<'a, [f64]> {
    if g.is_pointwise() {
        return Cow::Borrowed(x);
    }
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = g.out_len();
    let mut col = vec![0.0; g.ci * g.kvol() * p];
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let src = &xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let out = &mut dst[(oz * oh + oy) * ow..][..ow];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    *o = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(col)
}

/// Adds a patch matrix back onto a sample buffer (adjoint of [`im2col`]).
fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    if g.is_pointwise() {
        for (a, b) in x.iter_mut().zip(col) {
            *a += b;
        }
        return;
    }
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let s = &src[(oz * oh + oy) * ow..][..ow];
                            for (ox, v) in s.iter().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut [f64], b: &[f64], p: usize) {
    for (c, &bc) in b.iter().enumerate() {
        y[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bc);
    }
}

fn bias_grad(dy: &[f64], db: &mut [f64], p: usize) {
    for (c, d) in db.iter_mut().enumerate() {
        *d += dy[c * p..(c + 1) * p].iter().sum::<f64>();
    }
}

/// Cross-correlation. `w` is `[co, ci, kd, kh, kw]`.
pub fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, g: &ConvGeom) -> Vec<f64> {
    let (pin, pout, k) = (g.in_len(), g.out_len(), g.ci * g.kvol());
    let mut y = vec![0.0; n * g.co * pout];
    for s in 0..n {
        let col = im2col(&x[s * g.ci * pin..(s + 1) * g.ci * pin], g);
        let ys = &mut y[s * g.co * pout..(s + 1) * g.co * pout];
        gemm(g.co, k, pout, w, false, &col, false, 0.0, ys);
        if let Some(b) = b {
            add_bias(ys, b, pout);
        }
    }
    y
}

/// Gradients of [`conv_forward`]; accumulates into whichever outputs are given.
pub fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (pin, pout, k) = (g.in_len(), g.out_len(), g.ci * g.kvol());
    let mut dcol = vec![0.0; if dx.is_some() { k * pout } else { 0 }];
    for s in 0..n {
        let dys = &dy[s * g.co * pout..(s + 1) * g.co * pout];
        if let Some(dw) = dw.as_deref_mut() {
            let col = im2col(&x[s * g.ci * pin..(s + 1) * g.ci * pin], g);
            gemm(g.co, pout, k, dys, false, &col, true, 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            bias_grad(dys, db, pout);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(k, g.co, pout, w, true, dys, false, 0.0, &mut dcol);
            col2im(&dcol, g, &mut dx[s * g.ci * pin..(s + 1) * g.ci * pin]);
        }
    }
}

/// Transposed convolution, the adjoint of [`conv_forward`] under `g`.
///
/// `x` is `[n, co, g.output]`, `w` is `[co, ci, kd, kh, kw]` (the transposed
/// layer's `[in_ch, out_ch, ...]`), and the result is `[n, ci, g.input]`.
pub fn convt_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, g: &ConvGeom) -> Vec<f64> {
    let (pin, pout, k) = (g.in_len(), g.out_len(), g.ci * g.kvol());
    let mut y = vec![0.0; n * g.ci * pin];
    let mut col = vec![0.0; k * pout];
    for s in 0..n {
        let xs = &x[s * g.co * pout..(s + 1) * g.co * pout];
        gemm(k, g.co, pout, w, true, xs, false, 0.0, &mut col);
        let ys = &mut y[s * g.ci * pin..(s + 1) * g.ci * pin];
        col2im(&col, g, ys);
        if let Some(b) = b {
            add_bias(ys, b, pin);
        }
    }
    y
}

/// Gradients of [`convt_forward`].
pub fn convt_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (pin, pout, k) = (g.in_len(), g.out_len(), g.ci * g.kvol());
    for s in 0..n {
        let dys = &dy[s * g.ci * pin..(s + 1) * g.ci * pin];
        if let Some(db) = db.as_deref_mut() {
            bias_grad(dys, db, pin);
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        let col = im2col(dys, g);
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * g.co * pout..(s + 1) * g.co * pout];
            gemm(g.co, k, pout, w, false, &col, false, 1.0, dxs);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[s * g.co * pout..(s + 1) * g.co * pout];
            gemm(g.co, pout, k, xs, false, &col, true, 1.0, dw);
        }
    }
}

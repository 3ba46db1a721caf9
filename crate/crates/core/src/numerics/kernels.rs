//! Raw loops behind the tape ops. Everything here works on flat row-major
//! slices and never allocates more than one scratch buffer per call.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { wide::matmul_acc(a, b, c, m, k, n) };
        return;
    }
    matmul_acc_body(a, b, c, m, k, n)
}

#[inline(always)]
fn matmul_acc_body(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { wide::matmul_tn_acc(a, b, c, k, m, n) };
        return;
    }
    matmul_tn_acc_body(a, b, c, k, m, n)
}

#[inline(always)]
fn matmul_tn_acc_body(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { wide::matmul_nt_acc(a, b, c, m, k, n) };
        return;
    }
    matmul_nt_acc_body(a, b, c, m, k, n)
}

#[inline(always)]
fn matmul_nt_acc_body(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Eight independent lanes in a fixed order: vectorizes, and the result
    // is reproducible.
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// The same loops compiled with AVX2 enabled. Only the vector width
/// changes; no operation is fused or reordered, so results are bitwise
/// identical to the portable path.
#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn matmul_acc(
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        m: usize,
        k: usize,
        n: usize,
    ) {
        super::matmul_acc_body(a, b, c, m, k, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn matmul_tn_acc(
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        k: usize,
        m: usize,
        n: usize,
    ) {
        super::matmul_tn_acc_body(a, b, c, k, m, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn matmul_nt_acc(
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        m: usize,
        k: usize,
        n: usize,
    ) {
        super::matmul_nt_acc_body(a, b, c, m, k, n)
    }
}

/// Geometry of a 3×3, stride-1, zero-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn taps(&self) -> usize {
        self.c_in * 9
    }
}

/// Unfolds one `[c_in, h, w]` sample into a `[c_in·9, h·w]` patch matrix.
fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let hw = g.hw();
    for ci in 0..g.c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto a `[c_in, h, w]` sample.
fn col2im_acc(cols: &[f64], g: &ConvGeom, grad_in: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let hw = g.hw();
    for ci in 0..g.c_in {
        let plane = &mut grad_in[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeom,
) -> Vec<f64> {
    let hw = g.hw();
    let taps = g.taps();
    let mut out = vec![0.0; g.batch * g.c_out * hw];
    let mut cols = vec![0.0; taps * hw];
    for b in 0..g.batch {
        im2col(&input[b * g.c_in * hw..(b + 1) * g.c_in * hw], g, &mut cols);
        let o = &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        for co in 0..g.c_out {
            o[co * hw..(co + 1) * hw].fill(bias[co]);
        }
        matmul_acc(weight, &cols, o, g.c_out, taps, hw);
    }
    out
}

/// Accumulates gradients of a 3×3 convolution. Any of the three outputs may
/// be skipped by passing `None`.
pub(crate) fn conv3x3_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    mut grad_in: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let hw = g.hw();
    let taps = g.taps();
    let mut cols = vec![0.0; taps * hw];
    let mut cols_t = if grad_w.is_some() {
        vec![0.0; taps * hw]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let go = &grad_out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        if let Some(gb) = grad_b.as_deref_mut() {
            for co in 0..g.c_out {
                gb[co] += go[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(&input[b * g.c_in * hw..(b + 1) * g.c_in * hw], g, &mut cols);
            for t in 0..taps {
                for p in 0..hw {
                    cols_t[p * taps + t] = cols[t * hw + p];
                }
            }
            matmul_acc(go, &cols_t, gw, g.c_out, hw, taps);
        }
        if let Some(gi) = grad_in.as_deref_mut() {
            cols.fill(0.0);
            matmul_tn_acc(weight, go, &mut cols, g.c_out, taps, hw);
            col2im_acc(&cols, g, &mut gi[b * g.c_in * hw..(b + 1) * g.c_in * hw]);
        }
    }
}

/// Mean and population standard deviation of a slice (the latter unfloored).
pub(crate) fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

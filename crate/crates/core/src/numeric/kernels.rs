//! Forward and backward kernels for the graph primitives.
//!
//! Every reduction runs in a fixed order so results are bit-stable across
//! runs and independent of batch composition: each sample of a batch is
//! processed by the same sequence of floating-point operations it would see
//! alone.

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Geometry of a stride-1 2-D convolution over one sample.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = y as isize + ky as isize - g.pad as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (xo, v) in line.iter_mut().enumerate() {
                        let ix = xo as isize + kx as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = y as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let ix = xo as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

/// C[m,n] = alpha * A[m,k] B[k,n] + beta * C, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the given
    // dimensions and strides; callers construct both from the same geometry.
    unsafe {
        matrixmultiply::sgemm(
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

pub fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * cols;
    let mut out = vec![0.0f32; batch * out_sz];
    let mut col = vec![0.0f32; rows * cols];
    for b in 0..batch {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut col);
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        gemm(
            g.out_ch,
            rows,
            cols,
            weight,
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            0.0,
            ob,
        );
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ob[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Vec<f32>,
    pub dweight: Vec<f32>,
    pub dbias: Vec<f32>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
) -> ConvGrads {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * cols;
    let mut dx = vec![0.0f32; batch * in_sz];
    let mut dweight = vec![0.0f32; weight.len()];
    let mut dbias = vec![0.0f32; g.out_ch];
    let mut col = vec![0.0f32; rows * cols];
    let mut dcol = vec![0.0f32; rows * cols];
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let db = &dout[b * out_sz..(b + 1) * out_sz];
        im2col(g, xb, &mut col);
        // dW += dOut · colᵀ
        gemm(
            g.out_ch,
            cols,
            rows,
            db,
            (cols as isize, 1),
            &col,
            (1, cols as isize),
            1.0,
            &mut dweight,
        );
        // dcol = Wᵀ · dOut
        gemm(
            rows,
            g.out_ch,
            cols,
            weight,
            (1, rows as isize),
            db,
            (cols as isize, 1),
            0.0,
            &mut dcol,
        );
        col2im_add(g, &dcol, &mut dx[b * in_sz..(b + 1) * in_sz]);
        for o in 0..g.out_ch {
            let s: f32 = db[o * cols..(o + 1) * cols].iter().sum();
            dbias[o] += s;
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// Row-major `[m,k] x [k,n]`, summing over `k` in ascending order.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Returns (dA, dB) for `out = A·B`.
pub fn matmul_backward(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    dout: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut da = vec![0.0f32; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0f32;
            for j in 0..n {
                s += dout[i * n + j] * b[p * n + j];
            }
            da[i * k + p] = s;
        }
    }
    let mut db = vec![0.0f32; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &dout[i * n..(i + 1) * n];
            for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
    (da, db)
}

/// Largest group count ≤ `requested` that divides `channels`.
pub fn effective_groups(requested: usize, channels: usize) -> usize {
    let mut g = requested.clamp(1, channels.max(1));
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub struct NormShape {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub groups: usize,
}

pub fn group_norm_forward(s: &NormShape, x: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let cpg = s.channels / s.groups;
    let n = cpg * s.spatial;
    let mut out = vec![0.0f32; x.len()];
    for b in 0..s.batch {
        for g in 0..s.groups {
            let start = (b * s.channels + g * cpg) * s.spatial;
            let xs = &x[start..start + n];
            let (mean, rstd) = moments(xs);
            for (j, &v) in xs.iter().enumerate() {
                let c = g * cpg + j / s.spatial;
                let xhat = (v as f64 - mean) * rstd;
                out[start + j] = (xhat * gamma[c] as f64 + beta[c] as f64) as f32;
            }
        }
    }
    out
}

fn moments(xs: &[f32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + GROUP_NORM_EPS).sqrt())
}

/// Returns (dx, dgamma, dbeta).
pub fn group_norm_backward(
    s: &NormShape,
    x: &[f32],
    gamma: &[f32],
    dout: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = s.channels / s.groups;
    let n = cpg * s.spatial;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f64; s.channels];
    let mut dbeta = vec![0.0f64; s.channels];
    let mut xhat = vec![0.0f64; n];
    let mut dxhat = vec![0.0f64; n];
    for b in 0..s.batch {
        for g in 0..s.groups {
            let start = (b * s.channels + g * cpg) * s.spatial;
            let xs = &x[start..start + n];
            let dys = &dout[start..start + n];
            let (mean, rstd) = moments(xs);
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for j in 0..n {
                let c = g * cpg + j / s.spatial;
                xhat[j] = (xs[j] as f64 - mean) * rstd;
                let dy = dys[j] as f64;
                dgamma[c] += dy * xhat[j];
                dbeta[c] += dy;
                dxhat[j] = dy * gamma[c] as f64;
                sum_d += dxhat[j];
                sum_dx += dxhat[j] * xhat[j];
            }
            let nf = n as f64;
            for j in 0..n {
                dx[start + j] = (rstd * (dxhat[j] - sum_d / nf - xhat[j] * sum_dx / nf)) as f32;
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn upsample2x(planes: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                out[(p * oh + y) * ow + xo] = x[(p * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(planes: usize, h: usize, w: usize, dout: &[f32]) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xi in 0..w {
                let base = (p * oh + 2 * y) * ow + 2 * xi;
                dx[(p * h + y) * w + xi] =
                    dout[base] + dout[base + 1] + dout[base + ow] + dout[base + ow + 1];
            }
        }
    }
    dx
}

/// 2x2 average pool; `h` and `w` are the (even) input sizes.
pub fn avgpool2x(planes: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                let base = (p * h + 2 * y) * w + 2 * xo;
                out[(p * oh + y) * ow + xo] =
                    0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2x_backward(planes: usize, h: usize, w: usize, dout: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                let g = 0.25 * dout[(p * oh + y) * ow + xo];
                let base = (p * h + 2 * y) * w + 2 * xo;
                dx[base] = g;
                dx[base + 1] = g;
                dx[base + w] = g;
                dx[base + w + 1] = g;
            }
        }
    }
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f32) -> f32 {
    v * sigmoid(v)
}

pub fn silu_grad(v: f32) -> f32 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Sinusoidal embedding rows for `steps`: interleaved (sin, cos) pairs with
/// wavelengths spaced geometrically from 1 to 10⁴.
pub fn sinusoidal(steps: &[u32], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; steps.len() * dim];
    for (r, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = 10_000f64.powf(-exponent);
            let angle = t as f64 * freq;
            out[r * dim + 2 * i] = angle.sin() as f32;
            out[r * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    out
}

/// Row-wise softmax, computed in f64.
pub fn softmax_rows(rows: usize, cols: usize, logits: &[f32]) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut z = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v as f64 - max).exp();
            out[r * cols + c] = e;
            z += e;
        }
        out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= z);
    }
    out
}

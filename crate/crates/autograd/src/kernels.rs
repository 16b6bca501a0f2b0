//! Raw slice kernels behind the graph ops.

use crate::error::{Result, TensorError};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// Matrices are row-major; `trans_*` selects the transposed view of the stored
/// buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: bounds asserted above; strides describe row-major m x k, k x n and
    // m x n views of the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial stride and zero padding of a convolution. The temporal axis always
/// uses stride 1 with replicate padding at the end of the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
    };

    /// Stride 1 with `k / 2` padding, preserving spatial size for odd `k`.
    pub fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding }
    }
}

/// Geometry of `x [T,H,W,Cin] * w [kt,kh,kw,Cin,Cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 5 {
            return Err(TensorError::shape(
                "conv",
                format!("expected x [T,H,W,C] and w [kt,kh,kw,Cin,Cout], got {x:?} and {w:?}"),
            ));
        }
        let (t, h, wd, cin) = (x[0], x[1], x[2], x[3]);
        let (kt, kh, kw, wcin, cout) = (w[0], w[1], w[2], w[3], w[4]);
        if wcin != cin {
            return Err(TensorError::shape(
                "conv",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if spec.stride == 0 || kt == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::shape("conv", "zero stride or kernel extent"));
        }
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(TensorError::shape(
                "conv",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        Ok(ConvGeom {
            t,
            h,
            w: wd,
            cin,
            kt,
            kh,
            kw,
            cout,
            stride: spec.stride,
            pad: spec.padding,
            ho,
            wo,
        })
    }

    pub fn rows(&self) -> usize {
        self.t * self.ho * self.wo
    }

    pub fn kdim(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.t, self.ho, self.wo, self.cout]
    }

    /// A 1x1x1 stride-1 kernel reads the input directly as its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kt == 1 && self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.rows() * self.kdim() * self.cout) as u64
    }

    /// Visits every (row, column-block offset, input offset) triple of the
    /// column matrix that reads a real (non-padding) input pixel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let kdim = self.kdim();
        for t in 0..self.t {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (t * self.ho + oy) * self.wo + ox;
                    for dt in 0..self.kt {
                        let ts = (t + dt).min(self.t - 1);
                        for ky in 0..self.kh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let col = ((dt * self.kh + ky) * self.kw + kx) * self.cin;
                                let src = ((ts * self.h + iy as usize) * self.w + ix as usize)
                                    * self.cin;
                                f(row * kdim + col, src, row);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.kdim()];
        let cin = self.cin;
        self.for_each_tap(|dst, src, _| {
            cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
        });
        cols
    }

    pub fn col2im(&self, dcols: &[f64], dx: &mut [f64]) {
        let cin = self.cin;
        self.for_each_tap(|dst, src, _| {
            for (d, s) in dx[src..src + cin].iter_mut().zip(&dcols[dst..dst + cin]) {
                *d += s;
            }
        });
    }
}

/// Depthwise same-padded convolution of `x [B,H,W,C]` with `w [k,k,C]`.
pub fn depthwise_forward(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let [b, h, wd, c] = dims;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let o = ((bi * h + y) * wd + xx) * c;
                let acc = &mut out[o..o + c];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * wd + ix as usize) * c;
                        let wk = &w[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for ((a, &xv), &wv) in acc.iter_mut().zip(&x[src..src + c]).zip(wk) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise_forward`]; `dx`/`dw` are accumulated into when given.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f64],
    dims: [usize; 4],
    w: &[f64],
    k: usize,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let [b, h, wd, c] = dims;
    let pad = (k / 2) as isize;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let o = ((bi * h + y) * wd + xx) * c;
                let g = &dout[o..o + c];
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * wd + ix as usize) * c;
                        let widx = (ky * k + kx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for ch in 0..c {
                                dx[src + ch] += g[ch] * w[widx + ch];
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for ch in 0..c {
                                dw[widx + ch] += g[ch] * x[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source taps of half-pixel bilinear upsampling along one axis:
/// `(lo, hi, weight_of_hi)` per output coordinate.
pub fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out = input * factor;
    let scale = 1.0 / factor as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Number of candidate key sites per query in a local cross-frame window.
pub fn window_sites(frames: usize, radius: usize) -> usize {
    frames * (2 * radius + 1) * (2 * radius + 1)
}

/// Visits the candidate sites of query `(y, x)` in a fixed order, passing the
/// site slot and, for in-bounds sites, the flat pixel index into `[T,H,W]`.
pub fn for_each_site(
    frames: usize,
    h: usize,
    w: usize,
    radius: usize,
    y: usize,
    x: usize,
    mut f: impl FnMut(usize, Option<usize>),
) {
    let r = radius as isize;
    let mut slot = 0;
    for t in 0..frames {
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                let site = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    Some((t * h + yy as usize) * w + xx as usize)
                } else {
                    None
                };
                f(slot, site);
                slot += 1;
            }
        }
    }
}

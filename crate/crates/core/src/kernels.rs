//! Dense numeric kernels behind the graph ops.
//!
//! Everything here is single-threaded and runs in a fixed order, so repeated
//! calls on equal inputs are bit-identical.

/// `c = op(a) · op(b) + beta · c`, all row-major. `op(a)` is `m × k`,
/// `op(b)` is `k × n`; `ta`/`tb` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches under these strides.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col(x: &[f64], geo: &Conv2dGeometry, col: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let positions = ho * wo;
    let mut row = 0;
    for c in 0..geo.in_channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oi in 0..ho {
                    let ii = (oi * geo.stride + ki) as isize - geo.padding as isize;
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= geo.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * geo.width..(ii as usize + 1) * geo.width];
                    for (oj, out) in line.iter_mut().enumerate() {
                        let jj = (oj * geo.stride + kj) as isize - geo.padding as isize;
                        *out = if jj < 0 || jj >= geo.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(col: &[f64], geo: &Conv2dGeometry, dx: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let positions = ho * wo;
    let mut row = 0;
    for c in 0..geo.in_channels {
        let plane = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let src = &col[row * positions..(row + 1) * positions];
                for oi in 0..ho {
                    let ii = (oi * geo.stride + ki) as isize - geo.padding as isize;
                    if ii < 0 || ii >= geo.height as isize {
                        continue;
                    }
                    let base = ii as usize * geo.width;
                    for oj in 0..wo {
                        let jj = (oj * geo.stride + kj) as isize - geo.padding as isize;
                        if jj >= 0 && jj < geo.width as isize {
                            plane[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched cross-correlation: `x` is `[B, Cin, H, W]`, `w` is
/// `[Cout, Cin, kh, kw]`, `bias` is `[Cout]`; returns `[B, Cout, Ho, Wo]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    geo: &Conv2dGeometry,
) -> Vec<f64> {
    let in_len = geo.in_channels * geo.height * geo.width;
    let positions = geo.positions();
    let out_len = geo.out_channels * positions;
    let mut out = vec![0.0; batch * out_len];
    let mut col = vec![0.0; geo.patch_len() * positions];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], geo, &mut col);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (o, chunk) in dst.chunks_mut(positions).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(
            geo.out_channels,
            geo.patch_len(),
            positions,
            w,
            false,
            &col,
            false,
            dst,
            1.0,
        );
    }
    out
}

/// Accumulates conv2d gradients. `dx` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    batch: usize,
    geo: &Conv2dGeometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let in_len = geo.in_channels * geo.height * geo.width;
    let positions = geo.positions();
    let out_len = geo.out_channels * positions;
    let k = geo.patch_len();
    let mut col = vec![0.0; k * positions];
    for b in 0..batch {
        let g = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(db) = dbias.as_deref_mut() {
            for (o, chunk) in g.chunks(positions).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], geo, &mut col);
            gemm(geo.out_channels, positions, k, g, false, &col, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(k, geo.out_channels, positions, w, true, g, false, &mut col, 0.0);
            col2im_add(&col, geo, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Max pooling over `[planes, H, W]`. Returns values and the flat input
/// index of each window's maximum (first in row-major order on ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let ho = (height - kernel) / stride + 1;
    let wo = (width - kernel) / stride + 1;
    let mut values = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * height * width;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oi * stride * width + oj * stride;
                for ki in 0..kernel {
                    let row = base + (oi * stride + ki) * width + oj * stride;
                    for (kj, &v) in x[row..row + kernel].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (values, argmax)
}

/// One axis of half-pixel bilinear resampling: for each output index, the
/// two source taps and the weight of the upper tap.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    planes: usize,
    rows: &AxisTaps,
    cols: &AxisTaps,
    in_w: usize,
    in_h: usize,
) -> Vec<f64> {
    let (out_h, out_w) = (rows.lo.len(), cols.lo.len());
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        for i in 0..out_h {
            let (r0, r1, fr) = (rows.lo[i], rows.hi[i], rows.frac[i]);
            for j in 0..out_w {
                let (c0, c1, fc) = (cols.lo[j], cols.hi[j], cols.frac[j]);
                let top = plane[r0 * in_w + c0] * (1.0 - fc) + plane[r0 * in_w + c1] * fc;
                let bottom = plane[r1 * in_w + c0] * (1.0 - fc) + plane[r1 * in_w + c1] * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad_out: &[f64],
    planes: usize,
    rows: &AxisTaps,
    cols: &AxisTaps,
    in_w: usize,
    in_h: usize,
    dx: &mut [f64],
) {
    let (out_h, out_w) = (rows.lo.len(), cols.lo.len());
    for p in 0..planes {
        let plane = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        let g = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for i in 0..out_h {
            let (r0, r1, fr) = (rows.lo[i], rows.hi[i], rows.frac[i]);
            for j in 0..out_w {
                let (c0, c1, fc) = (cols.lo[j], cols.hi[j], cols.frac[j]);
                let v = g[i * out_w + j];
                plane[r0 * in_w + c0] += v * (1.0 - fr) * (1.0 - fc);
                plane[r0 * in_w + c1] += v * (1.0 - fr) * fc;
                plane[r1 * in_w + c0] += v * fr * (1.0 - fc);
                plane[r1 * in_w + c1] += v * fr * fc;
            }
        }
    }
}

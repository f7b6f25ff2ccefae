//! Raw slice kernels shared by the forward and backward passes.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, gj) in c_row.iter_mut().zip(g_row) {
                *cj += aip * gj;
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each element of the permuted output (in row-major order), the linear
/// index of the source element.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    idx
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `ow` whose input column `ow*sw + kj - pad_left` lies in range.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        range_for(self.ow, self.sw, kj, self.pad_left, self.w)
    }

    fn row_range(&self, ki: usize) -> (usize, usize) {
        range_for(self.oh, self.sh, ki, self.pad_top, self.h)
    }
}

fn range_for(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad < len
    let limit = len + pad; // o*stride + k < len + pad
    let hi = if k >= limit { 0 } else { (limit - k - 1) / stride + 1 };
    (lo.min(out), hi.min(out))
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let o_base = (n * g.c_out + co) * g.oh * g.ow;
            for ci in 0..g.c_in {
                let i_base = (n * g.c_in + ci) * g.h * g.w;
                for ki in 0..g.kh {
                    let (r0, r1) = g.row_range(ki);
                    for kj in 0..g.kw {
                        let kv = kernel[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = g.col_range(kj);
                        for orow in r0..r1 {
                            let irow = orow * g.sh + ki - g.pad_top;
                            let o_row = o_base + orow * g.ow;
                            let i_row = i_base + irow * g.w;
                            for ocol in c0..c1 {
                                let icol = ocol * g.sw + kj - g.pad_left;
                                out[o_row + ocol] += kv * input[i_row + icol];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    if let Some(gi) = grad_in {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                let o_base = (n * g.c_out + co) * g.oh * g.ow;
                for ci in 0..g.c_in {
                    let i_base = (n * g.c_in + ci) * g.h * g.w;
                    for ki in 0..g.kh {
                        let (r0, r1) = g.row_range(ki);
                        for kj in 0..g.kw {
                            let kv = kernel[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                            if kv == 0.0 {
                                continue;
                            }
                            let (c0, c1) = g.col_range(kj);
                            for orow in r0..r1 {
                                let irow = orow * g.sh + ki - g.pad_top;
                                let o_row = o_base + orow * g.ow;
                                let i_row = i_base + irow * g.w;
                                for ocol in c0..c1 {
                                    let icol = ocol * g.sw + kj - g.pad_left;
                                    gi[i_row + icol] += kv * grad_out[o_row + ocol];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gk) = grad_kernel {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                let o_base = (n * g.c_out + co) * g.oh * g.ow;
                for ci in 0..g.c_in {
                    let i_base = (n * g.c_in + ci) * g.h * g.w;
                    for ki in 0..g.kh {
                        let (r0, r1) = g.row_range(ki);
                        for kj in 0..g.kw {
                            let (c0, c1) = g.col_range(kj);
                            let mut acc = 0.0;
                            for orow in r0..r1 {
                                let irow = orow * g.sh + ki - g.pad_top;
                                let o_row = o_base + orow * g.ow;
                                let i_row = i_base + irow * g.w;
                                for ocol in c0..c1 {
                                    let icol = ocol * g.sw + kj - g.pad_left;
                                    acc += input[i_row + icol] * grad_out[o_row + ocol];
                                }
                            }
                            gk[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }
}

//! Inner loops shared by forward and backward passes. All kernels accumulate
//! in a fixed order, so results are bit-reproducible.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators, combined pairwise.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    /// Source row/col for output position and kernel offset, `None` in padding.
    #[inline]
    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// im2col matrix of shape `[c_in·kh·kw, out_h·out_w]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = oh * ow;
        let mut m = vec![0.0; self.c_in * self.kh * self.kw * cols];
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut m[row * cols..(row + 1) * cols];
                    for oi in 0..oh {
                        let Some(si) = self.src(oi, ki, self.sh, self.ph, self.h) else {
                            continue;
                        };
                        for oj in 0..ow {
                            if let Some(sj) = self.src(oj, kj, self.sw, self.pw, self.w) {
                                dst[oi * ow + oj] = x[(c * self.h + si) * self.w + sj];
                            }
                        }
                    }
                }
            }
        }
        m
    }

    fn col2im(&self, m: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = oh * ow;
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &m[row * cols..(row + 1) * cols];
                    for oi in 0..oh {
                        let Some(si) = self.src(oi, ki, self.sh, self.ph, self.h) else {
                            continue;
                        };
                        for oj in 0..ow {
                            if let Some(sj) = self.src(oj, kj, self.sw, self.pw, self.w) {
                                dx[(c * self.h + si) * self.w + sj] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let cols = self.out_h() * self.out_w();
        let patches = self.im2col(x);
        let mut out = vec![0.0; self.c_out * cols];
        for (o, b) in bias.iter().enumerate() {
            out[o * cols..(o + 1) * cols].fill(*b);
        }
        let kdim = self.c_in * self.kh * self.kw;
        matmul_acc(weight, &patches, &mut out, self.c_out, kdim, cols);
        out
    }

    /// Accumulates input, weight and bias gradients for output gradient `dy`.
    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        dy: &[f64],
        dx: Option<&mut [f64]>,
        dw: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let cols = self.out_h() * self.out_w();
        let kdim = self.c_in * self.kh * self.kw;
        if let Some(db) = db {
            for (o, g) in db.iter_mut().enumerate() {
                *g += dy[o * cols..(o + 1) * cols].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw {
            let patches = self.im2col(x);
            matmul_nt_acc(dy, &patches, dw, self.c_out, cols, kdim);
        }
        if let Some(dx) = dx {
            let mut dpatches = vec![0.0; kdim * cols];
            matmul_tn_acc(weight, dy, &mut dpatches, self.c_out, kdim, cols);
            self.col2im(&dpatches, dx);
        }
    }
}

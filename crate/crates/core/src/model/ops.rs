//! Dense kernels: GEMM, 3x3 convolution via im2col, ReLU.

/// `c = a * b (+ c)`, where `a` is logically `m x k` and `b` is `k x n`.
///
/// `a_t`/`b_t` mean the operand is stored transposed (`k x m` / `n x k`),
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
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

/// Add `bias` to every row of an `rows x bias.len()` matrix.
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulate column sums of an `rows x cols` matrix into `out`.
pub fn col_sums(x: &[f64], out: &mut [f64]) {
    for row in x.chunks(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient where the forward ReLU output was not positive.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Spatial shape of a 3x3, padding-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        9 * self.cin
    }

    /// Unfold an `h x w x cin` input into `(out_h * out_w) x (9 * cin)` rows.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (oh, ow, p) = (self.out_h(), self.out_w(), self.patch());
        let mut cols = vec![0.0; oh * ow * p];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * p..(oy * ow + ox + 1) * p];
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = (ky * 3 + kx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&input[src..src + self.cin]);
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add column gradients back onto the input layout.
    pub fn col2im(&self, dcols: &[f64], dinput: &mut [f64]) {
        let (oh, ow, p) = (self.out_h(), self.out_w(), self.patch());
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &dcols[(oy * ow + ox) * p..(oy * ow + ox + 1) * p];
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        let src = (ky * 3 + kx) * self.cin;
                        for c in 0..self.cin {
                            dinput[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }

    /// Forward pass; returns `(output, cols)`. Weight layout is
    /// `[ky][kx][cin][cout]`.
    pub fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cols = self.im2col(input);
        let rows = self.out_h() * self.out_w();
        let mut out = vec![0.0; rows * self.cout];
        gemm(rows, self.patch(), self.cout, &cols, false, weight, false, &mut out, false);
        add_bias(&mut out, bias);
        (out, cols)
    }

    /// Backward pass given the cached columns. Accumulates into `dweight`,
    /// `dbias` and, when requested, `dinput`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cols: &[f64],
        weight: &[f64],
        dout: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        dinput: Option<&mut [f64]>,
    ) {
        let rows = self.out_h() * self.out_w();
        let p = self.patch();
        gemm(p, rows, self.cout, cols, true, dout, false, dweight, true);
        col_sums(dout, dbias);
        if let Some(dinput) = dinput {
            let mut dcols = vec![0.0; rows * p];
            gemm(rows, self.cout, p, dout, false, weight, true, &mut dcols, false);
            self.col2im(&dcols, dinput);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let s = ConvShape {
            h: 6,
            w: 5,
            cin: 2,
            cout: 3,
            stride: 2,
        };
        let input: Vec<f64> = (0..6 * 5 * 2).map(|i| (i as f64 * 0.3).sin()).collect();
        let weight: Vec<f64> = (0..9 * 2 * 3).map(|i| (i as f64 * 0.7).cos()).collect();
        let bias = [0.1, -0.2, 0.3];
        let (out, _) = s.forward(&input, &weight, &bias);
        for oy in 0..s.out_h() {
            for ox in 0..s.out_w() {
                for co in 0..3 {
                    let mut acc = bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 6 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += input[(iy as usize * 5 + ix as usize) * 2 + ci]
                                    * weight[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = out[(oy * s.out_w() + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

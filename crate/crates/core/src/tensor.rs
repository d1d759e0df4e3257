//! Dense row-major `f64` tensors and the forward kernels shared by the
//! differentiation engine.
//!
//! The kernels here are plain functions over [`Tensor`] values. The
//! [`autodiff`](crate::autodiff) graph calls the same functions for its
//! forward pass, so a value computed through the graph and one computed
//! directly agree bit for bit.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a tensor from a closure over the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Build a 2-D tensor from rows. Panics on ragged input; meant for
    /// literals in tests and docs.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The trailing extent, i.e. the row length for row-wise ops.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i} ({ext})");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    /// Exchange the two leading axes: `[a, b, rest..] -> [b, a, rest..]`.
    pub fn swap_leading(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::dim(format!(
                "swap_leading needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let (a, b) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * inner;
                let dst = (j * a + i) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(0, 1);
        Tensor::new(&shape, out)
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dim(format!(
                "{what} expects a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Raw `m×k · k×n` product into a fresh buffer.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `m×k · (n×k)ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `(k×m)ᵀ · k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
    c
}

/// Matrix product of `m×k` and `k×n`. No broadcasting.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    Tensor::new(&[m, n], gemm(&a.data, &b.data, m, k, n))
}

/// Split a conv input into `(batch, c_in, h, w)`; rank 3 means batch 1.
fn conv_dims(input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match input.shape[..] {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(format!(
            "conv2d input must be C×H×W or B×C×H×W, got {:?}",
            input.shape
        ))),
    }
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(input: &Tensor, kernels: &Tensor, padding: usize) -> Result<ConvGeom> {
    let (batch, c_in, h, w) = conv_dims(input)?;
    let [c_out, kc, kh, kw] = kernels.shape[..] else {
        return Err(Error::dim(format!(
            "conv2d kernels must be C_out×C_in×kh×kw, got {:?}",
            kernels.shape
        )));
    };
    if kc != c_in {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {:?}, kernels {:?}",
            input.shape, kernels.shape
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!("conv2d kernel extents must be odd, got {kh}×{kw}")));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        pad: padding,
        oh: h + 2 * padding - kh + 1,
        ow: w + 2 * padding - kw + 1,
    })
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `C_in×H×W` (or batched `B×C_in×H×W`), `kernels` is
/// `C_out×C_in×kh×kw` with odd extents. With a 3×3 kernel and padding 1 the
/// spatial size is preserved.
pub fn conv2d(input: &Tensor, kernels: &Tensor, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, padding)?;
    let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                let img = &input.data[((b * g.c_in + ci) * g.h) * g.w..][..g.h * g.w];
                let ker = &kernels.data[((co * g.c_in + ci) * g.kh) * g.kw..][..g.kh * g.kw];
                let dst = &mut out[((b * g.c_out + co) * g.oh) * g.ow..][..g.oh * g.ow];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wgt = ker[ky * g.kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let iy = oy + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let iy = iy - g.pad;
                            for ox in 0..g.ow {
                                let ix = ox + kx;
                                if ix < g.pad || ix - g.pad >= g.w {
                                    continue;
                                }
                                dst[oy * g.ow + ox] += wgt * img[iy * g.w + ix - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![g.c_out, g.oh, g.ow]
    } else {
        vec![g.batch, g.c_out, g.oh, g.ow]
    };
    Tensor::new(&shape, out)
}

/// Row-wise softmax over the last axis, with max subtraction.
///
/// When `mask` is given (shape equal to the trailing two axes of `x`, or to
/// `x` itself), zero entries receive exactly zero weight. A row whose entries
/// are all masked comes back as a zero row and is reported in the returned
/// list of flat row indices.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Vec<usize>)> {
    let n = x.last_dim();
    let rows = x.len() / n;
    if let Some(m) = mask {
        check_trailing_mask(x, m)?;
    }
    let mut out = vec![0.0; x.len()];
    let mut empty = Vec::new();
    for r in 0..rows {
        let src = &x.data[r * n..(r + 1) * n];
        let keep = |j: usize| mask.is_none_or(|m| m.data[(r * n + j) % m.len()] != 0.0);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in src.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            empty.push(r);
            continue;
        }
        let dst = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if keep(j) {
                let e = (src[j] - mx).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Ok((Tensor::new(&x.shape, out)?, empty))
}

pub(crate) fn check_trailing_mask(x: &Tensor, m: &Tensor) -> Result<()> {
    let r = m.rank();
    if r > x.rank() || x.shape[x.rank() - r..] != m.shape[..] {
        return Err(Error::dim(format!(
            "mask shape {:?} does not match trailing axes of {:?}",
            m.shape, x.shape
        )));
    }
    Ok(())
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// RMS normalization over the last axis:
/// `out_r = x_r / sqrt(mean(x_r²) + eps) ⊙ g`.
pub fn rms_norm(x: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.last_dim();
    if g.len() != n {
        return Err(Error::dim(format!(
            "rms_norm gain has {} entries, rows have {n}",
            g.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(n).zip(out.chunks_mut(n)) {
        let inv = rms_inv(src, eps);
        for ((d, &s), &gj) in dst.iter_mut().zip(src).zip(&g.data) {
            *d = s * inv * gj;
        }
    }
    Tensor::new(&x.shape, out)
}

pub(crate) fn rms_inv(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.standard_normal())
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_cases() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let col = Tensor::from_rows(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &col).unwrap(), col);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                assert!((c.get(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = Rng::new(5);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let bt = b.transpose().unwrap();
        let nt = gemm_nt(a.data(), b.data(), 3, 4, 5);
        let direct = matmul(&a, &bt).unwrap();
        for (x, y) in nt.iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.transpose().unwrap();
        let tn = gemm_tn(at.data(), bt.data(), 3, 4, 5);
        for (x, y) in tn.iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_zero_and_identity_kernels() {
        let mut rng = Rng::new(3);
        let x = random(&[1, 4, 5], &mut rng);
        let zero = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &zero, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let mut id = Tensor::zeros(&[1, 1, 3, 3]);
        id.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &id, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = Rng::new(9);
        let x = random(&[1, 5, 5], &mut rng);
        let k = random(&[1, 1, 3, 3], &mut rng);
        let y = conv2d(&x, &k, 1).unwrap();
        for oy in 0..5i64 {
            for ox in 0..5i64 {
                let mut s = 0.0;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            s += k.get(&[0, 0, ky as usize, kx as usize])
                                * x.get(&[0, iy as usize, ix as usize]);
                        }
                    }
                }
                assert!((y.get(&[0, oy as usize, ox as usize]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 0), Err(Error::Dimension(_))));
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 2, 2]), 1).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 3f64.ln()]]);
        let (s, empty) = softmax_rows(&x, None).unwrap();
        assert!(empty.is_empty());
        assert!((s.get(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((s.get(&[1, 0]) - 0.25).abs() < 1e-15);
        assert!((s.get(&[1, 1]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_normalize_and_shift_invariant() {
        let mut rng = Rng::new(4);
        let x = random(&[4, 6], &mut rng);
        let (s, _) = softmax_rows(&x, None).unwrap();
        for row in s.data().chunks(6) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = x.map(|v| v + 17.5);
        let (s2, _) = softmax_rows(&shifted, None).unwrap();
        assert!(s.max_abs_diff(&s2) < 1e-12);
    }

    #[test]
    fn softmax_mask_zeroes_and_flags() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let m = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let (s, empty) = softmax_rows(&x, Some(&m)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(empty, vec![1]);
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::from_vec(vec![-1.0, -3.0])).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::from_vec(vec![0.5, 1.0, 9.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn rms_norm_closed_forms() {
        let one = |n| Tensor::full(&[n], 1.0);
        let out = rms_norm(&Tensor::from_rows(&[&[2.0, 2.0, 2.0]]), &one(3), 1e-12).unwrap();
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let z = rms_norm(&Tensor::zeros(&[1, 2]), &Tensor::from_vec(vec![3.0, -2.0]), 1e-8).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        let out = rms_norm(&Tensor::from_rows(&[&[3.0, 4.0]]), &one(2), 1e-12).unwrap();
        let r = 12.5f64.sqrt();
        assert!((out.get(&[0, 0]) - 3.0 / r).abs() < 1e-12);
        assert!((out.get(&[0, 1]) - 4.0 / r).abs() < 1e-12);
    }

    #[test]
    fn swap_leading_roundtrip() {
        let mut rng = Rng::new(8);
        let x = random(&[2, 3, 4], &mut rng);
        let y = x.swap_leading().unwrap();
        assert_eq!(y.shape(), &[3, 2, 4]);
        assert_eq!(y.get(&[2, 1, 3]), x.get(&[1, 2, 3]));
        assert_eq!(y.swap_leading().unwrap(), x);
    }
}

//! Dense row-major `f64` tensors and the handful of primitives the layers
//! are built from: matrix products, axis reductions and receptive-field
//! patch extraction.
//!
//! Every product here sums over the shared dimension strictly left to right,
//! so results are bit-identical to a naive triple loop and do not depend on
//! blocking or on which machine runs them.

use crate::error::{Error, Result};

/// A dense row-major array of `f64` with fixed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that the
    /// element count matches.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive: {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                left: vec![rows.len(), cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    /// Size of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per index of the leading axis.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Returns a copy with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "zip_map",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
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

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        Ok(Tensor {
            shape: vec![n, m],
            data: transpose(&self.data, m, n),
        })
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Row-major transpose of an `m × n` buffer.
pub(crate) fn transpose(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), m * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Each output element accumulates its `k` products in ascending `k` order,
/// the same sequence of roundings as `s = 0; for k { s += a[i][k] * b[k][j] }`.
/// Rows are processed four at a time so each row of `b` is streamed once per
/// block.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let (s0, s1, s2, s3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += s0 * bv;
                o1[j] += s1 * bv;
                o2[j] += s2 * bv;
                o3[j] += s3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let o = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for kk in 0..k {
            let s = a_row[kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += s * bv;
            }
        }
    }
}

/// Which statistic [`reduce`] computes along an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    Sum,
    Mean,
    /// Population standard deviation (divides by `n`).
    Std,
}

/// Reduces `t` along `axis`. The axis is removed from the result's shape; a
/// rank-1 input reduces to shape `[1]`.
pub fn reduce(t: &Tensor, axis: usize, stat: Stat) -> Result<Tensor> {
    let rank = t.rank();
    if axis >= rank {
        return Err(Error::AxisOutOfRange {
            op: "reduce",
            axis,
            rank,
        });
    }
    let outer: usize = t.shape[..axis].iter().product();
    let len = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| t.data[(o * len + j) * inner + i];
            let sum: f64 = (0..len).map(at).sum();
            let value = match stat {
                Stat::Sum => sum,
                Stat::Mean => sum / len as f64,
                Stat::Std => {
                    let mean = sum / len as f64;
                    let ss: f64 = (0..len).map(|j| (at(j) - mean).powi(2)).sum();
                    (ss / len as f64).sqrt()
                }
            };
            out.push(value);
        }
    }
    let mut shape: Vec<usize> = t.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

/// Geometry of a valid-padding receptive-field sweep over a `C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub field: (usize, usize),
    pub stride: usize,
}

impl PatchGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        field: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        if field.0 == 0 || field.1 == 0 || field.0 > height || field.1 > width {
            return Err(Error::FieldTooLarge {
                field,
                input: (height, width),
            });
        }
        if stride == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "patch geometry needs positive stride and channels, got stride {stride}, channels {channels}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            field,
            stride,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height - self.field.0) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.field.1) / self.stride + 1
    }

    /// Number of receptive-field positions.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one flattened receptive field.
    pub fn patch_len(&self) -> usize {
        self.channels * self.field.0 * self.field.1
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Writes every receptive field of `src` as a row of `out`, each row
    /// `stride_out` wide starting at column `offset`.
    pub(crate) fn gather(&self, src: &[f64], out: &mut [f64], stride_out: usize, offset: usize) {
        let (kh, kw) = self.field;
        let ow = self.out_width();
        for p in 0..self.positions() {
            let (oy, ox) = (p / ow * self.stride, p % ow * self.stride);
            let row = &mut out[p * stride_out + offset..p * stride_out + offset + self.patch_len()];
            let mut idx = 0;
            for c in 0..self.channels {
                for dy in 0..kh {
                    let base = (c * self.height + oy + dy) * self.width + ox;
                    row[idx..idx + kw].copy_from_slice(&src[base..base + kw]);
                    idx += kw;
                }
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather): adds each patch row back into the
    /// positions it was read from.
    pub(crate) fn scatter_add(&self, rows: &[f64], stride_in: usize, offset: usize, dst: &mut [f64]) {
        let (kh, kw) = self.field;
        let ow = self.out_width();
        for p in 0..self.positions() {
            let (oy, ox) = (p / ow * self.stride, p % ow * self.stride);
            let row = &rows[p * stride_in + offset..p * stride_in + offset + self.patch_len()];
            let mut idx = 0;
            for c in 0..self.channels {
                for dy in 0..kh {
                    let base = (c * self.height + oy + dy) * self.width + ox;
                    for dx in 0..kw {
                        dst[base + dx] += row[idx + dx];
                    }
                    idx += kw;
                }
            }
        }
    }
}

/// Flattens every receptive field of a `C×H×W` input into the rows of a
/// `P × (C·kh·kw)` matrix, channel-major then row-major within a field.
pub fn extract_patches(input: &Tensor, field: (usize, usize), stride: usize) -> Result<Tensor> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::Shape {
            op: "extract_patches",
            left: input.shape.clone(),
            right: vec![],
        });
    };
    let geo = PatchGeometry::new(c, h, w, field, stride)?;
    let len = geo.patch_len();
    let mut out = vec![0.0; geo.positions() * len];
    geo.gather(input.data(), &mut out, len, 0);
    Tensor::new(vec![geo.positions(), len], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(t.reshape(&[4]).is_err());
        assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn reduce_basics() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reduce(&t, 0, Stat::Mean).unwrap().data(), &[2.0]);
        let c = Tensor::filled(&[3], 2.0);
        assert_eq!(reduce(&c, 0, Stat::Std).unwrap().data(), &[0.0]);
        assert!(matches!(
            reduce(&t, 1, Stat::Sum),
            Err(Error::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn reduce_along_inner_axis() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(reduce(&t, 0, Stat::Sum).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(reduce(&t, 1, Stat::Mean).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = extract_patches(&t, (2, 2), 1).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(p.data(), t.data());
    }

    #[test]
    fn patch_row_length_counts_channels() {
        let t = Tensor::zeros(&[2, 3, 3]);
        let p = extract_patches(&t, (2, 2), 1).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
    }

    #[test]
    fn field_larger_than_input_is_rejected() {
        let t = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            extract_patches(&t, (3, 1), 1),
            Err(Error::FieldTooLarge { .. })
        ));
    }
}

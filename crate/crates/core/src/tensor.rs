//! Dense row-major tensors and the raw kernels training is built on.
//!
//! Everything here is single-threaded and uses a fixed accumulation order,
//! so identical inputs always produce bit-identical outputs. The masked
//! kernel variants skip inactive rows outright; a skipped row contributes
//! exactly what a zero row would, because accumulators start at `+0.0` and
//! can never become `-0.0`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use thiserror::Error;

/// Real scalar usable by the kernels. Implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("rank {0} exceeds the maximum of {MAX_RANK}")]
    Rank(usize),
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    WrongRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid convolution geometry: {0}")]
    Geometry(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(TensorError::Rank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} too high", shape.len());
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        if shape.len() > MAX_RANK {
            return Err(TensorError::Rank(shape.len()));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

fn expect_rank<T: Float>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::WrongRank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, &a.data, &b.data, &mut out.data, None);
    Ok(out)
}

/// `c[m,n] += a[m,k] · b[k,n]`, skipping reduction indices `p` with
/// `active_k[p] == false`.
///
/// Each output element accumulates in ascending `p` order.
pub fn gemm_nn<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    active_k: Option<&[bool]>,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if active_k.is_some_and(|act| !act[p]) {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`, computing only output rows with
/// `active_m[i] == true`. Inactive rows are left untouched.
pub fn gemm_nt<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    active_m: Option<&[bool]>,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        if active_m.is_some_and(|act| !act[i]) {
            continue;
        }
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[r,m]ᵀ · b[r,n]`, skipping reduction indices with
/// `active_r[p] == false` and output rows with `active_m[i] == false`.
///
/// Each output element accumulates in ascending reduction order.
#[allow(clippy::too_many_arguments)]
pub fn gemm_tn<T: Float>(
    r: usize,
    m: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    active_r: Option<&[bool]>,
    active_m: Option<&[bool]>,
) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..r {
        if active_r.is_some_and(|act| !act[p]) {
            continue;
        }
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if active_m.is_some_and(|act| !act[i]) {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

const LANES: usize = 8;

/// Inner product with eight interleaved partial sums, combined in a fixed order.
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for (ca, cb) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// Geometry of a 2-D convolution over one `[C,H,W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let [channels, height, width] = input;
        let (kernel_h, kernel_w) = kernel;
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(TensorError::Geometry(format!(
                "kernel {kernel_h}x{kernel_w} and stride {stride} must be positive"
            )));
        }
        let extent = |size: usize, k: usize, axis: &str| -> Result<usize, TensorError> {
            let padded = size + 2 * pad;
            if padded < k {
                return Err(TensorError::Geometry(format!(
                    "{axis}: kernel {k} larger than padded extent {padded}"
                )));
            }
            if (padded - k) % stride != 0 {
                return Err(TensorError::Geometry(format!(
                    "{axis}: ({size} + 2*{pad} - {k}) is not divisible by stride {stride}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let out_h = extent(height, kernel_h, "height")?;
        let out_w = extent(width, kernel_w, "width")?;
        Ok(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the lowered matrix: `C·Kh·Kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the lowered matrix: `Ho·Wo`.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Lowers one image into `out` (`[C·Kh·Kw, Ho·Wo]`, row-major).
pub fn im2col_into<T: Float>(input: &[T], g: &ConvGeometry, out: &mut [T]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(out.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let dst_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters-and-sums `cols` into `out`.
/// `out` is overwritten.
pub fn col2im_into<T: Float>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    debug_assert_eq!(out.len(), g.input_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    out.fill(T::zero());
    let ncols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `[C,H,W] → [C·Kh·Kw, Ho·Wo]`.
pub fn im2col<T: Float>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    expect_rank("im2col", input, 3)?;
    let g = ConvGeometry::new(
        [input.shape[0], input.shape[1], input.shape[2]],
        kernel,
        stride,
        pad,
    )?;
    let mut out = Tensor::zeros(&[g.col_rows(), g.col_cols()]);
    im2col_into(&input.data, &g, &mut out.data);
    Ok(out)
}

/// Folds `[C·Kh·Kw, Ho·Wo]` columns back into an image of `out_shape = [C,H,W]`,
/// summing overlapping contributions.
pub fn col2im<T: Float>(
    cols: &Tensor<T>,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    out_shape: [usize; 3],
) -> Result<Tensor<T>, TensorError> {
    expect_rank("col2im", cols, 2)?;
    let g = ConvGeometry::new(out_shape, kernel, stride, pad)?;
    if cols.shape != [g.col_rows(), g.col_cols()] {
        return Err(TensorError::ShapeMismatch {
            op: "col2im",
            left: cols.shape.clone(),
            right: vec![g.col_rows(), g.col_cols()],
        });
    }
    let mut out = Tensor::zeros(&out_shape);
    col2im_into(&cols.data, &g, &mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_7x5_by_5x3_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 35);
        let b = random(&mut rng, 15);
        let c = matmul(
            &Tensor::new(&[7, 5], a.clone()).unwrap(),
            &Tensor::new(&[5, 3], b.clone()).unwrap(),
        )
        .unwrap();
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let oracle = naive_matmul(&a64, &b64, 7, 5, 3);
        for (got, want) in c.data().iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch_and_reports_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn tensor_rejects_bad_length_and_rank() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![0.0f32; 3]),
            Err(TensorError::DataLength { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            Tensor::new(&[1, 1, 1, 1, 1], vec![0.0f32]),
            Err(TensorError::Rank(5))
        ));
        let empty = Tensor::<f32>::zeros(&[0, 3]);
        assert!(empty.is_empty());
    }

    #[test]
    fn masked_kernels_equal_zeroed_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, m, n) = (6, 5, 9);
        let a = random(&mut rng, r * m);
        let mut b = random(&mut rng, r * n);
        let active: Vec<bool> = (0..r).map(|i| i % 3 != 1).collect();
        let mut masked = vec![0.0f32; m * n];
        gemm_tn(r, m, n, &a, &b, &mut masked, Some(&active), None);
        for (p, &on) in active.iter().enumerate() {
            if !on {
                b[p * n..(p + 1) * n].fill(0.0);
            }
        }
        let mut dense = vec![0.0f32; m * n];
        gemm_tn(r, m, n, &a, &b, &mut dense, None, None);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&masked), bits(&dense));
    }

    #[test]
    fn im2col_unit_kernel_is_reshape() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, (1, 1), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_full_coverage_kernel_is_one_column() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let cols = im2col(&x, (3, 3), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[9, 1]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_padded_matches_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(&[2, 4, 4], random(&mut rng, 32)).unwrap();
        let cols = im2col(&x, (3, 3), 1, 1).unwrap();
        assert_eq!(cols.shape(), &[18, 16]);
        // Gather oracle: element (c,kh,kw) of output position (oh,ow).
        for c in 0..2 {
            for kh in 0..3 {
                for kw in 0..3 {
                    for oh in 0..4 {
                        for ow in 0..4 {
                            let ih = oh as isize + kh as isize - 1;
                            let iw = ow as isize + kw as isize - 1;
                            let want = if (0..4).contains(&ih) && (0..4).contains(&iw) {
                                x.data()[c * 16 + ih as usize * 4 + iw as usize]
                            } else {
                                0.0
                            };
                            let row = c * 9 + kh * 3 + kw;
                            assert_eq!(cols.data()[row * 16 + oh * 4 + ow], want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_rejects_non_integral_extent() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4]);
        assert!(matches!(im2col(&x, (3, 3), 2, 0), Err(TensorError::Geometry(_))));
        assert!(matches!(im2col(&x, (5, 5), 1, 0), Err(TensorError::Geometry(_))));
    }

    #[test]
    fn col2im_adjoint_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(&[1, 3, 3], random(&mut rng, 9)).unwrap();
        let y = Tensor::new(&[4, 4], random(&mut rng, 16)).unwrap();
        let lhs: f64 = im2col(&x, (2, 2), 1, 0)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let back = col2im(&y, (2, 2), 1, 0, [1, 3, 3]).unwrap();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0));
    }

    #[test]
    fn col2im_inverts_unit_kernel_and_is_linear() {
        let x = Tensor::from_fn(&[2, 2, 3], |i| i as f32 - 4.0);
        let cols = im2col(&x, (1, 1), 1, 0).unwrap();
        assert_eq!(col2im(&cols, (1, 1), 1, 0, [2, 2, 3]).unwrap(), x);

        let zeros = Tensor::<f32>::zeros(&[18, 16]);
        let img = col2im(&zeros, (3, 3), 1, 1, [2, 4, 4]).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn col2im_rejects_mismatched_columns() {
        let cols = Tensor::<f32>::zeros(&[9, 5]);
        assert!(matches!(
            col2im(&cols, (3, 3), 1, 0, [1, 4, 4]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn matmul_matches_naive(m in 1usize..12, k in 1usize..20, n in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m * k);
            let b = random(&mut rng, k * n);
            let c = matmul(&Tensor::new(&[m, k], a.clone()).unwrap(), &Tensor::new(&[k, n], b.clone()).unwrap()).unwrap();
            let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let oracle = naive_matmul(&a64, &b64, m, k, n);
            for (got, want) in c.data().iter().zip(&oracle) {
                prop_assert!((*got as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }

        #[test]
        fn gemm_nt_matches_naive(m in 1usize..8, k in 1usize..40, n in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m * k);
            let bt = random(&mut rng, n * k);
            let mut c = vec![0.0f32; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c, None);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|p| a[i * k + p] as f64 * bt[j * k + p] as f64).sum();
                    prop_assert!((c[i * n + j] as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
                }
            }
        }

        #[test]
        fn im2col_col2im_adjoint(
            c in 1usize..4, h in 3usize..8, w in 3usize..8,
            k in 1usize..4, pad in 0usize..2, seed in any::<u64>(),
        ) {
            let g = match ConvGeometry::new([c, h, w], (k, k), 1, pad) {
                Ok(g) => g,
                Err(_) => return Ok(()),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, g.input_len());
            let y = random(&mut rng, g.col_rows() * g.col_cols());
            let mut cols = vec![0.0f32; y.len()];
            im2col_into(&x, &g, &mut cols);
            let mut back = vec![0.0f32; x.len()];
            col2im_into(&y, &g, &mut back);
            let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            let scale: f32 = cols.iter().zip(&y).map(|(a, b)| (a * b).abs()).sum::<f32>().max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-5 * scale);
        }

        #[test]
        fn kernels_are_pure(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::new(&[6, 9], random(&mut rng, 54)).unwrap();
            let b = Tensor::new(&[9, 4], random(&mut rng, 36)).unwrap();
            let first = matmul(&a, &b).unwrap();
            let second = matmul(&a, &b).unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&first), bits(&second));
        }
    }
}

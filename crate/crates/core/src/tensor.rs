//! Dense 4-D tensors (batch, channel, row, col) and the PFT1 container format.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Scalar type the engine runs on: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` on row-major buffers. `a` is `m×k` (or `k×m` when
    /// `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $kernel(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T: Real = f32> {
    dims: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return shape_err(format!(
                "buffer of {} elements does not fit dims {:?} ({} elements)",
                data.len(),
                dims,
                len
            ));
        }
        Ok(Self { dims, data, grad: None })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()], grad: None }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data, grad: None }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `h·w` plane of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let o = (b * self.dims[1] + c) * hw;
        &self.data[o..o + hw]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err(format!("gradient length {} does not match data length {}", grad.len(), self.data.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }
}

const PFT_MAGIC: &[u8; 4] = b"PFT1";

/// Writes the PFT1 container: magic, `u32` rank, `u32` dims, then `f32` data,
/// all little-endian. Tensors are always written as rank 4.
pub fn write_pft<T: Real>(mut w: impl Write, t: &Tensor4<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * 5 + 4 * t.len());
    buf.extend_from_slice(PFT_MAGIC);
    buf.extend_from_slice(&4u32.to_le_bytes());
    for d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a PFT1 container. Ranks below 4 are left-padded with unit dims.
pub fn read_pft(mut r: impl Read) -> Result<Tensor4<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_pft(&bytes)
}

pub fn decode_pft(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let bad = |m: &str| Error::TensorFile { path: Default::default(), message: m.to_string() };
    if bytes.len() < 8 || &bytes[..4] != PFT_MAGIC {
        return Err(bad("missing PFT1 magic"));
    }
    let word = |i: usize| -> Option<u32> { bytes.get(i..i + 4).map(|s| u32::from_le_bytes(s.try_into().unwrap())) };
    let rank = word(4).unwrap() as usize;
    if rank == 0 || rank > 4 {
        return Err(bad(&format!("unsupported rank {rank}")));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        dims[4 - rank + i] = word(8 + 4 * i).ok_or_else(|| bad("truncated header"))? as usize;
    }
    let start = 8 + 4 * rank;
    let len: usize = dims.iter().product();
    if bytes.len() != start + 4 * len {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * len, bytes.len().saturating_sub(start))));
    }
    let data = bytes[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor4::new(dims, data)
}

pub fn save_pft<T: Real>(path: impl AsRef<Path>, t: &Tensor4<T>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_pft(std::io::BufWriter::new(f), t)?;
    Ok(())
}

pub fn load_pft(path: impl AsRef<Path>) -> Result<Tensor4<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_pft(&bytes).map_err(|e| match e {
        Error::TensorFile { message, .. } => Error::TensorFile { path: path.to_path_buf(), message },
        other => other,
    })
}

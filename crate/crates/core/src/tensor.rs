//! Dense row-major tensors and the `TNSR` on-disk format.
//!
//! Image-shaped tensors use NCHW order throughout the crate: batch, channel,
//! row, column, with the column index moving fastest in memory.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Element types the numeric kernels are written against. Training uses
/// `f32`; gradient checking instantiates everything at `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Convert an `f64` literal or count into the working precision.
    fn cast(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {:?} wants {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Flat offset of `[n, c, h, w]` in an NCHW tensor.
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u8 = 1;
const TNSR_DTYPE_F32: u8 = 0;

/// Serialize an `f32` tensor: magic, version byte, dtype byte, rank byte,
/// little-endian `u32` dims, then the payload bit-for-bit.
pub fn tnsr_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TNSR_MAGIC);
    out.push(TNSR_VERSION);
    out.push(TNSR_DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

pub fn tnsr_from_bytes(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let fail = |detail: &str| Error::format(origin, detail);
    if bytes.len() < 7 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != TNSR_MAGIC {
        return Err(fail("bad magic, expected TNSR"));
    }
    if bytes[4] != TNSR_VERSION {
        return Err(fail(&format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != TNSR_DTYPE_F32 {
        return Err(fail(&format!("unsupported dtype {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape.push(dim as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != dims_end + 4 * numel {
        return Err(fail(&format!(
            "payload size {} does not match shape {:?}",
            bytes.len() - dims_end,
            shape
        )));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tnsr(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, tnsr_to_bytes(t))?;
    Ok(())
}

pub fn read_tnsr(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    tnsr_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut t = Tensor::<f32>::zeros(vec![3, 5, 7]);
        t.data_mut()[0] = f32::NAN;
        t.data_mut()[1] = -0.0;
        t.data_mut()[2] = 0.0;
        t.data_mut()[3] = f32::MIN_POSITIVE / 8.0;
        t.data_mut()[104] = -123.456;
        let bytes = tnsr_to_bytes(&t);
        let back = tnsr_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let t = Tensor::<f32>::zeros(vec![2, 2]);
        let bytes = tnsr_to_bytes(&t);
        for cut in [0, 3, 6, 9, bytes.len() - 1] {
            let err = tnsr_from_bytes(&bytes[..cut], "mem").unwrap_err();
            assert_eq!(err.exit_code(), 3, "cut at {cut} should be a format error");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let t = Tensor::<f32>::zeros(vec![2]);
        let mut bytes = tnsr_to_bytes(&t);
        bytes[0] = b'X';
        assert!(tnsr_from_bytes(&bytes, "mem").is_err());
    }

    #[test]
    fn shape_data_mismatch_is_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0f32; 5]).is_err());
    }

    #[test]
    fn nchw_offsets_walk_columns_fastest() {
        let t = Tensor::<f32>::zeros(vec![2, 3, 4, 5]);
        assert_eq!(t.offset4(0, 0, 0, 1), 1);
        assert_eq!(t.offset4(0, 0, 1, 0), 5);
        assert_eq!(t.offset4(0, 1, 0, 0), 20);
        assert_eq!(t.offset4(1, 0, 0, 0), 60);
    }
}

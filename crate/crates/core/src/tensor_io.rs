//! Dense tensors and the `NOTF` binary container.
//!
//! Layout on disk (all integers little-endian):
//!
//! ```text
//! b"NOTF" | version: u8 = 1 | dtype: u8 (0 = real64, 1 = complex128)
//! rank: u32 | extents: rank × u64 | payload: row-major f64 values
//! ```
//!
//! Complex payloads are stored as interleaved `(re, im)` pairs. Checkpoints are
//! a plain concatenation of `(u32 name length, UTF-8 name, NOTF tensor)` records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NOTF";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}, expected NOTF")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unsupported dtype code {0}")]
    BadDType(u8),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("invalid shape {0:?}: extents must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("bad checkpoint record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real64,
    Complex128,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real64 => 0,
            DType::Complex128 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorIoError> {
        match code {
            0 => Ok(DType::Real64),
            1 => Ok(DType::Complex128),
            other => Err(TensorIoError::BadDType(other)),
        }
    }

    fn value_bytes(self) -> usize {
        match self {
            DType::Real64 => 8,
            DType::Complex128 => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Row-major dense tensor with a fixed dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), TensorIoError> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(TensorIoError::InvalidShape(shape.to_vec()));
    }
    if shape.iter().product::<usize>() != len {
        return Err(TensorIoError::LengthMismatch {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn real(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorIoError> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::Real(data),
        })
    }

    pub fn complex(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self, TensorIoError> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::Complex(data),
        })
    }

    pub fn from_real_array(a: &ArrayD<f64>) -> Self {
        let shape = if a.ndim() == 0 { vec![1] } else { a.shape().to_vec() };
        Self {
            shape,
            data: TensorData::Real(a.iter().copied().collect()),
        }
    }

    pub fn from_complex_array(a: &ArrayD<Complex64>) -> Self {
        let shape = if a.ndim() == 0 { vec![1] } else { a.shape().to_vec() };
        Self {
            shape,
            data: TensorData::Complex(a.iter().copied().collect()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::Real(_) => DType::Real64,
            TensorData::Complex(_) => DType::Complex128,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::Real(v) => Some(v),
            TensorData::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex64]> {
        match &self.data {
            TensorData::Complex(v) => Some(v),
            TensorData::Real(_) => None,
        }
    }

    pub fn to_real_array(&self) -> Option<ArrayD<f64>> {
        let v = self.as_real()?;
        ArrayD::from_shape_vec(IxDyn(&self.shape), v.to_vec()).ok()
    }

    pub fn to_complex_array(&self) -> Option<ArrayD<Complex64>> {
        let v = self.as_complex()?;
        ArrayD::from_shape_vec(IxDyn(&self.shape), v.to_vec()).ok()
    }

    /// Bitwise equality, treating NaN payloads as equal when their bits match.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::Real(a), TensorData::Real(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::Complex(a), TensorData::Complex(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()),
            _ => false,
        }
    }

    /// Serialize into any writer.
    pub fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.dtype().code()])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::Real(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::Complex(v) => {
                for z in v {
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(10 + 8 * self.shape.len() + self.len() * 16);
        self.encode(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parse one tensor from the front of `bytes`; returns it and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), TensorIoError> {
        let need = |n: usize, at: usize| -> Result<(), TensorIoError> {
            if bytes.len() < at + n {
                Err(TensorIoError::SizeMismatch {
                    expected: at + n,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4, 0)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TensorIoError::BadMagic(magic));
        }
        need(6, 4)?;
        if bytes[4] != VERSION {
            return Err(TensorIoError::BadVersion(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5])?;
        let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        need(8 * rank, 10)?;
        let mut shape = Vec::with_capacity(rank);
        for r in 0..rank {
            let at = 10 + 8 * r;
            shape.push(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize);
        }
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorIoError::InvalidShape(shape));
        }
        let n: usize = shape.iter().product();
        let start = 10 + 8 * rank;
        let payload = n * dtype.value_bytes();
        if bytes.len() < start + payload {
            return Err(TensorIoError::SizeMismatch {
                expected: payload,
                found: bytes.len() - start,
            });
        }
        let body = &bytes[start..start + payload];
        let f = |i: usize| f64::from_le_bytes(body[8 * i..8 * i + 8].try_into().unwrap());
        let data = match dtype {
            DType::Real64 => TensorData::Real((0..n).map(f).collect()),
            DType::Complex128 => TensorData::Complex(
                (0..n).map(|i| Complex64::new(f(2 * i), f(2 * i + 1))).collect(),
            ),
        };
        Ok((Self { shape, data }, start + payload))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    t.encode(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Reads a tensor file; trailing bytes after the declared payload are rejected.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorIoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let (t, used) = Tensor::decode(&bytes)?;
    if used != bytes.len() {
        return Err(TensorIoError::SizeMismatch {
            expected: used,
            found: bytes.len(),
        });
    }
    Ok(t)
}

pub fn encode_checkpoint(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.encode(&mut buf).expect("writing to a Vec cannot fail");
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, TensorIoError> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if bytes.len() < at + 4 {
            return Err(TensorIoError::BadRecord("truncated name length".into()));
        }
        let n = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if bytes.len() < at + n {
            return Err(TensorIoError::BadRecord("truncated name".into()));
        }
        let name = std::str::from_utf8(&bytes[at..at + n])
            .map_err(|e| TensorIoError::BadRecord(e.to_string()))?
            .to_string();
        at += n;
        let (t, used) = Tensor::decode(&bytes[at..])?;
        at += used;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    records: &[(String, Tensor)],
) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(records)).map_err(io_err(path))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, TensorIoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_value_real_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.notf");
        let t = Tensor::real(vec![2], vec![1.0, 2.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // 4 magic + version + dtype + 4 rank + 8 extent + 16 payload
        assert_eq!(bytes.len(), 34);
        assert_eq!(&bytes[0..4], b"NOTF");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn zero_complex_payload_is_all_zero_bytes() {
        let t = Tensor::complex(vec![1], vec![Complex64::new(0.0, 0.0)]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes[5], 1);
        assert!(bytes[18..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 18 + 16);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Tensor::real(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::decode(&bytes), Err(TensorIoError::BadMagic(_))));
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut bytes = Tensor::real(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[4] = 7;
        assert!(matches!(Tensor::decode(&bytes), Err(TensorIoError::BadVersion(7))));
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        // declared shape [4], only 3 values present
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"NOTF");
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u64.to_le_bytes());
        for x in [1.0f64, 2.0, 3.0] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.notf");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(TensorIoError::SizeMismatch { .. })));
    }

    #[test]
    fn io_error_names_the_path() {
        let err = read_tensor("/nonexistent/dir/x.notf").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.notf"));
    }

    #[test]
    fn random_64x64_round_trip_is_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>() - 0.5).collect();
        let t = Tensor::real(vec![64, 64], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.notf");
        write_tensor(&p, &t).unwrap();
        assert!(read_tensor(&p).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn checkpoint_records_round_trip() {
        let recs = vec![
            ("a.theta".to_string(), Tensor::real(vec![1, 2], vec![0.5, -1.0]).unwrap()),
            (
                "k".to_string(),
                Tensor::complex(vec![1], vec![Complex64::new(1.0, 2.0)]).unwrap(),
            ),
        ];
        let back = decode_checkpoint(&encode_checkpoint(&recs)).unwrap();
        assert_eq!(back, recs);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop::collection::vec(1usize..5, 1..=4), any::<bool>()).prop_flat_map(|(shape, cplx)| {
            let n: usize = shape.iter().product();
            prop::collection::vec(any::<f64>(), 2 * n).prop_map(move |v| {
                if cplx {
                    let data = v.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
                    Tensor::complex(shape.clone(), data).unwrap()
                } else {
                    Tensor::real(shape.clone(), v[..n].to_vec()).unwrap()
                }
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise_identity(t in arb_tensor()) {
            let bytes = t.to_bytes();
            let (back, used) = Tensor::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}

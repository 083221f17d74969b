//! Named-tensor container (`.amtf`).
//!
//! ```text
//! "AMTF"            4 bytes magic
//! version           u16
//! count             u32
//! count × entry:
//!     name_len      u32
//!     name          utf-8 bytes
//!     dtype         u8   (0 = f32, 1 = f64)
//!     rank          u8
//!     dims          rank × u64
//! payloads          contiguous, row-major, in table order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{AmiError, Result};

pub const MAGIC: &[u8; 4] = b"AMTF";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(AmiError::format(
                name,
                format!("dims {dims:?} need {expected} elements, got {}", data.len()),
            ));
        }
        if dims.len() > u8::MAX as usize {
            return Err(AmiError::format(name, "rank exceeds 255"));
        }
        Ok(Self { name, dims, data })
    }
}

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(AmiError::format(&tensor.name, "duplicate tensor name"));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Like [`TensorFile::get`], but a missing tensor is a format error.
    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| AmiError::format(name, "tensor not present in container"))
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().code());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(AmiError::format("magic", "expected \"AMTF\""));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(AmiError::format("version", format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array("count")?) as usize;

        let mut headers = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let name_len = u32::from_le_bytes(r.array(&format!("entry[{i}].name_len"))?) as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("entry[{i}].name"))?)
                .map_err(|_| AmiError::format(format!("entry[{i}].name"), "not valid utf-8"))?
                .to_owned();
            let [code] = r.array::<1>(&format!("{name}.dtype"))?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| AmiError::format(format!("{name}.dtype"), format!("unknown dtype code {code}")))?;
            let [rank] = r.array::<1>(&format!("{name}.rank"))?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.array(&format!("{name}.dims"))?);
                dims.push(usize::try_from(d).map_err(|_| AmiError::format(format!("{name}.dims"), "dimension overflow"))?);
            }
            headers.push((name, dtype, dims));
        }

        let mut file = TensorFile::new();
        for (name, dtype, dims) in headers {
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| AmiError::format(format!("{name}.dims"), "element count overflow"))?;
            let nbytes = n
                .checked_mul(dtype.size())
                .ok_or_else(|| AmiError::format(format!("{name}.dims"), "payload size overflow"))?;
            let raw = r.take(nbytes, &format!("{name}.payload")).map_err(|_| {
                AmiError::format(
                    format!("{name}.payload"),
                    format!("declared shape {dims:?} needs {nbytes} bytes, only {} remain", r.remaining()),
                )
            })?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
            };
            file.push(NamedTensor { name, dims, data })?;
        }
        if r.remaining() != 0 {
            return Err(AmiError::format(
                "payload",
                format!("{} trailing bytes after last tensor", r.remaining()),
            ));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| AmiError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| AmiError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| AmiError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(AmiError::format(field, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new();
        f.push(NamedTensor::new("a", vec![2, 3], TensorData::F32(vec![1., 2., 3., 4., 5., 6.])).unwrap())
            .unwrap();
        f.push(NamedTensor::new("b.w", vec![1], TensorData::F64(vec![0.25])).unwrap())
            .unwrap();
        f
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"AMTF");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        // name_len=1, "a", dtype 0, rank 2, dims 2 and 3
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 2);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        // header + 6 f32 + 1 f64
        let header = 10 + (4 + 1 + 2 + 16) + (4 + 3 + 2 + 8);
        assert_eq!(bytes.len(), header + 24 + 8);
        assert_eq!(f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()), 1.0);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 3);
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, AmiError::Format { ref field, .. } if field == "b.w.payload"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(AmiError::Format { .. })));
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, AmiError::Format { ref field, .. } if field == "magic"));

        let mut bytes = sample().to_bytes();
        bytes[15] = 9;
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, AmiError::Format { ref field, .. } if field == "a.dtype"));
    }

    #[test]
    fn missing_tensor_names_the_field() {
        let err = sample().require("features").unwrap_err();
        assert!(matches!(err, AmiError::Format { ref field, .. } if field == "features"));
    }

    #[test]
    fn mismatched_dims_rejected_on_construction() {
        assert!(NamedTensor::new("x", vec![2, 2], TensorData::F32(vec![0.0; 3])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in proptest::collection::vec(any::<u32>(), 0..64),
                                 wide in proptest::collection::vec(any::<u64>(), 0..16)) {
            let f32s: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let f64s: Vec<f64> = wide.iter().map(|&b| f64::from_bits(b)).collect();
            let mut f = TensorFile::new();
            f.push(NamedTensor::new("x", vec![f32s.len()], TensorData::F32(f32s.clone())).unwrap()).unwrap();
            f.push(NamedTensor::new("y", vec![1, f64s.len()], TensorData::F64(f64s.clone())).unwrap()).unwrap();
            let back = TensorFile::from_bytes(&f.to_bytes()).unwrap();
            match &back.require("x").unwrap().data {
                TensorData::F32(v) => prop_assert!(v.iter().zip(&f32s).all(|(a, b)| a.to_bits() == b.to_bits())),
                _ => prop_assert!(false),
            }
            match &back.require("y").unwrap().data {
                TensorData::F64(v) => prop_assert!(v.iter().zip(&f64s).all(|(a, b)| a.to_bits() == b.to_bits())),
                _ => prop_assert!(false),
            }
        }
    }
}

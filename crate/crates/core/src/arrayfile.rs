//! Named-array binary container.
//!
//! Layout (little endian): magic `SGNARR`, `u16` version, `u32` array count,
//! then per array a `u16` name length, the UTF-8 name, a `u8` rank, one `u64`
//! per dimension and the row-major `f64` payload. Arrays are written in name
//! order so identical contents produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"SGNARR";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<D: ndarray::Dimension>(&mut self, name: &str, array: ndarray::Array<f64, D>) {
        self.arrays.insert(name.to_string(), array.into_dyn());
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, Array1::from_elem(1, value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing array `{name}`")))
    }

    pub fn array1(&self, name: &str) -> Result<Array1<f64>> {
        self.require(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Schema(format!("array `{name}` must have rank 1")))
    }

    pub fn array2(&self, name: &str) -> Result<Array2<f64>> {
        self.require(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Schema(format!("array `{name}` must have rank 2")))
    }

    pub fn array3(&self, name: &str) -> Result<Array3<f64>> {
        self.require(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Schema(format!("array `{name}` must have rank 3")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let a = self.require(name)?;
        if a.len() != 1 {
            return Err(Error::Schema(format!("array `{name}` must hold one value")));
        }
        Ok(*a.iter().next().expect("one element"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.write_u16::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.arrays.len() as u32).unwrap();
        for (name, array) in &self.arrays {
            out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u8(array.ndim() as u8).unwrap();
            for &d in array.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in array.iter() {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| Error::Format("container is truncated".into());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 6];
        cur.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic bytes; not an array container".into()));
        }
        let version = cur.read_u16::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = cur.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = cur.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = cur.read_u8().map_err(truncated)? as usize;
            let shape = (0..ndim)
                .map(|_| cur.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(truncated)?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array `{name}` is too large")))?;
            let remaining = bytes.len() as u64 - cur.position();
            if (n as u64).saturating_mul(8) > remaining {
                return Err(Error::Format("container is truncated".into()));
            }
            let mut data = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
            let array = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            if arrays.insert(name.clone(), array).is_some() {
                return Err(Error::Format(format!("duplicate array `{name}`")));
            }
        }
        if cur.position() != bytes.len() as u64 {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Self { arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut file = ArrayFile::new();
        file.insert("x", Array1::from(vec![1.0, 2.0]));
        let mut bytes = file.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ArrayFile::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = ArrayFile::new().to_bytes();
        bytes[6] = 9;
        assert!(matches!(
            ArrayFile::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let mut file = ArrayFile::new();
        file.insert("x", Array2::from_elem((3, 2), 0.5));
        let bytes = file.to_bytes();
        assert!(ArrayFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(ArrayFile::from_bytes(&longer).is_err());
    }

    #[test]
    fn schema_accessors_check_rank() {
        let mut file = ArrayFile::new();
        file.insert("m", Array2::from_elem((2, 2), 1.0));
        file.insert_scalar("fps", 30.0);
        assert!(file.array2("m").is_ok());
        assert!(matches!(file.array1("m"), Err(Error::Schema(_))));
        assert!(matches!(file.array1("missing"), Err(Error::Schema(_))));
        assert_eq!(file.scalar("fps").unwrap(), 30.0);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 0usize..5,
            cols in 0usize..4,
            bits in proptest::collection::vec(any::<u64>(), 20),
        ) {
            let data: Vec<f64> = (0..rows * cols).map(|i| f64::from_bits(bits[i % bits.len()])).collect();
            let mut file = ArrayFile::new();
            file.insert("theta", Array2::from_shape_vec((rows, cols), data.clone()).unwrap());
            file.insert_scalar("fps", 29.97);
            let back = ArrayFile::from_bytes(&file.to_bytes()).unwrap();
            let got = back.array2("theta").unwrap();
            prop_assert_eq!(got.dim(), (rows, cols));
            for (a, b) in got.iter().zip(&data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

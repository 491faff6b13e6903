//! Dense tensors and the LTA1 binary format.
//!
//! Layout on disk: the 4-byte magic `LTA1`, the rank as a little-endian
//! `u32`, each dimension as a little-endian `u32`, then the elements as
//! row-major little-endian `f32`. Nothing may follow the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTA1";
pub const MAX_RANK: usize = 4;

/// Spatial height, width and channel count of an `(H, W, C)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Dims { h, w, c }
    }

    pub fn with_channels(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.h, self.w, self.c)
    }
}

/// A real `(H, W, C)` array in HWC row-major order.
///
/// Used for base latents `z`, decoded fusions `z_F`, and for fused sparse
/// vectors that have the sparse shape but carry no simplex guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    dims: Dims,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "tensor {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(LatentTensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LatentTensor {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims.h {
            for j in 0..dims.w {
                for k in 0..dims.c {
                    data.push(f(i, j, k));
                }
            }
        }
        LatentTensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.w + j) * self.dims.c + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Channel vector at spatial coordinate `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.dims.w + j) * self.dims.c;
        &self.data[start..start + self.dims.c]
    }

    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let c = self.dims.c;
        let start = (i * self.dims.w + j) * c;
        &mut self.data[start..start + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_dims(&self, expected: Dims, what: &str) -> Result<()> {
        if self.dims != expected {
            return Err(Error::Shape(format!(
                "{what}: expected {expected}, got {}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Round every entry to the nearest `f32`, matching what LTA1 stores.
    pub fn round_to_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn squared_distance(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn to_stored(&self) -> StoredTensor {
        StoredTensor {
            shape: vec![self.dims.h, self.dims.w, self.dims.c],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_stored(t: &StoredTensor) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "expected a rank-3 latent, got shape {:?}",
                t.shape
            )));
        }
        let dims = Dims::new(t.shape[0], t.shape[1], t.shape[2]);
        LatentTensor::new(dims, t.data.iter().map(|&v| v as f64).collect())
    }
}

/// A real `(H, W)` map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "grid ({h}, {w}) needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Grid { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Grid {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn to_stored(&self) -> StoredTensor {
        StoredTensor {
            shape: vec![self.h, self.w],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// The on-disk tensor: arbitrary rank up to [`MAX_RANK`], `f32` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(StoredTensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        StoredTensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.len() > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                self.shape.len()
            )));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected \"LTA1\"".into()));
        }
        let mut cursor = 4usize;
        let mut next_u32 = |what: &str| -> Result<u32> {
            let end = cursor + 4;
            let chunk = bytes
                .get(cursor..end)
                .ok_or_else(|| Error::Format(format!("truncated header reading {what}")))?;
            cursor = end;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
        };
        let rank = next_u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {rank} exceeds maximum {MAX_RANK}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(next_u32("dimension")? as usize);
        }
        let n = element_count(&shape)?;
        let payload = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("dims {shape:?} overflow")))?;
        let body = &bytes[cursor..];
        if body.len() < payload {
            return Err(Error::Format(format!(
                "truncated payload: expected {payload} bytes, found {}",
                body.len()
            )));
        }
        if body.len() > payload {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                body.len() - payload
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(StoredTensor { shape, data })
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Format(format!("dims {shape:?} overflow")))
    })
}

pub fn write_tensor(t: &StoredTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.encode()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    StoredTensor::decode(&bytes)
}

pub fn write_latent(t: &LatentTensor, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(&t.to_stored(), path)
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    LatentTensor::from_stored(&read_tensor(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_for_rank_two() {
        let t = StoredTensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(&bytes[..4], b"LTA1");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0],);
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = StoredTensor::new(vec![1], vec![1.0])
            .unwrap()
            .encode()
            .unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            StoredTensor::decode(&bytes),
            Err(Error::Format(_))
        ));
        assert!(matches!(StoredTensor::decode(b"LT"), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = StoredTensor::new(vec![2, 2], vec![1.0; 4])
            .unwrap()
            .encode()
            .unwrap();
        let err = StoredTensor::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let err = StoredTensor::decode(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn overflowing_dims_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LTA1");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            StoredTensor::decode(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn random_latent_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.lta");
        let mut rng = crate::seed::rng(3);
        let dims = Dims::new(8, 8, 4);
        let z = LatentTensor::from_fn(dims, |_, _, _| rand::Rng::random_range(&mut rng, -3.0..3.0))
            .round_to_f32();
        write_latent(&z, &path).unwrap();
        let back = read_latent(&path).unwrap();
        assert_eq!(back, z);
        let raw = fs::read(&path).unwrap();
        assert_eq!(raw, z.to_stored().encode().unwrap());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 0..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut rng = crate::seed::rng(seed);
            let data: Vec<f32> = (0..n)
                .map(|_| f32::from_bits(rand::Rng::random::<u32>(&mut rng)))
                .collect();
            let t = StoredTensor::new(shape, data).unwrap();
            let back = StoredTensor::decode(&t.encode().unwrap()).unwrap();
            prop_assert_eq!(&back.shape, &t.shape);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

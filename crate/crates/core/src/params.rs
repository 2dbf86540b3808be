//! Named parameter tensors and their binary checkpoint container.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique within the set.
    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat<T>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape(
                "ParamSet::set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    cur.shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            let mut buf = Vec::with_capacity(v.len() * T::BYTES);
            for &x in v.as_slice() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Copies every tensor of `other` whose name exists here with the same shape.
    pub fn load_matching(&mut self, other: &ParamSet<T>) -> Result<usize> {
        let mut n = 0;
        for (name, v) in other.iter() {
            if let Some(id) = self.id(name) {
                self.set(id, v.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"MAGC";
const CHECKPOINT_VERSION: u16 = 1;

/// Serializes named tensors plus a config hash.
///
/// Layout (little-endian): magic `MAGC`, version u16, dtype tag u8, hash length u16,
/// hash bytes, tensor count u64; per tensor: name length u16, name bytes, rank u8,
/// rank × u32 dims, then the values.
pub fn encode_checkpoint<T: Scalar>(params: &ParamSet<T>, config_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE_TAG);
    out.extend_from_slice(&(config_hash.len() as u16).to_le_bytes());
    out.extend_from_slice(config_hash.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, v) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(v.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(v.cols() as u32).to_le_bytes());
        for &x in v.as_slice() {
            x.write_le(&mut out);
        }
    }
    out
}

/// Inverse of [`encode_checkpoint`]. Returns the tensors and the stored config hash.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ParamSet<T>, String), FormatError> {
    let mut r = crate::datamodel::features::ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            expected: CHECKPOINT_MAGIC,
            found: magic.to_vec(),
        });
    }
    let at = r.offset();
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: at,
            version,
        });
    }
    let at = r.offset();
    let tag = r.u8()?;
    if tag != T::DTYPE_TAG {
        return Err(FormatError::UnknownTag { offset: at, tag });
    }
    let hlen = r.u16()? as usize;
    let at = r.offset();
    let hash = std::str::from_utf8(r.take(hlen)?)
        .map_err(|_| FormatError::InvalidUtf8 { offset: at })?
        .to_string();
    let count = r.u64()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| FormatError::InvalidUtf8 { offset: at })?
            .to_string();
        if params.id(&name).is_some() {
            return Err(FormatError::DuplicateId {
                offset: at,
                id: name,
            });
        }
        let at = r.offset();
        let rank = r.u8()?;
        if rank != 2 {
            return Err(FormatError::DimensionMismatch {
                offset: at,
                expected: 2,
                found: rank as usize,
            });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        params.add(name, Mat::from_vec(rows, cols, data).expect("sized above"));
    }
    if r.remaining() > 0 {
        return Err(FormatError::TrailingBytes {
            offset: r.offset(),
            extra: r.remaining(),
        });
    }
    Ok((params, hash))
}

pub fn write_checkpoint<T: Scalar>(
    params: &ParamSet<T>,
    config_hash: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ParamSet<T>, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("a.weight", Mat::from_f64(&[&[1.0, -2.5], &[0.125, 3.0]]));
        ps.add("a.bias", Mat::from_f64(&[&[0.5, f64::MIN_POSITIVE]]));
        let bytes = encode_checkpoint(&ps, "cafe");
        let (back, hash) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back, ps);
        assert_eq!(hash, "cafe");
        assert_eq!(back.digest(), ps.digest());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f64>(&bad),
            Err(FormatError::BadMagic { offset: 0, .. })
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(FormatError::UnknownTag { offset: 6, tag: 1 })
        ));
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
    }
}

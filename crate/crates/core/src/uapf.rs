//! `UAPF` container: magic, version byte, little-endian header length, JSON
//! header, then `H*W*C` little-endian `f32` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageShape, Perturbation, PixelRange, Stage};
use crate::error::{Result, UapError};
use crate::saliency::WeightedAttentionImage;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"UAPF";
pub const VERSION: u8 = 1;
pub const ATTN_STAGE: &str = "attn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UapfHeader {
    pub shape: [usize; 3],
    pub epsilon: f64,
    pub pixel_lo: f64,
    pub pixel_hi: f64,
    pub stage: String,
    pub source_model_id: String,
    pub created_unix: u64,
    /// Only present on attention containers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_sources: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UapfContainer {
    pub header: UapfHeader,
    pub values: Vec<f32>,
}

impl UapfContainer {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let [h, w, c] = self.header.shape;
        if h * w * c != self.values.len() {
            return Err(UapError::Format(format!(
                "header shape {h}x{w}x{c} does not match {} values",
                self.values.len()
            )));
        }
        let header = serde_json::to_vec(&self.header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| UapError::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(9 + header.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(UapError::Format(format!("bad magic {magic:?}")));
        }
        let mut version = [0u8; 1];
        read_exact(&mut bytes, &mut version)?;
        if version[0] != VERSION {
            return Err(UapError::Format(format!(
                "unsupported version {}",
                version[0]
            )));
        }
        let mut len = [0u8; 4];
        read_exact(&mut bytes, &mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(UapError::Format("truncated header".into()));
        }
        let header: UapfHeader = serde_json::from_slice(&bytes[..len])?;
        bytes = &bytes[len..];
        let [h, w, c] = header.shape;
        let n = h * w * c;
        if bytes.len() != 4 * n {
            return Err(UapError::Format(format!(
                "expected {} payload bytes, found {}",
                4 * n,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { header, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = fs::File::create(path).map_err(|e| UapError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| UapError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| UapError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| UapError::Format("truncated container".into()))
}

impl<T: Scalar> Perturbation<T> {
    pub fn to_container(&self, range: PixelRange<T>) -> UapfContainer {
        UapfContainer {
            header: UapfHeader {
                shape: self.shape.as_array(),
                epsilon: self.epsilon.as_f64(),
                pixel_lo: range.lo.as_f64(),
                pixel_hi: range.hi.as_f64(),
                stage: self.stage.as_str().to_owned(),
                source_model_id: self.source_model_id.clone(),
                created_unix: self.created_unix,
                num_sources: None,
            },
            values: self.delta.iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn from_container(c: &UapfContainer) -> Result<Self> {
        let stage = Stage::parse(&c.header.stage).ok_or_else(|| {
            UapError::Format(format!("`{}` is not a perturbation stage", c.header.stage))
        })?;
        let [h, w, ch] = c.header.shape;
        let p = Perturbation::new(
            c.values.iter().map(|&v| T::lit(v as f64)).collect(),
            ImageShape::new(h, w, ch),
            T::lit(c.header.epsilon),
            stage,
            c.header.source_model_id.clone(),
        )?;
        Ok(p.with_created_unix(c.header.created_unix))
    }

    pub fn save(&self, path: &Path, range: PixelRange<T>) -> Result<()> {
        self.to_container(range).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&UapfContainer::read(path)?)
    }
}

impl<T: Scalar> WeightedAttentionImage<T> {
    pub fn to_container(&self, source_model_id: &str, created_unix: u64) -> UapfContainer {
        UapfContainer {
            header: UapfHeader {
                shape: [self.height, self.width, 1],
                epsilon: 0.0,
                pixel_lo: 0.0,
                pixel_hi: self.num_sources as f64,
                stage: ATTN_STAGE.to_owned(),
                source_model_id: source_model_id.to_owned(),
                created_unix,
                num_sources: Some(self.num_sources),
            },
            values: self.values.iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn from_container(c: &UapfContainer) -> Result<Self> {
        if c.header.stage != ATTN_STAGE || c.header.shape[2] != 1 {
            return Err(UapError::Format(format!(
                "expected a single-channel `{ATTN_STAGE}` container, found stage `{}` with {} channels",
                c.header.stage, c.header.shape[2]
            )));
        }
        let num_sources = c
            .header
            .num_sources
            .ok_or_else(|| UapError::Format("attention container without num_sources".into()))?;
        WeightedAttentionImage::new(
            c.header.shape[0],
            c.header.shape[1],
            c.values.iter().map(|&v| T::lit(v as f64)).collect(),
            num_sources,
        )
    }

    pub fn save(&self, path: &Path, source_model_id: &str, created_unix: u64) -> Result<()> {
        self.to_container(source_model_id, created_unix).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&UapfContainer::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Perturbation<f32> {
        Perturbation::new(
            vec![1.5, -2.0, 0.25, 10.0, -10.0, 0.0],
            ImageShape::new(1, 2, 3),
            10.0,
            Stage::Mid,
            "cnn_a",
        )
        .unwrap()
        .with_created_unix(1_700_000_000)
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().to_container(PixelRange::default()).encode().unwrap();
        assert_eq!(&bytes[..4], b"UAPF");
        assert_eq!(bytes[4], 1);
        let len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(header["shape"], serde_json::json!([1, 2, 3]));
        assert_eq!(header["stage"], "mid");
        assert!(header.get("num_sources").is_none());
        let payload = &bytes[9 + len..];
        assert_eq!(payload.len(), 24);
        assert_eq!(&payload[..4], &1.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_unknown_magic_and_version() {
        let mut bytes = sample().to_container(PixelRange::default()).encode().unwrap();
        bytes[4] = 2;
        assert!(UapfContainer::decode(&bytes).is_err());
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(UapfContainer::decode(&bytes).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = sample().to_container(PixelRange::default()).encode().unwrap();
        assert!(UapfContainer::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(values in prop::collection::vec(-10.0f32..10.0, 12)) {
            let p = Perturbation::new(values, ImageShape::new(2, 2, 3), 10.0, Stage::Fin, "m").unwrap();
            let bytes = p.to_container(PixelRange::default()).encode().unwrap();
            let back: Perturbation<f32> =
                Perturbation::from_container(&UapfContainer::decode(&bytes).unwrap()).unwrap();
            let a: Vec<u32> = p.delta.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.delta.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.stage, Stage::Fin);
            prop_assert_eq!(bytes, back.to_container(PixelRange::default()).encode().unwrap());
        }
    }
}

//! SQFT checkpoint format.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic "SQFT" | version u32 | entry count u32
//! per entry: name len u16 | UTF-8 name | ndim u8 | dims u32 .. | payload f32 ..
//! trailing CRC32 (IEEE) over all preceding bytes
//! ```
//!
//! Entries are written in the order given, so serialization is byte-exact for
//! a fixed parameter enumeration. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::HostTensor;

pub const MAGIC: &[u8; 4] = b"SQFT";
pub const VERSION: u32 = 1;

/// CRC32 (IEEE 802.3, reflected, poly 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub type Entry = (String, HostTensor<f32>);

pub fn to_bytes(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| {
        Error::Format("too many checkpoint entries".into())
    })?.to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let ndim = u8::try_from(t.shape.len())
            .map_err(|_| Error::Format(format!("too many dims for {name}")))?;
        buf.push(ndim);
        for &d in &t.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension too large for {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, HostTensor::new(shape, data)));
    }
    if pos != body.len() {
        return Err(Error::Format("trailing bytes after checkpoint entries".into()));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    let bytes = to_bytes(entries)?;
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| {
        Error::Format(format!("cannot read checkpoint {}: {e}", path.as_ref().display()))
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = vec![
            (
                "encoder.block0.fc1.weight".to_string(),
                HostTensor::new(vec![2, 3], vec![1.0f32, -2.5, 3.25, 0.0, -0.0, f32::MIN_POSITIVE]),
            ),
            ("seg_head.bias".to_string(), HostTensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4])),
        ];
        let bytes = to_bytes(&entries).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            assert_eq!(
                t1.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t2.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // identical input -> identical bytes
        assert_eq!(bytes, to_bytes(&entries).unwrap());
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let entries = vec![("w".to_string(), HostTensor::new(vec![2], vec![1.0f32, 2.0]))];
        let mut bytes = to_bytes(&entries).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn prop_round_trip(names in proptest::collection::vec("[a-z.]{1,12}", 1..5),
                           seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let entries: Vec<Entry> = names.iter().enumerate().map(|(i, n)| {
                let rows = 1 + rng.below(4);
                let cols = 1 + rng.below(4);
                let data: Vec<f32> = (0..rows * cols)
                    .map(|_| (rng.uniform(-10.0, 10.0)) as f32)
                    .collect();
                (format!("{n}.{i}"), HostTensor::new(vec![rows, cols], data))
            }).collect();
            let bytes = to_bytes(&entries).unwrap();
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(entries.len(), back.len());
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&t1.shape, &t2.shape);
                let bits1: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u32> = t2.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits1, bits2);
            }
        }
    }
}

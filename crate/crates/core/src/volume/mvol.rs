//! `MVOL0001` volume container.
//!
//! ```text
//! offset 0   8 bytes   magic "MVOL0001"
//! offset 8   4 bytes   header length n, little-endian u32
//! offset 12  n bytes   UTF-8 JSON header
//! offset 12+n          f32 little-endian payload, channel-major then z, y, x
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MVOL0001";
const PREFIX: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvolHeader {
    pub dims: [usize; 3],
    pub channels: usize,
    pub voxel_size: [f32; 3],
    pub subject_id: String,
    pub channel_names: Vec<String>,
}

pub fn encode(volume: &Volume) -> Result<Vec<u8>> {
    let header = MvolHeader {
        dims: volume.dims,
        channels: volume.channels,
        voxel_size: volume.voxel_size_mm,
        subject_id: volume.subject_id.clone(),
        channel_names: volume.channel_names.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("mvol header", e))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + 4 * volume.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &volume.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let format = |offset: usize, reason: String| Error::Format {
        what: "mvol",
        offset: offset as u64,
        reason,
    };
    if bytes.len() < PREFIX {
        return Err(format(0, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(format(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < PREFIX + hlen {
        return Err(format(
            8,
            format!("header length {hlen} runs past end of file"),
        ));
    }
    let header: MvolHeader =
        serde_json::from_slice(&bytes[PREFIX..PREFIX + hlen]).map_err(|e| {
            format(
                PREFIX + e.column().saturating_sub(1),
                format!("header json: {e}"),
            )
        })?;
    if header.channels != header.channel_names.len() {
        return Err(Error::Header {
            field: "channel_names".into(),
            reason: format!(
                "{} names for {} channels",
                header.channel_names.len(),
                header.channels
            ),
        });
    }
    if header.channels == 0 {
        return Err(Error::Header {
            field: "channels".into(),
            reason: "must be at least 1".into(),
        });
    }
    if header.dims.contains(&0) {
        return Err(Error::Header {
            field: "dims".into(),
            reason: format!("{:?} has a zero extent", header.dims),
        });
    }
    if header.voxel_size.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Header {
            field: "voxel_size".into(),
            reason: format!("{:?} must be positive", header.voxel_size),
        });
    }
    let payload = &bytes[PREFIX + hlen..];
    let expected =
        4 * header.channels as u64 * header.dims.iter().map(|&d| d as u64).product::<u64>();
    if payload.len() as u64 != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::new(
        header.subject_id,
        header.dims,
        header.voxel_size,
        header.channel_names,
        data,
    )
}

pub fn save_mvol(volume: &Volume, path: &Path) -> Result<()> {
    let bytes = encode(volume)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_mvol(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Volume {
        let names = (0..channels).map(|c| format!("c{c}")).collect();
        Volume::new("subj-1", dims, [1.5, 1.5, 1.5], names, data).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let data: Vec<f32> = (0..2 * 4 * 5 * 6)
            .map(|i| (i as f32 * 0.731).sin())
            .collect();
        let v = vol([4, 5, 6], 2, data);
        save_mvol(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_mvol(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn declared_channels_exceed_payload() {
        let one = vol([2, 2, 2], 1, vec![0.5; 8]);
        let bytes = encode(&one).unwrap();
        let mut header: MvolHeader = {
            let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
            serde_json::from_slice(&bytes[12..12 + hlen]).unwrap()
        };
        header.channels = 2;
        header.channel_names.push("c1".into());
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[bytes.len() - 32..]);
        assert!(matches!(
            decode(&forged),
            Err(Error::PayloadLength {
                expected: 64,
                found: 32
            })
        ));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            decode(b"MVOL"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode(b"XXXX0001\0\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(&100u32.to_le_bytes());
        bad.extend_from_slice(b"{}");
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 8, .. })));
        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(&5u32.to_le_bytes());
        bad.extend_from_slice(b"{\"di");
        bad.push(b'!');
        assert!(matches!(decode(&bad), Err(Error::Format { .. })));
        let missing = std::path::Path::new("/nonexistent/dir/v.mvol");
        assert!(matches!(load_mvol(missing), Err(Error::Io { .. })));
    }

    #[test]
    fn canonical_payload_size() {
        let dims = super::super::CANONICAL_DIMS;
        let n = dims.iter().product::<usize>();
        let v = vol(dims, 2, vec![0.0; 2 * n]);
        let bytes = encode(&v).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(2 * 121 * 145 * 121 * 4, 16_983_560);
        assert_eq!(bytes.len() - 12 - hlen, 16_983_560);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            d in 1usize..4, h in 1usize..5, w in 1usize..5, c in 1usize..3,
            seed in any::<u32>(),
        ) {
            let n = c * d * h * w;
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x7f7f_ffff))
                .collect();
            let v = vol([d, h, w], c, data);
            let bytes = encode(&v).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            prop_assert_eq!(back, v);
        }
    }
}

//! RIFF/WAVE I/O for mono 32-bit IEEE float audio.

use std::path::Path;

use crate::{Error, Result};

const FORMAT_IEEE_FLOAT: u16 = 3;

pub fn encode_wav(samples: &[f64], sr: u32) -> Vec<u8> {
    let data_len = samples.len() as u32 * 4;
    let mut out = Vec::with_capacity(58 + data_len as usize);
    out.extend(b"RIFF");
    out.extend((4 + 26 + 12 + 8 + data_len).to_le_bytes());
    out.extend(b"WAVE");
    out.extend(b"fmt ");
    out.extend(18u32.to_le_bytes());
    out.extend(FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend(1u16.to_le_bytes());
    out.extend(sr.to_le_bytes());
    out.extend((sr * 4).to_le_bytes());
    out.extend(4u16.to_le_bytes());
    out.extend(32u16.to_le_bytes());
    out.extend(0u16.to_le_bytes());
    out.extend(b"fact");
    out.extend(4u32.to_le_bytes());
    out.extend((samples.len() as u32).to_le_bytes());
    out.extend(b"data");
    out.extend(data_len.to_le_bytes());
    for &s in samples {
        out.extend((s as f32).to_le_bytes());
    }
    out
}

/// Decodes mono float32 WAV data; returns samples and sample rate.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    let bad = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(0, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(bad(pos, "chunk exceeds file size"));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(bad(pos, "short fmt chunk"));
                }
                let f = &bytes[body..body + 16];
                format = Some((
                    u16::from_le_bytes([f[0], f[1]]),
                    u16::from_le_bytes([f[2], f[3]]),
                    u32::from_le_bytes([f[4], f[5], f[6], f[7]]),
                    u16::from_le_bytes([f[14], f[15]]),
                ));
            }
            b"data" => {
                let (tag, channels, sr, bits) =
                    format.ok_or_else(|| bad(pos, "data before fmt"))?;
                if tag != FORMAT_IEEE_FLOAT || channels != 1 || bits != 32 {
                    return Err(bad(pos, "only mono 32-bit float WAV is supported"));
                }
                let samples = bytes[body..body + len]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                return Ok((samples, sr));
            }
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    Err(bad(pos, "no data chunk"))
}

pub fn write_wav(path: &Path, samples: &[f64], sr: u32) -> Result<()> {
    std::fs::write(path, encode_wav(samples, sr)).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode_wav(&[0.5, -0.25], 22_050);
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize,
            bytes.len() - 8
        );
        assert_eq!(u16::from_le_bytes([bytes[20], bytes[21]]), 3);
        assert_eq!(
            u32::from_le_bytes(bytes[24..28].try_into().unwrap()),
            22_050
        );
        let (s, sr) = decode_wav(&bytes).unwrap();
        assert_eq!(sr, 22_050);
        assert_eq!(s, vec![0.5, -0.25]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_wav(b"nope").is_err());
        let mut bytes = encode_wav(&[0.1; 8], 8000);
        bytes.truncate(bytes.len() - 3);
        assert!(decode_wav(&bytes).is_err());
    }
}

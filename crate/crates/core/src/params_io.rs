//! Parameter file format.
//!
//! Layout: magic `CVLA`, format version (u16 LE), a length-prefixed
//! (u32 LE) canonical JSON blob of the configuration, then every
//! registry tensor in canonical order as
//! `name_len u16 LE | name | rank u8 | dims u32 LE * rank | payload`,
//! where the payload is little-endian IEEE floats at the declared
//! precision (f64 in verify64, f32 in fast32). Round-trips are
//! bit-exact; a file that fails any structural check loads nothing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{init_params, CompressionConfig, CompressorParams, PARAMS_VERSION};
use crate::tensor::Precision;

const MAGIC: &[u8; 4] = b"CVLA";

pub fn encode_params(params: &CompressorParams) -> Vec<u8> {
    let config_json = serde_json::to_vec(&params.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&params.version.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    for (name, tensor) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match params.config.precision {
            Precision::Verify64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::Fast32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn save_params(params: &CompressorParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("params file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<CompressorParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("corrupt header: bad magic".into()));
    }
    let version = c.u16()?;
    if version != PARAMS_VERSION {
        return Err(Error::Format(format!(
            "unsupported params version {version}, expected {PARAMS_VERSION}"
        )));
    }
    let config_len = c.u32()? as usize;
    let config_bytes = c.take(config_len)?;
    let config: CompressionConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Format(format!("corrupt config blob: {e}")))?;
    config.validate()?;

    // Rebuild the expected structure from the embedded config, then
    // overwrite the tensor data with the stored payloads.
    let mut params = init_params(&config, config.seed)?;
    for (name, slot) in params.named_tensors_mut() {
        let name_len = c.u16()? as usize;
        let got_name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if got_name != name {
            return Err(Error::Format(format!(
                "tensor order mismatch: found {got_name:?}, expected {name:?}"
            )));
        }
        let rank = c.u8()? as usize;
        if rank != slot.rank() {
            return Err(Error::Format(format!(
                "tensor {name} has rank {rank}, config implies {}",
                slot.rank()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        if dims != slot.dims() {
            return Err(Error::Format(format!(
                "tensor {name} has dims {dims:?}, config implies {:?}",
                slot.dims()
            )));
        }
        let count = slot.len();
        match config.precision {
            Precision::Verify64 => {
                let raw = c.take(count * 8)?;
                for (i, chunk) in raw.chunks_exact(8).enumerate() {
                    slot.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Precision::Fast32 => {
                let raw = c.take(count * 4)?;
                for (i, chunk) in raw.chunks_exact(4).enumerate() {
                    slot.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
                }
            }
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - c.pos
        )));
    }
    params.version = version;
    Ok(params)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<CompressorParams> {
    let bytes = std::fs::read(path)?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::token_count;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = CompressionConfig::desk();
        let params = init_params(&cfg, 42).unwrap();
        let bytes = encode_params(&params);
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode_params(&back), bytes);
    }

    #[test]
    fn fast32_round_trip_is_bit_exact() {
        let cfg = CompressionConfig {
            precision: Precision::Fast32,
            ..CompressionConfig::desk()
        };
        let params = init_params(&cfg, 43).unwrap();
        let bytes = encode_params(&params);
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(encode_params(&back), bytes);
    }

    #[test]
    fn truncation_anywhere_is_a_format_error() {
        let params = init_params(&CompressionConfig::desk(), 44).unwrap();
        let bytes = encode_params(&params);
        for cut in [0, 3, 5, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_params(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut at {cut} gave {err}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let params = init_params(&CompressionConfig::desk(), 45).unwrap();
        let mut bytes = encode_params(&params);
        bytes.push(0);
        let err = decode_params(&bytes).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let params = init_params(&CompressionConfig::desk(), 46).unwrap();
        let mut bytes = encode_params(&params);
        bytes[0] = b'X';
        assert!(decode_params(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn save_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cvla");
        let cfg = CompressionConfig::desk();
        let params = init_params(&cfg, 47).unwrap();
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, params);
        // the loaded params drive the same token budget
        assert_eq!(token_count(&back.config).unwrap(), 160);
    }

    #[test]
    fn loaded_params_reject_mismatched_request() {
        let params = init_params(&CompressionConfig::desk(), 48).unwrap();
        let bytes = encode_params(&params);
        let back = decode_params(&bytes).unwrap();
        let requested = CompressionConfig {
            k: 32,
            ..CompressionConfig::desk()
        };
        assert!(back.check_compatible(&requested).is_err());
    }
}

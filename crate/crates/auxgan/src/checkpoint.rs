//! Binary checkpoint / tensor-archive format.
//!
//! Layout: magic bytes `AXGN`, format version (u32 LE), a metadata section,
//! a tensor count, then per-tensor blobs (name, dtype tag, shape, f64 LE
//! data), and a trailing SHA-256 over everything before it. Loading verifies
//! the checksum before parsing, so truncation or corruption is detected
//! up front.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::TensorD;
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"AXGN";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Full training snapshot. `tensors` carries both networks' parameters,
/// optimizer moments, batch-norm running statistics, and SN power-iteration
/// vectors under namespaced keys; the scalar fields capture the loop state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub rng: RngState,
    pub data_epoch: u64,
    pub data_cursor: u64,
    /// Resolved run configuration, echoed verbatim for reproducibility.
    pub config_echo: String,
    pub tensors: Vec<(String, TensorD)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorD> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

struct CountingHasher<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for CountingHasher<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &TensorD) -> Result<()> {
    write_str(w, name)?;
    w.write_all(&[DTYPE_F64])?;
    write_u32(w, t.ndim() as u32)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    let slice = t
        .as_slice()
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is not contiguous")))?;
    for v in slice {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = CountingHasher {
        inner: std::io::BufWriter::new(file),
        hasher: Sha256::new(),
    };
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u64(&mut w, cp.iteration)?;
    write_u64(&mut w, cp.rng.seed)?;
    write_u64(&mut w, (cp.rng.word_pos >> 64) as u64)?;
    write_u64(&mut w, cp.rng.word_pos as u64)?;
    write_u64(&mut w, cp.data_epoch)?;
    write_u64(&mut w, cp.data_cursor)?;
    write_str(&mut w, &cp.config_echo)?;
    write_u64(&mut w, cp.tensors.len() as u64)?;
    for (name, t) in &cp.tensors {
        write_tensor(&mut w, name, t)?;
    }
    let digest = w.hasher.clone().finalize();
    w.inner.write_all(&digest)?;
    w.inner.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in header".into()))
    }

    fn tensor(&mut self) -> Result<(String, TensorD)> {
        let name = self.str()?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype tag {dtype}"
            )));
        }
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 8)?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 32 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let want = Sha256::digest(body);
    if want.as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let iteration = r.u64()?;
    let seed = r.u64()?;
    let hi = r.u64()?;
    let lo = r.u64()?;
    let word_pos = ((hi as u128) << 64) | lo as u128;
    let data_epoch = r.u64()?;
    let data_cursor = r.u64()?;
    let config_echo = r.str()?;
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint {
        version,
        iteration,
        rng: RngState { seed, word_pos },
        data_epoch,
        data_cursor,
        config_echo,
        tensors,
    })
}

/// Write a bare named-tensor archive (same framing as a checkpoint with no
/// loop state); used for external embedding weights.
pub fn write_tensor_archive(path: &Path, tensors: &[(String, TensorD)]) -> Result<()> {
    let cp = Checkpoint {
        version: VERSION,
        iteration: 0,
        rng: RngState { seed: 0, word_pos: 0 },
        data_epoch: 0,
        data_cursor: 0,
        config_echo: String::new(),
        tensors: tensors.to_vec(),
    };
    save_checkpoint(path, &cp)
}

/// Read back the named tensors of an archive (checkpoints work too).
pub fn read_tensor_archive(path: &Path) -> Result<Vec<(String, TensorD)>> {
    Ok(load_checkpoint(path)?.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            version: VERSION,
            iteration: 42,
            rng: RngState {
                seed: 7,
                word_pos: (123u128 << 64) | 456u128,
            },
            data_epoch: 3,
            data_cursor: 9,
            config_echo: "preset = \"desk-smoke\"".into(),
            tensors: vec![
                ("g.w".into(), arr2(&[[1.0, -2.5], [0.125, 3.0]]).into_dyn()),
                ("d.b".into(), ndarray::arr1(&[0.5, 0.25]).into_dyn()),
            ],
        }
    }

    #[test]
    fn roundtrip_is_lossless_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let cp = sample_checkpoint();
        save_checkpoint(&p1, &cp).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.iteration, cp.iteration);
        assert_eq!(loaded.rng, cp.rng);
        assert_eq!(loaded.data_epoch, 3);
        assert_eq!(loaded.data_cursor, 9);
        assert_eq!(loaded.config_echo, cp.config_echo);
        assert_eq!(loaded.tensors.len(), 2);
        assert_eq!(loaded.tensor("g.w").unwrap(), cp.tensor("g.w").unwrap());

        // save -> load -> save produces identical bytes.
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let truncated = &bytes[..bytes.len() - 7];
        std::fs::write(&p, truncated).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        let mut flipped = bytes.clone();
        flipped[10] ^= 0xff;
        std::fs::write(&p, &flipped).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        save_checkpoint(&p, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // Bump the version field and fix up the checksum.
        bytes[4] = 99;
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn tensor_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("weights.tar0");
        let tensors = vec![("conv1.w".to_string(), arr2(&[[0.5]]).into_dyn())];
        write_tensor_archive(&p, &tensors).unwrap();
        let back = read_tensor_archive(&p).unwrap();
        assert_eq!(back, tensors);
    }
}

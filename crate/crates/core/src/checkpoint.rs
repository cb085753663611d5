//! Versioned binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "SPTR"
//! version      u32      currently 1
//! layers       u32      J
//! hidden       u32      D
//! input_dim    u32      E
//! num_labels   u32      |L| (EOS included)
//! scheme       u8       0 copynext, 1 copy, 2 copyprev
//! seed         u64
//! has_vocab    u8       0 or 1
//! vocab_size   u32      present only when has_vocab = 1
//! labels       |L| strings, each u32 byte length + UTF-8
//! vocab        vocab_size strings, same encoding
//! array_count  u32
//! arrays       per array: name string, rows u64, cols u64, rows·cols f64
//! digest       32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{LabelSet, Vocab};
use crate::error::{CheckpointError, Error, Result};
use crate::linalg::Matrix;
use crate::linearize::Scheme;
use crate::model::{Model, ModelConfig, TransducerParams};

pub const MAGIC: &[u8; 4] = b"SPTR";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("size overflow".into()))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(cfg.layers);
    w.u32(cfg.hidden);
    w.u32(cfg.input_dim);
    w.u32(cfg.num_labels);
    w.u8(cfg.scheme.code());
    w.u64(cfg.seed);
    match &model.vocab {
        Some(v) => {
            w.u8(1);
            w.u32(v.len());
        }
        None => w.u8(0),
    }
    for l in model.labels.labels() {
        w.str(l);
    }
    if let Some(v) = &model.vocab {
        for t in v.tokens() {
            w.str(t);
        }
    }
    let arrays = model.params.arrays();
    w.u32(arrays.len());
    for (name, m) in arrays {
        w.str(&name);
        w.u64(m.rows as u64);
        w.u64(m.cols as u64);
        for v in &m.data {
            w.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let layers = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let input_dim = r.u32()? as usize;
    let num_labels = r.u32()? as usize;
    let scheme_code = r.u8()?;
    let scheme = Scheme::from_code(scheme_code)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown scheme code {scheme_code}")))?;
    let seed = r.u64()?;
    let vocab_size = match r.u8()? {
        0 => None,
        1 => Some(r.u32()? as usize),
        other => return Err(CheckpointError::Malformed(format!("bad vocab flag {other}")).into()),
    };
    let labels = (0..num_labels)
        .map(|_| r.str())
        .collect::<Result<Vec<_>, _>>()?;
    let vocab = match vocab_size {
        Some(v) => Some((0..v).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };
    let config = ModelConfig {
        layers,
        hidden,
        input_dim,
        num_labels,
        vocab_size,
        scheme,
        seed,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut params = TransducerParams::zeros(&config);
    let count = r.u32()? as usize;
    {
        let mut expected = params.arrays_mut();
        if count != expected.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} arrays stored, {} expected",
                expected.len()
            ))
            .into());
        }
        for (want_name, m) in expected.iter_mut() {
            let name = r.str()?;
            let rows = r.usize()?;
            let cols = r.usize()?;
            if &name != want_name || (rows, cols) != m.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "array {name} {rows}x{cols} where {want_name} {}x{} was expected",
                    m.rows, m.cols
                ))
                .into());
            }
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            **m = Matrix { rows, cols, data };
        }
    }
    let payload_end = r.pos;
    let stored = r.take(DIGEST_LEN)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos).into());
    }
    if Sha256::digest(&bytes[..payload_end]).as_slice() != stored {
        return Err(CheckpointError::ChecksumMismatch.into());
    }
    let labels = LabelSet::from_ordered(labels)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let vocab = vocab
        .map(Vocab::from_ordered)
        .transpose()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Model {
        config,
        params,
        labels,
        vocab,
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Refuses to run a model under a scheme other than the one it was trained on.
pub fn ensure_scheme(model: &Model, requested: Scheme) -> Result<()> {
    if model.config.scheme != requested {
        return Err(CheckpointError::SchemeMismatch {
            stored: model.config.scheme.to_string(),
            requested: requested.to_string(),
        }
        .into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(scheme: Scheme) -> Model {
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let vocab = Vocab::from_ordered(vec!["<unk>".into(), "x".into(), "y".into()]).unwrap();
        let cfg = ModelConfig {
            layers: 2,
            hidden: 4,
            input_dim: 3,
            num_labels: labels.len(),
            vocab_size: Some(vocab.len()),
            scheme,
            seed: 17,
        };
        Model::new(cfg, labels, Some(vocab)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(Scheme::CopyPrevBackward);
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.params.arrays().iter().zip(back.params.arrays()) {
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = to_bytes(&model(Scheme::CopyNextForward));
        for cut in [1, 5, 31, 32, 100] {
            let err = from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(CheckpointError::Truncated)),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = to_bytes(&model(Scheme::CopyNextForward));
        let k = bytes.len() - 40;
        bytes[k] ^= 0x01;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::ChecksumMismatch))
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = to_bytes(&model(Scheme::CopyNextForward));
        bytes.extend_from_slice(b"junk");
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::TrailingBytes(4)))
        ));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = to_bytes(&model(Scheme::CopyNextForward));
        bytes[4] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 9, .. }))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
    }

    #[test]
    fn scheme_guard() {
        let m = model(Scheme::CopyOnly);
        assert!(ensure_scheme(&m, Scheme::CopyOnly).is_ok());
        assert!(matches!(
            ensure_scheme(&m, Scheme::CopyNextForward),
            Err(Error::Checkpoint(CheckpointError::SchemeMismatch { .. }))
        ));
    }
}

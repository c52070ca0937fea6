//! Binary checkpoint format.
//!
//! ```text
//! "EMBAUG01" | u32 version | u32 tensor count
//! per tensor: u32 name length | name | u8 dtype (0 = f32) | u8 rank | u32 dims.. | f32 payload
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The first record is a
//! zero-element metadata tensor whose name carries the spec digest, role,
//! tag and spec text; parameter records follow in model order, named
//! `role[/tag]/param`.

use std::path::Path;

use super::model::{Model, Param};
use super::spec::{fnv1a, NetworkSpec};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EMBAUG01";
pub const VERSION: u32 = 1;
const META_PREFIX: &str = "__meta__";
const DTYPE_F32: u8 = 0;

fn meta_name(model: &Model) -> String {
    format!(
        "{META_PREFIX};digest={:016x};frozen={};tag={};spec={}",
        model.spec.digest(),
        u8::from(model.is_frozen()),
        model.tag.as_deref().unwrap_or(""),
        model.spec
    )
}

fn prefix(model: &Model) -> String {
    match &model.tag {
        Some(t) => format!("{}/{t}/", model.spec.role.name()),
        None => format!("{}/", model.spec.role.name()),
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    if model.tag.as_deref().is_some_and(|t| t.contains([';', '/'])) {
        return Err(Error::Invalid("checkpoint tags may not contain `;` or `/`".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32 + 1).to_le_bytes());

    let mut record = |name: &str, dims: &[usize], payload: &[f32]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    record(&meta_name(model), &[0], &[]);
    let pre = prefix(model);
    for p in model.params() {
        record(&format!("{pre}{}", p.name), p.value.shape(), p.value.data());
    }
    let digest = fnv1a(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(model)?)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    if bytes.len() < 8 + 4 + 4 + 8 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::DigestMismatch {
            expected: stored,
            found: actual,
        });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unknown dtype code {dtype} for `{name}`")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push((name, dims, data));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }

    let mut records = records.into_iter();
    let (meta, _, _) = records
        .next()
        .ok_or_else(|| Error::Format("checkpoint has no metadata record".into()))?;
    let fields = parse_meta(&meta)?;
    let spec: NetworkSpec = fields.spec.parse()?;
    if spec.digest() != fields.digest {
        return Err(Error::DigestMismatch {
            expected: fields.digest,
            found: spec.digest(),
        });
    }
    let mut model_for_prefix = Model::zeros(spec.clone())?;
    model_for_prefix.tag = (!fields.tag.is_empty()).then(|| fields.tag.to_owned());
    let pre = prefix(&model_for_prefix);
    let params = records
        .map(|(name, dims, data)| {
            let short = name
                .strip_prefix(&pre)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` lacks prefix `{pre}`")))?;
            Ok(Param {
                name: short.to_owned(),
                value: Tensor::new(dims, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::from_params(spec, params)?;
    model.tag = model_for_prefix.tag;
    if fields.frozen {
        model.freeze();
    }
    Ok(model)
}

struct Meta<'m> {
    digest: u64,
    frozen: bool,
    tag: &'m str,
    spec: &'m str,
}

fn parse_meta(name: &str) -> Result<Meta<'_>> {
    let bad = || Error::Format(format!("bad metadata record `{name}`"));
    let rest = name.strip_prefix(META_PREFIX).and_then(|r| r.strip_prefix(';')).ok_or_else(bad)?;
    let mut it = rest.splitn(4, ';');
    let mut field = |key: &str| {
        it.next()
            .and_then(|kv| kv.strip_prefix(key))
            .and_then(|v| v.strip_prefix('='))
            .ok_or_else(bad)
    };
    let digest = u64::from_str_radix(field("digest")?, 16).map_err(|_| bad())?;
    let frozen = field("frozen")? == "1";
    let tag = field("tag")?;
    let spec = field("spec")?;
    Ok(Meta {
        digest,
        frozen,
        tag,
        spec,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fsio::read(path)?)
}

/// Loads a checkpoint and refuses it unless its spec digest equals
/// `expected`'s.
pub fn load_checkpoint_as(path: &Path, expected: &NetworkSpec) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.spec.digest() != expected.digest() {
        return Err(Error::DigestMismatch {
            expected: expected.digest(),
            found: model.spec.digest(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn omega() -> Model {
        Model::init(NetworkSpec::omega(6).unwrap(), 3).unwrap().with_tag("hflip").frozen()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = Model::init(NetworkSpec::phi([3, 8, 8], &[2, 4]).unwrap(), 11).unwrap();
        m.param_mut("0.bias").unwrap().data_mut()[1] = -0.0;
        m.param_mut("0.bias").unwrap().data_mut()[0] = f32::MIN_POSITIVE / 2.0;
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back.spec, m.spec);
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bitwise_eq(&b.value));
        }
        let om = omega();
        let back = decode_checkpoint(&encode_checkpoint(&om).unwrap()).unwrap();
        assert_eq!(back, om);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&omega()).unwrap();
        assert_eq!(&bytes[..8], b"EMBAUG01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        let name_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let name = std::str::from_utf8(&bytes[20..20 + name_len]).unwrap();
        assert!(name.contains("tag=hflip"));
        let second = 20 + name_len + 2 + 4;
        let len2 = u32::from_le_bytes(bytes[second..second + 4].try_into().unwrap()) as usize;
        assert_eq!(&bytes[second + 4..second + 4 + len2], b"omega/hflip/0.weight");
    }

    #[test]
    fn corruption_is_refused() {
        let bytes = encode_checkpoint(&omega()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::DigestMismatch { .. })));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn unknown_version_is_refused() {
        let mut bytes = encode_checkpoint(&omega()).unwrap();
        bytes[8] = 9;
        let n = bytes.len() - 8;
        let d = fnv1a(&bytes[..n]);
        bytes[n..].copy_from_slice(&d.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn loading_phi_as_omega_is_a_digest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.ckpt");
        save_checkpoint(&Model::init(NetworkSpec::phi_default(), 1).unwrap(), &path).unwrap();
        let r = load_checkpoint_as(&path, &NetworkSpec::omega(512).unwrap());
        assert!(matches!(r, Err(Error::DigestMismatch { .. })));
        assert!(load_checkpoint_as(&path, &NetworkSpec::phi_default()).is_ok());
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::MissingInput(_))
        ));
    }
}

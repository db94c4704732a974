//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "BGPT"
//! version      u32      1
//! config       7 × u32  vocab_size d_model n_heads d_head d_ff n_layers max_seq_len
//! stage        u8       0 pretrain, 1 instruct, 2 rl_policy, 3 reward
//! count        u32      number of tensors
//! count × tensor, sorted by name:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8       0 = f32, 1 = f64
//!   ndims      u32
//!   dims       ndims × u32
//!   data       product(dims) values, 4 or 8 bytes each
//! crc32        u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! A tensor is stored as f32 when every value survives the round trip through
//! f32, so loading is bitwise exact either way.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params, Stage};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BGPT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn fits_f32(t: &Tensor) -> bool {
    t.data()
        .iter()
        .all(|&x| (x as f32 as f64).to_bits() == x.to_bits())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes `params` to the checkpoint byte layout.
pub fn to_bytes(params: &Params) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.d_head,
        c.d_ff,
        c.n_layers,
        c.max_seq_len,
    ] {
        put_u32(&mut out, v)?;
    }
    out.push(params.stage.tag());
    let mut named = params.named();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    put_u32(&mut out, named.len())?;
    for (name, t) in named {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let f32_ok = fits_f32(t);
        out.push(if f32_ok { DTYPE_F32 } else { DTYPE_F64 });
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        if f32_ok {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        } else {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses checkpoint bytes, validating magic, version and checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<Params> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version(version));
    }
    if bytes.len() < 12 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32("config")?;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_head: dims[3],
        d_ff: dims[4],
        n_layers: dims[5],
        max_seq_len: dims[6],
    };
    let tag = r.u8("stage")?;
    let stage =
        Stage::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown stage tag {tag}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if last.as_ref().is_some_and(|prev| *prev >= name) {
            return Err(Error::Format(format!("tensor table not sorted at {name}")));
        }
        let dtype = r.u8("dtype")?;
        let ndims = r.u32("ndims")?;
        let shape = (0..ndims)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F32 => r
                .take(numel.saturating_mul(4), "data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            DTYPE_F64 => r
                .take(numel.saturating_mul(8), "data")?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::Format(format!("unknown dtype {other} for {name}"))),
        };
        tensors.insert(name.clone(), Tensor::try_new(shape, data)?);
        last = Some(name);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Params::from_named(config, stage, tensors)
}

/// Writes `params` to `path` through a temporary file and an atomic rename.
pub fn save(params: &Params, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Params> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::{with_precision, Precision};

    fn model() -> Params {
        with_precision(Precision::F64, || {
            Params::init_with_std(ModelConfig::new(16, 2, 32, 2, 12), 4, 0.1)
                .unwrap()
                .to_reward_model()
                .unwrap()
        })
    }

    fn bits(p: &Params) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        p.named()
            .into_iter()
            .map(|(n, t)| {
                (
                    n,
                    t.shape().to_vec(),
                    t.data().iter().map(|x| x.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for p in [
            model(),
            Params::init(ModelConfig::new(8, 1, 16, 0, 4), 1).unwrap(),
        ] {
            save(&p, &path).unwrap();
            let q = load(&path).unwrap();
            assert_eq!(bits(&p), bits(&q));
            assert_eq!(p.config, q.config);
            assert_eq!(p.stage, q.stage);
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn f32_representable_tensors_are_stored_compactly() {
        let cfg = ModelConfig::new(8, 1, 16, 1, 4);
        let p32 = with_precision(Precision::F32, || Params::init(cfg, 1).unwrap());
        let p64 = with_precision(Precision::F64, || Params::init(cfg, 1).unwrap());
        let (a, b) = (to_bytes(&p32).unwrap(), to_bytes(&p64).unwrap());
        assert!((a.len() as f64) < 0.6 * b.len() as f64);
        assert_eq!(a, to_bytes(&p32).unwrap());
    }

    #[test]
    fn header_layout() {
        let b = to_bytes(&model()).unwrap();
        assert_eq!(&b[..4], b"BGPT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 260);
        assert_eq!(b[36], Stage::Reward.tag());
        let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
    }

    #[test]
    fn every_flipped_payload_byte_is_detected() {
        let b = to_bytes(&Params::init(ModelConfig::new(4, 1, 4, 0, 2), 1).unwrap()).unwrap();
        for i in 8..b.len() {
            let mut c = b.clone();
            c[i] ^= 0x10;
            assert!(from_bytes(&c).is_err(), "flip at {i} accepted");
        }
        let mut c = b.clone();
        c[40] ^= 1;
        assert!(matches!(from_bytes(&c), Err(Error::Corrupt(_))));
    }

    #[test]
    fn bad_headers_and_truncation() {
        let b = to_bytes(&model()).unwrap();
        let mut wrong = b.clone();
        wrong[0] = b'X';
        assert!(matches!(from_bytes(&wrong), Err(Error::Format(_))));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Version(2))));
        for cut in [0, 3, 7, 11, 40, b.len() / 2, b.len() - 1] {
            assert!(from_bytes(&b[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn truncated_body_with_valid_checksum_is_a_format_error() {
        let b = to_bytes(&model()).unwrap();
        let mut body = b[..100].to_vec();
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&body), Err(Error::Format(_))));
    }
}

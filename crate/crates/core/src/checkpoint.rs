//! The `VSECK` container shared by model and oracle checkpoints.
//!
//! Layout: the 5-byte magic `VSECK`, one version byte, then a sequence of
//! sections. Each section is a 4-byte ASCII tag, a u64 little-endian payload
//! length and the payload. Numeric payloads are little-endian u64 counts and
//! f64 values, so parameters round-trip bit for bit; configuration and logs
//! are JSON.
//!
//! | tag    | payload                                                   |
//! |--------|-----------------------------------------------------------|
//! | `KIND` | `model` or `oracle`                                       |
//! | `CONF` | JSON configuration                                        |
//! | `GRPM` | M, C, weight (M·C), bias (M)                              |
//! | `MIXT` | M, K, C, then per part: variance, priors (K), prototypes  |
//! | `CLSF` | n, d, class ids (n), weight (n·d), bias (n)               |
//! | `MAPR` | in, hidden, out, w1, b1, w2, b2                           |
//! | `BASE` | in, out, margin, mean, scale, map                         |
//! | `PERM` | channel permutation                                       |
//! | `LOG_` | JSON training log                                         |

use crate::attention::GroupingModel;
use crate::mixture::{MixtureModel, MixturePart};
use crate::potentials::{Classifier, CompatibilityBaseline, SemanticMapper};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"VSECK";
pub const VERSION: u8 = 1;

pub type Tag = [u8; 4];

pub const KIND: Tag = *b"KIND";
pub const CONF: Tag = *b"CONF";
pub const GRPM: Tag = *b"GRPM";
pub const MIXT: Tag = *b"MIXT";
pub const CLSF: Tag = *b"CLSF";
pub const MAPR: Tag = *b"MAPR";
pub const BASE: Tag = *b"BASE";
pub const PERM: Tag = *b"PERM";
pub const LOG: Tag = *b"LOG_";

const KNOWN: [Tag; 9] = [KIND, CONF, GRPM, MIXT, CLSF, MAPR, BASE, PERM, LOG];

/// Ordered sections of a container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sections(pub Vec<(Tag, Vec<u8>)>);

impl Sections {
    pub fn push(&mut self, tag: Tag, payload: Vec<u8>) {
        self.0.push((tag, payload));
    }

    pub fn get(&self, tag: Tag) -> Option<&[u8]> {
        self.0
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: Tag) -> Result<&[u8]> {
        self.get(tag).ok_or_else(|| {
            Error::Format(format!("missing section {}", String::from_utf8_lossy(&tag)))
        })
    }
}

pub fn encode(sections: &Sections) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for (tag, payload) in &sections.0 {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Sections> {
    if bytes.len() < MAGIC.len() + 1 {
        return Err(Error::Length(format!(
            "checkpoint of {} bytes is too short",
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = bytes[MAGIC.len()];
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let mut pos = MAGIC.len() + 1;
    let mut sections = Sections::default();
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(Error::Length(format!(
                "truncated section header at byte {pos}"
            )));
        }
        let tag: Tag = bytes[pos..pos + 4].try_into().expect("4 bytes");
        if !KNOWN.contains(&tag) {
            return Err(Error::Format(format!(
                "unknown section {:?} at byte {pos}",
                String::from_utf8_lossy(&tag)
            )));
        }
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        pos += 12;
        let remaining = (bytes.len() - pos) as u64;
        if len > remaining {
            return Err(Error::Length(format!(
                "section {} claims {len} bytes, {remaining} left",
                String::from_utf8_lossy(&tag)
            )));
        }
        let end = pos + len as usize;
        sections.push(tag, bytes[pos..end].to_vec());
        pos = end;
    }
    Ok(sections)
}

pub fn write_file(sections: &Sections, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(sections)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Sections> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Little-endian payload builder.
#[derive(Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u64(&mut self, v: usize) -> &mut Self {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        for x in v {
            self.f64(*x);
        }
        self
    }

    pub fn u64s(&mut self, v: &[usize]) -> &mut Self {
        for x in v {
            self.u64(*x);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Cursor over a payload; every read checks the remaining length.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Length(format!("{} section is truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("{} count overflows", self.what)))
    }

    /// A count that must fit in the rest of the payload at `unit` bytes each.
    pub fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Length(format!("{} section is truncated", self.what)));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Length("overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn u64s(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Length(format!(
                "{} section has {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_grouping(g: &GroupingModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(g.parts())
        .u64(g.channels())
        .f64s(&g.weight)
        .f64s(&g.bias);
    w.finish()
}

pub fn decode_grouping(bytes: &[u8]) -> Result<GroupingModel> {
    let mut r = Reader::new(bytes, "grouping");
    let m = r.count(8)?;
    let c = r.count(8)?;
    let weight = r.f64s(m.saturating_mul(c))?;
    let bias = r.f64s(m)?;
    r.finish()?;
    GroupingModel::from_params(m, c, weight, bias).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_mixture(model: &MixtureModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(model.num_parts())
        .u64(model.types())
        .u64(model.channels());
    for p in &model.parts {
        w.f64(p.variance).f64s(&p.priors);
        for theta in &p.prototypes {
            w.f64s(theta);
        }
    }
    w.finish()
}

pub fn decode_mixture(bytes: &[u8]) -> Result<MixtureModel> {
    let mut r = Reader::new(bytes, "mixture");
    let m = r.count(8)?;
    let k = r.count(8)?;
    let c = r.count(8)?;
    let mut parts = Vec::with_capacity(m);
    for _ in 0..m {
        let variance = r.f64()?;
        let priors = r.f64s(k)?;
        let prototypes = (0..k).map(|_| r.f64s(c)).collect::<Result<Vec<_>>>()?;
        parts.push(MixturePart {
            prototypes,
            priors,
            variance,
        });
    }
    r.finish()?;
    MixtureModel::new(parts).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_classifier(c: &Classifier) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(c.classes.len())
        .u64(c.input_dim)
        .u64s(&c.classes)
        .f64s(&c.weight)
        .f64s(&c.bias);
    w.finish()
}

pub fn decode_classifier(bytes: &[u8]) -> Result<Classifier> {
    let mut r = Reader::new(bytes, "classifier");
    let n = r.count(8)?;
    let d = r.count(8)?;
    let classes = r.u64s(n)?;
    let weight = r.f64s(n.saturating_mul(d))?;
    let bias = r.f64s(n)?;
    r.finish()?;
    Ok(Classifier {
        classes,
        input_dim: d,
        weight,
        bias,
    })
}

pub fn encode_mapper(m: &SemanticMapper) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(m.input_dim)
        .u64(m.hidden)
        .u64(m.output_dim)
        .f64s(&m.w1)
        .f64s(&m.b1)
        .f64s(&m.w2)
        .f64s(&m.b2);
    w.finish()
}

pub fn decode_mapper(bytes: &[u8]) -> Result<SemanticMapper> {
    let mut r = Reader::new(bytes, "mapper");
    let i = r.count(8)?;
    let h = r.count(8)?;
    let o = r.count(8)?;
    let w1 = r.f64s(h.saturating_mul(i))?;
    let b1 = r.f64s(h)?;
    let w2 = r.f64s(o.saturating_mul(h))?;
    let b2 = r.f64s(o)?;
    r.finish()?;
    Ok(SemanticMapper {
        input_dim: i,
        hidden: h,
        output_dim: o,
        w1,
        b1,
        w2,
        b2,
    })
}

pub fn encode_baseline(b: &CompatibilityBaseline) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(b.input_dim)
        .u64(b.output_dim)
        .f64(b.margin)
        .f64s(&b.mean)
        .f64s(&b.scale)
        .f64s(&b.map);
    w.finish()
}

pub fn decode_baseline(bytes: &[u8]) -> Result<CompatibilityBaseline> {
    let mut r = Reader::new(bytes, "baseline");
    let i = r.count(8)?;
    let o = r.count(8)?;
    let margin = r.f64()?;
    let mean = r.f64s(i)?;
    let scale = r.f64s(i)?;
    let map = r.f64s(o.saturating_mul(i))?;
    r.finish()?;
    Ok(CompatibilityBaseline {
        input_dim: i,
        output_dim: o,
        mean,
        scale,
        map,
        margin,
    })
}

pub fn encode_perm(perm: &[usize]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(perm.len()).u64s(perm);
    w.finish()
}

pub fn decode_perm(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes, "permutation");
    let n = r.count(8)?;
    let p = r.u64s(n)?;
    r.finish()?;
    let mut seen = vec![false; n];
    for &i in &p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Format(
                "channel permutation is not a permutation".into(),
            ));
        }
    }
    Ok(p)
}

pub fn json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("serializable value")
}

pub fn from_json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sections {
        let mut s = Sections::default();
        s.push(KIND, b"model".to_vec());
        let g = GroupingModel::from_params(
            2,
            3,
            vec![0.1, -0.2, 0.3, 1e-7, 5.0, -6.0],
            vec![0.5, -0.25],
        )
        .unwrap();
        s.push(GRPM, encode_grouping(&g));
        s
    }

    #[test]
    fn container_round_trip_is_byte_stable() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), bytes);
        let g = decode_grouping(back.require(GRPM).unwrap()).unwrap();
        assert_eq!(g.weight[3], 1e-7);
    }

    #[test]
    fn corrupted_containers_are_rejected() {
        let bytes = encode(&sample());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[5] = 9;
        assert!(matches!(
            decode(&bad_version),
            Err(Error::Version {
                expected: 1,
                found: 9
            })
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Length(_))
        ));
        let mut bad_len = bytes.clone();
        bad_len[10] = 0xff;
        assert!(matches!(decode(&bad_len), Err(Error::Length(_))));
        assert!(matches!(decode(b"VSE"), Err(Error::Length(_))));
    }

    #[test]
    fn section_payloads_check_lengths() {
        let g = encode_grouping(&GroupingModel::zeros(2, 2).unwrap());
        assert!(matches!(
            decode_grouping(&g[..g.len() - 1]),
            Err(Error::Length(_))
        ));
        let mut extra = g.clone();
        extra.push(0);
        assert!(matches!(decode_grouping(&extra), Err(Error::Length(_))));
        assert!(decode_perm(&encode_perm(&[1, 1])).is_err());
        assert_eq!(
            decode_perm(&encode_perm(&[2, 0, 1])).unwrap(),
            vec![2, 0, 1]
        );
    }
}

//! On-disk formats: the binary index, the projection-head sidecar and the
//! line-delimited corpus ingestion format. Little-endian throughout.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use half::f16;

use super::{Index, IndexError, ProjectionHead, StorageDtype};
use crate::types::{Embedding, HeadTag, IndexRecord};

pub const INDEX_MAGIC: [u8; 4] = *b"RGDX";
pub const INDEX_VERSION: u32 = 1;
pub const HEAD_MAGIC: [u8; 4] = *b"RGPH";
pub const HEAD_VERSION: u32 = 1;
pub const CORPUS_HEADER: &str = "#ragdistill-corpus v1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).ok_or(IndexError::TruncatedFile(what))?;
        if end > self.buf.len() {
            return Err(IndexError::TruncatedFile(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], IndexError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, IndexError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, len: usize, what: &'static str) -> Result<String, IndexError> {
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IndexError::MalformedCorpus {
            line: 0,
            reason: format!("{what} is not valid UTF-8"),
        })
    }

    fn embedding(&mut self, dim: usize, dtype: StorageDtype, what: &'static str) -> Result<Embedding, IndexError> {
        let values = match dtype {
            StorageDtype::F32 => self
                .take(dim * 4, what)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect(),
            StorageDtype::F16 => self
                .take(dim * 2, what)?
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().expect("chunk of 2")).to_f32())
                .collect(),
        };
        Ok(Embedding::new(values)?)
    }

    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_embedding(out: &mut Vec<u8>, e: &Embedding, dtype: StorageDtype) {
    for &v in e.values() {
        match dtype {
            StorageDtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
            StorageDtype::F16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
        }
    }
}

/// Serialize an index to bytes in the binary index format.
pub fn encode_index(index: &Index) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    out.push(index.dtype().tag());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for r in index.records() {
        out.extend_from_slice(&r.record_id.to_le_bytes());
        put_embedding(&mut out, &r.image_emb, index.dtype());
        put_embedding(&mut out, &r.text_emb, index.dtype());
        out.extend_from_slice(&(r.payload_ref.len() as u32).to_le_bytes());
        out.extend_from_slice(r.payload_ref.as_bytes());
        out.extend_from_slice(&(r.source_tag.len() as u16).to_le_bytes());
        out.extend_from_slice(r.source_tag.as_bytes());
    }
    out
}

pub fn decode_index(bytes: &[u8]) -> Result<Index, IndexError> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if magic != INDEX_MAGIC {
        return Err(IndexError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != INDEX_VERSION {
        return Err(IndexError::VersionMismatch { expected: INDEX_VERSION, found: version });
    }
    let dim = r.u32("dimension")? as usize;
    let dtype = StorageDtype::from_tag(r.u8("dtype")?)?;
    let count = r.u64("record count")?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let record_id = r.u64("record id")?;
        let image_emb = r.embedding(dim, dtype, "image embedding")?;
        let text_emb = r.embedding(dim, dtype, "text embedding")?;
        let plen = r.u32("payload length")? as usize;
        let payload_ref = r.string(plen, "payload_ref")?;
        let slen = r.u16("source length")? as usize;
        let source_tag = r.string(slen, "source_tag")?;
        records.push(IndexRecord { record_id, image_emb, text_emb, payload_ref, source_tag });
    }
    if !r.is_done() {
        return Err(IndexError::MalformedCorpus { line: 0, reason: "trailing bytes after last record".into() });
    }
    Index::new(dim, dtype, records)
}

pub fn write_index(index: &Index, path: impl AsRef<Path>) -> Result<(), IndexError> {
    fs::write(path, encode_index(index))?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Index, IndexError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_index(&bytes)
}

pub fn encode_heads(heads: &[ProjectionHead]) -> Vec<u8> {
    let mut out = Vec::new();
    for h in heads {
        out.extend_from_slice(&HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        out.push(h.head.as_u8());
        out.extend_from_slice(&(h.dim as u32).to_le_bytes());
        for v in h.weight.iter().chain(&h.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_heads(bytes: &[u8]) -> Result<Vec<ProjectionHead>, IndexError> {
    let mut r = Reader::new(bytes);
    let mut heads = Vec::new();
    while !r.is_done() {
        let magic = r.array::<4>("head magic")?;
        if magic != HEAD_MAGIC {
            return Err(IndexError::BadMagic(magic));
        }
        let version = r.u32("head version")?;
        if version != HEAD_VERSION {
            return Err(IndexError::VersionMismatch { expected: HEAD_VERSION, found: version });
        }
        let tag = r.u8("head tag")?;
        let head = HeadTag::from_u8(tag).ok_or(IndexError::UnknownDtype(tag))?;
        let dim = r.u32("head dimension")? as usize;
        let weight = (0..dim * dim).map(|_| r.f64("weights")).collect::<Result<Vec<_>, _>>()?;
        let bias = (0..dim).map(|_| r.f64("bias")).collect::<Result<Vec<_>, _>>()?;
        heads.push(ProjectionHead::from_parts(head, dim, weight, bias)?);
    }
    Ok(heads)
}

pub fn write_heads(heads: &[ProjectionHead], path: impl AsRef<Path>) -> Result<(), IndexError> {
    fs::write(path, encode_heads(heads))?;
    Ok(())
}

pub fn read_heads(path: impl AsRef<Path>) -> Result<Vec<ProjectionHead>, IndexError> {
    decode_heads(&fs::read(path)?)
}

fn format_embedding(e: &Embedding) -> String {
    e.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Write records in the corpus ingestion format:
/// `record_id \t image floats \t text floats \t payload_ref \t source_tag`.
pub fn write_corpus<W: Write>(records: &[IndexRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CORPUS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.record_id,
            format_embedding(&r.image_emb),
            format_embedding(&r.text_emb),
            r.payload_ref,
            r.source_tag
        )?;
    }
    Ok(())
}

fn parse_floats(field: &str, line: usize) -> Result<Embedding, IndexError> {
    let values = field
        .split_whitespace()
        .map(|t| t.parse::<f32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IndexError::MalformedCorpus { line, reason: e.to_string() })?;
    Embedding::new(values).map_err(|e| IndexError::MalformedCorpus { line, reason: e.to_string() })
}

/// Parse the corpus ingestion format. Blank lines and `#` comments are skipped.
pub fn parse_corpus<R: BufRead>(input: R) -> Result<Vec<IndexRecord>, IndexError> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(IndexError::MalformedCorpus {
                line: lineno,
                reason: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let record_id = fields[0]
            .trim()
            .parse()
            .map_err(|e: std::num::ParseIntError| IndexError::MalformedCorpus { line: lineno, reason: e.to_string() })?;
        records.push(IndexRecord {
            record_id,
            image_emb: parse_floats(fields[1], lineno)?,
            text_emb: parse_floats(fields[2], lineno)?,
            payload_ref: fields[3].to_owned(),
            source_tag: fields[4].to_owned(),
        });
    }
    Ok(records)
}

/// Read a corpus file and build an index, optionally L2-normalizing
/// embeddings (cosine similarity via dot product).
pub fn read_corpus(path: impl AsRef<Path>, dtype: StorageDtype, normalize: bool) -> Result<Index, IndexError> {
    let mut records = parse_corpus(BufReader::new(fs::File::open(path)?))?;
    records.sort_by_key(|r| r.record_id);
    let dim = records.first().map(|r| r.image_emb.dim()).unwrap_or(0);
    let index = Index::new(dim, dtype, records)?;
    Ok(if normalize { index.normalized() } else { index })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dtype: StorageDtype) -> Index {
        let records = vec![
            IndexRecord {
                record_id: 3,
                image_emb: Embedding::new(vec![0.1, -2.5, 1e-3]).unwrap(),
                text_emb: Embedding::new(vec![7.0, 0.333, -0.75]).unwrap(),
                payload_ref: "img/3.png#label=yes".into(),
                source_tag: "roco".into(),
            },
            IndexRecord {
                record_id: 10,
                image_emb: Embedding::new(vec![1.0, 0.0, -1.0]).unwrap(),
                text_emb: Embedding::new(vec![0.5, 0.25, 0.125]).unwrap(),
                payload_ref: "img/10.png".into(),
                source_tag: "pmc-oa".into(),
            },
        ];
        Index::new(3, dtype, records).unwrap()
    }

    #[test]
    fn f32_round_trip_is_bit_identical() {
        let idx = sample(StorageDtype::F32);
        let back = decode_index(&encode_index(&idx)).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn f16_round_trip_within_quantization_bound() {
        let idx = sample(StorageDtype::F16);
        let back = decode_index(&encode_index(&idx)).unwrap();
        for (a, b) in idx.records().iter().zip(back.records()) {
            for (x, y) in a.image_emb.values().iter().chain(a.text_emb.values()).zip(b.image_emb.values().iter().chain(b.text_emb.values())) {
                let bound = 2f32.powi(-10) * x.abs().max(2f32.powi(-14));
                assert!((x - y).abs() <= bound, "{x} vs {y}");
            }
            assert_eq!(a.payload_ref, b.payload_ref);
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = encode_index(&sample(StorageDtype::F32));
        bytes[0] = b'X';
        assert!(matches!(decode_index(&bytes), Err(IndexError::BadMagic(_))));
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = encode_index(&sample(StorageDtype::F32));
        bytes[4] = 9;
        assert!(matches!(decode_index(&bytes), Err(IndexError::VersionMismatch { found: 9, .. })));
        let bytes = encode_index(&sample(StorageDtype::F32));
        assert!(matches!(decode_index(&bytes[..bytes.len() - 3]), Err(IndexError::TruncatedFile(_))));
    }

    #[test]
    fn heads_round_trip() {
        let mut h = ProjectionHead::identity(HeadTag::Image, 2);
        h.weight[1] = 0.125;
        h.bias[0] = -3.5;
        let both = vec![ProjectionHead::identity(HeadTag::Text, 2), h];
        assert_eq!(decode_heads(&encode_heads(&both)).unwrap(), both);
    }

    #[test]
    fn corpus_text_round_trip() {
        let idx = sample(StorageDtype::F32);
        let mut buf = Vec::new();
        write_corpus(idx.records(), &mut buf).unwrap();
        let parsed = parse_corpus(buf.as_slice()).unwrap();
        assert_eq!(parsed, idx.records());
    }

    #[test]
    fn corpus_rejects_bad_lines() {
        let err = parse_corpus("1\t1 2\t1 2\tp\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IndexError::MalformedCorpus { line: 1, .. }));
        let err = parse_corpus("1\t1 x\t1 2\tp\ts\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IndexError::MalformedCorpus { .. }));
    }
}

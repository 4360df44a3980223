//! Binary feature files and UTF-8 transcripts.
//!
//! Feature file layout, all integers little-endian `u32`:
//!
//! ```text
//! magic    8 bytes  "MOLEFEAT"
//! version  u32      1
//! dim      u32      feature dimension d
//! count    u32      number of records
//! record*  { id_len u32, id bytes (UTF-8), frames u32, frames·d × f32 LE, row-major }
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MoleError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"MOLEFEAT";
pub const FEATURE_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize, path: &Path) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| MoleError::format(path, format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())
        .map_err(|e| MoleError::io(path, e))
}

fn get_u32(r: &mut impl Read, path: &Path) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| MoleError::format(path, "truncated file"))?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Writes `[T × d]` feature records. Values are stored as `f32`.
pub fn write_features(path: &Path, dim: usize, records: &[(&str, &Tensor)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| MoleError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(FEATURE_MAGIC)
        .map_err(|e| MoleError::io(path, e))?;
    put_u32(&mut w, FEATURE_VERSION as usize, path)?;
    put_u32(&mut w, dim, path)?;
    put_u32(&mut w, records.len(), path)?;
    for (id, t) in records {
        if t.shape().len() != 2 || t.cols() != dim {
            return Err(MoleError::dim("write_features", t.shape(), &[dim]));
        }
        put_u32(&mut w, id.len(), path)?;
        w.write_all(id.as_bytes())
            .map_err(|e| MoleError::io(path, e))?;
        put_u32(&mut w, t.rows(), path)?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| MoleError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| MoleError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(usize, Vec<(String, Tensor)>)> {
    let file = fs::File::open(path).map_err(|e| MoleError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| MoleError::format(path, "truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(MoleError::format(path, "bad magic"));
    }
    let version = get_u32(&mut r, path)?;
    if version != FEATURE_VERSION as usize {
        return Err(MoleError::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let dim = get_u32(&mut r, path)?;
    let count = get_u32(&mut r, path)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = get_u32(&mut r, path)?;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|_| MoleError::format(path, "truncated record id"))?;
        let id =
            String::from_utf8(id).map_err(|_| MoleError::format(path, "record id is not UTF-8"))?;
        let frames = get_u32(&mut r, path)?;
        let mut bytes = vec![0u8; frames * dim * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| MoleError::format(path, format!("truncated features for {id}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push((id, Tensor::new(vec![frames, dim], data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| MoleError::io(path, e))?;
    if !rest.is_empty() {
        return Err(MoleError::format(path, "trailing bytes after last record"));
    }
    Ok((dim, out))
}

/// One transcript line: `id<TAB>language<TAB>text`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptLine {
    pub id: String,
    pub language: String,
    pub text: String,
}

pub fn write_transcripts(path: &Path, lines: &[TranscriptLine]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&format!("{}\t{}\t{}\n", l.id, l.language, l.text));
    }
    fs::write(path, s).map_err(|e| MoleError::io(path, e))
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptLine>> {
    let file = fs::File::open(path).map_err(|e| MoleError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MoleError::io(path, e))?;
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(language), Some(text)) => out.push(TranscriptLine {
                id: id.to_string(),
                language: language.to_string(),
                text: text.to_string(),
            }),
            _ => {
                return Err(MoleError::format(
                    path,
                    format!("line {}: expected 3 tab-separated fields", n + 1),
                ))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feats");
        let a = Tensor::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0], vec![1e-3, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap();
        write_features(&path, 2, &[("u1", &a), ("ü2", &b)]).unwrap();
        let (dim, recs) = read_features(&path).unwrap();
        assert_eq!(dim, 2);
        assert_eq!(recs[0].0, "u1");
        assert_eq!(recs[1].0, "ü2");
        assert_eq!(recs[1].1, b);
        for (x, y) in recs[0].1.data().iter().zip(a.data()) {
            assert_eq!(*x, f64::from(*y as f32));
        }
        // 8 magic + 3·4 header + (4+2+4+24) + (4+3+4+8)
        assert_eq!(fs::metadata(&path).unwrap().len(), 8 + 12 + 34 + 19);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feats");
        fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            read_features(&path),
            Err(MoleError::Format { .. })
        ));
        let a = Tensor::zeros(vec![2, 3]);
        write_features(&path, 3, &[("u", &a)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(MoleError::Format { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        fs::write(&path, extra).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(MoleError::Format { .. })
        ));
    }

    #[test]
    fn transcripts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let lines = vec![
            TranscriptLine {
                id: "a".into(),
                language: "L0".into(),
                text: "abc".into(),
            },
            TranscriptLine {
                id: "b".into(),
                language: "L1".into(),
                text: "αβ".into(),
            },
        ];
        write_transcripts(&path, &lines).unwrap();
        assert_eq!(read_transcripts(&path).unwrap(), lines);
        fs::write(&path, "only\ttwo\n").unwrap();
        assert!(read_transcripts(&path).is_err());
    }
}

//! Feature and label file formats.
//!
//! AVF (features, little-endian):
//!
//! ```text
//! "AVF1" | u32 n | u32 dim | u8 dtype (0 = f32, 1 = f64) | n*dim values, row-major
//! ```
//!
//! AVL (labels, little-endian):
//!
//! ```text
//! "AVL1" | u32 n | u32 c | n*c bytes in {0, 1}
//! ```
//!
//! Files ending in `.csv` are read as comma-separated rows instead.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{AVPair, Dataset, Split};
use crate::error::{Error, Result};

pub const AVF_MAGIC: &[u8; 4] = b"AVF1";
pub const AVL_MAGIC: &[u8; 4] = b"AVL1";

pub const AUDIO_FILE: &str = "audio.avf";
pub const VISUAL_FILE: &str = "visual.avf";
pub const LABEL_FILE: &str = "labels.avl";
pub const SPLIT_FILE: &str = "split.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 4], what: &str) -> std::result::Result<(), String> {
    match bytes.get(..4) {
        Some(m) if m == magic => Ok(()),
        Some(m) if m[..3] == magic[..3] => Err(format!(
            "unsupported {what} version byte {:?} (expected {:?})",
            m[3] as char, magic[3] as char
        )),
        _ => Err(format!("bad magic: expected {:?}", String::from_utf8_lossy(magic))),
    }
}

pub fn encode_avf<R: AsRef<[f64]>>(rows: &[R], dim: usize, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + rows.len() * dim * dtype.width());
    out.extend_from_slice(AVF_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(dtype.code());
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(Error::Format(format!(
                "row {i} has length {} but dim is {dim}",
                r.len()
            )));
        }
        for &v in r {
            match dtype {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Parses an AVF byte stream. `expected_dim` is checked against the header.
pub fn decode_avf(bytes: &[u8], expected_dim: Option<usize>, path: &Path) -> Result<Vec<Vec<f64>>> {
    check_magic(bytes, AVF_MAGIC, "AVF").map_err(|r| load_err(path, r))?;
    let mut rd = Reader { bytes, pos: 4 };
    let short = || load_err(path, "truncated header");
    let n = rd.u32().ok_or_else(short)? as usize;
    let dim = rd.u32().ok_or_else(short)? as usize;
    let dtype = match rd.u8().ok_or_else(short)? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(load_err(path, format!("unknown dtype code {other}"))),
    };
    if let Some(exp) = expected_dim {
        if exp != dim {
            return Err(load_err(
                path,
                format!("dimension mismatch: header says {dim}, expected {exp}"),
            ));
        }
    }
    let payload = n * dim * dtype.width();
    if bytes.len() - rd.pos != payload {
        return Err(load_err(
            path,
            format!("payload is {} bytes, header implies {payload}", bytes.len() - rd.pos),
        ));
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            let b = rd.take(dtype.width()).expect("length checked");
            let v = match dtype {
                DType::F32 => f64::from(f32::from_le_bytes(b.try_into().unwrap())),
                DType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            };
            if !v.is_finite() {
                return Err(load_err(path, format!("non-finite value in row {i}")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn encode_avl<R: AsRef<[u8]>>(labels: &[R], classes: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + labels.len() * classes);
    out.extend_from_slice(AVL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        if l.len() != classes || l.iter().any(|&b| b > 1) {
            return Err(Error::Format(format!(
                "label row {i} is not a length-{classes} 0/1 vector"
            )));
        }
        out.extend_from_slice(l);
    }
    Ok(out)
}

pub fn decode_avl(bytes: &[u8], path: &Path) -> Result<Vec<Vec<u8>>> {
    check_magic(bytes, AVL_MAGIC, "AVL").map_err(|r| load_err(path, r))?;
    let mut rd = Reader { bytes, pos: 4 };
    let short = || load_err(path, "truncated header");
    let n = rd.u32().ok_or_else(short)? as usize;
    let c = rd.u32().ok_or_else(short)? as usize;
    if bytes.len() - rd.pos != n * c {
        return Err(load_err(
            path,
            format!("payload is {} bytes, header implies {}", bytes.len() - rd.pos, n * c),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = rd.take(c).expect("length checked");
        if row.iter().any(|&b| b > 1) {
            return Err(load_err(path, format!("label row {i} has an entry outside {{0, 1}}")));
        }
        out.push(row.to_vec());
    }
    Ok(out)
}

fn parse_csv_rows(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| load_err(path, format!("row {i}: cannot parse {f:?}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(load_err(path, format!("non-finite value in row {i}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads feature vectors from an AVF file, or from CSV when the path ends in `.csv`.
pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<Vec<Vec<f64>>> {
    if is_csv(path) {
        let rows = parse_csv_rows(&fs::read_to_string(path)?, path)?;
        let dim = expected_dim.or_else(|| rows.first().map(Vec::len));
        if let Some(dim) = dim {
            if let Some(i) = rows.iter().position(|r| r.len() != dim) {
                return Err(load_err(
                    path,
                    format!(
                        "dimension mismatch in row {i}: {} values, expected {dim}",
                        rows[i].len()
                    ),
                ));
            }
        }
        Ok(rows)
    } else {
        decode_avf(&fs::read(path)?, expected_dim, path)
    }
}

pub fn load_labels(path: &Path) -> Result<Vec<Vec<u8>>> {
    if is_csv(path) {
        let rows = parse_csv_rows(&fs::read_to_string(path)?, path)?;
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .map(|&v| match v {
                        0.0 => Ok(0u8),
                        1.0 => Ok(1u8),
                        _ => Err(load_err(path, format!("label row {i} has an entry outside {{0, 1}}"))),
                    })
                    .collect()
            })
            .collect()
    } else {
        decode_avl(&fs::read(path)?, path)
    }
}

pub fn write_features<R: AsRef<[f64]>>(path: &Path, rows: &[R], dim: usize, dtype: DType) -> Result<()> {
    fs::write(path, encode_avf(rows, dim, dtype)?)?;
    Ok(())
}

pub fn write_labels<R: AsRef<[u8]>>(path: &Path, labels: &[R], classes: usize) -> Result<()> {
    fs::write(path, encode_avl(labels, classes)?)?;
    Ok(())
}

pub fn encode_split(assignment: &[Split]) -> String {
    let mut s = String::from("index,split\n");
    for (i, a) in assignment.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", a.as_str()));
    }
    s
}

pub fn decode_split(text: &str, path: &Path) -> Result<Vec<Split>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, tag) = line
            .split_once(',')
            .ok_or_else(|| load_err(path, format!("line {line_no}: expected `index,split`")))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| load_err(path, format!("line {line_no}: bad index")))?;
        if idx != out.len() {
            return Err(load_err(
                path,
                format!("line {line_no}: indices must be consecutive from 0"),
            ));
        }
        out.push(match tag.trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(load_err(path, format!("line {line_no}: unknown split {other:?}"))),
        });
    }
    Ok(out)
}

/// On-disk dataset: features, labels and the train/test manifest.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub audio: PathBuf,
    pub visual: PathBuf,
    pub labels: PathBuf,
    pub split: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            audio: dir.join(AUDIO_FILE),
            visual: dir.join(VISUAL_FILE),
            labels: dir.join(LABEL_FILE),
            split: dir.join(SPLIT_FILE),
        }
    }

    pub fn write(&self, dataset: &Dataset, assignment: &[Split], dtype: DType) -> Result<()> {
        let audio: Vec<&[f64]> = dataset.pairs().iter().map(|p| p.audio.as_slice()).collect();
        let visual: Vec<&[f64]> = dataset.pairs().iter().map(|p| p.visual.as_slice()).collect();
        let labels: Vec<&[u8]> = dataset.pairs().iter().map(|p| p.label.as_slice()).collect();
        write_features(&self.audio, &audio, dataset.audio_dim(), dtype)?;
        write_features(&self.visual, &visual, dataset.visual_dim(), dtype)?;
        write_labels(&self.labels, &labels, dataset.classes())?;
        fs::write(&self.split, encode_split(assignment))?;
        Ok(())
    }

    /// Loads every sample plus the split manifest.
    pub fn read(&self) -> Result<(Dataset, Vec<Split>)> {
        let audio = load_features(&self.audio, None)?;
        let visual = load_features(&self.visual, None)?;
        let labels = load_labels(&self.labels)?;
        if audio.len() != visual.len() || audio.len() != labels.len() {
            return Err(load_err(
                &self.labels,
                format!(
                    "sample counts disagree: audio {}, visual {}, labels {}",
                    audio.len(),
                    visual.len(),
                    labels.len()
                ),
            ));
        }
        let classes = labels.first().map_or(0, Vec::len);
        let pairs = audio
            .into_iter()
            .zip(visual)
            .zip(labels)
            .map(|((audio, visual), label)| AVPair { audio, visual, label })
            .collect();
        let provenance = format!("files in {}", self.audio.parent().unwrap_or(Path::new(".")).display());
        let dataset = Dataset::new(pairs, classes, Split::All, provenance)?;
        let split = decode_split(&fs::read_to_string(&self.split)?, &self.split)?;
        if split.len() != dataset.len() {
            return Err(load_err(
                &self.split,
                format!("manifest lists {} samples, dataset has {}", split.len(), dataset.len()),
            ));
        }
        Ok((dataset, split))
    }
}

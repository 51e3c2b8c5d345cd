//! Block-partitioned, line-oriented record storage.
//!
//! A dataset is a UTF-8 file with one `key\tvalue` record per line. The file
//! is cut into fixed-size blocks, and each block is one logical split. Reads
//! are positioned (`pread`), so a [`BlockFile`] can be shared by concurrent
//! readers without coordination.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{EarlError, Result};

pub const DEFAULT_BLOCK_SIZE: u64 = 1 << 20;

const READ_CHUNK: usize = 512;

/// Payload of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Category(String),
}

impl Value {
    pub fn parse(text: &str) -> Value {
        let text = text.trim();
        if text.contains(',') {
            let parsed: std::result::Result<Vec<f64>, _> =
                text.split(',').map(|c| c.trim().parse::<f64>()).collect();
            if let Ok(v) = parsed {
                if v.iter().all(|x| x.is_finite()) {
                    return Value::Vector(v);
                }
            }
            return Value::Category(text.to_string());
        }
        match text.parse::<f64>() {
            Ok(x) if x.is_finite() => Value::Scalar(x),
            _ => Value::Category(text.to_string()),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Scalar(x) => write!(f, "{x}"),
            Value::Vector(v) => {
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
            Value::Category(s) => f.write_str(s),
        }
    }
}

/// Where a record lives: the split holding its first byte and that byte's offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub split_id: usize,
    pub line_start: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    pub value: Value,
    pub origin: Origin,
    /// Line length in bytes, including the terminating newline.
    pub bytes: u32,
}

impl Record {
    /// Parses one line (without its newline).
    pub fn parse_line(line: &str, origin: Origin, bytes: u32) -> Result<Record> {
        let (key, value) = match line.split_once('\t') {
            Some(kv) => kv,
            None => line
                .trim()
                .split_once(char::is_whitespace)
                .ok_or_else(|| EarlError::MalformedRecord {
                    offset: origin.line_start,
                    reason: "expected `key<TAB>value`".into(),
                })?,
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(EarlError::MalformedRecord {
                offset: origin.line_start,
                reason: "empty key".into(),
            });
        }
        Ok(Record {
            key: key.to_string(),
            value: Value::parse(value),
            origin,
            bytes,
        })
    }

    /// Builds an in-memory record whose origin is its stream index.
    pub fn synthetic(index: u64, value: Value) -> Record {
        Record {
            key: format!("r{index}"),
            value,
            origin: Origin {
                split_id: 0,
                line_start: index,
            },
            bytes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub split_id: usize,
    pub start: u64,
    pub length: u64,
}

impl Split {
    pub fn end(&self) -> u64 {
        self.start + self.length
    }

    pub fn contains(&self, pos: u64) -> bool {
        pos >= self.start && pos < self.end()
    }
}

#[derive(Debug, Clone)]
pub struct BlockFile {
    path: PathBuf,
    file: Arc<File>,
    total_bytes: u64,
    block_size: u64,
    record_count_estimate: Option<u64>,
}

/// Opens a dataset and records its size. Splits are computed on demand.
pub fn open_dataset(path: impl AsRef<Path>, block_size: u64) -> Result<BlockFile> {
    let path = path.as_ref();
    if block_size == 0 {
        return Err(EarlError::invalid("block_size must be positive"));
    }
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EarlError::MissingDataset(path.to_path_buf()),
        _ => EarlError::Io(e),
    })?;
    let total_bytes = file.metadata()?.len();
    if total_bytes == 0 {
        return Err(EarlError::EmptyDataset(path.to_path_buf()));
    }
    Ok(BlockFile {
        path: path.to_path_buf(),
        file: Arc::new(file),
        total_bytes,
        block_size,
        record_count_estimate: None,
    })
}

/// Disjoint splits covering the whole file, each at most one block long.
pub fn logical_splits(bf: &BlockFile) -> Vec<Split> {
    let mut splits = Vec::with_capacity(bf.split_count());
    let mut start = 0;
    while start < bf.total_bytes {
        let length = bf.block_size.min(bf.total_bytes - start);
        splits.push(Split {
            split_id: splits.len(),
            start,
            length,
        });
        start += length;
    }
    splits
}

/// Resolves a byte position to a record.
///
/// A position at a line start yields that line. Any other position skips
/// past the next newline and yields the following line, reading across the
/// split boundary when needed.
pub fn read_line_at(bf: &BlockFile, split: &Split, pos: u64) -> Result<Record> {
    if !split.contains(pos) {
        return Err(EarlError::invalid(format!(
            "position {pos} outside split {} [{}, {})",
            split.split_id,
            split.start,
            split.end()
        )));
    }
    bf.read_line_from(pos)
}

impl BlockFile {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn split_count(&self) -> usize {
        self.total_bytes.div_ceil(self.block_size) as usize
    }

    pub fn record_count_estimate(&self) -> Option<u64> {
        self.record_count_estimate
    }

    pub fn set_record_count_estimate(&mut self, count: u64) {
        self.record_count_estimate = Some(count);
    }

    pub fn split_of(&self, pos: u64) -> usize {
        (pos / self.block_size) as usize
    }

    fn is_line_start(&self, pos: u64) -> Result<bool> {
        if pos == 0 {
            return Ok(true);
        }
        let mut b = [0u8; 1];
        self.file.read_exact_at(&mut b, pos - 1)?;
        Ok(b[0] == b'\n')
    }

    /// Offset just past the first newline at or after `pos`, if any.
    fn skip_past_newline(&self, mut pos: u64) -> Result<Option<u64>> {
        let mut buf = [0u8; READ_CHUNK];
        while pos < self.total_bytes {
            let want = READ_CHUNK.min((self.total_bytes - pos) as usize);
            let got = self.file.read_at(&mut buf[..want], pos)?;
            if got == 0 {
                break;
            }
            if let Some(i) = buf[..got].iter().position(|&b| b == b'\n') {
                return Ok(Some(pos + i as u64 + 1));
            }
            pos += got as u64;
        }
        Ok(None)
    }

    fn read_line_from(&self, pos: u64) -> Result<Record> {
        let line_start = if self.is_line_start(pos)? {
            pos
        } else {
            match self.skip_past_newline(pos)? {
                Some(next) if next < self.total_bytes => next,
                _ => return Err(EarlError::NoFollowingLine(pos)),
            }
        };
        self.record_at_line_start(line_start)
    }

    /// Parses the line beginning exactly at `line_start`.
    pub fn record_at_line_start(&self, line_start: u64) -> Result<Record> {
        let mut line = Vec::with_capacity(64);
        let mut buf = [0u8; READ_CHUNK];
        let mut cursor = line_start;
        let mut terminated = false;
        while cursor < self.total_bytes {
            let want = READ_CHUNK.min((self.total_bytes - cursor) as usize);
            let got = self.file.read_at(&mut buf[..want], cursor)?;
            if got == 0 {
                break;
            }
            if let Some(i) = buf[..got].iter().position(|&b| b == b'\n') {
                line.extend_from_slice(&buf[..i]);
                terminated = true;
                break;
            }
            line.extend_from_slice(&buf[..got]);
            cursor += got as u64;
        }
        let bytes = line.len() as u32 + u32::from(terminated);
        let text = std::str::from_utf8(&line).map_err(|e| EarlError::MalformedRecord {
            offset: line_start,
            reason: e.to_string(),
        })?;
        let origin = Origin {
            split_id: self.split_of(line_start),
            line_start,
        };
        Record::parse_line(text, origin, bytes)
    }

    /// Sequential scan over every record in file order.
    pub fn scan(&self) -> Result<RecordScan> {
        let file = File::open(&self.path)?;
        Ok(RecordScan {
            reader: BufReader::with_capacity(1 << 16, file),
            offset: 0,
            block_size: self.block_size,
            line: String::new(),
        })
    }
}

pub struct RecordScan {
    reader: BufReader<File>,
    offset: u64,
    block_size: u64,
    line: String,
}

impl Iterator for RecordScan {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        self.line.clear();
        match self.reader.read_line(&mut self.line) {
            Ok(0) => None,
            Ok(n) => {
                let origin = Origin {
                    split_id: (self.offset / self.block_size) as usize,
                    line_start: self.offset,
                };
                self.offset += n as u64;
                let text = self.line.strip_suffix('\n').unwrap_or(&self.line);
                if text.trim().is_empty() {
                    return self.next();
                }
                Some(Record::parse_line(text, origin, n as u32))
            }
            Err(e) => Some(Err(e.into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use proptest::prelude::*;

    use super::*;

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn open_records_size() {
        let f = write_file("k0\t1.0000\nk1\t2.0000\nk2\t3.0000\nk3\t4.0000\n");
        let bf = open_dataset(f.path(), 16).unwrap();
        assert_eq!(bf.total_bytes(), 40);
        assert_eq!(bf.split_count(), 3);
    }

    #[test]
    fn open_rejects_empty_and_missing() {
        let f = write_file("");
        assert!(matches!(
            open_dataset(f.path(), 16),
            Err(EarlError::EmptyDataset(_))
        ));
        assert!(matches!(
            open_dataset("/nonexistent/earl/data.tsv", 16),
            Err(EarlError::MissingDataset(_))
        ));
    }

    #[test]
    fn splits_cover_file() {
        let f = write_file(&"x".repeat(40));
        let bf = open_dataset(f.path(), 16).unwrap();
        let got: Vec<(u64, u64)> = logical_splits(&bf)
            .iter()
            .map(|s| (s.start, s.length))
            .collect();
        assert_eq!(got, vec![(0, 16), (16, 16), (32, 8)]);

        let f = write_file(&"x".repeat(16));
        let bf = open_dataset(f.path(), 16).unwrap();
        assert_eq!(logical_splits(&bf).len(), 1);
    }

    #[test]
    fn read_line_examples() {
        let f = write_file("a 1\nb 2\n");
        let bf = open_dataset(f.path(), 16).unwrap();
        let split = logical_splits(&bf)[0];

        let r = read_line_at(&bf, &split, 0).unwrap();
        assert_eq!(r.key, "a");
        assert_eq!(r.value, Value::Scalar(1.0));
        assert_eq!(r.origin.line_start, 0);

        let r = read_line_at(&bf, &split, 2).unwrap();
        assert_eq!(r.key, "b");
        assert_eq!(r.value, Value::Scalar(2.0));
        assert_eq!(r.origin.line_start, 4);

        assert!(matches!(
            read_line_at(&bf, &split, 7),
            Err(EarlError::NoFollowingLine(7))
        ));
    }

    #[test]
    fn read_crosses_split_boundary() {
        // Second line starts at 6 and runs past the first 8-byte block.
        let f = write_file("a\t1.5\nlongkey\t22\n");
        let bf = open_dataset(f.path(), 8).unwrap();
        let splits = logical_splits(&bf);
        let r = read_line_at(&bf, &splits[0], 3).unwrap();
        assert_eq!(r.key, "longkey");
        assert_eq!(r.origin, Origin { split_id: 0, line_start: 6 });
        assert_eq!(r.bytes, 11);
    }

    #[test]
    fn value_parsing() {
        assert_eq!(Value::parse("2.5"), Value::Scalar(2.5));
        assert_eq!(Value::parse("1,2"), Value::Vector(vec![1.0, 2.0]));
        assert_eq!(Value::parse("yes"), Value::Category("yes".into()));
        assert_eq!(Value::parse("NaN"), Value::Category("NaN".into()));
    }

    #[test]
    fn scan_yields_all_records() {
        let f = write_file("a\t1\nb\t2\nc\t3\n");
        let bf = open_dataset(f.path(), 4).unwrap();
        let recs: Vec<Record> = bf.scan().unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].origin, Origin { split_id: 2, line_start: 8 });
    }

    /// Brute-force line index: the record start for every byte position.
    fn brute_force_targets(contents: &[u8]) -> Vec<Option<u64>> {
        let starts: Vec<u64> = std::iter::once(0)
            .chain(
                contents
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == b'\n')
                    .map(|(i, _)| i as u64 + 1),
            )
            .filter(|&s| (s as usize) < contents.len())
            .collect();
        (0..contents.len() as u64)
            .map(|pos| starts.iter().copied().find(|&s| s >= pos))
            .collect()
    }

    proptest! {
        #[test]
        fn read_line_matches_line_index(
            lens in proptest::collection::vec(1usize..12, 1..60),
            block in 1u64..64,
        ) {
            let mut contents = String::new();
            for (i, len) in lens.iter().enumerate() {
                let key = format!("k{i}");
                let pad = "9".repeat(*len);
                contents.push_str(&format!("{key}\t{pad}\n"));
            }
            prop_assume!(contents.len() <= 1000);
            let f = write_file(&contents);
            let bf = open_dataset(f.path(), block).unwrap();
            let splits = logical_splits(&bf);
            let expected = brute_force_targets(contents.as_bytes());
            for (pos, want) in expected.iter().enumerate() {
                let pos = pos as u64;
                let split = splits[bf.split_of(pos)];
                match (read_line_at(&bf, &split, pos), want) {
                    (Ok(r), Some(s)) => prop_assert_eq!(r.origin.line_start, *s),
                    (Err(EarlError::NoFollowingLine(_)), None) => {}
                    (got, want) => prop_assert!(false, "pos {}: {:?} vs {:?}", pos, got.map(|r| r.origin), want),
                }
            }
        }

        #[test]
        fn splits_partition_bytes(total in 1u64..5000, block in 1u64..700) {
            let f = write_file(&"z".repeat(total as usize));
            let bf = open_dataset(f.path(), block).unwrap();
            let splits = logical_splits(&bf);
            prop_assert_eq!(splits.len() as u64, total.div_ceil(block));
            let mut next = 0;
            for (i, s) in splits.iter().enumerate() {
                prop_assert_eq!(s.split_id, i);
                prop_assert_eq!(s.start, next);
                prop_assert!(s.length >= 1 && s.length <= block);
                next = s.end();
            }
            prop_assert_eq!(next, total);
        }
    }
}

//! `MSHV` clip container (little-endian):
//!
//! ```text
//! "MSHV" | u32 version=1 | u32 n_clips | u16 C,T,H,W | u8 label flags
//! per clip: [i32 appearance] [i32 motion] C·T·H·W × f32
//! ```
//!
//! Flag bit 0 marks the appearance label as present, bit 1 the motion label.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSHV";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 2 * 4 + 1;
const FLAG_APPEARANCE: u8 = 1;
const FLAG_MOTION: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub n_clips: u32,
    pub channels: u16,
    pub frames: u16,
    pub height: u16,
    pub width: u16,
    pub appearance: bool,
    pub motion: bool,
}

impl Header {
    pub fn clip_len(&self) -> usize {
        self.channels as usize * self.frames as usize * self.height as usize * self.width as usize
    }

    fn record_len(&self) -> u64 {
        4 * (self.clip_len() as u64 + self.appearance as u64 + self.motion as u64)
    }

    fn flags(&self) -> u8 {
        (if self.appearance { FLAG_APPEARANCE } else { 0 }) | (if self.motion { FLAG_MOTION } else { 0 })
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN as usize);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.n_clips.to_le_bytes());
        for d in [self.channels, self.frames, self.height, self.width] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.push(self.flags());
        b
    }

    fn decode(path: &Path, b: &[u8]) -> Result<Self> {
        let fail = |offset: u64, msg: String| Error::Format { path: path.to_path_buf(), offset, msg };
        if b.len() < HEADER_LEN as usize {
            return Err(fail(b.len() as u64, format!("header truncated ({} of {HEADER_LEN} bytes)", b.len())));
        }
        if &b[..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &b[..4])));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        let flags = b[20];
        if flags & !(FLAG_APPEARANCE | FLAG_MOTION) != 0 {
            return Err(fail(20, format!("unknown label flags {flags:#04x}")));
        }
        let h = Header {
            n_clips: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            channels: u16_at(12),
            frames: u16_at(14),
            height: u16_at(16),
            width: u16_at(18),
            appearance: flags & FLAG_APPEARANCE != 0,
            motion: flags & FLAG_MOTION != 0,
        };
        if h.clip_len() == 0 {
            return Err(fail(12, "zero-sized clip dimensions".into()));
        }
        Ok(h)
    }
}

/// One stored clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub appearance: Option<i32>,
    pub motion: Option<i32>,
    pub data: Vec<f32>,
}

/// Streams records into a new container; the record count must match the header.
pub fn write_container<I>(path: &Path, header: &Header, records: I) -> Result<()>
where
    I: IntoIterator<Item = Result<ClipRecord>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header.encode()).map_err(io)?;
    let mut count = 0u32;
    for rec in records {
        let rec = rec?;
        if rec.appearance.is_some() != header.appearance || rec.motion.is_some() != header.motion {
            return Err(Error::invalid("write_container", format!("clip {count} labels disagree with header flags")));
        }
        if rec.data.len() != header.clip_len() {
            return Err(Error::invalid(
                "write_container",
                format!("clip {count} has {} values, header says {}", rec.data.len(), header.clip_len()),
            ));
        }
        for l in [rec.appearance, rec.motion].into_iter().flatten() {
            w.write_all(&l.to_le_bytes()).map_err(io)?;
        }
        let mut bytes = Vec::with_capacity(rec.data.len() * 4);
        for v in &rec.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
        count += 1;
    }
    if count != header.n_clips {
        return Err(Error::invalid("write_container", format!("wrote {count} clips, header says {}", header.n_clips)));
    }
    w.flush().map_err(io)
}

/// Random-access reader over a validated container.
pub struct ClipFile {
    path: PathBuf,
    file: File,
    header: Header,
}

impl ClipFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut head = Vec::with_capacity(HEADER_LEN as usize);
        (&mut file).take(HEADER_LEN).read_to_end(&mut head).map_err(|e| Error::io(&path, e))?;
        let header = Header::decode(&path, &head)?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let expected = HEADER_LEN + header.n_clips as u64 * header.record_len();
        if len < expected {
            let complete = (len - HEADER_LEN) / header.record_len();
            return Err(Error::Format {
                path,
                offset: len,
                msg: format!(
                    "truncated: clip {complete} of {} ends past the end of the file ({expected} bytes expected)",
                    header.n_clips
                ),
            });
        }
        if len > expected {
            return Err(Error::Format { path, offset: expected, msg: format!("{} trailing bytes", len - expected) });
        }
        Ok(ClipFile { path, file, header })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.n_clips as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&mut self, index: usize) -> Result<ClipRecord> {
        if index >= self.len() {
            return Err(Error::invalid("read_clip", format!("clip {index} of {}", self.len())));
        }
        let h = self.header;
        let offset = HEADER_LEN + index as u64 * h.record_len();
        let mut buf = vec![0u8; h.record_len() as usize];
        let path = &self.path;
        self.file.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
        self.file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut words = buf.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let mut label = |present: bool, name: &str, pos: u64| -> Result<Option<i32>> {
            if !present {
                return Ok(None);
            }
            let v = i32::from_le_bytes(words.next().unwrap());
            if v < 0 {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: pos,
                    msg: format!("negative {name} label {v}"),
                });
            }
            Ok(Some(v))
        };
        let appearance = label(h.appearance, "appearance", offset)?;
        let motion = label(h.motion, "motion", offset + 4 * h.appearance as u64)?;
        let data: Vec<f32> = words.map(f32::from_le_bytes).collect();
        Ok(ClipRecord { appearance, motion, data })
    }

    /// One epoch of batches in file order, or in a seeded permutation.
    pub fn batches(self, batch_size: usize, shuffle: Option<u64>) -> Result<ClipBatches> {
        if batch_size == 0 {
            return Err(Error::invalid("read_clips", "batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(ClipBatches { file: self, order, batch_size, next: 0 })
    }

    /// Reads the given clips as one batch.
    pub fn batch(&mut self, indices: &[usize]) -> Result<ClipBatch> {
        let h = self.header;
        let mut data = Vec::with_capacity(indices.len() * h.clip_len());
        let mut app = Vec::new();
        let mut mot = Vec::new();
        for &i in indices {
            let r = self.read(i)?;
            data.extend_from_slice(&r.data);
            app.extend(r.appearance.map(|v| v as usize));
            mot.extend(r.motion.map(|v| v as usize));
        }
        let shape = [indices.len(), h.channels as usize, h.frames as usize, h.height as usize, h.width as usize];
        Ok(ClipBatch {
            clips: Tensor::new(shape, data)?,
            appearance: h.appearance.then_some(app),
            motion: h.motion.then_some(mot),
            indices: indices.to_vec(),
        })
    }
}

/// `B×C×T×H×W` clips with their labels and file indices.
#[derive(Clone, Debug)]
pub struct ClipBatch {
    pub clips: Tensor,
    pub appearance: Option<Vec<usize>>,
    pub motion: Option<Vec<usize>>,
    pub indices: Vec<usize>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Drops the time axis of single-frame batches: `B×C×H×W`.
    pub fn images(&self) -> Result<Tensor> {
        let s = self.clips.shape();
        if s[2] != 1 {
            return Err(Error::invalid("images", format!("batch has {} frames per clip", s[2])));
        }
        self.clips.clone().reshape(vec![s[0], s[1], s[3], s[4]])
    }
}

pub struct ClipBatches {
    file: ClipFile,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl ClipBatches {
    pub fn header(&self) -> &Header {
        self.file.header()
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for ClipBatches {
    type Item = Result<ClipBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = self.order[self.next..end].to_vec();
        self.next = end;
        Some(self.file.batch(&idx))
    }
}

/// Opens `path` and iterates one epoch of batches.
pub fn read_clips(path: impl AsRef<Path>, batch_size: usize, shuffle: Option<u64>) -> Result<ClipBatches> {
    ClipFile::open(path)?.batches(batch_size, shuffle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_header(n: u32) -> Header {
        Header { n_clips: n, channels: 1, frames: 2, height: 2, width: 3, appearance: true, motion: false }
    }

    fn records(n: u32) -> Vec<Result<ClipRecord>> {
        (0..n)
            .map(|i| {
                Ok(ClipRecord {
                    appearance: Some(i as i32 % 3),
                    motion: None,
                    data: (0..12).map(|j| (i * 12 + j) as f32 * 0.25).collect(),
                })
            })
            .collect()
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a.mshv"), dir.path().join("b.mshv"));
        write_container(&a, &sample_header(5), records(5)).unwrap();
        let mut f = ClipFile::open(&a).unwrap();
        let back: Vec<Result<ClipRecord>> = (0..f.len()).map(|i| f.read(i)).collect();
        write_container(&b, f.header(), back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read(&a).unwrap().len() as u64, HEADER_LEN + 5 * 52);
    }

    #[test]
    fn batches_cover_the_file() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.mshv");
        write_container(&p, &sample_header(7), records(7)).unwrap();
        let plain: Vec<ClipBatch> = read_clips(&p, 3, None).unwrap().map(Result::unwrap).collect();
        assert_eq!(plain.iter().map(ClipBatch::len).collect::<Vec<_>>(), vec![3, 3, 1]);
        let order: Vec<usize> = plain.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(order, (0..7).collect::<Vec<_>>());
        assert_eq!(plain[0].clips.shape(), &[3, 1, 2, 2, 3]);
        assert_eq!(plain[2].appearance.as_deref(), Some(&[0usize][..]));
        assert!(plain[0].motion.is_none());

        let s1: Vec<Vec<usize>> = read_clips(&p, 2, Some(4)).unwrap().map(|b| b.unwrap().indices).collect();
        let s2: Vec<Vec<usize>> = read_clips(&p, 2, Some(4)).unwrap().map(|b| b.unwrap().indices).collect();
        assert_eq!(s1, s2);
        let mut all: Vec<usize> = s1.concat();
        assert_ne!(all, (0..7).collect::<Vec<_>>());
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.mshv");
        write_container(&p, &sample_header(3), records(3)).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(ClipFile::open(&p), Err(Error::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(ClipFile::open(&p), Err(Error::Format { offset: 4, .. })));

        std::fs::write(&p, &good[..good.len() - 10]).unwrap();
        match ClipFile::open(&p) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, good.len() as u64 - 10);
                assert!(msg.contains("clip 2"), "{msg}");
            }
            other => panic!("{:?}", other.err()),
        }

        std::fs::write(&p, &good[..10]).unwrap();
        assert!(matches!(ClipFile::open(&p), Err(Error::Format { offset: 10, .. })));
        assert!(matches!(ClipFile::open(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn writer_checks_records() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.mshv");
        assert!(write_container(&p, &sample_header(4), records(3)).is_err());
        let mut r = records(1);
        r[0].as_mut().unwrap().motion = Some(1);
        assert!(write_container(&p, &sample_header(1), r).is_err());
    }
}

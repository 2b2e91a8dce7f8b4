//! Bit-packed phrase dataset files and their split manifest.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "M2M1" | version u16 = 1 | T u32 | P u32 | C u32 | phrase_count u64
//! per phrase:
//!   source_id length u16 | source_id UTF-8 | bar_offset u32
//!   cells, (t, p, c) row-major, MSB first, padded to a whole byte
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phrase::Phrase;
use crate::roll::{Pianoroll, RollDims};

pub const MAGIC: &[u8; 4] = b"M2M1";
pub const VERSION: u16 = 1;

fn pack_bits(cells: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; cells.len().div_ceil(8)];
    for (i, _) in cells.iter().enumerate().filter(|(_, &on)| on) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

/// Serializes phrases. All phrases must share `dims`.
pub fn encode_dataset(phrases: &[Phrase], dims: RollDims) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(26 + phrases.len() * (dims.len().div_ceil(8) + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [dims.time, dims.pitch, dims.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(phrases.len() as u64).to_le_bytes());
    for (i, phrase) in phrases.iter().enumerate() {
        if phrase.roll.dims() != dims {
            return Err(Error::contract(format!(
                "phrase {i} has dims {:?}, dataset has {dims:?}",
                phrase.roll.dims()
            )));
        }
        let id = phrase.source_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::contract(format!("source id of phrase {i} is too long")))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&phrase.bar_offset.to_le_bytes());
        out.extend_from_slice(&pack_bits(phrase.roll.cells()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Dataset {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a dataset. Any defect fails the whole load.
pub fn decode_dataset(bytes: &[u8]) -> Result<(RollDims, Vec<Phrase>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Dataset {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Dataset {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let dims = RollDims::new(
        r.u32("T")? as usize,
        r.u32("P")? as usize,
        r.u32("C")? as usize,
    );
    let count_pos = r.pos;
    let count = r.u64("phrase count")?;
    let cell_bytes = dims.len().div_ceil(8);
    // every phrase needs at least its id length, bar offset and cells
    let min_phrase = 6 + cell_bytes as u64;
    if count.saturating_mul(min_phrase) > (bytes.len() - r.pos) as u64 {
        return Err(Error::Dataset {
            offset: count_pos,
            message: format!("phrase count {count} exceeds file size"),
        });
    }
    let mut phrases = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = r.u16("source id length")? as usize;
        let id_pos = r.pos;
        let source_id = std::str::from_utf8(r.take(id_len, "source id")?)
            .map_err(|e| Error::Dataset {
                offset: id_pos,
                message: format!("source id is not UTF-8: {e}"),
            })?
            .to_string();
        let bar_offset = r.u32("bar offset")?;
        let cells = unpack_bits(r.take(cell_bytes, "cells")?, dims.len());
        phrases.push(Phrase {
            roll: Pianoroll::from_cells(dims, cells)?,
            source_id,
            bar_offset,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Dataset {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((dims, phrases))
}

/// Writes a dataset file atomically.
pub fn save_dataset(phrases: &[Phrase], dims: RollDims, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(phrases, dims)?)
}

pub fn load_dataset(path: &Path) -> Result<(RollDims, Vec<Phrase>)> {
    decode_dataset(&std::fs::read(path)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Split proportions in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 90,
            valid: 5,
            test: 5,
        }
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = Error;

    /// Parses `"90/5/5"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split('/')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("bad split `{s}`: {e}")))?;
        match parts[..] {
            [train, valid, test] if train + valid + test > 0 => Ok(Self { train, valid, test }),
            _ => Err(Error::config(format!("split `{s}` must be three numbers like 90/5/5"))),
        }
    }
}

/// Assigns whole source files to splits. Sources are shuffled with `seed`,
/// then cut at the cumulative proportions, so overlapping windows of one song
/// never straddle two splits.
pub fn assign_splits(sources: &[String], ratio: SplitRatio, seed: u64) -> Vec<(String, Split)> {
    let mut order: Vec<String> = sources.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    let total = f64::from(ratio.train + ratio.valid + ratio.test);
    let train_end = (n * f64::from(ratio.train) / total).round() as usize;
    let valid_end = (n * f64::from(ratio.train + ratio.valid) / total).round() as usize;
    order
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < train_end {
                Split::Train
            } else if i < valid_end {
                Split::Valid
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect()
}

/// Phrase ranges of one dataset file, grouped by source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub dims: RollDims,
    pub phrase_count: usize,
    /// `(source_id, first, end)` with `end` exclusive.
    pub sources: Vec<(String, usize, usize)>,
}

impl DatasetManifest {
    /// Builds the manifest for phrases stored contiguously per source.
    pub fn describe(split: Split, dims: RollDims, phrases: &[Phrase]) -> Result<Self> {
        let mut sources: Vec<(String, usize, usize)> = Vec::new();
        for (i, p) in phrases.iter().enumerate() {
            match sources.last_mut() {
                Some((id, _, end)) if *id == p.source_id => *end = i + 1,
                _ => {
                    if sources.iter().any(|(id, _, _)| *id == p.source_id) {
                        return Err(Error::contract(format!(
                            "phrases of `{}` are not contiguous",
                            p.source_id
                        )));
                    }
                    sources.push((p.source_id.clone(), i, i + 1));
                }
            }
        }
        Ok(Self {
            split,
            dims,
            phrase_count: phrases.len(),
            sources,
        })
    }
}

/// Renders manifests as a UTF-8 sidecar: one header line per split, then one
/// tab-separated `source_id split first end` line per source.
pub fn render_manifest(manifests: &[DatasetManifest]) -> String {
    let mut out = String::new();
    for m in manifests {
        let _ = writeln!(
            out,
            "# {} phrases={} dims={}x{}x{}",
            m.split.name(),
            m.phrase_count,
            m.dims.time,
            m.dims.pitch,
            m.dims.channels
        );
    }
    for m in manifests {
        for (id, first, end) in &m.sources {
            let _ = writeln!(out, "{id}\t{}\t{first}\t{end}", m.split.name());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_phrase(rng: &mut impl Rng, dims: RollDims, id: &str, bar: u32) -> Phrase {
        let cells = (0..dims.len()).map(|_| rng.random_bool(0.05)).collect();
        Phrase {
            roll: Pianoroll::from_cells(dims, cells).unwrap(),
            source_id: id.into(),
            bar_offset: bar,
        }
    }

    #[test]
    fn round_trip_three_phrases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = RollDims::PHRASE;
        let phrases = vec![
            random_phrase(&mut rng, dims, "a.mid", 0),
            random_phrase(&mut rng, dims, "a.mid", 1),
            random_phrase(&mut rng, dims, "ünïcode/b.mid", 12),
        ];
        let bytes = encode_dataset(&phrases, dims).unwrap();
        let (d, back) = decode_dataset(&bytes).unwrap();
        assert_eq!(d, dims);
        assert_eq!(back, phrases);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode_dataset(&[], RollDims::PHRASE).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 12 + 8);
        assert_eq!(&bytes[18..26], &0u64.to_le_bytes());
        let (_, back) = decode_dataset(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let dims = RollDims::new(2, 2, 2);
        let mut roll = Pianoroll::zeros(dims);
        roll.set(0, 0, 0, true); // bit 0
        roll.set(1, 1, 1, true); // bit 7
        let phrase = Phrase {
            roll,
            source_id: "x".into(),
            bar_offset: 3,
        };
        let bytes = encode_dataset(&[phrase], dims).unwrap();
        let expected: Vec<u8> = [
            &b"M2M1"[..],
            &[1, 0],
            &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0],
            &[1, 0, 0, 0, 0, 0, 0, 0],
            &[1, 0, b'x'],
            &[3, 0, 0, 0],
            &[0b1000_0001],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncation_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = RollDims::PHRASE;
        let phrases = vec![
            random_phrase(&mut rng, dims, "a", 0),
            random_phrase(&mut rng, dims, "a", 1),
        ];
        let bytes = encode_dataset(&phrases, dims).unwrap();
        for cut in [3, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut]) {
                Err(Error::Dataset { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: expected dataset error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_dataset(&[], RollDims::PHRASE).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Dataset { offset: 0, .. })));
        let mut bytes = encode_dataset(&[], RollDims::PHRASE).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Dataset { offset: 4, .. })));
    }

    #[test]
    fn split_by_source_is_deterministic() {
        let sources: Vec<String> = (0..40).map(|i| format!("song{i:02}.mid")).collect();
        let a = assign_splits(&sources, SplitRatio::default(), 3);
        let b = assign_splits(&sources, SplitRatio::default(), 3);
        assert_eq!(a, b);
        let count = |s| a.iter().filter(|(_, x)| *x == s).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (36, 2, 2));
    }

    #[test]
    fn manifest_ranges_cover_phrases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = RollDims::new(4, 4, 2);
        let phrases = vec![
            random_phrase(&mut rng, dims, "a", 0),
            random_phrase(&mut rng, dims, "a", 1),
            random_phrase(&mut rng, dims, "b", 0),
        ];
        let m = DatasetManifest::describe(Split::Train, dims, &phrases).unwrap();
        assert_eq!(m.sources, vec![("a".into(), 0, 2), ("b".into(), 2, 3)]);
        let text = render_manifest(&[m]);
        assert!(text.contains("a\ttrain\t0\t2\n"));
        assert!("90/5/5".parse::<SplitRatio>().is_ok());
        assert!("90/5".parse::<SplitRatio>().is_err());
    }
}

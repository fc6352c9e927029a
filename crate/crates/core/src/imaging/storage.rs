//! Dataset files.
//!
//! A split is stored as one binary file:
//!
//! | offset | size        | content                                   |
//! |--------|-------------|-------------------------------------------|
//! | 0      | 8           | magic `b"CHODS01\0"`                      |
//! | 8      | 8           | side (u64 LE)                             |
//! | 16     | 8           | image count `c` (u64 LE)                  |
//! | 24     | 8           | label block offset `L` (u64 LE)           |
//! | 32     | 8·c·side²   | pixels, f64 LE, image-major then row-major |
//! | L      | c           | labels, one byte each: 0 absent, 1 present |
//!
//! `L` is always `32 + 8·c·side²`; readers reject any other value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{Label, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::persist::{self, Reader};

pub const DATASET_MAGIC: &[u8; 8] = b"CHODS01\0";
const HEADER_LEN: usize = 32;

pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let label_offset = HEADER_LEN + 8 * ds.pixels().len();
    let mut buf = Vec::with_capacity(label_offset + ds.len());
    buf.extend_from_slice(DATASET_MAGIC);
    persist::put_u64(&mut buf, ds.side() as u64);
    persist::put_u64(&mut buf, ds.len() as u64);
    persist::put_u64(&mut buf, label_offset as u64);
    persist::put_f64s(&mut buf, ds.pixels());
    buf.extend(ds.labels().iter().map(|l| l.is_present() as u8));
    buf
}

pub fn decode_dataset(bytes: &[u8], split: Split) -> Result<LabeledDataset> {
    let mut r = Reader::new(bytes, "dataset file");
    r.magic(DATASET_MAGIC)?;
    let side = r.usize()?;
    let count = r.usize()?;
    let label_offset = r.usize()?;
    let pixels_len = side
        .checked_mul(side)
        .and_then(|n| n.checked_mul(count))
        .ok_or_else(|| Error::format("dataset file", "size overflow"))?;
    if Some(label_offset) != pixels_len.checked_mul(8).map(|b| b + HEADER_LEN) {
        return Err(Error::format(
            "dataset file",
            format!("label offset {label_offset} inconsistent with {count} images of side {side}"),
        ));
    }
    let pixels = r.f64s(pixels_len)?;
    r.seek(label_offset)?;
    let labels = r
        .take(count)?
        .iter()
        .map(|&b| match b {
            0 => Ok(Label::Absent),
            1 => Ok(Label::Present),
            other => Err(Error::format("dataset file", format!("label byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    LabeledDataset::new(side, pixels, labels, split)
}

pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    persist::write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path, split: Split) -> Result<LabeledDataset> {
    decode_dataset(&persist::read_file(path)?, split)
}

pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let text = persist::format_key_values("cho dataset manifest v1", entries);
    persist::write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = persist::read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::format("manifest", "not valid UTF-8"))?;
    persist::parse_key_values(&text, "manifest")
}

/// Images ingested from an external manifest, grouped by split.
#[derive(Debug, Clone)]
pub struct ExternalDataset {
    pub side: usize,
    pub splits: BTreeMap<Split, LabeledDataset>,
}

impl ExternalDataset {
    pub fn split(&self, split: Split) -> Option<&LabeledDataset> {
        self.splits.get(&split)
    }
}

/// Reads an external paired-image manifest (see `docs/formats.md`).
///
/// ```text
/// side = 64
/// balance_tolerance = 0
/// image = relative/or/absolute/path.f64  present  train
/// image = other.txt                       absent   train
/// ```
///
/// Image files ending in `.txt` hold `side²` whitespace-separated numbers;
/// any other extension is read as raw little-endian f64. Within each split
/// absent and present images are interleaved in manifest order.
pub fn load_external_dataset(manifest_path: &Path) -> Result<ExternalDataset> {
    let bytes = persist::read_file(manifest_path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::format("external manifest", "not valid UTF-8"))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut side = None;
    let mut tolerance = 0usize;
    let mut entries: Vec<(PathBuf, Label, Split)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: &str| Error::format("external manifest", format!("line {}: {detail}", lineno + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
        let value = value.trim();
        match key.trim() {
            "side" => side = Some(value.parse::<usize>().map_err(|_| bad("side is not an integer"))?),
            "balance_tolerance" => {
                tolerance = value.parse().map_err(|_| bad("balance_tolerance is not an integer"))?
            }
            "image" => {
                let fields: Vec<&str> = value.split_whitespace().collect();
                let [path, label, split] = fields[..] else {
                    return Err(bad("image entry needs: path label split"));
                };
                let label = match label {
                    "present" | "1" => Label::Present,
                    "absent" | "0" => Label::Absent,
                    _ => return Err(bad("label must be present or absent")),
                };
                let split = Split::parse(split).ok_or_else(|| bad("unknown split"))?;
                let path = Path::new(path);
                let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
                entries.push((path, label, split));
            }
            other => return Err(bad(&format!("unknown key {other:?}"))),
        }
    }
    let side = side.ok_or_else(|| Error::format("external manifest", "missing side"))?;
    if side == 0 {
        return Err(Error::format("external manifest", "side must be > 0"));
    }

    let n = side * side;
    let mut grouped: BTreeMap<Split, (Vec<Vec<f64>>, Vec<Vec<f64>>)> = BTreeMap::new();
    for (path, label, split) in entries {
        let image = read_image_file(&path)?;
        if image.len() != n {
            return Err(Error::mismatch(n, image.len(), format!("pixels in {}", path.display())));
        }
        let slot = grouped.entry(split).or_default();
        match label {
            Label::Absent => slot.0.push(image),
            Label::Present => slot.1.push(image),
        }
    }

    let mut splits = BTreeMap::new();
    for (split, (absent, present)) in grouped {
        if absent.len().abs_diff(present.len()) > tolerance {
            return Err(Error::LabelImbalance {
                present: present.len(),
                absent: absent.len(),
                tolerance,
            });
        }
        let mut images = Vec::with_capacity(absent.len() + present.len());
        let mut labels = Vec::with_capacity(images.capacity());
        let mut a = absent.into_iter();
        let mut p = present.into_iter();
        loop {
            let (x, y) = (a.next(), p.next());
            if x.is_none() && y.is_none() {
                break;
            }
            if let Some(img) = x {
                images.push(img);
                labels.push(Label::Absent);
            }
            if let Some(img) = y {
                images.push(img);
                labels.push(Label::Present);
            }
        }
        splits.insert(split, LabeledDataset::from_images(side, &images, labels, split)?);
    }
    Ok(ExternalDataset { side, splits })
}

fn read_image_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = persist::read_file(path)?;
    if path.extension().is_some_and(|e| e == "txt") {
        let text = String::from_utf8(bytes).map_err(|_| Error::format("image file", "not valid UTF-8"))?;
        text.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format("image file", format!("{}: bad number {t:?}", path.display())))
            })
            .collect()
    } else {
        if bytes.len() % 8 != 0 {
            return Err(Error::format(
                "image file",
                format!("{}: length {} is not a multiple of 8", path.display(), bytes.len()),
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_dataset, SimulationParams};
    use std::fs;

    fn write_raw(path: &Path, values: &[f64]) {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(3, &SimulationParams::standard(8, true), 17, Split::Test).unwrap();
        let path = dir.path().join("test.chods");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path, Split::Test).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert!(back.pixels().iter().zip(ds.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"CHODS01\0");
        assert_eq!(bytes.len(), 32 + 6 * 64 * 8 + 6);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 32 + 6 * 64 * 8);
    }

    #[test]
    fn corrupt_dataset_rejected() {
        let ds = generate_dataset(1, &SimulationParams::standard(4, false), 1, Split::Train).unwrap();
        let mut bytes = encode_dataset(&ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 1], Split::Train).is_err());
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(decode_dataset(&bytes, Split::Train).is_err());
        bytes[0] = b'X';
        assert!(decode_dataset(&bytes, Split::Train).is_err());
    }

    #[test]
    fn external_manifest_pairs_images() {
        let dir = tempfile::tempdir().unwrap();
        let n = 64 * 64;
        for (i, name) in ["a0.f64", "a1.f64", "p0.f64"].iter().enumerate() {
            write_raw(&dir.path().join(name), &vec![i as f64; n]);
        }
        let text: String = (0..n).map(|k| format!("{k} ")).collect();
        fs::write(dir.path().join("p1.txt"), text).unwrap();
        let manifest = dir.path().join("manifest.txt");
        fs::write(
            &manifest,
            "# external\nside = 64\nimage = a0.f64 absent train\nimage = p0.f64 present train\n\
             image = a1.f64 absent train\nimage = p1.txt present train\n",
        )
        .unwrap();
        let ext = load_external_dataset(&manifest).unwrap();
        let train = ext.split(Split::Train).unwrap();
        assert_eq!(train.n_pairs(), 2);
        assert_eq!(train.labels(), &[Label::Absent, Label::Present, Label::Absent, Label::Present]);
        assert_eq!(train.image(2)[0], 1.0);
        assert_eq!(train.image(3)[5], 5.0);
        assert!(ext.split(Split::Test).is_none());
    }

    #[test]
    fn external_manifest_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(&dir.path().join("big.f64"), &vec![0.0; 64 * 64]);
        write_raw(&dir.path().join("small.f64"), &vec![0.0; 32 * 32]);
        let m = dir.path().join("m.txt");

        fs::write(&m, "side = 64\nimage = big.f64 absent train\nimage = small.f64 present train\n").unwrap();
        assert!(matches!(load_external_dataset(&m), Err(Error::DimensionMismatch { .. })));

        fs::write(&m, "side = 64\nimage = big.f64 absent train\nimage = big.f64 absent train\n").unwrap();
        assert!(matches!(load_external_dataset(&m), Err(Error::LabelImbalance { .. })));

        fs::write(&m, "side = 64\nbalance_tolerance = 2\nimage = big.f64 absent train\nimage = big.f64 absent train\n").unwrap();
        assert_eq!(load_external_dataset(&m).unwrap().split(Split::Train).unwrap().len(), 2);

        fs::write(&m, "side = 64\nimage = missing.f64 absent train\n").unwrap();
        assert!(matches!(load_external_dataset(&m), Err(Error::Unreadable { .. })));

        fs::write(&m, "side = 64\nimage = big.f64 maybe train\n").unwrap();
        assert!(matches!(load_external_dataset(&m), Err(Error::Format { .. })));
    }
}

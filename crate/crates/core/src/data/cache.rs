use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::toy::ToyConfig;
use super::{CategoryMap, DatasetSplit, ImageRef, ImageSource, LoadReport, Sample, Vocabulary};
use crate::error::{Error, Result};

pub const CACHE_FORMAT_VERSION: u32 = 1;
const RECORDS_FILE: &str = "samples.bin";
const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"CVQS";

/// How the cached samples were produced; enough to rebuild the image source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Toy {
        n_images: usize,
        n_categories: usize,
        image_size: usize,
        seed: u64,
    },
    Vqa {
        image_dir: Option<PathBuf>,
        features: Option<PathBuf>,
        image_size: usize,
    },
}

impl DataSource {
    pub fn image_source(&self) -> Result<ImageSource> {
        match self {
            Self::Toy {
                n_images,
                n_categories,
                image_size,
                seed,
            } => {
                let cfg = ToyConfig {
                    n_images: *n_images,
                    n_categories: *n_categories,
                    image_size: *image_size,
                    seed: *seed,
                };
                Ok(cfg.generate()?.image_source())
            }
            Self::Vqa {
                features: Some(path), ..
            } => ImageSource::features_from_json(path),
            Self::Vqa {
                image_dir: Some(root),
                image_size,
                ..
            } => Ok(ImageSource::Directory {
                root: root.clone(),
                size: *image_size,
            }),
            Self::Vqa { .. } => Err(Error::Config("VQA data needs an image directory or a feature file".into())),
        }
    }
}

/// JSON sidecar describing `samples.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub source: DataSource,
    pub vocab: Vocabulary,
    pub categories: CategoryMap,
    pub split_ratio: f64,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub records_sha256: String,
    pub load_report: Option<LoadReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedDataset {
    pub manifest: Manifest,
    pub split: DatasetSplit,
}

/// Write `samples.bin` (train records then val records) and `manifest.json`
/// into `dir`, creating it if needed. `records_sha256` and the counts in
/// `manifest` are filled in here.
pub fn write_cache(dir: &Path, mut manifest: Manifest, split: &DatasetSplit) -> Result<CachedDataset> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(CACHE_FORMAT_VERSION).expect("vec write");
    buf.write_u64::<LittleEndian>((split.train.len() + split.val.len()) as u64)
        .expect("vec write");
    for s in split.train.iter().chain(&split.val) {
        let rec = encode_record(s);
        buf.write_u32::<LittleEndian>(rec.len() as u32).expect("vec write");
        buf.extend_from_slice(&rec);
    }
    let records = dir.join(RECORDS_FILE);
    std::fs::write(&records, &buf).map_err(|e| Error::io(&records, e))?;

    manifest.format_version = CACHE_FORMAT_VERSION;
    manifest.train_count = split.train.len();
    manifest.val_count = split.val.len();
    manifest.split_ratio = split.ratio;
    manifest.records_sha256 = hex(&Sha256::digest(&buf));
    let path = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(CachedDataset {
        manifest,
        split: split.clone(),
    })
}

pub fn read_cache(dir: &Path) -> Result<CachedDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    if manifest.format_version != CACHE_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: CACHE_FORMAT_VERSION,
        });
    }
    let records = dir.join(RECORDS_FILE);
    let buf = std::fs::read(&records).map_err(|e| Error::io(&records, e))?;
    if hex(&Sha256::digest(&buf)) != manifest.records_sha256 {
        return Err(corrupt(&records, "checksum does not match manifest".into()));
    }
    let samples = decode_records(&buf).map_err(|reason| corrupt(&records, reason))?;
    if samples.len() != manifest.train_count + manifest.val_count {
        return Err(corrupt(&records, "record count does not match manifest".into()));
    }
    for s in &samples {
        if s.category >= manifest.categories.len() {
            return Err(corrupt(&records, format!("category {} out of range", s.category)));
        }
    }
    let mut train = samples;
    let val = train.split_off(manifest.train_count);
    Ok(CachedDataset {
        split: DatasetSplit {
            train,
            val,
            ratio: manifest.split_ratio,
        },
        manifest,
    })
}

fn encode_record(s: &Sample) -> Vec<u8> {
    let mut r = Vec::with_capacity(32 + s.question.len());
    r.write_u64::<LittleEndian>(s.image_id).expect("vec write");
    r.write_u32::<LittleEndian>(s.category as u32).expect("vec write");
    match &s.image {
        ImageRef::Index(i) => {
            r.push(0);
            r.write_u32::<LittleEndian>(*i).expect("vec write");
        }
        ImageRef::Path(p) => {
            r.push(1);
            write_str(&mut r, p);
        }
        ImageRef::Feature(id) => {
            r.push(2);
            r.write_u64::<LittleEndian>(*id).expect("vec write");
        }
    }
    write_str(&mut r, &s.question);
    r
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

fn decode_records(buf: &[u8]) -> std::result::Result<Vec<Sample>, String> {
    let mut cur = Cursor::new(buf);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| "truncated header")?;
    if &magic != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| "truncated header")?;
    if version != CACHE_FORMAT_VERSION {
        return Err(format!("record version {version}"));
    }
    let n = cur.read_u64::<LittleEndian>().map_err(|_| "truncated header")?;
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for i in 0..n {
        let len = cur.read_u32::<LittleEndian>().map_err(|_| format!("truncated at record {i}"))? as usize;
        let mut rec = vec![0u8; len];
        cur.read_exact(&mut rec).map_err(|_| format!("truncated at record {i}"))?;
        out.push(decode_record(&rec).map_err(|e| format!("record {i}: {e}"))?);
    }
    if (cur.position() as usize) != buf.len() {
        return Err("trailing bytes after last record".into());
    }
    Ok(out)
}

fn decode_record(rec: &[u8]) -> std::io::Result<Sample> {
    let mut c = Cursor::new(rec);
    let image_id = c.read_u64::<LittleEndian>()?;
    let category = c.read_u32::<LittleEndian>()? as usize;
    let image = match c.read_u8()? {
        0 => ImageRef::Index(c.read_u32::<LittleEndian>()?),
        1 => ImageRef::Path(read_str(&mut c)?),
        2 => ImageRef::Feature(c.read_u64::<LittleEndian>()?),
        t => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("image tag {t}"))),
    };
    let question = read_str(&mut c)?;
    if c.position() as usize != rec.len() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "record length mismatch"));
    }
    Ok(Sample {
        image_id,
        image,
        question,
        category,
    })
}

fn read_str(c: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let len = c.read_u32::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    c.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(path: &Path, reason: String) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, split};

    fn manifest(d: &crate::data::ToyDataset) -> Manifest {
        Manifest {
            format_version: 0,
            source: DataSource::Toy {
                n_images: 6,
                n_categories: 3,
                image_size: 24,
                seed: 2,
            },
            vocab: d.vocab.clone(),
            categories: d.categories.clone(),
            split_ratio: 0.0,
            seed: 5,
            train_count: 0,
            val_count: 0,
            records_sha256: String::new(),
            load_report: None,
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_toy_dataset(6, 3, 2).unwrap();
        let mut sp = split(&d.samples, 0.8, 5).unwrap();
        sp.val[0].image = ImageRef::Path("x/ü.jpg".into());
        sp.val[1].image = ImageRef::Feature(77);
        let written = write_cache(dir.path(), manifest(&d), &sp).unwrap();
        let back = read_cache(dir.path()).unwrap();
        assert_eq!(back, written);
        assert_eq!(back.split, sp);
        let imgs = back.manifest.source.image_source().unwrap();
        assert!(imgs.load(&ImageRef::Index(5)).is_ok());

        let rec = dir.path().join(RECORDS_FILE);
        let mut bytes = std::fs::read(&rec).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&rec, &bytes).unwrap();
        assert!(matches!(read_cache(dir.path()), Err(Error::Corrupt { .. })));
        assert!(matches!(read_cache(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn truncated_records_detected_without_checksum() {
        let d = make_toy_dataset(2, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sp = split(&d.samples, 0.5, 0).unwrap();
        write_cache(dir.path(), manifest(&d), &sp).unwrap();
        let bytes = std::fs::read(dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(decode_records(&bytes).unwrap().len(), 4);
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_records(&bytes[..10]).is_err());
    }
}

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageTensor;

/// Where a sample's image lives.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    /// Index into an in-memory image table (toy data).
    Index(u32),
    /// File path relative to the image directory.
    Path(String),
    /// Key into a precomputed feature table.
    Feature(u64),
}

/// Resolves [`ImageRef`]s to model inputs.
#[derive(Debug, Clone)]
pub enum ImageSource {
    InMemory(Vec<ImageTensor>),
    /// Files decoded and resized to `size × size` RGB on every load.
    Directory { root: PathBuf, size: usize },
    Features(HashMap<u64, Array1<f64>>),
}

impl ImageSource {
    /// Feature table from a JSON object mapping image ids to float arrays.
    pub fn features_from_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: HashMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        let mut table = HashMap::with_capacity(raw.len());
        for (k, v) in raw {
            let id: u64 = k.parse().map_err(|_| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("feature key `{k}` is not an image id"),
            })?;
            table.insert(id, Array1::from(v));
        }
        Ok(Self::Features(table))
    }

    pub fn load(&self, image: &ImageRef) -> Result<ImageTensor> {
        match (self, image) {
            (Self::InMemory(table), ImageRef::Index(i)) => table
                .get(*i as usize)
                .cloned()
                .ok_or_else(|| Error::Domain(format!("image index {i} out of range"))),
            (Self::Directory { root, size }, ImageRef::Path(rel)) => load_image_file(&root.join(rel), *size),
            (Self::Features(table), ImageRef::Feature(id)) => table
                .get(id)
                .map(|v| ImageTensor::features(v.clone()))
                .ok_or_else(|| Error::Domain(format!("no features for image {id}"))),
            _ => Err(Error::Config(format!("image reference {image:?} does not fit this image source"))),
        }
    }
}

/// Decode, resize to `size × size`, and lay out as RGB CHW in `[0, 1]`.
pub fn load_image_file(path: &Path, size: usize) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?
        .resize_exact(size as u32, size as u32, FilterType::Triangle)
        .to_rgb8();
    let mut data = Array1::zeros(3 * size * size);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * size * size + y as usize * size + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    ImageTensor::new(3, size, size, data)
}

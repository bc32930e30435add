//! Procedural toy data: one colored shape per image and one templated
//! question per answer category.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CategoryMap, ImageRef, ImageSource, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ImageTensor;

pub const TOY_CATEGORIES: [&str; 5] = ["color", "shape", "count", "spatial", "binary"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

const RGB: [[f64; 3]; 4] = [[1.0, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.2, 1.0], [1.0, 0.9, 0.1]];

pub const DEFAULT_TOY_IMAGE_SIZE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub n_images: usize,
    pub n_categories: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(n_images: usize, n_categories: usize, seed: u64) -> Self {
        Self {
            n_images,
            n_categories,
            image_size: DEFAULT_TOY_IMAGE_SIZE,
            seed,
        }
    }

    pub fn generate(&self) -> Result<ToyDataset> {
        if self.n_categories < 2 || self.n_categories > TOY_CATEGORIES.len() {
            return Err(Error::Config(format!(
                "toy data supports 2..={} categories, got {}",
                TOY_CATEGORIES.len(),
                self.n_categories
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("toy images need at least 8 pixels per side".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut images = Vec::with_capacity(self.n_images);
        let mut attributes = Vec::with_capacity(self.n_images);
        let mut samples = Vec::with_capacity(self.n_images * self.n_categories);
        for i in 0..self.n_images {
            let color = rng.random_range(0..COLORS.len());
            let shape = rng.random_range(0..SHAPES.len());
            images.push(render(self.image_size, color, shape, &mut rng));
            attributes.push((color, shape));
            for (category, name) in TOY_CATEGORIES[..self.n_categories].iter().enumerate() {
                samples.push(Sample {
                    image_id: i as u64,
                    image: ImageRef::Index(i as u32),
                    question: question_for(name, color, shape),
                    category,
                });
            }
        }
        let vocab = Vocabulary::from_samples(&samples, 1);
        let categories = CategoryMap::with_names(
            TOY_CATEGORIES[..self.n_categories]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        Ok(ToyDataset {
            samples,
            vocab,
            categories,
            images,
            attributes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    /// `n_images × n_categories` samples, image-major.
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
    pub categories: CategoryMap,
    pub images: Vec<ImageTensor>,
    /// `(color, shape)` indices per image.
    pub attributes: Vec<(usize, usize)>,
}

impl ToyDataset {
    pub fn image_source(&self) -> ImageSource {
        ImageSource::InMemory(self.images.clone())
    }
}

/// 24×24 toy images; see [`ToyConfig`] for other sizes.
pub fn make_toy_dataset(n_images: usize, n_categories: usize, seed: u64) -> Result<ToyDataset> {
    ToyConfig::new(n_images, n_categories, seed).generate()
}

pub fn question_for(category: &str, color: usize, shape: usize) -> String {
    let (c, s) = (COLORS[color], SHAPES[shape]);
    match category {
        "color" => format!("what color is the {s}"),
        "shape" => format!("what shape is the {c} object"),
        "count" => format!("how many {s}s are there"),
        "spatial" => format!("where is the {c} {s}"),
        "binary" => format!("is there a {c} {s} in the picture"),
        other => unreachable!("no toy template for `{other}`"),
    }
}

/// Whether `question` has the structure of `category`'s template, with any
/// valid slot filler.
pub fn template_matches(category: &str, question: &str) -> bool {
    let words = super::tokenize(question);
    let w: Vec<&str> = words.iter().map(String::as_str).collect();
    let color = |x: &str| COLORS.contains(&x);
    let shape = |x: &str| SHAPES.contains(&x);
    let plural = |x: &str| x.strip_suffix('s').is_some_and(shape);
    match (category, w.as_slice()) {
        ("color", ["what", "color", "is", "the", s]) => shape(s),
        ("shape", ["what", "shape", "is", "the", c, "object"]) => color(c),
        ("count", ["how", "many", s, "are", "there"]) => plural(s),
        ("spatial", ["where", "is", "the", c, s]) => color(c) && shape(s),
        ("binary", ["is", "there", "a", c, s, "in", "the", "picture"]) => color(c) && shape(s),
        _ => false,
    }
}

fn render(size: usize, color: usize, shape: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let r = rng.random_range(size as f64 / 5.0..size as f64 / 3.0);
    let lo = r.ceil();
    let hi = size as f64 - 1.0 - r.ceil();
    let cx = rng.random_range(lo..=hi);
    let cy = rng.random_range(lo..=hi);
    let plane = size * size;
    let mut data = Array1::zeros(3 * plane);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let inside = match shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                _ => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            };
            for c in 0..3 {
                let noise = rng.random_range(-0.05..0.05);
                let base = if inside { RGB[color][c] } else { 0.1 };
                data[c * plane + y * size + x] = base + noise;
            }
        }
    }
    ImageTensor::new(3, size, size, data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_labels() {
        let d = make_toy_dataset(50, 3, 7).unwrap();
        assert_eq!(d.samples.len(), 150);
        assert_eq!(d.categories.len(), 3);
        assert_eq!(d.images.len(), 50);
        for s in &d.samples {
            assert!(s.category < 3);
            let name = d.categories.name(s.category).unwrap();
            assert!(template_matches(name, &s.question), "{name}: {}", s.question);
            for other in d.categories.names().iter().filter(|n| *n != name) {
                assert!(!template_matches(other, &s.question));
            }
        }
        assert!(make_toy_dataset(5, 1, 0).is_err());
        assert!(make_toy_dataset(5, 6, 0).is_err());
    }

    #[test]
    fn seed_determinism() {
        let a = make_toy_dataset(10, 5, 11).unwrap();
        let b = make_toy_dataset(10, 5, 11).unwrap();
        assert_eq!(serde_json::to_vec(&a.samples).unwrap(), serde_json::to_vec(&b.samples).unwrap());
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, make_toy_dataset(10, 5, 12).unwrap().images);
    }

    #[test]
    fn shape_pixels_carry_the_color() {
        let d = ToyConfig {
            image_size: 16,
            ..ToyConfig::new(4, 2, 3)
        }
        .generate()
        .unwrap();
        for (img, &(color, _)) in d.images.iter().zip(&d.attributes) {
            let plane = 256;
            let lit = (0..plane)
                .filter(|&p| (0..3).all(|c| (img.data[c * plane + p] - RGB[color][c]).abs() < 0.06))
                .count();
            assert!(lit > 4);
        }
    }

    #[test]
    fn matcher_rejects_near_misses() {
        assert!(template_matches("count", "how many squares are there"));
        assert!(!template_matches("count", "how many square are there"));
        assert!(!template_matches("color", "what color is the red"));
        assert!(!template_matches("shape", "what shape is the object"));
    }
}

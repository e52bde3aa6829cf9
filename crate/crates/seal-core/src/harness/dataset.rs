//! Procedurally rendered shape-classification datasets: deterministic,
//! offline, and cheap enough to regenerate on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::io;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// The five renderable shape classes, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    HorizontalBar,
    VerticalBar,
    Cross,
    Disc,
    Checker,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::HorizontalBar,
        ShapeClass::VerticalBar,
        ShapeClass::Cross,
        ShapeClass::Disc,
        ShapeClass::Checker,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::HorizontalBar => "horizontal_bar",
            ShapeClass::VerticalBar => "vertical_bar",
            ShapeClass::Cross => "cross",
            ShapeClass::Disc => "disc",
            ShapeClass::Checker => "checker",
        }
    }
}

/// Recipe for a dataset; equal specs render bit-identical datasets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    /// 1 (grayscale) or 3 (rgb).
    pub channels: usize,
    /// Square image side, 16..=64.
    pub size: usize,
    /// Number of classes drawn from [`ShapeClass::ALL`], 2..=5.
    pub classes: usize,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(SealError::InvalidArgument("dataset count must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(SealError::InvalidArgument(format!(
                "dataset channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(16..=64).contains(&self.size) {
            return Err(SealError::InvalidArgument(format!(
                "dataset image size must be in 16..=64, got {}",
                self.size
            )));
        }
        if !(2..=ShapeClass::ALL.len()).contains(&self.classes) {
            return Err(SealError::InvalidArgument(format!(
                "dataset classes must be in 2..=5, got {}",
                self.classes
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(SealError::InvalidArgument(format!(
                "noise sigma must be non-negative and finite, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count: 512,
            channels: 1,
            size: 16,
            classes: 5,
            noise_sigma: 0.05,
        }
    }
}

/// A rendered dataset: `images[i]` is `[C, size, size]` with pixels in
/// [0, 1], labeled `labels[i]` (= `i % classes`).
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    pub spec: DatasetSpec,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ShapesDataset {
    pub fn generate(spec: DatasetSpec) -> Result<ShapesDataset> {
        spec.validate()?;
        let mut images = Vec::with_capacity(spec.count);
        let mut labels = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let label = i % spec.classes;
            let mut rng = Rng::new(derive_seed(spec.seed, i as u64));
            images.push(render(ShapeClass::ALL[label], &spec, &mut rng));
            labels.push(label);
        }
        Ok(ShapesDataset { spec, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn render(class: ShapeClass, spec: &DatasetSpec, rng: &mut Rng) -> Tensor {
    let size = spec.size as i64;
    let jitter = (spec.size / 8) as i64;
    let cy = size / 2 + rng.below(2 * jitter as u64 + 1) as i64 - jitter;
    let cx = size / 2 + rng.below(2 * jitter as u64 + 1) as i64 - jitter;
    let scale = rng.uniform_range(0.7, 1.0);
    let half = ((scale * 0.4 * size as f64) as i64).max(2);
    let thickness = (size / 10).max(1);
    let cell = (size / 8).max(2);

    let mut plane = vec![0.0f32; spec.size * spec.size];
    let mut paint = |r: i64, c: i64| {
        if (0..size).contains(&r) && (0..size).contains(&c) {
            plane[(r * size + c) as usize] = 0.9;
        }
    };
    match class {
        ShapeClass::HorizontalBar => {
            for r in cy - thickness..=cy + thickness {
                for c in cx - half..=cx + half {
                    paint(r, c);
                }
            }
        }
        ShapeClass::VerticalBar => {
            for r in cy - half..=cy + half {
                for c in cx - thickness..=cx + thickness {
                    paint(r, c);
                }
            }
        }
        ShapeClass::Cross => {
            for r in cy - thickness..=cy + thickness {
                for c in cx - half..=cx + half {
                    paint(r, c);
                }
            }
            for r in cy - half..=cy + half {
                for c in cx - thickness..=cx + thickness {
                    paint(r, c);
                }
            }
        }
        ShapeClass::Disc => {
            for r in cy - half..=cy + half {
                for c in cx - half..=cx + half {
                    if (r - cy) * (r - cy) + (c - cx) * (c - cx) <= half * half {
                        paint(r, c);
                    }
                }
            }
        }
        ShapeClass::Checker => {
            for r in cy - half..=cy + half {
                for c in cx - half..=cx + half {
                    let tile = (r - cy + half) / cell + (c - cx + half) / cell;
                    if tile % 2 == 0 {
                        paint(r, c);
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(spec.channels * plane.len());
    for _ in 0..spec.channels {
        data.extend_from_slice(&plane);
    }
    for v in data.iter_mut() {
        let noisy = *v as f64 + spec.noise_sigma * rng.normal();
        *v = noisy.clamp(0.0, 1.0) as f32;
    }
    Tensor::new(vec![spec.channels, spec.size, spec.size], data).expect("shape matches data")
}

/// Flattens `[C, H, W]` images to rank-1 tensors (for dense networks).
pub fn flatten_images(images: &[Tensor]) -> Vec<Tensor> {
    images
        .iter()
        .map(|x| x.reshape(&[x.len()]).expect("flatten preserves length"))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: String,
    spec: DatasetSpec,
}

/// Serializes a dataset as a tensor archive (one image block, one label
/// block).
pub fn dataset_to_bytes(data: &ShapesDataset) -> Result<Vec<u8>> {
    let manifest = DatasetManifest {
        format_version: crate::FORMAT_VERSION.to_string(),
        spec: data.spec,
    };
    let (c, s) = (data.spec.channels, data.spec.size);
    let mut pixels = Vec::with_capacity(data.images.len() * c * s * s);
    for img in &data.images {
        pixels.extend_from_slice(img.data());
    }
    let images = Tensor::new(vec![data.images.len(), c, s, s], pixels)?;
    let labels = Tensor::new(
        vec![data.labels.len()],
        data.labels.iter().map(|&l| l as f32).collect(),
    )?;
    io::container_to_bytes(io::DATASET_MAGIC, &manifest, &[&images, &labels])
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<ShapesDataset> {
    let (manifest, blocks): (DatasetManifest, Vec<Tensor>) =
        io::container_from_bytes(io::DATASET_MAGIC, bytes)?;
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(SealError::Format(format!(
            "dataset format version {} unsupported",
            manifest.format_version
        )));
    }
    if blocks.len() != 2 {
        return Err(SealError::Format(format!(
            "dataset archive must hold 2 tensor blocks, found {}",
            blocks.len()
        )));
    }
    let images = &blocks[0];
    let labels = &blocks[1];
    if images.rank() != 4 || labels.rank() != 1 || images.shape()[0] != labels.len() {
        return Err(SealError::Format(format!(
            "dataset blocks have shapes {:?} and {:?}",
            images.shape(),
            labels.shape()
        )));
    }
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let per = c * h * w;
    let mut split = Vec::with_capacity(n);
    for i in 0..n {
        split.push(Tensor::new(
            vec![c, h, w],
            images.data()[i * per..(i + 1) * per].to_vec(),
        )?);
    }
    Ok(ShapesDataset {
        spec: manifest.spec,
        images: split,
        labels: labels.data().iter().map(|&l| l as usize).collect(),
    })
}

pub fn save_dataset(data: &ShapesDataset, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(data)?)?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<ShapesDataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let spec = DatasetSpec {
            seed: 9,
            count: 20,
            channels: 3,
            size: 24,
            ..Default::default()
        };
        let a = ShapesDataset::generate(spec).unwrap();
        let b = ShapesDataset::generate(spec).unwrap();
        assert_eq!(a, b);
        for img in &a.images {
            assert_eq!(img.shape(), &[3, 24, 24]);
            assert!(img.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert_eq!(a.labels[..5], [0, 1, 2, 3, 4]);
    }

    #[test]
    fn classes_look_different() {
        let spec = DatasetSpec {
            seed: 1,
            count: 5,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let d = ShapesDataset::generate(spec).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(d.images[i], d.images[j], "classes {i} and {j} collide");
            }
        }
    }

    #[test]
    fn archive_round_trip() {
        let spec = DatasetSpec {
            seed: 77,
            count: 6,
            ..Default::default()
        };
        let d = ShapesDataset::generate(spec).unwrap();
        let back = dataset_from_bytes(&dataset_to_bytes(&d).unwrap()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut spec = DatasetSpec::default();
        spec.channels = 2;
        assert!(ShapesDataset::generate(spec).is_err());
        let mut spec = DatasetSpec::default();
        spec.size = 8;
        assert!(ShapesDataset::generate(spec).is_err());
        let mut spec = DatasetSpec::default();
        spec.classes = 1;
        assert!(ShapesDataset::generate(spec).is_err());
    }
}

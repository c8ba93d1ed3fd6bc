use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::tensor::Tensor;

/// Class-conditional Gaussian blob images.
///
/// Every class gets a prototype made of a few Gaussian bumps at seeded
/// positions; samples are the prototype plus i.i.d. pixel noise, clipped
/// to `[0,1]`. With small `noise` the classes are linearly separable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
}

fn default_noise() -> f64 {
    0.1
}

fn default_blobs() -> usize {
    3
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize) -> Self {
        Self {
            classes,
            per_class,
            image_size,
            noise: default_noise(),
            blobs: default_blobs(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::Invalid("synthetic data needs at least 2 classes".into()));
        }
        if self.per_class == 0 {
            return Err(DataError::Invalid("per_class must be positive".into()));
        }
        if self.image_size == 0 || self.blobs == 0 {
            return Err(DataError::Invalid("image_size and blobs must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::Invalid(format!("noise {} must be >= 0", self.noise)));
        }
        Ok(())
    }

    fn prototypes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let s = self.image_size;
        let width = (s as f64 / 6.0).max(0.75);
        (0..self.classes)
            .map(|_| {
                let centers: Vec<(f64, f64)> = (0..self.blobs)
                    .map(|_| (rng.gen_range(0.0..s as f64), rng.gen_range(0.0..s as f64)))
                    .collect();
                let mut img: Vec<f64> = (0..s * s)
                    .map(|i| {
                        let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
                        centers
                            .iter()
                            .map(|(cy, cx)| {
                                (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * width * width)).exp()
                            })
                            .sum()
                    })
                    .collect();
                let max = img.iter().copied().fold(0.0, f64::max).max(1e-12);
                img.iter_mut().for_each(|v| *v /= max);
                img.into_iter().map(|v| v as f32).collect()
            })
            .collect()
    }

    fn render(&self, protos: &[Vec<f32>], per_class: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let s = self.image_size;
        let noise = Normal::new(0.0, self.noise).expect("valid noise");
        let n = per_class * self.classes;
        let mut data = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..per_class {
            for (class, proto) in protos.iter().enumerate() {
                data.extend(
                    proto
                        .iter()
                        .map(|&p| (p as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32),
                );
                labels.push(class);
            }
        }
        let images = Tensor::new(&[n, 1, s, s], data).expect("synthetic shape");
        Dataset::new(images, labels, self.classes).expect("synthetic labels in range")
    }
}

/// Deterministic synthetic dataset; classes are interleaved.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    Ok(make_synthetic_split(&SyntheticSpec::new(classes, per_class, image_size), 0, seed)?.0)
}

/// Train set plus an i.i.d. test set drawn from the same prototypes.
/// The test set is `None` when `test_per_class` is zero.
pub fn make_synthetic_split(
    spec: &SyntheticSpec,
    test_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Option<Dataset>), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = spec.prototypes(&mut rng);
    let train = spec.render(&protos, spec.per_class, &mut rng);
    let test = (test_per_class > 0).then(|| spec.render(&protos, test_per_class, &mut rng));
    Ok((train, test))
}

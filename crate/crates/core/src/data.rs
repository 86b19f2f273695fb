//! Image batches and labelled datasets stored as tensor files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensorfile::{read_tensorfile, write_tensorfile, Result, Tensor, TensorFile, TensorFileError};

/// A batch of `[N, H, W, C]` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Images {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Images {
    pub fn new(count: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), count * height * width * channels, "image data length");
        Self { count, height, width, channels, data }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Images `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Images {
        let n = self.image_len();
        Images::new(end - start, self.height, self.width, self.channels, self.data[start * n..end * n].to_vec())
    }

    /// Standard-normal pixels, deterministic per seed.
    pub fn gaussian(count: usize, size: usize, channels: usize, seed: u64) -> Images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..count * size * size * channels)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Images::new(count, size, size, channels, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.count, self.height, self.width, self.channels], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Images> {
        if t.shape.len() != 4 {
            return Err(TensorFileError::CorruptHeader(format!("images must be rank 4, got {:?}", t.shape)));
        }
        Ok(Images::new(t.shape[0], t.shape[1], t.shape[2], t.shape[3], t.data.clone()))
    }
}

/// Images with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Images,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn to_tensorfile(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.insert("images", self.images.to_tensor()).expect("fresh container");
        if let Some(labels) = &self.labels {
            let data = labels.iter().map(|&l| l as f32).collect();
            f.insert("labels", Tensor::new(vec![labels.len()], data)).expect("fresh container");
        }
        f
    }

    pub fn from_tensorfile(f: &TensorFile) -> Result<Dataset> {
        let images = Images::from_tensor(f.require("images")?)?;
        let labels = match f.get("labels") {
            None => None,
            Some(t) => {
                if t.data.len() != images.count {
                    return Err(TensorFileError::CorruptHeader(format!(
                        "{} labels for {} images",
                        t.data.len(),
                        images.count
                    )));
                }
                let mut out = Vec::with_capacity(t.data.len());
                for &v in &t.data {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(TensorFileError::CorruptHeader(format!("label {v} is not a class index")));
                    }
                    out.push(v as usize);
                }
                Some(out)
            }
        };
        Ok(Dataset { images, labels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensorfile(path, &self.to_tensorfile())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_tensorfile(&read_tensorfile(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let ds = Dataset { images: Images::gaussian(3, 4, 2, 1), labels: Some(vec![0, 5, 2]) };
        let back = Dataset::from_tensorfile(&TensorFile::from_bytes(&ds.to_tensorfile().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.images.image(1).len(), 32);
    }

    #[test]
    fn rejects_fractional_labels() {
        let mut f = Dataset { images: Images::gaussian(1, 2, 1, 0), labels: None }.to_tensorfile();
        f.insert("labels", Tensor::new(vec![1], vec![0.5])).unwrap();
        assert!(Dataset::from_tensorfile(&f).is_err());
    }
}

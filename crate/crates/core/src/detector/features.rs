//! Precomputed visual features and bounding-box geometry.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DetectorError;
use crate::corpus::{BBox, GameRecord, ImageInfo};

/// Box geometry in image coordinates rescaled to [-1, 1] on both axes:
/// `[x_min, y_min, x_max, y_max, x_center, y_center, w_box, h_box]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialFeatures(pub [f64; 8]);

impl SpatialFeatures {
    pub fn x_min(&self) -> f64 {
        self.0[0]
    }
    pub fn y_min(&self) -> f64 {
        self.0[1]
    }
    pub fn x_max(&self) -> f64 {
        self.0[2]
    }
    pub fn y_max(&self) -> f64 {
        self.0[3]
    }
    pub fn width(&self) -> f64 {
        self.0[6]
    }
    pub fn height(&self) -> f64 {
        self.0[7]
    }
}

pub fn spatial_features(bbox: &BBox, image: &ImageInfo) -> Result<SpatialFeatures, DetectorError> {
    if !(image.width > 0.0 && image.height > 0.0) {
        return Err(DetectorError::DegenerateImage {
            width: image.width,
            height: image.height,
        });
    }
    let nx = |x: f64| 2.0 * x / image.width - 1.0;
    let ny = |y: f64| 2.0 * y / image.height - 1.0;
    let (x_min, y_min) = (nx(bbox.x), ny(bbox.y));
    let (x_max, y_max) = (nx(bbox.x + bbox.w), ny(bbox.y + bbox.h));
    Ok(SpatialFeatures([
        x_min,
        y_min,
        x_max,
        y_max,
        (x_min + x_max) / 2.0,
        (y_min + y_max) / 2.0,
        x_max - x_min,
        y_max - y_min,
    ]))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    vector: Vec<f64>,
}

/// Feature vectors of a fixed dimension, keyed by feature key.
///
/// Whole-image vectors live under the image's feature key; target-crop
/// vectors under [`GameRecord::crop_feature_key`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<(), DetectorError> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(DetectorError::FeatureDim {
                key,
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut [f64]> {
        self.vectors.get_mut(key).map(Vec::as_mut_slice)
    }

    pub fn lookup(&self, key: &str) -> Result<&[f64], DetectorError> {
        self.get(key)
            .ok_or_else(|| DetectorError::MissingFeatures(vec![key.to_string()]))
    }

    /// Image and crop keys referenced by `games` that have no vector, sorted and deduplicated.
    pub fn missing_keys(&self, games: &[GameRecord]) -> Vec<String> {
        let mut missing: Vec<String> = games
            .iter()
            .flat_map(|g| [g.image.feature_key().to_string(), g.crop_feature_key()])
            .filter(|k| !self.vectors.contains_key(k))
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    pub fn ensure_covers(&self, games: &[GameRecord]) -> Result<(), DetectorError> {
        let missing = self.missing_keys(games);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DetectorError::MissingFeatures(missing))
        }
    }

    /// Header line `{"dim": N}` followed by one `{"key", "vector"}` record per line.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, DetectorError> {
        let mut lines = reader
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let (_, header) = lines.next().ok_or_else(|| DetectorError::FeatureFile {
            line: 1,
            message: "missing header".into(),
        })?;
        let header: Header = serde_json::from_str(&header?).map_err(|e| DetectorError::FeatureFile {
            line: 1,
            message: e.to_string(),
        })?;
        let mut store = FeatureStore::new(header.dim);
        for (i, line) in lines {
            let entry: Entry = serde_json::from_str(&line?).map_err(|e| DetectorError::FeatureFile {
                line: i + 1,
                message: e.to_string(),
            })?;
            store.insert(entry.key, entry.vector)?;
        }
        Ok(store)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), DetectorError> {
        serde_json::to_writer(&mut out, &Header { dim: self.dim })?;
        out.write_all(b"\n")?;
        for (key, vector) in &self.vectors {
            serde_json::to_writer(
                &mut out,
                &Entry {
                    key: key.clone(),
                    vector: vector.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Fills every key referenced by `games` with [`pseudo_feature`] vectors.
    pub fn pseudo_for_games(games: &[GameRecord], dim: usize, seed: u64) -> Self {
        let mut store = FeatureStore::new(dim);
        for g in games {
            for key in [g.image.feature_key().to_string(), g.crop_feature_key()] {
                if let std::collections::btree_map::Entry::Vacant(slot) = store.vectors.entry(key) {
                    let v = pseudo_feature(slot.key(), dim, seed);
                    slot.insert(v);
                }
            }
        }
        store
    }
}

/// Deterministic unit-norm stand-in for a real feature vector, derived from
/// a hash of `(seed, key)`.
pub fn pseudo_feature(key: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: f64, h: f64) -> ImageInfo {
        ImageInfo {
            image_id: "i".into(),
            width: w,
            height: h,
            feature_key: None,
        }
    }

    #[test]
    fn spatial_cases() {
        let full = spatial_features(&BBox::new(0.0, 0.0, 640.0, 480.0), &image(640.0, 480.0)).unwrap();
        assert_eq!(full.0, [-1.0, -1.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let quarter = spatial_features(&BBox::new(25.0, 25.0, 50.0, 50.0), &image(100.0, 100.0)).unwrap();
        assert_eq!(quarter.0, [-0.5, -0.5, 0.5, 0.5, 0.0, 0.0, 1.0, 1.0]);
        let corner = spatial_features(&BBox::new(0.0, 0.0, 50.0, 50.0), &image(200.0, 100.0)).unwrap();
        assert_eq!(corner.0, [-1.0, -1.0, -0.5, 0.0, -0.75, -0.5, 0.5, 1.0]);
        assert!(spatial_features(&BBox::new(0.0, 0.0, 1.0, 1.0), &image(0.0, 10.0)).is_err());
    }

    #[test]
    fn pseudo_features_are_unit_and_stable() {
        let a = pseudo_feature("img/1", 16, 3);
        assert_eq!(a, pseudo_feature("img/1", 16, 3));
        assert_ne!(a, pseudo_feature("img/2", 16, 3));
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip() {
        let mut store = FeatureStore::new(2);
        store.insert("a", vec![0.1, -3.5e-9]).unwrap();
        store.insert("b", vec![1.0, 2.0]).unwrap();
        assert!(store.insert("c", vec![1.0]).is_err());
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();
        let back = FeatureStore::read(buf.as_slice()).unwrap();
        assert_eq!(back, store);
        assert!(FeatureStore::read("".as_bytes()).is_err());
        assert!(FeatureStore::read("{\"dim\": 2}\n{\"key\": \"x\", \"vector\": [1]}\n".as_bytes()).is_err());
    }
}

//! Domain types shared by every stage of the pipeline.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Identifies one indexed feature: the image it belongs to and its position
/// inside that image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureRef {
    pub image_id: u32,
    pub feature_id: u32,
}

impl FeatureRef {
    pub fn new(image_id: u32, feature_id: u32) -> Self {
        Self { image_id, feature_id }
    }

    /// Packs the pair into a single key whose integer order equals the
    /// `(image_id, feature_id)` lexicographic order.
    #[inline]
    pub fn key(self) -> u64 {
        ((self.image_id as u64) << 32) | self.feature_id as u64
    }

    #[inline]
    pub fn from_key(key: u64) -> Self {
        Self {
            image_id: (key >> 32) as u32,
            feature_id: key as u32,
        }
    }
}

/// The local descriptors of one image, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    dim: usize,
    data: Vec<f32>,
}

impl ImageRecord {
    pub fn new(image_id: u32, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCorpus("descriptor dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCorpus(format!(
                "image {image_id}: non-finite value in descriptor {}",
                pos / dim
            )));
        }
        Ok(Self { image_id, dim, data })
    }

    /// Builds a record from individual descriptors; all must share `dim`.
    pub fn from_descriptors<I, D>(image_id: u32, dim: usize, descriptors: I) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[f32]>,
    {
        let mut data = Vec::new();
        for d in descriptors {
            let d = d.as_ref();
            if d.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: d.len(),
                });
            }
            data.extend_from_slice(d);
        }
        Self::new(image_id, dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn descriptor(&self, feature_id: usize) -> &[f32] {
        &self.data[feature_id * self.dim..(feature_id + 1) * self.dim]
    }

    pub fn descriptors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

/// A set of images with dense ids `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dim: usize,
    images: Vec<ImageRecord>,
}

impl Corpus {
    pub fn new(dim: usize, images: Vec<ImageRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCorpus("descriptor dimension must be positive".into()));
        }
        if images.is_empty() {
            return Err(Error::InvalidCorpus("corpus must contain at least one image".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if img.image_id as usize != i {
                return Err(Error::InvalidCorpus(format!(
                    "image ids must be dense: position {i} holds id {}",
                    img.image_id
                )));
            }
            if img.dim != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: img.dim,
                });
            }
        }
        Ok(Self { dim, images })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn image(&self, image_id: u32) -> &ImageRecord {
        &self.images[image_id as usize]
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_features(&self) -> usize {
        self.images.iter().map(ImageRecord::len).sum()
    }

    /// Iterates every descriptor together with its reference.
    pub fn features(&self) -> impl Iterator<Item = (FeatureRef, &[f32])> + '_ {
        self.images.iter().flat_map(|img| {
            img.descriptors()
                .enumerate()
                .map(move |(f, d)| (FeatureRef::new(img.image_id, f as u32), d))
        })
    }

    /// The first `n` images, still a valid corpus.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Corpus::new(self.dim, self.images[..n.min(self.images.len())].to_vec())
    }
}

/// A flat k-means quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    centroids: Vec<f32>,
    pub seed: u64,
}

impl Vocabulary {
    /// Rejects empty vocabularies, non-finite centroids and duplicate
    /// centroids.
    pub fn new(dim: usize, centroids: Vec<f32>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidVocabulary("dimension must be positive".into()));
        }
        if centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::InvalidVocabulary(format!(
                "{} values do not form a positive number of {dim}-dimensional centroids",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVocabulary("non-finite centroid value".into()));
        }
        let mut seen = HashSet::new();
        for (i, c) in centroids.chunks_exact(dim).enumerate() {
            let bits: Vec<u32> = c.iter().map(|v| canonical_bits(*v)).collect();
            if !seen.insert(bits) {
                return Err(Error::InvalidVocabulary(format!("duplicate centroid {i}")));
            }
        }
        Ok(Self { dim, centroids, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, word: usize) -> &[f32] {
        &self.centroids[word * self.dim..(word + 1) * self.dim]
    }

    pub fn centroids(&self) -> std::slice::ChunksExact<'_, f32> {
        self.centroids.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f32] {
        &self.centroids
    }
}

/// Bit pattern with `-0.0` folded onto `0.0`, so equal values hash equal.
pub(crate) fn canonical_bits(v: f32) -> u32 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_key_order_matches_tuple_order() {
        let a = FeatureRef::new(1, 9);
        let b = FeatureRef::new(2, 0);
        assert!(a.key() < b.key());
        assert_eq!(FeatureRef::from_key(a.key()), a);
    }

    #[test]
    fn corpus_requires_dense_ids() {
        let img = ImageRecord::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(Corpus::new(2, vec![img]).is_err());
    }

    #[test]
    fn image_without_features_is_valid() {
        let img = ImageRecord::new(0, 3, vec![]).unwrap();
        let c = Corpus::new(3, vec![img]).unwrap();
        assert_eq!(c.num_features(), 0);
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let err = Vocabulary::new(2, vec![1.0, 2.0, 0.5, 0.5, 1.0, 2.0], 0).unwrap_err();
        assert!(err.to_string().contains("duplicate centroid 2"));
        assert!(Vocabulary::new(1, vec![0.0, -0.0], 0).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(ImageRecord::new(0, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Vocabulary::new(1, vec![f32::INFINITY], 0).is_err());
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::netpbm::{load_pgm, load_ppm};
use super::BitemporalSample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng;
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const MANIFEST: &str = "manifest.txt";

/// Ordered sample ids of one split under `<root>/<split>/{A,B,label}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    root: PathBuf,
    split: String,
    ids: Vec<String>,
}

impl DatasetIndex {
    pub fn new(root: impl Into<PathBuf>, split: impl Into<String>, ids: Vec<String>) -> Self {
        Self {
            root: root.into(),
            split: split.into(),
            ids,
        }
    }

    /// Reads the manifest of `split` and checks every listed sample.
    pub fn open(root: impl AsRef<Path>, split: &str) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(split).join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let index = Self::new(root, split, ids);
        index.verify()?;
        Ok(index)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn paths(&self, id: &str) -> [PathBuf; 3] {
        let dir = self.root.join(&self.split);
        [
            dir.join("A").join(format!("{id}.ppm")),
            dir.join("B").join(format!("{id}.ppm")),
            dir.join("label").join(format!("{id}.pgm")),
        ]
    }

    pub fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(&self.split).join(MANIFEST);
        let mut text = self.ids.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self, id: &str) -> Result<BitemporalSample> {
        let [a, b, label] = self.paths(id);
        let sample = BitemporalSample {
            pre: load_ppm(a)?,
            post: load_ppm(b)?,
            mask: load_pgm(label)?,
        };
        sample
            .check()
            .map_err(|e| Error::Input(format!("sample `{id}` in {}: {e}", self.split)))?;
        Ok(sample)
    }

    /// Every id resolves to files of matching size.
    pub fn verify(&self) -> Result<()> {
        for id in &self.ids {
            self.load(id)?;
        }
        Ok(())
    }

    pub fn load_all(&self) -> Result<Vec<BitemporalSample>> {
        self.ids.iter().map(|id| self.load(id)).collect()
    }
}

/// Sample positions grouped into batches. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut r = rng::stream(seed, (rng::streams::SHUFFLE << 32) | epoch as u64);
        order.shuffle(&mut r);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stacked pre/post images (N,3,H,W) and masks (N,H,W).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub mask: Mask,
}

impl Batch {
    pub fn from_samples(ids: Vec<String>, samples: &[&BitemporalSample]) -> Result<Self> {
        let pre: Vec<_> = samples.iter().map(|s| s.pre.clone()).collect();
        let post: Vec<_> = samples.iter().map(|s| s.post.clone()).collect();
        let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok(Self {
            ids,
            pre: Tensor::stack(&pre)?,
            post: Tensor::stack(&post)?,
            mask: Mask::stack(&masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lazily loads batches from disk.
pub struct BatchIter<'a> {
    index: &'a DatasetIndex,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let positions = self.batches.next()?;
        let ids: Vec<String> = positions.iter().map(|&i| self.index.ids[i].clone()).collect();
        let samples: Result<Vec<_>> = ids.iter().map(|id| self.index.load(id)).collect();
        Some(samples.and_then(|s| Batch::from_samples(ids, &s.iter().collect::<Vec<_>>())))
    }
}

pub fn batch_iter(index: &DatasetIndex, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> BatchIter<'_> {
    BatchIter {
        index,
        batches: batch_order(index.len(), batch_size, seed, epoch, shuffle).into_iter(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_and_order() {
        let b = batch_order(10, 4, 0, 0, false);
        assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch_only() {
        let a = batch_order(50, 8, 3, 1, true);
        assert_eq!(a, batch_order(50, 8, 3, 1, true));
        assert_ne!(a, batch_order(50, 8, 3, 2, true));
        assert_ne!(a, batch_order(50, 8, 4, 1, true));
        let mut flat: Vec<usize> = a.concat();
        flat.sort();
        assert_eq!(flat, (0..50).collect::<Vec<_>>());
    }
}

//! External memory of detached foreground pixel embeddings.
//!
//! Pixels are sampled at feature resolution from groundtruth masks reduced
//! by plurality vote per cell, then queued FIFO up to a fixed capacity.
//! Snapshots are plain copies, so nothing read from the bank can carry a
//! gradient back into the network that produced it.

use std::collections::{HashSet, VecDeque};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::features::FeatureMap;
use crate::float::Float;
use crate::mask::Mask;

pub const DEFAULT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    /// 1-based instance index within its scene.
    pub instance_id: u32,
    pub class_id: u32,
    pub step_added: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelSample<T> {
    pub embedding: Vec<T>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Dense,
    Sparse,
    InstanceBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub pixels_per_image: usize,
    pub pixels_per_instance: usize,
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy {
            kind: SamplingKind::InstanceBalanced,
            pixels_per_image: 512,
            pixels_per_instance: 50,
        }
    }
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.pixels_per_image >= 1 && self.pixels_per_instance >= 1,
            "sampling counts must be positive"
        );
        Ok(())
    }
}

/// Instance index (1-based, 0 = background) of every feature cell: the
/// plurality label of its `stride x stride` block, ties going to the lower
/// label.
pub fn downsample_labels(masks: &[Mask], h: usize, w: usize, stride: usize) -> Result<Vec<u32>> {
    for m in masks {
        ensure!(
            m.dims() == (h * stride, w * stride),
            "mask {:?} does not match a {h}x{w} feature map at stride {stride}",
            m.dims()
        );
    }
    let mut out = vec![0u32; h * w];
    let mut counts = vec![0usize; masks.len() + 1];
    for cy in 0..h {
        for cx in 0..w {
            counts.fill(0);
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let label = masks.iter().position(|m| m.get(y, x)).map_or(0, |k| k + 1);
                    counts[label] += 1;
                }
            }
            let mut best = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out[cy * w + cx] = best as u32;
        }
    }
    Ok(out)
}

/// Draw foreground cells of `fm` according to `strategy`. Background cells
/// are never returned; embeddings are copies.
pub fn sample_pixels<T: Float>(
    fm: &FeatureMap<T>,
    masks: &[Mask],
    labels: &[u32],
    scene_id: &str,
    strategy: &SamplingStrategy,
    rng: &mut impl Rng,
    step: u64,
) -> Result<Vec<PixelSample<T>>> {
    strategy.validate()?;
    ensure!(
        masks.len() == labels.len(),
        "{} masks but {} labels",
        masks.len(),
        labels.len()
    );
    let (h, w) = (fm.height(), fm.width());
    let cells = downsample_labels(masks, h, w, fm.stride)?;
    let make = |idx: usize| {
        let inst = cells[idx];
        PixelSample {
            embedding: fm.embedding(idx / w, idx % w),
            provenance: Provenance {
                scene_id: scene_id.to_string(),
                instance_id: inst,
                class_id: labels[inst as usize - 1],
                step_added: step,
            },
        }
    };
    let foreground: Vec<usize> = (0..h * w).filter(|&i| cells[i] > 0).collect();
    let chosen: Vec<usize> = match strategy.kind {
        SamplingKind::Dense => foreground,
        SamplingKind::Sparse => {
            let n = foreground.len().min(strategy.pixels_per_image);
            sample(rng, foreground.len(), n)
                .into_iter()
                .map(|i| foreground[i])
                .collect()
        }
        SamplingKind::InstanceBalanced => {
            let mut out = Vec::new();
            for k in 1..=masks.len() as u32 {
                let own: Vec<usize> = foreground
                    .iter()
                    .copied()
                    .filter(|&i| cells[i] == k)
                    .collect();
                let n = own.len().min(strategy.pixels_per_instance);
                out.extend(sample(rng, own.len(), n).into_iter().map(|i| own[i]));
            }
            out
        }
    };
    Ok(chosen.into_iter().map(make).collect())
}

/// Detached copy of (part of) the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySnapshot<T> {
    /// Row-major `[M, dim]`.
    pub embeddings: Vec<T>,
    pub dim: usize,
    pub provenance: Vec<Provenance>,
}

impl<T: Float> MemorySnapshot<T> {
    pub fn empty(dim: usize) -> Self {
        MemorySnapshot {
            embeddings: Vec::new(),
            dim,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Snapshot holding exactly `samples`, in order.
    pub fn from_samples(dim: usize, samples: &[PixelSample<T>]) -> Result<Self> {
        let mut snap = Self::empty(dim);
        for s in samples {
            ensure!(
                s.embedding.len() == dim,
                "embedding length {} != {dim}",
                s.embedding.len()
            );
            snap.embeddings.extend_from_slice(&s.embedding);
            snap.provenance.push(s.provenance.clone());
        }
        Ok(snap)
    }
}

/// Bounded FIFO of pixel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    dim: usize,
    queue: VecDeque<PixelSample<T>>,
    inserted: u64,
}

impl<T: Float> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        ensure!(capacity >= 1, "memory capacity must be >= 1");
        ensure!(dim >= 1, "embedding length must be >= 1");
        Ok(MemoryBank {
            capacity,
            dim,
            queue: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Total number of samples ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Stored samples, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &PixelSample<T>> {
        self.queue.iter()
    }

    /// Append `samples`, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, samples: Vec<PixelSample<T>>) -> Result<()> {
        let mut last = self.queue.back().map_or(0, |s| s.provenance.step_added);
        for s in &samples {
            ensure!(
                s.embedding.len() == self.dim,
                "embedding length {} does not match bank dimension {}",
                s.embedding.len(),
                self.dim
            );
            ensure!(
                s.embedding.iter().all(|v| v.is_finite()),
                "non-finite embedding"
            );
            ensure!(
                s.provenance.instance_id >= 1,
                "background pixels are never stored"
            );
            ensure!(
                s.provenance.step_added >= last,
                "step_added {} precedes stored step {last}",
                s.provenance.step_added
            );
            last = s.provenance.step_added;
        }
        self.inserted += samples.len() as u64;
        let skip = samples.len().saturating_sub(self.capacity);
        self.queue.extend(samples.into_iter().skip(skip));
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(())
    }

    /// Copy of every entry whose scene is not in `exclude`.
    pub fn snapshot(&self, exclude: &HashSet<String>) -> MemorySnapshot<T> {
        let mut snap = MemorySnapshot::empty(self.dim);
        for s in self
            .queue
            .iter()
            .filter(|s| !exclude.contains(&s.provenance.scene_id))
        {
            snap.embeddings.extend_from_slice(&s.embedding);
            snap.provenance.push(s.provenance.clone());
        }
        snap
    }

    /// Rebuild a bank from checkpointed parts.
    pub fn from_parts(capacity: usize, snapshot: MemorySnapshot<T>, inserted: u64) -> Result<Self> {
        let mut bank = Self::new(capacity, snapshot.dim)?;
        ensure!(snapshot.len() <= capacity, "stored memory exceeds capacity");
        ensure!(
            snapshot.embeddings.len() == snapshot.len() * snapshot.dim,
            "memory matrix size mismatch"
        );
        for (i, p) in snapshot.provenance.iter().enumerate() {
            bank.queue.push_back(PixelSample {
                embedding: snapshot.row(i).to_vec(),
                provenance: p.clone(),
            });
        }
        bank.inserted = inserted;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_at(step: u64, scene: &str) -> PixelSample<f64> {
        PixelSample {
            embedding: vec![step as f64, 0.0],
            provenance: Provenance {
                scene_id: scene.into(),
                instance_id: 1,
                class_id: 1,
                step_added: step,
            },
        }
    }

    #[test]
    fn fifo_arithmetic() {
        let mut bank = MemoryBank::new(100, 2).unwrap();
        bank.push((0..60).map(|_| sample_at(0, "a")).collect())
            .unwrap();
        bank.push((0..60).map(|_| sample_at(1, "b")).collect())
            .unwrap();
        assert_eq!(bank.len(), 100);
        assert_eq!(
            bank.iter().filter(|s| s.provenance.step_added == 0).count(),
            40
        );
        let before = bank.clone();
        bank.push(Vec::new()).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn oversize_push_keeps_newest() {
        let mut bank = MemoryBank::new(3, 2).unwrap();
        let batch: Vec<_> = (0..5).map(|i| sample_at(i, "a")).collect();
        bank.push(batch).unwrap();
        let kept: Vec<u64> = bank.iter().map(|s| s.provenance.step_added).collect();
        assert_eq!(kept, vec![2, 3, 4]);
        assert_eq!(bank.inserted(), 5);
    }

    #[test]
    fn push_rejects_bad_samples() {
        let mut bank = MemoryBank::new(3, 2).unwrap();
        let mut s = sample_at(0, "a");
        s.embedding.push(1.0);
        assert!(bank.push(vec![s]).is_err());
        let mut s = sample_at(0, "a");
        s.provenance.instance_id = 0;
        assert!(bank.push(vec![s]).is_err());
    }

    #[test]
    fn snapshot_is_a_copy_and_respects_exclusion() {
        let mut bank = MemoryBank::new(10, 2).unwrap();
        bank.push(vec![sample_at(0, "a"), sample_at(0, "b")])
            .unwrap();
        let all = bank.snapshot(&HashSet::new());
        assert_eq!(all.len(), 2);
        let only_b = bank.snapshot(&["a".to_string()].into());
        assert_eq!(only_b.provenance[0].scene_id, "b");
        let none = bank.snapshot(&["a".to_string(), "b".to_string()].into());
        assert!(none.is_empty());
        bank.push(vec![sample_at(1, "c")]).unwrap();
        assert_eq!(all.len(), 2);
    }

    fn block_scene(size: usize, blocks: &[(usize, usize, usize)]) -> Vec<Mask> {
        blocks
            .iter()
            .map(|&(y0, x0, side)| {
                let mut m = Mask::empty(size, size);
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        m.set(y, x, true);
                    }
                }
                m
            })
            .collect()
    }

    fn features(h: usize, w: usize) -> FeatureMap<f64> {
        let d = 3;
        let data = (0..d * h * w).map(|i| i as f64).collect();
        FeatureMap::new(Tensor::from_vec(&[d, h, w], data).unwrap(), 4, 0).unwrap()
    }

    #[test]
    fn balanced_sampling_counts() {
        // instance 1 covers 10 cells (2x5 cells), instance 2 covers 36x36 cells
        let mut masks = block_scene(160, &[(0, 0, 8)]);
        masks[0] = {
            let mut m = Mask::empty(160, 160);
            for y in 0..8 {
                for x in 0..20 {
                    m.set(y, x, true);
                }
            }
            m
        };
        masks.extend(block_scene(160, &[(16, 16, 144)]));
        let fm = features(40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_pixels(
            &fm,
            &masks,
            &[1, 2],
            "s",
            &SamplingStrategy::default(),
            &mut rng,
            0,
        )
        .unwrap();
        assert_eq!(
            s.iter().filter(|p| p.provenance.instance_id == 1).count(),
            10
        );
        assert_eq!(
            s.iter().filter(|p| p.provenance.instance_id == 2).count(),
            50
        );
        assert!(s
            .iter()
            .all(|p| p.provenance.class_id == p.provenance.instance_id));
    }

    #[test]
    fn background_only_scene_yields_nothing() {
        let fm = features(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [
            SamplingKind::Dense,
            SamplingKind::Sparse,
            SamplingKind::InstanceBalanced,
        ] {
            let strat = SamplingStrategy {
                kind,
                ..SamplingStrategy::default()
            };
            assert!(sample_pixels(&fm, &[], &[], "s", &strat, &mut rng, 0)
                .unwrap()
                .is_empty());
        }
    }

    #[test]
    fn plurality_vote_ties_prefer_background() {
        // 2x2 block at stride 2 with exactly two foreground pixels
        let m = Mask::from_rows(&[&[1, 1], &[0, 0]]).unwrap();
        assert_eq!(downsample_labels(&[m], 1, 1, 2).unwrap(), vec![0]);
        let m = Mask::from_rows(&[&[1, 1], &[1, 0]]).unwrap();
        assert_eq!(downsample_labels(&[m], 1, 1, 2).unwrap(), vec![1]);
    }

    #[test]
    fn embeddings_are_copied_from_the_cell() {
        let masks = block_scene(8, &[(4, 4, 4)]);
        let fm = features(2, 2);
        let strat = SamplingStrategy {
            kind: SamplingKind::Dense,
            ..SamplingStrategy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_pixels(&fm, &masks, &[3], "s", &strat, &mut rng, 7).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].embedding, vec![3.0, 7.0, 11.0]);
        assert_eq!(s[0].provenance.step_added, 7);
    }
}

//! Candidate image pairs from frame order and global-descriptor similarity.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::executor::Executor;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("descriptor dimension mismatch: image {image_id} has {found}, expected {expected}")]
    DimensionMismatch {
        image_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("descriptor of image {0} is not unit norm")]
    NotNormalized(usize),
    #[error("malformed descriptor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub image_id: usize,
    pub vector: Vec<f32>,
}

impl GlobalDescriptor {
    /// Normalizes `vector` to unit length.
    pub fn new(image_id: usize, vector: Vec<f32>) -> Result<Self, RetrievalError> {
        let norm = vector
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 || !norm.is_finite() {
            return Err(RetrievalError::NotNormalized(image_id));
        }
        let vector = vector.iter().map(|&v| (f64::from(v) / norm) as f32).collect();
        Ok(Self { image_id, vector })
    }

    fn dot(&self, other: &GlobalDescriptor) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Sequential,
    Similarity,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCandidate {
    /// Descriptor similarity, when one was computed for this pair.
    pub score: Option<f64>,
    pub provenance: Provenance,
}

/// Deduplicated image pairs keyed by `(i, j)` with `i < j`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairCandidateList {
    pairs: BTreeMap<(usize, usize), PairCandidate>,
}

impl PairCandidateList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `(i, j)` in either order; self-pairs are ignored.
    pub fn insert(&mut self, i: usize, j: usize, candidate: PairCandidate) {
        if i == j {
            return;
        }
        let key = (i.min(j), i.max(j));
        self.pairs
            .entry(key)
            .and_modify(|existing| {
                if existing.provenance != candidate.provenance {
                    existing.provenance = Provenance::Both;
                }
                if existing.score.is_none() {
                    existing.score = candidate.score;
                }
            })
            .or_insert(candidate);
    }

    pub fn merge(&mut self, other: &PairCandidateList) {
        for (&(i, j), &c) in &other.pairs {
            self.insert(i, j, c);
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs.contains_key(&(i.min(j), i.max(j)))
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&PairCandidate> {
        self.pairs.get(&(i.min(j), i.max(j)))
    }

    /// Pairs in ascending `(i, j)` order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &PairCandidate)> {
        self.pairs.iter()
    }
}

/// All `(i, j)` with `0 < j - i <= lookahead`.
pub fn sequential_pairs(n_images: usize, lookahead: usize) -> PairCandidateList {
    let mut list = PairCandidateList::new();
    for i in 0..n_images {
        for j in (i + 1)..n_images.min(i + lookahead + 1) {
            list.insert(
                i,
                j,
                PairCandidate {
                    score: None,
                    provenance: Provenance::Sequential,
                },
            );
        }
    }
    list
}

/// Dense symmetric similarity matrix; only entries with `i != j` are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Dot products between all descriptors, computed tile by tile on the executor.
///
/// Each entry is one dot product summed in the same order regardless of the
/// tile size, so the result does not depend on `block`.
pub fn blocked_similarity(
    descs: &[GlobalDescriptor],
    block: usize,
    executor: &Executor,
) -> Result<SimilarityMatrix, RetrievalError> {
    let n = descs.len();
    if let Some(first) = descs.first() {
        let dim = first.vector.len();
        for d in descs {
            if d.vector.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    image_id: d.image_id,
                    expected: dim,
                    found: d.vector.len(),
                });
            }
        }
    }
    let block = block.max(1);
    let n_blocks = n.div_ceil(block);
    let tiles: Vec<(usize, usize)> = (0..n_blocks)
        .flat_map(|bi| (bi..n_blocks).map(move |bj| (bi, bj)))
        .collect();

    let computed = executor.map(&tiles, |_, &(bi, bj)| {
        let mut out = Vec::new();
        for i in (bi * block)..((bi + 1) * block).min(n) {
            for j in (bj * block).max(i + 1)..((bj + 1) * block).min(n) {
                out.push((i, j, descs[i].dot(&descs[j])));
            }
        }
        out
    });

    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    for (i, j, v) in computed.into_iter().flatten() {
        values[i * n + j] = v;
        values[j * n + i] = v;
    }
    Ok(SimilarityMatrix { n, values })
}

/// Per-image top-`k` partners, then dropping those scoring below `min_score`.
///
/// Ties are broken by the lower partner index.
pub fn select_similarity_pairs(sim: &SimilarityMatrix, k: usize, min_score: f64) -> PairCandidateList {
    let n = sim.len();
    let mut list = PairCandidateList::new();
    for i in 0..n {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        partners.sort_by(|&a, &b| {
            sim.get(i, b)
                .partial_cmp(&sim.get(i, a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in partners.iter().take(k) {
            let score = sim.get(i, j);
            if score >= min_score {
                list.insert(
                    i,
                    j,
                    PairCandidate {
                        score: Some(score),
                        provenance: Provenance::Similarity,
                    },
                );
            }
        }
    }
    list
}

/// Retrieval depth: 5 partners per image below `large_threshold` images, 15 otherwise.
pub fn retrieval_k(n_images: usize, large_threshold: usize) -> usize {
    if n_images < large_threshold {
        5
    } else {
        15
    }
}

const DESCRIPTOR_MAGIC: &[u8; 8] = b"GSFMDESC";
const DESCRIPTOR_VERSION: u32 = 1;

/// Writes descriptors: magic, version, n_images, dim (u32 LE), then f32 LE rows.
pub fn write_descriptors(path: &Path, descs: &[GlobalDescriptor]) -> Result<(), RetrievalError> {
    let dim = descs.first().map_or(0, |d| d.vector.len());
    let mut buf = Vec::with_capacity(20 + descs.len() * dim * 4);
    buf.extend_from_slice(DESCRIPTOR_MAGIC);
    buf.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(descs.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for d in descs {
        if d.vector.len() != dim {
            return Err(RetrievalError::DimensionMismatch {
                image_id: d.image_id,
                expected: dim,
                found: d.vector.len(),
            });
        }
        for v in &d.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a descriptor file; row `i` becomes the descriptor of image `i`.
pub fn read_descriptors(path: &Path) -> Result<Vec<GlobalDescriptor>, RetrievalError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != DESCRIPTOR_MAGIC {
        return Err(RetrievalError::Format("bad magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(8);
    if version != DESCRIPTOR_VERSION {
        return Err(RetrievalError::Format(format!("unsupported version {version}")));
    }
    let n = word(12) as usize;
    let dim = word(16) as usize;
    if bytes.len() != 20 + n * dim * 4 {
        return Err(RetrievalError::Format(format!(
            "expected {} payload bytes, found {}",
            n * dim * 4,
            bytes.len() - 20
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &bytes[20 + i * dim * 4..20 + (i + 1) * dim * 4];
        let vector: Vec<f32> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let norm: f64 = vector.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(RetrievalError::NotNormalized(i));
        }
        out.push(GlobalDescriptor {
            image_id: i,
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn keys(list: &PairCandidateList) -> Vec<(usize, usize)> {
        list.pairs()
    }

    #[test]
    fn sequential_examples() {
        assert_eq!(keys(&sequential_pairs(3, 10)), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(
            keys(&sequential_pairs(5, 1)),
            vec![(0, 1), (1, 2), (2, 3), (3, 4)]
        );
        let expected: usize = (1..=10).map(|d| 100 - d).sum();
        assert_eq!(expected, 945);
        assert_eq!(sequential_pairs(100, 10).len(), expected);
    }

    #[test]
    fn similarity_of_identical_and_orthogonal() {
        let a = GlobalDescriptor::new(0, vec![1.0, 0.0, 0.0]).unwrap();
        let b = GlobalDescriptor::new(1, vec![1.0, 0.0, 0.0]).unwrap();
        let c = GlobalDescriptor::new(2, vec![0.0, 3.0, 0.0]).unwrap();
        let sim = blocked_similarity(&[a, b, c], 2, &Executor::new(1)).unwrap();
        assert_eq!(sim.get(0, 1), 1.0);
        assert_eq!(sim.get(0, 2), 0.0);
    }

    #[test]
    fn block_size_invariance_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let descs: Vec<GlobalDescriptor> = (0..120)
            .map(|i| {
                let v = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                GlobalDescriptor::new(i, v).unwrap()
            })
            .collect();
        let single = blocked_similarity(&descs, 120, &Executor::new(1)).unwrap();
        let tiled = blocked_similarity(&descs, 50, &Executor::new(3)).unwrap();
        let bits = |m: &SimilarityMatrix| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&single), bits(&tiled));
    }

    #[test]
    fn dimension_mismatch() {
        let a = GlobalDescriptor::new(0, vec![1.0, 0.0]).unwrap();
        let b = GlobalDescriptor::new(1, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            blocked_similarity(&[a, b], 50, &Executor::new(1)),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn top_k_selection() {
        let scores = |i: usize, j: usize| match (i, j) {
            (0, 1) => 0.9,
            (0, 2) => 0.5,
            _ => 0.2,
        };
        let sim = SimilarityMatrix::from_fn(3, scores);
        assert_eq!(keys(&select_similarity_pairs(&sim, 1, 0.3)), vec![(0, 1), (0, 2)]);

        let low = SimilarityMatrix::from_fn(6, |_, _| 0.25);
        assert!(select_similarity_pairs(&low, 5, 0.3).is_empty());

        let any = SimilarityMatrix::from_fn(6, |i, j| ((i * 7 + j) % 5) as f64 / 5.0 - 0.5);
        assert_eq!(select_similarity_pairs(&any, 5, -1.0).len(), 15);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let sim = SimilarityMatrix::from_fn(4, |_, _| 0.5);
        // Image 3 would pick 0; images 0..2 pick their lowest other index.
        assert_eq!(keys(&select_similarity_pairs(&sim, 1, 0.3)), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn merge_deduplicates() {
        let mut seq = sequential_pairs(4, 1);
        let sim = SimilarityMatrix::from_fn(4, |i, j| if j == i + 1 { 0.9 } else { 0.1 });
        seq.merge(&select_similarity_pairs(&sim, 1, 0.3));
        assert_eq!(seq.len(), 3);
        let c = seq.get(0, 1).unwrap();
        assert_eq!(c.provenance, Provenance::Both);
        assert_eq!(c.score, Some(0.9));
    }

    #[test]
    fn retrieval_depth_switch() {
        assert_eq!(retrieval_k(499, 500), 5);
        assert_eq!(retrieval_k(500, 500), 15);
    }

    #[test]
    fn descriptor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.bin");
        let descs = vec![
            GlobalDescriptor::new(0, vec![0.6, 0.8]).unwrap(),
            GlobalDescriptor::new(1, vec![1.0, 0.0]).unwrap(),
        ];
        write_descriptors(&path, &descs).unwrap();
        assert_eq!(read_descriptors(&path).unwrap(), descs);
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_descriptors(&path), Err(RetrievalError::Format(_))));
    }
}

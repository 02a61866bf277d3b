//! Synthetic multi-label data with controllable spurious label correlations,
//! clustering-based heterogeneity partitioning, and annotation masking.
//!
//! Each sample couples a latent class set (pairwise-coupled Bernoulli draws
//! over a base co-occurrence matrix) with an input vector built from class
//! prototypes, one of two context vectors, and Gaussian noise. The designated
//! class pair (0, 1) co-occurs under context 1 and anti-occurs under context
//! 0 with probability `spurious_strength`, so context-aligned shards exhibit
//! label correlations that the pooled distribution does not.

use crate::encoders::VisualEncoder;
use crate::error::{Error, Result};
use crate::loss::{Label, LabelVector};
use crate::rng::{self, derive, derive_indexed};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// The class pair whose co-occurrence is steered by the context.
pub const SPURIOUS_PAIR: (usize, usize) = (0, 1);

const PRIOR_RANGE: (f64, f64) = (0.10, 0.22);
const COUPLING_GAIN: f64 = 1.25;
const CONTEXT_SCALE: f64 = 0.7;
const NOISE_STD: f64 = 0.4;

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    /// Symmetric C×C matrix in [0, 1] with unit diagonal.
    pub base_cooccurrence: Tensor,
    /// ρ ∈ [0, 1]: probability that the context overrides the spurious pair.
    pub spurious_strength: f64,
    pub seed: u64,
    /// Class names; prototype directions are drawn per name from the shared
    /// concept stream so the pretrained encoder pair can recognize them.
    pub class_names: Vec<String>,
    pub concept_seed: u64,
}

impl GeneratorSpec {
    /// Mild uniform off-diagonal co-occurrence.
    pub fn default_cooccurrence(classes: usize) -> Tensor {
        let mut m = Tensor::full(&[classes, classes], 0.1);
        for i in 0..classes {
            m.set2(i, i, 1.0);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter(
                "generator needs at least two classes".into(),
            ));
        }
        if self.class_names.len() != self.classes {
            return Err(Error::InvalidParameter(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            )));
        }
        let m = &self.base_cooccurrence;
        if m.shape() != [self.classes, self.classes] {
            return Err(Error::ShapeMismatch {
                op: "generator_spec",
                lhs: m.shape().to_vec(),
                rhs: vec![self.classes, self.classes],
            });
        }
        for i in 0..self.classes {
            if (m.get2(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(
                    "co-occurrence diagonal must be 1".into(),
                ));
            }
            for j in 0..self.classes {
                let v = m.get2(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParameter(
                        "co-occurrence entries must lie in [0, 1]".into(),
                    ));
                }
                if (v - m.get2(j, i)).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(
                        "co-occurrence matrix must be symmetric".into(),
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::InvalidParameter(format!(
                "spurious strength must lie in [0, 1], got {}",
                self.spurious_strength
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub x: Vec<f64>,
    pub y: LabelVector,
}

impl Sample {
    pub fn input(&self) -> Tensor {
        Tensor::vector(self.x.clone())
    }
}

/// Generate the dataset together with each sample's latent context flag
/// (exposed for statistical verification).
pub fn generate_with_context(spec: &GeneratorSpec) -> Result<(Vec<Sample>, Vec<bool>)> {
    spec.validate()?;
    let c = spec.classes;
    let mut prior_rng = rng::chacha(derive(spec.seed, "priors"));
    let priors: Vec<f64> = (0..c)
        .map(|_| prior_rng.gen_range(PRIOR_RANGE.0..PRIOR_RANGE.1))
        .collect();
    let proto_scale = (spec.input_dim as f64).sqrt();
    let protos: Vec<Tensor> = spec
        .class_names
        .iter()
        .map(|name| {
            let mut p = rng::concept_direction(spec.concept_seed, name, spec.input_dim);
            p.scale_assign(proto_scale);
            p
        })
        .collect();
    let contexts: [Tensor; 2] = [
        rng::normal_tensor(derive_indexed(spec.seed, "context", 0), &[spec.input_dim], CONTEXT_SCALE),
        rng::normal_tensor(derive_indexed(spec.seed, "context", 1), &[spec.input_dim], CONTEXT_SCALE),
    ];
    let mut rng = rng::chacha(derive(spec.seed, "samples"));
    let (pa, pb) = SPURIOUS_PAIR;

    let mut samples = Vec::with_capacity(spec.samples);
    let mut ctx_flags = Vec::with_capacity(spec.samples);
    for id in 0..spec.samples {
        let ctx = rng.gen_bool(0.5);
        // sequential pairwise-coupled Bernoulli draws
        let mut active = vec![false; c];
        for i in 0..c {
            let mut logit = (priors[i] / (1.0 - priors[i])).ln();
            for (j, &on) in active.iter().enumerate().take(i) {
                if on {
                    logit += COUPLING_GAIN * spec.base_cooccurrence.get2(i, j);
                }
            }
            let p = 1.0 / (1.0 + (-logit).exp());
            active[i] = rng.gen_bool(p);
        }
        // spurious override tied to the context
        if rng.gen_bool(spec.spurious_strength) {
            active[pa] = true;
            active[pb] = ctx;
        }
        let mut x = vec![0.0; spec.input_dim];
        for (i, &on) in active.iter().enumerate() {
            if on {
                for (xv, pv) in x.iter_mut().zip(protos[i].values()) {
                    *xv += pv;
                }
            }
        }
        let ctx_vec = &contexts[usize::from(ctx)];
        for (xv, cv) in x.iter_mut().zip(ctx_vec.values()) {
            *xv += cv;
        }
        let noise = rng::normal_tensor(derive_indexed(spec.seed, "noise", id as u64), &[spec.input_dim], NOISE_STD);
        for (xv, nv) in x.iter_mut().zip(noise.values()) {
            *xv += nv;
        }
        let y = LabelVector::new(
            active
                .iter()
                .map(|&on| if on { Label::Pos } else { Label::Neg })
                .collect(),
        )?;
        samples.push(Sample { id, x, y });
        ctx_flags.push(ctx);
    }
    Ok((samples, ctx_flags))
}

pub fn generate(spec: &GeneratorSpec) -> Result<Vec<Sample>> {
    generate_with_context(spec).map(|(s, _)| s)
}

// ── heterogeneity partition ─────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    /// t(%): cluster count is this proportion of the class count.
    pub t_percent: f64,
    pub seed: u64,
}

impl PartitionSpec {
    /// S = max(1, round(t·C/100)).
    pub fn cluster_count(&self, classes: usize) -> usize {
        ((self.t_percent * classes as f64 / 100.0).round() as usize).max(1)
    }
}

/// Mean-pooled frozen patch embedding of each sample, k-means over those,
/// one shard per cluster. Shards are disjoint and cover the dataset.
pub fn cluster_partition(
    dataset: &[Sample],
    enc: &VisualEncoder,
    spec: &PartitionSpec,
    classes: usize,
) -> Result<Vec<Vec<Sample>>> {
    let s = spec.cluster_count(classes);
    if s > dataset.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot split {} samples into {s} clusters",
            dataset.len()
        )));
    }
    let features: Vec<Vec<f64>> = dataset
        .iter()
        .map(|sample| {
            enc.encode(&sample.input())
                .map(|patches| patches.mean_rows().values().to_vec())
        })
        .collect::<Result<_>>()?;
    let assignments = kmeans(&features, s, spec.seed, 100);
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); s];
    for (sample, &cluster) in dataset.iter().zip(assignments.iter()) {
        shards[cluster].push(sample.clone());
    }
    Ok(shards)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with seeded k-means++ initialization and repair of empty
/// clusters by stealing the farthest point from the largest cluster.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= features.len());
    let n = features.len();
    let mut rng = rng::chacha(derive(seed, "kmeans"));

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(features[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(features[next].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, centers.last().expect("just pushed")));
        }
    }

    let dim = features[0].len();
    let mut assignments = vec![0usize; n];
    for _ in 0..max_iters {
        // assignment, ties to the lowest center index
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(f, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        // empty-cluster repair
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let largest = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .expect("nonempty counts");
            let mut centroid = vec![0.0; dim];
            for (f, &a) in features.iter().zip(&assignments) {
                if a == largest {
                    for (cv, fv) in centroid.iter_mut().zip(f) {
                        *cv += fv;
                    }
                }
            }
            for cv in centroid.iter_mut() {
                *cv /= counts[largest] as f64;
            }
            let farthest = features
                .iter()
                .enumerate()
                .filter(|(i, _)| assignments[*i] == largest)
                .max_by(|(_, a), (_, b)| {
                    sq_dist(a, &centroid)
                        .partial_cmp(&sq_dist(b, &centroid))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(i, _)| i)
                .expect("largest cluster is nonempty");
            assignments[farthest] = empty;
            changed = true;
        }
        // centroid update
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (sv, fv) in sums[a].iter_mut().zip(f) {
                *sv += fv;
            }
        }
        for (c, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
            centers[c] = sum.iter().map(|v| v / count as f64).collect();
        }
        if !changed {
            break;
        }
    }
    assignments
}

// ── annotation masking ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct MaskSpec {
    /// Percentage of (sample, class) annotations hidden, in [0, 100).
    pub mask_percent: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..100.0).contains(&self.mask_percent) {
            return Err(Error::InvalidParameter(format!(
                "mask percentage must lie in [0, 100), got {}",
                self.mask_percent
            )));
        }
        Ok(())
    }
}

/// Independently hide each (sample, class) entry with probability
/// mask_percent/100. A sample whose every entry would become unknown gets one
/// seeded entry restored, so label vectors stay valid.
pub fn mask_annotations(dataset: &[Sample], spec: &MaskSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let p = spec.mask_percent / 100.0;
    let mut rng = rng::chacha(derive(spec.seed, "mask"));
    let mut out = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let mut masked = sample.clone();
        let c = masked.y.len();
        let mut hidden = 0usize;
        for entry in masked.y.labels_mut().iter_mut() {
            if rng.gen_bool(p) {
                *entry = Label::Unknown;
                hidden += 1;
            }
        }
        if hidden == c {
            let restore = rng.gen_range(0..c);
            masked.y.labels_mut()[restore] = sample.y.get(restore);
        }
        out.push(masked);
    }
    Ok(out)
}

// ── line-delimited serialization ────────────────────────────────────

pub fn to_jsonl(dataset: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in dataset {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64, samples: usize) -> GeneratorSpec {
        GeneratorSpec {
            classes: 6,
            input_dim: 12,
            samples,
            base_cooccurrence: GeneratorSpec::default_cooccurrence(6),
            spurious_strength: 0.5,
            seed,
            class_names: (0..6).map(|i| format!("class_{i}")).collect(),
            concept_seed: 77,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(4, 50);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_dataset_is_valid() {
        let data = generate(&small_spec(4, 1)).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].y.len(), 6);
        assert!(data[0].y.known_count() > 0);
    }

    #[test]
    fn spec_validation_catches_bad_matrices() {
        let mut spec = small_spec(1, 10);
        spec.base_cooccurrence.set2(0, 0, 0.5);
        assert!(spec.validate().is_err());

        let mut spec = small_spec(1, 10);
        spec.base_cooccurrence.set2(0, 1, 0.9); // breaks symmetry
        assert!(spec.validate().is_err());

        let mut spec = small_spec(1, 10);
        spec.spurious_strength = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn partition_covers_dataset_disjointly() {
        let data = generate(&small_spec(9, 60)).unwrap();
        let enc = VisualEncoder::new(2, 12, 4, 8);
        let spec = PartitionSpec { t_percent: 50.0, seed: 7 };
        let shards = cluster_partition(&data, &enc, &spec, 6).unwrap();
        assert_eq!(shards.len(), 3);
        let mut ids: Vec<usize> = shards.iter().flatten().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_single_cluster_is_whole_dataset() {
        let data = generate(&small_spec(9, 20)).unwrap();
        let enc = VisualEncoder::new(2, 12, 4, 8);
        let spec = PartitionSpec { t_percent: 10.0, seed: 7 };
        let shards = cluster_partition(&data, &enc, &spec, 6).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 20);
    }

    #[test]
    fn oversized_cluster_count_errors() {
        let data = generate(&small_spec(9, 3)).unwrap();
        let enc = VisualEncoder::new(2, 12, 4, 8);
        let spec = PartitionSpec { t_percent: 100.0, seed: 7 };
        assert!(cluster_partition(&data, &enc, &spec, 6).is_err());
    }

    #[test]
    fn cluster_count_formula() {
        let spec = |t| PartitionSpec { t_percent: t, seed: 0 };
        assert_eq!(spec(10.0).cluster_count(12), 1);
        assert_eq!(spec(40.0).cluster_count(12), 5);
        assert_eq!(spec(100.0).cluster_count(12), 12);
        assert_eq!(spec(0.0).cluster_count(12), 1);
    }

    #[test]
    fn masking_zero_percent_is_identity() {
        let data = generate(&small_spec(4, 30)).unwrap();
        let masked = mask_annotations(&data, &MaskSpec { mask_percent: 0.0, seed: 1 }).unwrap();
        assert_eq!(masked, data);
    }

    #[test]
    fn masking_keeps_at_least_one_known_entry() {
        let data = generate(&small_spec(4, 200)).unwrap();
        let masked = mask_annotations(&data, &MaskSpec { mask_percent: 95.0, seed: 1 }).unwrap();
        for s in &masked {
            assert!(s.y.known_count() >= 1);
        }
    }

    #[test]
    fn masking_never_flips_known_values() {
        let data = generate(&small_spec(4, 100)).unwrap();
        let masked = mask_annotations(&data, &MaskSpec { mask_percent: 40.0, seed: 5 }).unwrap();
        for (orig, m) in data.iter().zip(&masked) {
            for (a, b) in orig.y.labels().iter().zip(m.y.labels()) {
                if *b != Label::Unknown {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let data = generate(&small_spec(4, 10)).unwrap();
        let masked = mask_annotations(&data, &MaskSpec { mask_percent: 30.0, seed: 2 }).unwrap();
        let text = to_jsonl(&masked).unwrap();
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, masked);
        assert!(text.lines().next().unwrap().starts_with("{\"id\":0,\"x\":["));
    }

    #[test]
    fn kmeans_separates_two_plain_blobs() {
        // sanity on raw features before the encoder is involved
        let mut features = Vec::new();
        for i in 0..40 {
            let offset = if i < 20 { 5.0 } else { -5.0 };
            features.push(vec![offset + (i as f64) * 0.01, offset]);
        }
        let assign = kmeans(&features, 2, 3, 100);
        let first = assign[0];
        assert!(assign[..20].iter().all(|&a| a == first));
        assert!(assign[20..].iter().all(|&a| a != first));
    }
}

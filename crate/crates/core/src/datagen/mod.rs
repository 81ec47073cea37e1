//! Synthetic bimodal pairs with controllable noisy correspondence.
//!
//! Each cluster owns an image centroid and an independent text centroid.
//! A pair draws one instance offset `z ~ N(0, σ²I)`; the image is
//! `c_img + z` and the text is `c_txt + ρ P z + sqrt(1 - ρ²) ε`, with a fixed
//! random map `P` shared by the whole dataset and fresh noise `ε`. The shared
//! offset makes individual pairs (not just clusters) retrievable.
//!
//! Record ids are `cluster * pairs_per_cluster + k`, so the cluster of any
//! record is recoverable from its id and the manifest.

pub mod format;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DERANGEMENT_PROTOCOL: &str = "cross-cluster derangement";

/// One image/text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: u64,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    /// Ground truth, evaluation only: whether the text belongs to this image.
    pub clean: bool,
    /// Ground truth, evaluation only: id of the image this text was made for.
    pub original_partner: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub n_clusters: usize,
    pub pairs_per_cluster: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub within_cluster_std: f64,
    /// Weight `ρ` of the shared instance offset in the text features.
    #[serde(default = "default_correlation")]
    pub instance_correlation: f64,
    #[serde(default = "default_split")]
    pub val_fraction: f64,
    #[serde(default = "default_split")]
    pub test_fraction: f64,
    /// Meta-set size relative to the training split.
    #[serde(default = "default_meta_fraction")]
    pub meta_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_correlation() -> f64 {
    0.9
}
fn default_split() -> f64 {
    0.1
}
fn default_meta_fraction() -> f64 {
    0.02
}

impl GenerationSpec {
    /// 10 clusters of 100 pairs, 32-dimensional features, σ = 0.1.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n_clusters: 10,
            pairs_per_cluster: 100,
            d_img: 32,
            d_txt: 32,
            within_cluster_std: 0.1,
            instance_correlation: default_correlation(),
            val_fraction: default_split(),
            test_fraction: default_split(),
            meta_fraction: default_meta_fraction(),
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.n_clusters * self.pairs_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_clusters < 2 {
            return fail(format!("need at least 2 clusters, got {}", self.n_clusters));
        }
        if self.pairs_per_cluster == 0 || self.d_img == 0 || self.d_txt == 0 {
            return fail("pairs_per_cluster, d_img and d_txt must be positive".into());
        }
        if !(self.within_cluster_std > 0.0 && self.within_cluster_std.is_finite()) {
            return fail(format!("within_cluster_std must be > 0, got {}", self.within_cluster_std));
        }
        if !(0.0..=1.0).contains(&self.instance_correlation) {
            return fail("instance_correlation must lie in [0, 1]".into());
        }
        for (name, f) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
            ("meta_fraction", self.meta_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return fail(format!("{name} must lie in [0, 1), got {f}"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return fail("val_fraction + test_fraction must be below 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
    pub protocol: String,
    /// Number of training pairs whose texts were permuted.
    pub affected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generation: GenerationSpec,
    pub noise: Option<NoiseSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<PairRecord>,
    pub meta: Vec<PairRecord>,
    pub validation: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
    pub manifest: Manifest,
}

impl DatasetBundle {
    pub fn d_img(&self) -> usize {
        self.manifest.generation.d_img
    }

    pub fn d_txt(&self) -> usize {
        self.manifest.generation.d_txt
    }

    pub fn cluster_of(&self, id: u64) -> usize {
        (id / self.manifest.generation.pairs_per_cluster as u64) as usize
    }

    pub fn splits(&self) -> [(&'static str, &[PairRecord]); 4] {
        [
            ("train", &self.train),
            ("meta", &self.meta),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Checks disjointness, feature widths and the clean/partner relation.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, split) in self.splits() {
            for r in split {
                if !seen.insert(r.id) {
                    return Err(Error::InvalidArgument(format!("id {} appears twice ({name})", r.id)));
                }
                if r.image.len() != self.d_img() || r.text.len() != self.d_txt() {
                    return Err(Error::Dimension {
                        what: "record features",
                        expected: self.d_img(),
                        got: r.image.len(),
                    });
                }
                if r.clean != (r.original_partner == r.id) {
                    return Err(Error::InvalidArgument(format!(
                        "record {} has clean={} but partner {}",
                        r.id, r.clean, r.original_partner
                    )));
                }
            }
        }
        if self.meta.iter().any(|r| !r.clean) {
            return Err(Error::InvalidArgument("meta split must be clean".into()));
        }
        Ok(())
    }
}

/// Row-stacked image and text features of a record slice.
pub fn features(records: &[PairRecord]) -> (Tensor, Tensor) {
    let (di, dt) = records
        .first()
        .map_or((0, 0), |r| (r.image.len(), r.text.len()));
    let img = records.iter().flat_map(|r| r.image.iter().copied()).collect();
    let txt = records.iter().flat_map(|r| r.text.iter().copied()).collect();
    (
        Tensor::matrix(records.len(), di, img),
        Tensor::matrix(records.len(), dt, txt),
    )
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_direction(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Stream 0 of the seed drives centroids and the coupling map, the last
/// stream drives the split, stream `id + 1` drives record `id`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_synthetic(spec: &GenerationSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let std = spec.within_cluster_std;
    let rho = spec.instance_correlation;
    let mut rng = stream_rng(spec.seed, 0);
    let centroids: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_clusters)
        .map(|_| {
            let ci = unit_direction(&mut rng, spec.d_img);
            let ct = unit_direction(&mut rng, spec.d_txt);
            (
                ci.into_iter().map(|x| 10.0 * std * x).collect(),
                ct.into_iter().map(|x| 10.0 * std * x).collect(),
            )
        })
        .collect();
    // Coupling map P: d_txt x d_img with N(0, 1/d_img) entries.
    let coupling = gaussian_vec(&mut rng, spec.d_txt * spec.d_img, 1.0 / (spec.d_img as f64).sqrt());

    let records: Vec<PairRecord> = (0..spec.total() as u64)
        .map(|id| {
            let (ci, ct) = &centroids[(id / spec.pairs_per_cluster as u64) as usize];
            let mut r = stream_rng(spec.seed, id + 1);
            let z = gaussian_vec(&mut r, spec.d_img, std);
            let eps = gaussian_vec(&mut r, spec.d_txt, std);
            let image = ci.iter().zip(&z).map(|(c, z)| c + z).collect();
            let text = (0..spec.d_txt)
                .map(|t| {
                    let pz: f64 = coupling[t * spec.d_img..(t + 1) * spec.d_img]
                        .iter()
                        .zip(&z)
                        .map(|(p, z)| p * z)
                        .sum();
                    ct[t] + rho * pz + (1.0 - rho * rho).sqrt() * eps[t]
                })
                .collect();
            PairRecord {
                id,
                image,
                text,
                clean: true,
                original_partner: id,
            }
        })
        .collect();

    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, u64::MAX));
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    let rest = n - n_test - n_val;
    let n_meta = (rest as f64 * spec.meta_fraction / (1.0 + spec.meta_fraction)).round() as usize;
    if rest - n_meta < 2 {
        return Err(Error::InvalidArgument("training split would hold fewer than 2 pairs".into()));
    }
    let take = |range: std::ops::Range<usize>| -> Vec<PairRecord> {
        let mut ids: Vec<usize> = order[range].to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| records[i].clone()).collect()
    };
    Ok(DatasetBundle {
        test: take(0..n_test),
        validation: take(n_test..n_test + n_val),
        meta: take(n_test + n_val..n_test + n_val + n_meta),
        train: take(n_test + n_val + n_meta..n),
        manifest: Manifest {
            generation: spec.clone(),
            noise: None,
        },
    })
}

/// Permutes the texts of `floor(ratio * N)` uniformly chosen training pairs
/// so that every affected pair receives a text from a different cluster.
pub fn inject_noise(bundle: &DatasetBundle, ratio: f64, seed: u64) -> Result<DatasetBundle> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let n = bundle.train.len();
    let k = (ratio * n as f64).floor() as usize;
    let mut out = bundle.clone();
    if k == 0 {
        return Ok(out);
    }
    if k < 2 {
        return Err(Error::InsufficientData(format!(
            "noise ratio {ratio} selects {k} pair(s); a derangement needs at least 2"
        )));
    }
    let text_cluster = |i: usize| bundle.cluster_of(bundle.train[i].original_partner);
    let image_cluster = |i: usize| bundle.cluster_of(bundle.train[i].id);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 0;
    let (selected, perm) = loop {
        attempt += 1;
        let mut selected = index::sample(&mut rng, n, k).into_vec();
        selected.sort_unstable();
        if let Some(perm) = cross_cluster_derangement(&selected, text_cluster, image_cluster, &mut rng) {
            break (selected, perm);
        }
        if attempt >= 1000 {
            return Err(Error::InsufficientData(
                "no cross-cluster derangement exists for the selected pairs".into(),
            ));
        }
    };

    for (&dst, &src) in selected.iter().zip(&perm) {
        let from = &bundle.train[src];
        let rec = &mut out.train[dst];
        rec.text = from.text.clone();
        rec.original_partner = from.original_partner;
        rec.clean = rec.original_partner == rec.id;
    }
    out.manifest.noise = Some(NoiseSpec {
        ratio,
        seed,
        protocol: DERANGEMENT_PROTOCOL.to_string(),
        affected: k,
    });
    Ok(out)
}

/// For each selected position, the selected record whose text it receives,
/// such that the text's cluster differs from the receiving image's cluster.
/// `None` when one cluster holds more than half of the selection.
fn cross_cluster_derangement(
    selected: &[usize],
    text_cluster: impl Fn(usize) -> usize,
    image_cluster: impl Fn(usize) -> usize,
    rng: &mut impl Rng,
) -> Option<Vec<usize>> {
    let k = selected.len();
    // Group by cluster in a random cluster order, random order within.
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut keys: Vec<usize> = selected.iter().map(|&i| image_cluster(i)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.shuffle(rng);
    let rank = |c: usize| keys.iter().position(|&x| x == c).unwrap_or(usize::MAX);
    order.sort_by_key(|&p| rank(image_cluster(selected[p])));

    let mut largest = 0;
    let mut run = 0;
    for w in 0..k {
        let c = image_cluster(selected[order[w]]);
        run = if w > 0 && image_cluster(selected[order[w - 1]]) == c { run + 1 } else { 1 };
        largest = largest.max(run);
    }
    if 2 * largest > k {
        return None;
    }
    // Shifting by the largest block never lands inside the same block.
    let mut perm = vec![0; k];
    for w in 0..k {
        perm[order[w]] = selected[order[(w + largest) % k]];
    }
    let ok = selected
        .iter()
        .zip(&perm)
        .all(|(&dst, &src)| text_cluster(src) != image_cluster(dst));
    ok.then_some(perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenerationSpec {
        GenerationSpec {
            n_clusters: 5,
            pairs_per_cluster: 40,
            d_img: 6,
            d_txt: 4,
            within_cluster_std: 0.1,
            instance_correlation: 0.9,
            val_fraction: 0.1,
            test_fraction: 0.1,
            meta_fraction: 0.02,
            seed,
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let b = generate_synthetic(&GenerationSpec::benchmark(1)).unwrap();
        b.validate().unwrap();
        assert_eq!(b.test.len(), 100);
        assert_eq!(b.validation.len(), 100);
        assert_eq!(b.meta.len(), 16);
        assert_eq!(b.train.len(), 784);
        assert!(b.splits().iter().all(|(_, s)| s.iter().all(|r| r.clean)));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_synthetic(&small(4)).unwrap(),
            generate_synthetic(&small(4)).unwrap()
        );
        assert_ne!(
            generate_synthetic(&small(4)).unwrap(),
            generate_synthetic(&small(5)).unwrap()
        );
    }

    #[test]
    fn tiny_spread_collapses_to_centroids() {
        let mut spec = small(2);
        spec.within_cluster_std = 1e-12;
        let b = generate_synthetic(&spec).unwrap();
        let all: Vec<&PairRecord> = b.splits().iter().flat_map(|(_, s)| s.iter()).collect();
        for a in &all {
            for c in &all {
                if b.cluster_of(a.id) == b.cluster_of(c.id) {
                    for (x, y) in a.text.iter().zip(&c.text) {
                        assert!((x - y).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn texts_are_separable_by_nearest_centroid() {
        let mut spec = GenerationSpec::benchmark(3);
        spec.within_cluster_std = 0.1;
        let b = generate_synthetic(&spec).unwrap();
        let all: Vec<&PairRecord> = b.splits().iter().flat_map(|(_, s)| s.iter()).collect();
        let d = spec.d_txt;
        let mut means = vec![vec![0.0; d]; spec.n_clusters];
        let mut counts = vec![0usize; spec.n_clusters];
        for r in &all {
            let c = b.cluster_of(r.id);
            counts[c] += 1;
            for (m, x) in means[c].iter_mut().zip(&r.text) {
                *m += x;
            }
        }
        for (m, n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let correct = all
            .iter()
            .filter(|r| {
                let best = (0..spec.n_clusters)
                    .min_by(|&a, &c| {
                        let da: f64 = means[a].iter().zip(&r.text).map(|(m, x)| (m - x).powi(2)).sum();
                        let dc: f64 = means[c].iter().zip(&r.text).map(|(m, x)| (m - x).powi(2)).sum();
                        da.total_cmp(&dc)
                    })
                    .unwrap();
                best == b.cluster_of(r.id)
            })
            .count();
        assert!(correct as f64 >= 0.99 * all.len() as f64, "{correct}/{}", all.len());
    }

    #[test]
    fn zero_ratio_is_identity() {
        let b = generate_synthetic(&small(1)).unwrap();
        assert_eq!(inject_noise(&b, 0.0, 9).unwrap(), b);
    }

    #[test]
    fn two_selected_are_swapped() {
        let b = generate_synthetic(&small(1)).unwrap();
        let n = b.train.len();
        let ratio = 2.0 / n as f64;
        let noisy = inject_noise(&b, ratio, 5).unwrap();
        let changed: Vec<usize> = (0..n).filter(|&i| !noisy.train[i].clean).collect();
        assert_eq!(changed.len(), 2);
        let (a, c) = (changed[0], changed[1]);
        assert_eq!(noisy.train[a].text, b.train[c].text);
        assert_eq!(noisy.train[c].text, b.train[a].text);
        assert_eq!(noisy.train[a].original_partner, b.train[c].id);
    }

    #[test]
    fn half_noise_postconditions() {
        let mut spec = small(6);
        spec.n_clusters = 10;
        spec.pairs_per_cluster = 125;
        spec.val_fraction = 0.0;
        spec.test_fraction = 0.0;
        spec.meta_fraction = 0.0;
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(b.train.len(), 1250);
        let noisy = inject_noise(&b, 0.5, 7).unwrap();
        let dirty: Vec<&PairRecord> = noisy.train.iter().filter(|r| !r.clean).collect();
        assert_eq!(dirty.len(), 625);
        for r in &dirty {
            assert_ne!(r.original_partner, r.id);
            assert_ne!(noisy.cluster_of(r.original_partner), noisy.cluster_of(r.id));
        }
        // Multiset of texts preserved.
        let key = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let mut before: Vec<_> = b.train.iter().map(|r| key(&r.text)).collect();
        let mut after: Vec<_> = noisy.train.iter().map(|r| key(&r.text)).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
        assert_eq!(noisy.meta, b.meta);
        assert_eq!(noisy.validation, b.validation);
        assert_eq!(noisy.test, b.test);
        noisy.validate().unwrap();
    }

    #[test]
    fn noise_errors() {
        let b = generate_synthetic(&small(1)).unwrap();
        assert!(inject_noise(&b, 1.5, 1).is_err());
        assert!(inject_noise(&b, -0.1, 1).is_err());
        let one = 1.0 / b.train.len() as f64;
        assert!(inject_noise(&b, one, 1).is_err());
    }

    #[test]
    fn full_noise_is_possible() {
        let b = generate_synthetic(&small(8)).unwrap();
        let noisy = inject_noise(&b, 1.0, 2).unwrap();
        assert!(noisy.train.iter().all(|r| !r.clean));
    }
}

//! Retrieval evaluation: score matrices and recall@K in both directions.

use std::fmt::Write as _;
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datagen::{features, PairRecord};
use crate::error::{Error, FormatError, Result};
use crate::model::{similarity_features_lenient, Network};

/// Image rows scored per worker task.
const ROW_CHUNK: usize = 8;

pub const KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `n_img x n_txt`, averaged over models.
    pub scores: Tensor,
    /// Entries scored 0.5 because their similarity vector was degenerate,
    /// summed over models.
    pub degenerate: usize,
}

/// Embeds with one model; returns `(image_emb, text_emb)`.
fn embed(net: &Network, images: &Tensor, texts: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = Graph::inference();
    let main = net.main.bind(&g);
    let u = main.embed_images(&g.constant(images.clone()))?;
    let v = main.embed_texts(&g.constant(texts.clone()))?;
    Ok((u.value().clone(), v.value().clone()))
}

fn single_model(net: &Network, images: &Tensor, texts: &Tensor) -> Result<(Vec<f64>, usize)> {
    let (u, v) = embed(net, images, texts)?;
    let (ni, nt) = (u.rows(), v.rows());
    let chunks: Vec<(Vec<f64>, usize)> = (0..ni)
        .step_by(ROW_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| -> Result<(Vec<f64>, usize)> {
            let rows = (start..(start + ROW_CHUNK).min(ni)).collect::<Vec<_>>();
            let g = Graph::inference();
            let proj = g.constant(net.main.projection.clone());
            let meta = net.meta.bind(&g);
            let img_idx: Vec<usize> = rows.iter().flat_map(|&i| std::iter::repeat_n(i, nt)).collect();
            let txt_idx: Vec<usize> = rows.iter().flat_map(|_| 0..nt).collect();
            let ui = g.constant(u.clone()).gather_rows(Rc::new(img_idx))?;
            let vj = g.constant(v.clone()).gather_rows(Rc::new(txt_idx))?;
            let (feat, bad) = similarity_features_lenient(&ui, &vj, &proj)?;
            let mut s = meta.score(&feat)?.value().data().to_vec();
            for &(r, _) in &bad {
                s[r] = 0.5;
            }
            Ok((s, bad.len()))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(ni * nt);
    let mut degenerate = 0;
    for (s, d) in chunks {
        out.extend(s);
        degenerate += d;
    }
    Ok((out, degenerate))
}

/// Score of each row-aligned pair `(images[i], texts[i])`; degenerate pairs
/// score 0.5.
pub fn aligned_scores(net: &Network, images: &Tensor, texts: &Tensor) -> Result<Vec<f64>> {
    let g = Graph::inference();
    let main = net.main.bind(&g);
    let meta = net.meta.bind(&g);
    let u = main.embed_images(&g.constant(images.clone()))?;
    let v = main.embed_texts(&g.constant(texts.clone()))?;
    let (feat, bad) = similarity_features_lenient(&u, &v, &main.projection)?;
    let mut s = meta.score(&feat)?.value().data().to_vec();
    for &(r, _) in &bad {
        s[r] = 0.5;
    }
    if !bad.is_empty() {
        log::warn!("{} degenerate similarity entries scored as 0.5", bad.len());
    }
    Ok(s)
}

/// Entry `(i, j)` is the mean over `models` of the score of image `i`
/// against text `j`.
pub fn score_matrix(models: &[&Network], images: &Tensor, texts: &Tensor) -> Result<ScoreMatrix> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("score_matrix needs at least one model".into()));
    }
    let (ni, nt) = (images.rows(), texts.rows());
    let mut sum = vec![0.0; ni * nt];
    let mut degenerate = 0;
    for net in models {
        let (s, d) = single_model(net, images, texts)?;
        sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        degenerate += d;
    }
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate similarity entries scored as 0.5");
    }
    let k = models.len() as f64;
    Ok(ScoreMatrix {
        scores: Tensor::matrix(ni, nt, sum.into_iter().map(|x| x / k).collect()),
        degenerate,
    })
}

/// Percentage of queries whose true candidate is among the `k` best.
///
/// `truth[q]` is the index of the correct candidate for query `q`: a text
/// index for [`Direction::ImageToText`] (queries are rows), an image index
/// for [`Direction::TextToImage`] (queries are columns). Ties between equal
/// scores go to the lower candidate index.
pub fn recall_at_k(scores: &Tensor, truth: &[usize], k: usize, direction: Direction) -> Result<f64> {
    let (ni, nt) = (scores.rows(), scores.cols());
    let (queries, candidates) = match direction {
        Direction::ImageToText => (ni, nt),
        Direction::TextToImage => (nt, ni),
    };
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > candidates {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {candidates} candidates")));
    }
    if truth.len() != queries {
        return Err(Error::Dimension {
            what: "ground truth",
            expected: queries,
            got: truth.len(),
        });
    }
    if queries == 0 {
        return Err(Error::EmptyBatch);
    }
    let at = |q: usize, c: usize| match direction {
        Direction::ImageToText => scores.get(q, c),
        Direction::TextToImage => scores.get(c, q),
    };
    let mut hits = 0usize;
    for (q, &t) in truth.iter().enumerate() {
        if t >= candidates {
            return Err(Error::InvalidArgument(format!("truth index {t} out of range")));
        }
        let target = at(q, t);
        let rank = (0..candidates)
            .filter(|&c| {
                let s = at(q, c);
                s > target || (s == target && c < t)
            })
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / queries as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallReport {
    /// Image-to-text R@1, R@5, R@10.
    pub i2t: [f64; 3],
    /// Text-to-image R@1, R@5, R@10.
    pub t2i: [f64; 3],
}

impl RecallReport {
    pub fn sum(&self) -> f64 {
        self.i2t.iter().chain(&self.t2i).sum()
    }

    pub fn r1_sum(&self) -> f64 {
        self.i2t[0] + self.t2i[0]
    }

    /// Human-readable table, rounded to one decimal.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "direction\tR@1\tR@5\tR@10").unwrap();
        for (name, r) in [("image->text", self.i2t), ("text->image", self.t2i)] {
            writeln!(s, "{name}\t{:.1}\t{:.1}\t{:.1}", r[0], r[1], r[2]).unwrap();
        }
        writeln!(s, "sum\t{:.1}", self.sum()).unwrap();
        s
    }

    /// `key=value` lines at full precision.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        for (dir, r) in [("i2t", self.i2t), ("t2i", self.t2i)] {
            for (k, v) in KS.iter().zip(r) {
                writeln!(s, "{dir}_r{k}={v}").unwrap();
            }
        }
        writeln!(s, "rsum={}", self.sum()).unwrap();
        s
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut report = Self {
            i2t: [f64::NAN; 3],
            t2i: [f64::NAN; 3],
        };
        let bad = |m: String| Error::from(FormatError::Inconsistent(m));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("not a key=value line: {line:?}")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| bad(format!("bad value for {key}")))?;
            if key == "rsum" {
                continue;
            }
            let (dir, k) = key
                .split_once("_r")
                .ok_or_else(|| bad(format!("unknown key {key}")))?;
            let slot = KS
                .iter()
                .position(|&x| k.parse() == Ok(x))
                .ok_or_else(|| bad(format!("unknown key {key}")))?;
            match dir {
                "i2t" => report.i2t[slot] = value,
                "t2i" => report.t2i[slot] = value,
                _ => return Err(bad(format!("unknown key {key}"))),
            }
        }
        if report.i2t.iter().chain(&report.t2i).any(|v| v.is_nan()) {
            return Err(FormatError::Truncated("recall report").into());
        }
        Ok(report)
    }
}

/// For each record, the index of the record holding its true partner text.
pub fn partner_indices(records: &[PairRecord]) -> Result<Vec<usize>> {
    let by_partner: std::collections::HashMap<u64, usize> = records
        .iter()
        .enumerate()
        .map(|(j, r)| (r.original_partner, j))
        .collect();
    records
        .iter()
        .map(|r| {
            by_partner
                .get(&r.id)
                .copied()
                .ok_or_else(|| Error::InsufficientData(format!("record {} has no partner text", r.id)))
        })
        .collect()
}

/// Recall report from a precomputed score matrix. `k` above the candidate
/// count is capped at it.
pub fn report_from_scores(scores: &Tensor, i2t_truth: &[usize]) -> Result<RecallReport> {
    let mut t2i_truth = vec![0; i2t_truth.len()];
    for (i, &t) in i2t_truth.iter().enumerate() {
        t2i_truth[t] = i;
    }
    let n = scores.rows().min(scores.cols());
    let mut report = RecallReport {
        i2t: [0.0; 3],
        t2i: [0.0; 3],
    };
    for (slot, &k) in KS.iter().enumerate() {
        let k = k.min(n);
        report.i2t[slot] = recall_at_k(scores, i2t_truth, k, Direction::ImageToText)?;
        report.t2i[slot] = recall_at_k(scores, &t2i_truth, k, Direction::TextToImage)?;
    }
    Ok(report)
}

pub fn evaluate(models: &[&Network], records: &[PairRecord]) -> Result<RecallReport> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let truth = partner_indices(records)?;
    let (images, texts) = features(records);
    let m = score_matrix(models, &images, &texts)?;
    report_from_scores(&m.scores, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pair_score, ModelDims};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Network {
        let dims = ModelDims {
            d_img: 4,
            d_txt: 3,
            d_emb: 6,
            d_sim: 3,
            meta_hidden: 5,
        };
        Network::init(&dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Sort each query's candidates by (score desc, index asc) and scan.
    fn brute_recall(scores: &Tensor, truth: &[usize], k: usize, dir: Direction) -> f64 {
        let (q, c) = match dir {
            Direction::ImageToText => (scores.rows(), scores.cols()),
            Direction::TextToImage => (scores.cols(), scores.rows()),
        };
        let mut hits = 0;
        for query in 0..q {
            let mut order: Vec<(f64, usize)> = (0..c)
                .map(|cand| {
                    let s = match dir {
                        Direction::ImageToText => scores.get(query, cand),
                        Direction::TextToImage => scores.get(cand, query),
                    };
                    (s, cand)
                })
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if order[..k].iter().any(|&(_, cand)| cand == truth[query]) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / q as f64
    }

    #[test]
    fn matrix_matches_pair_score() {
        let n = net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, txt) = (random(3, 4, &mut rng), random(3, 3, &mut rng));
        let m = score_matrix(&[&n], &img, &txt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = pair_score(&n, img.row_slice(i), txt.row_slice(j)).unwrap();
                assert!((m.scores.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn averaging() {
        let (a, b) = (net(1), net(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, txt) = (random(17, 4, &mut rng), random(11, 3, &mut rng));
        let single = score_matrix(&[&a], &img, &txt).unwrap();
        assert_eq!(score_matrix(&[&a, &a], &img, &txt).unwrap().scores, single.scores);
        let sb = score_matrix(&[&b], &img, &txt).unwrap();
        let both = score_matrix(&[&a, &b], &img, &txt).unwrap();
        for ((x, y), z) in single.scores.data().iter().zip(sb.scores.data()).zip(both.scores.data()) {
            assert!(((x + y) / 2.0 - z).abs() < 1e-15);
        }
        assert!(score_matrix(&[], &img, &txt).is_err());
    }

    #[test]
    fn one_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = score_matrix(&[&net(5)], &random(1, 4, &mut rng), &random(1, 3, &mut rng)).unwrap();
        let s = m.scores.item();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn degenerate_pairs_score_half() {
        let mut n = net(6);
        // Identical embeddings for every input: zero difference everywhere.
        for l in n.main.image.layers.iter_mut().chain(n.main.text.layers.iter_mut()) {
            l.weight.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = n.main.text.layers.last().unwrap().bias.clone();
        t.data_mut().copy_from_slice(n.main.image.layers.last().unwrap().bias.data());
        n.main.text.layers.last_mut().unwrap().bias = t;
        let m = score_matrix(&[&n], &random(2, 4, &mut rng), &random(3, 3, &mut rng)).unwrap();
        assert_eq!(m.degenerate, 6);
        assert!(m.scores.data().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn identity_and_anti_diagonal() {
        let id = Tensor::identity(4);
        let truth: Vec<usize> = (0..4).collect();
        for d in [Direction::ImageToText, Direction::TextToImage] {
            assert_eq!(recall_at_k(&id, &truth, 1, d).unwrap(), 100.0);
        }
        let anti: Vec<usize> = (0..4).rev().collect();
        let diag = Tensor::matrix(
            4,
            4,
            (0..16).map(|x| if x / 4 == x % 4 { 1.0 } else { 0.5 - (x as f64) * 0.01 }).collect(),
        );
        for d in [Direction::ImageToText, Direction::TextToImage] {
            assert_eq!(recall_at_k(&diag, &anti, 1, d).unwrap(), 0.0);
            assert_eq!(recall_at_k(&diag, &anti, 4, d).unwrap(), 100.0);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let flat = Tensor::full(3, 3, 0.5);
        let truth = [0, 1, 2];
        // Only candidate 0 wins every tie.
        assert!((recall_at_k(&flat, &truth, 1, Direction::ImageToText).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert!((recall_at_k(&flat, &truth, 2, Direction::ImageToText).unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let s = Tensor::identity(3);
        assert!(recall_at_k(&s, &[0, 1, 2], 4, Direction::ImageToText).is_err());
        assert!(recall_at_k(&s, &[0, 1, 2], 0, Direction::ImageToText).is_err());
        assert!(recall_at_k(&s, &[0, 1], 1, Direction::ImageToText).is_err());
    }

    #[test]
    fn brute_force_oracle_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (ni, nt) = (rng.random_range(10..30), rng.random_range(10..30));
            // Coarse scores force ties.
            let s = Tensor::matrix(ni, nt, (0..ni * nt).map(|_| rng.random_range(0..5) as f64).collect());
            let i2t: Vec<usize> = (0..ni).map(|_| rng.random_range(0..nt)).collect();
            let t2i: Vec<usize> = (0..nt).map(|_| rng.random_range(0..ni)).collect();
            for k in [1, 5, 10] {
                assert_eq!(
                    recall_at_k(&s, &i2t, k, Direction::ImageToText).unwrap(),
                    brute_recall(&s, &i2t, k, Direction::ImageToText)
                );
                assert_eq!(
                    recall_at_k(&s, &t2i, k, Direction::TextToImage).unwrap(),
                    brute_recall(&s, &t2i, k, Direction::TextToImage)
                );
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let r = RecallReport {
            i2t: [10.0, 33.333333333333336, 50.0],
            t2i: [12.5, 40.1, 99.0],
        };
        assert_eq!(RecallReport::parse_kv(&r.render_kv()).unwrap(), r);
        assert!(RecallReport::parse_kv("i2t_r1=3").is_err());
        assert!(r.render_text().contains("sum\t244.9"));
    }

    #[test]
    fn evaluate_caps_k_on_small_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let records: Vec<PairRecord> = (0..4)
            .map(|id| PairRecord {
                id,
                image: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                text: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                clean: true,
                original_partner: id,
            })
            .collect();
        let r = evaluate(&[&net(11)], &records).unwrap();
        assert_eq!(r.i2t[2], 100.0);
        assert_eq!(r.t2i[2], 100.0);
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_rank_invariant(seed in 0u64..500, n in 2usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(n, n, &mut rng);
            let mut truth: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                truth.swap(i, rng.random_range(0..=i));
            }
            let warped = Tensor::matrix(n, n, s.data().iter().map(|x| (3.0 * x).exp() + 7.0).collect());
            for d in [Direction::ImageToText, Direction::TextToImage] {
                let mut prev = 0.0;
                for k in 1..=n {
                    let r = recall_at_k(&s, &truth, k, d).unwrap();
                    prop_assert!(r >= prev);
                    prop_assert_eq!(r, recall_at_k(&warped, &truth, k, d).unwrap());
                    prev = r;
                }
                prop_assert_eq!(prev, 100.0);
            }
        }

        #[test]
        fn candidate_permutation_invariance(seed in 0u64..500, n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(n, n, &mut rng);
            let truth: Vec<usize> = (0..n).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // Column c of the permuted matrix is column perm[c] of the original.
            let permuted = Tensor::matrix(n, n, (0..n * n).map(|x| s.get(x / n, perm[x % n])).collect());
            let mut remapped = vec![0; n];
            for (c, &p) in perm.iter().enumerate() {
                remapped[p] = c;
            }
            let new_truth: Vec<usize> = truth.iter().map(|&t| remapped[t]).collect();
            let k = n.min(5);
            // Distinct continuous scores, so tie-breaking never applies.
            prop_assert_eq!(
                recall_at_k(&s, &truth, k, Direction::ImageToText).unwrap(),
                recall_at_k(&permuted, &new_truth, k, Direction::ImageToText).unwrap()
            );
        }
    }
}

//! Training and meta losses.
//!
//! The training loss is a hinge triplet loss over corrected similarity
//! scores, using the hardest in-batch negative in both retrieval directions
//! and a margin that scales with the pair's own score:
//! `γ̂(s) = γ / (1 + (s / (1 - s))^(-τ))`. The meta loss is binary
//! cross-entropy of the corrected score against a 0/1 correspondence label.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{all_pair_scores, pair_scores, MainNetVars, MetaNetVars};
use crate::purifier::{SCORE_MAX, SCORE_MIN};

/// `γ / (1 + (s / (1 - s))^(-τ))` for `s` strictly inside `(0, 1)`.
pub fn adaptive_margin(s: f64, gamma: f64, tau: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::ScoreOutOfRange(s));
    }
    if !(gamma > 0.0 && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin needs gamma > 0 and tau > 0, got {gamma}, {tau}"
        )));
    }
    Ok(gamma / (1.0 + (s / (1.0 - s)).powf(-tau)))
}

/// Differentiable margin, written as `γ · sigmoid(τ · logit(s))`.
pub fn adaptive_margin_var<'g>(s: &Var<'g>, gamma: f64, tau: f64) -> Result<Var<'g>> {
    let logit = s.ln()?.sub(&s.neg()?.add_scalar(1.0)?.ln()?)?;
    Ok(logit.scale(tau)?.sigmoid()?.scale(gamma)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Margin {
    /// `γ̂ = γ` for every pair.
    Fixed { gamma: f64 },
    /// Score-dependent `γ̂(s)`, differentiated through `s`.
    Adaptive { gamma: f64, tau: f64 },
    /// Same value as `Adaptive`, but computed from the detached score: a
    /// per-pair constant that carries no gradient.
    AdaptiveDetached { gamma: f64, tau: f64 },
}

impl Margin {
    pub fn gamma(&self) -> f64 {
        match *self {
            Margin::Fixed { gamma }
            | Margin::Adaptive { gamma, .. }
            | Margin::AdaptiveDetached { gamma, .. } => gamma,
        }
    }

    fn apply<'g>(&self, positive: &Var<'g>) -> Result<Var<'g>> {
        match *self {
            Margin::Fixed { gamma } => {
                let n = positive.value().rows();
                Ok(positive.graph().constant(Tensor::full(n, 1, gamma)))
            }
            Margin::Adaptive { gamma, tau } => adaptive_margin_var(positive, gamma, tau),
            Margin::AdaptiveDetached { gamma, tau } => adaptive_margin_var(&positive.detach(), gamma, tau),
        }
    }
}

/// Row-aligned training pairs: image `i` and text `i` are the (possibly
/// noisy) positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub images: Tensor,
    pub texts: Tensor,
    pub ids: Vec<u64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Labelled pairs for the correction net: `1` matched, `0` mismatched.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    pub images: Tensor,
    pub texts: Tensor,
    pub labels: Vec<f64>,
}

impl MetaBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which cross-entropy to use for the meta loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaLossKind {
    /// `-[y log s + (1 - y) log(1 - s)]`.
    #[default]
    BinaryCrossEntropy,
    /// `-y log s` only; negatives contribute nothing.
    PositiveOnly,
}

/// Per-pair hinge losses `[n, 1]` from an `n x n` score matrix whose
/// diagonal holds the positive pairs. Scores are clamped first.
pub fn per_pair_triplet_losses<'g>(scores: &Var<'g>, margin: Margin) -> Result<Var<'g>> {
    let n = scores.value().rows();
    if scores.shape() != [n, n] {
        return Err(Error::InvalidArgument(format!(
            "score matrix must be square, got {:?}",
            scores.shape()
        )));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: n });
    }
    let g = scores.graph();
    let s = scores.clamp(SCORE_MIN, SCORE_MAX)?;
    let positive = s.gather_cols(Rc::new((0..n).collect()))?;

    // Push the diagonal below every valid score so the maxima skip it.
    let identity = Tensor::identity(n);
    let off_diag = g.constant(identity.map(|v| 1.0 - v));
    let floor = g.constant(identity.map(|v| -2.0 * v));
    let masked = s.mul(&off_diag)?.add(&floor)?;
    let (hardest_text, _) = masked.row_max()?;
    let (hardest_image, _) = masked.transpose()?.row_max()?;

    let margin = margin.apply(&positive)?;
    let base = margin.sub(&positive)?;
    let to_text = base.add(&hardest_text)?.hinge()?;
    let to_image = base.add(&hardest_image)?.hinge()?;
    Ok(to_text.add(&to_image)?)
}

/// Summed triplet loss over an `n x n` score matrix.
pub fn triplet_loss_from_scores<'g>(scores: &Var<'g>, margin: Margin) -> Result<Var<'g>> {
    Ok(per_pair_triplet_losses(scores, margin)?.sum()?)
}

/// Triplet loss of a batch under the given main/correction parameters.
pub fn triplet_loss<'g>(
    batch: &TripletBatch,
    main: &MainNetVars<'g>,
    meta: &MetaNetVars<'g>,
    margin: Margin,
) -> Result<Var<'g>> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            needed: 2,
            got: batch.len(),
        });
    }
    let g = main.projection.graph();
    let u = main.embed_images(&g.constant(batch.images.clone()))?;
    let v = main.embed_texts(&g.constant(batch.texts.clone()))?;
    let scores = all_pair_scores(main, meta, &u, &v)?;
    triplet_loss_from_scores(&scores, margin)
}

/// Mean cross-entropy of `[m, 1]` scores against 0/1 labels.
pub fn meta_loss_from_scores<'g>(
    scores: &Var<'g>,
    labels: &[f64],
    kind: MetaLossKind,
) -> Result<Var<'g>> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!("label {y} is not 0 or 1")));
    }
    if scores.shape() != [labels.len(), 1] {
        return Err(Error::Dimension {
            what: "meta scores",
            expected: labels.len(),
            got: scores.value().numel(),
        });
    }
    let g = scores.graph();
    let m = labels.len();
    let s = scores.clamp(SCORE_MIN, SCORE_MAX)?;
    let y = g.constant(Tensor::matrix(m, 1, labels.to_vec()));
    let mut ll = s.ln()?.mul(&y)?;
    if kind == MetaLossKind::BinaryCrossEntropy {
        let not_y = g.constant(Tensor::matrix(m, 1, labels.iter().map(|y| 1.0 - y).collect()));
        let ln_rest = s.neg()?.add_scalar(1.0)?.ln()?;
        ll = ll.add(&ln_rest.mul(&not_y)?)?;
    }
    Ok(ll.mean()?.neg()?)
}

pub fn meta_loss<'g>(
    batch: &MetaBatch,
    main: &MainNetVars<'g>,
    meta: &MetaNetVars<'g>,
    kind: MetaLossKind,
) -> Result<Var<'g>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let g = main.projection.graph();
    let s = pair_scores(
        main,
        meta,
        &g.constant(batch.images.clone()),
        &g.constant(batch.texts.clone()),
    )?;
    meta_loss_from_scores(&s, &batch.labels, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, max_relative_error};
    use crate::autodiff::Graph;
    use crate::model::{ModelDims, Network};
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: f64 = 0.2;
    const TAU: f64 = 2.0;

    #[test]
    fn margin_values() {
        assert_eq!(adaptive_margin(0.5, G, TAU).unwrap(), 0.1);
        let m = adaptive_margin(0.9, G, TAU).unwrap();
        assert!((m - 0.2 * 81.0 / 82.0).abs() < 1e-15);
        assert!(adaptive_margin(1.0 - 1e-9, G, TAU).unwrap() > G - 1e-15);
        assert!(adaptive_margin(1e-9, G, TAU).unwrap() < 1e-15);
        assert!(adaptive_margin(0.0, G, TAU).is_err());
        assert!(adaptive_margin(1.0, G, TAU).is_err());
        assert!(adaptive_margin(f64::NAN, G, TAU).is_err());
    }

    #[test]
    fn margin_var_agrees_with_scalar() {
        let g = Graph::new();
        let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
        let s = g.leaf(Tensor::matrix(grid.len(), 1, grid.clone()));
        let m = adaptive_margin_var(&s, G, TAU).unwrap();
        for (x, v) in grid.iter().zip(m.value().data()) {
            assert!((adaptive_margin(*x, G, TAU).unwrap() - v).abs() < 1e-15);
        }
    }

    fn scores<'g>(g: &'g Graph, n: usize, data: Vec<f64>) -> Var<'g> {
        g.leaf(Tensor::matrix(n, n, data))
    }

    #[test]
    fn equal_scores_give_twice_the_margin() {
        let g = Graph::new();
        let s = 0.37;
        let n = 5;
        let loss = triplet_loss_from_scores(
            &scores(&g, n, vec![s; n * n]),
            Margin::Adaptive { gamma: G, tau: TAU },
        )
        .unwrap();
        let want = 2.0 * n as f64 * adaptive_margin(s, G, TAU).unwrap();
        assert!((loss.item() - want).abs() < 1e-14);
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let g = Graph::new();
        let (n, d) = (4, 0.01);
        let data = (0..n * n)
            .map(|k| if k / n == k % n { 1.0 - d } else { d })
            .collect();
        let loss = triplet_loss_from_scores(&scores(&g, n, data), Margin::Adaptive { gamma: G, tau: TAU })
            .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    /// Brute force over every candidate negative.
    fn brute_force(s: &[Vec<f64>], margin: impl Fn(f64) -> f64) -> f64 {
        let n = s.len();
        let c = |x: f64| x.clamp(SCORE_MIN, SCORE_MAX);
        let mut total = 0.0;
        for i in 0..n {
            let pos = c(s[i][i]);
            let m = margin(pos);
            let worst_t = (0..n).filter(|&j| j != i).map(|j| (m - pos + c(s[i][j])).max(0.0));
            let worst_i = (0..n).filter(|&j| j != i).map(|j| (m - pos + c(s[j][i])).max(0.0));
            total += worst_t.fold(0.0, f64::max) + worst_i.fold(0.0, f64::max);
        }
        total
    }

    #[test]
    fn three_by_three_matches_enumeration() {
        let s = vec![
            vec![0.7, 0.65, 0.1],
            vec![0.2, 0.4, 0.55],
            vec![0.8, 0.3, 0.9],
        ];
        let g = Graph::new();
        let loss = triplet_loss_from_scores(
            &scores(&g, 3, s.concat()),
            Margin::Adaptive { gamma: G, tau: TAU },
        )
        .unwrap();
        let want = brute_force(&s, |p| adaptive_margin(p, G, TAU).unwrap());
        assert!((loss.item() - want).abs() < 1e-14, "{} vs {want}", loss.item());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let g = Graph::new();
        assert!(matches!(
            triplet_loss_from_scores(&scores(&g, 1, vec![0.5]), Margin::Fixed { gamma: G }),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn noisy_pair_loses_more_than_clean_pair() {
        // Oracle scorer: clean pairs near 1, mismatches near 0. Pair 2 is
        // noisy: its stored positive is really a mismatch.
        let (hi, lo) = (1.0 - 1e-4, 1e-4);
        let n = 4;
        let mut s = vec![vec![lo; n]; n];
        for i in 0..n {
            s[i][i] = hi;
        }
        s[2][2] = lo;
        let g = Graph::new();
        let per = per_pair_triplet_losses(
            &scores(&g, n, s.concat()),
            Margin::Adaptive { gamma: G, tau: TAU },
        )
        .unwrap();
        let per = per.value().data();
        let m_noisy = adaptive_margin(lo, G, TAU).unwrap();
        assert!(per[0] <= 2.0 * adaptive_margin(hi, G, TAU).unwrap());
        assert!(per[2] >= 2.0 * m_noisy);
        assert!(per[2] > per[0]);
    }

    #[test]
    fn meta_loss_values() {
        let g = Graph::new();
        let bce = MetaLossKind::BinaryCrossEntropy;
        let near_one = g.leaf(Tensor::scalar(1.0));
        let a = meta_loss_from_scores(&near_one, &[1.0], bce).unwrap().item();
        assert!((a - -(1.0f64 - 1e-4).ln()).abs() < 1e-18);
        let near_zero = g.leaf(Tensor::scalar(0.0));
        let b = meta_loss_from_scores(&near_zero, &[0.0], bce).unwrap().item();
        assert!((a - b).abs() < 1e-15);
        let half = g.leaf(Tensor::scalar(0.5));
        let c = meta_loss_from_scores(&half, &[1.0], bce).unwrap().item();
        assert!((c - std::f64::consts::LN_2).abs() < 1e-15);

        // The positive-only variant ignores negatives.
        let d = meta_loss_from_scores(&half, &[0.0], MetaLossKind::PositiveOnly)
            .unwrap()
            .item();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn meta_loss_errors() {
        let g = Graph::new();
        let s = g.leaf(Tensor::matrix(0, 1, vec![]));
        assert!(matches!(
            meta_loss_from_scores(&s, &[], MetaLossKind::BinaryCrossEntropy),
            Err(Error::EmptyBatch)
        ));
        let s = g.leaf(Tensor::scalar(0.3));
        assert!(meta_loss_from_scores(&s, &[0.5], MetaLossKind::BinaryCrossEntropy).is_err());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dims: &ModelDims) -> (TripletBatch, MetaBatch) {
        let mut mat = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let t = TripletBatch {
            images: mat(n, dims.d_img),
            texts: mat(n, dims.d_txt),
            ids: (0..n as u64).collect(),
        };
        let m = MetaBatch {
            images: mat(n, dims.d_img),
            texts: mat(n, dims.d_txt),
            labels: (0..n).map(|i| (i % 2) as f64).collect(),
        };
        (t, m)
    }

    fn dims() -> ModelDims {
        ModelDims {
            d_img: 4,
            d_txt: 3,
            d_emb: 5,
            d_sim: 3,
            meta_hidden: 4,
        }
    }

    #[test]
    fn meta_loss_gradient_wrt_theta() {
        let dims = dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::init(&dims, &mut rng);
        let (_, batch) = random_batch(&mut rng, 6, &dims);
        let theta: Vec<Tensor> = net.meta.tensors().into_iter().cloned().collect();
        let eval = |ps: &[Tensor]| {
            let mut n = net.clone();
            for (d, s) in n.meta.tensors_mut().into_iter().zip(ps) {
                *d = s.clone();
            }
            let g = Graph::inference();
            meta_loss(&batch, &n.main.bind(&g), &n.meta.bind(&g), MetaLossKind::BinaryCrossEntropy)
                .unwrap()
                .item()
        };
        let g = Graph::new();
        let (m, v) = (net.main.bind(&g), net.meta.bind(&g));
        let loss = meta_loss(&batch, &m, &v, MetaLossKind::BinaryCrossEntropy).unwrap();
        let grads = g.backward(&loss).unwrap();
        let fd = central_difference(&theta, 1e-5, eval);
        for (leaf, num) in v.flat().into_iter().zip(&fd) {
            assert!(max_relative_error(&grads.value(leaf), num) <= 1e-5);
        }
    }

    #[test]
    fn permuting_the_batch_leaves_losses_unchanged() {
        let dims = dims();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::init(&dims, &mut rng);
        let (t, m) = random_batch(&mut rng, 6, &dims);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |x: &Tensor| {
            let rows: Vec<f64> = perm.iter().flat_map(|&i| x.row_slice(i).to_vec()).collect();
            Tensor::matrix(x.rows(), x.cols(), rows)
        };
        let t2 = TripletBatch {
            images: permute(&t.images),
            texts: permute(&t.texts),
            ids: perm.iter().map(|&i| t.ids[i]).collect(),
        };
        let m2 = MetaBatch {
            images: permute(&m.images),
            texts: permute(&m.texts),
            labels: perm.iter().map(|&i| m.labels[i]).collect(),
        };
        let g = Graph::inference();
        let (mv, vv) = (net.main.bind(&g), net.meta.bind(&g));
        let margin = Margin::Adaptive { gamma: G, tau: TAU };
        let a = triplet_loss(&t, &mv, &vv, margin).unwrap().item();
        let b = triplet_loss(&t2, &mv, &vv, margin).unwrap().item();
        assert!((a - b).abs() <= 1e-12);
        let kind = MetaLossKind::BinaryCrossEntropy;
        let a = meta_loss(&m, &mv, &vv, kind).unwrap().item();
        let b = meta_loss(&m2, &mv, &vv, kind).unwrap().item();
        assert!((a - b).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn margin_is_monotone_and_complementary(k in 1u32..9999) {
            let s = k as f64 / 10_000.0;
            let next = (k + 1) as f64 / 10_000.0;
            let m = adaptive_margin(s, G, TAU).unwrap();
            prop_assert!(m > 0.0 && m < G);
            prop_assert!(adaptive_margin(next, G, TAU).unwrap() > m);
            let sum = m + adaptive_margin(1.0 - s, G, TAU).unwrap();
            prop_assert!((sum - G).abs() <= 1e-12);
        }

        #[test]
        fn triplet_loss_is_bounded(data in proptest::collection::vec(0.0f64..1.0, 16)) {
            let g = Graph::new();
            let loss = triplet_loss_from_scores(&scores(&g, 4, data), Margin::Adaptive { gamma: G, tau: TAU })
                .unwrap()
                .item();
            prop_assert!(loss >= 0.0);
            prop_assert!(loss <= 2.0 * 4.0 * (G + 1.0));
        }
    }
}

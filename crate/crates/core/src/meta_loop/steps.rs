//! Single optimisation steps: meta-batch sampling, the virtual step, the
//! correction-net update, the main-net update, and the warmup/baseline steps.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::datagen::PairRecord;
use crate::error::{Error, Result};
use crate::model::{MainNetVars, MetaNetVars, Network};
use crate::objective::{meta_loss, triplet_loss, Margin, MetaBatch, MetaLossKind, TripletBatch};

use super::optim::Optimizer;

/// Which records make up a meta batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaIndices {
    /// Indices into the meta set, label 1.
    pub positives: Vec<usize>,
    /// `(image, text)` indices into the training set with `image != text`,
    /// label 0.
    pub negatives: Vec<(usize, usize)>,
}

/// `m / 2` uniform meta-set draws and `m / 2` uniform ordered pairs of
/// distinct training records.
pub fn sample_meta_indices(
    meta_len: usize,
    train_len: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<MetaIndices> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("meta batch size must be even and positive, got {m}")));
    }
    if meta_len == 0 {
        return Err(Error::InsufficientData("meta set is empty".into()));
    }
    if train_len < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 training pairs for negatives, got {train_len}"
        )));
    }
    let positives = (0..m / 2).map(|_| rng.random_range(0..meta_len)).collect();
    let negatives = (0..m / 2)
        .map(|_| {
            let i = rng.random_range(0..train_len);
            let j = rng.random_range(0..train_len - 1);
            (i, if j >= i { j + 1 } else { j })
        })
        .collect();
    Ok(MetaIndices { positives, negatives })
}

pub fn meta_batch_from_indices(meta: &[PairRecord], train: &[PairRecord], idx: &MetaIndices) -> MetaBatch {
    let mut images = Vec::new();
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for &p in &idx.positives {
        images.extend_from_slice(&meta[p].image);
        texts.extend_from_slice(&meta[p].text);
        labels.push(1.0);
    }
    for &(i, j) in &idx.negatives {
        images.extend_from_slice(&train[i].image);
        texts.extend_from_slice(&train[j].text);
        labels.push(0.0);
    }
    let m = labels.len();
    let di = images.len() / m;
    let dt = texts.len() / m;
    MetaBatch {
        images: Tensor::matrix(m, di, images),
        texts: Tensor::matrix(m, dt, texts),
        labels,
    }
}

/// Labelled batch: matched meta pairs plus freshly mismatched training pairs.
pub fn construct_meta_batch(
    meta: &[PairRecord],
    train: &[PairRecord],
    m: usize,
    rng: &mut impl Rng,
) -> Result<MetaBatch> {
    let idx = sample_meta_indices(meta.len(), train.len(), m, rng)?;
    Ok(meta_batch_from_indices(meta, train, &idx))
}

pub fn triplet_batch(records: &[PairRecord], indices: &[usize]) -> TripletBatch {
    let pick: Vec<&PairRecord> = indices.iter().map(|&i| &records[i]).collect();
    let di = pick.first().map_or(0, |r| r.image.len());
    let dt = pick.first().map_or(0, |r| r.text.len());
    TripletBatch {
        images: Tensor::matrix(pick.len(), di, pick.iter().flat_map(|r| r.image.iter().copied()).collect()),
        texts: Tensor::matrix(pick.len(), dt, pick.iter().flat_map(|r| r.text.iter().copied()).collect()),
        ids: pick.iter().map(|r| r.id).collect(),
    }
}

/// `params - alpha * d loss / d params`, kept differentiable.
pub fn virtual_step<'g>(params: &[&Var<'g>], loss: &Var<'g>, alpha: f64) -> Result<Vec<Var<'g>>> {
    let g = loss.graph();
    let grads = g.backward_retaining(loss)?;
    params
        .iter()
        .map(|&w| Ok(w.sub(&grads.wrt(w).scale(alpha)?)?))
        .collect()
}

/// The main net after one plain gradient step on the triplet loss, as graph
/// values that still depend on the correction-net parameters. Also returns
/// the triplet loss at the current parameters.
pub fn virtual_update<'g>(
    main: &MainNetVars<'g>,
    meta: &MetaNetVars<'g>,
    batch: &TripletBatch,
    margin: Margin,
    alpha: f64,
) -> Result<(MainNetVars<'g>, Var<'g>)> {
    let loss = triplet_loss(batch, main, meta, margin)?;
    let stepped = virtual_step(&main.flat(), &loss, alpha)?;
    Ok((main.from_flat(stepped), loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    /// Gradient for each correction-net tensor, in `MetaNetParams::tensors` order.
    pub grads: Vec<Tensor>,
    pub train_loss: f64,
    pub meta_loss: f64,
}

/// Gradient of the meta loss at the virtually updated main net with respect
/// to the correction-net parameters, through both the direct path and the
/// virtual step.
pub fn meta_gradient(
    net: &Network,
    batch: &TripletBatch,
    meta_batch: &MetaBatch,
    margin: Margin,
    alpha: f64,
    kind: MetaLossKind,
) -> Result<MetaGradient> {
    let g = Graph::with_higher_order();
    let main = net.main.bind(&g);
    let meta = net.meta.bind(&g);
    let (stepped, train_loss) = virtual_update(&main, &meta, batch, margin, alpha)?;
    let loss = meta_loss(meta_batch, &stepped, &meta, kind)?;
    let grads = g.backward(&loss)?;
    Ok(MetaGradient {
        grads: meta.flat().iter().map(|v| grads.value(v)).collect(),
        train_loss: train_loss.item(),
        meta_loss: loss.item(),
    })
}

fn check_loss(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// Adaptive-moment (or plain) step of the correction net on the meta
/// gradient. Returns `(train_loss, meta_loss)` of the virtual step.
#[allow(clippy::too_many_arguments)]
pub fn meta_update(
    net: &mut Network,
    opt: &mut Optimizer,
    batch: &TripletBatch,
    meta_batch: &MetaBatch,
    margin: Margin,
    alpha: f64,
    beta: f64,
    kind: MetaLossKind,
) -> Result<(f64, f64)> {
    let mg = meta_gradient(net, batch, meta_batch, margin, alpha, kind)?;
    check_loss("training loss", mg.train_loss)?;
    check_loss("meta loss", mg.meta_loss)?;
    opt.step(net.meta.tensors_mut(), &mg.grads, beta)?;
    Ok((mg.train_loss, mg.meta_loss))
}

/// Step of the main net on the triplet loss, correction net held fixed.
/// Returns the loss before the step.
pub fn actual_update(
    net: &mut Network,
    opt: &mut Optimizer,
    batch: &TripletBatch,
    margin: Margin,
    alpha: f64,
) -> Result<f64> {
    let g = Graph::new();
    let main = net.main.bind(&g);
    let meta = net.meta.bind(&g);
    let loss = triplet_loss(batch, &main, &meta, margin)?;
    check_loss("training loss", loss.item())?;
    let grads = g.backward(&loss)?;
    let gw: Vec<Tensor> = main.flat().iter().map(|v| grads.value(v)).collect();
    opt.step(net.main.tensors_mut(), &gw, alpha)?;
    Ok(loss.item())
}

/// Warmup iteration: fixed-margin step of the main net, then (optionally)
/// a first-order meta-loss step of the correction net at the updated main
/// net. Returns `(train_loss, meta_loss)`.
#[allow(clippy::too_many_arguments)]
pub fn warmup_step(
    net: &mut Network,
    opt_main: &mut Optimizer,
    opt_meta: &mut Optimizer,
    batch: &TripletBatch,
    meta_batch: Option<&MetaBatch>,
    gamma: f64,
    alpha: f64,
    beta: f64,
    kind: MetaLossKind,
) -> Result<(f64, Option<f64>)> {
    let train = actual_update(net, opt_main, batch, Margin::Fixed { gamma }, alpha)?;
    let Some(mb) = meta_batch else {
        return Ok((train, None));
    };
    let g = Graph::new();
    let main = net.main.bind(&g);
    let meta = net.meta.bind(&g);
    let loss = meta_loss(mb, &main, &meta, kind)?;
    check_loss("meta loss", loss.item())?;
    let grads = g.backward(&loss)?;
    let gt: Vec<Tensor> = meta.flat().iter().map(|v| grads.value(v)).collect();
    opt_meta.step(net.meta.tensors_mut(), &gt, beta)?;
    Ok((train, Some(loss.item())))
}

/// Noise-oblivious step: fixed-margin triplet loss, all parameters updated
/// together at rate `alpha`.
pub fn baseline_step(
    net: &mut Network,
    opt_main: &mut Optimizer,
    opt_meta: &mut Optimizer,
    batch: &TripletBatch,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    let g = Graph::new();
    let main = net.main.bind(&g);
    let meta = net.meta.bind(&g);
    let loss = triplet_loss(batch, &main, &meta, Margin::Fixed { gamma })?;
    check_loss("training loss", loss.item())?;
    let grads = g.backward(&loss)?;
    let gw: Vec<Tensor> = main.flat().iter().map(|v| grads.value(v)).collect();
    let gt: Vec<Tensor> = meta.flat().iter().map(|v| grads.value(v)).collect();
    opt_main.step(net.main.tensors_mut(), &gw, alpha)?;
    opt_meta.step(net.meta.tensors_mut(), &gt, alpha)?;
    Ok(loss.item())
}

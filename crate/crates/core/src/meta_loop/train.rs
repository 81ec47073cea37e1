//! Epoch loop: warmup, co-purification, bi-level iterations, validation.
//!
//! Randomness is drawn from per-(purpose, epoch, network) ChaCha streams of
//! the configured seed, so the two networks can run on separate threads
//! without changing any result.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::Optimizer;
use super::steps::{
    actual_update, baseline_step, meta_batch_from_indices, meta_update, sample_meta_indices, triplet_batch,
    warmup_step,
};
use super::{Mode, PurifySchedule, TrainConfig};
use crate::datagen::{features, DatasetBundle, PairRecord};
use crate::error::{Error, Result};
use crate::evalkit::{aligned_scores, evaluate, RecallReport};
use crate::model::Network;
use crate::purifier::{em_fit, BetaMixture, moment_match_init, posteriors, select_clean, selection_stats, SelectionStats};

const STREAM_INIT: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_PURIFY: u64 = 3;
const STREAM_TRAIN: u64 = 4;

fn stream(seed: u64, purpose: u64, epoch: usize, net: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) | ((epoch as u64) << 4) | net as u64);
    rng
}

/// One network with its two optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSlot {
    pub net: Network,
    pub opt_main: Optimizer,
    pub opt_meta: Optimizer,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub nets: [NetSlot; 2],
    /// Completed epochs, warmup included.
    pub epoch: usize,
    pub seed: u64,
    /// Training indices each network consumed in the last epoch.
    pub purified: [Vec<usize>; 2],
}

impl TrainState {
    pub fn init(config: &TrainConfig, d_img: usize, d_txt: usize) -> Result<Self> {
        config.validate()?;
        let dims = config.model.dims(d_img, d_txt);
        dims.validate()?;
        let slot = |k: usize| NetSlot {
            net: Network::init(&dims, &mut stream(config.seed, STREAM_INIT, 0, k)),
            opt_main: Optimizer::new(config.optimizer, config.adam),
            opt_meta: Optimizer::new(config.optimizer, config.adam),
            steps: 0,
        };
        Ok(Self {
            nets: [slot(0), slot(1)],
            epoch: 0,
            seed: config.seed,
            purified: [Vec::new(), Vec::new()],
        })
    }

    pub fn networks(&self) -> [&Network; 2] {
        [&self.nets[0].net, &self.nets[1].net]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Train,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Train => "train",
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based, warmup epochs included.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub meta_lr: f64,
    /// Mean per-step triplet loss of each network.
    pub train_loss: [f64; 2],
    /// Mean per-step meta loss; NaN when no meta step ran.
    pub meta_loss: [f64; 2],
    /// Pairs network k admitted as clean (the set the other network trains on).
    pub admitted: [usize; 2],
    /// Ground-truth quality of each admitted set.
    pub selection: [SelectionStats; 2],
    /// Whether network k trained on the full set instead of its purified one.
    pub fallback: [bool; 2],
    pub steps: [usize; 2],
    pub validation: Option<RecallReport>,
}

pub const METRICS_HEADER: &str = "epoch\tphase\tlr\tmeta_lr\ttrain_loss_1\ttrain_loss_2\tmeta_loss_1\tmeta_loss_2\t\
admitted_1\tadmitted_2\tprecision_1\trecall_1\tprecision_2\trecall_2\tfallback_1\tfallback_2\tsteps_1\tsteps_2\t\
val_i2t_r1\tval_i2t_r5\tval_i2t_r10\tval_t2i_r1\tval_t2i_r5\tval_t2i_r10\tval_rsum";

impl EpochMetrics {
    /// Tab-separated, columns as in [`METRICS_HEADER`]; missing values are `-`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let num = |x: f64| if x.is_nan() { "-".to_string() } else { x.to_string() };
        write!(s, "{}\t{}\t{}\t{}", self.epoch, self.phase.as_str(), self.lr, self.meta_lr).unwrap();
        for v in self.train_loss.iter().chain(&self.meta_loss) {
            write!(s, "\t{}", num(*v)).unwrap();
        }
        write!(s, "\t{}\t{}", self.admitted[0], self.admitted[1]).unwrap();
        for st in &self.selection {
            write!(s, "\t{}\t{}", st.precision, st.recall).unwrap();
        }
        write!(
            s,
            "\t{}\t{}\t{}\t{}",
            self.fallback[0] as u8, self.fallback[1] as u8, self.steps[0], self.steps[1]
        )
        .unwrap();
        match &self.validation {
            Some(r) => {
                for v in r.i2t.iter().chain(&r.t2i) {
                    write!(s, "\t{v}").unwrap();
                }
                write!(s, "\t{}", r.sum()).unwrap();
            }
            None => s.push_str(&"\t-".repeat(7)),
        }
        s
    }
}

/// Which training indices one network consumed in one epoch, and the
/// posteriors of the network that admitted them.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub epoch: usize,
    pub consumer: usize,
    pub admitted_by: usize,
    pub consumed: Vec<usize>,
    pub posteriors: Vec<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub nets: [Network; 2],
    pub validation: RecallReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Best validation sum of recalls; absent when there is no validation split.
    pub best: Option<BestCheckpoint>,
    pub audit: Vec<AuditEntry>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn effective_batch(config: &TrainConfig, train_len: usize) -> Result<usize> {
    if train_len < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: train_len });
    }
    if train_len < config.batch_size {
        warn!(
            "training split has {train_len} pairs, fewer than batch_size {}; using one batch of {train_len}",
            config.batch_size
        );
    }
    Ok(config.batch_size.min(train_len))
}

struct NetEpoch {
    train_loss: f64,
    meta_loss: f64,
    steps: usize,
}

/// Runs `f` for both slots, on two threads.
fn both<T: Send>(
    slots: &mut [NetSlot; 2],
    f: impl Fn(usize, &mut NetSlot) -> Result<T> + Sync,
) -> Result<[T; 2]> {
    let [a, b] = slots;
    let (ra, rb) = rayon::join(|| f(0, a), || f(1, b));
    Ok([ra?, rb?])
}

fn clean_stats(train: &[PairRecord]) -> SelectionStats {
    let clean: Vec<bool> = train.iter().map(|r| r.clean).collect();
    selection_stats(&(0..train.len()).collect::<Vec<_>>(), &clean)
}

/// One warmup epoch over the full training split. In baseline mode this is
/// an ordinary baseline epoch.
pub fn warmup_epoch(state: &mut TrainState, bundle: &DatasetBundle, config: &TrainConfig) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let train = &bundle.train;
    let batch = effective_batch(config, train.len())?;
    let use_meta = config.mode == Mode::Mscn && config.warmup_meta;
    if use_meta && bundle.meta.is_empty() {
        return Err(Error::InsufficientData("meta split is empty".into()));
    }
    let results = both(&mut state.nets, |k, slot| {
        let mut rng = stream(state.seed, STREAM_WARMUP, epoch, k);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut tl, mut ml) = (Vec::new(), Vec::new());
        for chunk in order.chunks_exact(batch) {
            let tb = triplet_batch(train, chunk);
            match config.mode {
                Mode::Baseline => {
                    tl.push(baseline_step(
                        &mut slot.net,
                        &mut slot.opt_main,
                        &mut slot.opt_meta,
                        &tb,
                        config.gamma,
                        config.lr,
                    )?);
                }
                Mode::Mscn => {
                    let mb = if use_meta {
                        let idx = sample_meta_indices(bundle.meta.len(), train.len(), config.meta_batch_size, &mut rng)?;
                        Some(meta_batch_from_indices(&bundle.meta, train, &idx))
                    } else {
                        None
                    };
                    let (t, m) = warmup_step(
                        &mut slot.net,
                        &mut slot.opt_main,
                        &mut slot.opt_meta,
                        &tb,
                        mb.as_ref(),
                        config.gamma,
                        config.lr,
                        config.meta_lr,
                        config.meta_loss,
                    )?;
                    tl.push(t);
                    ml.extend(m);
                }
            }
            slot.steps += 1;
        }
        Ok(NetEpoch {
            train_loss: mean(&tl),
            meta_loss: mean(&ml),
            steps: tl.len(),
        })
    })?;
    state.epoch += 1;
    let all: Vec<usize> = (0..train.len()).collect();
    state.purified = [all.clone(), all];
    let stats = clean_stats(train);
    Ok(EpochMetrics {
        epoch: state.epoch,
        phase: Phase::Warmup,
        lr: config.lr,
        meta_lr: config.meta_lr,
        train_loss: [results[0].train_loss, results[1].train_loss],
        meta_loss: [results[0].meta_loss, results[1].meta_loss],
        admitted: [train.len(), train.len()],
        selection: [stats, stats],
        fallback: [false, false],
        steps: [results[0].steps, results[1].steps],
        validation: None,
    })
}

/// Posterior of being clean for every training pair under one network.
/// Scores every training pair with `net` and fits the clean/noisy mixture,
/// initialised from the meta pairs and as many mismatched training pairs.
pub fn fit_train_mixture(
    net: &Network,
    bundle: &DatasetBundle,
    em_stop: f64,
    em_max_iters: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, BetaMixture)> {
    let train = &bundle.train;
    let (ti, tt) = features(train);
    let scores = aligned_scores(net, &ti, &tt)?;
    let (mi, mt) = features(&bundle.meta);
    let positive = aligned_scores(net, &mi, &mt)?;
    let idx = sample_meta_indices(bundle.meta.len(), train.len(), 2 * bundle.meta.len(), rng)?;
    let negatives: Vec<PairRecord> = idx
        .negatives
        .iter()
        .map(|&(i, j)| PairRecord {
            id: 0,
            image: train[i].image.clone(),
            text: train[j].text.clone(),
            clean: false,
            original_partner: 1,
        })
        .collect();
    let (ni, nt) = features(&negatives);
    let negative = aligned_scores(net, &ni, &nt)?;
    let init = moment_match_init(&positive, &negative)?;
    let mixture = em_fit(&scores, &init, em_stop, em_max_iters)?;
    Ok((scores, mixture))
}

fn purification_posteriors(
    net: &Network,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    epoch: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let mut rng = stream(config.seed, STREAM_PURIFY, epoch, k);
    let (scores, mixture) = fit_train_mixture(net, bundle, config.em_stop, config.em_max_iters, &mut rng)?;
    posteriors(&mixture, &scores)
}

/// One post-warmup epoch: each network purifies the data of the other, then
/// both run bi-level iterations on their admitted sets.
pub fn cotrain_epoch(
    state: &mut TrainState,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    audit: &mut Vec<AuditEntry>,
) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let post = epoch.saturating_sub(config.warmup_epochs);
    let (alpha, beta) = config.rates(post);
    let train = &bundle.train;
    let batch = effective_batch(config, train.len())?;
    let clean: Vec<bool> = train.iter().map(|r| r.clean).collect();
    let all: Vec<usize> = (0..train.len()).collect();

    // Posteriors from each network; failures admit everything.
    let mut post_k: [Option<Vec<f64>>; 2] = [None, None];
    if config.mode == Mode::Mscn && config.purify == PurifySchedule::PerEpoch {
        let nets = state.networks();
        let (p0, p1) = rayon::join(
            || purification_posteriors(nets[0], bundle, config, epoch, 0),
            || purification_posteriors(nets[1], bundle, config, epoch, 1),
        );
        for (k, p) in [p0, p1].into_iter().enumerate() {
            match p {
                Ok(p) => post_k[k] = Some(p),
                Err(e @ (Error::InsufficientData(_) | Error::DegenerateMoments { .. })) => {
                    warn!("epoch {}: network {} cannot purify ({e}); admitting all pairs", epoch + 1, k + 1);
                }
                Err(e) => return Err(e),
            }
        }
    }
    let admitted: [Vec<usize>; 2] = [0, 1].map(|k| match &post_k[k] {
        Some(p) => select_clean(p),
        None => all.clone(),
    });

    let mut consumed: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut fallback = [false; 2];
    for k in 0..2 {
        let giver = 1 - k;
        if admitted[giver].len() < batch {
            warn!(
                "epoch {}: network {} admitted {} pairs, fewer than one batch; network {} trains on all pairs",
                epoch + 1,
                giver + 1,
                admitted[giver].len(),
                k + 1
            );
            consumed[k] = all.clone();
            fallback[k] = true;
        } else {
            consumed[k] = admitted[giver].clone();
        }
        audit.push(AuditEntry {
            epoch: epoch + 1,
            consumer: k,
            admitted_by: giver,
            consumed: consumed[k].clone(),
            posteriors: post_k[giver].clone().unwrap_or_else(|| vec![1.0; train.len()]),
            fallback: fallback[k],
        });
    }

    let margin = config.training_margin();
    let consumed_ref = &consumed;
    let results = both(&mut state.nets, |k, slot| {
        let mut rng = stream(state.seed, STREAM_TRAIN, epoch, k);
        let mut order = consumed_ref[k].clone();
        order.shuffle(&mut rng);
        let (mut tl, mut ml) = (Vec::new(), Vec::new());
        for chunk in order.chunks_exact(batch) {
            let tb = triplet_batch(train, chunk);
            match config.mode {
                Mode::Baseline => {
                    tl.push(baseline_step(
                        &mut slot.net,
                        &mut slot.opt_main,
                        &mut slot.opt_meta,
                        &tb,
                        config.gamma,
                        alpha,
                    )?);
                }
                Mode::Mscn => {
                    let idx = sample_meta_indices(bundle.meta.len(), train.len(), config.meta_batch_size, &mut rng)?;
                    let mb = meta_batch_from_indices(&bundle.meta, train, &idx);
                    let (_, m) = meta_update(
                        &mut slot.net,
                        &mut slot.opt_meta,
                        &tb,
                        &mb,
                        margin,
                        alpha,
                        beta,
                        config.meta_loss,
                    )?;
                    let t = actual_update(&mut slot.net, &mut slot.opt_main, &tb, margin, alpha)?;
                    tl.push(t);
                    ml.push(m);
                }
            }
            slot.steps += 1;
        }
        Ok(NetEpoch {
            train_loss: mean(&tl),
            meta_loss: mean(&ml),
            steps: tl.len(),
        })
    })?;

    state.epoch += 1;
    state.purified = consumed;
    Ok(EpochMetrics {
        epoch: state.epoch,
        phase: Phase::Train,
        lr: alpha,
        meta_lr: beta,
        train_loss: [results[0].train_loss, results[1].train_loss],
        meta_loss: [results[0].meta_loss, results[1].meta_loss],
        admitted: [admitted[0].len(), admitted[1].len()],
        selection: [
            selection_stats(&admitted[0], &clean),
            selection_stats(&admitted[1], &clean),
        ],
        fallback,
        steps: [results[0].steps, results[1].steps],
        validation: None,
    })
}

pub fn train(bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(bundle, config, |_, _, _| Ok(()))
}

/// Full run. `observer` sees every epoch's metrics, the current networks, and
/// whether they are a new best on validation.
pub fn train_with_observer(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics, [&Network; 2], bool) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    bundle.validate()?;
    let mut state = TrainState::init(config, bundle.d_img(), bundle.d_txt())?;
    let mut metrics = Vec::new();
    let mut audit = Vec::new();
    let mut best: Option<BestCheckpoint> = None;
    for e in 0..config.total_epochs() {
        let mut m = if e < config.warmup_epochs {
            warmup_epoch(&mut state, bundle, config)?
        } else {
            cotrain_epoch(&mut state, bundle, config, &mut audit)?
        };
        let mut improved = false;
        if !bundle.validation.is_empty() {
            let report = evaluate(&state.networks(), &bundle.validation)?;
            improved = best.as_ref().is_none_or(|b| report.sum() > b.validation.sum());
            if improved {
                best = Some(BestCheckpoint {
                    epoch: m.epoch,
                    nets: [state.nets[0].net.clone(), state.nets[1].net.clone()],
                    validation: report,
                });
            }
            m.validation = Some(report);
        }
        info!("{}", m.render());
        observer(&m, state.networks(), improved)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        state,
        metrics,
        best,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, inject_noise, GenerationSpec};
    use crate::meta_loop::ModelShape;

    fn tiny_bundle(noise: f64) -> DatasetBundle {
        let spec = GenerationSpec {
            n_clusters: 4,
            pairs_per_cluster: 30,
            d_img: 6,
            d_txt: 5,
            within_cluster_std: 0.1,
            instance_correlation: 0.9,
            val_fraction: 0.1,
            test_fraction: 0.1,
            meta_fraction: 0.1,
            seed: 3,
        };
        let b = generate_synthetic(&spec).unwrap();
        inject_noise(&b, noise, 4).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            meta_batch_size: 8,
            warmup_epochs: 1,
            epochs: 2,
            lr_decay_epoch: 1,
            lr: 1e-3,
            meta_lr: 1e-3,
            model: ModelShape {
                d_emb: 8,
                d_sim: 4,
                meta_hidden: 4,
            },
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn zero_warmup_leaves_state() {
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..tiny_config()
        };
        let b = tiny_bundle(0.0);
        let s0 = TrainState::init(&cfg, 6, 5).unwrap();
        let mut s1 = s0.clone();
        for _ in 0..cfg.warmup_epochs {
            warmup_epoch(&mut s1, &b, &cfg).unwrap();
        }
        assert_eq!(s0, s1);
    }

    #[test]
    fn networks_start_different() {
        let s = TrainState::init(&tiny_config(), 6, 5).unwrap();
        assert_ne!(s.nets[0].net, s.nets[1].net);
    }

    #[test]
    fn run_is_deterministic() {
        let b = tiny_bundle(0.4);
        let cfg = tiny_config();
        let a = train(&b, &cfg).unwrap();
        let c = train(&b, &cfg).unwrap();
        assert_eq!(a, c);
        let log_a: Vec<String> = a.metrics.iter().map(EpochMetrics::render).collect();
        let log_c: Vec<String> = c.metrics.iter().map(EpochMetrics::render).collect();
        assert_eq!(log_a, log_c);
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(a.metrics[0].phase, Phase::Warmup);
        assert_eq!(a.metrics[2].lr, 1e-3 * 0.1);
    }

    #[test]
    fn consumed_sets_come_from_the_other_network() {
        let b = tiny_bundle(0.4);
        let out = train(&b, &tiny_config()).unwrap();
        assert_eq!(out.audit.len(), 4);
        for a in &out.audit {
            assert_eq!(a.admitted_by, 1 - a.consumer);
            if !a.fallback {
                assert!(a.consumed.iter().all(|&i| a.posteriors[i] > 0.5));
                let admitted = a.posteriors.iter().filter(|&&p| p > 0.5).count();
                assert_eq!(admitted, a.consumed.len());
            }
        }
    }

    #[test]
    fn disabled_purification_uses_all_pairs() {
        let b = tiny_bundle(0.0);
        let cfg = TrainConfig {
            purify: PurifySchedule::Disabled,
            ..tiny_config()
        };
        let out = train(&b, &cfg).unwrap();
        for a in &out.audit {
            assert_eq!(a.consumed, (0..b.train.len()).collect::<Vec<_>>());
            assert!(!a.fallback);
        }
    }

    #[test]
    fn training_one_network_never_touches_the_other() {
        let b = tiny_bundle(0.2);
        let cfg = tiny_config();
        let mut state = TrainState::init(&cfg, 6, 5).unwrap();
        let other = state.nets[1].clone();
        let slot = &mut state.nets[0];
        let batch = triplet_batch(&b.train, &(0..16).collect::<Vec<_>>());
        let mut rng = stream(1, 9, 0, 0);
        let idx = sample_meta_indices(b.meta.len(), b.train.len(), 8, &mut rng).unwrap();
        let mb = meta_batch_from_indices(&b.meta, &b.train, &idx);
        let before = slot.net.clone();
        meta_update(&mut slot.net, &mut slot.opt_meta, &batch, &mb, cfg.training_margin(), 1e-3, 1e-3, cfg.meta_loss).unwrap();
        actual_update(&mut slot.net, &mut slot.opt_main, &batch, cfg.training_margin(), 1e-3).unwrap();
        assert_ne!(state.nets[0].net, before);
        assert_eq!(state.nets[1], other);
    }

    #[test]
    fn metrics_line_has_every_column() {
        let b = tiny_bundle(0.2);
        let out = train(&b, &tiny_config()).unwrap();
        let cols = METRICS_HEADER.split('\t').count();
        for m in &out.metrics {
            assert_eq!(m.render().split('\t').count(), cols);
        }
        assert!(out.best.is_some());
    }

    #[test]
    fn baseline_runs_without_meta_loss() {
        let b = tiny_bundle(0.2);
        let cfg = TrainConfig {
            mode: Mode::Baseline,
            ..tiny_config()
        };
        let out = train(&b, &cfg).unwrap();
        assert!(out.metrics.iter().all(|m| m.meta_loss[0].is_nan()));
        assert!(out.audit.iter().all(|a| a.consumed.len() == b.train.len()));
    }
}

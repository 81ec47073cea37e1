//! Bi-level training of the main net and the similarity-correction net, with
//! two co-trained networks that purify each other's training data.
//!
//! Every iteration after warmup runs three steps on one mini-batch:
//!
//! 1. a virtual plain gradient step of the main net on the triplet loss,
//!    kept on the tape so it stays a function of the correction net;
//! 2. an update of the correction net on the meta loss evaluated at the
//!    virtually stepped main net;
//! 3. a real update of the main net on the triplet loss under the updated
//!    correction net.
//!
//! Once per epoch each network scores every training pair, fits a two
//! component beta mixture to the scores, and hands the pairs it believes
//! clean to the *other* network.

pub mod optim;
pub mod steps;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::objective::{Margin, MetaLossKind};
use crate::purifier::{DEFAULT_MAX_ITERS, DEFAULT_STOP};

pub use optim::{AdamHyper, Optimizer, OptimizerKind};
pub use steps::{
    actual_update, construct_meta_batch, meta_gradient, meta_update, sample_meta_indices, triplet_batch,
    virtual_step, virtual_update, MetaGradient, MetaIndices,
};
pub use train::{
    cotrain_epoch, fit_train_mixture, train, train_with_observer, warmup_epoch, AuditEntry, BestCheckpoint, EpochMetrics,
    NetSlot, Phase, TrainOutcome, TrainState, METRICS_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bi-level training with adaptive margins and co-purification.
    #[default]
    Mscn,
    /// Fixed-margin triplet training on all data, no meta step, no purification.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurifySchedule {
    /// Refit the mixture at the start of every post-warmup epoch.
    #[default]
    PerEpoch,
    /// Every pair is admitted.
    Disabled,
}

/// Widths not fixed by the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_emb: usize,
    pub d_sim: usize,
    pub meta_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelDims::new(1, 1);
        Self {
            d_emb: d.d_emb,
            d_sim: d.d_sim,
            meta_hidden: d.meta_hidden,
        }
    }
}

impl ModelShape {
    pub fn dims(&self, d_img: usize, d_txt: usize) -> ModelDims {
        ModelDims {
            d_img,
            d_txt,
            d_emb: self.d_emb,
            d_sim: self.d_sim,
            meta_hidden: self.meta_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Half matched meta pairs, half mismatched training pairs.
    pub meta_batch_size: usize,
    /// Main-net rate, also the virtual step size.
    pub lr: f64,
    pub meta_lr: f64,
    pub warmup_epochs: usize,
    /// Epochs after warmup.
    pub epochs: usize,
    /// Post-warmup epoch index from which both rates are multiplied by `lr_decay`.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    /// Train the correction net on the meta loss during warmup.
    pub warmup_meta: bool,
    pub meta_loss: MetaLossKind,
    pub purify: PurifySchedule,
    pub em_stop: f64,
    pub em_max_iters: usize,
    pub mode: Mode,
    pub model: ModelShape,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            tau: 2.0,
            batch_size: 64,
            meta_batch_size: 64,
            lr: 2e-4,
            meta_lr: 1.7e-5,
            warmup_epochs: 5,
            epochs: 50,
            lr_decay_epoch: 30,
            lr_decay: 0.1,
            optimizer: OptimizerKind::Adam,
            adam: AdamHyper::default(),
            warmup_meta: true,
            meta_loss: MetaLossKind::BinaryCrossEntropy,
            purify: PurifySchedule::PerEpoch,
            em_stop: DEFAULT_STOP,
            em_max_iters: DEFAULT_MAX_ITERS,
            mode: Mode::Mscn,
            model: ModelShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("lr", self.lr),
            ("meta_lr", self.meta_lr),
            ("lr_decay", self.lr_decay),
            ("em_stop", self.em_stop),
            ("adam.eps", self.adam.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a positive finite number, got {v}"));
            }
        }
        for (name, v) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.meta_batch_size < 2 || !self.meta_batch_size.is_multiple_of(2) {
            return fail(format!(
                "meta_batch_size must be even and at least 2, got {}",
                self.meta_batch_size
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.em_max_iters == 0 {
            return fail("em_max_iters must be at least 1".into());
        }
        self.model
            .dims(1, 1)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.epochs
    }

    /// `(main rate, meta rate)` for post-warmup epoch `epoch` (0-based).
    pub fn rates(&self, epoch: usize) -> (f64, f64) {
        if epoch >= self.lr_decay_epoch {
            (self.lr * self.lr_decay, self.meta_lr * self.lr_decay)
        } else {
            (self.lr, self.meta_lr)
        }
    }

    pub fn training_margin(&self) -> Margin {
        match self.mode {
            Mode::Mscn => Margin::AdaptiveDetached {
                gamma: self.gamma,
                tau: self.tau,
            },
            Mode::Baseline => Margin::Fixed { gamma: self.gamma },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.gamma, c.tau), (0.2, 2.0));
        assert_eq!((c.lr, c.meta_lr), (2e-4, 1.7e-5));
        assert_eq!((c.warmup_epochs, c.epochs, c.lr_decay_epoch), (5, 50, 30));
        assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.eps), (0.9, 0.999, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn rate_schedule_is_exact() {
        let c = TrainConfig::default();
        for e in 0..30 {
            assert_eq!(c.rates(e), (2e-4, 1.7e-5));
        }
        for e in 30..50 {
            assert_eq!(c.rates(e), (2e-4 * 0.1, 1.7e-5 * 0.1));
        }
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert_eq!(serde_json::from_str::<TrainConfig>("{}").unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"gamam": 0.2}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { meta_batch_size: 7, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig {
                model: ModelShape { d_emb: 8, d_sim: 8, meta_hidden: 4 },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}

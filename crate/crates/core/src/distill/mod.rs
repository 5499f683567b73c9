//! Training-side mathematics: token-level and byte-level distillation
//! losses, the naive byte-to-token reconstruction, embedding transfer, and
//! the training loops.

mod fvt;
mod loss;
mod naive;
mod targets;
mod train;

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{BldError, Result};

pub use fvt::fvt_init;
pub use loss::{
    bld_loss, bld_loss_and_grad, standard_kd_loss, BldObjective, KdObjective, SupervisionTargets,
    TrainExample,
};
pub use naive::{
    naive_ctd_token_probs, BeamConditionals, ByteConditionals, ExactConditionals, NaiveCtd,
    TableConditionals,
};
pub use targets::{build_byte_targets, TeacherByteTargets};
pub use train::{
    byte_only_sft, evaluate, train, AdamW, BeamTargets, ByteSftConfig, ByteSftEpoch, EvalMetrics,
    MetricRecord, NoTargets, PrecomputedTargets, Schedule, TargetProvider, TrainConfig,
    TrainOutcome,
};

/// Coefficients of the token cross-entropy, byte cross-entropy and KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_token: f64,
    pub lambda_byte: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_token: 1.0,
            lambda_byte: 1.0,
            lambda_kl: 0.1,
        }
    }
}

impl LossWeights {
    /// Plain next-token fine-tuning.
    pub fn sft() -> Self {
        Self {
            lambda_token: 1.0,
            lambda_byte: 0.0,
            lambda_kl: 0.0,
        }
    }

    /// Same-vocabulary distillation with unit weights on CE and KL.
    pub fn kd() -> Self {
        Self {
            lambda_token: 1.0,
            lambda_byte: 0.0,
            lambda_kl: 1.0,
        }
    }

    /// Byte cross-entropy only.
    pub fn byte_only() -> Self {
        Self {
            lambda_token: 0.0,
            lambda_byte: 1.0,
            lambda_kl: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_token", self.lambda_token),
            ("lambda_byte", self.lambda_byte),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(BldError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub token_ce: f64,
    pub token_kl: f64,
    pub byte_ce: f64,
    pub byte_kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(
        w: &LossWeights,
        token_ce: f64,
        token_kl: f64,
        byte_ce: f64,
        byte_kl: f64,
    ) -> Self {
        Self {
            token_ce,
            token_kl,
            byte_ce,
            byte_kl,
            total: w.lambda_token * token_ce
                + w.lambda_byte * byte_ce
                + w.lambda_kl * (byte_kl + token_kl),
        }
    }

    pub fn scaled(self, f: f64) -> Self {
        Self {
            token_ce: self.token_ce * f,
            token_kl: self.token_kl * f,
            byte_ce: self.byte_ce * f,
            byte_kl: self.byte_kl * f,
            total: self.total * f,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.token_ce,
            self.token_kl,
            self.byte_ce,
            self.byte_kl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl Add for LossBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            token_ce: self.token_ce + o.token_ce,
            token_kl: self.token_kl + o.token_kl,
            byte_ce: self.byte_ce + o.byte_ce,
            byte_kl: self.byte_kl + o.byte_kl,
            total: self.total + o.total,
        }
    }
}

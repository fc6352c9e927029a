//! One entry point for every channel method.

use serde::{Deserialize, Serialize};

use super::config::{AeSettings, Method};
use crate::channels::{
    conv_lg_channels, lg_channels, matched_filter, pls_channels, train_ae_channels, AeHyperparams, AeLoss,
    ChannelMatrix,
};
use crate::error::{Error, Result};
use crate::imaging::{LabeledDataset, SignalEstimate};

/// A concrete hyperparameter choice for one channel method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ChannelSpec {
    Ae { loss: AeLoss, channels: usize, learning_rate: f64, seed: u64 },
    Pls { channels: usize },
    Lg { channels: usize, width: f64 },
    ConvLg { channels: usize, width: f64 },
    MatchedFilter,
}

impl ChannelSpec {
    pub fn channel_count(&self) -> usize {
        match *self {
            ChannelSpec::Ae { channels, .. }
            | ChannelSpec::Pls { channels }
            | ChannelSpec::Lg { channels, .. }
            | ChannelSpec::ConvLg { channels, .. } => channels,
            ChannelSpec::MatchedFilter => 1,
        }
    }

    /// Compact `key=value;...` description for result tables.
    pub fn describe(&self) -> String {
        match self {
            ChannelSpec::Ae { channels, learning_rate, seed, .. } => {
                format!("m={channels};lr={learning_rate:e};init_seed={seed}")
            }
            ChannelSpec::Pls { channels } => format!("m={channels}"),
            ChannelSpec::Lg { channels, width } | ChannelSpec::ConvLg { channels, width } => {
                format!("m={channels};a_u={width}")
            }
            ChannelSpec::MatchedFilter => "m=1".to_string(),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            ChannelSpec::Ae { loss: AeLoss::TaskSpecific, .. } => Method::AeTask,
            ChannelSpec::Ae { loss: AeLoss::Traditional, .. } => Method::AeTraditional,
            ChannelSpec::Pls { .. } => Method::Pls,
            ChannelSpec::Lg { .. } => Method::Lg,
            ChannelSpec::ConvLg { .. } => Method::ConvLg,
            ChannelSpec::MatchedFilter => Method::MatchedFilter,
        }
    }
}

/// Fits the channels described by `spec` on `train`. `center` is the LG
/// channel origin in pixel coordinates.
pub fn fit_channels(
    spec: &ChannelSpec,
    train: &LabeledDataset,
    sig: &SignalEstimate,
    ae: &AeSettings,
    center: [f64; 2],
) -> Result<ChannelMatrix> {
    match *spec {
        ChannelSpec::Ae { loss, channels, learning_rate, seed } => {
            let hp = AeHyperparams {
                channels,
                learning_rate,
                epochs: ae.epochs,
                minibatch_size: ae.minibatch_size,
                init_std: ae.init_std,
                pretrain: ae.pretrain,
                loss,
                seed,
                center: ae.center,
                adam: ae.adam,
            };
            Ok(train_ae_channels(train, sig, &hp)?.channels)
        }
        ChannelSpec::Pls { channels } => Ok(pls_channels(train, channels)?.channels),
        ChannelSpec::Lg { channels, width } => lg_channels(channels, width, train.side(), center),
        ChannelSpec::ConvLg { channels, width } => {
            conv_lg_channels(&lg_channels(channels, width, train.side(), center)?, sig)
        }
        ChannelSpec::MatchedFilter => matched_filter(sig),
    }
}

pub(crate) fn not_channelized(method: Method) -> Error {
    Error::invalid(format!("{method} does not produce channels"))
}

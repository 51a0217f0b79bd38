//! Machine-readable run reports: per-layer-type parameter distributions and
//! per-layer kind tables, plus the JSON envelope the command-line tools emit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evolution::GenerationStat;
use crate::glora::{LayerConfig, ModelConfig};
use crate::supernet::{LayerRole, SplitMetrics, ToyModel, LAYER_ROLES};
use crate::tensor::Scalar;

/// Trainable parameters grouped by layer type; the sum always equals the
/// model-wide count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub by_layer_type: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn param_breakdown<T: Scalar>(
    model: &ToyModel<T>,
    config: &ModelConfig,
) -> Result<ParamBreakdown> {
    let mut by_layer_type: BTreeMap<String, usize> = LAYER_ROLES
        .iter()
        .map(|r| (r.name().to_string(), 0))
        .collect();
    let mut total = 0usize;
    for ((layer, cfg), &label) in model
        .layers()
        .iter()
        .zip(&config.layers)
        .zip(model.labels())
    {
        let count = layer.trainable_param_count(cfg);
        *by_layer_type
            .get_mut(label.name())
            .expect("all roles present") += count;
        total += count;
    }
    Ok(ParamBreakdown {
        by_layer_type,
        total,
    })
}

/// One row per layer: its label, the five chosen kinds, and the trainable
/// parameters they activate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKindRow {
    pub layer: usize,
    pub label: LayerRole,
    pub kinds: LayerConfig,
    pub trainable_params: usize,
}

pub fn layer_kind_table<T: Scalar>(model: &ToyModel<T>, config: &ModelConfig) -> Vec<LayerKindRow> {
    model
        .layers()
        .iter()
        .zip(&config.layers)
        .zip(model.labels())
        .enumerate()
        .map(|(i, ((layer, cfg), &label))| LayerKindRow {
            layer: i,
            label,
            kinds: *cfg,
            trainable_params: layer.trainable_param_count(cfg),
        })
        .collect()
}

/// Search-space accounting in report form; the exact product is carried as a
/// decimal string since it overflows fixed-width integers quickly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceReport {
    pub per_layer: Vec<u64>,
    pub layerwise_sum: u64,
    pub combinatorial_total: String,
}

impl From<crate::evolution::SearchSpaceSize> for SearchSpaceReport {
    fn from(size: crate::evolution::SearchSpaceSize) -> Self {
        SearchSpaceReport {
            per_layer: size.per_layer,
            layerwise_sum: size.layerwise_sum,
            combinatorial_total: size.combinatorial_total.to_string(),
        }
    }
}

/// Wall-clock timing. Kept in its own field so determinism checks can ignore
/// it; artifacts themselves never contain timing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

/// The JSON document every command writes next to its artifact: the command
/// name, an echo of the effective options, seeds, metrics per split, and the
/// layer breakdowns. Every number is recomputable from the referenced
/// checkpoint and dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub options: serde_json::Value,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<BTreeMap<String, SplitMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_losses: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_counts: Option<ParamBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_kinds: Option<Vec<LayerKindRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search_space: Option<SearchSpaceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<GenerationStat>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn new(command: &str, options: serde_json::Value, seed: u64) -> Self {
        RunReport {
            command: command.to_string(),
            options,
            seed,
            metrics: None,
            epoch_losses: None,
            param_counts: None,
            layer_kinds: None,
            search_space: None,
            history: None,
            timing: None,
        }
    }
}

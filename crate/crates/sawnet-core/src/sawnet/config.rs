//! Model architecture configuration.
//!
//! Everything that shapes a network lives here and serializes to JSON, so a
//! run is fully described by its config file plus a seed. Defaults follow
//! the reference architecture (trunk 64/64/128/256 into a 1024-wide
//! aggregation, transformer widths 64/128/1024); toy runs shrink every
//! width through the same fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full model: per-layer [G:L] combine with residual skips.
    #[default]
    Sawnet,
    /// Global-only and local-only trunks run side by side; their pooled
    /// features meet only at the classifier.
    CombineAtEnd,
    /// Per-layer combine kept, every residual addition removed.
    CombinePerLayerNoResidual,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sawnet => "sawnet",
            Variant::CombineAtEnd => "combine_at_end",
            Variant::CombinePerLayerNoResidual => "combine_per_layer_no_residual",
        }
    }
}

/// One trunk layer: both branches run at `branch_width`, so the layer's
/// concatenated output has twice that many channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SawLayerConfig {
    pub branch_width: usize,
    pub k: usize,
    #[serde(default = "default_true")]
    pub post_add_activation: bool,
}

/// Alignment network: a small trunk of the same layers, pooled, regressing
/// a 3x3 transform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    #[serde(default = "default_transformer_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_transformer_head")]
    pub head: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            widths: default_transformer_widths(),
            head: default_transformer_head(),
            k: default_k(),
        }
    }
}

/// Splits a multi-feature input between the branches: the edge branch (and
/// its graph) sees the first `edgeconv_dims` channels, the shared branch
/// the first `shared_dims`. Only the first trunk layer is affected; deeper
/// layers consume whole feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSplit {
    pub edgeconv_dims: usize,
    pub shared_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_input_dims")]
    pub input_dims: usize,
    pub trunk: Vec<SawLayerConfig>,
    #[serde(default = "default_aggregate_width")]
    pub aggregate_width: usize,
    #[serde(default = "default_head_widths")]
    pub head_widths: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub parts: Option<usize>,
    #[serde(default = "default_seg_head_widths")]
    pub seg_head_widths: Vec<usize>,
    /// `None` disables alignment entirely (write `"transformer": null`).
    #[serde(default = "default_transformer")]
    pub transformer: Option<TransformerConfig>,
    #[serde(default)]
    pub channel_split: Option<ChannelSplit>,
}

impl ModelConfig {
    /// Output width of the classifier/segmenter, by task.
    pub fn out_width(&self) -> usize {
        match self.task {
            Task::Classify => self.num_classes.unwrap_or(0),
            Task::Segment => self.parts.unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.trunk.is_empty() {
            return err("trunk must have at least one layer".into());
        }
        for (i, layer) in self.trunk.iter().enumerate() {
            if layer.branch_width == 0 {
                return err(format!("trunk layer {i}: branch_width must be positive"));
            }
            if layer.k == 0 {
                return err(format!("trunk layer {i}: k must be at least 1"));
            }
        }
        if self.aggregate_width == 0 {
            return err("aggregate_width must be positive".into());
        }
        if self.head_widths.iter().any(|&w| w == 0) {
            return err("head widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        match self.task {
            Task::Classify => {
                let c = self.num_classes.unwrap_or(0);
                if c < 2 {
                    return err("classification needs num_classes >= 2".into());
                }
            }
            Task::Segment => {
                if self.parts.unwrap_or(0) == 0 {
                    return err("segmentation needs parts >= 1".into());
                }
                if self.variant != Variant::Sawnet {
                    return err(format!(
                        "segmentation supports only the sawnet variant, not {}",
                        self.variant.name()
                    ));
                }
                if self.seg_head_widths.iter().any(|&w| w == 0) {
                    return err("segmentation head widths must be positive".into());
                }
            }
        }
        if let Some(t) = &self.transformer {
            if self.input_dims < 3 {
                return err(format!(
                    "alignment needs at least 3 input dims, got {}",
                    self.input_dims
                ));
            }
            if t.widths.is_empty() || t.widths.iter().any(|&w| w == 0) {
                return err("transformer widths must be a non-empty positive list".into());
            }
            if t.k == 0 {
                return err("transformer k must be at least 1".into());
            }
        }
        if self.input_dims == 0 {
            return err("input_dims must be positive".into());
        }
        if let Some(cs) = &self.channel_split {
            if cs.edgeconv_dims == 0 || cs.shared_dims == 0 {
                return err("channel split widths must be positive".into());
            }
            if cs.edgeconv_dims > self.input_dims || cs.shared_dims > self.input_dims {
                return err(format!(
                    "channel split ({}, {}) exceeds input_dims {}",
                    cs.edgeconv_dims, cs.shared_dims, self.input_dims
                ));
            }
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

fn default_k() -> usize {
    20
}

fn default_input_dims() -> usize {
    3
}

fn default_aggregate_width() -> usize {
    1024
}

fn default_head_widths() -> Vec<usize> {
    vec![512, 256]
}

fn default_seg_head_widths() -> Vec<usize> {
    vec![512, 256, 128]
}

fn default_dropout() -> f64 {
    0.5
}

fn default_transformer_widths() -> Vec<usize> {
    vec![64, 128, 1024]
}

fn default_transformer_head() -> Vec<usize> {
    vec![512, 256]
}

fn default_transformer() -> Option<TransformerConfig> {
    Some(TransformerConfig::default())
}

/// The reference classification architecture: four trunk layers at widths
/// 64/64/128/256, shared k.
pub fn reference_classify(num_classes: usize, k: usize) -> ModelConfig {
    ModelConfig {
        task: Task::Classify,
        variant: Variant::Sawnet,
        input_dims: 3,
        trunk: [64, 64, 128, 256]
            .into_iter()
            .map(|m| SawLayerConfig {
                branch_width: m,
                k,
                post_add_activation: true,
            })
            .collect(),
        aggregate_width: default_aggregate_width(),
        head_widths: default_head_widths(),
        dropout: default_dropout(),
        num_classes: Some(num_classes),
        parts: None,
        seg_head_widths: default_seg_head_widths(),
        transformer: Some(TransformerConfig {
            k,
            ..TransformerConfig::default()
        }),
        channel_split: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        let mut cfg = reference_classify(3, 4);
        cfg.trunk.truncate(2);
        for l in &mut cfg.trunk {
            l.branch_width = 8;
        }
        cfg
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let cfg = toy();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"task":"classify","trunk":[{"branch_width":8,"k":4}],
                       "num_classes":3,"bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(text).is_err());
    }

    #[test]
    fn variant_names_serialize_snake_case() {
        assert_eq!(
            serde_json::to_string(&Variant::CombineAtEnd).unwrap(),
            "\"combine_at_end\""
        );
        assert_eq!(
            serde_json::to_string(&Variant::CombinePerLayerNoResidual).unwrap(),
            "\"combine_per_layer_no_residual\""
        );
    }

    #[test]
    fn omitted_transformer_defaults_on_null_disables() {
        let text = r#"{"task":"classify","trunk":[{"branch_width":8,"k":4}],"num_classes":3}"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        assert!(cfg.transformer.is_some());

        let text =
            r#"{"task":"classify","trunk":[{"branch_width":8,"k":4}],"num_classes":3,"transformer":null}"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        assert!(cfg.transformer.is_none());
    }

    #[test]
    fn validation_catches_task_mismatches() {
        let mut cfg = toy();
        cfg.num_classes = None;
        assert!(cfg.validate().is_err());

        let mut cfg = toy();
        cfg.task = Task::Segment;
        cfg.parts = Some(4);
        cfg.variant = Variant::CombineAtEnd;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("combine_at_end"), "{err}");

        cfg.variant = Variant::Sawnet;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn validation_checks_channel_split_bounds() {
        let mut cfg = toy();
        cfg.channel_split = Some(ChannelSplit {
            edgeconv_dims: 3,
            shared_dims: 9,
        });
        assert!(cfg.validate().is_err());
        cfg.input_dims = 9;
        assert!(cfg.validate().is_ok());
    }
}

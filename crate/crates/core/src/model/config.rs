use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder stages (and pyramid levels).
pub const STAGES: usize = 4;

/// Architecture hyperparameters.
///
/// Field names are the JSON keys of config files and checkpoint sidecars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub bridge_depth: usize,
    pub bridge_ratio: usize,
    pub ffn_expansion: usize,
    pub image_size: usize,
    /// Feed the decoder's skip connections from the raw encoder features
    /// instead of the bridge output (ablation switch).
    pub skips_from_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 3,
            embed_dims: vec![16, 32, 64, 128],
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            sr_ratios: vec![8, 4, 2, 1],
            bridge_depth: 4,
            bridge_ratio: 1,
            ffn_expansion: 4,
            image_size: 64,
            skips_from_encoder: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks: widths [8,16,32,64],
    /// one block per stage, one bridge block, 32×32 input. Reduction
    /// ratios are lowered so that stages 1–3 still attend over several
    /// keys (with a single key the query and key weights get no gradient).
    pub fn toy() -> Self {
        ModelConfig {
            embed_dims: vec![8, 16, 32, 64],
            depths: vec![1, 1, 1, 1],
            sr_ratios: vec![4, 2, 1, 1],
            bridge_depth: 1,
            image_size: 32,
            ..ModelConfig::default()
        }
    }

    /// Side length of the stage-`i` token grid (`i` from 0).
    pub fn grid(&self, stage: usize) -> usize {
        self.image_size >> (stage + 2)
    }

    /// Token count of pyramid level `i` (`i` from 0).
    pub fn level_tokens(&self, stage: usize) -> usize {
        self.grid(stage) * self.grid(stage)
    }

    /// Lengths of the per-level segments of the bridge sequence, each
    /// level re-viewed at width `C1`.
    pub fn bridge_segments(&self) -> Vec<usize> {
        let c1 = self.embed_dims[0];
        (0..STAGES)
            .map(|i| self.level_tokens(i) * self.embed_dims[i] / c1)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("embed_dims", &self.embed_dims),
            ("depths", &self.depths),
            ("heads", &self.heads),
            ("sr_ratios", &self.sr_ratios),
        ] {
            if v.len() != STAGES {
                return bad(format!("{name} must have {STAGES} entries, got {}", v.len()));
            }
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            ));
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        let c1 = self.embed_dims[0];
        for i in 0..STAGES {
            let (c, h, r) = (self.embed_dims[i], self.heads[i], self.sr_ratios[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!("stage {}: width {c} not divisible by {h} heads", i + 1));
            }
            if c % c1 != 0 {
                return bad(format!(
                    "stage {}: width {c} not divisible by the stage-1 width {c1}",
                    i + 1
                ));
            }
            if r == 0 || self.grid(i) % r != 0 {
                return bad(format!(
                    "stage {}: reduction ratio {r} does not divide the {}x{} grid",
                    i + 1,
                    self.grid(i),
                    self.grid(i)
                ));
            }
            if i > 0 && c % 2 != 0 {
                return bad(format!("stage {}: width {c} must be even for x2 expansion", i + 1));
            }
        }
        if c1 % self.heads[0] != 0 {
            return bad("bridge width not divisible by stage-1 heads".into());
        }
        let total: usize = self.bridge_segments().iter().sum();
        if self.bridge_ratio == 0 || total % self.bridge_ratio != 0 {
            return bad(format!(
                "bridge_ratio {} does not divide the bridge sequence length {total}",
                self.bridge_ratio
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn default_bridge_segments() {
        // L_i·C_i/C1 with L = 256, 64, 16, 4 and C = 16, 32, 64, 128.
        assert_eq!(ModelConfig::default().bridge_segments(), vec![256, 128, 64, 32]);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            ModelConfig { image_size: 48, ..Default::default() },
            ModelConfig { heads: vec![3, 2, 4, 8], ..Default::default() },
            ModelConfig { embed_dims: vec![16, 24, 64, 128], heads: vec![1, 1, 1, 1], ..Default::default() },
            ModelConfig { sr_ratios: vec![3, 4, 2, 1], ..Default::default() },
            ModelConfig { depths: vec![1, 1, 1], ..Default::default() },
            ModelConfig { bridge_ratio: 7, ..Default::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn json_uses_field_names() {
        let json = serde_json::to_value(ModelConfig::default()).unwrap();
        for key in [
            "in_channels",
            "num_classes",
            "embed_dims",
            "depths",
            "heads",
            "sr_ratios",
            "bridge_depth",
            "bridge_ratio",
            "ffn_expansion",
            "image_size",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let partial: ModelConfig = serde_json::from_str(r#"{"num_classes": 1}"#).unwrap();
        assert_eq!(partial.num_classes, 1);
        assert_eq!(partial.embed_dims, vec![16, 32, 64, 128]);
    }
}

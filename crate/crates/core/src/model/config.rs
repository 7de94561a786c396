use crate::error::{Error, Result};

/// Which encoder blocks carry the sparse feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub enum MoePlacement {
    /// Blocks 1, 3, 5, ...
    EveryOther,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub moe_placement: MoePlacement,
    pub num_experts: usize,
    pub top_k: usize,
    pub capacity_factor: f64,
    /// Weight of the balance loss in the pretraining objective.
    pub aux_weight: f64,
    /// Feed-forward strategy for the sparse blocks (`moe`, or `dense` to disable MoE).
    pub sparse_ffn: String,
    /// Feed-forward strategy for every other block.
    pub dense_ffn: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            moe_placement: MoePlacement::EveryOther,
            num_experts: 8,
            top_k: 1,
            capacity_factor: 1.25,
            aux_weight: 0.01,
            sparse_ffn: "moe".into(),
            dense_ffn: "dense".into(),
        }
    }
}

impl EncoderConfig {
    pub fn moe_blocks(&self) -> Vec<usize> {
        match &self.moe_placement {
            MoePlacement::EveryOther => (1..self.depth).step_by(2).collect(),
            MoePlacement::Explicit(v) => v.clone(),
        }
    }

    pub fn ffn_kind(&self, block: usize) -> &str {
        if self.moe_blocks().contains(&block) {
            &self.sparse_ffn
        } else {
            &self.dense_ffn
        }
    }

    pub fn moe_enabled(&self) -> bool {
        (0..self.depth).any(|b| self.ffn_kind(b) == "moe")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub mask_unit: usize,
    pub mask_ratio: f64,
    pub init_std: f64,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            height: 64,
            patch_size: 8,
            embed_dim: 64,
            mask_unit: 32,
            mask_ratio: 0.6,
            init_std: 0.02,
            encoder: EncoderConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse `{}`", key, value)))
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        (self.width / self.patch_size) * (self.height / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.width % self.patch_size != 0 || self.height % self.patch_size != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                self.width, self.height, self.patch_size
            ));
        }
        if self.mask_unit == 0 || self.mask_unit % self.patch_size != 0 {
            return fail(format!("mask unit {} not a multiple of patch size {}", self.mask_unit, self.patch_size));
        }
        if self.width % self.mask_unit != 0 || self.height % self.mask_unit != 0 {
            return fail(format!("image {}x{} not divisible by mask unit {}", self.width, self.height, self.mask_unit));
        }
        if (self.width / self.mask_unit) * (self.height / self.mask_unit) < 2 {
            return fail("image must hold at least two mask units".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.embed_dim == 0 || e.heads == 0 || self.embed_dim % e.heads != 0 {
            return fail(format!("embed dim {} not divisible by {} heads", self.embed_dim, e.heads));
        }
        if e.top_k != 1 {
            return fail(format!("top_k must be 1, got {}", e.top_k));
        }
        if !(e.capacity_factor >= 1.0) {
            return fail(format!("capacity factor {} below 1", e.capacity_factor));
        }
        if e.num_experts == 0 {
            return fail("num_experts must be at least 1".into());
        }
        if e.mlp_ratio == 0 {
            return fail("mlp_ratio must be at least 1".into());
        }
        if let Some(b) = e.moe_blocks().iter().find(|&&b| b >= e.depth) {
            return fail(format!("MoE block {} outside depth {}", b, e.depth));
        }
        if !(e.aux_weight >= 0.0) {
            return fail("aux_weight must be non-negative".into());
        }
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "model.width" => self.width = parse(key, value)?,
            "model.height" => self.height = parse(key, value)?,
            "model.image_size" => {
                self.width = parse(key, value)?;
                self.height = self.width;
            }
            "model.patch_size" => self.patch_size = parse(key, value)?,
            "model.embed_dim" => self.embed_dim = parse(key, value)?,
            "model.mask_unit" => self.mask_unit = parse(key, value)?,
            "model.mask_ratio" => self.mask_ratio = parse(key, value)?,
            "model.init_std" => self.init_std = parse(key, value)?,
            "encoder.depth" => e.depth = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "encoder.moe_blocks" => {
                e.moe_placement = match value.trim() {
                    "every_other" => MoePlacement::EveryOther,
                    "" | "none" => MoePlacement::Explicit(vec![]),
                    list => MoePlacement::Explicit(
                        list.split(',').map(|x| parse(key, x)).collect::<Result<Vec<usize>>>()?,
                    ),
                }
            }
            "encoder.num_experts" => e.num_experts = parse(key, value)?,
            "encoder.top_k" => e.top_k = parse(key, value)?,
            "encoder.capacity_factor" => e.capacity_factor = parse(key, value)?,
            "encoder.aux_weight" => e.aux_weight = parse(key, value)?,
            "encoder.sparse_ffn" => e.sparse_ffn = value.trim().to_string(),
            "encoder.dense_ffn" => e.dense_ffn = value.trim().to_string(),
            _ => return Err(Error::Config(format!("unknown key `{}`", key))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        let blocks = match &e.moe_placement {
            MoePlacement::EveryOther => "every_other".to_string(),
            MoePlacement::Explicit(v) if v.is_empty() => "none".to_string(),
            MoePlacement::Explicit(v) => v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        };
        [
            ("model.width", self.width.to_string()),
            ("model.height", self.height.to_string()),
            ("model.patch_size", self.patch_size.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.mask_unit", self.mask_unit.to_string()),
            ("model.mask_ratio", self.mask_ratio.to_string()),
            ("model.init_std", self.init_std.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.moe_blocks", blocks),
            ("encoder.num_experts", e.num_experts.to_string()),
            ("encoder.top_k", e.top_k.to_string()),
            ("encoder.capacity_factor", e.capacity_factor.to_string()),
            ("encoder.aux_weight", e.aux_weight.to_string()),
            ("encoder.sparse_ffn", e.sparse_ffn.clone()),
            ("encoder.dense_ffn", e.dense_ffn.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got `{}`", line)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_pretraining_table() {
        let c = ModelConfig::default();
        assert_eq!(c.mask_unit, 32);
        assert_eq!(c.mask_ratio, 0.6);
        assert_eq!(c.encoder.num_experts, 8);
        assert_eq!(c.encoder.top_k, 1);
        assert_eq!(c.encoder.capacity_factor, 1.25);
        assert_eq!(c.encoder.aux_weight, 0.01);
        assert_eq!(c.encoder.moe_blocks(), vec![1, 3, 5, 7]);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.set("encoder.moe_blocks", "0,2").unwrap();
        c.set("model.mask_ratio", "0.45").unwrap();
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(c.set("model.bogus", "1").is_err());
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut c = ModelConfig::default();
        c.encoder.top_k = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.embed_dim = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.moe_placement = MoePlacement::Explicit(vec![9]);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.capacity_factor = 0.5;
        assert!(c.validate().is_err());
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, format_err, Result};
use crate::pmd::{DiffusionConfig, DwtMode, PmdGradient, Preprocess};

/// Widths and depths of the four encoder stages. Stage `i` (from 1) runs at
/// `1/2^(i+1)` of the input resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub widths: [usize; 4],
    pub pmd_blocks: [usize; 4],
    pub vim_blocks: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan { widths: [16, 32, 64, 128], pmd_blocks: [3, 4, 6, 3], vim_blocks: 2 }
    }
}

impl StagePlan {
    /// The smallest plan the gradient checks run on.
    pub fn micro() -> Self {
        StagePlan { widths: [4, 8, 16, 32], ..StagePlan::default() }
    }

    /// Downsampling factor of stage `i` (0-based).
    pub fn scale(i: usize) -> usize {
        4 << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!("stage widths {:?} must be positive and strictly increasing", self.widths));
        }
        if self.pmd_blocks.contains(&0) {
            return Err(config_err!("every stage needs at least one diffusion block"));
        }
        Ok(())
    }
}

/// What the diffusion branch does before each residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    NoPmd,
    Sobel,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoPmd, Variant::Sobel];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoPmd => "no-pmd",
            Variant::Sobel => "sobel",
        })
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-pmd" => Ok(Variant::NoPmd),
            "sobel" => Ok(Variant::Sobel),
            _ => Err(config_err!("unknown variant `{s}` (expected full, no-pmd or sobel)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input extent; must be a multiple of 32.
    pub image_size: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub plan: StagePlan,
    /// Common width of the top-down decoder.
    pub head_width: usize,
    pub variant: Variant,
    pub diffusion: DiffusionConfig,
    pub pmd_grad: PmdGradient,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 1,
            classes: 2,
            plan: StagePlan::default(),
            head_width: 32,
            variant: Variant::Full,
            diffusion: DiffusionConfig::default(),
            pmd_grad: PmdGradient::Exact,
        }
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_err!("`{key}` must be four comma-separated integers, got `{v}`"))?;
    parts.try_into().map_err(|_| config_err!("`{key}` must have exactly four entries, got `{v}`"))
}

impl ModelConfig {
    pub fn micro() -> Self {
        ModelConfig { image_size: 32, plan: StagePlan::micro(), head_width: 8, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(crate::error::dim_err!("input extent {} is not a multiple of 32", self.image_size));
        }
        if self.classes < 2 || self.in_channels == 0 || self.head_width == 0 {
            return Err(config_err!("need at least two classes, one input channel and a positive head width"));
        }
        if self.variant == Variant::Full {
            self.diffusion.validate_dwt()?;
        }
        Ok(())
    }

    pub fn preprocess(&self) -> Preprocess {
        match self.variant {
            Variant::Full => Preprocess::Diffuse(self.diffusion.clone(), self.pmd_grad),
            Variant::NoPmd => Preprocess::Identity,
            Variant::Sobel => Preprocess::Sobel,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mode = match self.diffusion.mode {
            DwtMode::Attenuate => "attenuate",
            DwtMode::AsWritten => "as-written",
        };
        let grad = match self.pmd_grad {
            PmdGradient::Exact => "exact",
            PmdGradient::StraightThrough => "straight-through",
        };
        [
            ("image_size", self.image_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("classes", self.classes.to_string()),
            ("widths", join(&self.plan.widths)),
            ("pmd_blocks", join(&self.plan.pmd_blocks)),
            ("vim_blocks", self.plan.vim_blocks.to_string()),
            ("head_width", self.head_width.to_string()),
            ("variant", self.variant.to_string()),
            ("pmd_k", self.diffusion.k.to_string()),
            ("pmd_steps", self.diffusion.steps.to_string()),
            ("pmd_mode", mode.to_string()),
            ("pmd_grad", grad.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str).ok_or_else(|| config_err!("model config lacks `{k}`"));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| config_err!("`{k}` must be a non-negative integer"))
        };
        let cfg = ModelConfig {
            image_size: num("image_size")?,
            in_channels: num("in_channels")?,
            classes: num("classes")?,
            plan: StagePlan {
                widths: parse_four("widths", get("widths")?)?,
                pmd_blocks: parse_four("pmd_blocks", get("pmd_blocks")?)?,
                vim_blocks: num("vim_blocks")?,
            },
            head_width: num("head_width")?,
            variant: get("variant")?.parse()?,
            diffusion: DiffusionConfig {
                k: get("pmd_k")?.parse().map_err(|_| config_err!("`pmd_k` must be a number"))?,
                steps: num("pmd_steps")?,
                dt: 1.0,
                mode: match get("pmd_mode")? {
                    "attenuate" => DwtMode::Attenuate,
                    "as-written" => DwtMode::AsWritten,
                    m => return Err(config_err!("unknown diffusion mode `{m}`")),
                },
            },
            pmd_grad: match get("pmd_grad")? {
                "exact" => PmdGradient::Exact,
                "straight-through" => PmdGradient::StraightThrough,
                g => return Err(config_err!("unknown diffusion gradient `{g}`")),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, write_pairs(&self.to_pairs()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pairs(&read_pairs(&fs::read_to_string(path)?)?)
    }
}

/// `key=value` lines.
pub fn write_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn read_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| format_err!("expected key=value, got `{line}`"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let cfg = ModelConfig { variant: Variant::Sobel, ..ModelConfig::micro() };
        let text = write_pairs(&cfg.to_pairs());
        assert_eq!(ModelConfig::from_pairs(&read_pairs(&text).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn plan_checks() {
        assert!(StagePlan::default().validate().is_ok());
        let bad = StagePlan { widths: [16, 16, 32, 64], ..StagePlan::default() };
        assert!(bad.validate().is_err());
        assert!(matches!("dense".parse::<Variant>(), Err(crate::Error::Config(_))));
        assert!(ModelConfig { image_size: 48, ..ModelConfig::default() }.validate().is_err());
        assert_eq!((0..4).map(StagePlan::scale).collect::<Vec<_>>(), [4, 8, 16, 32]);
    }
}

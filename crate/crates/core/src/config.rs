//! Model shapes, sparse strategies and presets.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layout::DEFAULT_T_OUT;
use crate::sparse::{LayerSpec, PackFormat, SparsityLevel};

/// Per-layer-type sparsity assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Strategy {
    Dense,
    #[cfg_attr(feature = "serde", serde(rename = "1"))]
    S1,
    #[cfg_attr(feature = "serde", serde(rename = "2"))]
    S2,
    #[cfg_attr(feature = "serde", serde(rename = "3"))]
    S3,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Dense, Strategy::S1, Strategy::S2, Strategy::S3];

    /// Levels of (Q/K/V, O, h→4h, 4h→h).
    pub fn levels(self) -> [SparsityLevel; 4] {
        use SparsityLevel::*;
        match self {
            Strategy::Dense => [Dense, Dense, Dense, Dense],
            Strategy::S1 => [Dense, S50, S50, S50],
            Strategy::S2 => [Dense, S50, S75, S50],
            Strategy::S3 => [Dense, S50, S75, S75],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dense => "dense",
            Strategy::S1 => "1",
            Strategy::S2 => "2",
            Strategy::S3 => "3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" | "0" => Ok(Strategy::Dense),
            "1" | "s1" => Ok(Strategy::S1),
            "2" | "s2" => Ok(Strategy::S2),
            "3" | "s3" => Ok(Strategy::S3),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown strategy {s:?}"))),
        }
    }
}

/// Which head dimensions rotate and how they pair up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RotaryStyle {
    /// First half of each head rotates, adjacent pairs `(2i, 2i+1)`.
    GlmHalf,
    /// Whole head rotates, pairs `(i, i + d/2)`.
    NeoxFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub name: String,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Width of each FFN branch (gate and up).
    pub ffn: usize,
    pub layers: usize,
    pub vocab: usize,
    pub max_token: usize,
    pub strategy: Strategy,
    pub rotary: RotaryStyle,
    pub rope_theta: f64,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub t_out: usize,
}

impl ModelConfig {
    pub fn glm6b() -> Self {
        Self {
            name: "glm6b".into(),
            hidden: 4096,
            heads: 32,
            kv_heads: 2,
            head_dim: 128,
            ffn: 13696,
            layers: 28,
            vocab: 65024,
            max_token: 1024,
            strategy: Strategy::Dense,
            rotary: RotaryStyle::GlmHalf,
            rope_theta: 10000.0,
            norm: NormKind::Rms,
            norm_eps: 1e-5,
            t_out: DEFAULT_T_OUT,
        }
    }

    pub fn qwen7b() -> Self {
        Self {
            name: "qwen7b".into(),
            hidden: 4096,
            heads: 32,
            kv_heads: 4,
            head_dim: 128,
            ffn: 11008,
            layers: 32,
            vocab: 151936,
            max_token: 1024,
            strategy: Strategy::Dense,
            rotary: RotaryStyle::NeoxFull,
            rope_theta: 10000.0,
            norm: NormKind::Rms,
            norm_eps: 1e-6,
            t_out: DEFAULT_T_OUT,
        }
    }

    /// Two small layers for end-to-end functional runs.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            hidden: 64,
            heads: 2,
            kv_heads: 1,
            head_dim: 32,
            ffn: 128,
            layers: 2,
            vocab: 256,
            max_token: 64,
            strategy: Strategy::S2,
            rotary: RotaryStyle::GlmHalf,
            rope_theta: 10000.0,
            norm: NormKind::Rms,
            norm_eps: 1e-5,
            t_out: DEFAULT_T_OUT,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "glm6b" => Ok(Self::glm6b()),
            "qwen7b" => Ok(Self::qwen7b()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown preset {name:?}"))),
        }
    }

    pub fn with_strategy(mut self, s: Strategy) -> Self {
        self.strategy = s;
        self
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("ffn", self.ffn),
            ("layers", self.layers),
            ("vocab", self.vocab),
            ("max_token", self.max_token),
            ("t_out", self.t_out),
        ];
        for (n, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(alloc::format!("{n} must be positive")));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::InvalidConfig(alloc::format!(
                "heads × head_dim = {} differs from hidden {}",
                self.heads * self.head_dim,
                self.hidden
            )));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidConfig("heads must be a multiple of kv_heads".into()));
        }
        if !self.head_dim.is_multiple_of(4) {
            return Err(Error::InvalidConfig("head_dim must be a multiple of 4".into()));
        }
        if !self.head_dim.is_multiple_of(self.t_out) {
            return Err(Error::InvalidConfig("head_dim must be a multiple of t_out".into()));
        }
        if !(self.t_out * 2).is_multiple_of(32) {
            return Err(Error::InvalidConfig("t_out must fill whole 256-bit beats".into()));
        }
        if self.max_token > 1 << 20 {
            return Err(Error::InvalidConfig("max_token above 2^20".into()));
        }
        Ok(())
    }

    /// Weight matrices of one block.
    pub fn block_layers(&self, layer: usize) -> Vec<LayerSpec> {
        let [qkv, o, up, down] = self.strategy.levels().map(PackFormat::for_level);
        let p = |n: &str| alloc::format!("l{layer}.{n}");
        alloc::vec![
            LayerSpec::new(p("q"), self.hidden, self.hidden, qkv),
            LayerSpec::new(p("k"), self.hidden, self.kv_dim(), qkv),
            LayerSpec::new(p("v"), self.hidden, self.kv_dim(), qkv),
            LayerSpec::new(p("o"), self.hidden, self.hidden, o),
            LayerSpec::new(p("gate"), self.hidden, self.ffn, up),
            LayerSpec::new(p("up"), self.hidden, self.ffn, up),
            LayerSpec::new(p("down"), self.ffn, self.hidden, down),
        ]
    }

    pub fn outlayer(&self) -> LayerSpec {
        LayerSpec::new("out", self.hidden, self.vocab, PackFormat::DENSE)
    }

    pub fn all_layers(&self) -> Vec<LayerSpec> {
        let mut v: Vec<LayerSpec> = (0..self.layers).flat_map(|l| self.block_layers(l)).collect();
        v.push(self.outlayer());
        v
    }

    /// One block's matrices as the size table lists them: the two FFN
    /// input branches form a single h→4h matrix.
    pub fn block_size_specs(&self) -> Vec<LayerSpec> {
        let l = self.block_layers(0);
        let name = |s: &LayerSpec| String::from(s.name.trim_start_matches("l0."));
        let mut v: Vec<LayerSpec> =
            l[..4].iter().map(|s| LayerSpec::new(name(s), s.ch_in, s.ch_out, s.format)).collect();
        v.push(LayerSpec::new("h_to_4h", self.hidden, 2 * self.ffn, l[4].format));
        v.push(LayerSpec::new("4h_to_h", self.ffn, self.hidden, l[6].format));
        v
    }
}

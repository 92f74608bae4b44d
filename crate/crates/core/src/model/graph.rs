//! Declarative layer graph of the three network variants.
//!
//! A graph lists every convolution (with its phase tag), every residual block
//! (stage, branch, activation, ε) and the channel concatenations. Weights live
//! elsewhere; see [`super::PgtNet`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::policy::{PolicyKind, ScalingPolicy, StageNumbering};

pub const SHARED_BLOCKS: usize = 24;
pub const BINARY_BLOCKS: usize = 36;
pub const MAIN_BLOCKS: usize = 24;
pub const EDGE_WIDE_BLOCKS: usize = 28;
pub const EDGE_NARROW_BLOCKS: usize = 4;
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared trunk, sigmoid binary branch guiding a relu main branch.
    Block84Multitask,
    /// One serial chain of 84 relu blocks, main output only.
    Block84SingleTask,
    /// 32 relu blocks, narrowing from the base width to half of it.
    Edge,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Block84Multitask,
        Variant::Block84SingleTask,
        Variant::Edge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Block84Multitask => "block84_multitask",
            Variant::Block84SingleTask => "block84_single_task",
            Variant::Edge => "edge",
        }
    }

    pub fn is_multitask(self) -> bool {
        self == Variant::Block84Multitask
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Block84Multitask => 0,
            Variant::Block84SingleTask => 1,
            Variant::Edge => 2,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == t)
            .ok_or_else(|| Error::Format(format!("unknown variant tag {t}")))
    }

    /// Default width: 64 for the block-84 variants, 32 for Edge.
    pub fn default_channels(self) -> usize {
        match self {
            Variant::Edge => 32,
            _ => 64,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "block84_multitask" | "multitask" | "block84" => Ok(Variant::Block84Multitask),
            "block84_single_task" | "block84_singletask" | "single_task" | "singletask" => {
                Ok(Variant::Block84SingleTask)
            }
            "edge" => Ok(Variant::Edge),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected block84_multitask, block84_single_task or edge)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Shared,
    Binary,
    Main,
    /// The single chain of the single-task and Edge variants.
    Trunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in ±1/√fan_in, for relu paths and linear glue.
    FanIn,
    /// Uniform in ±√(6/(fan_in+fan_out)), for sigmoid blocks.
    Xavier,
}

/// One 3×3 same-padded convolution with bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Updated during phase 1 of two-phase training.
    pub phase1: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn bias_shape(&self) -> [usize; 4] {
        [1, self.out_channels, 1, 1]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Residual block `x + ε·conv2(act(conv1(x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub stage: usize,
    pub branch: Branch,
    pub channels: usize,
    pub activation: Activation,
    pub epsilon: f64,
    pub conv1: usize,
    pub conv2: usize,
}

/// A channel concatenation followed by a projecting convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatEdge {
    pub sources: Vec<String>,
    pub adapter: usize,
}

/// Indices of the non-block convolutions.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Glue {
    pub stem: [usize; 2],
    pub binary_adapter: Option<usize>,
    pub binary_head: Option<usize>,
    pub main_in_adapter: Option<usize>,
    pub transition: Option<usize>,
    pub out_adapter: usize,
    pub head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub variant: Variant,
    pub policy: ScalingPolicy,
    pub base_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub blocks: Vec<BlockSpec>,
    pub concats: Vec<ConcatEdge>,
    pub(crate) glue: Glue,
}

/// One row of the per-layer parameter breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub weight_shape: [usize; 4],
    pub params: usize,
    pub phase1: bool,
}

struct Builder {
    policy: ScalingPolicy,
    convs: Vec<ConvSpec>,
    blocks: Vec<BlockSpec>,
    phase1: bool,
}

impl Builder {
    fn conv(&mut self, name: String, cin: usize, cout: usize, init: Init) -> usize {
        self.convs.push(ConvSpec {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel: KERNEL,
            phase1: self.phase1,
            init,
        });
        self.convs.len() - 1
    }

    fn blocks(
        &mut self,
        branch: Branch,
        stages: std::ops::RangeInclusive<usize>,
        channels: usize,
        act: Activation,
    ) {
        let prefix = match branch {
            Branch::Shared => "shared",
            Branch::Binary => "binary",
            Branch::Main => "main",
            Branch::Trunk => "trunk",
        };
        let init = match act {
            Activation::Relu => Init::FanIn,
            Activation::Sigmoid => Init::Xavier,
        };
        for stage in stages {
            let c1 = self.conv(
                format!("{prefix}.s{stage:02}.conv1"),
                channels,
                channels,
                init,
            );
            let c2 = self.conv(
                format!("{prefix}.s{stage:02}.conv2"),
                channels,
                channels,
                init,
            );
            self.blocks.push(BlockSpec {
                stage,
                branch,
                channels,
                activation: act,
                epsilon: self.policy.epsilon(stage),
                conv1: c1,
                conv2: c2,
            });
        }
    }
}

/// Builds the layer graph of `variant` at width `base_channels`.
pub fn build(variant: Variant, policy: ScalingPolicy, base_channels: usize) -> Result<ModelGraph> {
    policy.validate()?;
    if base_channels < 8 {
        return Err(Error::InvalidArgument(format!(
            "base_channels must be ≥ 8, got {base_channels}"
        )));
    }
    if variant == Variant::Edge && base_channels % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "edge variant halves its width; base_channels {base_channels} must be even"
        )));
    }
    let c = base_channels;
    let mut b = Builder {
        policy,
        convs: Vec::new(),
        blocks: Vec::new(),
        phase1: variant.is_multitask(),
    };
    let stem = [
        b.conv("stem.conv1".into(), 1, c, Init::FanIn),
        b.conv("stem.conv2".into(), c, c, Init::FanIn),
    ];
    let mut concats = Vec::new();
    let glue = match variant {
        Variant::Block84Multitask => {
            b.blocks(Branch::Shared, 1..=SHARED_BLOCKS, c, Activation::Relu);
            let bin_start = SHARED_BLOCKS + 1;
            let bin_end = SHARED_BLOCKS + BINARY_BLOCKS;
            b.blocks(Branch::Binary, bin_start..=bin_end, c, Activation::Sigmoid);
            let binary_adapter = b.conv("binary.adapter".into(), 2 * c, c, Init::FanIn);
            let binary_head = b.conv("binary.head".into(), c, 1, Init::Xavier);
            concats.push(ConcatEdge {
                sources: vec!["binary.blocks".into(), "bfm".into()],
                adapter: binary_adapter,
            });
            b.phase1 = false;
            let main_in_adapter = b.conv("main.adapter_in".into(), c + 1, c, Init::FanIn);
            concats.push(ConcatEdge {
                sources: vec!["shared.blocks".into(), "binary.out".into()],
                adapter: main_in_adapter,
            });
            let main_start = match policy.numbering {
                StageNumbering::Parallel => SHARED_BLOCKS + 1,
                StageNumbering::Sequential => bin_end + 1,
            };
            b.blocks(
                Branch::Main,
                main_start..=main_start + MAIN_BLOCKS - 1,
                c,
                Activation::Relu,
            );
            let out_adapter = b.conv("main.adapter_out".into(), 2 * c, c, Init::FanIn);
            concats.push(ConcatEdge {
                sources: vec!["main.blocks".into(), "bfm".into()],
                adapter: out_adapter,
            });
            let head = b.conv("main.head".into(), c, 1, Init::FanIn);
            Glue {
                stem,
                binary_adapter: Some(binary_adapter),
                binary_head: Some(binary_head),
                main_in_adapter: Some(main_in_adapter),
                transition: None,
                out_adapter,
                head,
            }
        }
        Variant::Block84SingleTask => {
            let n = SHARED_BLOCKS + BINARY_BLOCKS + MAIN_BLOCKS;
            b.blocks(Branch::Trunk, 1..=n, c, Activation::Relu);
            let out_adapter = b.conv("trunk.adapter_out".into(), 2 * c, c, Init::FanIn);
            concats.push(ConcatEdge {
                sources: vec!["trunk.blocks".into(), "bfm".into()],
                adapter: out_adapter,
            });
            let head = b.conv("trunk.head".into(), c, 1, Init::FanIn);
            Glue {
                stem,
                binary_adapter: None,
                binary_head: None,
                main_in_adapter: None,
                transition: None,
                out_adapter,
                head,
            }
        }
        Variant::Edge => {
            let narrow = c / 2;
            b.blocks(Branch::Trunk, 1..=EDGE_WIDE_BLOCKS, c, Activation::Relu);
            let transition = b.conv("trunk.transition".into(), c, narrow, Init::FanIn);
            let last = EDGE_WIDE_BLOCKS + EDGE_NARROW_BLOCKS;
            b.blocks(
                Branch::Trunk,
                EDGE_WIDE_BLOCKS + 1..=last,
                narrow,
                Activation::Relu,
            );
            let out_adapter = b.conv("trunk.adapter_out".into(), narrow + c, narrow, Init::FanIn);
            concats.push(ConcatEdge {
                sources: vec!["trunk.blocks".into(), "bfm".into()],
                adapter: out_adapter,
            });
            let head = b.conv("trunk.head".into(), narrow, 1, Init::FanIn);
            Glue {
                stem,
                binary_adapter: None,
                binary_head: None,
                main_in_adapter: None,
                transition: Some(transition),
                out_adapter,
                head,
            }
        }
    };
    if policy.kind == PolicyKind::AllPositive {
        if let Some(bad) = b.blocks.iter().find(|bl| bl.epsilon <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{policy} gives ε = {} at stage {} of {variant}",
                bad.epsilon, bad.stage
            )));
        }
    }
    Ok(ModelGraph {
        variant,
        policy,
        base_channels,
        convs: b.convs,
        blocks: b.blocks,
        concats,
        glue,
    })
}

impl ModelGraph {
    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(ConvSpec::param_count).sum()
    }

    pub fn phase1_parameter_count(&self) -> usize {
        self.convs
            .iter()
            .filter(|c| c.phase1)
            .map(ConvSpec::param_count)
            .sum()
    }

    pub fn breakdown(&self) -> Vec<LayerRow> {
        self.convs
            .iter()
            .map(|c| LayerRow {
                name: c.name.clone(),
                weight_shape: c.weight_shape(),
                params: c.param_count(),
                phase1: c.phase1,
            })
            .collect()
    }

    pub fn blocks_in(&self, branch: Branch) -> impl Iterator<Item = &BlockSpec> {
        self.blocks.iter().filter(move |b| b.branch == branch)
    }

    pub fn sigmoid_blocks(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.activation == Activation::Sigmoid)
            .count()
    }

    pub fn has_binary_output(&self) -> bool {
        self.glue.binary_head.is_some()
    }

    /// `true` when the binary head output feeds the first main-branch block.
    pub fn binary_guides_main(&self) -> bool {
        self.concats
            .iter()
            .any(|e| e.sources.iter().any(|s| s == "binary.out"))
    }

    /// Names of each parameter tensor in container order: `<conv>.weight`, `<conv>.bias`.
    pub fn parameter_names(&self) -> Vec<String> {
        self.convs
            .iter()
            .flat_map(|c| [format!("{}.weight", c.name), format!("{}.bias", c.name)])
            .collect()
    }

    /// Human-readable layer and ε report.
    pub fn describe(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "variant        {}", self.variant);
        let _ = writeln!(s, "policy         {}", self.policy);
        let _ = writeln!(s, "base channels  {}", self.base_channels);
        let _ = writeln!(
            s,
            "blocks         {} ({} sigmoid, {} relu)",
            self.blocks.len(),
            self.sigmoid_blocks(),
            self.blocks.len() - self.sigmoid_blocks()
        );
        let _ = writeln!(s, "parameters     {}", self.parameter_count());
        let _ = writeln!(s, "phase-1 params {}", self.phase1_parameter_count());
        let _ = writeln!(s, "\nstage  branch  ch   act      epsilon");
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:>5}  {:<6}  {:>3}  {:<7}  {:+.2}",
                b.stage,
                format!("{:?}", b.branch).to_ascii_lowercase(),
                b.channels,
                format!("{:?}", b.activation).to_ascii_lowercase(),
                b.epsilon
            );
        }
        let _ = writeln!(s, "\nconcat edges");
        for e in &self.concats {
            let _ = writeln!(
                s,
                "  [{}] -> {}",
                e.sources.join(" ++ "),
                self.convs[e.adapter].name
            );
        }
        let _ = writeln!(
            s,
            "\nlayer                         weight shape       params  phase1"
        );
        for r in self.breakdown() {
            let [o, i, kh, kw] = r.weight_shape;
            let _ = writeln!(
                s,
                "{:<28}  ({o:>3},{i:>3},{kh},{kw})  {:>9}  {}",
                r.name,
                r.params,
                if r.phase1 { "yes" } else { "no" }
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block84_counts() {
        let g = build(Variant::Block84Multitask, ScalingPolicy::proposed(), 64).unwrap();
        assert_eq!(g.blocks.len(), 84);
        assert_eq!(g.sigmoid_blocks(), 36);
        assert_eq!(g.blocks_in(Branch::Shared).count(), 24);
        assert_eq!(g.blocks_in(Branch::Main).count(), 24);
        let main: Vec<usize> = g.blocks_in(Branch::Main).map(|b| b.stage).collect();
        assert_eq!((main[0], main[23]), (25, 48));
        assert!(g.binary_guides_main());
        let n = g.parameter_count() as f64;
        assert!((n / 6_636_994.0 - 1.0).abs() < 0.10, "{n}");
    }

    #[test]
    fn edge_schedule() {
        let g = build(Variant::Edge, ScalingPolicy::proposed(), 32).unwrap();
        assert_eq!(g.blocks.len(), 32);
        assert_eq!(g.sigmoid_blocks(), 0);
        assert!(g
            .blocks
            .iter()
            .all(|b| b.channels == if b.stage <= 28 { 32 } else { 16 }));
        assert!(!g.has_binary_output());
        assert!(!g.binary_guides_main());
    }

    #[test]
    fn sequential_numbering_for_alpha_85() {
        let g = build(
            Variant::Block84Multitask,
            ScalingPolicy::all_positive(85.0),
            8,
        )
        .unwrap();
        let main: Vec<usize> = g.blocks_in(Branch::Main).map(|b| b.stage).collect();
        assert_eq!((main[0], main[23]), (61, 84));
        assert!(g.blocks.iter().all(|b| b.epsilon > 0.0));
    }

    #[test]
    fn rejects_bad_args() {
        assert!(build(Variant::Edge, ScalingPolicy::proposed(), 4).is_err());
        assert!(build(Variant::Edge, ScalingPolicy::proposed(), 9).is_err());
        assert!(build(
            Variant::Block84SingleTask,
            ScalingPolicy::all_positive(61.0),
            8
        )
        .is_err());
        assert!("unet".parse::<Variant>().is_err());
    }

    #[test]
    fn phase_tags() {
        let g = build(Variant::Block84Multitask, ScalingPolicy::proposed(), 8).unwrap();
        for c in &g.convs {
            let expect = c.name.starts_with("stem")
                || c.name.starts_with("shared")
                || c.name.starts_with("binary");
            assert_eq!(c.phase1, expect, "{}", c.name);
        }
        let s = build(Variant::Block84SingleTask, ScalingPolicy::proposed(), 8).unwrap();
        assert!(s.convs.iter().all(|c| !c.phase1));
    }
}

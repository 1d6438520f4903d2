//! 3D DenseNet with learnable group convolutions, a doubling growth schedule and
//! cross-resolution dense connections.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lgc::LgcConv3dLayer;
use crate::network::{ArrayRole, BatchNorm, ConvUnit, Head, Network, Node, Pool};
use crate::ops::Conv3dSpec;
use crate::tensor::{NdArray, Scalar};

/// Published `(name, params, flops)` for the three predefined models on 200-band input.
pub const REFERENCE_COSTS: [(&str, u64, u64); 3] = [
    ("small", 156_856, 6_898_600),
    ("base", 882_272, 36_199_104),
    ("larger", 1_834_848, 72_421_584),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GrowthRule {
    /// `stage_growth[m] = base_growth * 2^m`.
    #[default]
    Doubling,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub stage_blocks: Vec<usize>,
    pub stage_growth: Vec<usize>,
    pub base_growth: usize,
    #[serde(default)]
    pub growth_rule: GrowthRule,
    /// LGC group count per stage.
    pub groups: Vec<usize>,
    /// Transition layers emit `ceil(channels / compression)` channels.
    #[serde(default = "default_compression")]
    pub compression: usize,
    /// Defaults to twice the first-stage growth.
    #[serde(default)]
    pub stem_channels: Option<usize>,
    /// Feed every earlier feature (pooled) to each layer, not only the current block's.
    #[serde(default = "default_true")]
    pub cross_block: bool,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub num_classes: usize,
    pub bands: usize,
    /// Odd spatial patch side `M` (patches are `M x M x bands`).
    pub patch: usize,
}

fn default_compression() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_kernel() -> usize {
    3
}

/// Growth rate of stage `m`: `k * 2^m`.
pub fn growth_schedule(k: usize, m: usize) -> usize {
    k << m
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn stem_width(&self) -> usize {
        self.stem_channels.unwrap_or(2 * self.stage_growth[0])
    }

    /// Smallest patch side that survives the pooling chain.
    pub fn min_patch(&self) -> usize {
        1 << self.stages().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.stage_growth.len() != s || self.groups.len() != s {
            return Err(Error::Config(format!(
                "stage_blocks, stage_growth and groups need equal non-zero lengths, got {}, {}, {}",
                s,
                self.stage_growth.len(),
                self.groups.len()
            )));
        }
        let positive = self
            .stage_blocks
            .iter()
            .chain(&self.stage_growth)
            .chain(&self.groups)
            .all(|&v| v > 0);
        if !positive || self.base_growth == 0 || self.compression == 0 || self.kernel == 0 {
            return Err(Error::Config(
                "all block counts, growth rates, groups, compression and kernel must be positive".into(),
            ));
        }
        for (m, &g) in self.stage_growth.iter().enumerate() {
            let want = match self.growth_rule {
                GrowthRule::Doubling => growth_schedule(self.base_growth, m),
                GrowthRule::Constant => self.base_growth,
            };
            if g != want {
                return Err(Error::Config(format!(
                    "stage {m} growth {g} breaks the {:?} rule (expected {want})",
                    self.growth_rule
                )));
            }
            if self.groups[m] > g {
                return Err(Error::Config(format!(
                    "stage {m}: {} groups exceed growth {g}",
                    self.groups[m]
                )));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.num_classes < 2 || self.bands == 0 {
            return Err(Error::Config("need at least 2 classes and 1 band".into()));
        }
        if self.patch.is_multiple_of(2) || self.patch < self.min_patch() {
            return Err(Error::Config(format!(
                "patch {} must be odd and at least the minimum patch size {} for {s} stages",
                self.patch,
                self.min_patch()
            )));
        }
        if self.stem_width() == 0 {
            return Err(Error::Config("stem needs at least one channel".into()));
        }
        Ok(())
    }

    /// Same model on a different input geometry.
    pub fn with_input(&self, bands: usize, patch: usize) -> Self {
        Self {
            bands,
            patch,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Per-level pooling: window and stride 2 spatially, and spectrally while depth >= 2.
    pub fn pools(&self) -> Vec<Pool> {
        let mut depth = self.bands;
        (1..self.stages())
            .map(|_| {
                let wd = if depth >= 2 { 2 } else { 1 };
                depth = (depth - wd) / wd + 1;
                Pool {
                    window: [wd, 2, 2],
                    stride: [wd, 2, 2],
                }
            })
            .collect()
    }
}

fn table_config(name: &str, blocks: [usize; 3], k: usize) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        stage_blocks: blocks.to_vec(),
        stage_growth: (0..3).map(|m| growth_schedule(k, m)).collect(),
        base_growth: k,
        growth_rule: GrowthRule::Doubling,
        groups: vec![4; 3],
        compression: default_compression(),
        stem_channels: None,
        cross_block: true,
        kernel: 3,
        num_classes: 16,
        bands: 200,
        patch: 15,
    }
}

/// The small, base and larger models on a 200-band, 16-class, 15x15 input.
pub fn predefined_configs() -> Vec<ModelConfig> {
    vec![
        table_config("small", [4, 6, 8], 4),
        table_config("base", [6, 8, 10], 8),
        table_config("larger", [10, 10, 10], 8),
    ]
}

/// Reduced two-stage model for quick CPU training.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        name: "desk".into(),
        stage_blocks: vec![2, 2],
        stage_growth: vec![4, 8],
        base_growth: 4,
        growth_rule: GrowthRule::Doubling,
        groups: vec![2, 2],
        compression: 2,
        stem_channels: None,
        cross_block: true,
        kernel: 3,
        num_classes: 4,
        bands: 16,
        patch: 9,
    }
}

pub fn predefined(name: &str) -> Option<ModelConfig> {
    if name == "desk" {
        return Some(desk_config());
    }
    predefined_configs().into_iter().find(|c| c.name == name)
}

/// Build the network graph with freshly initialized weights.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Network<T>> {
    cfg.validate()?;
    let k = cfg.kernel;
    let mut nodes: Vec<Node<T>> = Vec::new();
    let mut channels = vec![1usize];
    let stem = Conv3dSpec::same(1, cfg.stem_width(), k);
    nodes.push(Node {
        name: "stem".into(),
        inputs: vec![0],
        level: 0,
        norm: None,
        conv: ConvUnit::plain(stem, rng),
        pool_output: false,
    });
    channels.push(cfg.stem_width());
    // first feature of the current block when blocks are not cross-connected
    let mut block_start = 1;

    let inputs_for = |feature_count: usize, block_start: usize| -> Vec<usize> {
        if cfg.cross_block {
            (1..feature_count).collect()
        } else {
            (block_start..feature_count).collect()
        }
    };

    for s in 0..cfg.stages() {
        for j in 0..cfg.stage_blocks[s] {
            let inputs = inputs_for(channels.len(), block_start);
            let c: usize = inputs.iter().map(|&f| channels[f]).sum();
            let spec = Conv3dSpec::same(c, cfg.stage_growth[s], k);
            nodes.push(Node {
                name: format!("stage{s}.layer{j}"),
                inputs,
                level: s,
                norm: Some(BatchNorm::new(c)),
                conv: ConvUnit::Lgc(LgcConv3dLayer::new(spec, cfg.groups[s], rng)?),
                pool_output: false,
            });
            channels.push(cfg.stage_growth[s]);
        }
        if s + 1 < cfg.stages() {
            let inputs = inputs_for(channels.len(), block_start);
            let c: usize = inputs.iter().map(|&f| channels[f]).sum();
            let out = c.div_ceil(cfg.compression);
            let spec = Conv3dSpec::same(c, out, 1);
            nodes.push(Node {
                name: format!("transition{s}"),
                inputs,
                level: s,
                norm: Some(BatchNorm::new(c)),
                conv: ConvUnit::Lgc(LgcConv3dLayer::new(spec, cfg.groups[s].min(out), rng)?),
                pool_output: true,
            });
            channels.push(out);
            block_start = channels.len() - 1;
        }
    }
    let head_inputs = inputs_for(channels.len(), block_start);
    let feat: usize = head_inputs.iter().map(|&f| channels[f]).sum();
    let net = Network {
        input_channels: 1,
        input_dims: [cfg.bands, cfg.patch, cfg.patch],
        pools: cfg.pools(),
        nodes,
        head: Head {
            inputs: head_inputs,
            norm: BatchNorm::new(feat),
            weight: NdArray::randn(&[cfg.num_classes, feat], (1.0 / feat as f64).sqrt(), rng),
            bias: NdArray::zeros(&[cfg.num_classes]),
        },
        source_hash: cfg.hash(),
    };
    net.validate()?;
    Ok(net)
}

/// Group sizes for `n` items split as evenly as possible over `g` groups.
pub fn balanced_split(n: usize, g: usize) -> Vec<usize> {
    (0..g).map(|i| n / g + usize::from(i < n % g)).collect()
}

/// Multiply-adds of a grouped convolution: `positions * Σ_g N_g C_g taps`.
pub fn grouped_conv_madds(positions: u64, kernel_counts: &[usize], channel_counts: &[usize], taps: usize) -> u64 {
    positions
        * kernel_counts
            .iter()
            .zip(channel_counts)
            .map(|(&n, &c)| (n * c * taps) as u64)
            .sum::<u64>()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Output positions per sample.
    pub positions: u64,
    /// Weights, batch-norm affine and selection logits while training.
    pub params: u64,
    pub selection_params: u64,
    /// Weights plus batch-norm affine after freezing.
    pub frozen_params: u64,
    pub madds_dense: u64,
    pub madds_grouped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub params_without_selection: u64,
    pub frozen_params: u64,
    pub madds_dense: u64,
    pub madds: u64,
}

/// Per-layer and total parameter / multiply-add counts for one input sample.
///
/// Hard layers use their actual group sizes; soft layers assume balanced groups.
/// The classifier (batch norm and linear map) is reported as the `head` row.
pub fn count_costs<T: Scalar>(net: &Network<T>) -> Result<CostReport> {
    let dims = net.level_dims()?;
    let mut layers = Vec::with_capacity(net.nodes.len() + 1);
    for node in &net.nodes {
        let spec = node.conv.spec();
        let taps = spec.kernel_volume();
        let positions = dims[node.level].iter().product::<usize>() as u64;
        let norm = node.norm.as_ref().map_or(0, |n| 2 * n.channels()) as u64;
        let dense_w = (spec.out_kernels * spec.in_channels * taps) as u64;
        let (groups, kc, cc, sel) = match &node.conv {
            ConvUnit::Plain { .. } => (1, vec![spec.out_kernels], vec![spec.in_channels], 0),
            ConvUnit::Lgc(l) => {
                let g = l.groups();
                let (kc, cc) = if l.mode() == crate::lgc::SelectionMode::Hard {
                    (
                        counts(&l.kernel_sel.assignment(), g),
                        counts(&l.channel_sel.assignment(), g),
                    )
                } else {
                    (balanced_split(spec.out_kernels, g), balanced_split(spec.in_channels, g))
                };
                let sel = (l.channel_sel.logits.len() + l.kernel_sel.logits.len()) as u64;
                (g, kc, cc, sel)
            }
        };
        let packed = grouped_conv_madds(1, &kc, &cc, taps);
        layers.push(LayerCost {
            name: node.name.clone(),
            in_channels: spec.in_channels,
            out_channels: spec.out_kernels,
            groups,
            positions,
            params: dense_w + norm + sel,
            selection_params: sel,
            frozen_params: packed + norm,
            madds_dense: positions * dense_w,
            madds_grouped: grouped_conv_madds(positions, &kc, &cc, taps),
        });
    }
    let (k, f) = (net.head.weight.shape()[0], net.head.weight.shape()[1]);
    let head_params = (k * f + k + 2 * f) as u64;
    layers.push(LayerCost {
        name: "head".into(),
        in_channels: f,
        out_channels: k,
        groups: 1,
        positions: 1,
        params: head_params,
        selection_params: 0,
        frozen_params: head_params,
        madds_dense: (k * f) as u64,
        madds_grouped: (k * f) as u64,
    });
    let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
    let report = CostReport {
        params: sum(|l| l.params),
        params_without_selection: sum(|l| l.params - l.selection_params),
        frozen_params: sum(|l| l.frozen_params),
        madds_dense: sum(|l| l.madds_dense),
        madds: sum(|l| l.madds_grouped),
        layers,
    };
    let trainable: u64 = net
        .arrays()
        .iter()
        .filter(|(_, r, _)| *r != ArrayRole::Buffer)
        .map(|(_, _, a)| a.len() as u64)
        .sum();
    if trainable != report.params {
        return Err(Error::Graph(format!(
            "cost table counts {} parameters, network holds {trainable}",
            report.params
        )));
    }
    Ok(report)
}

fn counts(assignment: &[usize], groups: usize) -> Vec<usize> {
    let mut c = vec![0; groups];
    for &g in assignment {
        c[g] += 1;
    }
    c
}

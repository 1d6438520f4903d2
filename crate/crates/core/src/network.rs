//! Feature-graph networks: every node concatenates earlier features (average-pooled
//! down to its own resolution level), applies optional BN-ReLU and one convolution.
//!
//! Feature `0` is the network input; node `i` produces feature `i + 1`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lgc::{LgcConv3dLayer, LgcVars, SelectionMatrix, SelectionMode, SelectionRole};
use crate::ops::{self, Conv3dSpec};
use crate::tensor::{NdArray, Scalar};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: NdArray<T>,
    pub beta: NdArray<T>,
    pub running_mean: NdArray<T>,
    pub running_var: NdArray<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: NdArray::full(&[channels], T::one()),
            beta: NdArray::zeros(&[channels]),
            running_mean: NdArray::zeros(&[channels]),
            running_var: NdArray::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        ops::eval_affine(&self.gamma, &self.beta, &self.running_mean, &self.running_var)
    }

    fn update(&mut self, mean: &[T], var: &[T]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvUnit<T> {
    Plain { weight: NdArray<T>, spec: Conv3dSpec },
    Lgc(LgcConv3dLayer<T>),
}

impl<T: Scalar> ConvUnit<T> {
    pub fn plain<R: Rng + ?Sized>(spec: Conv3dSpec, rng: &mut R) -> Self {
        let fan_in = (spec.in_channels * spec.kernel_volume()) as f64;
        ConvUnit::Plain {
            weight: NdArray::randn(&spec.weight_shape(), (2.0 / fan_in).sqrt(), rng),
            spec,
        }
    }

    pub fn spec(&self) -> &Conv3dSpec {
        match self {
            ConvUnit::Plain { spec, .. } => spec,
            ConvUnit::Lgc(l) => &l.spec,
        }
    }

    pub fn is_lgc(&self) -> bool {
        matches!(self, ConvUnit::Lgc(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub inputs: Vec<usize>,
    pub level: usize,
    pub norm: Option<BatchNorm<T>>,
    pub conv: ConvUnit<T>,
    /// Average-pool the output down to `level + 1`.
    pub pool_output: bool,
}

impl<T> Node<T> {
    pub fn output_level(&self) -> usize {
        self.level + usize::from(self.pool_output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl Pool {
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.window[a] > input[a] {
                return Err(Error::Config(format!(
                    "pool window {:?} exceeds feature dims {input:?}",
                    self.window
                )));
            }
            out[a] = (input[a] - self.window[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub inputs: Vec<usize>,
    pub norm: BatchNorm<T>,
    /// `[classes, features]`.
    pub weight: NdArray<T>,
    pub bias: NdArray<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayRole {
    Weight,
    Selection,
    Norm,
    Buffer,
}

impl ArrayRole {
    pub fn trainable(self) -> bool {
        self != ArrayRole::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub input_channels: usize,
    /// `[depth, height, width]` of the input at level 0.
    pub input_dims: [usize; 3],
    /// `pools[l]` maps level `l` to level `l + 1`.
    pub pools: Vec<Pool>,
    pub nodes: Vec<Node<T>>,
    pub head: Head<T>,
    /// Hash of the configuration the network was built from.
    pub source_hash: String,
}

/// Result of a forward pass recorded on a graph.
#[derive(Debug)]
pub struct GraphForward<T> {
    pub logits: Var,
    /// Sum of the group regularizers of all soft LGC layers.
    pub regularizer: Option<Var>,
    /// One handle per trainable array, in [`Network::arrays`] order.
    pub params: Vec<Var>,
    /// Batch `(mean, var)` of every batch norm, nodes first then the head.
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Network<T> {
    pub fn final_level(&self) -> usize {
        self.pools.len()
    }

    pub fn feature_count(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn feature_level(&self, f: usize) -> usize {
        if f == 0 {
            0
        } else {
            self.nodes[f - 1].output_level()
        }
    }

    pub fn feature_channels(&self, f: usize) -> usize {
        if f == 0 {
            self.input_channels
        } else {
            self.nodes[f - 1].conv.spec().out_kernels
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.shape()[0]
    }

    /// Spatial dims `[d, h, w]` at every level.
    pub fn level_dims(&self) -> Result<Vec<[usize; 3]>> {
        let mut dims = vec![self.input_dims];
        for p in &self.pools {
            let next = p.output_dims(*dims.last().expect("non-empty"))?;
            dims.push(next);
        }
        Ok(dims)
    }

    /// Check channel bookkeeping, levels and spatial shapes of every node.
    pub fn validate(&self) -> Result<()> {
        let dims = self.level_dims()?;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.level > self.final_level() || node.output_level() > self.final_level() {
                return Err(Error::Graph(format!("{}: level out of range", node.name)));
            }
            let mut channels = 0;
            for &f in &node.inputs {
                if f > i {
                    return Err(Error::Graph(format!("{}: input feature {f} is not earlier", node.name)));
                }
                if self.feature_level(f) > node.level {
                    return Err(Error::Graph(format!(
                        "{}: input feature {f} is at a coarser level",
                        node.name
                    )));
                }
                channels += self.feature_channels(f);
            }
            let spec = node.conv.spec();
            if channels != spec.in_channels {
                return Err(Error::Graph(format!(
                    "{}: inputs carry {channels} channels, convolution expects {}",
                    node.name, spec.in_channels
                )));
            }
            if let Some(n) = &node.norm {
                if n.channels() != channels {
                    return Err(Error::dim(
                        format!("{} batch-norm channels", node.name),
                        channels,
                        n.channels(),
                    ));
                }
            }
            let out = spec.output_dims(dims[node.level])?;
            if out != dims[node.level] {
                return Err(Error::Config(format!(
                    "{}: convolution changes dims {:?} -> {out:?}",
                    node.name, dims[node.level]
                )));
            }
        }
        let mut channels = 0;
        for &f in &self.head.inputs {
            if f >= self.feature_count() {
                return Err(Error::Graph(format!("head input feature {f} does not exist")));
            }
            channels += self.feature_channels(f);
        }
        if self.head.norm.channels() != channels || self.head.weight.shape()[1] != channels {
            return Err(Error::Graph(format!(
                "head inputs carry {channels} channels, classifier expects {}",
                self.head.weight.shape()[1]
            )));
        }
        Ok(())
    }

    /// Every array of the network with a stable name, in canonical order.
    pub fn arrays(&self) -> Vec<(String, ArrayRole, &NdArray<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Some(n) = &node.norm {
                push_norm(&mut out, &node.name, n);
            }
            match &node.conv {
                ConvUnit::Plain { weight, .. } => {
                    out.push((format!("{}.weight", node.name), ArrayRole::Weight, weight));
                }
                ConvUnit::Lgc(l) => {
                    out.push((format!("{}.weight", node.name), ArrayRole::Weight, &l.weight));
                    out.push((
                        format!("{}.channel_logits", node.name),
                        ArrayRole::Selection,
                        &l.channel_sel.logits,
                    ));
                    out.push((
                        format!("{}.kernel_logits", node.name),
                        ArrayRole::Selection,
                        &l.kernel_sel.logits,
                    ));
                }
            }
        }
        push_norm(&mut out, "head", &self.head.norm);
        out.push(("head.weight".into(), ArrayRole::Weight, &self.head.weight));
        out.push(("head.bias".into(), ArrayRole::Weight, &self.head.bias));
        out
    }

    /// Mutable counterpart of [`Network::arrays`], same order.
    pub fn arrays_mut(&mut self) -> Vec<(String, ArrayRole, &mut NdArray<T>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            if let Some(n) = &mut node.norm {
                push_norm_mut(&mut out, &node.name, n);
            }
            match &mut node.conv {
                ConvUnit::Plain { weight, .. } => {
                    out.push((format!("{}.weight", node.name), ArrayRole::Weight, weight));
                }
                ConvUnit::Lgc(l) => {
                    out.push((format!("{}.weight", node.name), ArrayRole::Weight, &mut l.weight));
                    out.push((
                        format!("{}.channel_logits", node.name),
                        ArrayRole::Selection,
                        &mut l.channel_sel.logits,
                    ));
                    out.push((
                        format!("{}.kernel_logits", node.name),
                        ArrayRole::Selection,
                        &mut l.kernel_sel.logits,
                    ));
                }
            }
        }
        push_norm_mut(&mut out, "head", &mut self.head.norm);
        out.push(("head.weight".into(), ArrayRole::Weight, &mut self.head.weight));
        out.push(("head.bias".into(), ArrayRole::Weight, &mut self.head.bias));
        out
    }

    /// Trainable arrays only, in the order of [`GraphForward::params`].
    pub fn trainable_mut(&mut self) -> Vec<&mut NdArray<T>> {
        self.arrays_mut()
            .into_iter()
            .filter(|(_, role, _)| role.trainable())
            .map(|(_, _, a)| a)
            .collect()
    }

    /// Scalar count per array role.
    pub fn count_by_role(&self, role: ArrayRole) -> usize {
        self.arrays()
            .iter()
            .filter(|(_, r, _)| *r == role)
            .map(|(_, _, a)| a.len())
            .sum()
    }

    pub fn lgc_layers(&self) -> impl Iterator<Item = &LgcConv3dLayer<T>> {
        self.nodes.iter().filter_map(|n| match &n.conv {
            ConvUnit::Lgc(l) => Some(l),
            ConvUnit::Plain { .. } => None,
        })
    }

    pub fn lgc_layers_mut(&mut self) -> impl Iterator<Item = &mut LgcConv3dLayer<T>> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.conv {
            ConvUnit::Lgc(l) => Some(l),
            ConvUnit::Plain { .. } => None,
        })
    }

    pub fn set_temperature(&mut self, t: T) {
        for l in self.lgc_layers_mut() {
            l.temperature = t;
        }
    }

    pub fn set_mode(&mut self, mode: SelectionMode) {
        for l in self.lgc_layers_mut() {
            l.set_mode(mode);
        }
    }

    /// Replace every selection matrix with its hard (argmax) form.
    pub fn harden(&mut self) {
        for l in self.lgc_layers_mut() {
            l.channel_sel = crate::lgc::hard_assign(&l.channel_sel);
            l.kernel_sel = crate::lgc::hard_assign(&l.kernel_sel);
        }
    }

    pub fn is_hard(&self) -> bool {
        self.lgc_layers().all(|l| l.mode() == SelectionMode::Hard)
    }

    /// Random hard groupings where every group owns at least one channel.
    pub fn randomize_hard_groups<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in self.lgc_layers_mut() {
            let g = l.groups();
            let channels = random_cover(l.spec.in_channels, g, rng);
            let kernels: Vec<usize> = (0..l.spec.out_kernels).map(|_| rng.random_range(0..g)).collect();
            l.channel_sel =
                SelectionMatrix::from_assignment(&channels, g, SelectionRole::Channel).expect("group ids in range");
            l.kernel_sel =
                SelectionMatrix::from_assignment(&kernels, g, SelectionRole::Kernel).expect("group ids in range");
        }
    }

    /// Random affine and running statistics for every batch norm.
    pub fn randomize_norms<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (name, role, a) in self.arrays_mut() {
            if role != ArrayRole::Norm && role != ArrayRole::Buffer {
                continue;
            }
            *a = if name.ends_with("gamma") || name.ends_with("running_var") {
                NdArray::uniform(a.shape(), 0.5, 1.5, rng)
            } else {
                NdArray::uniform(a.shape(), -0.5, 0.5, rng)
            };
        }
    }

    /// Fold batch statistics from a training forward pass into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(Vec<T>, Vec<T>)]) -> Result<()> {
        let mut norms: Vec<&mut BatchNorm<T>> = self.nodes.iter_mut().filter_map(|n| n.norm.as_mut()).collect();
        norms.push(&mut self.head.norm);
        if norms.len() != stats.len() {
            return Err(Error::dim("batch-norm statistics", norms.len(), stats.len()));
        }
        for (n, (mean, var)) in norms.into_iter().zip(stats) {
            n.update(mean, var);
        }
        Ok(())
    }

    /// Record the forward pass on `g`. Training mode normalizes with batch statistics.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, training: bool) -> Result<GraphForward<T>> {
        let in_shape = g.value(x).shape().to_vec();
        let want = [
            self.input_channels,
            self.input_dims[0],
            self.input_dims[1],
            self.input_dims[2],
        ];
        if in_shape.len() != 5 || in_shape[1..] != want {
            return Err(Error::Shape(format!("network expects [B, {want:?}], got {in_shape:?}")));
        }
        let params: Vec<Var> = self
            .arrays()
            .into_iter()
            .filter(|(_, r, _)| r.trainable())
            .map(|(_, _, a)| g.param(a.clone()))
            .collect();
        let mut cursor = params.iter().copied();
        let mut next = || cursor.next().expect("one handle per trainable array");

        let mut features = vec![x];
        let mut pooled: HashMap<(usize, usize), Var> = HashMap::new();
        let mut regularizer: Option<Var> = None;
        let mut batch_stats = Vec::new();

        for node in &self.nodes {
            let norm_vars = node.norm.as_ref().map(|_| (next(), next()));
            let parts = node
                .inputs
                .iter()
                .map(|&f| self.pooled_var(g, &features, &mut pooled, f, node.level))
                .collect::<Result<Vec<_>>>()?;
            let cat = g.concat(&parts)?;
            let got = g.value(cat).shape()[1];
            if got != node.conv.spec().in_channels {
                return Err(Error::Graph(format!(
                    "{}: concatenated {got} channels, expected {}",
                    node.name,
                    node.conv.spec().in_channels
                )));
            }
            let mut h = cat;
            if let (Some(bn), Some((gamma, beta))) = (&node.norm, norm_vars) {
                h = self.norm_var(g, h, bn, gamma, beta, training, &mut batch_stats)?;
                h = g.relu(h);
            }
            let mut y = match &node.conv {
                ConvUnit::Plain { spec, .. } => {
                    let w = next();
                    g.conv3d(h, w, *spec)?
                }
                ConvUnit::Lgc(layer) => {
                    let vars = LgcVars {
                        weight: next(),
                        channel_logits: next(),
                        kernel_logits: next(),
                    };
                    if let Some(r) = layer.regularizer_graph(g, &vars)? {
                        regularizer = Some(match regularizer {
                            Some(acc) => g.add(acc, r)?,
                            None => r,
                        });
                    }
                    layer.forward_graph(g, h, &vars)?
                }
            };
            if node.pool_output {
                let p = self.pools[node.level];
                y = g.avg_pool3d(y, p.window, p.stride)?;
            }
            features.push(y);
        }

        let (gamma, beta, w, b) = (next(), next(), next(), next());
        let last = self.final_level();
        let parts = self
            .head
            .inputs
            .iter()
            .map(|&f| self.pooled_var(g, &features, &mut pooled, f, last))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&parts)?;
        let h = self.norm_var(g, cat, &self.head.norm, gamma, beta, training, &mut batch_stats)?;
        let h = g.relu(h);
        let gap = g.global_avg_pool(h)?;
        let logits = g.linear(gap, w, b)?;
        Ok(GraphForward {
            logits,
            regularizer,
            params,
            batch_stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_var(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn: &BatchNorm<T>,
        gamma: Var,
        beta: Var,
        training: bool,
        stats: &mut Vec<(Vec<T>, Vec<T>)>,
    ) -> Result<Var> {
        if training {
            let (y, mean, var) = g.batch_norm(x, gamma, beta)?;
            stats.push((mean, var));
            Ok(y)
        } else {
            let (scale, shift) = bn.eval_affine();
            g.channel_affine(x, scale, &shift)
        }
    }

    fn pooled_var(
        &self,
        g: &mut Graph<T>,
        features: &[Var],
        cache: &mut HashMap<(usize, usize), Var>,
        f: usize,
        level: usize,
    ) -> Result<Var> {
        let base = self.feature_level(f);
        if level == base {
            return Ok(features[f]);
        }
        if let Some(&v) = cache.get(&(f, level)) {
            return Ok(v);
        }
        let prev = self.pooled_var(g, features, cache, f, level - 1)?;
        let p = self.pools[level - 1];
        let v = g.avg_pool3d(prev, p.window, p.stride)?;
        cache.insert((f, level), v);
        Ok(v)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, false)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let bn = |n: &BatchNorm<T>| BatchNorm {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
            running_mean: n.running_mean.cast(),
            running_var: n.running_var.cast(),
        };
        let sel = |s: &SelectionMatrix<T>| SelectionMatrix {
            logits: s.logits.cast(),
            mode: s.mode,
            role: s.role,
        };
        Network {
            input_channels: self.input_channels,
            input_dims: self.input_dims,
            pools: self.pools.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    name: n.name.clone(),
                    inputs: n.inputs.clone(),
                    level: n.level,
                    norm: n.norm.as_ref().map(bn),
                    conv: match &n.conv {
                        ConvUnit::Plain { weight, spec } => ConvUnit::Plain {
                            weight: weight.cast(),
                            spec: *spec,
                        },
                        ConvUnit::Lgc(l) => ConvUnit::Lgc(LgcConv3dLayer {
                            weight: l.weight.cast(),
                            channel_sel: sel(&l.channel_sel),
                            kernel_sel: sel(&l.kernel_sel),
                            spec: l.spec,
                            temperature: U::lit(l.temperature.as_f64()),
                        }),
                    },
                    pool_output: n.pool_output,
                })
                .collect(),
            head: Head {
                inputs: self.head.inputs.clone(),
                norm: bn(&self.head.norm),
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
            source_hash: self.source_hash.clone(),
        }
    }
}

fn push_norm<'a, T>(out: &mut Vec<(String, ArrayRole, &'a NdArray<T>)>, name: &str, n: &'a BatchNorm<T>) {
    out.push((format!("{name}.bn.gamma"), ArrayRole::Norm, &n.gamma));
    out.push((format!("{name}.bn.beta"), ArrayRole::Norm, &n.beta));
    out.push((format!("{name}.bn.running_mean"), ArrayRole::Buffer, &n.running_mean));
    out.push((format!("{name}.bn.running_var"), ArrayRole::Buffer, &n.running_var));
}

fn push_norm_mut<'a, T>(out: &mut Vec<(String, ArrayRole, &'a mut NdArray<T>)>, name: &str, n: &'a mut BatchNorm<T>) {
    out.push((format!("{name}.bn.gamma"), ArrayRole::Norm, &mut n.gamma));
    out.push((format!("{name}.bn.beta"), ArrayRole::Norm, &mut n.beta));
    out.push((
        format!("{name}.bn.running_mean"),
        ArrayRole::Buffer,
        &mut n.running_mean,
    ));
    out.push((format!("{name}.bn.running_var"), ArrayRole::Buffer, &mut n.running_var));
}

/// Assignment of `n` items to `g` groups with every group non-empty (`n >= g`).
pub fn random_cover<R: Rng + ?Sized>(n: usize, g: usize, rng: &mut R) -> Vec<usize> {
    let mut assign: Vec<usize> = (0..n).map(|i| if i < g { i } else { rng.random_range(0..g) }).collect();
    assign.shuffle(rng);
    assign
}

/// A linear chain of same-padded LGC layers followed by a classifier; the compiler's
/// toy workload. `widths[0]` is the input channel count.
pub fn toy_chain<T: Scalar, R: Rng + ?Sized>(
    widths: &[usize],
    groups: &[usize],
    dims: [usize; 3],
    kernel: usize,
    classes: usize,
    rng: &mut R,
) -> Result<Network<T>> {
    if widths.len() < 2 || groups.len() != widths.len() - 1 {
        return Err(Error::Config("toy chain needs one group count per layer".into()));
    }
    let mut nodes = Vec::with_capacity(groups.len());
    for (i, &g) in groups.iter().enumerate() {
        let spec = Conv3dSpec::same(widths[i], widths[i + 1], kernel);
        nodes.push(Node {
            name: format!("layer{i}"),
            inputs: vec![i],
            level: 0,
            norm: (i > 0).then(|| BatchNorm::new(widths[i])),
            conv: ConvUnit::Lgc(LgcConv3dLayer::new(spec, g, rng)?),
            pool_output: false,
        });
    }
    let feat = *widths.last().expect("checked length");
    let last = nodes.len();
    let net = Network {
        input_channels: widths[0],
        input_dims: dims,
        pools: Vec::new(),
        nodes,
        head: Head {
            inputs: vec![last],
            norm: BatchNorm::new(feat),
            weight: NdArray::randn(&[classes, feat], (1.0 / feat as f64).sqrt(), rng),
            bias: NdArray::zeros(&[classes]),
        },
        source_hash: format!("toy-chain-{widths:?}-{groups:?}"),
    };
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trainable_handles_cover_every_trainable_array() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = toy_chain::<f64, _>(&[2, 4, 4], &[2, 2], [3, 3, 3], 3, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(NdArray::randn(&[2, 2, 3, 3, 3], 1.0, &mut rng));
        let out = net.forward_graph(&mut g, x, true).unwrap();
        assert_eq!(out.params.len(), net.trainable_mut().len());
        for (v, a) in out.params.iter().zip(net.trainable_mut()) {
            assert_eq!(g.value(*v), &*a);
        }
        assert_eq!(out.batch_stats.len(), 2);
    }

    #[test]
    fn random_cover_fills_every_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_cover(7, 4, &mut rng);
            for g in 0..4 {
                assert!(a.contains(&g));
            }
        }
    }

    #[test]
    fn validate_catches_channel_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = toy_chain::<f64, _>(&[2, 4, 4], &[2, 2], [3, 3, 3], 3, 3, &mut rng).unwrap();
        net.nodes[1].inputs = vec![0];
        assert!(matches!(net.validate(), Err(Error::Graph(_))));
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.update(&[1.0], &[3.0]);
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.2).abs() < 1e-15);
    }
}

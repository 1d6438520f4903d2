//! Frozen inference and the index-merging compiler.
//!
//! A frozen network runs every LGC layer as gather-in, per-group convolutions and
//! gather-out. The compiled plan keeps each feature in the kernel-sorted order its
//! producer emitted, folds that order into the consumer's group sort offline, and reads
//! each layer's input with a single gather straight from the producers' buffers. The
//! logical channel order is restored once, on the pooled classifier input.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgc::{freeze, GroupedConv3d, SelectionMode};
use crate::network::{ConvUnit, Network, Pool};
use crate::ops;
use crate::permutation::{constructions, merge_indices, PermutationIndex};
use crate::tensor::{NdArray, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNode<T> {
    pub name: String,
    pub inputs: Vec<usize>,
    pub level: usize,
    /// Eval-mode batch norm folded into `(scale, shift)`, followed by ReLU.
    pub affine: Option<(Vec<T>, Vec<T>)>,
    pub conv: GroupedConv3d<T>,
    pub lgc: bool,
    pub pool_output: bool,
}

impl<T> FrozenNode<T> {
    fn output_level(&self) -> usize {
        self.level + usize::from(self.pool_output)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHead<T> {
    pub inputs: Vec<usize>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub weight: NdArray<T>,
    pub bias: NdArray<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNetwork<T> {
    pub input_channels: usize,
    pub input_dims: [usize; 3],
    pub pools: Vec<Pool>,
    pub nodes: Vec<FrozenNode<T>>,
    pub head: FrozenHead<T>,
    pub source_hash: String,
}

/// Instrumentation from one inference call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Channel gathers per layer, in node order.
    pub layer_gathers: Vec<usize>,
    /// Gathers restoring logical order at the classifier.
    pub restorations: usize,
    /// Permutation indices built while the call ran.
    pub permutation_builds: u64,
}

impl RunStats {
    pub fn total_gathers(&self) -> usize {
        self.layer_gathers.iter().sum::<usize>() + self.restorations
    }
}

impl<T: Scalar> FrozenNetwork<T> {
    /// Freeze every layer of `net` (selections are hardened by row argmax).
    pub fn from_network(net: &Network<T>) -> Result<Self> {
        net.validate()?;
        let nodes = net
            .nodes
            .iter()
            .map(|n| {
                let (conv, lgc) = match &n.conv {
                    ConvUnit::Plain { weight, spec } => (GroupedConv3d::dense(weight.clone(), *spec)?, false),
                    ConvUnit::Lgc(l) => (freeze(l).map_err(|e| Error::Freeze(format!("{}: {e}", n.name)))?, true),
                };
                Ok(FrozenNode {
                    name: n.name.clone(),
                    inputs: n.inputs.clone(),
                    level: n.level,
                    affine: n.norm.as_ref().map(|b| b.eval_affine()),
                    conv,
                    lgc,
                    pool_output: n.pool_output,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (scale, shift) = net.head.norm.eval_affine();
        Ok(Self {
            input_channels: net.input_channels,
            input_dims: net.input_dims,
            pools: net.pools.clone(),
            nodes,
            head: FrozenHead {
                inputs: net.head.inputs.clone(),
                scale,
                shift,
                weight: net.head.weight.clone(),
                bias: net.head.bias.clone(),
            },
            source_hash: net.source_hash.clone(),
        })
    }

    pub fn final_level(&self) -> usize {
        self.pools.len()
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
            self.nodes[f - 1].conv.spec.out_kernels
        }
    }

    fn check_input(&self, x: &NdArray<T>) -> Result<()> {
        let s = x.shape();
        let want = [
            self.input_channels,
            self.input_dims[0],
            self.input_dims[1],
            self.input_dims[2],
        ];
        if s.len() != 5 || s[1..] != want {
            return Err(Error::Shape(format!("network expects [B, {want:?}], got {s:?}")));
        }
        Ok(())
    }

    /// Reference inference: concatenate, reorder into groups, convolve, restore order.
    pub fn forward_naive(&self, x: &NdArray<T>) -> Result<(NdArray<T>, RunStats)> {
        self.check_input(x)?;
        let before = constructions();
        let mut stats = RunStats::default();
        let mut store = FeatureStore::new(&self.pools);
        store.insert(0, 0, x.clone());
        for (i, node) in self.nodes.iter().enumerate() {
            let parts = store.collect(&node.inputs, node.level, |f| self.feature_level(f))?;
            let mut h = NdArray::concat_channels(&parts)?;
            if let Some((scale, shift)) = &node.affine {
                affine_relu_inplace(&mut h, scale, shift)?;
            }
            let mut gathers = 0;
            let mut y = if node.lgc {
                let sorted = h.gather_channels(node.conv.channel_perm.perm())?;
                let y = node.conv.forward_sorted(&sorted)?;
                gathers += 2;
                y.gather_channels(node.conv.kernel_perm.inverse())?
            } else {
                node.conv.forward_sorted(&h)?
            };
            if node.pool_output {
                let p = self.pools[node.level];
                y = ops::avg_pool3d(&y, p.window, p.stride)?;
            }
            stats.layer_gathers.push(gathers);
            store.insert(i + 1, node.output_level(), y);
        }
        let parts = store.collect(&self.head.inputs, self.final_level(), |f| self.feature_level(f))?;
        let mut h = NdArray::concat_channels(&parts)?;
        affine_relu_inplace(&mut h, &self.head.scale, &self.head.shift)?;
        let gap = ops::global_avg_pool(&h)?;
        let logits = ops::linear(&gap, &self.head.weight, &self.head.bias)?;
        stats.permutation_builds = constructions() - before;
        Ok((logits, stats))
    }
}

/// Per-(feature, level) tensors with lazily pooled coarser copies.
struct FeatureStore<'p, T> {
    pools: &'p [Pool],
    map: HashMap<(usize, usize), NdArray<T>>,
}

impl<'p, T: Scalar> FeatureStore<'p, T> {
    fn new(pools: &'p [Pool]) -> Self {
        Self {
            pools,
            map: HashMap::new(),
        }
    }

    fn insert(&mut self, f: usize, level: usize, v: NdArray<T>) {
        self.map.insert((f, level), v);
    }

    fn ensure(&mut self, f: usize, level: usize, base: usize) -> Result<()> {
        if self.map.contains_key(&(f, level)) {
            return Ok(());
        }
        if level <= base {
            return Err(Error::Graph(format!("feature {f} missing at level {level}")));
        }
        self.ensure(f, level - 1, base)?;
        let p = self.pools[level - 1];
        let v = ops::avg_pool3d(&self.map[&(f, level - 1)], p.window, p.stride)?;
        self.map.insert((f, level), v);
        Ok(())
    }

    fn collect(&mut self, features: &[usize], level: usize, base: impl Fn(usize) -> usize) -> Result<Vec<&NdArray<T>>> {
        for &f in features {
            self.ensure(f, level, base(f))?;
        }
        Ok(features.iter().map(|&f| &self.map[&(f, level)]).collect())
    }
}

fn affine_relu_inplace<T: Scalar>(x: &mut NdArray<T>, scale: &[T], shift: &[T]) -> Result<()> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if scale.len() != c || shift.len() != c {
        return Err(Error::dim("batch-norm channels", c, scale.len()));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let data = x.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let (s, t) = (scale[ch], shift[ch]);
            for v in &mut data[(bi * c + ch) * inner..][..inner] {
                *v = (s * *v + t).max(T::zero());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLayer<T> {
    pub name: String,
    /// Producer features read by this layer, pooled to `level`.
    pub sources: Vec<usize>,
    pub level: usize,
    /// Sorted input slot -> slot of the physical concatenation of `sources`.
    pub merged: PermutationIndex,
    /// `merged` resolved to `(source, physical channel)` pairs.
    pub reads: Vec<(usize, usize)>,
    /// Batch-norm affine in group-sorted input order.
    pub affine: Option<(Vec<T>, Vec<T>)>,
    pub conv: GroupedConv3d<T>,
    /// Physical output slot -> logical kernel.
    pub output_order: PermutationIndex,
    pub pool_output: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledHead<T> {
    pub sources: Vec<usize>,
    /// Batch-norm affine in physical order.
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    /// Logical feature -> physical slot of the pooled classifier input.
    pub restore: PermutationIndex,
    pub weight: NdArray<T>,
    pub bias: NdArray<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledNetwork<T> {
    pub input_channels: usize,
    pub input_dims: [usize; 3],
    pub pools: Vec<Pool>,
    pub layers: Vec<CompiledLayer<T>>,
    pub head: CompiledHead<T>,
    pub source_hash: String,
}

/// Physical order of the channel concatenation of `sources`.
fn concat_order(orders: &[PermutationIndex], sources: &[usize]) -> Result<PermutationIndex> {
    let mut perm = Vec::new();
    for &f in sources {
        let off = perm.len();
        perm.extend(orders[f].perm().iter().map(|&l| off + l));
    }
    PermutationIndex::new(perm)
}

fn resolve_reads(orders: &[PermutationIndex], sources: &[usize], merged: &PermutationIndex) -> Vec<(usize, usize)> {
    let mut owner = Vec::new();
    for (j, &f) in sources.iter().enumerate() {
        owner.extend((0..orders[f].len()).map(|c| (j, c)));
    }
    merged.perm().iter().map(|&p| owner[p]).collect()
}

/// Compile a network whose LGC layers are all in hard mode.
pub fn compile_network<T: Scalar>(net: &Network<T>) -> Result<CompiledNetwork<T>> {
    if let Some(n) = net
        .nodes
        .iter()
        .find(|n| matches!(&n.conv, ConvUnit::Lgc(l) if l.mode() != SelectionMode::Hard))
    {
        return Err(Error::Compile(format!("layer {} is not frozen", n.name)));
    }
    compile(&FrozenNetwork::from_network(net)?)
}

/// Merge every layer's input order with its producers' output orders, offline.
pub fn compile<T: Scalar>(frozen: &FrozenNetwork<T>) -> Result<CompiledNetwork<T>> {
    let mut orders = vec![PermutationIndex::identity(frozen.input_channels)];
    let mut layers = Vec::with_capacity(frozen.nodes.len());
    for node in &frozen.nodes {
        let width: usize = node.inputs.iter().map(|&f| frozen.feature_channels(f)).sum();
        if node.inputs.iter().any(|&f| f >= orders.len()) {
            return Err(Error::Graph(format!("{}: reads a later feature", node.name)));
        }
        if width != node.conv.spec.in_channels {
            return Err(Error::Graph(format!(
                "{}: producers supply {width} channels, layer expects {}",
                node.name, node.conv.spec.in_channels
            )));
        }
        let physical = concat_order(&orders, &node.inputs)?;
        let merged = merge_indices(&physical, &node.conv.channel_perm)?;
        let reads = resolve_reads(&orders, &node.inputs, &merged);
        let affine = node
            .affine
            .as_ref()
            .map(|(s, t)| (node.conv.channel_perm.apply(s), node.conv.channel_perm.apply(t)));
        orders.push(node.conv.kernel_perm.clone());
        layers.push(CompiledLayer {
            name: node.name.clone(),
            sources: node.inputs.clone(),
            level: node.level,
            merged,
            reads,
            affine,
            conv: node.conv.clone(),
            output_order: node.conv.kernel_perm.clone(),
            pool_output: node.pool_output,
        });
    }
    let head = &frozen.head;
    let width: usize = head.inputs.iter().map(|&f| frozen.feature_channels(f)).sum();
    if width != head.weight.shape()[1] {
        return Err(Error::Graph(format!(
            "classifier expects {} features, producers supply {width}",
            head.weight.shape()[1]
        )));
    }
    let physical = concat_order(&orders, &head.inputs)?;
    let to_physical = |v: &[T]| physical.perm().iter().map(|&l| v[l]).collect::<Vec<T>>();
    Ok(CompiledNetwork {
        input_channels: frozen.input_channels,
        input_dims: frozen.input_dims,
        pools: frozen.pools.clone(),
        layers,
        head: CompiledHead {
            sources: head.inputs.clone(),
            scale: to_physical(&head.scale),
            shift: to_physical(&head.shift),
            restore: physical.inverted(),
            weight: head.weight.clone(),
            bias: head.bias.clone(),
        },
        source_hash: frozen.source_hash.clone(),
    })
}

/// One gather from the virtual channel concatenation of `parts`.
fn gather_virtual<T: Scalar>(parts: &[&NdArray<T>], reads: &[(usize, usize)]) -> Result<NdArray<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Empty("layer without inputs".into()))?;
    let batch = first.shape()[0];
    let tail = &first.shape()[2..];
    for p in parts {
        if p.shape()[0] != batch || &p.shape()[2..] != tail {
            return Err(Error::Shape(format!(
                "source {:?} does not align with {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let inner: usize = tail.iter().product();
    let mut out = Vec::with_capacity(batch * reads.len() * inner);
    for b in 0..batch {
        for &(j, c) in reads {
            let p = parts[j];
            let start = (b * p.shape()[1] + c) * inner;
            out.extend_from_slice(&p.data()[start..start + inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = reads.len();
    NdArray::new(shape, out)
}

/// Execute a compiled plan: one gather per layer and one final restoration.
pub fn run_compiled<T: Scalar>(x: &NdArray<T>, net: &CompiledNetwork<T>) -> Result<(NdArray<T>, RunStats)> {
    let s = x.shape();
    let want = [
        net.input_channels,
        net.input_dims[0],
        net.input_dims[1],
        net.input_dims[2],
    ];
    if s.len() != 5 || s[1..] != want {
        return Err(Error::Shape(format!("plan expects [B, {want:?}], got {s:?}")));
    }
    let before = constructions();
    let mut stats = RunStats::default();
    let mut levels = vec![0usize];
    let mut store = FeatureStore::new(&net.pools);
    store.insert(0, 0, x.clone());
    for (i, layer) in net.layers.iter().enumerate() {
        let parts = store.collect(&layer.sources, layer.level, |f| levels[f])?;
        let mut h = gather_virtual(&parts, &layer.reads)?;
        stats.layer_gathers.push(1);
        if let Some((scale, shift)) = &layer.affine {
            affine_relu_inplace(&mut h, scale, shift)?;
        }
        let mut y = layer.conv.forward_sorted(&h)?;
        let mut level = layer.level;
        if layer.pool_output {
            let p = net.pools[level];
            y = ops::avg_pool3d(&y, p.window, p.stride)?;
            level += 1;
        }
        levels.push(level);
        store.insert(i + 1, level, y);
    }
    let head = &net.head;
    let parts = store.collect(&head.sources, net.pools.len(), |f| levels[f])?;
    let mut pooled = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for p in parts {
        let c = p.shape()[1];
        let mut v = p.clone();
        affine_relu_inplace(&mut v, &head.scale[offset..offset + c], &head.shift[offset..offset + c])?;
        pooled.push(ops::global_avg_pool(&v)?);
        offset += c;
    }
    let physical = NdArray::concat_channels(&pooled.iter().collect::<Vec<_>>())?;
    let logical = physical.gather_channels(head.restore.perm())?;
    stats.restorations = 1;
    let logits = ops::linear(&logical, &head.weight, &head.bias)?;
    stats.permutation_builds = constructions() - before;
    Ok((logits, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reps: usize,
    pub batch: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub naive_gathers: usize,
    pub compiled_gathers: usize,
    pub naive_median_ms: f64,
    pub compiled_median_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time naive against compiled inference on `x` with interleaved repetitions.
/// Fails before timing when the two paths disagree by more than `tolerance`.
pub fn bench<T: Scalar>(
    frozen: &FrozenNetwork<T>,
    compiled: &CompiledNetwork<T>,
    x: &NdArray<T>,
    reps: usize,
    tolerance: f64,
) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    let (a, naive_stats) = frozen.forward_naive(x)?;
    let (b, compiled_stats) = run_compiled(x, compiled)?;
    let diff = a.max_abs_diff(&b);
    if diff.is_nan() || diff > tolerance {
        return Err(Error::Equivalence { diff, tol: tolerance });
    }
    let mut naive = Vec::with_capacity(reps);
    let mut fast = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(frozen.forward_naive(x)?);
        naive.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        std::hint::black_box(run_compiled(x, compiled)?);
        fast.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport {
        reps,
        batch: x.shape()[0],
        max_abs_diff: diff,
        tolerance,
        naive_gathers: naive_stats.total_gathers(),
        compiled_gathers: compiled_stats.total_gathers(),
        naive_median_ms: median(naive),
        compiled_median_ms: median(fast),
    })
}

//! Learnable group convolution.
//!
//! A layer keeps its full `[N, C, kd, kh, kw]` kernel bank plus two selection matrices:
//! `S` (`C x G`) assigns input channels to groups and `T` (`N x G`) assigns kernels.
//! The kernel-to-channel connection mask is `U = T Sᵀ`. While training, `S` and `T`
//! are row-softmaxed logits and the convolution runs with `W ⊙ U`; freezing takes the
//! row argmax and packs the surviving weights into one dense block per group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{self, conv3d_accumulate, Conv3dSpec, ConvGeometry};
use crate::permutation::{sort_by_group, PermutationIndex};
use crate::tensor::{NdArray, Scalar};

/// Initial logits are drawn from `[-LOGIT_INIT, LOGIT_INIT]`.
pub const LOGIT_INIT: f64 = 0.1;
/// Minimum soft column mass the group regularizer asks for.
pub const GROUP_MASS_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRole {
    Channel,
    Kernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix<T> {
    pub logits: NdArray<T>,
    pub mode: SelectionMode,
    pub role: SelectionRole,
}

impl<T: Scalar> SelectionMatrix<T> {
    pub fn new(logits: NdArray<T>, mode: SelectionMode, role: SelectionRole) -> Result<Self> {
        if logits.ndim() != 2 {
            return Err(Error::Shape(format!(
                "selection logits must be [rows, groups], got {:?}",
                logits.shape()
            )));
        }
        Ok(Self { logits, mode, role })
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, groups: usize, role: SelectionRole, rng: &mut R) -> Self {
        Self {
            logits: NdArray::uniform(&[rows, groups], -LOGIT_INIT, LOGIT_INIT, rng),
            mode: SelectionMode::Soft,
            role,
        }
    }

    /// Hard matrix whose rows are one-hot at `assignment[row]`.
    pub fn from_assignment(assignment: &[usize], groups: usize, role: SelectionRole) -> Result<Self> {
        if let Some(&g) = assignment.iter().find(|&&g| g >= groups) {
            return Err(Error::Range(format!("group id {g} >= {groups}")));
        }
        let logits = NdArray::from_fn(&[assignment.len(), groups], |i| {
            if assignment[i / groups] == i % groups {
                T::one()
            } else {
                T::zero()
            }
        });
        Self::new(logits, SelectionMode::Hard, role)
    }

    pub fn rows(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn groups(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Row softmax of `temperature * logits`.
    pub fn soft_view(&self, temperature: T) -> NdArray<T> {
        ops::softmax_rows(&self.logits.map(|v| v * temperature)).expect("logits are a matrix")
    }

    /// One-hot rows at the argmax; ties go to the lowest group index.
    pub fn hard_view(&self) -> NdArray<T> {
        let g = self.groups();
        let assign = self.assignment();
        NdArray::from_fn(&[self.rows(), g], |i| {
            if assign[i / g] == i % g {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn view(&self, temperature: T) -> NdArray<T> {
        match self.mode {
            SelectionMode::Soft => self.soft_view(temperature),
            SelectionMode::Hard => self.hard_view(),
        }
    }

    /// Group id of every row (row argmax).
    pub fn assignment(&self) -> Vec<usize> {
        ops::argmax_rows(&self.logits)
    }
}

/// Harden a selection matrix: one-hot rows at the argmax, mode set to hard.
pub fn hard_assign<T: Scalar>(sel: &SelectionMatrix<T>) -> SelectionMatrix<T> {
    SelectionMatrix::from_assignment(&sel.assignment(), sel.groups(), sel.role).expect("argmax ids are in range")
}

/// `U[n, c] = Σ_j T[n, j] S[c, j]` using each matrix's current mode.
pub fn connection_mask<T: Scalar>(
    s: &SelectionMatrix<T>,
    t: &SelectionMatrix<T>,
    temperature: T,
) -> Result<NdArray<T>> {
    if s.groups() != t.groups() {
        return Err(Error::dim("selection groups", s.groups(), t.groups()));
    }
    ops::matmul_nt(&t.view(temperature), &s.view(temperature))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgcConv3dLayer<T> {
    pub weight: NdArray<T>,
    pub channel_sel: SelectionMatrix<T>,
    pub kernel_sel: SelectionMatrix<T>,
    pub spec: Conv3dSpec,
    /// Multiplier applied to the logits before the row softmax.
    pub temperature: T,
}

impl<T: Scalar> LgcConv3dLayer<T> {
    /// He-initialized kernel bank and near-uniform soft selections.
    pub fn new<R: Rng + ?Sized>(spec: Conv3dSpec, groups: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        check_groups(groups, spec.in_channels, spec.out_kernels)?;
        let fan_in = (spec.in_channels * spec.kernel_volume()) as f64;
        let weight = NdArray::randn(&spec.weight_shape(), (2.0 / fan_in).sqrt(), rng);
        let channel_sel = SelectionMatrix::random(spec.in_channels, groups, SelectionRole::Channel, rng);
        let kernel_sel = SelectionMatrix::random(spec.out_kernels, groups, SelectionRole::Kernel, rng);
        Self::from_parts(weight, channel_sel, kernel_sel, spec)
    }

    pub fn from_parts(
        weight: NdArray<T>,
        channel_sel: SelectionMatrix<T>,
        kernel_sel: SelectionMatrix<T>,
        spec: Conv3dSpec,
    ) -> Result<Self> {
        if weight.shape() != spec.weight_shape() {
            return Err(Error::Shape(format!(
                "kernel bank {:?} does not match spec {:?}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        if channel_sel.rows() != spec.in_channels {
            return Err(Error::dim(
                "channel selection rows",
                spec.in_channels,
                channel_sel.rows(),
            ));
        }
        if kernel_sel.rows() != spec.out_kernels {
            return Err(Error::dim("kernel selection rows", spec.out_kernels, kernel_sel.rows()));
        }
        if channel_sel.groups() != kernel_sel.groups() {
            return Err(Error::dim(
                "selection groups",
                channel_sel.groups(),
                kernel_sel.groups(),
            ));
        }
        check_groups(channel_sel.groups(), spec.in_channels, spec.out_kernels)?;
        Ok(Self {
            weight,
            channel_sel,
            kernel_sel,
            spec,
            temperature: T::one(),
        })
    }

    pub fn groups(&self) -> usize {
        self.channel_sel.groups()
    }

    pub fn mode(&self) -> SelectionMode {
        self.channel_sel.mode
    }

    pub fn set_mode(&mut self, mode: SelectionMode) {
        self.channel_sel.mode = mode;
        self.kernel_sel.mode = mode;
    }

    pub fn mask(&self) -> Result<NdArray<T>> {
        connection_mask(&self.channel_sel, &self.kernel_sel, self.temperature)
    }

    /// Register this layer's trainable arrays as graph parameters.
    pub fn register(&self, g: &mut Graph<T>) -> LgcVars {
        LgcVars {
            weight: g.param(self.weight.clone()),
            channel_logits: g.param(self.channel_sel.logits.clone()),
            kernel_logits: g.param(self.kernel_sel.logits.clone()),
        }
    }

    /// Masked convolution on the graph using the layer's current mode.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, vars: &LgcVars) -> Result<Var> {
        let mask = match self.mode() {
            SelectionMode::Soft => soft_mask_graph(g, vars.channel_logits, vars.kernel_logits, self.temperature)?,
            SelectionMode::Hard => g.constant(self.mask()?),
        };
        let w = g.mask_weight(vars.weight, mask)?;
        g.conv3d(x, w, self.spec)
    }

    /// Group regularizer on the graph; zero contribution in hard mode.
    pub fn regularizer_graph(&self, g: &mut Graph<T>, vars: &LgcVars) -> Result<Option<Var>> {
        if self.mode() == SelectionMode::Hard {
            return Ok(None);
        }
        group_regularizer_graph(g, vars.channel_logits, vars.kernel_logits, self.temperature).map(Some)
    }
}

/// Graph handles for a layer's trainable arrays.
#[derive(Debug, Clone, Copy)]
pub struct LgcVars {
    pub weight: Var,
    pub channel_logits: Var,
    pub kernel_logits: Var,
}

fn check_groups(groups: usize, channels: usize, kernels: usize) -> Result<()> {
    if groups == 0 || groups > channels.min(kernels) {
        return Err(Error::Config(format!(
            "group count {groups} must be in 1..={} for {channels} channels and {kernels} kernels",
            channels.min(kernels)
        )));
    }
    Ok(())
}

/// `softmax(t·T) softmax(t·S)ᵀ` on the graph.
pub fn soft_mask_graph<T: Scalar>(
    g: &mut Graph<T>,
    channel_logits: Var,
    kernel_logits: Var,
    temperature: T,
) -> Result<Var> {
    let s = scaled_softmax(g, channel_logits, temperature)?;
    let t = scaled_softmax(g, kernel_logits, temperature)?;
    g.matmul_nt(t, s)
}

fn scaled_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var, temperature: T) -> Result<Var> {
    let scaled = if temperature == T::one() {
        logits
    } else {
        g.scale(logits, temperature)
    };
    g.softmax_rows(scaled)
}

/// `Σ_j max(0, floor − mass_j)²` over the soft column masses of `S` and `T`.
pub fn group_regularizer_graph<T: Scalar>(
    g: &mut Graph<T>,
    channel_logits: Var,
    kernel_logits: Var,
    temperature: T,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for logits in [channel_logits, kernel_logits] {
        let soft = scaled_softmax(g, logits, temperature)?;
        let mass = g.column_sum(soft)?;
        let neg = g.scale(mass, -T::one());
        let deficit = g.add_scalar(neg, T::lit(GROUP_MASS_FLOOR));
        let hinge = g.relu(deficit);
        let sq = g.square(hinge);
        terms.push(g.sum(sq));
    }
    g.add(terms[0], terms[1])
}

/// Value of the group regularizer for two soft selection matrices.
pub fn group_regularizer<T: Scalar>(s: &SelectionMatrix<T>, t: &SelectionMatrix<T>, temperature: T) -> T {
    let floor = T::lit(GROUP_MASS_FLOOR);
    [s, t]
        .iter()
        .map(|m| {
            let soft = m.soft_view(temperature);
            let g = m.groups();
            (0..g)
                .map(|j| {
                    let mass: T = soft.data().iter().skip(j).step_by(g).copied().sum();
                    let d = (floor - mass).max(T::zero());
                    d * d
                })
                .sum::<T>()
        })
        .sum()
}

/// Value-only masked forward pass: `conv3d(x, W ⊙ U)`.
pub fn lgc_forward<T: Scalar>(x: &NdArray<T>, layer: &LgcConv3dLayer<T>) -> Result<NdArray<T>> {
    if x.ndim() != 5 || x.shape()[1] != layer.spec.in_channels {
        return Err(Error::dim(
            "input channels",
            layer.spec.in_channels,
            x.shape().get(1).copied().unwrap_or(0),
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(layer.weight.clone());
    let mask = g.constant(layer.mask()?);
    let wm = g.mask_weight(w, mask)?;
    let y = g.conv3d(xv, wm, layer.spec)?;
    Ok(g.value(y).clone())
}

/// Frozen grouped convolution: per-group packed kernel blocks and the two sort orders.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedConv3d<T> {
    pub spec: Conv3dSpec,
    /// `blocks[g]` is `[N_g, C_g, kd, kh, kw]`, or `None` when the group has no kernels.
    pub blocks: Vec<Option<NdArray<T>>>,
    /// Sorted input slot -> original channel.
    pub channel_perm: PermutationIndex,
    /// Sorted output slot -> original kernel.
    pub kernel_perm: PermutationIndex,
    pub channel_counts: Vec<usize>,
    pub kernel_counts: Vec<usize>,
}

impl<T: Scalar> GroupedConv3d<T> {
    /// A standard convolution seen as a single group.
    pub fn dense(weight: NdArray<T>, spec: Conv3dSpec) -> Result<Self> {
        if weight.shape() != spec.weight_shape() {
            return Err(Error::Shape(format!(
                "kernel bank {:?} does not match spec",
                weight.shape()
            )));
        }
        Ok(Self {
            spec,
            blocks: vec![Some(weight)],
            channel_perm: PermutationIndex::identity(spec.in_channels),
            kernel_perm: PermutationIndex::identity(spec.out_kernels),
            channel_counts: vec![spec.in_channels],
            kernel_counts: vec![spec.out_kernels],
        })
    }

    /// Pack the entries of `weight` that survive the hard assignment.
    pub fn pack(
        weight: &NdArray<T>,
        spec: Conv3dSpec,
        channel_assignment: &[usize],
        kernel_assignment: &[usize],
        groups: usize,
    ) -> Result<Self> {
        if channel_assignment.len() != spec.in_channels {
            return Err(Error::dim(
                "channel assignment",
                spec.in_channels,
                channel_assignment.len(),
            ));
        }
        if kernel_assignment.len() != spec.out_kernels {
            return Err(Error::dim(
                "kernel assignment",
                spec.out_kernels,
                kernel_assignment.len(),
            ));
        }
        let mut channel_counts = vec![0; groups];
        let mut kernel_counts = vec![0; groups];
        for &g in channel_assignment {
            *channel_counts
                .get_mut(g)
                .ok_or_else(|| Error::Range(format!("group {g}")))? += 1;
        }
        for &g in kernel_assignment {
            *kernel_counts
                .get_mut(g)
                .ok_or_else(|| Error::Range(format!("group {g}")))? += 1;
        }
        for g in 0..groups {
            if kernel_counts[g] > 0 && channel_counts[g] == 0 {
                return Err(Error::Freeze(format!(
                    "group {g} has {} kernels but no input channels",
                    kernel_counts[g]
                )));
            }
        }
        let channel_perm = sort_by_group(channel_assignment);
        let kernel_perm = sort_by_group(kernel_assignment);
        let taps = spec.kernel_volume();
        let c_total = spec.in_channels;
        let mut blocks = Vec::with_capacity(groups);
        let (mut c_off, mut n_off) = (0, 0);
        for g in 0..groups {
            let (cg, ng) = (channel_counts[g], kernel_counts[g]);
            if ng == 0 {
                blocks.push(None);
            } else {
                let mut data = Vec::with_capacity(ng * cg * taps);
                for i in 0..ng {
                    let n = kernel_perm.perm()[n_off + i];
                    for j in 0..cg {
                        let c = channel_perm.perm()[c_off + j];
                        let start = (n * c_total + c) * taps;
                        data.extend_from_slice(&weight.data()[start..start + taps]);
                    }
                }
                let [kd, kh, kw] = spec.kernel;
                blocks.push(Some(NdArray::new(vec![ng, cg, kd, kh, kw], data)?));
            }
            c_off += cg;
            n_off += ng;
        }
        Ok(Self {
            spec,
            blocks,
            channel_perm,
            kernel_perm,
            channel_counts,
            kernel_counts,
        })
    }

    pub fn groups(&self) -> usize {
        self.blocks.len()
    }

    /// Number of stored weights across all blocks.
    pub fn packed_params(&self) -> usize {
        self.blocks.iter().flatten().map(NdArray::len).sum()
    }

    /// Convolve an input whose channels are already in group-sorted order.
    /// The output's kernels are in group-sorted order too.
    pub fn forward_sorted(&self, x_sorted: &NdArray<T>) -> Result<NdArray<T>> {
        if x_sorted.ndim() != 5 {
            return Err(Error::Shape(format!(
                "expected [B,C,D,H,W], got {:?}",
                x_sorted.shape()
            )));
        }
        let s = x_sorted.shape();
        if s[1] != self.spec.in_channels {
            return Err(Error::dim("input channels", self.spec.in_channels, s[1]));
        }
        let geo = ConvGeometry::new(&self.spec, [s[2], s[3], s[4]])?;
        let [od, oh, ow] = geo.output;
        let n_total = self.spec.out_kernels;
        let mut out = vec![T::zero(); s[0] * n_total * od * oh * ow];
        let (mut c_off, mut n_off) = (0, 0);
        for (g, block) in self.blocks.iter().enumerate() {
            let (cg, ng) = (self.channel_counts[g], self.kernel_counts[g]);
            if let Some(block) = block {
                conv3d_accumulate(
                    x_sorted.data(),
                    s[1],
                    c_off,
                    cg,
                    block.data(),
                    &geo,
                    &mut out,
                    n_total,
                    n_off,
                    ng,
                );
            }
            c_off += cg;
            n_off += ng;
        }
        NdArray::new(vec![s[0], n_total, od, oh, ow], out)
    }
}

/// Harden both selections and pack the layer into per-group blocks.
pub fn freeze<T: Scalar>(layer: &LgcConv3dLayer<T>) -> Result<GroupedConv3d<T>> {
    GroupedConv3d::pack(
        &layer.weight,
        layer.spec,
        &layer.channel_sel.assignment(),
        &layer.kernel_sel.assignment(),
        layer.groups(),
    )
}

/// Reference grouped execution: reorder inputs into groups, convolve each group,
/// then restore the original kernel order.
pub fn group_forward<T: Scalar>(x: &NdArray<T>, frozen: &GroupedConv3d<T>) -> Result<NdArray<T>> {
    let x_sorted = x.gather_channels(frozen.channel_perm.perm())?;
    let y_sorted = frozen.forward_sorted(&x_sorted)?;
    y_sorted.gather_channels(frozen.kernel_perm.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hard(assign: &[usize], groups: usize, role: SelectionRole) -> SelectionMatrix<f64> {
        SelectionMatrix::from_assignment(assign, groups, role).unwrap()
    }

    fn layer_with(
        c: usize,
        n: usize,
        s_assign: &[usize],
        t_assign: &[usize],
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> LgcConv3dLayer<f64> {
        let spec = Conv3dSpec::same(c, n, 3);
        let w = NdArray::randn(&spec.weight_shape(), 1.0, rng);
        LgcConv3dLayer::from_parts(
            w,
            hard(s_assign, groups, SelectionRole::Channel),
            hard(t_assign, groups, SelectionRole::Kernel),
            spec,
        )
        .unwrap()
    }

    #[test]
    fn block_mask_for_balanced_groups() {
        let s = hard(&[0, 0, 1, 1], 2, SelectionRole::Channel);
        let t = hard(&[0, 0, 1, 1], 2, SelectionRole::Kernel);
        let u = connection_mask(&s, &t, 1.0).unwrap();
        let expect = [
            1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(u.data(), &expect);
    }

    #[test]
    fn single_group_mask_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SelectionMatrix::<f64>::random(5, 1, SelectionRole::Channel, &mut rng);
        let t = SelectionMatrix::<f64>::random(3, 1, SelectionRole::Kernel, &mut rng);
        let u = connection_mask(&s, &t, 1.0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn uniform_soft_mask_is_half() {
        let s = SelectionMatrix::new(
            NdArray::<f64>::zeros(&[4, 2]),
            SelectionMode::Soft,
            SelectionRole::Channel,
        )
        .unwrap();
        let t = SelectionMatrix::new(
            NdArray::<f64>::zeros(&[3, 2]),
            SelectionMode::Soft,
            SelectionRole::Kernel,
        )
        .unwrap();
        let u = connection_mask(&s, &t, 1.0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mismatched_groups_rejected() {
        let s = hard(&[0, 1], 2, SelectionRole::Channel);
        let t = hard(&[0, 1, 2], 3, SelectionRole::Kernel);
        assert!(connection_mask(&s, &t, 1.0).is_err());
    }

    #[test]
    fn hard_assign_argmax_and_ties() {
        let m = SelectionMatrix::new(
            NdArray::new(vec![2, 2], vec![0.2f64, 0.9, 0.5, 0.5]).unwrap(),
            SelectionMode::Soft,
            SelectionRole::Channel,
        )
        .unwrap();
        let h = hard_assign(&m);
        assert_eq!(h.assignment(), vec![1, 0]);
        assert_eq!(h.mode, SelectionMode::Hard);
        assert_eq!(hard_assign(&h), h);
    }

    #[test]
    fn soft_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SelectionMatrix::<f64>::random(6, 3, SelectionRole::Kernel, &mut rng);
        let v = m.soft_view(1.0);
        for row in v.data().chunks(3) {
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hard_mask_rows_count_group_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = layer_with(5, 4, &[0, 1, 1, 2, 1], &[2, 0, 1, 1], 3, &mut rng);
        let u = layer.mask().unwrap();
        let sizes = [1.0, 3.0, 1.0];
        for (n, row) in u.data().chunks(5).enumerate() {
            let g = layer.kernel_sel.assignment()[n];
            assert_eq!(row.iter().sum::<f64>(), sizes[g]);
        }
    }

    #[test]
    fn freeze_shapes_balanced_and_ragged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = layer_with(4, 4, &[0, 0, 1, 1], &[0, 0, 1, 1], 2, &mut rng);
        let f = freeze(&layer).unwrap();
        for b in f.blocks.iter().flatten() {
            assert_eq!(b.shape(), &[2, 2, 3, 3, 3]);
        }
        let layer = layer_with(4, 4, &[0, 0, 0, 1], &[0, 1, 1, 1], 2, &mut rng);
        let f = freeze(&layer).unwrap();
        assert_eq!(f.blocks[0].as_ref().unwrap().shape()[..2], [1, 3]);
        assert_eq!(f.blocks[1].as_ref().unwrap().shape()[..2], [3, 1]);
        assert_eq!(f.channel_counts.iter().sum::<usize>(), 4);
        assert_eq!(f.kernel_counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn channel_empty_group_with_kernels_cannot_freeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = layer_with(3, 3, &[0, 0, 0], &[0, 1, 1], 2, &mut rng);
        assert!(matches!(freeze(&layer), Err(Error::Freeze(_))));
        // channels without kernels are fine
        let layer = layer_with(3, 3, &[0, 1, 1], &[0, 0, 0], 2, &mut rng);
        let f = freeze(&layer).unwrap();
        assert!(f.blocks[1].is_none());
    }

    #[test]
    fn frozen_matches_masked_full_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = layer_with(4, 4, &[1, 0, 1, 0], &[0, 1, 1, 0], 2, &mut rng);
        let f = freeze(&layer).unwrap();
        for _ in 0..50 {
            let x = NdArray::randn(&[2, 4, 3, 4, 4], 1.0, &mut rng);
            let a = lgc_forward(&x, &layer).unwrap();
            let b = group_forward(&x, &f).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn one_group_is_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = Conv3dSpec::same(3, 2, 3);
        let mut layer = LgcConv3dLayer::<f64>::new(spec, 1, &mut rng).unwrap();
        let x = NdArray::randn(&[1, 3, 3, 3, 3], 1.0, &mut rng);
        let plain = ops::conv3d(&x, &layer.weight, &spec).unwrap();
        assert!(lgc_forward(&x, &layer).unwrap().max_abs_diff(&plain) <= 1e-6);
        layer.set_mode(SelectionMode::Hard);
        let f = freeze(&layer).unwrap();
        assert!(group_forward(&x, &f).unwrap().max_abs_diff(&plain) <= 1e-12);
    }

    #[test]
    fn regularizer_values() {
        let uniform = SelectionMatrix::new(
            NdArray::<f64>::zeros(&[4, 2]),
            SelectionMode::Soft,
            SelectionRole::Channel,
        )
        .unwrap();
        assert_eq!(group_regularizer(&uniform, &uniform, 1.0), 0.0);
        let peaked = SelectionMatrix::new(
            NdArray::from_fn(&[4, 2], |i| if i % 2 == 0 { 800.0 } else { 0.0 }),
            SelectionMode::Soft,
            SelectionRole::Channel,
        )
        .unwrap();
        let p = group_regularizer(&peaked, &uniform, 1.0);
        assert!((p - 1.0).abs() < 1e-12, "{p}");
    }

    #[test]
    fn soft_gradients_reach_selection_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = Conv3dSpec::same(3, 4, 3);
        let layer = LgcConv3dLayer::<f64>::new(spec, 2, &mut rng).unwrap();
        let x = NdArray::randn(&[1, 3, 3, 3, 3], 1.0, &mut rng);
        let probe = NdArray::randn(&[1, 4, 3, 3, 3], 1.0, &mut rng);
        let params = vec![
            layer.weight.clone(),
            layer.channel_sel.logits.clone(),
            layer.kernel_sel.logits.clone(),
        ];
        let report = finite_difference_check(
            |g, p| {
                let xv = g.constant(x.clone());
                let vars = LgcVars {
                    weight: p[0],
                    channel_logits: p[1],
                    kernel_logits: p[2],
                };
                let y = layer.forward_graph(g, xv, &vars)?;
                let c = g.constant(probe.clone());
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
        assert!(report.analytic[1].data().iter().any(|&v| v.abs() > 1e-8));
        assert!(report.analytic[2].data().iter().any(|&v| v.abs() > 1e-8));
    }

    #[test]
    fn soft_mask_approaches_hard_with_temperature() {
        // distinct logits per row with gaps of at least 0.1
        let logits = |rows| NdArray::<f64>::from_fn(&[rows, 3], |i| ((7 * (i / 3) + 3 * (i % 3)) % 5) as f64 * 0.1);
        let s = SelectionMatrix::new(logits(5), SelectionMode::Soft, SelectionRole::Channel).unwrap();
        let t = SelectionMatrix::new(logits(4), SelectionMode::Soft, SelectionRole::Kernel).unwrap();
        let hard_u = connection_mask(&hard_assign(&s), &hard_assign(&t), 1.0).unwrap();
        let devs: Vec<f64> = [1.0, 10.0, 1000.0]
            .iter()
            .map(|&temp| connection_mask(&s, &t, temp).unwrap().max_abs_diff(&hard_u))
            .collect();
        assert!(devs[0] > devs[1] && devs[1] > devs[2], "{devs:?}");
        assert!(devs[2] < 1e-3);
    }
}

//! Cross-module invariants as property tests: convolution linearity, softmax rows,
//! hard-mask structure, the grouped decomposition in f64, soft-to-hard continuity,
//! compiled equivalence in f64, parameter monotonicity and the best-epoch contract.

use lgc3d_core::autodiff::Graph;
use lgc3d_core::compiler::{compile, run_compiled, FrozenNetwork};
use lgc3d_core::densenet::{build_model, count_costs, predefined, predefined_configs};
use lgc3d_core::hsi::{normalize, stratified_split, synth_cube, SynthParams};
use lgc3d_core::lgc::{
    connection_mask, freeze, group_forward, lgc_forward, LgcConv3dLayer, SelectionMatrix, SelectionMode, SelectionRole,
};
use lgc3d_core::network::{random_cover, toy_chain, Network};
use lgc3d_core::ops::{conv3d, softmax_rows, Conv3dSpec};
use lgc3d_core::train::{train, TrainConfig};
use lgc3d_core::NdArray;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hard_layer(seed: u64, c: usize, n: usize, g: usize, k: usize) -> (LgcConv3dLayer<f64>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = Conv3dSpec::same(c, n, k);
    let channels = random_cover(c, g, &mut rng);
    let kernels: Vec<usize> = (0..n).map(|_| rng.random_range(0..g)).collect();
    let layer = LgcConv3dLayer::from_parts(
        NdArray::randn(&spec.weight_shape(), 0.5, &mut rng),
        SelectionMatrix::from_assignment(&channels, g, SelectionRole::Channel).unwrap(),
        SelectionMatrix::from_assignment(&kernels, g, SelectionRole::Kernel).unwrap(),
        spec,
    )
    .unwrap();
    (layer, channels, kernels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = Conv3dSpec {
            in_channels: rng.random_range(1..=3),
            out_kernels: rng.random_range(1..=3),
            kernel: [3, 1, 2],
            stride: [1, rng.random_range(1..=2), 1],
            padding: [1, 0, rng.random_range(0..=1)],
        };
        let shape = [2, spec.in_channels, 3, 4, 3];
        let x1: NdArray<f64> = NdArray::randn(&shape, 1.0, &mut rng);
        let x2 = NdArray::randn(&shape, 1.0, &mut rng);
        let w = NdArray::randn(&spec.weight_shape(), 1.0, &mut rng);
        let mix = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let lhs = conv3d(&mix, &w, &spec).unwrap();
        let (y1, y2) = (conv3d(&x1, &w, &spec).unwrap(), conv3d(&x2, &w, &spec).unwrap());
        let rhs = y1.zip_map(&y2, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..7, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = NdArray::randn(&[rows, cols], 3.0, &mut rng);
        let p = softmax_rows(&logits).unwrap();
        for r in p.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = NdArray::from_fn(&[rows, cols], |i| logits.data()[i] + shift * (i / cols) as f64);
        prop_assert!(softmax_rows(&shifted).unwrap().max_abs_diff(&p) <= 1e-12);
    }

    #[test]
    fn hard_mask_rows_count_their_channel_group(seed in 0u64..10_000, c in 2usize..12, n in 2usize..12, g in 1usize..5) {
        let g = g.min(c).min(n);
        let (layer, channels, kernels) = hard_layer(seed, c, n, g, 1);
        let mask = layer.mask().unwrap();
        for (row, &kg) in mask.data().chunks(c).zip(&kernels) {
            let group_size = channels.iter().filter(|&&cg| cg == kg).count();
            prop_assert_eq!(row.iter().sum::<f64>(), group_size as f64);
        }
    }

    #[test]
    fn decomposition_holds_in_f64(seed in 0u64..10_000, c in 2usize..10, n in 2usize..10, g in 1usize..5, k in 0usize..2) {
        let g = g.min(c).min(n);
        let (layer, _, _) = hard_layer(seed, c, n, g, 2 * k + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = NdArray::randn(&[2, c, 3, 4, 3], 1.0, &mut rng);
        let frozen = freeze(&layer).unwrap();
        let full = lgc_forward(&x, &layer).unwrap();
        prop_assert!(full.max_abs_diff(&group_forward(&x, &frozen).unwrap()) <= 1e-10);

        // restoring the kernel order undoes the sort exactly
        let sorted = frozen.forward_sorted(&x.gather_channels(frozen.channel_perm.perm()).unwrap()).unwrap();
        let back = sorted.gather_channels(frozen.kernel_perm.inverse()).unwrap();
        prop_assert_eq!(back.gather_channels(frozen.kernel_perm.perm()).unwrap(), sorted);
    }

    #[test]
    fn soft_mask_converges_to_hard_mask(seed in 0u64..10_000, c in 2usize..8, n in 2usize..8, g in 2usize..4) {
        let g = g.min(c).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = |rows: usize, role, rng: &mut ChaCha8Rng| {
            // each row's maximum leads the runner-up by more than 1
            let mut logits = NdArray::from_fn(&[rows, g], |_| rng.random_range(-1.0..1.0));
            for r in 0..rows {
                let top = rng.random_range(0..g);
                logits.data_mut()[r * g + top] = 2.0;
            }
            SelectionMatrix::<f64>::new(logits, SelectionMode::Soft, role).unwrap()
        };
        let s = sel(c, SelectionRole::Channel, &mut rng);
        let t = sel(n, SelectionRole::Kernel, &mut rng);
        let hard = {
            let (mut hs, mut ht) = (s.clone(), t.clone());
            hs.mode = SelectionMode::Hard;
            ht.mode = SelectionMode::Hard;
            connection_mask(&hs, &ht, 1.0).unwrap()
        };
        let dev: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&scale| connection_mask(&s, &t, scale).unwrap().max_abs_diff(&hard))
            .collect();
        prop_assert!(dev[0] > dev[1] && dev[1] > dev[2], "{:?}", dev);
        prop_assert!(dev[2] < 1e-6);
    }

    #[test]
    fn soft_selection_logits_receive_gradient(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = Conv3dSpec::same(3, 4, 3);
        let layer = LgcConv3dLayer::<f64>::new(spec, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(NdArray::randn(&[2, 3, 3, 3, 3], 1.0, &mut rng));
        let vars = layer.register(&mut g);
        let y = layer.forward_graph(&mut g, x, &vars).unwrap();
        let sq = g.square(y);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        for v in [vars.channel_logits, vars.kernel_logits] {
            let grad = g.grad(v).expect("selection logits reached");
            prop_assert!(grad.data().iter().any(|d| d.abs() > 1e-12));
        }
    }

    #[test]
    fn compiled_chain_matches_frozen_in_f64(seed in 0u64..10_000, depth in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=9)).collect();
        let groups: Vec<usize> = widths.windows(2).map(|p| rng.random_range(1..=p[0].min(p[1]).min(4))).collect();
        let mut net: Network<f64> = toy_chain(&widths, &groups, [3, 4, 4], 3, 3, &mut rng).unwrap();
        net.randomize_hard_groups(&mut rng);
        net.randomize_norms(&mut rng);
        let frozen = FrozenNetwork::from_network(&net).unwrap();
        let plan = compile(&frozen).unwrap();
        let x = NdArray::randn(&[4, widths[0], 3, 4, 4], 1.0, &mut rng);
        let (a, _) = frozen.forward_naive(&x).unwrap();
        let (b, stats) = run_compiled(&x, &plan).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
        prop_assert_eq!(stats.total_gathers(), depth + 1);
        prop_assert_eq!(stats.permutation_builds, 0);
    }
}

#[test]
fn parameter_counts_grow_with_model_size() {
    for bands in [16, 50, 200] {
        let counts: Vec<u64> = predefined_configs()
            .iter()
            .map(|cfg| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let net: Network<f32> = build_model(&cfg.with_input(bands, 9), &mut rng).unwrap();
                count_costs(&net).unwrap().params
            })
            .collect();
        assert!(
            counts[0] < counts[1] && counts[1] < counts[2],
            "{bands} bands: {counts:?}"
        );
    }
}

#[test]
fn saved_epoch_is_the_best_logged_validation_epoch() {
    let cube = normalize(
        &synth_cube(&SynthParams {
            size: 14,
            bands: 6,
            classes: 3,
            noise: 0.2,
            seed: 9,
        })
        .unwrap(),
    );
    let split = stratified_split(&cube, [6, 1, 3], 2).unwrap();
    let mut model = predefined("desk").unwrap();
    model.num_classes = 3;
    model.patch = 5;
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        temperature_end: 10.0,
        ..TrainConfig::default()
    };
    let out = train(&cube, &split, &model, &cfg, None).unwrap();
    let ck = &out.checkpoint;
    let best = ck.history.iter().map(|e| e.val_oa).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(ck.best_val_oa, best);
    let first_best = ck.history.iter().position(|e| e.val_oa == best).unwrap();
    assert_eq!(ck.history[first_best].epoch, ck.epoch);
    assert_eq!(ck.history.len(), cfg.epochs);
}

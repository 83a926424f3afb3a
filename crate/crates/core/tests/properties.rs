//! Property tests for the invariants each module promises.

use fortress::analysis::{count_flops, count_params, reduction_factor, RowKind};
use fortress::data::loader::{collate, load_batches, LoaderConfig};
use fortress::data::synth::synth_sample;
use fortress::data::{augment, dli_inject, pnm, AugOp, DliConfig, Mask, PatchBank, Sample, SynthConfig};
use fortress::metrics::ConfusionMatrix;
use fortress::model::{checkpoint, FortressModel, ModelConfig};
use fortress::nn::blocks::{ChannelAttention, KanDoubleConv, SpatialAttention};
use fortress::nn::{ParamStore, Session};
use fortress::tensor::gradcheck::uniform;
use fortress::tensor::{PoolKind, ResizeMode, Tape, Tensor};
use fortress::tikan::spline::{bspline_basis, spline_eval};
use fortress::tikan::{gate, Tikan, TikanConfig};
use fortress::train::{lr_at, total_loss, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn relabel(mask: &Mask, perm: &[u8]) -> Mask {
    Mask::new(mask.height(), mask.width(), mask.data().iter().map(|&v| perm[v as usize]).collect()).unwrap()
}

fn counts_of(samples: &[Sample], k: usize) -> Vec<u64> {
    let mut t = vec![0u64; k];
    for s in samples {
        for (a, b) in t.iter_mut().zip(s.mask.class_counts(k).unwrap()) {
            *a += b;
        }
    }
    t
}

fn mask_pair(k: u8) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0..k, 64), prop::collection::vec(0..k, 64))
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let x = uniform([2, 5, 3, 3], -8.0, 8.0, seed);
        let mut t = Tape::<f64>::new();
        let a = t.leaf(x.clone(), false).unwrap();
        let b = t.leaf(x.map(|v| v + shift), false).unwrap();
        let ya = t.softmax_channel(a).unwrap();
        let yb = t.softmax_channel(b).unwrap();
        let (va, vb) = (t.value(ya).clone(), t.value(yb).clone());
        for n in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..5).map(|c| va.at([n, c, p / 3, p % 3])).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        for (p, q) in va.data().iter().zip(vb.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_upsample_then_max_pool_is_identity_on_constants(v in -5.0f64..5.0, h in 1usize..6, w in 1usize..6) {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full([1, 2, h, w], v), false).unwrap();
        let up = t.resize2x(x, ResizeMode::Nearest).unwrap();
        let down = t.pool(up, PoolKind::Max2x2).unwrap();
        prop_assert_eq!(t.value(down), t.value(x));
    }

    #[test]
    fn grouped_conv_equals_block_diagonal_dense_conv(seed in 0u64..1000, groups in 1usize..4) {
        let (cin, cout) = (2 * groups, 3 * groups);
        let x = uniform([1, cin, 5, 5], -1.0, 1.0, seed);
        let wg = uniform([cout, 2, 3, 3], -1.0, 1.0, seed + 1);
        let dense = Tensor::from_fn([cout, cin, 3, 3], |[o, i, a, b]| {
            if i / 2 == o / 3 { wg.at([o, i % 2, a, b]) } else { 0.0 }
        });
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(x, false).unwrap();
        let wgv = t.leaf(wg, false).unwrap();
        let wdv = t.leaf(dense, false).unwrap();
        let yg = t.conv2d(xv, wgv, None, groups, 1, 1).unwrap();
        let yd = t.conv2d(xv, wdv, None, 1, 1, 1).unwrap();
        for (p, q) in t.value(yg).data().iter().zip(t.value(yd).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_never_amplifies(seed in 0u64..1000, k in prop::sample::select(vec![3usize, 5, 7])) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = SpatialAttention::new(&mut store, "sa", k, &mut rng).unwrap();
        let ca = ChannelAttention::new(&mut store, "ca", 8, &mut rng).unwrap();
        let x = uniform([2, 8, 6, 6], -3.0, 3.0, seed);
        let bound = x.max_abs();
        let mut s = Session::new(&store, false, false, 0);
        let v = s.input(x, false).unwrap();
        let ys = sa.forward(&mut s, v).unwrap();
        let yc = ca.forward(&mut s, v).unwrap();
        prop_assert!(s.tape.value(ys).max_abs() <= bound);
        prop_assert!(s.tape.value(yc).max_abs() <= bound);
    }

    #[test]
    fn closed_gate_ignores_enhancement_parameters(seed in 0u64..1000, scale in -10.0f32..10.0) {
        let mut store = ParamStore::<f32>::new();
        let tk = TikanConfig::default();
        let block = KanDoubleConv::new(&mut store, "b", 16, 16, Some(&tk), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = uniform([1, 16, 4, 4], -1.0, 1.0, seed).cast::<f32>();
        let run = |store: &ParamStore<f32>| {
            let mut s = Session::new(store, false, false, 0);
            let v = s.input(x.clone(), false).unwrap();
            let y = block.forward_gated(&mut s, v, false).unwrap();
            s.tape.value(y).clone()
        };
        let before = run(&store);
        let names: Vec<String> = store.iter().filter(|p| p.name.contains(".tikan.")).map(|p| p.name.clone()).collect();
        prop_assert!(!names.is_empty());
        for n in names {
            let t = store.get(&n).unwrap().map(|v| v * scale + 1.0);
            store.set(&n, t).unwrap();
        }
        prop_assert_eq!(before, run(&store));
    }

    #[test]
    fn basis_partitions_unity_and_reproduces_constants(x in 0.0f64..=1.0, c in -4.0f64..4.0,
        go in prop::sample::select(vec![(5usize, 3usize), (2, 1), (8, 3), (3, 2)])) {
        let (g, o) = go;
        let b = bspline_basis(x, g, o).unwrap();
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(b.iter().all(|&v| v >= -1e-12));
        prop_assert!((spline_eval(x, &vec![c; g + o], g, o).unwrap() - c).abs() < 1e-9);
    }

    #[test]
    fn gate_is_monotone(c in 1usize..600, extra in 0usize..600, h in 1usize..80, w in 1usize..80, shrink in 0usize..80) {
        let cfg = TikanConfig::default();
        if gate(c, h, w, &cfg) {
            prop_assert!(gate(c + extra, h, w, &cfg));
            let h2 = h.saturating_sub(shrink).max(1);
            prop_assert!(gate(c, h2, w, &cfg));
        }
    }

    #[test]
    fn zero_residual_scale_is_identity(seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let cfg = TikanConfig { alpha: 0.0, ..TikanConfig::default() };
        let tk = Tikan::new(&mut store, "t", 16, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = uniform([2, 16, 4, 4], -2.0, 2.0, seed);
        for training in [false, true] {
            let mut s = Session::new(&store, training, false, seed);
            let v = s.input(x.clone(), false).unwrap();
            let y = tk.apply(&mut s, v).unwrap();
            prop_assert_eq!(s.tape.value(y), &x);
        }
    }

    #[test]
    fn learning_rate_stays_in_range_and_restarts_at_cycle_boundaries(epoch in 0.0f64..400.0, k in 1u32..12) {
        let c = TrainConfig::default();
        let lr = lr_at(epoch, &c);
        prop_assert!(lr >= c.lr_min && lr <= c.lr_max);
        let boundary = c.warmup_epochs + c.restart_epochs * k as f64;
        prop_assert_eq!(lr_at(c.warmup_epochs, &c), c.lr_max);
        prop_assert_eq!(lr_at(boundary, &c), c.lr_min);
        prop_assert!((lr_at(boundary + 1e-9, &c) - c.lr_max).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_is_continuous_inside_cycles(epoch in 0.0f64..300.0) {
        let c = TrainConfig::default();
        let h = 1e-7;
        let since = epoch - c.warmup_epochs;
        let near_restart = since > 0.0 && (since % c.restart_epochs < 1e-3 || since % c.restart_epochs > c.restart_epochs - 1e-3);
        prop_assume!(!near_restart);
        prop_assert!((lr_at(epoch + h, &c) - lr_at(epoch, &c)).abs() < 1e-9);
    }

    #[test]
    fn metrics_bounded_and_permutation_equivariant((pred, gt) in mask_pair(4), perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle()) {
        let mut a = ConfusionMatrix::new(4);
        a.accumulate_slices(&pred, &gt, None).unwrap();
        let sa = a.scores().unwrap();
        let p: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let g: Vec<u8> = gt.iter().map(|&v| perm[v as usize]).collect();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate_slices(&p, &g, None).unwrap();
        let sb = b.scores().unwrap();
        for (c, &pc) in perm.iter().enumerate() {
            let (x, y) = (&sa.per_class[c], &sb.per_class[pc as usize]);
            prop_assert_eq!(x.iou, y.iou);
            prop_assert_eq!(x.f1, y.f1);
            prop_assert!((x.mcc - y.mcc).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x.mcc));
        }
        let s = &sa.summary;
        for v in [s.f1_bg, s.f1_nobg, s.miou_bg, s.miou_nobg, s.pixel_acc, s.bal_acc, s.fwiou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if perm[0] == 0 {
            let t = &sb.summary;
            prop_assert!((s.miou_bg - t.miou_bg).abs() < 1e-12 && (s.miou_nobg - t.miou_nobg).abs() < 1e-12);
            prop_assert!((s.f1_bg - t.f1_bg).abs() < 1e-12 && (s.f1_nobg - t.f1_nobg).abs() < 1e-12);
            prop_assert!((s.bal_acc - t.bal_acc).abs() < 1e-12 && (s.fwiou - t.fwiou).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_accumulation_is_partition_invariant((pred, gt) in mask_pair(3), cut in 0usize..64) {
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate_slices(&pred, &gt, None).unwrap();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate_slices(&pred[cut..], &gt[cut..], None).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate_slices(&pred[..cut], &gt[..cut], None).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(a, whole);
    }

    #[test]
    fn fwiou_of_single_gt_class_is_its_iou(pred in prop::collection::vec(0u8..3, 64), class in 0u8..3) {
        let gt = vec![class; 64];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate_slices(&pred, &gt, None).unwrap();
        let s = cm.scores().unwrap();
        prop_assert!((s.summary.fwiou - s.per_class[class as usize].iou.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mask_bytes_round_trip(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..h * w).map(|_| rand::Rng::gen(&mut rng)).collect();
        let m = Mask::new(h, w, data).unwrap();
        let bytes = pnm::encode_mask(&m);
        prop_assert_eq!(pnm::decode_mask(&bytes).unwrap(), m.clone());
        prop_assert_eq!(pnm::encode_mask(&pnm::decode_mask(&bytes).unwrap()), bytes);
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn geometric_augmentations_commute_with_relabeling(index in 0usize..200, seed in 0u64..1000,
        op in prop::sample::select(vec![AugOp::Hflip, AugOp::Rot30, AugOp::Rot50]),
        defects in Just(vec![1u8, 2, 3]).prop_shuffle()) {
        // Rotation pads with background, so background keeps its label.
        let perm: Vec<u8> = std::iter::once(0).chain(defects).collect();
        let s = synth_sample(&SynthConfig::default(), index).unwrap();
        let relabeled = Sample::new(s.id.clone(), s.image.clone(), relabel(&s.mask, &perm)).unwrap();
        let a = augment(&relabeled, &[op], &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(&s, &[op], &mut ChaCha8Rng::seed_from_u64(seed));
        let expected = relabel(&b.mask, &perm);
        let differing = a.mask.data().iter().zip(expected.data()).filter(|(x, y)| x != y).count();
        prop_assert_eq!(differing, 0);
        prop_assert!(a.image == b.image);
    }

    #[test]
    fn loader_outputs_stay_in_bounds(seed in 0u64..1000, resize in prop::option::of(prop::sample::select(vec![32usize, 48, 64, 80]))) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..6)
            .map(|i| augment(&synth_sample(&cfg, i).unwrap(), &[AugOp::Rot30, AugOp::Histeq], &mut rng))
            .collect();
        let lc = LoaderConfig { batch_size: 4, seed, resize_to: resize, normalize: false, ..LoaderConfig::default() };
        for b in load_batches(&samples, lc, 1).unwrap() {
            let b = b.unwrap();
            prop_assert!(b.images.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!(b.masks.iter().all(|m| m.data().iter().all(|&v| (v as usize) < cfg.num_classes)));
            if let Some(r) = resize {
                prop_assert_eq!(b.images.shape().h(), r);
            }
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        prop_assert!(collate(&refs, resize, true).unwrap().images.all_finite());
    }

    #[test]
    fn injection_preserves_pixels_and_existing_defects(index in 0usize..200, seed in 0u64..1000, max_patches in 1usize..4) {
        let cfg = SynthConfig::default();
        let donors: Vec<Sample> = (200..230).map(|i| synth_sample(&cfg, i).unwrap()).collect();
        let bank = PatchBank::from_samples(&donors);
        let s = synth_sample(&cfg, index).unwrap();
        let k = cfg.num_classes;
        let mut counts = counts_of(&donors, k);
        let before_counts = counts.clone();
        let dli = DliConfig { max_patches, ..DliConfig::default() };
        let (out, report) = dli_inject(&s, &bank, &mut ChaCha8Rng::seed_from_u64(seed), &dli, &mut counts).unwrap();
        let (a, b) = (s.mask.class_counts(k).unwrap(), out.mask.class_counts(k).unwrap());
        prop_assert_eq!(a.iter().sum::<u64>(), b.iter().sum::<u64>());
        for c in 1..k {
            prop_assert!(b[c] >= a[c]);
            prop_assert_eq!(counts[c] - before_counts[c], b[c] - a[c]);
            prop_assert_eq!(report.added[c], b[c] - a[c]);
        }
        for (x, y) in s.mask.data().iter().zip(out.mask.data()) {
            if *x != 0 {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn loss_is_non_negative_and_reduces_to_final_term(seed in 0u64..1000, t in 0.0f64..5000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<Mask> = (0..2)
            .map(|_| Mask::new(8, 8, (0..64).map(|_| rand::Rng::gen_range(&mut rng, 0..3u8)).collect()).unwrap())
            .collect();
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(uniform([2, 3, 8, 8], -4.0, 4.0, seed), false).unwrap();
        let aux = tape.leaf(uniform([2, 3, 4, 4], -4.0, 4.0, seed + 1), false).unwrap();
        let w = [1.0, 2.0, 0.5];
        let full = total_loss(&mut tape, logits, &[aux], &masks, &w, &[0.4], t, 1000.0).unwrap();
        let bare = total_loss(&mut tape, logits, &[aux], &masks, &w, &[0.0], t, 1000.0).unwrap();
        let none = total_loss(&mut tape, logits, &[], &masks, &w, &[], t, 1000.0).unwrap();
        prop_assert!(tape.value(full).item() >= 0.0);
        prop_assert!(tape.value(full).item() >= tape.value(bare).item());
        prop_assert_eq!(tape.value(bare).item(), tape.value(none).item());
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn analyzer_rows_are_additive_and_match_the_twin_rule(size in prop::sample::select(vec![64usize, 128, 256])) {
        let cfg = ModelConfig { input_size: size, ..ModelConfig::default() };
        let r = count_flops(&cfg, size, size).unwrap();
        prop_assert_eq!(r.rows.iter().map(|x| x.flops).sum::<u64>(), r.totals.flops);
        prop_assert_eq!(r.rows.iter().map(|x| x.params).sum::<u64>(), r.totals.params);
        for row in r.rows.iter().filter(|x| x.kind == RowKind::DsConv) {
            let ratio = row.conv_ratio().unwrap();
            prop_assert!((ratio - reduction_factor(3, row.c_out)).abs() < 1e-12, "{}: {ratio}", row.name);
        }
    }

    #[test]
    fn parameter_count_survives_checkpoint_round_trip(seed in 0u64..100) {
        let cfg = ModelConfig { widths: vec![8, 16, 32, 64, 128], num_classes: 3, input_size: 64, ..ModelConfig::default() };
        let model = FortressModel::<f32>::build(&cfg, seed).unwrap();
        let back: FortressModel<f32> = checkpoint::from_bytes(&checkpoint::to_bytes(&model).unwrap()).unwrap();
        let (a, b) = (count_params(model.config()).unwrap(), count_params(back.config()).unwrap());
        prop_assert_eq!(a.totals.params, b.totals.params);
        prop_assert_eq!(model.store().trainable_numel(), back.store().trainable_numel());
        prop_assert_eq!(a.totals.params as usize, back.store().trainable_numel());
    }
}

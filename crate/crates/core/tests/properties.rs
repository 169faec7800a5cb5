use proptest::prelude::*;

use eocd::data::{
    batch_order, decode_pgm, decode_ppm, encode_pgm, encode_ppm, generate_scene, generate_synthetic_dataset, load_pgm,
    BitemporalSample, SynthConfig,
};
use eocd::eval::{count_flops, metrics_from_confusion, ConfusionCounts};
use eocd::losses::ce_loss;
use eocd::network::{FusionMode, Model, ModelConfig};
use eocd::rng::stream;
use eocd::train::{adamw_step, flip_pair, lr_at, oracle_teacher_predict, OptimizerState, TrainConfig};
use eocd::{Mask, Shape, Tape, Tensor};

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..3, 1usize..9, 1usize..9).prop_flat_map(|(n, h, w)| {
        prop::collection::vec(0u8..2, n * h * w).prop_map(move |d| Mask::new(n, h, w, d).unwrap())
    })
}

fn sample_strategy() -> impl Strategy<Value = BitemporalSample> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
        let img = prop::collection::vec(0.0f32..1.0, 3 * h * w);
        (img.clone(), img, prop::collection::vec(0u8..2, h * w)).prop_map(move |(a, b, m)| BitemporalSample {
            pre: Tensor::new(Shape::new(1, 3, h, w), a).unwrap(),
            post: Tensor::new(Shape::new(1, 3, h, w), b).unwrap(),
            mask: Mask::new(1, h, w, m).unwrap(),
        })
    })
}

proptest! {
    #[test]
    fn f1_is_a_function_of_iou(tp in 0u64..1_000_000, fp in 0u64..1_000_000, fn_ in 0u64..1_000_000, tn in 0u64..1_000_000) {
        let m = metrics_from_confusion(&ConfusionCounts::new(tp, fp, fn_, tn));
        prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        for v in [m.iou, m.f1, m.oa] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.iou <= m.f1);
    }

    #[test]
    fn confusion_merge_is_additive(a in prop::array::uniform4(0u64..1000), b in prop::array::uniform4(0u64..1000)) {
        let mut x = ConfusionCounts::new(a[0], a[1], a[2], a[3]);
        x.merge(&ConfusionCounts::new(b[0], b[1], b[2], b[3]));
        prop_assert_eq!(x, ConfusionCounts::new(a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]));
        prop_assert_eq!(x.total(), a.iter().chain(&b).sum::<u64>());
    }

    #[test]
    fn batch_order_partitions_the_dataset(len in 0usize..60, bs in 1usize..9, seed in any::<u64>(), epoch in 0usize..5, shuffle in any::<bool>()) {
        let batches = batch_order(len, bs, seed, epoch, shuffle);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert_eq!(batches.len(), len.div_ceil(bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(batches.clone(), batch_order(len, bs, seed, epoch, shuffle));
    }

    #[test]
    fn lr_is_monotone_and_bounded(total in 1usize..500, base in 1e-6f64..1.0) {
        prop_assert_eq!(lr_at(0, total, base), base);
        prop_assert_eq!(lr_at(total, total, base), 0.0);
        let mut prev = f64::INFINITY;
        for step in 0..=total + 2 {
            let lr = lr_at(step, total, base);
            prop_assert!(lr <= prev && lr >= 0.0 && lr <= base);
            prev = lr;
        }
    }

    #[test]
    fn double_flip_is_identity(s in sample_strategy(), horizontal in any::<bool>()) {
        prop_assert_eq!(flip_pair(&flip_pair(&s, horizontal), horizontal), s);
    }

    #[test]
    fn oracle_teacher_rows_sum_to_one(m in mask_strategy(), smoothing in 0.0f64..1.0, blur in prop::option::of(0.3f32..1.0)) {
        let p = oracle_teacher_predict(&m, smoothing, blur);
        let plane = m.h() * m.w();
        prop_assert_eq!(p.shape(), Shape::new(m.n(), 2, m.h(), m.w()));
        for b in 0..m.n() {
            for i in 0..plane {
                let (a, c) = (p.data()[2 * b * plane + i], p.data()[(2 * b + 1) * plane + i]);
                prop_assert!((a + c - 1.0).abs() < 1e-6);
                prop_assert!(a >= 0.0 && c >= 0.0);
            }
        }
    }

    #[test]
    fn netpbm_round_trips(h in 1usize..9, w in 1usize..9, q in prop::collection::vec(0u8..=255, 3 * 64), m in prop::collection::vec(0u8..2, 64)) {
        let img = Tensor::new(Shape::new(1, 3, h, w), q[..3 * h * w].iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img).unwrap()).unwrap(), img);
        let mask = Mask::new(1, h, w, m[..h * w].to_vec()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn synthetic_mask_is_the_occupancy_xor(seed in any::<u64>()) {
        let cfg = SynthConfig { size: 32, shape_extent: [4, 10], ..SynthConfig::default() };
        let scene = generate_scene(&cfg, &mut stream(seed, 0)).unwrap();
        let xor: Vec<u8> = scene.occupancy_pre.iter().zip(&scene.occupancy_post).map(|(a, b)| a ^ b).collect();
        prop_assert_eq!(scene.sample.mask.data(), &xor[..]);
        let f = scene.sample.mask.change_fraction();
        prop_assert!(f >= cfg.change_fraction[0] && f <= cfg.change_fraction[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flops_add_up_and_grow_with_size(
        preset in prop::sample::select(ModelConfig::PRESETS.to_vec()),
        naive in any::<bool>(),
        k in 1usize..4,
    ) {
        let mut cfg = ModelConfig::preset(preset).unwrap();
        if naive {
            cfg = cfg.with_fusion(FusionMode::Naive);
        }
        let small = count_flops(&cfg, (32 * k, 32 * k)).unwrap();
        let big = count_flops(&cfg, (32 * (k + 1), 32 * k)).unwrap();
        prop_assert_eq!(small.total, small.by_stage.iter().map(|(_, v)| v).sum::<u64>());
        prop_assert!(big.total > small.total);
        for (name, v) in &small.by_stage {
            prop_assert!(big.stage(name) >= *v);
        }
    }
}

#[test]
fn written_masks_respect_change_fraction_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        size: 32,
        n_train: 12,
        n_val: 4,
        n_test: 4,
        shape_extent: [4, 10],
        change_fraction: [0.05, 0.3],
        seed: 8,
        ..SynthConfig::default()
    };
    let indices = generate_synthetic_dataset(&cfg, tmp.path()).unwrap();
    let mut seen = 0;
    for index in &indices {
        for id in index.ids() {
            let [_, _, label] = index.paths(id);
            let mask = load_pgm(label).unwrap();
            let f = mask.count_ones() as f64 / mask.len() as f64;
            assert!((0.05..=0.3).contains(&f), "{id}: {f}");
            seen += 1;
        }
    }
    assert_eq!(seen, 20);
}

#[test]
fn single_batch_overfits() {
    let cfg = SynthConfig {
        size: 32,
        shape_extent: [4, 10],
        ..SynthConfig::default()
    };
    let samples = eocd::data::generate_split(&cfg, 0, 4).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let ids = (0..4).map(|i| i.to_string()).collect();
    let batch = eocd::data::Batch::from_samples(ids, &refs).unwrap();
    let mut model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let mut state = OptimizerState::new(model.params());
    let hyper = TrainConfig::default().hyper();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::<f32>::new();
        let p = model.bind(&mut tape, true);
        let pre = tape.constant(batch.pre.clone());
        let post = tape.constant(batch.post.clone());
        let out = model.forward(&mut tape, &p, pre, post).unwrap();
        let loss = ce_loss(&mut tape, out.logits, &batch.mask).unwrap();
        losses.push(tape.value(loss).item());
        tape.backward(loss).unwrap();
        let grads: Vec<_> = model.params().iter().map(|(n, _)| tape.grad(p.get(n).unwrap())).collect();
        adamw_step(model.params_mut(), &grads, &mut state, &hyper, 3e-4).unwrap();
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

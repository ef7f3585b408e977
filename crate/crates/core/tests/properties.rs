use proptest::prelude::*;

use avfusion_core::data::{generate, Label, Sample, SynthSpec};
use avfusion_core::fusion::{attention_vector, Task};
use avfusion_core::harness::{mean3, report_table, parse_report_csv, EvalReport, MetricKind};
use avfusion_core::layers::{conv1d_direct, BatchNorm1d, Branch, BranchConfig, Modality, Stage};
use avfusion_core::params::{Forward, ParamStore};
use avfusion_core::robustness::{apply_hard_dropout, TestSetting};
use avfusion_core::{Fill, Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-50.0..50.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| tensor(vec![r, c]))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(9), scale in prop::sample::select(vec![1.0, 20.0, 1e3])) {
        let c = x.shape()[1];
        let mut tape = Tape::new();
        let v = tape.constant(x.map(|e| e * scale));
        let s = tape.softmax(v, 1).unwrap();
        for row in tape.value(s).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_is_linear((a, b) in (1..6usize, 1..6usize, 1..6usize)
        .prop_flat_map(|(m, k, n)| (tensor(vec![m, k]), tensor(vec![k, n]))),
        alpha in -4.0..4.0f64)
    {
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b);
        let y = tape.matmul(av, bv).unwrap();
        let sa = tape.constant(a.map(|e| alpha * e));
        let ys = tape.matmul(sa, bv).unwrap();
        let want = tape.value(y).map(|e| alpha * e);
        let tol = 1e-12 * (1.0 + want.data().iter().fold(0.0f64, |m, e| m.max(e.abs())));
        prop_assert!(tape.value(ys).max_abs_diff(&want) <= tol);
    }

    #[test]
    fn conv1d_matches_direct_loops(
        (b, n, c_in, c_out, k) in (1..3usize, 1..10usize, 1..4usize, 1..4usize, 1..5usize),
        stride in 1..3usize,
        pad in 0..3usize,
        seed in any::<u64>(),
    ) {
        prop_assume!(n + 2 * pad >= k);
        let x = Tensor::make([b, n, c_in], Fill::Gaussian, seed);
        let w = Tensor::make([c_out, c_in, k], Fill::Gaussian, seed ^ 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv1d(xv, wv, stride, pad).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&conv1d_direct(&x, &w, stride, pad)) < 1e-12);
    }

    #[test]
    fn conv_relu_pool_is_positively_homogeneous(alpha in 0.01..10.0f64, seed in any::<u64>()) {
        let x = Tensor::make([2, 8, 3], Fill::Gaussian, seed);
        let w = Tensor::make([4, 3, 3], Fill::Gaussian, seed ^ 7);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.constant(w.clone());
            let y = tape.conv1d(xv, wv, 1, 1).unwrap();
            let y = tape.relu(y);
            let y = tape.maxpool1d(y, 2).unwrap();
            tape.value(y).clone()
        };
        let base = run(x.clone()).map(|e| alpha * e);
        prop_assert!(run(x.map(|e| alpha * e)).max_abs_diff(&base) < 1e-11);
    }

    #[test]
    fn maxpool_routes_gradient_exactly(x in (1..12usize, 1..4usize).prop_flat_map(|(n, c)| tensor(vec![1, n, c])),
        k in 1..4usize)
    {
        prop_assume!(x.shape()[1] >= k);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let y = tape.maxpool1d(xv, k).unwrap();
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        // small integers keep every partial sum exact
        let g = Tensor::new(shape, (0..n).map(|i| (i % 7) as f64 - 3.0).collect()).unwrap();
        let gv = tape.constant(g.clone());
        let prod = tape.mul(y, gv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let routed: f64 = grads.get(xv).unwrap().iter().sum();
        prop_assert_eq!(routed, g.sum());
        prop_assert!(grads.get(xv).unwrap().iter().filter(|&&d| d != 0.0).count() <= n);
    }

    #[test]
    fn attention_vector_mean_is_one(s in (1..4usize, 1..6usize, 1..6usize)
        .prop_flat_map(|(h, q, k)| tensor(vec![1, h, q, k])))
    {
        let (h, k) = (s.shape()[1], s.shape()[3]);
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let v = attention_vector(&mut tape, sv).unwrap();
        let vals = tape.value(v).data();
        for head in vals.chunks(k).take(h) {
            let mean = head.iter().sum::<f64>() / k as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ignores_constant_shift(x in matrix(8), shift in -100.0..100.0f64) {
        let c = x.shape()[1];
        let argmax = |row: &[f64]| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
        let shifted = x.map(|e| e + shift);
        for (a, b) in x.data().chunks(c).zip(shifted.data().chunks(c)) {
            // exact ties can break differently after rounding; skip them
            let top = a[argmax(a)];
            prop_assume!(a.iter().filter(|&&v| (v - top).abs() < 1e-9).count() == 1);
            prop_assert_eq!(argmax(a), argmax(b));
        }
    }

    #[test]
    fn hard_dropout_keeps_other_modality(seed in any::<u64>(), na in 1..8usize, nv in 1..8usize) {
        let s = Sample {
            audio: Tensor::make([na, 3], Fill::Gaussian, seed),
            vision: Tensor::make([nv, 2], Fill::Gaussian, seed ^ 3),
            label: Label::Class(1),
            group: 0,
        };
        let a = apply_hard_dropout(&s, Modality::Audio);
        prop_assert_eq!(&a.vision, &s.vision);
        prop_assert!(a.audio.data().iter().all(|&x| x == 0.0));
        let v = apply_hard_dropout(&s, Modality::Vision);
        prop_assert_eq!(&v.audio, &s.audio);
        prop_assert!(v.vision.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_prediction_costs_ln_c(classes in 2..40usize, b in 1..6usize, level in -5.0..5.0f64) {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full([b, classes], level));
        let labels: Vec<usize> = (0..b).map(|i| (i * 7) % classes).collect();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        prop_assert!((tape.value(loss).data()[0] - (classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn report_means_are_exact(vals in prop::collection::vec(0.0..1.0f64, 5)) {
        let report = EvalReport {
            name: "x".into(),
            kind: MetricKind::Accuracy,
            values: TestSetting::ALL.iter().copied().zip(vals.iter().copied()).collect(),
        };
        prop_assert_eq!(report.m(), Some(mean3(vals[0], vals[1], vals[2])));
        prop_assert_eq!(report.m_noise(), Some(mean3(vals[0], vals[3], vals[4])));
        let back = parse_report_csv(&report_table(std::slice::from_ref(&report)).unwrap().csv).unwrap();
        prop_assert_eq!(&back[0].values, &report.values);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn branch_shapes_follow_the_stage_layout(n in 1..40usize, d in 1..12usize, audio in any::<bool>()) {
        let (config, modality) = if audio {
            (BranchConfig::audio(d), Modality::Audio)
        } else {
            (BranchConfig::vision(d), Modality::Vision)
        };
        prop_assume!(modality == Modality::Vision || n >= 16);
        let mut store = ParamStore::new(1);
        let branch = Branch::new(&mut store, "b", config).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, false, false);
        let x = f.tape.constant(Tensor::make([2, n, d], Fill::Gaussian, 9));
        let (s1, s2) = branch.forward_stages(&mut f, x).unwrap();
        let (want1, want2) = match modality {
            Modality::Vision => ([2, n, 64], [2, n, 128]),
            Modality::Audio => ([2, n / 4, 128], [2, n / 16, 128]),
        };
        prop_assert_eq!(f.tape.shape(s1), &want1[..]);
        prop_assert_eq!(f.tape.shape(s2), &want2[..]);
        let both = branch.forward(&mut f, x, Stage::Both).unwrap();
        prop_assert_eq!(f.tape.value(both), f.tape.value(s2));
    }

    #[test]
    fn eval_batchnorm_is_repeatable(seed in any::<u64>()) {
        let mut store = ParamStore::new(seed);
        let bn = BatchNorm1d::new(&mut store, "bn", 3);
        store.set("bn.running_mean", Tensor::make([3], Fill::Gaussian, seed)).unwrap();
        store.set("bn.running_var", Tensor::make([3], Fill::Uniform, seed ^ 5).map(|v| v + 0.5)).unwrap();
        let x = Tensor::make([2, 5, 3], Fill::Gaussian, seed ^ 9);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, false, false);
        let xv = f.tape.constant(x);
        let y1 = bn.forward(&mut f, xv).unwrap();
        let y2 = bn.forward(&mut f, xv).unwrap();
        let (a, b) = (f.tape.value(y1).data(), f.tape.value(y2).data());
        prop_assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::make([4, 6], Fill::Gaussian, seed), true);
            let w = tape.leaf(Tensor::make([6, 3], Fill::Gaussian, seed ^ 2), true);
            let h = tape.matmul(x, w).unwrap();
            let h = tape.relu(h);
            let loss = tape.cross_entropy(h, &[0, 1, 2, 1]).unwrap();
            let g = tape.backward(loss).unwrap();
            (g.get(x).unwrap().to_vec(), g.get(w).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.0), bits(&b.0));
        prop_assert_eq!(bits(&a.1), bits(&b.1));
    }

    #[test]
    fn generation_is_seeded_and_group_disjoint(seed in any::<u64>(), group_size in 1..5usize, regression in any::<bool>()) {
        let spec = SynthSpec {
            task: if regression { Task::Regression } else { Task::Classification { classes: 3 } },
            audio_len: 8,
            vision_len: 3,
            audio_dim: 2,
            vision_dim: 3,
            train: 12,
            val: 5,
            test: 7,
            group_size,
            seed,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        prop_assert!(ds.validate().is_ok());
        prop_assert_eq!(&generate(&spec).unwrap().train, &ds.train);
        let groups = |s: &[Sample]| s.iter().map(|x| x.group).collect::<std::collections::BTreeSet<_>>();
        let (tr, va, te) = (groups(&ds.train), groups(&ds.val), groups(&ds.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    }
}

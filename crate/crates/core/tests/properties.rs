//! Property tests for the invariants of the tape, model branches, loss,
//! data formats, optimizer, schedule and fusion.

use std::f64::consts::PI;

use proptest::prelude::*;
use stepnet_core::backbone::{temporal_shift, Backbone, BackboneConfig};
use stepnet_core::config::ScheduleConfig;
use stepnet_core::data::{decode_clip, encode_clip, Manifest, ManifestRecord, Split};
use stepnet_core::fusion::{alpha_sweep, late_fuse, ExportRecord, LogitExport};
use stepnet_core::heads::{predict, total_loss, total_loss_on_tape, Head, LogitBundle};
use stepnet_core::model::{ModelConfig, StepNet};
use stepnet_core::params::ParamStore;
use stepnet_core::spatial::{attend, Gate};
use stepnet_core::temporal::{plan_segments, TemporalBranch, TemporalConfig};
use stepnet_core::tensor::{numel, softmax, Tape, Tensor, Var};
use stepnet_core::train::{lr_at, score, AdamW, Schedule};

fn values(n: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, n)
}

fn tensor(shape: &[usize], scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    let shape = shape.to_vec();
    values(numel(&shape), scale).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn row_sums(tape: &Tape<f64>, w: Var) -> Vec<f64> {
    let cols = tape.shape(w)[1];
    tape.data(w).chunks(cols).map(|r| r.iter().sum()).collect()
}

/// Mirror along the width axis of a `T×C×H×W` tensor.
fn flip_w(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let w = s[3];
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(x.data().chunks(w)) {
        for (i, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - i];
        }
    }
    out
}

/// Mirror along the height axis of a `T×C×H×W` tensor.
fn flip_h(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(x.data().chunks(h * w)) {
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
        }
    }
    out
}

/// Pooling-only model on `8×3×8×8` clips: 4×4 maps, 8 channels, 3 classes.
fn pooling_model() -> ModelConfig {
    let mut cfg = ModelConfig::from_backbone(BackboneConfig::pooling_only(3, 8, [4, 4]), 3);
    let t = cfg.temporal.as_mut().unwrap();
    t.segments = 3;
    t.segment_len = 4;
    cfg
}

fn features(cfg: &ModelConfig, seed: u64, clip: &Tensor<f64>, names: &[&str]) -> Vec<Vec<f64>> {
    let mut store = ParamStore::<f64>::seeded(seed);
    let net = StepNet::new(&mut store, cfg).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let x = tape.constant(clip);
    let fwd = net.forward(&mut tape, &p, x).unwrap();
    names
        .iter()
        .map(|n| tape.data(fwd.feature(n).unwrap()).to_vec())
        .collect()
}

fn bundle_strategy(classes: usize) -> impl Strategy<Value = LogitBundle> {
    prop::collection::vec(values(classes, 8.0), Head::ALL.len())
        .prop_map(|rows| LogitBundle::new(Head::ALL.iter().copied().zip(rows).collect()).unwrap())
}

fn export_strategy(clips: usize, classes: usize) -> impl Strategy<Value = LogitExport> {
    prop::collection::vec((0..classes, values(classes, 4.0)), clips).prop_map(|rows| {
        LogitExport::new(
            rows.into_iter()
                .enumerate()
                .map(|(i, (label, logits))| ExportRecord {
                    clip_id: format!("clip{i:03}"),
                    label,
                    logits,
                })
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(
        (rows, cols) in (1usize..5, 1usize..9),
        spread in prop_oneof![Just(1.0), Just(1e3)],
        seed in any::<u64>(),
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| spread * (((seed ^ (i as u64 * 0x9e37_79b9)) % 2001) as f64 / 1000.0 - 1.0))
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for sum in row_sums(&tape, s) {
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
        }
    }

    #[test]
    fn backward_is_bit_reproducible(x in tensor(&[3, 4], 1.0), w in tensor(&[4, 2], 1.0), r in tensor(&[3, 2], 1.0)) {
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let wv = tape.param(&w);
            let rv = tape.constant(&r);
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.tanh(y).unwrap();
            let y = tape.mul(y, rv).unwrap();
            let y = tape.softmax_rows(y).unwrap();
            let s = tape.sum(y).unwrap();
            let first = tape.backward(s).unwrap();
            let second = tape.backward(s).unwrap();
            let a = [first.get_or_zero(xv).into_data(), first.get_or_zero(wv).into_data()].concat();
            let b = [second.get_or_zero(xv).into_data(), second.get_or_zero(wv).into_data()].concat();
            (a, b)
        };
        let (a1, a2) = run();
        let (b1, _) = run();
        prop_assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    /// Integer weights keep every partial sum exact, so the scaling must be too.
    #[test]
    fn fan_out_scales_gradient_by_use_count(x in values(6, 1.0), w in prop::collection::vec(-8i32..=8, 6), k in 1usize..12) {
        let w: Vec<f64> = w.into_iter().map(f64::from).collect();
        let grad = |uses: usize| {
            let mut tape = Tape::new();
            let xv = tape.param(&Tensor::new(vec![6], x.clone()).unwrap());
            let wv = tape.constant(&Tensor::new(vec![6], w.clone()).unwrap());
            let f = tape.mul(xv, wv).unwrap();
            let mut acc = f;
            for _ in 1..uses {
                acc = tape.add(acc, f).unwrap();
            }
            let s = tape.sum(acc).unwrap();
            tape.backward(s).unwrap().get_or_zero(xv).into_data()
        };
        let one = grad(1);
        let many = grad(k);
        for i in 0..6 {
            prop_assert_eq!(many[i], k as f64 * one[i]);
            prop_assert_eq!(one[i], w[i]);
        }
    }

    #[test]
    fn temporal_shift_is_linear(
        x in tensor(&[4, 8, 2, 2], 1.0),
        y in tensor(&[4, 8, 2, 2], 1.0),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        fraction in prop_oneof![Just(0.0), Just(0.125), Just(0.25), Just(0.5)],
    ) {
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(&x), tape.constant(&y));
        let (ax, by) = (tape.scale(xv, a).unwrap(), tape.scale(yv, b).unwrap());
        let mix = tape.add(ax, by).unwrap();
        let lhs = temporal_shift(&mut tape, mix, fraction).unwrap();
        let sx = temporal_shift(&mut tape, xv, fraction).unwrap();
        let sy = temporal_shift(&mut tape, yv, fraction).unwrap();
        let (asx, bsy) = (tape.scale(sx, a).unwrap(), tape.scale(sy, b).unwrap());
        let rhs = tape.add(asx, bsy).unwrap();
        prop_assert_eq!(tape.shape(lhs), x.shape());
        prop_assert_eq!(tape.data(lhs), tape.data(rhs));
    }

    #[test]
    fn pooling_backbone_commutes_with_hflip(clip in tensor(&[3, 3, 8, 8], 1.0)) {
        let mut store = ParamStore::<f64>::seeded(0);
        let bb = Backbone::new(&mut store, &BackboneConfig::pooling_only(3, 5, [4, 4])).unwrap();
        let run = |c: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape).unwrap();
            let x = tape.constant(c);
            let m = bb.forward(&mut tape, &p, x).unwrap();
            Tensor::new(tape.shape(m).to_vec(), tape.data(m).to_vec()).unwrap()
        };
        let flipped = run(&flip_w(&clip));
        let expected = flip_w(&run(&clip));
        prop_assert_eq!(flipped.data(), expected.data());
    }

    #[test]
    fn attention_rows_sum_to_one(
        q in tensor(&[5, 4], 1.0),
        k1 in tensor(&[3, 4], 1.0),
        k2 in tensor(&[2, 4], 1.0),
        sharpness in prop_oneof![Just(1.0), Just(30.0)],
    ) {
        let mut tape = Tape::new();
        let qv = tape.constant(&q);
        let qv = tape.scale(qv, sharpness).unwrap();
        let (a, b) = (tape.constant(&k1), tape.constant(&k2));
        let residual = tape.constant(&Tensor::zeros(&[5, 4]));
        let out = attend(&mut tape, qv, &[a, b], &[a, b], residual).unwrap();
        prop_assert_eq!(tape.shape(out.weights), &[5, 5]);
        for sum in row_sums(&tape, out.weights) {
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn flips_swap_stripes_exactly(clip in tensor(&[8, 3, 8, 8], 1.0), seed in 0u64..1000) {
        let cfg = pooling_model();
        let names = ["h_l", "h_r", "h_t", "h_b", "g_sg"];
        let base = features(&cfg, seed, &clip, &names);
        let h = features(&cfg, seed, &flip_w(&clip), &names);
        prop_assert_eq!(&h[0], &base[1]);
        prop_assert_eq!(&h[1], &base[0]);
        prop_assert_eq!(&h[2], &base[2]);
        prop_assert_eq!(&h[3], &base[3]);
        prop_assert_eq!(&h[4], &base[4]);
        let v = features(&cfg, seed, &flip_h(&clip), &names);
        prop_assert_eq!(&v[2], &base[3]);
        prop_assert_eq!(&v[3], &base[2]);
        for ((l, r), g) in base[0].iter().zip(&base[1]).zip(&base[4]) {
            prop_assert!(((l + r) / 2.0 - g).abs() <= 1e-6);
        }
    }

    #[test]
    fn gate_never_amplifies(h in tensor(&[4, 6], 5.0), seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::seeded(seed);
        let gate = Gate::new(&mut store, "gate", 6, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(&h);
        let y = gate.forward(&mut tape, &p, x).unwrap();
        for (out, inp) in tape.data(y).iter().zip(h.data()) {
            prop_assert!(out.abs() <= inp.abs());
        }
    }

    #[test]
    fn segment_plans_cover_the_clip(frames in 1usize..64, count in 1usize..9, len in 1usize..64) {
        if let Ok(plan) = plan_segments(frames, count, len) {
            prop_assert_eq!(plan.starts.len(), count);
            prop_assert_eq!(plan.starts[0], 0);
            prop_assert_eq!(plan.starts[count - 1] + len, frames);
            prop_assert!(plan.starts.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn temporal_branch_sees_only_spatial_means(m in tensor(&[8, 6, 4, 4], 2.0), seed in any::<u64>()) {
        let mut cfg = TemporalConfig::for_channels(6);
        cfg.segment_len = 4;
        let mut store = ParamStore::<f64>::seeded(seed);
        let branch = TemporalBranch::new(&mut store, 6, &cfg).unwrap();
        // A 4×4 map keeps every pairwise partial sum of equal values exact.
        let mut broadcast = m.clone();
        for plane in broadcast.data_mut().chunks_mut(16) {
            let mean = plane.iter().sum::<f64>() / 16.0;
            plane.fill(mean);
        }
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape).unwrap();
            let xv = tape.constant(x);
            let t = branch.forward(&mut tape, &p, xv).unwrap();
            (tape.data(t.f_t).to_vec(), row_sums(&tape, t.attention))
        };
        let (a, sums) = run(&m);
        let (b, _) = run(&broadcast);
        for s in sums {
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-12, "f_t moved by {worst}");
    }

    #[test]
    fn total_loss_is_non_negative(b in bundle_strategy(5), label in 0usize..5) {
        prop_assert!(total_loss(&b, label).unwrap() >= 0.0);
    }

    #[test]
    fn each_head_gets_softmax_minus_onehot(b in bundle_strategy(4), label in 0usize..4) {
        let mut tape = Tape::new();
        let vars: Vec<(Head, Var)> = b
            .entries()
            .iter()
            .map(|(h, q)| (*h, tape.param(&Tensor::new(vec![q.len()], q.clone()).unwrap())))
            .collect();
        let loss = total_loss_on_tape(&mut tape, &vars, label).unwrap();
        let grads = tape.backward(loss).unwrap();
        for ((_, v), (_, q)) in vars.iter().zip(b.entries()) {
            let g = grads.get_or_zero(*v).into_data();
            let p = softmax(q);
            for c in 0..q.len() {
                let expected = p[c] - if c == label { 1.0 } else { 0.0 };
                prop_assert!((g[c] - expected).abs() <= 1e-12);
            }
        }
    }

    /// Eighths in a small range add exactly, so the shift cannot create ties.
    #[test]
    fn prediction_ignores_constant_shift(q in prop::collection::vec(-80i32..80, 6), c in -800i32..800) {
        let q: Vec<f64> = q.into_iter().map(|v| f64::from(v) / 8.0).collect();
        let shifted: Vec<f64> = q.iter().map(|v| v + f64::from(c) / 8.0).collect();
        let make = |fused: &[f64]| {
            LogitBundle::new(vec![(Head::Global, vec![0.0; 6]), (Head::Fused, fused.to_vec())]).unwrap()
        };
        prop_assert_eq!(predict(&make(&q)), predict(&make(&shifted)));
    }

    #[test]
    fn clip_files_round_trip_bit_exactly(
        (t, c, h, w) in (1usize..4, 1usize..4, 1usize..5, 1usize..5),
        bits in prop::collection::vec(any::<u32>(), 64),
    ) {
        let n = t * c * h * w;
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let v = f32::from_bits(bits[i % bits.len()]);
                if v.is_finite() { v } else { i as f32 }
            })
            .collect();
        let clip = Tensor::new(vec![t, c, h, w], data).unwrap();
        let bytes = encode_clip(&clip).unwrap();
        prop_assert_eq!(bytes.len(), 20 + 4 * n);
        let back = decode_clip(&bytes, std::path::Path::new("mem.svt")).unwrap();
        prop_assert_eq!(back.shape(), clip.shape());
        prop_assert!(back.data().iter().zip(clip.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn manifests_reject_shared_signers(rows in prop::collection::vec((0u64..5, any::<bool>()), 3..20)) {
        let records: Vec<ManifestRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(signer, test))| ManifestRecord {
                path: format!("clips/{i}.svt"),
                label: i % 3,
                split: if test { Split::Test } else { Split::Train },
                signer_id: signer,
            })
            .collect();
        let shared = (0..5).any(|s| {
            let splits: Vec<bool> = rows.iter().filter(|r| r.0 == s).map(|r| r.1).collect();
            splits.contains(&true) && splits.contains(&false)
        });
        prop_assert_eq!(Manifest::new(records).is_err(), shared);
    }

    #[test]
    fn lr_stays_in_range_and_moves_smoothly(
        warmup in 0usize..4,
        extra in 1usize..12,
        steps_per_epoch in 1u64..30,
        peak in 1e-5f64..1e-2,
        floor_frac in 0.0f64..1.0,
    ) {
        let cfg = ScheduleConfig {
            epochs: warmup + extra,
            warmup_epochs: warmup,
            lr_peak: peak,
            lr_floor: peak * floor_frac,
            ..ScheduleConfig::desk()
        };
        let s = Schedule::new(&cfg, steps_per_epoch);
        let decay_steps = s.total_steps - 1 - s.warmup_steps.min(s.total_steps - 1);
        let mut bound: f64 = 0.0;
        if s.warmup_steps > 0 {
            bound = bound.max(peak / s.warmup_steps as f64);
        }
        if decay_steps > 0 {
            bound = bound.max(PI / 2.0 * (s.lr_peak - s.lr_floor) / decay_steps as f64);
        }
        let mut prev = lr_at(0, &s);
        for step in 0..s.total_steps + 3 {
            let lr = lr_at(step, &s);
            prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
            prop_assert!((lr - prev).abs() <= bound * (1.0 + 1e-9) + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adamw_without_decay_is_adam(
        init in values(4, 1.0),
        grads in prop::collection::vec(values(4, 1.0), 1..30),
        lr in 1e-4f64..1e-1,
    ) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut opt = AdamW::new(4, [b1, b2], eps, 0.0);
        let mut params = init.clone();
        let (mut oracle, mut m, mut v) = (init, [0.0; 4], [0.0; 4]);
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut params, g, lr).unwrap();
            let t = (t + 1) as i32;
            for i in 0..4 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - b1.powi(t));
                let v_hat = v[i] / (1.0 - b2.powi(t));
                oracle[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for i in 0..4 {
            prop_assert!((params[i] - oracle[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn top1_matches_a_recount(e in export_strategy(25, 6)) {
        let metrics = e.metrics().unwrap();
        let hits = e
            .records()
            .iter()
            .filter(|r| {
                let mut best = 0;
                for c in 1..r.logits.len() {
                    if r.logits[c] > r.logits[best] {
                        best = c;
                    }
                }
                best == r.label
            })
            .count();
        prop_assert!((metrics.top1_pi - 100.0 * hits as f64 / 25.0).abs() <= 1e-9);
        let direct = score(e.records().iter().map(|r| (r.label, r.logits.as_slice()))).unwrap();
        prop_assert_eq!(direct, metrics);
    }

    #[test]
    fn late_fusion_is_linear(
        a1 in values(5, 3.0), a2 in values(5, 3.0),
        b1 in values(5, 3.0), b2 in values(5, 3.0),
        alpha in 0.0f64..2.0,
    ) {
        let sum = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + q).collect::<Vec<_>>();
        let whole = late_fuse(&sum(&a1, &a2), &sum(&b1, &b2), alpha).unwrap();
        let parts = sum(&late_fuse(&a1, &b1, alpha).unwrap(), &late_fuse(&a2, &b2, alpha).unwrap());
        for (x, y) in whole.iter().zip(&parts) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let self_fused = late_fuse(&a1, &a1, alpha).unwrap();
        prop_assert_eq!(stepnet_core::heads::argmax(&self_fused), stepnet_core::heads::argmax(&a1));
    }

    #[test]
    fn zero_weight_sweep_row_is_the_rgb_score(rgb in export_strategy(20, 5), opt in export_strategy(20, 5)) {
        // Flow labels must agree with the RGB labels clip by clip.
        let opt = LogitExport::new(
            opt.records()
                .iter()
                .zip(rgb.records())
                .map(|(o, r)| ExportRecord { label: r.label, ..o.clone() })
                .collect(),
        )
        .unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let report = alpha_sweep(&rgb, &opt, &grid).unwrap();
        prop_assert_eq!(report.rows[0].metrics, rgb.metrics().unwrap());
        let best = report.rows.iter().map(|r| r.metrics.top1_pi).fold(f64::MIN, f64::max);
        prop_assert_eq!(report.best().metrics.top1_pi, best);
        let first_best = report.rows.iter().find(|r| r.metrics.top1_pi == best).unwrap().alpha;
        prop_assert_eq!(report.best_alpha, first_best);
    }
}

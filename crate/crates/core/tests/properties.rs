//! Property tests for the invariants each module promises.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qptad_core::decoder::{decode_instances, refine_points, DecoderConfig, RawPrediction, MIN_SPAN};
use qptad_core::evaluator::{match_detections, EvalConfig};
use qptad_core::numerics::{interp_sample, layer_norm, softmax, ParamStore, Tape, Tensor, LAYER_NORM_EPS};
use qptad_core::pipeline::{
    frames_to_grid, grid_to_frames, make_windows, merge_predictions, ActionInstance, FeatureSequence, WindowSpec,
};
use qptad_core::seqblocks::{conv_apply, discretize, kernel, scan, MambaBlock, Mhsa, SsmParams};
use qptad_core::trainer::{hungarian_match, MatchCostWeights, MatchResult, Target, TrainSample, TrainSchedule, Trainer};

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn vals(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Random LTI system: `A = −I·a + 0.3·R` keeps the spectrum in the left half
/// plane for `N ≤ 8`.
fn lti() -> impl Strategy<Value = (SsmParams, Vec<f64>)> {
    (1usize..=8, 1usize..=64).prop_flat_map(|(n, t)| {
        (vals(n * n, -1.0, 1.0), vals(n, -1.0, 1.0), vals(n, -1.0, 1.0), 0.01f64..0.5, 0.2f64..2.0, vals(t, -1.0, 1.0))
            .prop_map(move |(r, b, c, delta, decay, u)| {
                let mut a: Vec<f64> = r.iter().map(|v| 0.3 * v / (n as f64).sqrt()).collect();
                for k in 0..n {
                    a[k * n + k] -= decay;
                }
                (SsmParams { a: tensor(n, n, a), b, c, delta }, u)
            })
    })
}

fn brute_force(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, row: usize, used: &mut [bool], transpose: bool) -> f64 {
        let (rows, cols) = if transpose { (cost.cols(), cost.rows()) } else { (cost.rows(), cost.cols()) };
        if row == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                let c = if transpose { cost.at(j, row) } else { cost.at(row, j) };
                best = best.min(c + go(cost, row + 1, used, transpose));
                used[j] = false;
            }
        }
        best
    }
    let transpose = cost.rows() > cost.cols();
    let cols = cost.rows().max(cost.cols());
    go(cost, 0, &mut vec![false; cols], transpose)
}

fn pair_set(m: &MatchResult) -> Vec<(usize, usize)> {
    m.pairs.clone()
}

fn instances(max: usize) -> impl Strategy<Value = Vec<ActionInstance>> {
    prop::collection::vec((0.0f64..500.0, 1.0f64..80.0, 0usize..3, 0.0f64..1.0), 0..max).prop_map(|v| {
        v.into_iter().map(|(s, len, c, score)| ActionInstance::new(s, s + len, c, score)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = qptad_core::numerics::init::uniform(&mut rng, &[rows, cols], 30.0);
        let y = softmax(&x);
        for i in 0..rows {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(row in vals(6, -5.0, 5.0)) {
        prop_assume!(row.iter().any(|&v| (v - row[0]).abs() > 1e-3));
        let x = tensor(1, 6, row);
        let y = layer_norm(&x, LAYER_NORM_EPS, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
        let mean = y.data().iter().sum::<f64>() / 6.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        prop_assert!(mean.abs() <= 1e-10);
        // eps inside the square root shrinks the variance below 1 by at most
        // eps / var(x).
        let x_var = {
            let m = x.data().iter().sum::<f64>() / 6.0;
            x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 6.0
        };
        prop_assert!((var - x_var / (x_var + LAYER_NORM_EPS)).abs() <= 1e-9);
        if x_var > 0.1 {
            prop_assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn interpolation_is_exact_on_grid_and_linear_between(data in vals(12, -3.0, 3.0), t in 0.0f64..3.0) {
        let seq = tensor(4, 3, data);
        let (lo, hi) = (t.floor(), t.ceil());
        let lam = t - lo;
        let a = interp_sample(&seq, lo).unwrap();
        let b = interp_sample(&seq, hi).unwrap();
        prop_assert_eq!(&a, &seq.row(lo as usize).to_vec());
        let got = interp_sample(&seq, t).unwrap();
        for d in 0..3 {
            prop_assert!((got[d] - ((1.0 - lam) * a[d] + lam * b[d])).abs() <= 1e-12);
        }
    }

    #[test]
    fn scan_matches_convolution((p, u) in lti()) {
        let d = discretize(&p).unwrap();
        let ys = scan(&d, &p.c, &u);
        let yc = conv_apply(&u, &kernel(&d, &p.c, u.len())).unwrap();
        for (a, b) in ys.iter().zip(&yc) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn scan_is_causal((p, u) in lti(), at in 0usize..64, bump in -1.0f64..1.0) {
        let at = at % u.len();
        let d = discretize(&p).unwrap();
        let base = scan(&d, &p.c, &u);
        let mut v = u.clone();
        v[at] += bump;
        let moved = scan(&d, &p.c, &v);
        prop_assert_eq!(&base[..at], &moved[..at]);
    }

    #[test]
    fn scan_is_linear((p, u) in lti(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = qptad_core::numerics::init::uniform(&mut rng, &[u.len()], 1.0).into_data();
        let d = discretize(&p).unwrap();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let (yu, yv, ym) = (scan(&d, &p.c, &u), scan(&d, &p.c, &v), scan(&d, &p.c, &mix));
        for k in 0..u.len() {
            prop_assert!((ym[k] - (alpha * yu[k] + beta * yv[k])).abs() <= 1e-9);
        }
    }

    #[test]
    fn refine_update_is_bounded_by_span(pts in vals(12, -20.0, 60.0), dt in vals(12, -3.0, 3.0)) {
        let p = tensor(3, 4, pts);
        let d = tensor(3, 4, dt);
        let next = refine_points(&p, &d).unwrap();
        for i in 0..3 {
            let row = p.row(i);
            let s = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
            let max_dt = d.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bound = 0.5 * s.max(MIN_SPAN) * max_dt;
            for j in 0..4 {
                prop_assert!((next.at(i, j) - p.at(i, j)).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn decoding_ignores_point_order_and_threshold_only_removes(
        pts in vals(12, -4.0, 40.0), logits in vals(9, -4.0, 4.0), lo in 0.0f64..1.0, hi in 0.0f64..1.0, seed in any::<u64>()
    ) {
        let window = WindowSpec { video_id: "v".into(), start_frame: 64, length: 128, valid_frames: 128, feature_start: 16, feature_len: 32 };
        let pred = RawPrediction { points: tensor(3, 4, pts.clone()), class_logits: tensor(3, 3, logits.clone()), layer_index: 0 };
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let loose = decode_instances(&pred, &window, 4, lo);
        let strict = decode_instances(&pred, &window, 4, hi);
        prop_assert!(strict.len() <= loose.len());
        prop_assert!(strict.iter().all(|s| loose.contains(s)));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = pts;
        for row in shuffled.chunks_mut(4) {
            rand::seq::SliceRandom::shuffle(row, &mut rng);
        }
        let perm = RawPrediction { points: tensor(3, 4, shuffled), class_logits: tensor(3, 3, logits), layer_index: 0 };
        prop_assert_eq!(decode_instances(&perm, &window, 4, lo), loose);
    }

    #[test]
    fn windows_cover_every_frame(frames in 1usize..2000, beta_steps in 4usize..64, overlap in prop::sample::select(vec![0.0, 0.25, 0.5, 0.75])) {
        let beta = beta_steps * 4;
        let ws = make_windows("v", frames, beta, overlap, 4).unwrap();
        let mut covered = vec![false; frames];
        for w in &ws {
            prop_assert_eq!(w.start_frame % 4, 0);
            for f in w.start_frame..(w.start_frame + w.valid_frames).min(frames) {
                covered[f] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
        if overlap == 0.0 && frames % beta == 0 {
            prop_assert_eq!(ws.len(), frames / beta);
            for (k, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.start_frame, k * beta);
            }
        }
    }

    #[test]
    fn coordinates_round_trip(start in 0usize..10_000, local in 0.0f64..128.0) {
        let w = WindowSpec { video_id: "v".into(), start_frame: start * 4, length: 128, valid_frames: 128, feature_start: start, feature_len: 32 };
        let g = (start * 4) as f64 + local;
        prop_assert_eq!(w.to_global(w.to_local(g)), g);
        prop_assert!((w.to_local(w.to_global(local)) - local).abs() <= 1e-12 * (start * 4) as f64);
        prop_assert_eq!(grid_to_frames(frames_to_grid(g, 4), 4), g);
    }

    #[test]
    fn feature_files_round_trip(steps in 1usize..20, width in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..steps * width).map(|_| rand::Rng::random_range(&mut rng, -1e6f32..1e6)).collect();
        let f = FeatureSequence::new("v", steps, width, data).unwrap();
        let bytes = f.to_bytes();
        let back = FeatureSequence::from_bytes("v", &bytes, std::path::Path::new("v")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, f);
    }

    #[test]
    fn merged_predictions_have_no_overlapping_same_class_pair(preds in instances(30)) {
        let merged = merge_predictions(vec![preds]);
        for (i, a) in merged.iter().enumerate() {
            for b in &merged[i + 1..] {
                prop_assert!(a.class_id != b.class_id || a.tiou(b) <= 0.5);
            }
        }
        prop_assert!(merged.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn hungarian_is_optimal_and_shift_invariant(rows in 0usize..7, cols in 0usize..7, data in vals(36, -5.0, 5.0), shift in -10.0f64..10.0) {
        let cost = tensor(rows, cols, data[..rows * cols].to_vec());
        let m = hungarian_match(&cost).unwrap();
        prop_assert_eq!(m.pairs.len(), rows.min(cols));
        let mut qs: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut gs: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        qs.dedup();
        gs.sort_unstable();
        gs.dedup();
        prop_assert_eq!(qs.len(), m.pairs.len());
        prop_assert_eq!(gs.len(), m.pairs.len());
        let sum: f64 = m.pairs.iter().map(|&(q, g)| cost.at(q, g)).sum();
        prop_assert!((sum - m.total_cost).abs() <= 1e-9);
        prop_assert!((m.total_cost - brute_force(&cost)).abs() <= 1e-9);

        let shifted = cost.map(|v| v + shift);
        let ms = hungarian_match(&shifted).unwrap();
        let sum_orig: f64 = ms.pairs.iter().map(|&(q, g)| cost.at(q, g)).sum();
        prop_assert!((sum_orig - m.total_cost).abs() <= 1e-9);
        if pair_set(&ms) != pair_set(&m) {
            // Only ties may pick a different assignment.
            prop_assert!((sum_orig - sum).abs() <= 1e-9);
        }
    }

    #[test]
    fn evaluation_counts_are_consistent(preds in instances(20), gts in instances(20), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let cfg = |t| EvalConfig { tiou_threshold: t, ..EvalConfig::default() };
        let m = match_detections(&preds, &gts, &cfg(lo));
        let c = m.counts;
        prop_assert_eq!(c.tp + c.fn_, gts.len());
        prop_assert_eq!(c.tp + c.fp, preds.len());
        let mut used: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), c.tp);
        let (p, r, f) = (c.precision(), c.recall(), c.f1());
        prop_assert!(f <= 2.0 * p.min(r) + 1e-12 && f <= p.max(r) + 1e-12);
        if p == r {
            prop_assert!((f - p).abs() <= 1e-12);
        }
        prop_assert!(match_detections(&preds, &gts, &cfg(hi)).counts.tp <= c.tp);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), nq in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mhsa = Mhsa::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = qptad_core::numerics::init::uniform(&mut rng, &[nq, 8], 1.0);
        let mut order: Vec<usize> = (0..nq).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let y = mhsa.forward(&mut tape, &store, v).unwrap();
            tape.value(y).clone()
        };
        let (y, yp) = (run(&x), run(&xp));
        for (k, &i) in order.iter().enumerate() {
            for d in 0..8 {
                prop_assert!((yp.at(k, d) - y.at(i, d)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mamba_with_zero_readout_is_identity(seed in any::<u64>(), nq in 1usize..8, selective in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = MambaBlock::new(&mut store, "m", 6, 4, selective, &mut rng).unwrap();
        store.value_mut(block.params.c).data_mut().fill(0.0);
        let x = qptad_core::numerics::init::uniform(&mut rng, &[nq, 6], 2.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = block.forward(&mut tape, &store, v).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn loss_components_are_non_negative(seed in any::<u64>(), spans in prop::collection::vec((0.0f64..12.0, 0.5f64..8.0, 0usize..3), 0..4)) {
        let cfg = DecoderConfig::tiny();
        let mut trainer = Trainer::new(&cfg, TrainSchedule::default(), MatchCostWeights::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = qptad_core::numerics::init::uniform(&mut rng, &[16, cfg.d_in], 1.0);
        let targets = spans.into_iter().map(|(s, len, c)| Target { start: s, end: (s + len).min(16.0), class_id: c }).collect();
        let window = WindowSpec { video_id: "v".into(), start_frame: 0, length: 64, valid_frames: 64, feature_start: 0, feature_len: 16 };
        let loss = trainer.loss_and_grad(&TrainSample { window, features, targets }).unwrap();
        prop_assert!(loss.cls >= 0.0 && loss.l1 >= 0.0 && loss.iou >= 0.0 && loss.total >= 0.0);
    }
}

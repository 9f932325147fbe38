mod common;

use addq_core::beam::{beam_assign, beam_assign_seeded, code_cost, quantize_layer, BeamConfig};
use addq_core::initkm::{kmeanspp_seed, lloyd_traced};
use addq_core::pvtoy::{pv_finetune, PvConfig};
use addq_core::synth::{gen_activations, gen_weights, ActivationSpec, StdProfile, WeightSpec};
use addq_core::tensor_io::{decode_artifact, decode_matrix, encode_artifact, encode_matrix};
use addq_core::{
    build_hessian_bank, initialise, CodeMatrix, CodebookSet, DenseMatrix, Groups, InitKind,
    InitSettings, LayerProblem, QuantizedArtifact,
};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn small_layer(seed: u64, d_out: usize, d_in: usize, rows: usize) -> LayerProblem {
    let w = gen_weights(&WeightSpec {
        d_out,
        d_in,
        g: 4,
        base_std: 0.02,
        outlier_fraction: 0.05,
        outlier_scale: 10.0,
        seed,
    })
    .unwrap();
    let x = gen_activations(
        &ActivationSpec {
            n_rows: rows,
            d_in,
            profile: StdProfile::Decaying {
                std: 1.0,
                ratio: 30.0,
            },
            shift_scale: 4.0,
            seed,
        },
        false,
    )
    .unwrap();
    LayerProblem::new(w, x, 4).unwrap()
}

fn settings(kind: InitKind) -> InitSettings {
    InitSettings {
        kind,
        num_codebooks: 2,
        codebook_size: 8,
        kmeans: Default::default(),
        oaem: Default::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn seeded_beam_never_worse_than_previous(seed in any::<u64>(), g in 1usize..5, m in 1usize..4,
                                             k in 1usize..7, b in 1usize..5) {
        let mut r = rng(seed);
        let cb = random_codebooks(&mut r, m, k, g);
        let h = random_spd(&mut r, g);
        let t = random_vec(&mut r, g, 1.5);
        let prev: Vec<u16> = (0..m).map(|_| r.random_range(0..k) as u16).collect();
        let (code, cost) = beam_assign_seeded(&t, &cb, &h, b, &prev);
        prop_assert!(cost <= code_cost(&t, &cb, &h, &prev));
        prop_assert_eq!(cost.to_bits(), code_cost(&t, &cb, &h, &code).to_bits());
    }

    #[test]
    fn wider_beam_is_never_worse_for_two_codebooks(seed in any::<u64>(), g in 1usize..5, k in 2usize..9,
                                                   b in 1usize..8) {
        let mut r = rng(seed);
        let cb = random_codebooks(&mut r, 2, k, g);
        let h = random_spd(&mut r, g);
        let t = random_vec(&mut r, g, 1.5);
        let (_, narrow) = beam_assign(&t, &cb, &h, b);
        let (_, wide) = beam_assign(&t, &cb, &h, b + 1);
        prop_assert!(wide <= narrow);
    }

    #[test]
    fn matrix_bytes_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        // any finite bit pattern, subnormals and -0.0 included
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| loop {
                let v = f32::from_bits(r.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let m = DenseMatrix::new(rows, cols, data).unwrap();
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        prop_assert_eq!(back.rows(), rows);
        prop_assert_eq!(back.cols(), cols);
        let same = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn artifact_bytes_round_trip(seed in any::<u64>(), d_out in 1usize..4, blocks in 1usize..4, g in 1usize..4,
                                 m in 1usize..4, k in 1usize..257, scaled in any::<bool>()) {
        let mut r = rng(seed);
        let d_in = blocks * g;
        let n = d_out * blocks;
        let cb = random_codebooks(&mut r, m, k, g);
        let codes = CodeMatrix::new(m, (0..n * m).map(|_| r.random_range(0..k) as u16).collect()).unwrap();
        let scales = scaled.then(|| (0..d_out).map(|_| r.random_range(0.1f32..2.0)).collect());
        let a = QuantizedArtifact::new(d_out, d_in, cb, codes, scales).unwrap();
        let bytes = encode_artifact(&a).unwrap();
        let back = decode_artifact(&bytes).unwrap();
        prop_assert_eq!(encode_artifact(&back).unwrap(), bytes);
        prop_assert_eq!(back.codes, a.codes);
    }

    #[test]
    fn lloyd_inertia_never_increases(seed in any::<u64>(), g in 1usize..4, n in 1usize..60, k in 1usize..6) {
        let mut r = rng(seed);
        let k = k.min(n);
        let pts = Groups::new(g, random_vec(&mut r, n * g, 1.0)).unwrap();
        let init = kmeanspp_seed(&pts, k, seed).unwrap();
        let (_, trace) = lloyd_traced(&pts, init, 100, 0.0).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", trace);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn quantize_trace_is_monotone_and_stops_by_rule(seed in any::<u64>(), d_out in 2usize..5, blocks in 1usize..4,
                                                    greedy in any::<bool>()) {
        let problem = small_layer(seed, d_out, blocks * 4, 16);
        let bank = build_hessian_bank(&problem.activations, 4, 0.01).unwrap();
        let kind = if greedy { InitKind::Greedy } else { InitKind::Oaem };
        let init = initialise(&problem, &bank, &settings(kind), seed).unwrap();
        let cfg = BeamConfig { width: 4, max_epochs: 30, ..BeamConfig::default() };
        let out = quantize_layer(&problem, init, &bank, &cfg).unwrap();
        let trace = &out.trace;
        prop_assert_eq!(trace.len(), out.epochs_run + 1);
        for (i, w) in trace.windows(2).enumerate() {
            prop_assert!(w[1].loss <= w[0].loss);
            let rel = if w[0].loss > 0.0 { (w[0].loss - w[1].loss) / w[0].loss } else { 0.0 };
            let last = i + 2 == trace.len();
            // every epoch but the last cleared the threshold; the last one
            // either missed it or exhausted the budget
            if !last {
                prop_assert!(rel >= cfg.early_stop_rel);
            } else if out.epochs_run < cfg.max_epochs {
                prop_assert!(rel < cfg.early_stop_rel);
            }
        }
    }

    #[test]
    fn pv_reassignment_never_raises_loss(seed in any::<u64>(), every in 1usize..5) {
        let problem = small_layer(seed, 3, 8, 12);
        let holdout = small_layer(seed ^ 0x5555, 3, 8, 12).activations;
        let bank = build_hessian_bank(&problem.activations, 4, 0.01).unwrap();
        let (cb, codes): (CodebookSet, CodeMatrix) = initialise(&problem, &bank, &settings(InitKind::Greedy), seed).unwrap();
        let artifact = QuantizedArtifact::new(3, 8, cb, codes, None).unwrap();
        let cfg = PvConfig { outer_steps: 12, reassign_every: Some(every), beam_width: 4, ..PvConfig::default() };
        let out = pv_finetune(&artifact, &problem, &holdout, &cfg).unwrap();
        prop_assert!(!out.reassign_checks.is_empty());
        for (before, after) in &out.reassign_checks {
            prop_assert!(after <= before);
        }
    }
}

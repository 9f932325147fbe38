//! Checks against independent reference computations: naive matrix
//! products, finite differences, brute-force enumeration and exact
//! sampling probabilities.

mod common;

use addq_core::analysis::decompose_gap;
use addq_core::beam::{
    beam_assign, code_cost, exhaustive_assign, greedy_assign, DEFAULT_EXHAUSTIVE_CAP,
};
use addq_core::hessian::build_hessian_bank;
use addq_core::initkm::{kmeanspp_seed, lloyd, residual_init, KMeansConfig};
use addq_core::oaem::{e_step, em_loss, m_step_gradient};
use addq_core::quantcore::{layer_loss, reconstruct_matrix};
use addq_core::{CodeMatrix, DenseMatrix, GroupLayout, Groups, HessianBank};
use common::*;
use rand::Rng;

#[test]
fn layer_loss_matches_naive_product() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (n, d_out, d_in) = (
            r.random_range(1..9),
            r.random_range(1..7),
            r.random_range(1..7),
        );
        let x = random_matrix(&mut r, n, d_in);
        let w = random_matrix(&mut r, d_out, d_in);
        let w_hat = random_matrix(&mut r, d_out, d_in);
        // Y = X Wᵀ computed entry by entry
        let y = |m: &DenseMatrix| -> Vec<f64> {
            let mut out = vec![0.0; n * d_out];
            for s in 0..n {
                for o in 0..d_out {
                    for c in 0..d_in {
                        out[s * d_out + o] += x.get(s, c) as f64 * m.get(o, c) as f64;
                    }
                }
            }
            out
        };
        let naive: f64 = y(&w)
            .iter()
            .zip(y(&w_hat))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let got = layer_loss(&x, &w, &w_hat).unwrap();
        assert!(rel_diff(got, naive) < 1e-9, "{got} vs {naive}");
    }
}

#[test]
fn hessian_blocks_match_naive_gram() {
    let mut r = rng(2);
    for _ in 0..20 {
        let g = r.random_range(1..5);
        let blocks = r.random_range(1..4);
        let d_in = g * blocks;
        let n = r.random_range(1..12);
        let x = random_matrix(&mut r, n, d_in);
        let bank = build_hessian_bank(&x, g, 0.01).unwrap();
        let mut diag_sum = 0.0;
        for c in 0..d_in {
            diag_sum += (0..x.rows())
                .map(|s| (x.get(s, c) as f64).powi(2))
                .sum::<f64>();
        }
        let lambda = 0.01 * diag_sum / d_in as f64;
        assert!(rel_diff(bank.lambda(), lambda) < 1e-12);
        for j in 0..blocks {
            let h = bank.block(j);
            for p in 0..g {
                for q in 0..g {
                    let mut v: f64 = (0..x.rows())
                        .map(|s| x.get(s, j * g + p) as f64 * x.get(s, j * g + q) as f64)
                        .sum();
                    if p == q {
                        v += lambda;
                    }
                    assert!(rel_diff(h[p * g + q], v) < 1e-6 || (h[p * g + q] - v).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn kmeanspp_follows_d2_weighting() {
    // three 1-D points; K = 2 picks an ordered pair (first, second)
    let pts = [0.0, 1.0, 3.0];
    let groups = Groups::new(1, pts.to_vec()).unwrap();
    let mut expected = [[0.0; 3]; 3];
    for a in 0..3 {
        let d2: Vec<f64> = pts.iter().map(|p| (p - pts[a]).powi(2)).collect();
        let total: f64 = d2.iter().sum();
        for b in 0..3 {
            expected[a][b] = d2[b] / total / 3.0;
        }
    }
    let trials = 10_000;
    let mut counts = [[0usize; 3]; 3];
    for seed in 0..trials {
        let c = kmeanspp_seed(&groups, 2, seed as u64).unwrap();
        let idx = |v: f64| pts.iter().position(|&p| p == v).unwrap();
        counts[idx(c[0])][idx(c[1])] += 1;
    }
    let mut chi2 = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let e = expected[a][b] * trials as f64;
            if e == 0.0 {
                assert_eq!(counts[a][b], 0, "impossible pair ({a},{b}) drawn");
            } else {
                chi2 += (counts[a][b] as f64 - e).powi(2) / e;
            }
        }
    }
    // six possible cells, 5 degrees of freedom, p = 0.001
    assert!(chi2 < 20.52, "chi-square {chi2}");
}

#[test]
fn lloyd_hand_example() {
    let groups = Groups::new(1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
    let s = lloyd(&groups, vec![0.0, 1.0], 25, 1e-4).unwrap();
    let mut c = s.centroids.clone();
    c.sort_by(f64::total_cmp);
    assert_eq!(c, vec![0.5, 10.5]);
    assert_eq!(s.inertia, 1.0);
}

fn random_em_case(seed: u64) -> (Groups, HessianBank, GroupLayout, Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let g = r.random_range(1..5);
    let blocks = r.random_range(1..4);
    let rows = r.random_range(1..5);
    let layout = GroupLayout::new(rows, g * blocks, g).unwrap();
    let mut hs = Vec::new();
    for _ in 0..blocks {
        hs.extend(random_spd(&mut r, g));
    }
    let bank = HessianBank::from_blocks(g, hs, 0.0).unwrap();
    let targets = Groups::new(g, random_vec(&mut r, layout.num_groups() * g, 1.0)).unwrap();
    let k = r.random_range(1..6);
    let centroids = random_vec(&mut r, k * g, 1.0);
    let assign = (0..targets.len()).map(|_| r.random_range(0..k)).collect();
    (targets, bank, layout, centroids, assign)
}

#[test]
fn em_loss_matches_naive_sum() {
    for seed in 0..100 {
        let (t, bank, layout, c, a) = random_em_case(seed);
        let g = t.dim();
        let mut naive = 0.0;
        for i in 0..t.len() {
            let h = bank.block_for(&layout, i);
            let e: Vec<f64> = (0..g).map(|p| t.get(i)[p] - c[a[i] * g + p]).collect();
            for p in 0..g {
                for q in 0..g {
                    naive += e[p] * h[p * g + q] * e[q];
                }
            }
        }
        naive /= t.len() as f64;
        let got = em_loss(&t, &bank, &layout, &c, &a).unwrap();
        assert!(rel_diff(got, naive) < 1e-9);
    }
}

#[test]
fn m_step_gradient_matches_finite_differences() {
    let h = 1e-4;
    for seed in 0..100 {
        let (t, bank, layout, c, a) = random_em_case(1000 + seed);
        let grad = m_step_gradient(&t, &bank, &layout, &c, &a).unwrap();
        let mut fd = vec![0.0; c.len()];
        for p in 0..c.len() {
            let mut plus = c.clone();
            let mut minus = c.clone();
            plus[p] += h;
            minus[p] -= h;
            fd[p] = (em_loss(&t, &bank, &layout, &plus, &a).unwrap()
                - em_loss(&t, &bank, &layout, &minus, &a).unwrap())
                / (2.0 * h);
        }
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = grad
            .iter()
            .zip(&fd)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            assert!(err / norm < 1e-4, "seed {seed}: rel err {}", err / norm);
        } else {
            assert!(err < 1e-10);
        }
    }
}

#[test]
fn e_step_with_identity_is_euclidean() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let g = r.random_range(1..5);
        let k = r.random_range(1..8);
        let layout = GroupLayout::new(1, g, g).unwrap();
        let bank = HessianBank::identity(1, g);
        let t = Groups::new(g, random_vec(&mut r, g, 1.0)).unwrap();
        let c = random_vec(&mut r, k * g, 1.0);
        let mut best = (0, f64::INFINITY);
        for j in 0..k {
            let d: f64 = (0..g).map(|p| (t.get(0)[p] - c[j * g + p]).powi(2)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        assert_eq!(e_step(&t, &bank, &layout, &c).unwrap(), vec![best.0]);
    }
}

#[test]
fn e_step_never_increases_loss() {
    for seed in 0..100 {
        let (t, bank, layout, c, a) = random_em_case(2000 + seed);
        let before = em_loss(&t, &bank, &layout, &c, &a).unwrap();
        let b = e_step(&t, &bank, &layout, &c).unwrap();
        let after = em_loss(&t, &bank, &layout, &c, &b).unwrap();
        assert!(after <= before * (1.0 + 1e-12), "{after} > {before}");
    }
}

/// Enumerates codes from the last to the first and keeps `≤` improvements,
/// so a tie ends on the lexicographically smallest code.
fn reversed_exhaustive(t: &[f64], cb: &addq_core::CodebookSet, h: &[f64]) -> (Vec<u16>, f64) {
    let (m, k) = (cb.num_codebooks(), cb.codebook_size());
    let total = k.pow(m as u32);
    let mut best = (Vec::new(), f64::INFINITY);
    for idx in (0..total).rev() {
        let mut code = vec![0u16; m];
        let mut rest = idx;
        for s in (0..m).rev() {
            code[s] = (rest % k) as u16;
            rest /= k;
        }
        let cost = code_cost(t, cb, h, &code);
        if cost <= best.1 {
            best = (code, cost);
        }
    }
    best
}

#[test]
fn exhaustive_matches_reversed_enumeration() {
    let mut r = rng(4);
    for case in 0..300 {
        let g = r.random_range(1..4);
        let m = r.random_range(1..4);
        let k = r.random_range(1..6);
        let mut cb = random_codebooks(&mut r, m, k, g);
        if case % 3 == 0 {
            // duplicated entries force ties
            let first = cb.codeword(0, 0).to_vec();
            let last = k - 1;
            cb.entries_mut()[last * g..(last + 1) * g].copy_from_slice(&first);
        }
        let h = random_spd(&mut r, g);
        let t = random_vec(&mut r, g, 1.5);
        let (code, cost) = exhaustive_assign(&t, &cb, &h, DEFAULT_EXHAUSTIVE_CAP).unwrap();
        let (rc, rcost) = reversed_exhaustive(&t, &cb, &h);
        assert_eq!(code, rc);
        assert_eq!(cost, rcost);
    }
}

#[test]
fn beam_full_width_equals_exhaustive_and_width_one_equals_greedy() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let g = r.random_range(1..5);
        let k = r.random_range(1..9);
        let cb = random_codebooks(&mut r, 2, k, g);
        let h = if r.random_bool(0.5) {
            identity(g)
        } else {
            random_spd(&mut r, g)
        };
        let t = random_vec(&mut r, g, 1.5);
        let (_, ex) = exhaustive_assign(&t, &cb, &h, DEFAULT_EXHAUSTIVE_CAP).unwrap();
        let (_, bc) = beam_assign(&t, &cb, &h, k);
        assert_eq!(bc, ex);
        let (b1, c1) = beam_assign(&t, &cb, &h, 1);
        let gr = greedy_assign(&t, &cb, &h);
        assert_eq!(b1, gr);
        assert_eq!(c1.to_bits(), code_cost(&t, &cb, &h, &gr).to_bits());
    }
}

#[test]
fn gap_identity_on_random_instances() {
    let mut r = rng(6);
    let mut suboptimal = 0;
    for _ in 0..1000 {
        let g = r.random_range(1..5);
        let k = r.random_range(1..9);
        let cb = random_codebooks(&mut r, 2, k, g);
        let w = random_vec(&mut r, g, 1.5);
        let d = decompose_gap(&w, &cb).unwrap();
        let scale = d
            .eps_greedy
            .abs()
            .max(d.eps_opt.abs())
            .max(d.direct_cost)
            .max(d.coupling.abs());
        assert!((d.term_sum() - d.gap()).abs() <= 1e-9 * scale.max(f64::MIN_POSITIVE));
        assert!(d.residual_mismatch >= -1e-12);
        assert!(d.direct_cost >= 0.0);
        assert!(d.eps_greedy >= d.eps_opt);
        suboptimal += d.greedy_suboptimal() as usize;
    }
    assert!(
        suboptimal > 0,
        "random instances should include greedy failures"
    );
}

#[test]
fn residual_init_error_is_recomputable() {
    let mut r = rng(7);
    for seed in 0..10 {
        let g = r.random_range(1..5);
        let n = r.random_range(4..40);
        let groups = Groups::new(g, random_vec(&mut r, n * g, 1.0)).unwrap();
        let (cb, codes) =
            residual_init(&groups, 2, 3, &KMeansConfig::default(), seed, None).unwrap();
        let recon = reconstruct_matrix(&cb, &codes, n, g).unwrap();
        let direct: f64 = groups
            .data()
            .iter()
            .zip(recon.data())
            .map(|(&a, &b)| (a - b as f64).powi(2))
            .sum();
        let via_residuals: f64 = (0..n)
            .map(|i| code_cost(groups.get(i), &cb, &identity(g), codes.code(i)))
            .sum();
        assert!(
            rel_diff(direct, via_residuals) < 1e-6,
            "{direct} vs {via_residuals}"
        );
        assert_eq!(codes, CodeMatrix::new(2, codes.flat().to_vec()).unwrap());
    }
}

mod common;

use common::{brute_force_cost, gaussian, random_graph};
use proptest::prelude::*;
use uodr::evaluate::accuracy_triple;
use uodr::gcn::{gcn_forward, GcnParams};
use uodr::graph::{normalized_adjacency, KnowledgeGraph};
use uodr::losses::{balance_loss_vanilla, limited_balance_loss, sgmd_loss};
use uodr::matcher::{hungarian, match_domains, CostMatrix};
use uodr::model::Encoder;
use uodr::numkit::softmax_rows;
use uodr::{Matrix, Rng};

fn cost_matrix(seed: u64, rows: usize, cols: usize) -> CostMatrix {
    common::integer_costs(&mut Rng::seed_from_u64(seed), rows, cols, 30)
}

fn probs(rng: &mut Rng, n: usize, k: usize, scale: f64) -> Matrix {
    softmax_rows(&gaussian(rng, n, k, scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_rows_sum_to_one(seed in any::<u64>(), max_nodes in 2usize..40) {
        let g = random_graph(&mut Rng::seed_from_u64(seed), max_nodes);
        let p = normalized_adjacency(&g);
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn explicit_self_loops_change_nothing(seed in any::<u64>()) {
        let g = random_graph(&mut Rng::seed_from_u64(seed), 12);
        let n = g.num_nodes();
        let looped = KnowledgeGraph::new(
            g.node_names().to_vec(),
            g.edges().iter().copied().chain((0..n).map(|i| (i, i))),
            g.class_to_node().to_vec(),
            g.known_class_count(),
        )
        .unwrap();
        prop_assert_eq!(normalized_adjacency(&looped), normalized_adjacency(&g));
    }

    #[test]
    fn graph_text_round_trip(seed in any::<u64>()) {
        let g = random_graph(&mut Rng::seed_from_u64(seed), 15);
        let back = KnowledgeGraph::from_text(&g.to_text(), "memory").unwrap();
        prop_assert_eq!(back.to_text(), g.to_text());
        prop_assert_eq!(normalized_adjacency(&back), normalized_adjacency(&g));
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.01f64..50.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let p = probs(&mut rng, 5, 7, scale);
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v <= 1.0 && v > 0.0));
        }
    }

    #[test]
    fn softmax_survives_extreme_logits(seed in any::<u64>(), scale in 50.0f64..1e6) {
        // exp underflows to exactly 0 here, so only the sum is checked.
        let p = probs(&mut Rng::seed_from_u64(seed), 5, 7, scale);
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let (x, y, z) = (gaussian(&mut rng, a, b, 1.0), gaussian(&mut rng, b, c, 1.0), gaussian(&mut rng, c, d, 1.0));
        let left = x.matmul(&y).unwrap().matmul(&z).unwrap();
        let right = x.matmul(&y.matmul(&z).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn hungarian_matches_brute_force(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7) {
        let c = cost_matrix(seed, rows, cols);
        let m = hungarian(&c);
        prop_assert_eq!(m.len(), rows.min(cols));
        prop_assert_eq!(m.total_cost, brute_force_cost(&c.costs));
    }

    #[test]
    fn hungarian_optimal_after_row_or_column_shift(seed in any::<u64>(), n in 1usize..7, pick in any::<usize>(), shift in 0u32..50, by_row: bool) {
        let c = cost_matrix(seed, n, n);
        let m = hungarian(&c);
        let mut shifted = c.costs.clone();
        let k = pick % n;
        for i in 0..n {
            let (r, col) = if by_row { (k, i) } else { (i, k) };
            shifted.set(r, col, shifted.get(r, col) + f64::from(shift));
        }
        let cost_in_shifted: f64 = m.pairs.iter().map(|&(s, t)| shifted.get(s, t)).sum();
        let optimum = hungarian(&CostMatrix::from_matrix(shifted).unwrap()).total_cost;
        prop_assert_eq!(cost_in_shifted, optimum);
    }

    #[test]
    fn folds_never_beat_the_global_matching(seed in any::<u64>(), n in 1usize..30, k in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let fs = gaussian(&mut rng, n, 3, 1.0);
        let ft = gaussian(&mut rng, n, 3, 1.0);
        let global = match_domains(&fs, &ft, 1, &mut Rng::seed_from_u64(seed)).unwrap();
        let folded = match_domains(&fs, &ft, k.min(n), &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(folded.len(), n);
        prop_assert!(folded.total_cost >= global.total_cost - 1e-9 * global.total_cost.max(1.0));
    }

    #[test]
    fn raising_tau_never_increases_sgmd(seed in any::<u64>(), n in 1usize..9, t1 in 0.0f64..1.2, t2 in 0.0f64..1.2) {
        let mut rng = Rng::seed_from_u64(seed);
        let (fs, ft) = (gaussian(&mut rng, n, 4, 1.0), gaussian(&mut rng, n, 4, 1.0));
        let (ps, pt) = (probs(&mut rng, n, 5, 2.0), probs(&mut rng, n, 5, 2.0));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = sgmd_loss(&fs, &ft, &ps, &pt, lo).unwrap();
        let b = sgmd_loss(&fs, &ft, &ps, &pt, hi).unwrap();
        prop_assert!(b.value <= a.value);
        prop_assert!(b.gated <= a.gated);
    }

    #[test]
    fn limited_balance_is_at_least_two_w(seed in any::<u64>(), n in 1usize..9, w in 0.01f64..0.99, scale in 0.1f64..20.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let p = probs(&mut rng, n, 6, scale);
        let (v, _) = limited_balance_loss(&p, 3, w, 1e-8);
        prop_assert!(v >= 2.0 * w * (1.0 - 1e-15));
    }

    #[test]
    fn clamped_vanilla_balance_is_bounded(seed in any::<u64>(), n in 1usize..9, scale in 0.1f64..800.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let p = probs(&mut rng, n, 6, scale);
        let eps = 1e-8;
        let (v, _) = balance_loss_vanilla(&p, 3, eps);
        prop_assert!(v <= -eps.ln() + 1e-12);
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn gcn_is_linear_at_unit_slope(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, layers in 1usize..3) {
        let mut rng = Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 10);
        let p = normalized_adjacency(&g);
        let params = GcnParams::init(4, 5, 3, layers, 1.0, &mut rng);
        let (x1, x2) = (gaussian(&mut rng, g.num_nodes(), 4, 1.0), gaussian(&mut rng, g.num_nodes(), 4, 1.0));
        let mut mix = x1.scale(a);
        mix.add_scaled(b, &x2).unwrap();
        let mut expect = gcn_forward(&p, &x1, &params).unwrap().scale(a);
        expect.add_scaled(b, &gcn_forward(&p, &x2, &params).unwrap()).unwrap();
        prop_assert!(gcn_forward(&p, &mix, &params).unwrap().max_abs_diff(&expect) <= 1e-9);
    }

    #[test]
    fn isolated_unknown_node_with_zero_word_vector_embeds_to_zero(seed in any::<u64>(), slope in 0.0f64..1.0) {
        let mut rng = Rng::seed_from_u64(seed);
        // Nodes 0..4 form a tree of known classes; node 5 is an isolated unknown class.
        let edges = [(0, 1), (0, 2), (1, 3), (1, 4)];
        let names = (0..6).map(|i| format!("c{i}")).collect();
        let g = KnowledgeGraph::new(names, edges, vec![0, 1, 2, 3, 4, 5], 5).unwrap();
        let mut x = gaussian(&mut rng, 6, 4, 1.0);
        x.row_mut(5).iter_mut().for_each(|v| *v = 0.0);
        let params = GcnParams::init(4, 3, 3, 1 + rng.below(2), slope, &mut rng);
        let o = gcn_forward(&normalized_adjacency(&g), &x, &params).unwrap();
        prop_assert!(o.row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_affine(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let enc = Encoder {
            weight: gaussian(&mut rng, 5, 3, 1.0),
            bias: (0..3).map(|_| rng.normal()).collect(),
        };
        let (a, b) = (gaussian(&mut rng, 4, 5, 1.0), gaussian(&mut rng, 4, 5, 1.0));
        let mut mix = a.scale(alpha);
        mix.add_scaled(beta, &b).unwrap();
        let mut expect = enc.encode(&a).unwrap().scale(alpha);
        expect.add_scaled(beta, &enc.encode(&b).unwrap()).unwrap();
        for r in 0..expect.rows() {
            for (v, bias) in expect.row_mut(r).iter_mut().zip(&enc.bias) {
                *v += (1.0 - alpha - beta) * bias;
            }
        }
        prop_assert!(enc.encode(&mix).unwrap().max_abs_diff(&expect) <= 1e-9);
    }

    #[test]
    fn accuracy_triple_ignores_instance_order(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
        let perm = rng.permutation(n);
        let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let shuffled_preds: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        prop_assert_eq!(
            accuracy_triple(&preds, &labels, 4).unwrap(),
            accuracy_triple(&shuffled_preds, &shuffled_labels, 4).unwrap()
        );
    }

    #[test]
    fn accuracy_triple_weighted_identity(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(6)).collect();
        let t = accuracy_triple(&preds, &labels, 4).unwrap();
        let (nk, nu) = (t.n_known as f64, t.n_unknown as f64);
        prop_assert_eq!(t.n_known + t.n_unknown, n);
        // Exact at the level of counts; the quotients agree to rounding.
        let hits = (t.known * nk).round() + (t.unknown * nu).round();
        prop_assert_eq!(hits, (t.all * n as f64).round());
        let weighted = (t.known * nk + t.unknown * nu) / (nk + nu);
        prop_assert!((weighted - t.all).abs() <= 4.0 * f64::EPSILON);
    }
}

#[test]
fn rng_streams_agree_for_ten_thousand_draws() {
    let (mut a, mut b) = (Rng::seed_from_u64(42), Rng::seed_from_u64(42));
    for _ in 0..10_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
    let (mut a, mut b) = (Rng::seed_from_u64(7), Rng::seed_from_u64(7));
    for _ in 0..10_000 {
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }
}

#[test]
fn limited_balance_equals_two_w_only_at_w() {
    let w = 0.4;
    let at = Matrix::from_rows(&[[0.6, 0.4], [0.6, 0.4]]).unwrap();
    let off = Matrix::from_rows(&[[0.6, 0.4], [0.5, 0.5]]).unwrap();
    assert!((limited_balance_loss(&at, 1, w, 1e-8).0 - 2.0 * w).abs() < 1e-15);
    assert!(limited_balance_loss(&off, 1, w, 1e-8).0 > 2.0 * w);
}

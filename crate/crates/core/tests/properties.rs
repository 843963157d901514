use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use fairmib::engine::{CsrMatrix, Matrix, SeededRng, Tape};
use fairmib::eval::{auc, demographic_parity_diff, equal_opportunity_diff};
use fairmib::graph::{make_splits, normalize_adjacency, GraphDataset, SplitSpec};
use fairmib::harness::{EarlyStopping, Progress};
use fairmib::model::{infonce_pair, kl_standard_normal, total_loss, GaussianLatent, LossConfig};
use fairmib::views::diffuse;

fn graph(n: usize, edges: &[(usize, usize)]) -> GraphDataset {
    GraphDataset::from_edges(Matrix::zeros(n, 1), vec![0; n], vec![0; n], edges, None).unwrap()
}

fn dense(a: &CsrMatrix) -> DMatrix<f64> {
    let d = a.to_dense();
    DMatrix::from_row_slice(d.rows(), d.cols(), d.as_slice())
}

fn spectral_radius(a: &CsrMatrix) -> f64 {
    SymmetricEigen::new(dense(a))
        .eigenvalues
        .iter()
        .fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn graph_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..=3 * n)))
}

fn matrix_strategy(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn frobenius(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_adjacency_is_symmetric_with_bounded_spectrum((n, edges) in graph_strategy(50)) {
        let a = normalize_adjacency(&graph(n, &edges));
        prop_assert!(a.is_symmetric(1e-15));
        prop_assert!(spectral_radius(&a) <= 1.0 + 1e-10);
    }

    #[test]
    fn normalized_adjacency_row_sums((n, edges) in graph_strategy(40)) {
        let g = graph(n, &edges);
        let a = normalize_adjacency(&g);
        // Ã·√d̂ = √d̂, which bounds each row sum by √(d̂ᵢ / d̂_min).
        let deg: Vec<f64> = (0..n).map(|i| 1.0 + g.adjacency().row_nnz(i) as f64).collect();
        let root = Matrix::column(&deg.iter().map(|d| d.sqrt()).collect::<Vec<_>>());
        let image = a.spmm(&root).unwrap();
        prop_assert!(image.max_abs_diff(&root) < 1e-12);
        let d_min = deg.iter().cloned().fold(f64::INFINITY, f64::min);
        for (i, s) in a.row_sums().iter().enumerate() {
            prop_assert!(*s > 0.0);
            prop_assert!(*s <= (deg[i] / d_min).sqrt() + 1e-12);
        }
    }

    #[test]
    fn regular_graph_rows_sum_to_one(n in 3usize..40) {
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        for s in normalize_adjacency(&graph(n, &edges)).row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn splits_partition_with_per_cell_counts(
        cells in prop::collection::vec((0u8..2, 0u8..2), 1..120),
        seed in any::<u64>(),
    ) {
        let n = cells.len();
        let s: Vec<u8> = cells.iter().map(|c| c.0).collect();
        let y: Vec<u8> = cells.iter().map(|c| c.1).collect();
        let g = GraphDataset::from_edges(Matrix::zeros(n, 1), s.clone(), y.clone(), &[], None).unwrap();
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let split = make_splits(&g, &spec).unwrap();
        let m = split.masks();
        for i in 0..n {
            let hits = [m.train[i], m.val[i], m.test[i]].iter().filter(|&&b| b).count();
            prop_assert_eq!(hits, 1);
        }
        for cs in 0..2u8 {
            for cy in 0..2u8 {
                let idx: Vec<usize> = (0..n).filter(|&i| s[i] == cs && y[i] == cy).collect();
                let c = idx.len();
                if c == 0 {
                    continue;
                }
                let want_train = ((spec.train_fraction * c as f64).round() as usize).clamp(1, c);
                let want_val = ((spec.val_fraction * c as f64).round() as usize).min(c - want_train);
                prop_assert_eq!(idx.iter().filter(|&&i| m.train[i]).count(), want_train);
                prop_assert_eq!(idx.iter().filter(|&&i| m.val[i]).count(), want_val);
                prop_assert_eq!(idx.iter().filter(|&&i| m.test[i]).count(), c - want_train - want_val);
            }
        }
    }

    #[test]
    fn diffusion_stays_bounded(
        (n, edges) in graph_strategy(20),
        alpha in 0.01f64..=1.0,
        hops in 1usize..30,
        seed in any::<u64>(),
    ) {
        let a = normalize_adjacency(&graph(n, &edges));
        let x = SeededRng::new(seed).normal_matrix(n, 3);
        let h = diffuse(&a, &x, alpha, hops).unwrap();
        prop_assert!(h.is_finite());
        prop_assert!(h.max_abs() <= x.max_abs() * (1.0 + hops as f64) + 1e-12);
    }

    #[test]
    fn diffusion_error_contracts_geometrically(
        (n, edges) in graph_strategy(20),
        alpha in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let a = normalize_adjacency(&graph(n, &edges));
        let x = SeededRng::new(seed).normal_matrix(n, 2);
        let ad = dense(&a);
        let system = DMatrix::<f64>::identity(n, n) - ad * (1.0 - alpha);
        let xd = DMatrix::from_row_slice(n, 2, x.as_slice());
        let exact = system.lu().solve(&xd).unwrap() * alpha;
        let exact = Matrix::from_vec(n, 2, exact.transpose().as_slice().to_vec()).unwrap();
        let ratio = (1.0 - alpha) * spectral_radius(&a);
        let errs: Vec<f64> = (1..=12)
            .map(|k| frobenius(&diffuse(&a, &x, alpha, k).unwrap().zip_map(&exact, |p, q| p - q)))
            .collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= ratio * w[0] + 1e-11, "{} > {} * {}", w[1], ratio, w[0]);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_prior(
        mu in matrix_strategy(3, 2, -3.0, 3.0),
        logvar in matrix_strategy(3, 2, -3.0, 3.0),
    ) {
        let lat = |mu: &Matrix, lv: &Matrix| GaussianLatent { mu: mu.clone(), logvar: lv.clone(), z: mu.clone() };
        let kl = kl_standard_normal(&lat(&mu, &logvar)).unwrap();
        prop_assert!(kl >= 0.0);
        if mu.max_abs() > 1e-3 || logvar.max_abs() > 1e-3 {
            prop_assert!(kl > 0.0);
        }
        let zero = Matrix::zeros(3, 2);
        prop_assert_eq!(kl_standard_normal(&lat(&zero, &zero)).unwrap(), 0.0);
    }

    #[test]
    fn infonce_is_bounded(
        n in 1usize..12,
        tau in 0.1f64..2.0,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let (a, b) = (rng.normal_matrix(n, 3), rng.normal_matrix(n, 3));
        let loss = infonce_pair(&a, &b, tau).unwrap();
        // cosine similarities lie in [−1, 1]
        let ceiling = (1.0 + (n as f64 - 1.0) * (2.0 / tau).exp()).ln();
        prop_assert!(loss >= -1e-12);
        prop_assert!(loss <= ceiling + 1e-9);
    }

    #[test]
    fn total_loss_is_affine_in_each_weight(
        task in 0.0f64..3.0,
        kl in prop::array::uniform3(0.0f64..3.0),
        con in 0.0f64..3.0,
        l1 in 0.0f64..1.0,
        l2 in 0.0f64..1.0,
        other in 0.0f64..1.0,
    ) {
        let at = |lambda_kl: f64, lambda_con: f64| {
            total_loss(task, kl, con, &LossConfig { lambda_kl, lambda_con, tau: 0.5, symmetrize_infonce: false }).total
        };
        let kl_sum = kl[0] + kl[1] + kl[2];
        prop_assert!(((at(l2, other) - at(l1, other)) - (l2 - l1) * kl_sum).abs() < 1e-12);
        prop_assert!(((at(other, l2) - at(other, l1)) - (l2 - l1) * con).abs() < 1e-12);
    }

    #[test]
    fn fairness_gaps_ignore_order_and_group_encoding(
        rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2, any::<bool>()), 4..40),
        seed in any::<u64>(),
    ) {
        let mut rows = rows;
        // both groups need positives inside the mask
        rows.extend([(1, 1, 0, true), (1, 1, 1, true), (0, 1, 0, true), (0, 1, 1, true)]);
        let unzip = |rows: &[(u8, u8, u8, bool)]| {
            (
                rows.iter().map(|r| r.0).collect::<Vec<_>>(),
                rows.iter().map(|r| r.1).collect::<Vec<_>>(),
                rows.iter().map(|r| r.2).collect::<Vec<_>>(),
                rows.iter().map(|r| r.3).collect::<Vec<_>>(),
            )
        };
        let (p, y, s, m) = unzip(&rows);
        let dp = demographic_parity_diff(&p, &s, &m).unwrap();
        let eo = equal_opportunity_diff(&p, &y, &s, &m).unwrap();

        let mut shuffled = rows.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(SeededRng::new(seed).inner());
        let (p2, y2, s2, m2) = unzip(&shuffled);
        prop_assert_eq!(demographic_parity_diff(&p2, &s2, &m2).unwrap(), dp);
        prop_assert_eq!(equal_opportunity_diff(&p2, &y2, &s2, &m2).unwrap(), eo);

        let flipped: Vec<u8> = s.iter().map(|v| 1 - v).collect();
        prop_assert_eq!(demographic_parity_diff(&p, &flipped, &m).unwrap(), dp);
        prop_assert_eq!(equal_opportunity_diff(&p, &y, &flipped, &m).unwrap(), eo);
    }

    #[test]
    fn metrics_ignore_nodes_outside_the_mask(
        rows in prop::collection::vec((0.0f64..1.0, 0u8..2, 0u8..2, any::<bool>()), 4..40),
        noise in prop::collection::vec(0.0f64..1.0, 44),
    ) {
        let mut rows = rows;
        rows.extend([(0.2, 1, 0, true), (0.7, 1, 1, true), (0.4, 0, 0, true), (0.9, 0, 1, true)]);
        let prob: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let s: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let m: Vec<bool> = rows.iter().map(|r| r.3).collect();
        let altered: Vec<f64> = prob.iter().zip(&m).zip(&noise).map(|((&p, &k), &z)| if k { p } else { z }).collect();
        let a = fairmib::eval::evaluate(&prob, &y, &s, &m, 0).unwrap();
        let b = fairmib::eval::evaluate(&altered, &y, &s, &m, 0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn auc_of_complement_sums_to_one(
        rows in prop::collection::vec((0u8..10, 0u8..2), 2..40),
    ) {
        let mut rows = rows;
        rows.extend([(3, 0), (5, 1)]);
        let prob: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 10.0).collect();
        let comp: Vec<f64> = prob.iter().map(|p| 1.0 - p).collect();
        let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let m = vec![true; rows.len()];
        prop_assert!((auc(&prob, &y, &m).unwrap() + auc(&comp, &y, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_keeps_the_running_minimum(
        losses in prop::collection::vec(0.0f64..10.0, 1..60),
        patience in 1usize..6,
    ) {
        let mut stopper = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for (k, &l) in losses.iter().enumerate() {
            seen.push(l);
            if stopper.observe(k + 1, l) == Progress::Stop {
                break;
            }
        }
        let best = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(stopper.best_loss(), best);
        let epoch = stopper.best_epoch().unwrap();
        prop_assert_eq!(seen[epoch - 1], best);
    }
}

#[test]
fn star_center_row_sum_exceeds_one_and_a_half() {
    let edges: Vec<(usize, usize)> = (1..=8).map(|i| (0, i)).collect();
    let sums = normalize_adjacency(&graph(9, &edges)).row_sums();
    let expected = 1.0 / 9.0 + 8.0 / 18f64.sqrt();
    assert!((sums[0] - expected).abs() < 1e-12);
    assert!(sums[0] > 1.5);
}

#[test]
fn anti_aligned_pairs_exceed_log_n() {
    // each node's partner code points away while the other codes agree
    let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let b = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]);
    let loss = infonce_pair(&a, &b, 0.5).unwrap();
    assert!(loss > 2f64.ln());
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut rng = SeededRng::new(11);
        let mut tape = Tape::new();
        let a = tape.param(rng.normal_matrix(5, 3));
        let b = tape.param(rng.normal_matrix(5, 3));
        let sim = tape.cosine_sim(a, b).unwrap();
        let ls = tape.log_softmax_rows(sim).unwrap();
        let loss = tape.mean(ls).unwrap();
        tape.backward(loss).unwrap();
        (tape.scalar(loss).to_bits(), tape.grad(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

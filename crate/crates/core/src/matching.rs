//! Score-driven one-to-one assignment of ground-truth objects to queries.
//!
//! The match score is `alpha * s_cls + beta * s_loc`; we minimize its negation
//! over injective row-to-column maps with a shortest-augmenting-path Hungarian
//! solver, then refine ties so the reported pair list is the lexicographically
//! smallest among optima. A factorial-guarded brute-force enumerator provides
//! the conformance oracle.

use crate::boxes::{giou, l1_box, to_corner, BoxCS};
use crate::error::{Error, Result};
use crate::model::Predictions;
use crate::tensor::softmax_slice;

/// Weights of the classification and location terms of the match score.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "match weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("match weights must not both be zero".into()));
        }
        Ok(())
    }
}

/// Injective map from ground-truth indices to query indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (gt_index, query_index), sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

pub fn match_score(s_cls: f64, s_loc: f64, w: &MatchWeights) -> f64 {
    w.alpha * s_cls + w.beta * s_loc
}

/// Cost matrix entry (j, i) = negated match score of gt j against query i,
/// with `s_cls` the query's softmax probability of the gt class and
/// `s_loc = giou - l1` combining both box terms.
pub fn build_cost_matrix(
    p: &Predictions,
    gts: &[(usize, BoxCS)],
    w: &MatchWeights,
) -> Result<Vec<Vec<f64>>> {
    let num_queries = p.class_logits.dims()[0];
    let num_classes_incl_bg = p.class_logits.dims()[1];
    if gts.len() > num_queries {
        return Err(Error::Capacity(format!(
            "{} ground truths exceed {} queries",
            gts.len(),
            num_queries
        )));
    }
    let logits = p.class_logits.data();
    let boxes = p.boxes.data();
    let probs: Vec<Vec<f64>> = (0..num_queries)
        .map(|i| softmax_slice(&logits[i * num_classes_incl_bg..(i + 1) * num_classes_incl_bg]))
        .collect();
    let query_boxes: Vec<BoxCS> = (0..num_queries)
        .map(|i| BoxCS::new(boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]))
        .collect();

    let mut cost = Vec::with_capacity(gts.len());
    for &(class, gt_box) in gts {
        if class + 1 >= num_classes_incl_bg {
            return Err(Error::Index(format!(
                "ground-truth class {class} out of range for {} foreground classes",
                num_classes_incl_bg - 1
            )));
        }
        let mut row = Vec::with_capacity(num_queries);
        for i in 0..num_queries {
            let s_cls = probs[i][class];
            let s_loc = giou(to_corner(query_boxes[i]), to_corner(gt_box))
                - l1_box(query_boxes[i], gt_box);
            row.push(-match_score(s_cls, s_loc, w));
        }
        cost.push(row);
    }
    Ok(cost)
}

fn validate_matrix(cost: &[Vec<f64>]) -> Result<usize> {
    let m = cost.len();
    if m == 0 {
        return Ok(0);
    }
    let n = cost[0].len();
    for row in cost {
        if row.len() != n {
            return Err(Error::Dimension(format!(
                "ragged cost matrix: row of {} in a {}-column matrix",
                row.len(),
                n
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cost matrix has non-finite entries".into()));
        }
    }
    if m > n {
        return Err(Error::Capacity(format!(
            "{m} rows cannot be injectively assigned to {n} columns"
        )));
    }
    Ok(n)
}

/// Cost of a row-ordered pair list, folded left in row order so that both the
/// solver and the oracle compare bitwise-identical sums.
fn fold_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().fold(0.0, |acc, &(r, c)| acc + cost[r][c])
}

/// Shortest-augmenting-path assignment with row/column potentials.
/// Returns the column chosen for each row plus the final potentials.
fn jv_solve(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let m = cost.len();
    let n = if m == 0 { 0 } else { cost[0].len() };
    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n + 1]; // v[n] is the virtual start column
    let mut owner: Vec<Option<usize>> = vec![None; n + 1]; // column -> row

    for row in 0..m {
        owner[n] = Some(row);
        let mut j_cur = n;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prev = vec![n; n + 1];
        let mut in_tree = vec![false; n + 1];
        while let Some(r) = owner[j_cur] {
            in_tree[j_cur] = true;
            let mut delta = f64::INFINITY;
            let mut j_next = n;
            for j in 0..n {
                if !in_tree[j] {
                    let reduced = cost[r][j] - u[r] - v[j];
                    if reduced < min_to[j] {
                        min_to[j] = reduced;
                        prev[j] = j_cur;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        j_next = j;
                    }
                }
            }
            for j in 0..=n {
                if in_tree[j] {
                    if let Some(rj) = owner[j] {
                        u[rj] += delta;
                    }
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j_cur = j_next;
        }
        // Augment: walk the alternating path back to the virtual column.
        while j_cur != n {
            let j_prev = prev[j_cur];
            owner[j_cur] = owner[j_prev];
            j_cur = j_prev;
        }
    }

    let mut col_of_row = vec![0usize; m];
    for j in 0..n {
        if let Some(r) = owner[j] {
            col_of_row[r] = j;
        }
    }
    v.truncate(n);
    (col_of_row, u, v)
}

/// Re-solves the subproblem of `rows` over `cols`; returns per-row columns in
/// the caller's index space, in `rows` order.
fn jv_subsolve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let sub: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
        .collect();
    let (col_idx, _, _) = jv_solve(&sub);
    col_idx.into_iter().map(|ci| cols[ci]).collect()
}

/// Rewrites an optimal assignment into the lexicographically smallest pair
/// list among optima. Candidate columns are filtered by near-zero reduced
/// cost (a necessary optimality condition under the final potentials), and a
/// candidate is accepted only when a re-solve confirms the exact optimal
/// total, so false candidates cost time, never correctness. Exactness of the
/// tie test assumes sums reproduce bitwise, which holds for the integer-like
/// costs where ties actually occur.
fn lexicographic_refine(
    cost: &[Vec<f64>],
    mut col_of_row: Vec<usize>,
    u: &[f64],
    v: &[f64],
) -> Vec<(usize, usize)> {
    let m = cost.len();
    let n = if m == 0 { 0 } else { cost[0].len() };
    let total_star = {
        let pairs: Vec<(usize, usize)> = (0..m).map(|r| (r, col_of_row[r])).collect();
        fold_cost(cost, &pairs)
    };
    let scale = cost
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-9 * (1.0 + scale);

    let mut taken = vec![false; n];
    let mut prefix: Vec<(usize, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        let current = col_of_row[i];
        let mut chosen = current;
        for j in 0..n {
            if taken[j] || j >= current {
                if j >= current {
                    break;
                }
                continue;
            }
            if cost[i][j] - u[i] - v[j] > tol {
                continue;
            }
            // Tentatively fix (i, j); confirm the remainder still reaches the optimum.
            let rest_rows: Vec<usize> = (i + 1..m).collect();
            let rest_cols: Vec<usize> =
                (0..n).filter(|&c| !taken[c] && c != j).collect();
            let sub = jv_subsolve(cost, &rest_rows, &rest_cols);
            let mut candidate = prefix.clone();
            candidate.push((i, j));
            candidate.extend(rest_rows.iter().copied().zip(sub.iter().copied()));
            if fold_cost(cost, &candidate) == total_star {
                chosen = j;
                for (&r, &c) in rest_rows.iter().zip(&sub) {
                    col_of_row[r] = c;
                }
                break;
            }
        }
        taken[chosen] = true;
        prefix.push((i, chosen));
    }
    prefix
}

/// Minimum-cost injective assignment of rows to columns (m <= n).
/// Deterministic: among cost-optimal assignments the lexicographically
/// smallest pair list is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = validate_matrix(cost)?;
    if cost.is_empty() || n == 0 {
        return Ok(Assignment { pairs: vec![], total_cost: 0.0 });
    }
    let (col_of_row, u, v) = jv_solve(cost);
    let pairs = lexicographic_refine(cost, col_of_row, &u, &v);
    let total_cost = fold_cost(cost, &pairs);
    Ok(Assignment { pairs, total_cost })
}

/// Exhaustive assignment oracle. Enumerates every injective map in
/// lexicographic column order, so the first strict improvement rule already
/// yields the tie-break contract shared with [`hungarian`].
pub fn brute_force_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = validate_matrix(cost)?;
    let m = cost.len();
    if m > 8 {
        return Err(Error::Size(format!(
            "brute-force matcher is guarded at 8 rows, got {m}"
        )));
    }
    if m == 0 || n == 0 {
        return Ok(Assignment { pairs: vec![], total_cost: 0.0 });
    }

    fn recurse(
        cost: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        partial: &mut Vec<usize>,
        partial_cost: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let m = cost.len();
        if row == m {
            let better = match best {
                None => true,
                Some((bc, _)) => partial_cost < *bc,
            };
            if better {
                *best = Some((partial_cost, partial.clone()));
            }
            return;
        }
        for col in 0..cost[row].len() {
            if used[col] {
                continue;
            }
            used[col] = true;
            partial.push(col);
            recurse(cost, row + 1, used, partial, partial_cost + cost[row][col], best);
            partial.pop();
            used[col] = false;
        }
    }

    let mut best = None;
    let mut used = vec![false; n];
    let mut partial = Vec::with_capacity(m);
    recurse(cost, 0, &mut used, &mut partial, 0.0, &mut best);
    let (total_cost, cols) = best.expect("m <= n guarantees a feasible assignment");
    let pairs = cols.into_iter().enumerate().collect();
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn match_score_cases() {
        let w = MatchWeights { alpha: 1.0, beta: 1.0 };
        assert!((match_score(0.8, 0.5, &w) - 1.3).abs() < 1e-12);
        let w0 = MatchWeights { alpha: 1.0, beta: 0.0 };
        assert_eq!(match_score(0.8, 0.5, &w0), 0.8);
        let w2 = MatchWeights { alpha: 2.0, beta: 1.0 };
        assert!((match_score(0.5, -0.2, &w2) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(MatchWeights { alpha: 0.0, beta: 0.0 }.validate().is_err());
        assert!(MatchWeights { alpha: -1.0, beta: 1.0 }.validate().is_err());
        assert!(MatchWeights::default().validate().is_ok());
    }

    #[test]
    fn hungarian_two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn hungarian_three_by_three() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn hungarian_single_row_argmin() {
        let cost = vec![vec![3.0, 1.0, 2.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]); // first of the tied minima
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn hungarian_rejects_wide_rows() {
        let cost = vec![vec![1.0], vec![2.0]];
        assert!(matches!(hungarian(&cost), Err(Error::Capacity(_))));
    }

    #[test]
    fn brute_force_matches_examples() {
        let a = brute_force_match(&[vec![1.0, 2.0], vec![3.0, 1.0]].to_vec()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);

        let b = brute_force_match(
            &[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]].to_vec(),
        )
        .unwrap();
        assert_eq!(b.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(b.total_cost, 5.0);
    }

    #[test]
    fn brute_force_empty_and_guard() {
        let empty: Vec<Vec<f64>> = vec![];
        let a = brute_force_match(&empty).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);

        let big = vec![vec![0.0; 9]; 9];
        assert!(matches!(brute_force_match(&big), Err(Error::Size(_))));
    }

    #[test]
    fn all_equal_costs_take_lexicographic_assignment() {
        let cost = vec![vec![1.0; 5]; 3];
        let a = hungarian(&cost).unwrap();
        let b = brute_force_match(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a, b);
    }

    #[test]
    fn tied_optima_agree_with_oracle() {
        // Two optimal assignments; both routes must pick the same one.
        let cost = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        let b = brute_force_match(&cost).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);

        // Anti-diagonal is optimal but not lexicographic-first; diagonal costs the same.
        let cost = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let a = hungarian(&cost).unwrap();
        let b = brute_force_match(&cost).unwrap();
        assert_eq!(a, b);

        // Integer ties needing the refine pass to backtrack.
        let cost = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        let b = brute_force_match(&cost).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn potentials_stay_dually_feasible() {
        let mut r = SplitMix64::new(404);
        for _ in 0..200 {
            let m = 1 + r.next_below(6);
            let n = m + r.next_below(5);
            let cost: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| r.next_range(-5.0, 5.0)).collect())
                .collect();
            let (_, u, v) = jv_solve(&cost);
            for i in 0..m {
                for j in 0..n {
                    assert!(
                        u[i] + v[j] <= cost[i][j] + 1e-9,
                        "dual infeasible at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn random_conformance_small() {
        let mut r = SplitMix64::new(99);
        for _ in 0..300 {
            let m = 1 + r.next_below(6);
            let n = m + r.next_below(5);
            let cost: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| r.next_range(-10.0, 10.0)).collect())
                .collect();
            let h = hungarian(&cost).unwrap();
            let b = brute_force_match(&cost).unwrap();
            assert_eq!(h.total_cost, b.total_cost, "cost mismatch on {cost:?}");
            assert_eq!(h.pairs, b.pairs, "pair mismatch on {cost:?}");
        }
    }

    #[test]
    fn integer_tie_conformance() {
        // Small integer costs produce frequent ties; exercises the refine pass.
        let mut r = SplitMix64::new(2024);
        for _ in 0..300 {
            let m = 1 + r.next_below(5);
            let n = m + r.next_below(4);
            let cost: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| r.next_below(4) as f64).collect())
                .collect();
            let h = hungarian(&cost).unwrap();
            let b = brute_force_match(&cost).unwrap();
            assert_eq!(h, b, "mismatch on {cost:?}");
        }
    }

    proptest! {
        #[test]
        fn row_shift_preserves_pairs(
            rows in 1usize..5,
            extra in 0usize..4,
            shift in -3.0..3.0f64,
            seed in 0u64..10_000,
        ) {
            let mut r = SplitMix64::new(seed);
            let n = rows + extra;
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..n).map(|_| r.next_range(-4.0, 4.0)).collect())
                .collect();
            let base = hungarian(&cost).unwrap();
            let mut shifted = cost.clone();
            for v in &mut shifted[0] {
                *v += shift;
            }
            let moved = hungarian(&shifted).unwrap();
            prop_assert_eq!(&base.pairs, &moved.pairs);
            prop_assert!((moved.total_cost - base.total_cost - shift).abs() < 1e-9);
        }
    }
}

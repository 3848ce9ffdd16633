//! Second-order structured pruning with weight compensation.
//!
//! For a structure `M` (a set of input columns of the target matrix) the
//! importance is
//!
//! ```text
//! I_M = Σ_i  W[i, M] · ((H⁻¹)_{M,M})⁻¹ · W[i, M]ᵀ
//! ```
//!
//! and removing `M` updates the surviving weights by
//!
//! ```text
//! δ = −W[:, M] · ((H⁻¹)_{M,M})⁻¹ · (H⁻¹)_{M, :}
//! ```
//!
//! which, at zero damping, is exactly the least-squares-optimal adjustment:
//! the importance equals the reconstruction error the removal incurs after
//! that adjustment. Greedy pruning removes the cheapest remaining structure,
//! applies δ, and re-inverts the damped Hessian restricted to the surviving
//! columns before the next step.

use super::{PruneStep, StructureSpec};
use crate::error::{Error, Result};
use crate::linalg::{inverse_submatrix_inverse, Matrix, SymPosDef};

/// Importance of removing columns `cols` from `w`, given the full inverse
/// Hessian of the layer input.
pub fn obs_importance(w: &Matrix, hinv: &Matrix, cols: &[usize]) -> Result<f64> {
    let inv_sub = inverse_submatrix_inverse(hinv, cols)?;
    let w_cols = w.select_cols(cols)?;
    Ok(importance_given_inverse(&w_cols, &inv_sub))
}

/// Compensation delta for removing columns `cols`: applying `w + δ` and then
/// zeroing the removed columns yields the optimally adjusted survivors.
pub fn obs_compensation(w: &Matrix, hinv: &Matrix, cols: &[usize]) -> Result<Matrix> {
    let inv_sub = inverse_submatrix_inverse(hinv, cols)?;
    let w_cols = w.select_cols(cols)?;
    let hinv_rows = hinv.select_rows(cols)?;
    let mut delta = w_cols.matmul(&inv_sub)?.matmul(&hinv_rows)?;
    for v in delta.data_mut() {
        *v = -*v;
    }
    Ok(delta)
}

/// `Σ_i w_i · B · w_iᵀ` with `B = ((H⁻¹)_{M,M})⁻¹` already formed.
fn importance_given_inverse(w_cols: &Matrix, inv_sub: &Matrix) -> f64 {
    let g = inv_sub.rows;
    let mut total = 0.0;
    let mut tmp = vec![0.0f64; g];
    for r in 0..w_cols.rows {
        let row = w_cols.row(r);
        for (j, t) in tmp.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, &wv) in row.iter().enumerate() {
                s += wv * inv_sub.get(i, j);
            }
            *t = s;
        }
        for (t, &wv) in tmp.iter().zip(row) {
            total += t * wv;
        }
    }
    total
}

/// Greedy trajectory parts: the removal steps, one weight snapshot per
/// depth (`snapshots[k]` has exactly `k` groups zeroed), and the sorted
/// removed-group ids per depth.
pub type GreedyTrajectory = (Vec<PruneStep>, Vec<Matrix>, Vec<Vec<u16>>);

/// Greedy trajectory for one layer: repeatedly remove the remaining group
/// with minimal importance (ties to the lowest group index), compensate the
/// survivors, and snapshot. Importance at each step is computed against the
/// current updated weights and the damped Hessian restricted to surviving
/// columns.
pub fn obs_prune_layer(
    w: &Matrix,
    h: &SymPosDef,
    spec: &StructureSpec,
    max_steps: usize,
) -> Result<GreedyTrajectory> {
    let group_count = spec.group_count();
    if max_steps > group_count {
        return Err(Error::InvalidConfig(format!(
            "{}: {max_steps} steps but only {group_count} groups",
            spec.layer_id
        )));
    }
    if h.dim != w.cols {
        return Err(Error::InvalidShape(format!(
            "{}: hessian dim {} vs weight cols {}",
            spec.layer_id, h.dim, w.cols
        )));
    }

    let mut current = w.clone();
    let mut snapshots = vec![current.clone()];
    let mut removed_at: Vec<Vec<u16>> = vec![Vec::new()];
    let mut steps = Vec::with_capacity(max_steps);

    let mut remaining_groups: Vec<usize> = (0..group_count).collect();
    let mut remaining_cols: Vec<usize> = (0..w.cols).collect();
    let mut hinv = h.restricted(&remaining_cols)?.inverse()?;

    for _ in 0..max_steps {
        // Local (restricted) column index per surviving column.
        let local_of = |col: usize| remaining_cols.binary_search(&col).expect("column tracked");

        let mut best: Option<(f64, usize)> = None;
        for &g in &remaining_groups {
            let local_cols: Vec<usize> = spec.groups[g].iter().map(|&c| local_of(c)).collect();
            let inv_sub = inverse_submatrix_inverse(&hinv, &local_cols)?;
            let w_cols = current.select_cols(&spec.groups[g])?;
            let importance = importance_given_inverse(&w_cols, &inv_sub);
            if best.is_none_or(|(b, _)| importance < b) {
                best = Some((importance, g));
            }
        }
        let (importance, chosen) = best.expect("at least one group remains");

        // δ over the surviving columns, then zero the removed ones.
        let local_cols: Vec<usize> = spec.groups[chosen].iter().map(|&c| local_of(c)).collect();
        let inv_sub = inverse_submatrix_inverse(&hinv, &local_cols)?;
        let w_cols = current.select_cols(&spec.groups[chosen])?;
        let hinv_rows = hinv.select_rows(&local_cols)?;
        let delta = w_cols.matmul(&inv_sub)?.matmul(&hinv_rows)?;
        for r in 0..current.rows {
            for (j, &col) in remaining_cols.iter().enumerate() {
                let v = current.get(r, col) - delta.get(r, j);
                current.set(r, col, v);
            }
        }
        for &c in &spec.groups[chosen] {
            for r in 0..current.rows {
                current.set(r, c, 0.0);
            }
        }

        remaining_groups.retain(|&g| g != chosen);
        remaining_cols.retain(|c| !spec.groups[chosen].contains(c));
        if !remaining_cols.is_empty() {
            hinv = h.restricted(&remaining_cols)?.inverse()?;
        }

        let mut removed = removed_at.last().unwrap().clone();
        removed.push(chosen as u16);
        removed.sort_unstable();
        removed_at.push(removed);
        snapshots.push(current.clone());
        steps.push(PruneStep {
            removed_group: chosen as u16,
            importance,
        });
    }
    Ok((steps, snapshots, removed_at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{damped_inverse, gram};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Independent oracle: optimal survivors via the normal equations,
    /// `Ŵ_R = W·H[:,R]·H_RR⁻¹`, and the reconstruction error they leave.
    fn least_squares_survivors(w: &Matrix, x: &Matrix, removed: &[usize]) -> (Matrix, f64) {
        let keep: Vec<usize> = (0..w.cols).filter(|c| !removed.contains(c)).collect();
        let x_keep = x.select_rows(&keep).unwrap();
        let h_keep = gram(&x_keep).unwrap();
        let h_keep_inv = damped_inverse(&h_keep, 0.0).unwrap();
        // W · Xᵀ · X_keepᵀ... assembled as W · (X · X_keepᵀ) · H_RR⁻¹.
        let cross = x.matmul(&x_keep.transpose()).unwrap();
        let w_opt = w.matmul(&cross).unwrap().matmul(&h_keep_inv).unwrap();
        let full = w.matmul(x).unwrap();
        let approx = w_opt.matmul(&x_keep).unwrap();
        let mut err = 0.0;
        for (a, b) in full.data().iter().zip(approx.data()) {
            err += (a - b) * (a - b);
        }
        (w_opt, err)
    }

    fn masked_error(w_masked: &Matrix, w: &Matrix, x: &Matrix) -> f64 {
        let full = w.matmul(x).unwrap();
        let pruned = w_masked.matmul(x).unwrap();
        full.data()
            .iter()
            .zip(pruned.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    #[test]
    fn zero_columns_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = random_matrix(&mut rng, 3, 5);
        for r in 0..3 {
            w.set(r, 2, 0.0);
        }
        let x = random_matrix(&mut rng, 5, 30);
        let hinv = damped_inverse(&gram(&x).unwrap(), 0.0).unwrap();
        assert!(obs_importance(&w, &hinv, &[2]).unwrap().abs() < 1e-12);
        let delta = obs_compensation(&w, &hinv, &[2]).unwrap();
        assert!(delta.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_hessian_collapses_to_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_matrix(&mut rng, 4, 6);
        let hinv = Matrix::identity(6);
        for j in 0..6 {
            let expect: f64 = (0..4).map(|i| w.get(i, j) * w.get(i, j)).sum();
            let got = obs_importance(&w, &hinv, &[j]).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
        // With H = I the compensation cancels the removed columns exactly
        // and touches nothing else.
        let delta = obs_compensation(&w, &hinv, &[1, 4]).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let expect = if c == 1 || c == 4 { -w.get(r, c) } else { 0.0 };
                assert!((delta.get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_column_importance_matches_classical_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = random_matrix(&mut rng, 5, 7);
            let x = random_matrix(&mut rng, 7, 40);
            let hinv = damped_inverse(&gram(&x).unwrap(), 0.0).unwrap();
            for j in 0..7 {
                let got = obs_importance(&w, &hinv, &[j]).unwrap();
                let classical: f64 =
                    (0..5).map(|i| w.get(i, j) * w.get(i, j)).sum::<f64>() / hinv.get(j, j);
                let denom = classical.abs().max(1e-12);
                assert!((got - classical).abs() / denom < 1e-9);
            }
        }
    }

    #[test]
    fn importance_equals_compensated_removal_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let w = random_matrix(&mut rng, 4, 8);
            let x = random_matrix(&mut rng, 8, 50);
            let hinv = damped_inverse(&gram(&x).unwrap(), 0.0).unwrap();
            let cols = vec![trial % 8, (trial + 3) % 8];
            let importance = obs_importance(&w, &hinv, &cols).unwrap();
            let delta = obs_compensation(&w, &hinv, &cols).unwrap();
            let mut pruned = w.clone();
            for r in 0..4 {
                for c in 0..8 {
                    pruned.set(r, c, w.get(r, c) + delta.get(r, c));
                }
            }
            for &c in &cols {
                for r in 0..4 {
                    pruned.set(r, c, 0.0);
                }
            }
            let err = masked_error(&pruned, &w, &x);
            assert!(
                (err - importance).abs() / importance.abs().max(1e-12) < 1e-6,
                "importance {importance} vs incurred error {err}"
            );
        }
    }

    #[test]
    fn compensated_survivors_match_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let w = random_matrix(&mut rng, 4, 6);
            let x = random_matrix(&mut rng, 6, 40);
            let hinv = damped_inverse(&gram(&x).unwrap(), 0.0).unwrap();
            let removed = vec![trial % 6];
            let delta = obs_compensation(&w, &hinv, &removed).unwrap();
            let (w_opt, _) = least_squares_survivors(&w, &x, &removed);
            let keep: Vec<usize> = (0..6).filter(|c| !removed.contains(c)).collect();
            for r in 0..4 {
                for (kc, &c) in keep.iter().enumerate() {
                    let updated = w.get(r, c) + delta.get(r, c);
                    assert!(
                        (updated - w_opt.get(r, kc)).abs() < 1e-8,
                        "survivor ({r},{c}): {updated} vs {}",
                        w_opt.get(r, kc)
                    );
                }
            }
        }
    }

    #[test]
    fn greedy_zero_steps_returns_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_matrix(&mut rng, 3, 6);
        let x = random_matrix(&mut rng, 6, 30);
        let h = gram(&x).unwrap();
        let spec =
            StructureSpec::new("t".into(), vec![vec![0, 1], vec![2, 3], vec![4, 5]]).unwrap();
        let (steps, snaps, removed) = obs_prune_layer(&w, &h, &spec, 0).unwrap();
        assert!(steps.is_empty());
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].data(), w.data());
        assert_eq!(removed[0].len(), 0);
    }

    #[test]
    fn greedy_full_removal_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 3, 6);
        let x = random_matrix(&mut rng, 6, 30);
        let h = gram(&x).unwrap();
        let spec =
            StructureSpec::new("t".into(), vec![vec![0, 1], vec![2, 3], vec![4, 5]]).unwrap();
        let (steps, snaps, _) = obs_prune_layer(&w, &h, &spec, 3).unwrap();
        assert_eq!(steps.len(), 3);
        assert!(snaps[3].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn greedy_compensation_beats_plain_masking() {
        // Same removed columns, with vs without the update.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_matrix(&mut rng, 3, 6);
        let x = random_matrix(&mut rng, 6, 36);
        let h = gram(&x).unwrap();
        let spec =
            StructureSpec::new("t".into(), (0..6).map(|c| vec![c]).collect::<Vec<_>>()).unwrap();
        let (_, snaps, removed) = obs_prune_layer(&w, &h, &spec, 2).unwrap();
        let mut masked_only = w.clone();
        for &g in &removed[2] {
            for r in 0..3 {
                masked_only.set(r, g as usize, 0.0);
            }
        }
        let err_comp = masked_error(&snaps[2], &w, &x);
        let err_plain = masked_error(&masked_only, &w, &x);
        assert!(err_comp <= err_plain + 1e-12, "{err_comp} > {err_plain}");
    }

    #[test]
    fn snapshots_zero_exactly_k_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_matrix(&mut rng, 4, 8);
        let x = random_matrix(&mut rng, 8, 40);
        let h = gram(&x).unwrap().with_damping_frac(0.01);
        let spec = StructureSpec::new(
            "t".into(),
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
        )
        .unwrap();
        let (_, snaps, removed) = obs_prune_layer(&w, &h, &spec, 4).unwrap();
        for k in 0..=4 {
            assert_eq!(removed[k].len(), k);
            for (g, group) in spec.groups.iter().enumerate() {
                let zeroed = group
                    .iter()
                    .all(|&c| (0..4).all(|r| snaps[k].get(r, c) == 0.0));
                assert_eq!(
                    zeroed,
                    removed[k].contains(&(g as u16)),
                    "level {k} group {g}"
                );
            }
        }
    }

    #[test]
    fn greedy_error_accumulates_as_sum_of_importances() {
        // With zero damping each compensated removal projects onto the
        // surviving columns' span, so the per-step residuals are orthogonal
        // and the total reconstruction error at depth k equals the sum of
        // the first k recorded importances. This exercises the restricted
        // re-inversion bookkeeping end to end.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..10 {
            let w = random_matrix(&mut rng, 4, 8);
            let x = random_matrix(&mut rng, 8, 50 + trial);
            let h = gram(&x).unwrap();
            let spec = StructureSpec::new(
                "t".into(),
                vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
            )
            .unwrap();
            let (steps, snaps, _) = obs_prune_layer(&w, &h, &spec, 4).unwrap();
            let mut importance_sum = 0.0;
            for k in 1..=4 {
                importance_sum += steps[k - 1].importance;
                let err = masked_error(&snaps[k], &w, &x);
                let denom = err.abs().max(1e-12);
                assert!(
                    (err - importance_sum).abs() / denom < 1e-6,
                    "depth {k}: error {err} vs summed importance {importance_sum}"
                );
            }
        }
    }

    #[test]
    fn singular_submatrix_is_reported() {
        let w = Matrix::identity(3);
        let mut hinv = Matrix::zeros(3, 3);
        hinv.set(0, 0, 1.0); // zero diagonal below → singular 2×2 block
        assert!(matches!(
            obs_importance(&w, &hinv, &[1, 2]),
            Err(Error::SingularHessian(_))
        ));
    }
}

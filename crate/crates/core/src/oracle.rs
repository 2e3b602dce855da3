//! Exhaustive reference solvers used to check the flow-based solvers.

use crate::error::{Error, Result};
use crate::gap::{GapInstance, JointMatching, Label, Triple};
use crate::par;

/// Largest per-side size `brute_force_gap` accepts (8! permutations).
pub const MAX_BRUTE_FORCE: usize = 8;

/// Optimal joint matching by enumerating every permutation. Given a
/// permutation the objective separates over pairs, so each pair takes its
/// cheapest label (models in index order, then the outlier; first wins ties).
/// Permutations are visited in lexicographic order and the first optimum wins.
pub fn brute_force_gap(inst: &GapInstance) -> Result<JointMatching> {
    let labels: Vec<usize> = (0..inst.model_count()).collect();
    brute_force_gap_for(inst, &labels)
}

/// `brute_force_gap` restricted to a model subset.
pub fn brute_force_gap_for(inst: &GapInstance, labels: &[usize]) -> Result<JointMatching> {
    let n = inst.size();
    if n > MAX_BRUTE_FORCE {
        return Err(Error::TooLarge(format!("{n} features per side (max {MAX_BRUTE_FORCE})")));
    }
    for &h in labels {
        if h >= inst.model_count() {
            return Err(Error::UnknownLabel(h));
        }
    }
    // best[p][q] = cheapest (cost, label) for the pair, if any
    let best: Vec<Vec<Option<(i64, Label)>>> = (0..n)
        .map(|p| {
            (0..n)
                .map(|q| {
                    let mut choice: Option<(i64, Label)> = None;
                    for &h in labels {
                        if let Some(c) = inst.cost(p, q, Label::Model(h)) {
                            if choice.is_none_or(|(b, _)| c < b) {
                                choice = Some((c, Label::Model(h)));
                            }
                        }
                    }
                    if let Some(t) = inst.outlier_cost() {
                        if choice.is_none_or(|(b, _)| t < b) {
                            choice = Some((t, Label::Outlier));
                        }
                    }
                    choice
                })
                .collect()
        })
        .collect();

    if n == 0 {
        return Ok(JointMatching::new(Vec::new(), 0));
    }
    // split on the partner of feature 0; branches are reduced in q order
    let branches = par::map_range(n, |q0| {
        let mut perm = vec![q0];
        let mut used = vec![false; n];
        used[q0] = true;
        let mut best_perm: Option<(i64, Vec<usize>)> = None;
        enumerate(&best, &mut perm, &mut used, &mut best_perm);
        best_perm
    });
    let (objective, perm) = branches
        .into_iter()
        .flatten()
        .fold(None::<(i64, Vec<usize>)>, |acc, b| match acc {
            Some(a) if a.0 <= b.0 => Some(a),
            _ => Some(b),
        })
        .ok_or_else(|| Error::Infeasible("no permutation has finite cost".into()))?;
    let triples = perm
        .iter()
        .enumerate()
        .map(|(p, &q)| Triple { p, q, label: best[p][q].expect("feasible pair").1 })
        .collect();
    Ok(JointMatching::new(triples, objective))
}

fn enumerate(
    best: &[Vec<Option<(i64, Label)>>],
    perm: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Option<(i64, Vec<usize>)>,
) {
    let n = best.len();
    if perm.len() == n {
        let mut total = 0i64;
        for (p, &q) in perm.iter().enumerate() {
            match best[p][q] {
                Some((c, _)) => total += c,
                None => return,
            }
        }
        if out.as_ref().is_none_or(|(b, _)| total < *b) {
            *out = Some((total, perm.clone()));
        }
        return;
    }
    for q in 0..n {
        if !used[q] {
            used[q] = true;
            perm.push(q);
            enumerate(best, perm, used, out);
            perm.pop();
            used[q] = false;
        }
    }
}

/// Constraint matrix of the one-to-one equations, rows by columns, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoefficientMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl CoefficientMatrix {
    pub fn from_rows(rows: Vec<Vec<i64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged matrix".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.into_iter().flatten().collect() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// The matrix for `n` features per side and `labels` models.
///
/// Columns are `x_{pqh}` ordered by `h`, then `p`, then `q`. The first `n` rows
/// are the per-left-feature equations (a contiguous run of ones per block), the
/// last `n` rows the per-right-feature equations (an identity per block). The
/// `labels` blocks are identical copies side by side.
pub fn coefficient_matrix(n: usize, labels: usize) -> Result<CoefficientMatrix> {
    if n == 0 || labels == 0 {
        return Err(Error::Invalid("need n >= 1 and at least one label".into()));
    }
    let cols = labels * n * n;
    let mut data = vec![0i64; 2 * n * cols];
    for h in 0..labels {
        for p in 0..n {
            for q in 0..n {
                let c = h * n * n + p * n + q;
                data[p * cols + c] = 1;
                data[(n + q) * cols + c] = 1;
            }
        }
    }
    Ok(CoefficientMatrix { rows: 2 * n, cols, data })
}

/// Every entry is 0, +1 or -1.
pub fn entries_are_unit(a: &CoefficientMatrix) -> bool {
    a.data.iter().all(|v| (-1..=1).contains(v))
}

/// Largest number of nonzeros found in any column.
pub fn max_column_nonzeros(a: &CoefficientMatrix) -> usize {
    (0..a.cols).map(|c| (0..a.rows).filter(|&r| a.get(r, c) != 0).count()).max().unwrap_or(0)
}

/// Checks the row-partition condition for the given split: same-sign pairs in a
/// column must straddle the split, opposite-sign pairs must not.
pub fn row_partition_holds(a: &CoefficientMatrix, first_part: &[bool]) -> bool {
    (0..a.cols).all(|c| {
        let nz: Vec<usize> = (0..a.rows).filter(|&r| a.get(r, c) != 0).collect();
        match nz.as_slice() {
            [r1, r2] => {
                let same_sign = a.get(*r1, c) == a.get(*r2, c);
                let same_part = first_part[*r1] == first_part[*r2];
                same_sign != same_part
            }
            [_] | [] => true,
            _ => false,
        }
    })
}

/// Largest row count `check_total_unimodularity` accepts.
pub const MAX_TU_ROWS: usize = 6;

/// True iff every square submatrix of order up to `max_order` has determinant in {-1, 0, 1}.
pub fn check_total_unimodularity(a: &CoefficientMatrix, max_order: usize) -> Result<bool> {
    if a.rows > MAX_TU_ROWS {
        return Err(Error::TooLarge(format!("{} rows (max {MAX_TU_ROWS})", a.rows)));
    }
    let max_order = max_order.min(a.rows).min(a.cols);
    let row_sets: Vec<Vec<usize>> = (1..=max_order).flat_map(|k| combinations(a.rows, k)).collect();
    let ok = par::map(&row_sets, |rows| {
        let k = rows.len();
        let mut cols = (0..k).collect::<Vec<_>>();
        loop {
            let det = determinant(a, rows, &cols);
            if !(-1..=1).contains(&det) {
                return false;
            }
            if !next_combination(&mut cols, a.cols) {
                return true;
            }
        }
    });
    Ok(ok.into_iter().all(|b| b))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        if !next_combination(&mut c, n) {
            return out;
        }
    }
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exact integer determinant (fraction-free Bareiss elimination).
fn determinant(a: &CoefficientMatrix, rows: &[usize], cols: &[usize]) -> i128 {
    let k = rows.len();
    let mut m: Vec<Vec<i128>> =
        rows.iter().map(|&r| cols.iter().map(|&c| a.get(r, c) as i128).collect()).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for i in 0..k {
        if m[i][i] == 0 {
            match (i + 1..k).find(|&r| m[r][i] != 0) {
                Some(r) => {
                    m.swap(i, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for r in i + 1..k {
            for c in i + 1..k {
                m[r][c] = (m[r][c] * m[i][i] - m[r][i] * m[i][c]) / prev;
            }
            m[r][i] = 0;
        }
        prev = m[i][i];
    }
    sign * m[k - 1][k - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_examples() {
        let t = vec![vec![vec![Some(0), Some(5)], vec![Some(5), Some(0)]]];
        let inst = GapInstance::from_costs(&t, 2, 2, None).unwrap();
        assert_eq!(brute_force_gap(&inst).unwrap().objective, 0);

        let inst = GapInstance::from_costs(&[vec![vec![Some(3)]]], 1, 1, Some(2)).unwrap();
        let m = brute_force_gap(&inst).unwrap();
        assert_eq!((m.objective, m.triples[0].label), (2, Label::Outlier));
    }

    #[test]
    fn brute_force_size_guard() {
        let n = MAX_BRUTE_FORCE + 1;
        let inst = GapInstance::from_costs(&[vec![vec![Some(1); n]; n]], n, n, None).unwrap();
        assert!(matches!(brute_force_gap(&inst), Err(Error::TooLarge(_))));
    }

    #[test]
    fn small_matrices() {
        let a = coefficient_matrix(1, 1).unwrap();
        assert_eq!((a.rows(), a.cols()), (2, 1));
        assert_eq!((a.get(0, 0), a.get(1, 0)), (1, 1));

        let a = coefficient_matrix(2, 1).unwrap();
        let expected = [[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0], [0, 1, 0, 1]];
        for (r, row) in expected.iter().enumerate() {
            assert_eq!(a.row(r), row);
        }

        let b = coefficient_matrix(2, 2).unwrap();
        for r in 0..4 {
            assert_eq!(&b.row(r)[..4], a.row(r));
            assert_eq!(&b.row(r)[4..], a.row(r));
        }
    }

    #[test]
    fn unimodularity_checks() {
        assert!(check_total_unimodularity(&coefficient_matrix(1, 1).unwrap(), 2).unwrap());
        assert!(check_total_unimodularity(&coefficient_matrix(2, 2).unwrap(), 4).unwrap());
        let bad = CoefficientMatrix::from_rows(vec![vec![1, 1], vec![-1, 1]]).unwrap();
        assert!(!check_total_unimodularity(&bad, 2).unwrap());
        assert!(check_total_unimodularity(&coefficient_matrix(4, 1).unwrap(), 2).is_err());
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let m = CoefficientMatrix::from_rows(vec![vec![2, -1, 0], vec![1, 3, 2], vec![0, 1, 1]]).unwrap();
        // 2*(3-2) - (-1)*(1-0) + 0 = 3
        assert_eq!(determinant(&m, &[0, 1, 2], &[0, 1, 2]), 3);
    }
}

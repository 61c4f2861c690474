//! Cross-domain instance matching.
//!
//! Pairwise L1 costs between source and target features, exact minimum-weight
//! bipartite matching (Hungarian method with potentials), and the
//! divide-and-conquer variant that matches aligned random folds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::numkit::{format_f64, parse_f64, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub costs: Matrix,
    /// Source instance index of each row.
    pub row_ids: Vec<usize>,
    /// Target instance index of each column.
    pub col_ids: Vec<usize>,
}

impl CostMatrix {
    /// Wraps a raw cost matrix with identity row/column ids.
    pub fn from_matrix(costs: Matrix) -> Result<Self> {
        if let Some(v) = costs.as_slice().iter().find(|v| **v < 0.0) {
            return Err(Error::Validation(format!("negative cost {v}")));
        }
        Ok(Self {
            row_ids: (0..costs.rows()).collect(),
            col_ids: (0..costs.cols()).collect(),
            costs,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedPairs {
    /// `(source_index, target_index)`, sorted by source index.
    pub pairs: Vec<(usize, usize)>,
    pub costs: Vec<f64>,
    pub total_cost: f64,
}

impl MatchedPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn from_unsorted(mut items: Vec<(usize, usize, f64)>) -> Self {
        items.sort_by_key(|&(s, t, _)| (s, t));
        let total_cost = items.iter().map(|x| x.2).sum();
        Self {
            pairs: items.iter().map(|&(s, t, _)| (s, t)).collect(),
            costs: items.iter().map(|x| x.2).collect(),
            total_cost,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "pairs {} total {}\n",
            self.len(),
            format_f64(self.total_cost)
        );
        for ((src, tgt), c) in self.pairs.iter().zip(&self.costs) {
            let _ = writeln!(s, "{src} {tgt} {}", format_f64(*c));
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "empty pair file"))?;
        let loc = format!("{origin}:{}", hl + 1);
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "pairs" || h[2] != "total" {
            return Err(Error::parse(loc, "expected `pairs <count> total <cost>`"));
        }
        let count: usize = h[1]
            .parse()
            .map_err(|_| Error::parse(&loc, "bad pair count"))?;
        let total_cost = parse_f64(h[3], &loc)?;
        let mut pairs = Vec::with_capacity(count);
        let mut costs = Vec::with_capacity(count);
        for (ln, line) in lines {
            let loc = format!("{origin}:{}", ln + 1);
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 3 {
                return Err(Error::parse(loc, "expected `s_idx t_idx cost`"));
            }
            let idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(&loc, format!("bad index `{s}`")))
            };
            pairs.push((idx(t[0])?, idx(t[1])?));
            costs.push(parse_f64(t[2], &loc)?);
        }
        if pairs.len() != count {
            return Err(Error::parse(
                origin,
                format!("header says {count} pairs, found {}", pairs.len()),
            ));
        }
        Ok(Self {
            pairs,
            costs,
            total_cost,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write_string(path, &self.to_text())
    }
}

/// Disjoint, exhaustive folds of each domain's indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub source_folds: Vec<Vec<usize>>,
    pub target_folds: Vec<Vec<usize>>,
}

/// `costs[i][j] = Σ_d |Fs[i,d] − Ft[j,d]|`.
pub fn pairwise_l1(fs: &Matrix, ft: &Matrix) -> Result<CostMatrix> {
    pairwise_distance(fs, ft, Distance::L1)
}

/// Edge weight used to build the bipartite graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    L1,
    /// Euclidean distance.
    L2,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::Validation(format!(
                "unknown distance `{other}` (expected l1 or l2)"
            ))),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
        })
    }
}

pub fn pairwise_distance(fs: &Matrix, ft: &Matrix, metric: Distance) -> Result<CostMatrix> {
    if fs.cols() != ft.cols() {
        return Err(Error::dims(
            "pairwise_distance",
            format!("feature dims {} vs {}", fs.cols(), ft.cols()),
        ));
    }
    let mut data = Vec::with_capacity(fs.rows() * ft.rows());
    for i in 0..fs.rows() {
        let a = fs.row(i);
        for j in 0..ft.rows() {
            let diffs = a.iter().zip(ft.row(j)).map(|(x, y)| x - y);
            let d = match metric {
                Distance::L1 => diffs.map(f64::abs).sum(),
                Distance::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            };
            data.push(d);
        }
    }
    Ok(CostMatrix {
        costs: Matrix::from_raw(fs.rows(), ft.rows(), data),
        row_ids: (0..fs.rows()).collect(),
        col_ids: (0..ft.rows()).collect(),
    })
}

/// Shortest-augmenting-path Hungarian method for `n ≤ m` (rows ≤ cols).
/// Returns the column assigned to each row. Ties go to the lowest column.
fn assign_rows(c: &Matrix) -> Vec<usize> {
    let (n, m) = c.shape();
    debug_assert!(n <= m);
    // 1-based; column 0 is the virtual root of each augmentation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_of_row[row_of[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Minimum-weight matching of size `min(n_s, n_t)`; the larger side is left
/// partially unmatched. Pair indices are taken from `row_ids`/`col_ids`.
pub fn hungarian(c: &CostMatrix) -> MatchedPairs {
    let (n, m) = c.costs.shape();
    if n == 0 || m == 0 {
        return MatchedPairs::from_unsorted(Vec::new());
    }
    let local: Vec<(usize, usize)> = if n <= m {
        assign_rows(&c.costs).into_iter().enumerate().collect()
    } else {
        assign_rows(&c.costs.transpose())
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    MatchedPairs::from_unsorted(
        local
            .into_iter()
            .map(|(i, j)| (c.row_ids[i], c.col_ids[j], c.costs.get(i, j)))
            .collect(),
    )
}

fn split_even(perm: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = perm.len();
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = perm[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    out
}

/// Random near-equal split of each domain into `k` folds.
pub fn partition_folds(n_s: usize, n_t: usize, k: usize, rng: &mut Rng) -> Result<FoldPlan> {
    if k == 0 || k > n_s.min(n_t) {
        return Err(Error::Validation(format!(
            "fold count {k} must be in 1..={}",
            n_s.min(n_t)
        )));
    }
    let ps = rng.permutation(n_s);
    let pt = rng.permutation(n_t);
    Ok(FoldPlan {
        source_folds: split_even(&ps, k),
        target_folds: split_even(&pt, k),
    })
}

/// Matches source fold `i` against target fold `i` for every `i` and returns
/// the union of the per-fold matchings.
pub fn match_domains(fs: &Matrix, ft: &Matrix, k: usize, rng: &mut Rng) -> Result<MatchedPairs> {
    match_domains_by(fs, ft, k, Distance::L1, rng)
}

pub fn match_domains_by(
    fs: &Matrix,
    ft: &Matrix,
    k: usize,
    metric: Distance,
    rng: &mut Rng,
) -> Result<MatchedPairs> {
    if fs.cols() != ft.cols() {
        return Err(Error::dims(
            "match_domains",
            format!("feature dims {} vs {}", fs.cols(), ft.cols()),
        ));
    }
    let plan = partition_folds(fs.rows(), ft.rows(), k, rng)?;
    match_with_plan(fs, ft, &plan, metric)
}

pub fn match_with_plan(
    fs: &Matrix,
    ft: &Matrix,
    plan: &FoldPlan,
    metric: Distance,
) -> Result<MatchedPairs> {
    let mut all = Vec::new();
    for (sf, tf) in plan.source_folds.iter().zip(&plan.target_folds) {
        let mut cost = pairwise_distance(&fs.select_rows(sf)?, &ft.select_rows(tf)?, metric)?;
        cost.row_ids = sf.clone();
        cost.col_ids = tf.clone();
        let m = hungarian(&cost);
        all.extend(
            m.pairs
                .into_iter()
                .zip(m.costs)
                .map(|((s, t), c)| (s, t, c)),
        );
    }
    Ok(MatchedPairs::from_unsorted(all))
}

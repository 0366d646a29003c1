use std::io::Write;

use crate::error::{Error, Result};

/// Euclidean distances between scan-1 fingerprints (rows) and scan-2
/// fingerprints (columns); lower is more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Header `row,col,distance`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "col", "distance"])?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    format!("{:?}", self.get(i, j)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Entry `(i, j)` is `‖F1_i − F2_j‖`.
pub fn similarity_matrix(f1: &[Vec<f64>], f2: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let dim = f1.first().or(f2.first()).map_or(0, Vec::len);
    if f1.iter().chain(f2).any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument(
            "fingerprints differ in length".into(),
        ));
    }
    let data = f1
        .iter()
        .flat_map(|a| f2.iter().map(move |b| euclidean(a, b)))
        .collect();
    SimilarityMatrix::from_data(f1.len(), f2.len(), data)
}

/// Fraction of rows whose diagonal entry is among the `k` smallest of the row.
/// Ties count against the diagonal: row `i` is correct iff fewer than `k`
/// other entries are `≤ s_ii`.
pub fn topk_accuracy(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (r, c) = sim.shape();
    if r != c || r == 0 {
        return Err(Error::InvalidArgument(format!(
            "Top-k needs a nonempty square matrix, got {r}x{c}"
        )));
    }
    let correct = (0..r)
        .filter(|&i| {
            let own = sim.get(i, i);
            let ahead = sim
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v <= own)
                .count();
            ahead < k
        })
        .count();
    Ok(correct as f64 / r as f64)
}

/// Top-1/Top-5 of one fold of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldResult {
    pub round: usize,
    pub fold: usize,
    pub n_test: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub folds: Vec<FoldResult>,
}

impl Metrics {
    fn weighted(results: impl Iterator<Item = FoldResult> + Clone) -> (f64, f64) {
        let n: usize = results.clone().map(|r| r.n_test).sum();
        if n == 0 {
            return (0.0, 0.0);
        }
        let t1 = results
            .clone()
            .map(|r| r.top1 * r.n_test as f64)
            .sum::<f64>()
            / n as f64;
        let t5 = results.map(|r| r.top5 * r.n_test as f64).sum::<f64>() / n as f64;
        (t1, t5)
    }

    /// Test-size weighted Top-1 and Top-5 of every round, in round order.
    pub fn per_round(&self) -> Vec<(usize, f64, f64)> {
        let mut rounds: Vec<usize> = self.folds.iter().map(|f| f.round).collect();
        rounds.sort_unstable();
        rounds.dedup();
        rounds
            .into_iter()
            .map(|r| {
                let (t1, t5) =
                    Self::weighted(self.folds.iter().copied().filter(move |f| f.round == r));
                (r, t1, t5)
            })
            .collect()
    }

    /// Test-size weighted means over all folds and rounds.
    pub fn mean(&self) -> (f64, f64) {
        Self::weighted(self.folds.iter().copied())
    }

    pub fn top1(&self) -> f64 {
        self.mean().0
    }

    pub fn top5(&self) -> f64 {
        self.mean().1
    }

    /// Header `round,fold,n_test,top1,top5`; a final `mean` row holds the weighted means.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["round", "fold", "n_test", "top1", "top5"])?;
        for f in &self.folds {
            w.write_record([
                f.round.to_string(),
                f.fold.to_string(),
                f.n_test.to_string(),
                format!("{:.6}", f.top1),
                format!("{:.6}", f.top5),
            ])?;
        }
        let (t1, t5) = self.mean();
        let n: usize = self.folds.iter().map(|f| f.n_test).sum();
        w.write_record([
            "mean".into(),
            "all".into(),
            n.to_string(),
            format!("{t1:.6}"),
            format!("{t5:.6}"),
        ])?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_similarity() {
        let f1 = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let f2 = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
        let s = similarity_matrix(&f1, &f2).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 1.0, 2f64.sqrt()]);
        let s = similarity_matrix(&f1, &f1).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(1, 1), 0.0);
        let rect = similarity_matrix(&vec![vec![1.0]; 3], &vec![vec![2.0]; 5]).unwrap();
        assert_eq!(rect.shape(), (3, 5));
        assert!(similarity_matrix(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn hand_topk() {
        let s =
            SimilarityMatrix::from_data(3, 3, vec![2., 1., 3., 0., 5., 1., 4., 4., 0.]).unwrap();
        assert!((topk_accuracy(&s, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(topk_accuracy(&s, 3).unwrap(), 1.0);
        let id = SimilarityMatrix::from_data(2, 2, vec![0., 1., 1., 0.]).unwrap();
        assert_eq!(topk_accuracy(&id, 1).unwrap(), 1.0);
        assert!(topk_accuracy(&id, 0).is_err());
    }

    #[test]
    fn ties_count_against_self() {
        let s = SimilarityMatrix::from_data(2, 2, vec![1., 1., 0., 0.]).unwrap();
        assert_eq!(topk_accuracy(&s, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, 2).unwrap(), 1.0);
    }

    #[test]
    fn weighted_means() {
        let m = Metrics {
            folds: vec![
                FoldResult {
                    round: 0,
                    fold: 0,
                    n_test: 1,
                    top1: 1.0,
                    top5: 1.0,
                },
                FoldResult {
                    round: 0,
                    fold: 1,
                    n_test: 3,
                    top1: 0.0,
                    top5: 1.0,
                },
                FoldResult {
                    round: 1,
                    fold: 0,
                    n_test: 2,
                    top1: 0.5,
                    top5: 0.5,
                },
            ],
        };
        assert_eq!(m.per_round(), vec![(0, 0.25, 1.0), (1, 0.5, 0.5)]);
        let (t1, t5) = m.mean();
        assert!((t1 - 2.0 / 6.0).abs() < 1e-15 && (t5 - 5.0 / 6.0).abs() < 1e-15);
    }
}

//! Balance measures, exact ground truth and index evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::VectorSet;
use crate::distance::squared_l2;
use crate::error::{check_dim, Error, Result};
use crate::index::{InvertedFile, SearchParams};

fn population(counts: &[usize]) -> Result<u128> {
    if counts.is_empty() {
        return Err(Error::Empty("cell counts"));
    }
    let total: u128 = counts.iter().map(|&n| n as u128).sum();
    if total == 0 {
        return Err(Error::invalid("all cell counts are zero"));
    }
    Ok(total)
}

/// Imbalance factor `k * sum(p_i^2)` with `p_i = n_i / N`.
///
/// It is 1 exactly when all cells hold the same number of points and `k`
/// when one cell holds everything. With `ma = 1` and queries distributed
/// like the data, the expected number of scanned points is `gamma * N / k`.
pub fn imbalance_factor(counts: &[usize]) -> Result<f64> {
    let total = population(counts)?;
    let squares: u128 = counts.iter().map(|&n| (n as u128) * (n as u128)).sum();
    Ok(counts.len() as f64 * squares as f64 / (total * total) as f64)
}

/// `N^2 * sum(p_i * (p_i - 1/k)^2)`, the variance of list length seen by a
/// point drawn from the data. Zero exactly when the cells are equal.
pub fn list_variance(counts: &[usize]) -> Result<f64> {
    let total = population(counts)? as f64;
    let target = total / counts.len() as f64;
    // N^2 * sum (n/N) (n/N - 1/k)^2 == sum n (n - N/k)^2 / N
    let sum: f64 = counts
        .iter()
        .map(|&n| {
            let n = n as f64;
            n * (n - target) * (n - target)
        })
        .sum();
    Ok(sum / total)
}

/// Exact nearest neighbors per query, ascending by distance then id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub r: usize,
    pub ids: Vec<Vec<u32>>,
    pub dists: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The nearest neighbor of query `q`.
    pub fn nearest(&self, q: usize) -> u32 {
        self.ids[q][0]
    }

    /// Binary layout: per query a little-endian `u32` count, then that many
    /// (`u32` id, `f64` distance) pairs.
    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (ids, dists) in self.ids.iter().zip(&self.dists) {
            out.write_all(&(ids.len() as u32).to_le_bytes())?;
            for (id, d) in ids.iter().zip(dists) {
                out.write_all(&id.to_le_bytes())?;
                out.write_all(&d.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut ids = Vec::new();
        let mut dists = Vec::new();
        let mut r = None;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*at..*at + n)
                .ok_or_else(|| Error::Corrupt("truncated ground truth".into()))?;
            *at += n;
            Ok(s)
        };
        while at < bytes.len() {
            let len = u32::from_le_bytes(take(&mut at, 4)?.try_into().expect("4 bytes")) as usize;
            if *r.get_or_insert(len) != len {
                return Err(Error::Corrupt("ragged ground truth".into()));
            }
            let mut row_ids = Vec::with_capacity(len);
            let mut row_d = Vec::with_capacity(len);
            for _ in 0..len {
                row_ids.push(u32::from_le_bytes(
                    take(&mut at, 4)?.try_into().expect("4 bytes"),
                ));
                row_d.push(f64::from_le_bytes(
                    take(&mut at, 8)?.try_into().expect("8 bytes"),
                ));
            }
            ids.push(row_ids);
            dists.push(row_d);
        }
        Ok(Self {
            r: r.unwrap_or(0),
            ids,
            dists,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(Error::at_path(path))?;
        self.write(io::BufWriter::new(file))
            .map_err(Error::at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(Error::at_path(path))?)
    }
}

/// Exhaustive top-`r` search for every query.
pub fn brute_force_nn(data: &VectorSet, queries: &VectorSet, r: usize) -> Result<GroundTruth> {
    if data.is_empty() {
        return Err(Error::Empty("database"));
    }
    if r == 0 || r > data.len() {
        return Err(Error::invalid(format!("r={r} outside [1, {}]", data.len())));
    }
    if !queries.is_empty() {
        check_dim(data.dim(), queries.dim())?;
    }
    let rows: Vec<(Vec<u32>, Vec<f64>)> = queries
        .as_slice()
        .par_chunks(queries.dim().max(1))
        .map(|q| {
            let mut all: Vec<(f64, u32)> = data
                .rows()
                .enumerate()
                .map(|(i, x)| (squared_l2(q, x), i as u32))
                .collect();
            let order = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if r < all.len() {
                all.select_nth_unstable_by(r - 1, order);
                all.truncate(r);
            }
            all.sort_unstable_by(order);
            all.into_iter().map(|(d, i)| (i, d)).unzip()
        })
        .collect();
    let (ids, dists) = rows.into_iter().unzip();
    Ok(GroundTruth { r, ids, dists })
}

/// Distribution of per-query scan counts in fixed-width buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanHistogram {
    pub width: usize,
    /// Bucket index (`scanned / width`) to number of queries.
    pub buckets: BTreeMap<usize, usize>,
}

impl ScanHistogram {
    pub const CSV_HEADER: &'static str = "bucket_lo,bucket_hi,count";

    /// Default width `N / (10 k)`, at least 1.
    pub fn default_width(n: usize, k: usize) -> usize {
        (n / (10 * k.max(1))).max(1)
    }

    pub fn from_scans(scans: &[usize], width: usize) -> Self {
        let width = width.max(1);
        let mut buckets = BTreeMap::new();
        for &s in scans {
            *buckets.entry(s / width).or_insert(0) += 1;
        }
        Self { width, buckets }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for (&b, &count) in &self.buckets {
            writeln!(out, "{},{},{count}", b * self.width, (b + 1) * self.width)?;
        }
        out.flush()
    }
}

/// Quality and cost of one index configuration over a query set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub ma: usize,
    pub gamma: f64,
    pub variance: f64,
    /// Fraction of the database whose distances were computed, over all queries.
    pub selectivity: f64,
    /// Fraction of queries whose true nearest neighbor sits in a probed cell.
    pub recall_at_1: f64,
    /// Mean fraction of the true top-`R` (`R = min(truth.r, r_results)`)
    /// present in the returned hits.
    pub recall_at_r: f64,
    pub scanned: Vec<usize>,
    pub scan_mean: f64,
    /// Sample variance (n - 1 denominator) of the scan counts.
    pub scan_variance: f64,
    pub histogram: ScanHistogram,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "k,ma,iters,alpha,gamma,variance,selectivity,recall_at_1";

    pub fn csv_row(&self, iters: usize, alpha: f64) -> String {
        format!(
            "{},{},{iters},{alpha},{},{},{},{}",
            self.k, self.ma, self.gamma, self.variance, self.selectivity, self.recall_at_1
        )
    }

    /// Coefficient of variation of the scan counts.
    pub fn scan_cv(&self) -> f64 {
        self.scan_variance.sqrt() / self.scan_mean
    }
}

pub(crate) fn mean_and_sample_variance(xs: &[usize]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

pub fn evaluate(
    index: &InvertedFile,
    queries: &VectorSet,
    params: &SearchParams,
    truth: &GroundTruth,
) -> Result<EvalReport> {
    evaluate_with_width(index, queries, params, truth, None)
}

/// [`evaluate`] with an explicit histogram bucket width.
pub fn evaluate_with_width(
    index: &InvertedFile,
    queries: &VectorSet,
    params: &SearchParams,
    truth: &GroundTruth,
    bucket_width: Option<usize>,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if truth.len() != queries.len() || truth.r == 0 {
        return Err(Error::invalid(format!(
            "ground truth covers {} queries, query set has {}",
            truth.len(),
            queries.len()
        )));
    }
    let results = index.search_batch(queries, params)?;
    let recall_depth = truth.r.min(params.r_results);
    let mut found_nn = 0usize;
    let mut recall_r_sum = 0f64;
    let scanned: Vec<usize> = results.iter().map(|r| r.scanned).collect();
    for (q, res) in results.iter().enumerate() {
        let nn = truth.nearest(q);
        if (nn as usize) >= index.len() {
            return Err(Error::invalid(format!(
                "ground-truth id {nn} outside the indexed set"
            )));
        }
        if res.probed_cells.contains(&index.cell_of(nn)) {
            found_nn += 1;
        }
        let expected = &truth.ids[q][..recall_depth];
        let got = res
            .hits
            .iter()
            .take(recall_depth)
            .filter(|h| expected.contains(&h.id))
            .count();
        recall_r_sum += got as f64 / recall_depth as f64;
    }
    let nq = queries.len() as f64;
    let sizes = index.list_sizes();
    let (scan_mean, scan_variance) = mean_and_sample_variance(&scanned);
    let width =
        bucket_width.unwrap_or_else(|| ScanHistogram::default_width(index.len(), index.k()));
    Ok(EvalReport {
        k: index.k(),
        ma: params.ma,
        gamma: imbalance_factor(&sizes)?,
        variance: list_variance(&sizes)?,
        selectivity: scanned.iter().sum::<usize>() as f64 / (index.len() as f64 * nq),
        recall_at_1: found_nn as f64 / nq,
        recall_at_r: recall_r_sum / nq,
        histogram: ScanHistogram::from_scans(&scanned, width),
        scanned,
        scan_mean,
        scan_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::balancer::Codebook;
    use crate::kmeans::Centroids;

    #[test]
    fn gamma_examples() {
        assert_eq!(imbalance_factor(&[250, 250, 250, 250]).unwrap(), 1.0);
        assert_eq!(imbalance_factor(&[4, 0, 0, 0]).unwrap(), 4.0);
        assert_eq!(imbalance_factor(&[3, 1]).unwrap(), 1.25);
        assert!(imbalance_factor(&[0, 0]).is_err());
        assert!(imbalance_factor(&[]).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(list_variance(&[7, 7, 7]).unwrap(), 0.0);
        assert_eq!(list_variance(&[3, 1]).unwrap(), 1.0);
        assert_eq!(list_variance(&[4, 0]).unwrap(), 4.0);
        assert!(list_variance(&[0]).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let data = VectorSet::new(1, vec![0.0, 5.0, 9.0]).unwrap();
        let q = VectorSet::new(1, vec![6.0, 9.0]).unwrap();
        let gt = brute_force_nn(&data, &q, 2).unwrap();
        assert_eq!(gt.ids[0], vec![1, 2]);
        assert_eq!(gt.dists[0], vec![1.0, 9.0]);
        assert_eq!(gt.ids[1], vec![2, 1]);
        assert_eq!(gt.dists[1][0], 0.0);
        let full = brute_force_nn(&data, &q, 3).unwrap();
        let mut perm = full.ids[0].clone();
        perm.sort_unstable();
        assert_eq!(perm, vec![0, 1, 2]);
        assert!(brute_force_nn(&data, &q, 4).is_err());
        assert!(brute_force_nn(&data, &q, 0).is_err());
        let bad = VectorSet::new(2, vec![0.0, 0.0]).unwrap();
        assert!(brute_force_nn(&data, &bad, 1).is_err());
    }

    #[test]
    fn brute_force_ties_by_id() {
        let data = VectorSet::new(1, vec![2.0, -2.0, 2.0]).unwrap();
        let q = VectorSet::new(1, vec![0.0]).unwrap();
        assert_eq!(brute_force_nn(&data, &q, 3).unwrap().ids[0], vec![0, 1, 2]);
    }

    #[test]
    fn ground_truth_roundtrip() {
        let gt = GroundTruth {
            r: 2,
            ids: vec![vec![1, 2], vec![0, 2]],
            dists: vec![vec![0.5, 1.0 / 3.0], vec![0.0, 9.0]],
        };
        let mut buf = Vec::new();
        gt.write(&mut buf).unwrap();
        assert_eq!(GroundTruth::decode(&buf).unwrap(), gt);
        assert!(GroundTruth::decode(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn histogram_buckets() {
        let h = ScanHistogram::from_scans(&[0, 9, 10, 25, 25], 10);
        assert_eq!(
            h.buckets.into_iter().collect::<Vec<_>>(),
            vec![(0, 2), (1, 1), (2, 2)]
        );
        assert_eq!(ScanHistogram::default_width(1000, 4), 25);
        assert_eq!(ScanHistogram::default_width(5, 4), 1);
        let mut buf = Vec::new();
        ScanHistogram::from_scans(&[12], 10)
            .write_csv(&mut buf)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "bucket_lo,bucket_hi,count\n10,20,1\n"
        );
    }

    #[test]
    fn sample_variance() {
        assert_eq!(mean_and_sample_variance(&[2, 4, 6]), (4.0, 4.0));
        assert_eq!(mean_and_sample_variance(&[5]), (5.0, 0.0));
    }

    fn small_index() -> (InvertedFile, VectorSet) {
        let data = Arc::new(VectorSet::new(1, vec![0.0, 1.0, 2.0, 10.0, 11.0, 20.0]).unwrap());
        let cb = Codebook::new(Centroids::new(1, vec![1.0, 10.5, 20.0]).unwrap());
        let idx = InvertedFile::build(data, cb).unwrap();
        let queries = VectorSet::new(1, vec![0.2, 9.0, 14.0, 17.0]).unwrap();
        (idx, queries)
    }

    #[test]
    fn exhaustive_probe_is_perfect() {
        let (idx, queries) = small_index();
        let truth = brute_force_nn(idx.data(), &queries, 2).unwrap();
        let rep = evaluate(&idx, &queries, &SearchParams::new(3), &truth).unwrap();
        assert_eq!(rep.selectivity, 1.0);
        assert_eq!(rep.recall_at_1, 1.0);
        assert_eq!(rep.recall_at_r, 1.0);
        assert_eq!(rep.scanned, vec![6; 4]);
    }

    #[test]
    fn single_probe_by_hand() {
        let (idx, queries) = small_index();
        assert_eq!(idx.list_sizes(), vec![3, 2, 1]);
        let truth = brute_force_nn(idx.data(), &queries, 1).unwrap();
        let rep = evaluate(&idx, &queries, &SearchParams::new(1), &truth).unwrap();
        // Queries route to cells 0, 1, 1, 2: 3 + 2 + 2 + 1 scanned of 24.
        assert_eq!(rep.scanned, vec![3, 2, 2, 1]);
        assert_eq!(rep.selectivity, 8.0 / 24.0);
        // Query 17 is nearest to 20 (cell 2, probed); 14 is nearest to 11 (cell 1, probed).
        assert_eq!(rep.recall_at_1, 1.0);
        assert_eq!(rep.gamma, imbalance_factor(&[3, 2, 1]).unwrap());
        assert_eq!(rep.k, 3);
        assert!(rep.csv_row(0, 0.01).starts_with("3,1,0,0.01,"));
    }

    #[test]
    fn mismatched_truth_rejected() {
        let (idx, queries) = small_index();
        let truth = brute_force_nn(idx.data(), &queries.subset(&[0]).unwrap(), 1).unwrap();
        assert!(evaluate(&idx, &queries, &SearchParams::new(1), &truth).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(512))]

            #[test]
            fn gamma_bounds(counts in prop::collection::vec(0usize..1000, 1..40)) {
                prop_assume!(counts.iter().any(|&n| n > 0));
                let k = counts.len() as f64;
                let g = imbalance_factor(&counts).unwrap();
                let v = list_variance(&counts).unwrap();
                prop_assert!(g >= 1.0 - 1e-12 && g <= k + 1e-12);
                let equal = counts.iter().all(|&n| n == counts[0]);
                prop_assert_eq!(equal, (g - 1.0).abs() <= 1e-12);
                prop_assert_eq!(equal, v.abs() <= 1e-12);
            }
        }
    }
}

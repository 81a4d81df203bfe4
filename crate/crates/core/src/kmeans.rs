//! Lloyd's k-means: initialization, nearest-centroid assignment and the
//! iteration loop that produces the codebook balancing starts from.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{self, VectorSet};
use crate::distance::squared_l2_mixed;
use crate::error::{check_dim, Error, Result};
use crate::textmeta::Meta;

/// `k` centroids of dimension `dim`, row-major in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    data: Vec<f64>,
}

impl Centroids {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("centroid dimension must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} centroid values do not form k >= 1 rows of dimension {dim}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dim, data })
    }

    pub fn from_vector_set(set: &VectorSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Empty("centroid set"));
        }
        Self::new(
            set.dim(),
            set.as_slice().iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Narrows to `f32`. Exact for centroids produced by [`lloyd`] and
    /// [`init_centroids`], which keep every coordinate `f32`-representable.
    pub fn to_vector_set(&self) -> Result<VectorSet> {
        VectorSet::new(self.dim, self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn k(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Fails rather than silently rounding coordinates that `f32` cannot hold.
    pub fn save_fvecs(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| f64::from(v as f32) != v) {
            return Err(Error::invalid(format!(
                "centroid value {} at element {i} is not representable as f32",
                self.data[i]
            )));
        }
        dataset::save_fvecs(&self.to_vector_set()?, path)
    }

    pub fn load_fvecs(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_vector_set(&dataset::load_fvecs(path)?)
    }
}

/// Cell id per point plus the population of every cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    cell_of: Vec<u32>,
    counts: Vec<usize>,
}

impl Assignment {
    pub fn from_cells(cell_of: Vec<u32>, k: usize) -> Result<Self> {
        let mut counts = vec![0usize; k];
        for &c in &cell_of {
            *counts
                .get_mut(c as usize)
                .ok_or_else(|| Error::invalid(format!("cell {c} out of range for k={k}")))? += 1;
        }
        Ok(Self { cell_of, counts })
    }

    pub fn cell_of(&self) -> &[u32] {
        &self.cell_of
    }

    /// Cell populations, the `n_i`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.cell_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_of.is_empty()
    }
}

/// Nearest centroid under `d(x, c_i)^2 + offsets[i]`; strict `<` keeps the
/// lowest index on ties. Rows are scored in parallel; the result does not
/// depend on scheduling.
pub(crate) fn assign_with_offsets(
    data: &VectorSet,
    centroids: &Centroids,
    offsets: Option<&[f64]>,
) -> Result<Assignment> {
    if !data.is_empty() {
        check_dim(centroids.dim(), data.dim())?;
    }
    if let Some(o) = offsets {
        if o.len() != centroids.k() {
            return Err(Error::invalid(format!(
                "{} penalties for {} centroids",
                o.len(),
                centroids.k()
            )));
        }
    }
    let cell_of: Vec<u32> = data
        .as_slice()
        .par_chunks(data.dim().max(1))
        .map(|x| nearest(x, centroids, offsets).0 as u32)
        .collect();
    Assignment::from_cells(cell_of, centroids.k())
}

#[inline]
pub(crate) fn nearest(x: &[f32], centroids: &Centroids, offsets: Option<&[f64]>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.rows().enumerate() {
        let mut d = squared_l2_mixed(x, c);
        if let Some(o) = offsets {
            d += o[i];
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Assigns every point to its nearest centroid (lowest index on ties).
pub fn assign_plain(data: &VectorSet, centroids: &Centroids) -> Result<Assignment> {
    assign_with_offsets(data, centroids, None)
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn distortion(data: &VectorSet, centroids: &Centroids, assignment: &Assignment) -> f64 {
    data.rows()
        .zip(assignment.cell_of())
        .map(|(x, &c)| squared_l2_mixed(x, centroids.row(c as usize)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMethod {
    /// `k` distinct rows chosen uniformly.
    RandomPoints,
    /// D² sampling.
    #[default]
    KMeansPlusPlus,
}

fn check_k(data: &VectorSet, k: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if k == 0 || k > data.len() {
        return Err(Error::invalid(format!(
            "k={k} outside [1, {}] for this training set",
            data.len()
        )));
    }
    Ok(())
}

/// Row ids selected as initial centroids. Deterministic per seed.
pub fn init_centroid_ids(
    data: &VectorSet,
    k: usize,
    seed: u64,
    method: InitMethod,
) -> Result<Vec<usize>> {
    check_k(data, k)?;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        InitMethod::RandomPoints => Ok(sample(&mut rng, n, k).into_vec()),
        InitMethod::KMeansPlusPlus => {
            let mut chosen = Vec::with_capacity(k);
            let mut taken = vec![false; n];
            let first = rng.random_range(0..n);
            chosen.push(first);
            taken[first] = true;
            let mut nearest_sq: Vec<f64> = data
                .rows()
                .map(|x| crate::distance::squared_l2(x, data.row(first)))
                .collect();
            while chosen.len() < k {
                let total: f64 = nearest_sq
                    .iter()
                    .zip(&taken)
                    .filter(|(_, &t)| !t)
                    .map(|(d, _)| d)
                    .sum();
                let next = if total > 0.0 {
                    let mut target = rng.random::<f64>() * total;
                    let mut pick = None;
                    for (i, (&d, &t)) in nearest_sq.iter().zip(&taken).enumerate() {
                        if t || d == 0.0 {
                            continue;
                        }
                        pick = Some(i);
                        if target < d {
                            break;
                        }
                        target -= d;
                    }
                    pick.expect("positive total implies a candidate")
                } else {
                    // Every remaining point duplicates a chosen one.
                    let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                    free[rng.random_range(0..free.len())]
                };
                chosen.push(next);
                taken[next] = true;
                let c = data.row(next);
                nearest_sq
                    .par_iter_mut()
                    .zip(data.as_slice().par_chunks(data.dim()))
                    .for_each(|(best, x)| {
                        let d = crate::distance::squared_l2(x, c);
                        if d < *best {
                            *best = d;
                        }
                    });
            }
            Ok(chosen)
        }
    }
}

pub fn init_centroids(
    data: &VectorSet,
    k: usize,
    seed: u64,
    method: InitMethod,
) -> Result<Centroids> {
    let ids = init_centroid_ids(data, k, seed, method)?;
    let rows: Vec<f64> = ids
        .iter()
        .flat_map(|&i| data.row(i).iter().map(|&v| f64::from(v)))
        .collect();
    Centroids::new(data.dim(), rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative decrease in distortion falls below this.
    pub rel_tol: f64,
    pub init: InitMethod,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            rel_tol: 1e-4,
            init: InitMethod::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOutput {
    pub centroids: Centroids,
    pub assignment: Assignment,
    pub seed: u64,
    /// Completed update passes.
    pub iterations: usize,
    /// Distortion of the initial centroids, then after every update pass.
    pub distortion_history: Vec<f64>,
}

impl KMeansOutput {
    pub fn distortion(&self) -> f64 {
        *self
            .distortion_history
            .last()
            .expect("history is never empty")
    }

    /// Writes `centroids.fvecs` and `kmeans.meta` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        self.centroids.save_fvecs(dir.join("centroids.fvecs"))?;
        let mut meta = Meta::new();
        meta.set("k", self.centroids.k())
            .set("dim", self.centroids.dim())
            .set("seed", self.seed)
            .set("iterations", self.iterations)
            .set("distortion", self.distortion());
        meta.write(&dir.join("kmeans.meta"))
    }
}

/// Moves every centroid to the mean of its cell, rounded to `f32` precision.
/// A cell left empty is reseeded with the point farthest from its own
/// updated centroid, taking points in descending distance (lowest id first
/// on ties) so that several empty cells get distinct seeds.
fn update_centroids(data: &VectorSet, assignment: &Assignment, previous: &Centroids) -> Centroids {
    let (k, dim) = (previous.k(), previous.dim());
    let mut sums = vec![0f64; k * dim];
    for (x, &c) in data.rows().zip(assignment.cell_of()) {
        let acc = &mut sums[c as usize * dim..(c as usize + 1) * dim];
        for (a, &v) in acc.iter_mut().zip(x) {
            *a += f64::from(v);
        }
    }
    let mut empty = Vec::new();
    for (i, &n) in assignment.counts().iter().enumerate() {
        let row = &mut sums[i * dim..(i + 1) * dim];
        if n == 0 {
            row.copy_from_slice(previous.row(i));
            empty.push(i);
        } else {
            for v in row.iter_mut() {
                *v = f64::from((*v / n as f64) as f32);
            }
        }
    }
    let mut centroids = Centroids { dim, data: sums };
    if !empty.is_empty() {
        let mut far: Vec<(f64, usize)> = data
            .rows()
            .zip(assignment.cell_of())
            .enumerate()
            .map(|(p, (x, &c))| (squared_l2_mixed(x, centroids.row(c as usize)), p))
            .collect();
        far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (&cell, &(_, p)) in empty.iter().zip(&far) {
            let dst = &mut centroids.data[cell * dim..(cell + 1) * dim];
            for (d, &v) in dst.iter_mut().zip(data.row(p)) {
                *d = f64::from(v);
            }
        }
    }
    centroids
}

/// Lloyd's algorithm. Each iteration moves centroids to their cell means and
/// reassigns; the loop stops after `max_iters` iterations or once distortion
/// drops by less than `rel_tol` relative to the previous iteration. The
/// returned assignment is always consistent with the returned centroids.
pub fn lloyd(data: &VectorSet, config: &KMeansConfig) -> Result<KMeansOutput> {
    check_k(data, config.k)?;
    if config.max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if !(config.rel_tol >= 0.0 && config.rel_tol.is_finite()) {
        return Err(Error::invalid("rel_tol must be finite and non-negative"));
    }
    let mut centroids = init_centroids(data, config.k, config.seed, config.init)?;
    let mut assignment = assign_plain(data, &centroids)?;
    let mut history = vec![distortion(data, &centroids, &assignment)];
    let mut iterations = 0;
    while iterations < config.max_iters {
        centroids = update_centroids(data, &assignment, &centroids);
        assignment = assign_plain(data, &centroids)?;
        iterations += 1;
        let current = distortion(data, &centroids, &assignment);
        let previous = *history.last().expect("seeded above");
        history.push(current);
        log::debug!("k-means iteration {iterations}: distortion {current}");
        if previous <= 0.0 || previous - current <= config.rel_tol * previous {
            break;
        }
    }
    Ok(KMeansOutput {
        centroids,
        assignment,
        seed: config.seed,
        iterations,
        distortion_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GaussianMixture;

    fn line(points: &[f32]) -> VectorSet {
        VectorSet::new(1, points.to_vec()).unwrap()
    }

    fn cents(dim: usize, v: &[f64]) -> Centroids {
        Centroids::new(dim, v.to_vec()).unwrap()
    }

    #[test]
    fn point_on_centroid() {
        let c = cents(2, &[0.0, 0.0, 5.0, 5.0, -3.0, 1.0, 7.5, -2.0]);
        let data = VectorSet::new(2, vec![7.5, -2.0]).unwrap();
        assert_eq!(assign_plain(&data, &c).unwrap().cell_of(), &[3]);
    }

    #[test]
    fn one_dimensional_nearest() {
        let a = assign_plain(&line(&[4.0]), &cents(1, &[0.0, 10.0])).unwrap();
        assert_eq!(a.cell_of(), &[0]);
        assert_eq!(a.counts(), &[1, 0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let a = assign_plain(&line(&[5.0]), &cents(1, &[-4.0, 0.0, 10.0])).unwrap();
        assert_eq!(a.cell_of(), &[1]);
    }

    #[test]
    fn dimension_mismatch() {
        let err = assign_plain(&line(&[1.0]), &cents(2, &[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn init_all_points() {
        let data = line(&[3.0, 1.0, 4.0, 1.5, 9.0]);
        for method in [InitMethod::RandomPoints, InitMethod::KMeansPlusPlus] {
            let mut ids = init_centroid_ids(&data, 5, 1, method).unwrap();
            ids.sort_unstable();
            assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        }
        let one = init_centroids(&data, 1, 9, InitMethod::KMeansPlusPlus).unwrap();
        assert!(data.as_slice().contains(&(one.row(0)[0] as f32)));
    }

    #[test]
    fn init_with_duplicates_stays_distinct() {
        let data = line(&[1.0, 1.0, 1.0, 2.0]);
        let mut ids = init_centroid_ids(&data, 4, 3, InitMethod::KMeansPlusPlus).unwrap();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn init_deterministic() {
        let data = GaussianMixture::new(1, 2, &[1.0], 1.0)
            .unwrap()
            .sample(100, 0)
            .unwrap();
        let a = init_centroid_ids(&data, 10, 42, InitMethod::KMeansPlusPlus).unwrap();
        let b = init_centroid_ids(&data, 10, 42, InitMethod::KMeansPlusPlus).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_k() {
        let data = line(&[1.0, 2.0]);
        assert!(init_centroids(&data, 0, 1, InitMethod::RandomPoints).is_err());
        assert!(init_centroids(&data, 3, 1, InitMethod::RandomPoints).is_err());
        assert!(matches!(
            lloyd(&VectorSet::empty(), &KMeansConfig::new(1, 0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn distinct_points_converge_immediately() {
        let data = line(&[0.0, 3.0, 7.0, 20.0]);
        let out = lloyd(&data, &KMeansConfig::new(4, 5)).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.distortion(), 0.0);
        assert_eq!(out.assignment.counts(), &[1, 1, 1, 1]);
    }

    #[test]
    fn single_iteration_budget() {
        let data = GaussianMixture::new(2, 3, &[1.0, 1.0], 1.0)
            .unwrap()
            .sample(300, 0)
            .unwrap();
        let config = KMeansConfig {
            max_iters: 1,
            rel_tol: 0.0,
            ..KMeansConfig::new(5, 1)
        };
        let out = lloyd(&data, &config).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.distortion_history.len(), 2);
    }

    #[test]
    fn recovers_two_blobs() {
        let mix = GaussianMixture::new(17, 2, &[1.0, 1.0], 0.05).unwrap();
        let data = mix.sample(2000, 0).unwrap();
        let out = lloyd(&data, &KMeansConfig::new(2, 3)).unwrap();
        for (mode, center) in mix.centers().iter().enumerate() {
            let size = data.rows().filter(|x| mix.nearest_mode(x) == mode).count();
            let tol = 3.0 * mix.axis_sigma(mode) / (size as f64).sqrt();
            let hit = out
                .centroids
                .rows()
                .any(|c| c.iter().zip(center).all(|(a, b)| (a - b).abs() <= tol));
            assert!(hit, "no centroid within {tol} of mode {mode}");
        }
    }

    #[test]
    fn empty_cell_reseeded_with_farthest_point() {
        // Centroid 2 captures nothing in either assignment.
        let data = line(&[0.0, 1.0, 2.0, 100.0]);
        let assignment = Assignment::from_cells(vec![0, 0, 0, 1], 3).unwrap();
        let previous = cents(1, &[0.0, 1.0, -50.0]);
        let assignment2 = Assignment::from_cells(vec![0, 0, 1, 0], 3).unwrap();
        // Points 0 and 2 tie at distance 1 from mean 1.0; point 0 wins.
        let c = update_centroids(&data, &assignment, &previous);
        assert_eq!(c.as_slice(), &[1.0, 100.0, 0.0]);
        // The outlier sits farthest from its cell mean.
        let c = update_centroids(&data, &assignment2, &previous);
        let mean = f64::from((101.0f64 / 3.0) as f32);
        assert_eq!(c.as_slice(), &[mean, 2.0, 100.0]);
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let data = line(&[0.0, 1.0, 10.0, 11.0]);
        let out = lloyd(&data, &KMeansConfig::new(2, 1)).unwrap();
        out.save(dir.path()).unwrap();
        let meta = Meta::read(&dir.path().join("kmeans.meta")).unwrap();
        assert_eq!(meta.require::<usize>("k").unwrap(), 2);
        assert_eq!(meta.require::<u64>("seed").unwrap(), 1);
        let back = Centroids::load_fvecs(dir.path().join("centroids.fvecs")).unwrap();
        assert_eq!(back, out.centroids);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dataset() -> impl Strategy<Value = (VectorSet, usize, u64)> {
            (1usize..5, 5usize..80, any::<u64>()).prop_flat_map(|(dim, n, seed)| {
                (
                    prop::collection::vec(-50.0f32..50.0, n * dim),
                    1usize..=n.min(8),
                )
                    .prop_map(move |(v, k)| (VectorSet::new(dim, v).unwrap(), k, seed))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn distortion_never_increases((data, k, seed) in dataset()) {
                let config = KMeansConfig { rel_tol: 0.0, max_iters: 30, ..KMeansConfig::new(k, seed) };
                let out = lloyd(&data, &config).unwrap();
                for w in out.distortion_history.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", out.distortion_history);
                }
                prop_assert_eq!(out.assignment.counts().iter().sum::<usize>(), data.len());
            }

            #[test]
            fn reassignment_is_idempotent((data, k, seed) in dataset()) {
                let c = init_centroids(&data, k, seed, InitMethod::RandomPoints).unwrap();
                let a = assign_plain(&data, &c).unwrap();
                let b = assign_plain(&data, &c).unwrap();
                prop_assert_eq!(&a, &b);
                for (i, &n) in a.counts().iter().enumerate() {
                    prop_assert_eq!(n, a.cell_of().iter().filter(|&&c| c as usize == i).count());
                }
            }
        }
    }
}

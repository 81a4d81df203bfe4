//! Vector collections, `fvecs`/`bvecs` I/O and synthetic data.
//!
//! Both file formats frame every record as a little-endian `i32` dimension
//! followed by that many components, with no header or footer. `fvecs`
//! components are little-endian IEEE-754 `f32`; `bvecs` components are
//! single unsigned bytes, widened to `f32` on load.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An immutable, dense, row-major collection of `len()` vectors of `dim()`
/// finite `f32` components.
///
/// The empty set has `dim() == 0`; a set with a known dimension but no rows
/// is also representable.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    /// Builds a set from a flat row-major buffer.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(Error::invalid("dimension 0 with non-empty data"));
            }
            return Ok(Self::empty());
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "buffer of {} values is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dim, data })
    }

    pub fn empty() -> Self {
        Self {
            dim: 0,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Ok(Self::empty());
        };
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i`. Panics when out of bounds.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics, so the empty set yields an empty iterator.
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// A new set holding the given rows in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= n {
                return Err(Error::invalid(format!("row {id} out of range (len {n})")));
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Self {
            dim: self.dim,
            data,
        })
    }

    /// Hex SHA-256 of the set's `fvecs` encoding.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let dim = self.dim as i32;
        for row in self.rows() {
            hasher.update(dim.to_le_bytes());
            for v in row {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn decode_records<const WIDTH: usize>(
    bytes: &[u8],
    decode: impl Fn([u8; WIDTH]) -> f32,
) -> Result<VectorSet> {
    let mut dim = 0usize;
    let mut data = Vec::new();
    let mut offset = 0usize;
    let mut record = 0usize;
    while offset < bytes.len() {
        let header: [u8; 4] = bytes
            .get(offset..offset + 4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format {
                record,
                reason: "truncated dimension header".into(),
            })?;
        let declared = i32::from_le_bytes(header);
        if declared <= 0 {
            return Err(Error::Format {
                record,
                reason: format!("non-positive dimension {declared}"),
            });
        }
        let d = declared as usize;
        if record == 0 {
            dim = d;
            data.reserve(bytes.len() / (4 + d * WIDTH) * d);
        } else if d != dim {
            return Err(Error::Format {
                record,
                reason: format!("dimension mismatch: expected {dim}, found {d}"),
            });
        }
        offset += 4;
        let body = bytes
            .get(offset..offset + d * WIDTH)
            .ok_or_else(|| Error::Format {
                record,
                reason: format!(
                    "truncated record: need {} bytes, {} remain",
                    d * WIDTH,
                    bytes.len() - offset
                ),
            })?;
        for (j, chunk) in body.chunks_exact(WIDTH).enumerate() {
            let v = decode(chunk.try_into().expect("chunk width"));
            if !v.is_finite() {
                return Err(Error::Format {
                    record,
                    reason: format!("non-finite component {j}"),
                });
            }
            data.push(v);
        }
        offset += d * WIDTH;
        record += 1;
    }
    VectorSet::new(dim, data)
}

/// Decodes an `fvecs` stream.
pub fn read_fvecs<R: Read>(mut reader: R) -> Result<VectorSet> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_records::<4>(&bytes, f32::from_le_bytes)
}

/// Decodes a `bvecs` stream, widening bytes to `f32`.
pub fn read_bvecs<R: Read>(mut reader: R) -> Result<VectorSet> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_records::<1>(&bytes, |[b]| f32::from(b))
}

pub fn write_fvecs<W: Write>(set: &VectorSet, mut writer: W) -> io::Result<()> {
    let mut buf = Vec::with_capacity(set.len() * (4 + 4 * set.dim()));
    let dim = set.dim() as i32;
    for row in set.rows() {
        buf.extend_from_slice(&dim.to_le_bytes());
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    writer.write_all(&buf)?;
    writer.flush()
}

pub fn load_fvecs(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    decode_records::<4>(&bytes, f32::from_le_bytes)
}

pub fn load_bvecs(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    decode_records::<1>(&bytes, |[b]| f32::from(b))
}

/// Loads `bvecs` when the extension says so, `fvecs` otherwise.
pub fn load_vectors(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("bvecs") => load_bvecs(path),
        _ => load_fvecs(path),
    }
}

pub fn save_fvecs(set: &VectorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(Error::at_path(path))?;
    write_fvecs(set, io::BufWriter::new(file)).map_err(Error::at_path(path))
}

/// A mixture of isotropic Gaussians with seeded, reproducible sampling.
///
/// The geometry is normalized by dimension so that squared distances are of
/// order one whatever `dim` is, as for L2-normalized descriptors:
///
/// * mode centers are uniform in the cube `[-1, 1]^dim` scaled by `1/sqrt(dim)`;
/// * mode `j` has a width factor `w_j`, uniform in `[0.5, 1.5]`;
/// * a sample from mode `j` is its center plus `spread * w_j / sqrt(dim)`
///   times a standard normal draw per axis, so `spread * w_j` is the RMS
///   distance of the mode's samples from its center.
///
/// Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
/// `seed` via `seed_from_u64`. Stream 0 draws the centers, then the width
/// factors; [`GaussianMixture::sample`] with stream `s` reads stream `s + 1`,
/// picking each sample's mode with `WeightedIndex` before its normal draws
/// (`rand_distr::StandardNormal`).
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    seed: u64,
    dim: usize,
    centers: Vec<Vec<f64>>,
    widths: Vec<f64>,
    weights: Vec<f64>,
    spread: f64,
}

impl GaussianMixture {
    pub fn new(seed: u64, dim: usize, weights: &[f64], spread: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if weights.is_empty() {
            return Err(Error::invalid("mixture needs at least one mode"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid(
                "mixture weights must be positive and finite",
            ));
        }
        if !(spread.is_finite() && spread > 0.0) {
            return Err(Error::invalid("mixture spread must be positive and finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = (dim as f64).sqrt().recip();
        let centers = (0..weights.len())
            .map(|_| {
                (0..dim)
                    .map(|_| rng.random_range(-1.0..=1.0) * norm)
                    .collect()
            })
            .collect();
        let widths = (0..weights.len())
            .map(|_| rng.random_range(0.5..=1.5))
            .collect();
        Ok(Self {
            seed,
            dim,
            centers,
            widths,
            weights: weights.to_vec(),
            spread,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Per-mode width factors.
    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Per-axis standard deviation of mode `j`.
    pub fn axis_sigma(&self, j: usize) -> f64 {
        self.spread * self.widths[j] / (self.dim as f64).sqrt()
    }

    /// Index of the mode center closest to `x`, lowest index on ties.
    pub fn nearest_mode(&self, x: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centers.iter().enumerate() {
            let d = crate::distance::squared_l2_mixed(x, c);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Draws `n` points from sampling stream `stream`.
    pub fn sample(&self, n: usize, stream: u64) -> Result<VectorSet> {
        if n == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        let modes = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::invalid(format!("mixture weights: {e}")))?;
        let sigmas: Vec<f64> = (0..self.centers.len())
            .map(|j| self.axis_sigma(j))
            .collect();
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let mode = modes.sample(&mut rng);
            for &c in &self.centers[mode] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((c + sigmas[mode] * z) as f32);
            }
        }
        VectorSet::new(self.dim, data)
    }
}

/// Samples `n` points from a freshly seeded mixture (sampling stream 0).
pub fn gen_gaussian_mixture(
    seed: u64,
    n: usize,
    dim: usize,
    modes: usize,
    mode_weights: &[f64],
    spread: f64,
) -> Result<VectorSet> {
    if modes == 0 {
        return Err(Error::invalid("mode count must be positive"));
    }
    if mode_weights.len() != modes {
        return Err(Error::invalid(format!(
            "{} weights given for {modes} modes",
            mode_weights.len()
        )));
    }
    GaussianMixture::new(seed, dim, mode_weights, spread)?.sample(n, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(records: &[&[f32]]) -> Vec<u8> {
        let mut out = Vec::new();
        for r in records {
            out.extend_from_slice(&(r.len() as i32).to_le_bytes());
            for v in *r {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn decodes_two_records() {
        let bytes = encode(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let set = read_fvecs(&bytes[..]).unwrap();
        assert_eq!(set.dim(), 2);
        assert_eq!(set.len(), 2);
        assert_eq!(set.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn empty_stream_is_empty_set() {
        let set = read_fvecs(&[][..]).unwrap();
        assert_eq!(set, VectorSet::empty());
        assert_eq!((set.dim(), set.len()), (0, 0));
    }

    #[test]
    fn dimension_change_reports_record() {
        let bytes = encode(&[&[1.0, 2.0], &[3.0, 4.0, 5.0]]);
        match read_fvecs(&bytes[..]) {
            Err(Error::Format { record, reason }) => {
                assert_eq!(record, 1);
                assert!(reason.contains("dimension mismatch"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_bad_headers() {
        let mut bytes = encode(&[&[1.0, 2.0], &[3.0, 4.0]]);
        bytes.pop();
        assert!(matches!(
            read_fvecs(&bytes[..]),
            Err(Error::Format { record: 1, .. })
        ));
        assert!(matches!(
            read_fvecs(&[2u8, 0][..]),
            Err(Error::Format { record: 0, .. })
        ));
        let zero = 0i32.to_le_bytes();
        assert!(matches!(
            read_fvecs(&zero[..]),
            Err(Error::Format { record: 0, .. })
        ));
        let neg = (-3i32).to_le_bytes();
        assert!(read_fvecs(&neg[..]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let bytes = encode(&[&[1.0, 2.0], &[f32::NAN, 4.0]]);
        assert!(matches!(
            read_fvecs(&bytes[..]),
            Err(Error::Format { record: 1, .. })
        ));
        assert!(matches!(
            VectorSet::new(1, vec![f32::INFINITY]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn record_size_arithmetic() {
        let set = VectorSet::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_fvecs(&set, &mut buf).unwrap();
        assert_eq!(buf.len(), 2 * (4 + 2 * 4));
        let mut empty = Vec::new();
        write_fvecs(&VectorSet::empty(), &mut empty).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn bvecs_widen() {
        let bytes = [3i32.to_le_bytes().as_slice(), &[0u8, 7, 255]].concat();
        let set = read_bvecs(&bytes[..]).unwrap();
        assert_eq!(set.row(0), &[0.0, 7.0, 255.0]);
    }

    #[test]
    fn buffer_validation() {
        assert!(VectorSet::new(3, vec![0.0; 4]).is_err());
        assert!(VectorSet::new(0, vec![0.0]).is_err());
        assert!(VectorSet::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let s = VectorSet::new(2, vec![]).unwrap();
        assert_eq!((s.dim(), s.len()), (2, 0));
        assert_eq!(VectorSet::empty().rows().count(), 0);
    }

    #[test]
    fn single_mode_mean() {
        let set = gen_gaussian_mixture(7, 1000, 2, 1, &[1.0], 1.0).unwrap();
        let mix = GaussianMixture::new(7, 2, &[1.0], 1.0).unwrap();
        assert_eq!(set.len(), 1000);
        for axis in 0..2 {
            let mean = set.rows().map(|r| f64::from(r[axis])).sum::<f64>() / 1000.0;
            // Standard error is 1/sqrt(1000) ~ 0.032, so 0.2 is over 6 sigma.
            assert!(
                (mean - mix.centers()[0][axis]).abs() < 0.2,
                "axis {axis}: {mean}"
            );
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_gaussian_mixture(11, 500, 4, 3, &[1.0, 2.0, 3.0], 0.5).unwrap();
        let b = gen_gaussian_mixture(11, 500, 4, 3, &[1.0, 2.0, 3.0], 0.5).unwrap();
        let c = gen_gaussian_mixture(12, 500, 4, 3, &[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn weighted_split_within_three_sigma() {
        let (n, dim) = (1000usize, 8);
        let mix = GaussianMixture::new(3, dim, &[0.9, 0.1], 0.05).unwrap();
        let set = mix.sample(n, 0).unwrap();
        let first = set.rows().filter(|r| mix.nearest_mode(r) == 0).count();
        let sigma = (n as f64 * 0.9 * 0.1).sqrt();
        assert!(
            (first as f64 - 900.0).abs() <= 3.0 * sigma,
            "{first} points nearest mode 0"
        );
    }

    #[test]
    fn streams_differ() {
        let mix = GaussianMixture::new(5, 3, &[1.0], 1.0).unwrap();
        assert_ne!(
            mix.sample(10, 0).unwrap().as_slice(),
            mix.sample(10, 1).unwrap().as_slice()
        );
    }

    #[test]
    fn generator_rejects_bad_parameters() {
        assert!(gen_gaussian_mixture(1, 0, 2, 1, &[1.0], 1.0).is_err());
        assert!(gen_gaussian_mixture(1, 10, 0, 1, &[1.0], 1.0).is_err());
        assert!(gen_gaussian_mixture(1, 10, 2, 0, &[], 1.0).is_err());
        assert!(gen_gaussian_mixture(1, 10, 2, 2, &[1.0], 1.0).is_err());
        assert!(gen_gaussian_mixture(1, 10, 2, 1, &[-1.0], 1.0).is_err());
        assert!(gen_gaussian_mixture(1, 10, 2, 1, &[1.0], 0.0).is_err());
    }

    #[test]
    fn subset_and_checksum() {
        let set = VectorSet::new(1, vec![1.0, 2.0, 3.0]).unwrap();
        let sub = set.subset(&[2, 0]).unwrap();
        assert_eq!(sub.as_slice(), &[3.0, 1.0]);
        assert!(set.subset(&[3]).is_err());
        assert_ne!(set.checksum(), sub.checksum());
        assert_eq!(set.checksum(), set.clone().checksum());
    }
}

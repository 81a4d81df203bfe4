//! Inverted file over a (possibly balanced) codebook, with multi-probe search.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::balancer::{assign_balanced, parse_penalties, Codebook};
use crate::dataset::VectorSet;
use crate::distance::{squared_l2, squared_l2_mixed};
use crate::error::{check_dim, Error, Result};
use crate::kmeans::Centroids;
use crate::textmeta::Meta;

/// How queries pick the cells to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Route {
    /// Rank cells by squared distance plus penalty, the same rule that
    /// filled the lists.
    #[default]
    Penalized,
    /// Rank cells by squared distance to the centroid alone.
    Plain,
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penalized" => Ok(Route::Penalized),
            "plain" => Ok(Route::Plain),
            _ => Err(Error::invalid(format!("unknown route `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    /// Cells probed per query.
    pub ma: usize,
    /// Length of the returned hit list.
    pub r_results: usize,
    pub route: Route,
}

impl SearchParams {
    pub fn new(ma: usize) -> Self {
        Self {
            ma,
            r_results: 100,
            route: Route::Penalized,
        }
    }

    pub fn with_results(mut self, r: usize) -> Self {
        self.r_results = r;
        self
    }

    pub fn with_route(mut self, route: Route) -> Self {
        self.route = route;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u32,
    /// Exact squared L2 distance to the query.
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Ascending by distance, then id.
    pub hits: Vec<Hit>,
    /// Candidates whose distance was computed: the summed size of the probed lists.
    pub scanned: usize,
    pub probed_cells: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct InvertedFile {
    codebook: Codebook,
    lists: Vec<Vec<u32>>,
    cell_of: Vec<u32>,
    data: Arc<VectorSet>,
}

impl InvertedFile {
    /// Buckets every point of `data` under its penalized nearest cell.
    pub fn build(data: Arc<VectorSet>, codebook: Codebook) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("indexed set"));
        }
        check_dim(codebook.dim(), data.dim())?;
        if data.len() > u32::MAX as usize {
            return Err(Error::invalid("more than 2^32 - 1 points"));
        }
        let assignment = assign_balanced(&data, &codebook)?;
        let mut lists: Vec<Vec<u32>> = assignment
            .counts()
            .iter()
            .map(|&n| Vec::with_capacity(n))
            .collect();
        for (p, &c) in assignment.cell_of().iter().enumerate() {
            lists[c as usize].push(p as u32);
        }
        Ok(Self {
            codebook,
            lists,
            cell_of: assignment.cell_of().to_vec(),
            data,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn data(&self) -> &Arc<VectorSet> {
        &self.data
    }

    pub fn k(&self) -> usize {
        self.lists.len()
    }

    /// Number of indexed points.
    pub fn len(&self) -> usize {
        self.cell_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_of.is_empty()
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    /// Cell holding point `id`.
    pub fn cell_of(&self, id: u32) -> u32 {
        self.cell_of[id as usize]
    }

    pub fn search(&self, query: &[f32], params: &SearchParams) -> Result<QueryResult> {
        search(self, query, params)
    }

    /// Runs every query in parallel; results are in query order.
    pub fn search_batch(
        &self,
        queries: &VectorSet,
        params: &SearchParams,
    ) -> Result<Vec<QueryResult>> {
        queries
            .as_slice()
            .par_chunks(queries.dim().max(1))
            .map(|q| search(self, q, params))
            .collect()
    }

    /// Writes `centroids.fvecs`, `penalties.txt`, `lists.bin` and `meta.txt`
    /// into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.codebook.save(dir)?;
        let lists = encode_lists(&self.lists);
        let lists_path = dir.join("lists.bin");
        fs::write(&lists_path, &lists).map_err(Error::at_path(&lists_path))?;
        let mut meta = Meta::new();
        meta.set("k", self.k())
            .set("dim", self.codebook.dim())
            .set("n", self.len())
            .set("iteration", self.codebook.iteration())
            .set(
                "centroids_sha256",
                file_digest(&dir.join("centroids.fvecs"))?,
            )
            .set("penalties_sha256", file_digest(&dir.join("penalties.txt"))?)
            .set("lists_sha256", digest(&lists))
            .set("data_sha256", self.data.checksum());
        meta.write(&dir.join("meta.txt"))
    }

    /// Reads an index saved by [`InvertedFile::save`] over the same `data`.
    pub fn load(dir: impl AsRef<Path>, data: Arc<VectorSet>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = Meta::read(&dir.join("meta.txt"))?;
        let (k, dim, n): (usize, usize, usize) =
            (meta.require("k")?, meta.require("dim")?, meta.require("n")?);
        let iteration: usize = meta.require("iteration")?;

        let verify = |key: &str, actual: String| -> Result<()> {
            let expected: String = meta.require(key)?;
            if expected == actual {
                Ok(())
            } else {
                Err(Error::Corrupt(format!(
                    "{key} mismatch in {}",
                    dir.display()
                )))
            }
        };
        let centroids_path = dir.join("centroids.fvecs");
        let penalties_path = dir.join("penalties.txt");
        let lists_path = dir.join("lists.bin");
        verify("centroids_sha256", file_digest(&centroids_path)?)?;
        verify("penalties_sha256", file_digest(&penalties_path)?)?;
        let lists_bytes = fs::read(&lists_path).map_err(Error::at_path(&lists_path))?;
        verify("lists_sha256", digest(&lists_bytes))?;
        if data.len() != n || data.dim() != dim {
            return Err(Error::invalid(format!(
                "index covers {n} vectors of dimension {dim}, data has {} of dimension {}",
                data.len(),
                data.dim()
            )));
        }
        verify("data_sha256", data.checksum())?;

        let centroids = Centroids::load_fvecs(&centroids_path)?;
        let text = fs::read_to_string(&penalties_path).map_err(Error::at_path(&penalties_path))?;
        let codebook = Codebook::with_penalties(centroids, parse_penalties(&text)?, iteration)?;
        if codebook.k() != k || codebook.dim() != dim {
            return Err(Error::Corrupt(
                "codebook shape disagrees with meta.txt".into(),
            ));
        }
        let lists = decode_lists(&lists_bytes, k)?;
        let mut cell_of = vec![u32::MAX; n];
        for (cell, list) in lists.iter().enumerate() {
            for &id in list {
                let slot = cell_of
                    .get_mut(id as usize)
                    .ok_or_else(|| Error::Corrupt(format!("point id {id} out of range")))?;
                if *slot != u32::MAX {
                    return Err(Error::Corrupt(format!("point id {id} listed twice")));
                }
                *slot = cell as u32;
            }
        }
        if cell_of.contains(&u32::MAX) {
            return Err(Error::Corrupt("some points are in no list".into()));
        }
        Ok(Self {
            codebook,
            lists,
            cell_of,
            data,
        })
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(&fs::read(path).map_err(Error::at_path(path))?))
}

fn encode_lists(lists: &[Vec<u32>]) -> Vec<u8> {
    let total: usize = lists.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(4 * (lists.len() + total));
    for list in lists {
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for id in list {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

fn decode_lists(bytes: &[u8], k: usize) -> Result<Vec<Vec<u32>>> {
    let mut words = bytes.chunks_exact(4);
    if !words.remainder().is_empty() {
        return Err(Error::Corrupt(
            "lists.bin length is not a multiple of 4".into(),
        ));
    }
    let mut next = |what: &str| -> Result<u32> {
        words
            .next()
            .map(|w| u32::from_le_bytes(w.try_into().expect("4-byte chunk")))
            .ok_or_else(|| Error::Corrupt(format!("lists.bin truncated reading {what}")))
    };
    let mut lists = Vec::with_capacity(k);
    for cell in 0..k {
        let len = next("a list length")? as usize;
        let list = (0..len)
            .map(|_| next(&format!("list {cell}")))
            .collect::<Result<Vec<_>>>()?;
        lists.push(list);
    }
    if next("trailer").is_ok() {
        return Err(Error::Corrupt("trailing bytes in lists.bin".into()));
    }
    Ok(lists)
}

/// The `ma` cells ranked first by penalized distance to `query`.
pub fn select_cells(query: &[f32], codebook: &Codebook, ma: usize) -> Result<Vec<u32>> {
    select_cells_routed(query, codebook, ma, Route::Penalized)
}

/// The `ma` best cells under `route`, ascending, lowest index on ties.
pub fn select_cells_routed(
    query: &[f32],
    codebook: &Codebook,
    ma: usize,
    route: Route,
) -> Result<Vec<u32>> {
    let k = codebook.k();
    if ma == 0 || ma > k {
        return Err(Error::invalid(format!("ma={ma} outside [1, {k}]")));
    }
    check_dim(codebook.dim(), query.len())?;
    let penalties = codebook.penalties();
    let mut scored: Vec<(f64, u32)> = codebook
        .centroids()
        .rows()
        .enumerate()
        .map(|(i, c)| {
            let d = squared_l2_mixed(query, c);
            let d = match route {
                Route::Penalized => d + penalties[i],
                Route::Plain => d,
            };
            (d, i as u32)
        })
        .collect();
    let order = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if ma < k {
        scored.select_nth_unstable_by(ma - 1, order);
        scored.truncate(ma);
    }
    scored.sort_unstable_by(order);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Probes `params.ma` cells and ranks their contents by exact squared L2.
/// Penalties only decide which cells are probed.
pub fn search(index: &InvertedFile, query: &[f32], params: &SearchParams) -> Result<QueryResult> {
    if params.r_results == 0 {
        return Err(Error::invalid("r_results must be positive"));
    }
    let probed_cells = select_cells_routed(query, &index.codebook, params.ma, params.route)?;
    let mut candidates: Vec<Hit> = Vec::new();
    for &cell in &probed_cells {
        for &id in &index.lists[cell as usize] {
            candidates.push(Hit {
                id,
                dist: squared_l2(query, index.data.row(id as usize)),
            });
        }
    }
    let scanned = candidates.len();
    let order = |a: &Hit, b: &Hit| a.dist.total_cmp(&b.dist).then(a.id.cmp(&b.id));
    if candidates.len() > params.r_results {
        candidates.select_nth_unstable_by(params.r_results - 1, order);
        candidates.truncate(params.r_results);
    }
    candidates.sort_unstable_by(order);
    Ok(QueryResult {
        hits: candidates,
        scanned,
        probed_cells,
    })
}

//! Server-side neighbor assignment from sign-random-projection sketches of
//! each client's item table.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ItemTable;

/// Shared `sketch_dim × embed_dim` random projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplanes {
    pub sketch_dim: usize,
    pub embed_dim: usize,
    pub data: Vec<f64>,
}

impl Hyperplanes {
    pub fn gaussian<R: Rng>(sketch_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        let data = (0..sketch_dim * embed_dim).map(|_| StandardNormal.sample(rng)).collect();
        Hyperplanes {
            sketch_dim,
            embed_dim,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let embed_dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != embed_dim) {
            return Err(Error::contract("hyperplane rows differ in length"));
        }
        Ok(Hyperplanes {
            sketch_dim: rows.len(),
            embed_dim,
            data: rows.concat(),
        })
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.embed_dim..(k + 1) * self.embed_dim]
    }
}

/// A ±1 vector stored one bit per entry (set bit = −1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sketch {
    len: usize,
    words: Vec<u64>,
}

impl Sketch {
    pub fn from_signs(signs: &[i8]) -> Self {
        let mut words = vec![0u64; signs.len().div_ceil(64)];
        for (k, &s) in signs.iter().enumerate() {
            if s < 0 {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        Sketch {
            len: signs.len(),
            words,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, k: usize) -> i8 {
        if self.words[k / 64] >> (k % 64) & 1 == 1 {
            -1
        } else {
            1
        }
    }

    pub fn signs(&self) -> Vec<i8> {
        (0..self.len).map(|k| self.get(k)).collect()
    }
}

/// Per item row `v`, the signs of `hyperplanes · v`, with `sign(0) = +1`.
pub fn sketch_item_table(table: &ItemTable, planes: &Hyperplanes) -> Result<Sketch> {
    if table.dim != planes.embed_dim {
        return Err(Error::contract(format!(
            "item dim {} does not match hyperplane dim {}",
            table.dim, planes.embed_dim
        )));
    }
    let mut signs = Vec::with_capacity(table.rows * planes.sketch_dim);
    for i in 0..table.rows {
        let v = table.row(i);
        for k in 0..planes.sketch_dim {
            let proj: f64 = planes.row(k).iter().zip(v).map(|(a, b)| a * b).sum();
            signs.push(if proj < 0.0 { -1 } else { 1 });
        }
    }
    Ok(Sketch::from_signs(&signs))
}

/// Cosine similarity of two ±1 sketches: `(len − 2·hamming) / len`.
pub fn cosine_similarity(a: &Sketch, b: &Sketch) -> Result<f64> {
    if a.len != b.len {
        return Err(Error::contract(format!("sketch lengths {} and {} differ", a.len, b.len)));
    }
    if a.len == 0 {
        return Err(Error::contract("empty sketch"));
    }
    let hamming: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum();
    Ok((a.len as f64 - 2.0 * hamming as f64) / a.len as f64)
}

/// Cosine similarity of two raw item tables flattened to vectors (0 if
/// either is all zeros).
pub fn raw_cosine_similarity(a: &ItemTable, b: &ItemTable) -> Result<f64> {
    if a.data.len() != b.data.len() {
        return Err(Error::contract("item table shapes differ"));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    Ok(if denom > 0.0 { ab / denom } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborMap {
    pub assignments: Vec<Vec<usize>>,
    pub round_assigned: u64,
}

impl NeighborMap {
    pub fn empty(num_clients: usize) -> Self {
        NeighborMap {
            assignments: vec![Vec::new(); num_clients],
            round_assigned: 0,
        }
    }

    pub fn neighbors(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }
}

/// Full symmetric similarity matrix, row-major `n × n`, computed by `sim`
/// over pairs `i < j` in parallel.
pub fn similarity_matrix<F>(n: usize, sim: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| sim(i, j)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let mut m = vec![1.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &s) in row.iter().enumerate() {
            let j = i + 1 + off;
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    Ok(m)
}

/// Top-`n` most similar other clients per client, descending similarity,
/// ties by ascending id.
pub fn assign_from_matrix(sim: &[f64], num_clients: usize, n: usize, round: u64) -> Result<NeighborMap> {
    if num_clients < 2 {
        return Err(Error::contract("neighbor assignment needs at least 2 clients"));
    }
    if sim.len() != num_clients * num_clients {
        return Err(Error::contract("similarity matrix shape mismatch"));
    }
    let keep = n.min(num_clients - 1);
    let assignments = (0..num_clients)
        .map(|i| {
            let row = &sim[i * num_clients..(i + 1) * num_clients];
            let mut others: Vec<usize> = (0..num_clients).filter(|&j| j != i).collect();
            let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            if keep < others.len() {
                others.select_nth_unstable_by(keep, order);
                others.truncate(keep);
            }
            others.sort_by(order);
            others
        })
        .collect();
    Ok(NeighborMap {
        assignments,
        round_assigned: round,
    })
}

pub fn assign_neighbors(sketches: &[Sketch], n: usize, round: u64) -> Result<NeighborMap> {
    if sketches.len() < 2 {
        return Err(Error::contract("neighbor assignment needs at least 2 clients"));
    }
    let sim = similarity_matrix(sketches.len(), |i, j| cosine_similarity(&sketches[i], &sketches[j]))?;
    assign_from_matrix(&sim, sketches.len(), n, round)
}

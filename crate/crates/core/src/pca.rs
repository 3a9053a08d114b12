//! Principal-component reduction of answer embeddings.
//!
//! The transform is fitted once on the flattened training samples and then
//! shared by every embedding of a run (teacher samples, default answers and
//! candidate answers). Components are not whitened.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};

pub const PCA_FORMAT: &str = "ssd-pca";
pub const PCA_VERSION: u32 = 1;

const ORTHO_TOL_FIT: f64 = 1e-8;
const ORTHO_TOL_LOAD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    mean: Vec<f64>,
    /// `d_pca` rows of length `d_raw`, row-major.
    basis: Vec<f64>,
    explained_variance: Vec<f64>,
    d_raw: usize,
    id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PcaHeader {
    format: String,
    version: u32,
    d_raw: usize,
    d_pca: usize,
    id: String,
}

impl PcaTransform {
    /// Fits the top `d_pca` principal axes of `embeddings`.
    ///
    /// The covariance uses the unbiased `n - 1` divisor. Each basis row is signed
    /// so that its largest-magnitude coordinate is positive.
    pub fn fit(embeddings: &[Vec<f64>], d_pca: usize) -> Result<Self> {
        if d_pca == 0 {
            return Err(Error::invalid("d_pca must be at least 1"));
        }
        let n = embeddings.len();
        if n < d_pca || n < 2 {
            return Err(Error::invalid(format!(
                "PCA needs at least max(d_pca, 2) = {} samples, got {n}",
                d_pca.max(2)
            )));
        }
        let d_raw = embeddings[0].len();
        if d_pca > d_raw {
            return Err(Error::invalid(format!("d_pca {d_pca} exceeds embedding dimension {d_raw}")));
        }
        let mut mean = vec![0.0; d_raw];
        for (i, e) in embeddings.iter().enumerate() {
            check_dim(&format!("embedding {i}"), d_raw, e.len())?;
            for (m, &x) in mean.iter_mut().zip(e) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }

        let mut cov = DMatrix::<f64>::zeros(d_raw, d_raw);
        let mut centered = vec![0.0; d_raw];
        for e in embeddings {
            for ((c, &x), &m) in centered.iter_mut().zip(e).zip(&mean) {
                *c = x - m;
            }
            for a in 0..d_raw {
                let ca = centered[a];
                for b in a..d_raw {
                    cov[(a, b)] += ca * centered[b];
                }
            }
        }
        for a in 0..d_raw {
            for b in a..d_raw {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d_raw).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut basis = Vec::with_capacity(d_pca * d_raw);
        let mut explained_variance = Vec::with_capacity(d_pca);
        for &c in order.iter().take(d_pca) {
            let col = eig.eigenvectors.column(c);
            let norm = col.norm();
            let mut row: Vec<f64> = col.iter().map(|v| v / norm).collect();
            let pivot = row.iter().enumerate().fold(0, |best, (i, v)| if v.abs() > row[best].abs() { i } else { best });
            if row[pivot] < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            basis.extend(row);
            explained_variance.push(eig.eigenvalues[c].max(0.0));
        }

        let t = Self::assemble(mean, basis, explained_variance, d_raw);
        t.check_invariants(ORTHO_TOL_FIT)?;
        Ok(t)
    }

    fn assemble(mean: Vec<f64>, basis: Vec<f64>, explained_variance: Vec<f64>, d_raw: usize) -> Self {
        let id = content_id(&mean, &basis, &explained_variance, d_raw);
        PcaTransform { mean, basis, explained_variance, d_raw, id }
    }

    fn check_invariants(&self, tol: f64) -> Result<()> {
        let k = self.d_pca();
        for a in 0..k {
            for b in a..k {
                let dot: f64 = self.row(a).iter().zip(self.row(b)).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot - target).abs() > tol {
                    return Err(Error::invalid(format!("PCA basis rows {a},{b} not orthonormal (dot {dot})")));
                }
            }
        }
        if self.explained_variance.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("explained variance is not non-increasing"));
        }
        if self.explained_variance.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("explained variance must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn d_pca(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.d_raw..(i + 1) * self.d_raw]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Content hash linking checkpoints to the transform they were trained under.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// `basis · (z - mean)`.
    pub fn transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("embedding", self.d_raw, z.len())?;
        Ok((0..self.d_pca())
            .map(|i| self.row(i).iter().zip(z).zip(&self.mean).map(|((b, x), m)| b * (x - m)).sum())
            .collect())
    }

    pub fn transform_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        zs.iter().map(|z| self.transform(z)).collect()
    }

    /// `mean + basisᵀ · y`.
    pub fn inverse_transform(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("reduced embedding", self.d_pca(), y.len())?;
        let mut out = self.mean.clone();
        for (i, &yi) in y.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.row(i)) {
                *o += yi * b;
            }
        }
        Ok(out)
    }

    /// Writes a JSON header line followed by little-endian f32 blocks:
    /// mean (`d_raw`), basis (`d_pca × d_raw`), explained variance (`d_pca`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = PcaHeader {
            format: PCA_FORMAT.to_string(),
            version: PCA_VERSION,
            d_raw: self.d_raw,
            d_pca: self.d_pca(),
            id: self.id.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = serde_json::to_vec(&header).expect("header serializes");
        line.push(b'\n');
        w.write_all(&line).map_err(|e| Error::io(path, e))?;
        for block in [&self.mean, &self.basis, &self.explained_variance] {
            w.write_all(&f32_bytes(block)).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        let header: PcaHeader =
            serde_json::from_slice(&line).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format != PCA_FORMAT {
            return Err(Error::format(path, format!("not a PCA file ({})", header.format)));
        }
        if header.version != PCA_VERSION {
            return Err(Error::format(path, format!("unsupported PCA format version {}", header.version)));
        }
        let (d_raw, d_pca) = (header.d_raw, header.d_pca);
        if d_raw == 0 || d_pca == 0 || d_pca > d_raw {
            return Err(Error::format(path, format!("bad dimensions d_raw={d_raw} d_pca={d_pca}")));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let floats = d_raw + d_pca * d_raw + d_pca;
        if payload.len() != 4 * floats {
            return Err(Error::format(path, format!("expected {} payload bytes, found {}", 4 * floats, payload.len())));
        }
        let values = read_f32s(&payload);
        let mean = values[..d_raw].to_vec();
        let basis = values[d_raw..d_raw + d_pca * d_raw].to_vec();
        let var = values[d_raw + d_pca * d_raw..].to_vec();
        let t = Self::assemble(mean, basis, var, d_raw);
        if t.id != header.id {
            return Err(Error::format(path, "payload does not match header id"));
        }
        t.check_invariants(ORTHO_TOL_LOAD).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(t)
    }
}

fn f32_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
}

fn content_id(mean: &[f64], basis: &[f64], var: &[f64], d_raw: usize) -> String {
    let mut h = Sha256::new();
    h.update((d_raw as u64).to_le_bytes());
    h.update((var.len() as u64).to_le_bytes());
    for block in [mean, basis, var] {
        h.update(f32_bytes(block));
    }
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

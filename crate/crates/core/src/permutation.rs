//! Permutations stored as index vectors and applied by gather.
//!
//! Orientation is fixed here once for the whole crate: `indices[i]` is the
//! source row (or column) that lands at position `i`, so the dense matrix has
//! `P[i][indices[i]] = 1`. A row shuffle pre-multiplies (`P·Z`), a column
//! shuffle post-multiplies by the inverse (`Z·P⁻¹ = Z·Pᵀ`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngs;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    indices: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(indices: Vec<usize>) -> Result<Self> {
        Permutation::new(indices)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.indices
    }
}

impl Permutation {
    /// Validates that `indices` is a bijection on `0..n`.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        if n == 0 {
            return Err(Error::Domain("permutation of size 0".into()));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || seen[i] {
                return Err(Error::Domain(format!(
                    "indices are not a bijection on 0..{n}: {indices:?}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { indices })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    /// Uniform draw by Fisher–Yates.
    pub fn sample(n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("cannot sample a permutation of size 0".into()));
        }
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(rng);
        Ok(Self { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.indices.iter().enumerate() {
            inv[j] = i;
        }
        Self { indices: inv }
    }

    /// Permutation whose matrix is `self · other`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::shape("compose", (self.len(), 1), (other.len(), 1)));
        }
        Ok(Self {
            indices: self.indices.iter().map(|&i| other.indices[i]).collect(),
        })
    }

    /// Dense 0/1 matrix. Only test oracles should need this.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        Matrix::from_fn(n, n, |i, j| if self.indices[i] == j { 1.0 } else { 0.0 })
    }

    /// `P·Z`: row `i` of the result is row `indices[i]` of `z`.
    pub fn apply_rows(&self, z: &Matrix) -> Result<Matrix> {
        if z.rows() != self.len() {
            return Err(Error::shape("apply_rows", (self.len(), self.len()), z.shape()));
        }
        let mut data = Vec::with_capacity(z.data().len());
        for &src in &self.indices {
            data.extend_from_slice(z.row(src));
        }
        Matrix::new(z.rows(), z.cols(), data)
    }

    /// `Z·P⁻¹ = Z·Pᵀ`: column `j` of the result is column `indices[j]` of `z`.
    pub fn apply_cols_inv(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.len() {
            return Err(Error::shape("apply_cols_inv", z.shape(), (self.len(), self.len())));
        }
        Ok(gather_cols(z, &self.indices))
    }

    /// `Z·P`, the inverse of [`apply_cols_inv`](Self::apply_cols_inv).
    pub fn apply_cols(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.len() {
            return Err(Error::shape("apply_cols", z.shape(), (self.len(), self.len())));
        }
        Ok(gather_cols(z, &self.inverse().indices))
    }

    /// `P·W·P⁻¹` for a square `w`.
    pub fn conjugate_weight(&self, w: &Matrix) -> Result<Matrix> {
        if w.rows() != w.cols() || w.rows() != self.len() {
            return Err(Error::shape("conjugate_weight", w.shape(), (self.len(), self.len())));
        }
        let idx = &self.indices;
        Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| w.get(idx[i], idx[j])))
    }

    /// `v·Pᵀ`: keeps a bias or affine vector aligned with column-shuffled features.
    pub fn permute_rowvector(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return Err(Error::shape("permute_rowvector", (1, v.len()), (self.len(), self.len())));
        }
        Ok(self.indices.iter().map(|&i| v[i]).collect())
    }
}

fn gather_cols(z: &Matrix, src: &[usize]) -> Matrix {
    Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, src[j]))
}

/// `log2(p!·d!)`, the number of bits an adversary must guess to undo a
/// uniformly random row-and-column shuffle of a `p×d` feature.
pub fn log2_perm_space(p: usize, d: usize) -> f64 {
    log2_factorial(p) + log2_factorial(d)
}

pub fn log2_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).log2()).sum()
}

/// Order-of-magnitude growth `b·p²` of the permutation space when CutMix
/// pairs each image with one of `b` batch members. An asymptotic bound, not a
/// count.
pub fn mixup_space_factor(batch: u64, p: u64) -> u64 {
    batch.saturating_mul(p.saturating_mul(p))
}

/// The edge's shuffling secret: the per-model column permutation and the seed
/// from which a fresh row permutation is derived for every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleKey {
    p_col: Permutation,
    row_seed: u64,
    p: usize,
    d: usize,
}

pub const KEY_FILE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct KeyFile {
    version: u32,
    d: usize,
    p: usize,
    p_col: Vec<usize>,
    row_seed: u64,
}

impl ShuffleKey {
    pub fn new(p: usize, d: usize, p_col: Permutation, row_seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(Error::Domain("key patch count must be positive".into()));
        }
        if p_col.len() != d {
            return Err(Error::shape("ShuffleKey::new", (d, d), (p_col.len(), p_col.len())));
        }
        Ok(Self {
            p_col,
            row_seed,
            p,
            d,
        })
    }

    /// Random column permutation and row seed, both derived from `seed`.
    pub fn generate(p: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = rngs::substream(seed, "key-column");
        let p_col = Permutation::sample(d, &mut rng)?;
        let row_seed = rng.random();
        Self::new(p, d, p_col, row_seed)
    }

    /// A key that shuffles rows only (column permutation is the identity).
    pub fn row_only(p: usize, d: usize, row_seed: u64) -> Result<Self> {
        Self::new(p, d, Permutation::identity(d), row_seed)
    }

    pub fn p_col(&self) -> &Permutation {
        &self.p_col
    }

    pub fn row_seed(&self) -> u64 {
        self.row_seed
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Row permutation for sample `index` in `epoch`. Pure in its inputs, so a
    /// run can be replayed exactly.
    pub fn row_perm(&self, epoch: u64, index: u64) -> Permutation {
        let mut rng = rngs::keyed(self.row_seed, "row-perm", epoch, index);
        Permutation::sample(self.p, &mut rng).expect("p > 0 checked at construction")
    }

    /// Same row seed, inverse column permutation.
    pub fn inverse(&self) -> Self {
        Self {
            p_col: self.p_col.inverse(),
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        let file = KeyFile {
            version: KEY_FILE_VERSION,
            d: self.d,
            p: self.p,
            p_col: self.p_col.indices.clone(),
            row_seed: self.row_seed,
        };
        toml::to_string(&file).expect("key file serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: KeyFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.version != KEY_FILE_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported key file version {}", file.version),
            ));
        }
        let p_col = Permutation::new(file.p_col).map_err(|e| Error::config("p_col", e.to_string()))?;
        if p_col.len() != file.d {
            return Err(Error::config("p_col", format!("length {} != d = {}", p_col.len(), file.d)));
        }
        Self::new(file.p, file.d, p_col, file.row_seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

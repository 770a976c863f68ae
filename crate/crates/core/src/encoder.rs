//! Transformer encoder blocks with a hand-derived backward pass.
//!
//! The minimal block is
//!
//! ```text
//! Q = Z·W_Qᵀ   K = Z·W_Kᵀ   V = Z·W_Vᵀ
//! S = softmax(Q·Kᵀ / √d)     A = S·V
//! A1 = A·W_1ᵀ   H = act(A1)   A2 = H·W_2ᵀ
//! ```
//!
//! with all five weights square (`d×d`), which is what makes
//! `W ↦ P_C·W·P_Cᵀ` a valid re-keying of the block. The full variant adds
//! biases, pre-norm layer norms and the two residual connections; all of
//! these are element-wise or column-wise and stay permutation equivalent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permutation::Permutation;
use crate::tensor::{
    layernorm_rows, layernorm_rows_backward, softmax_rows, softmax_rows_backward, Activation,
    LayerNormCache, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TebVariant {
    /// Attention + MLP, no biases, norms or residuals.
    #[default]
    Minimal,
    /// Pre-norm block with biases and residual connections.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub variant: TebVariant,
    pub activation: Activation,
    pub n_heads: usize,
    pub ln_eps: f64,
    /// Whether the features reaching this block are column shuffled.
    pub column_shuffle: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            variant: TebVariant::Minimal,
            activation: Activation::Relu,
            n_heads: 1,
            ln_eps: 1e-5,
            column_shuffle: false,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("{} heads do not partition width {d}", self.n_heads),
            ));
        }
        if self.n_heads > 1 && self.column_shuffle {
            return Err(Error::config(
                "n_heads",
                "multi-head attention mixes columns across heads; only row shuffle is supported with n_heads > 1",
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBiases {
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub b_1: Vec<f64>,
    pub b_2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub beta2: Vec<f64>,
}

/// Parameters of one block. Gradients reuse this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlockWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_1: Matrix,
    pub w_2: Matrix,
    pub biases: Option<BlockBiases>,
    pub norms: Option<LayerNormParams>,
}

/// Cached forward intermediates. `s` holds one `p×p` attention map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderActivations {
    pub z: Matrix,
    /// Input to the Q/K/V projections: `z`, or `LN1(z)` in the full variant.
    pub x_in: Matrix,
    pub ln1: Option<LayerNormCache>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub s: Vec<Matrix>,
    pub a: Matrix,
    /// `z + a` in the full variant.
    pub r1: Option<Matrix>,
    pub ln2: Option<LayerNormCache>,
    /// Input to the first MLP layer: `a`, or `LN2(r1)`.
    pub mlp_in: Matrix,
    pub a1: Matrix,
    pub h: Matrix,
    pub a2: Matrix,
    pub out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub params: EncoderBlockWeights,
    pub d_z: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackGradients {
    pub blocks: Vec<EncoderBlockWeights>,
    pub d_z: Matrix,
}

fn zeros_vec(d: usize) -> Vec<f64> {
    vec![0.0; d]
}

impl EncoderBlockWeights {
    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn variant(&self) -> TebVariant {
        if self.norms.is_some() {
            TebVariant::Full
        } else {
            TebVariant::Minimal
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        for (name, w) in self.matrices() {
            if w.shape() != (d, d) {
                return Err(Error::config(name, format!("expected {d}x{d}, got {:?}", w.shape())));
            }
        }
        if self.norms.is_some() != self.biases.is_some() {
            return Err(Error::config(
                "teb_variant",
                "the full variant needs both biases and layer-norm affines",
            ));
        }
        for (name, v) in self.vectors() {
            if v.len() != d {
                return Err(Error::config(name, format!("expected length {d}, got {}", v.len())));
            }
        }
        Ok(())
    }

    pub fn matrices(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_1", &self.w_1),
            ("w_2", &self.w_2),
        ]
    }

    pub fn vectors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.biases {
            out.extend([
                ("b_q", &b.b_q),
                ("b_k", &b.b_k),
                ("b_v", &b.b_v),
                ("b_1", &b.b_1),
                ("b_2", &b.b_2),
            ]);
        }
        if let Some(n) = &self.norms {
            out.extend([
                ("gamma1", &n.gamma1),
                ("beta1", &n.beta1),
                ("gamma2", &n.gamma2),
                ("beta2", &n.beta2),
            ]);
        }
        out
    }

    /// Every parameter as a flat slice, in a fixed order.
    pub fn param_slices(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> =
            self.matrices().into_iter().map(|(n, m)| (n, m.data())).collect();
        out.extend(self.vectors().into_iter().map(|(n, v)| (n, v.as_slice())));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.w_q.data_mut(),
            self.w_k.data_mut(),
            self.w_v.data_mut(),
            self.w_1.data_mut(),
            self.w_2.data_mut(),
        ];
        if let Some(b) = &mut self.biases {
            out.extend([
                b.b_q.as_mut_slice(),
                b.b_k.as_mut_slice(),
                b.b_v.as_mut_slice(),
                b.b_1.as_mut_slice(),
                b.b_2.as_mut_slice(),
            ]);
        }
        if let Some(n) = &mut self.norms {
            out.extend([
                n.gamma1.as_mut_slice(),
                n.beta1.as_mut_slice(),
                n.gamma2.as_mut_slice(),
                n.beta2.as_mut_slice(),
            ]);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.d();
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_1: Matrix::zeros(d, d),
            w_2: Matrix::zeros(d, d),
            biases: self.biases.as_ref().map(|_| BlockBiases {
                b_q: zeros_vec(d),
                b_k: zeros_vec(d),
                b_v: zeros_vec(d),
                b_1: zeros_vec(d),
                b_2: zeros_vec(d),
            }),
            norms: self.norms.as_ref().map(|_| LayerNormParams {
                gamma1: zeros_vec(d),
                beta1: zeros_vec(d),
                gamma2: zeros_vec(d),
                beta2: zeros_vec(d),
            }),
        }
    }

    /// `self += c · other`, parameter by parameter.
    pub fn axpy(&mut self, c: f64, other: &EncoderBlockWeights) -> Result<()> {
        let theirs = other.param_slices();
        let mine = self.param_slices_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Contract("parameter sets differ in layout".into()));
        }
        for (dst, (name, src)) in mine.into_iter().zip(theirs) {
            if dst.len() != src.len() {
                return Err(Error::Contract(format!("parameter {name} differs in length")));
            }
            for (a, b) in dst.iter_mut().zip(src) {
                *a += c * b;
            }
        }
        Ok(())
    }

    /// Plain SGD: `self -= lr · grads`.
    pub fn sgd_step(&mut self, grads: &EncoderBlockWeights, lr: f64) -> Result<()> {
        self.axpy(-lr, grads)
    }

    /// Largest absolute difference over every parameter.
    pub fn max_abs_diff(&self, other: &EncoderBlockWeights) -> Result<f64> {
        let a = self.param_slices();
        let b = other.param_slices();
        if a.len() != b.len() {
            return Err(Error::Contract("parameter sets differ in layout".into()));
        }
        let mut worst = 0.0f64;
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            if x.len() != y.len() {
                return Err(Error::Contract(format!("parameter {name} differs in length")));
            }
            for (u, v) in x.iter().zip(y.iter()) {
                worst = worst.max((u - v).abs());
            }
        }
        Ok(worst)
    }

    /// `W ↦ P·W·Pᵀ` for every matrix and `v ↦ v·Pᵀ` for every bias and affine.
    pub fn conjugate(&self, p: &Permutation) -> Result<Self> {
        let perm_vec = |v: &Vec<f64>| p.permute_rowvector(v);
        Ok(Self {
            w_q: p.conjugate_weight(&self.w_q)?,
            w_k: p.conjugate_weight(&self.w_k)?,
            w_v: p.conjugate_weight(&self.w_v)?,
            w_1: p.conjugate_weight(&self.w_1)?,
            w_2: p.conjugate_weight(&self.w_2)?,
            biases: match &self.biases {
                Some(b) => Some(BlockBiases {
                    b_q: perm_vec(&b.b_q)?,
                    b_k: perm_vec(&b.b_k)?,
                    b_v: perm_vec(&b.b_v)?,
                    b_1: perm_vec(&b.b_1)?,
                    b_2: perm_vec(&b.b_2)?,
                }),
                None => None,
            },
            norms: match &self.norms {
                Some(n) => Some(LayerNormParams {
                    gamma1: perm_vec(&n.gamma1)?,
                    beta1: perm_vec(&n.beta1)?,
                    gamma2: perm_vec(&n.gamma2)?,
                    beta2: perm_vec(&n.beta2)?,
                }),
                None => None,
            },
        })
    }
}

fn affine(x: &Matrix, w: &Matrix, b: Option<&Vec<f64>>) -> Result<Matrix> {
    let y = x.matmul_t(w)?;
    match b {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}

/// Forward pass of one block. Returns the block output and the cache needed
/// by [`teb_backward`].
pub fn teb_forward(
    w: &EncoderBlockWeights,
    cfg: &BlockConfig,
    z: &Matrix,
) -> Result<(Matrix, EncoderActivations)> {
    let d = w.d();
    w.validate()?;
    cfg.validate(d)?;
    if z.cols() != d {
        return Err(Error::shape("teb_forward", z.shape(), (d, d)));
    }
    if w.variant() != cfg.variant {
        return Err(Error::config("teb_variant", "weights do not match the configured variant"));
    }
    let biases = w.biases.as_ref();

    let (x_in, ln1) = match &w.norms {
        Some(n) => {
            let (y, cache) = layernorm_rows(z, &n.gamma1, &n.beta1, cfg.ln_eps)?;
            (y, Some(cache))
        }
        None => (z.clone(), None),
    };
    let q = affine(&x_in, &w.w_q, biases.map(|b| &b.b_q))?;
    let k = affine(&x_in, &w.w_k, biases.map(|b| &b.b_k))?;
    let v = affine(&x_in, &w.w_v, biases.map(|b| &b.b_v))?;

    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut a = Matrix::zeros(z.rows(), d);
    let mut s = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let start = head * dh;
        let qh = q.col_block(start, dh)?;
        let kh = k.col_block(start, dh)?;
        let vh = v.col_block(start, dh)?;
        let sh = softmax_rows(&qh.matmul_t(&kh)?.scale(scale));
        a.set_col_block(start, &sh.matmul(&vh)?)?;
        s.push(sh);
    }

    let (r1, ln2, mlp_in) = match &w.norms {
        Some(n) => {
            let r1 = z.add(&a)?;
            let (y, cache) = layernorm_rows(&r1, &n.gamma2, &n.beta2, cfg.ln_eps)?;
            (Some(r1), Some(cache), y)
        }
        None => (None, None, a.clone()),
    };
    let a1 = affine(&mlp_in, &w.w_1, biases.map(|b| &b.b_1))?;
    let h = cfg.activation.forward(&a1);
    let a2 = affine(&h, &w.w_2, biases.map(|b| &b.b_2))?;
    let out = match &r1 {
        Some(r1) => r1.add(&a2)?,
        None => a2.clone(),
    };
    let acts = EncoderActivations {
        z: z.clone(),
        x_in,
        ln1,
        q,
        k,
        v,
        s,
        a,
        r1,
        ln2,
        mlp_in,
        a1,
        h,
        a2,
        out: out.clone(),
    };
    Ok((out, acts))
}

/// Backward pass of one block given `∂l/∂out`.
///
/// The input gradient sums the Q, K and V paths:
/// `∂l/∂Z = ∂l/∂Q·W_Q + ∂l/∂K·W_K + ∂l/∂V·W_V` (plus the residual and
/// layer-norm terms in the full variant).
pub fn teb_backward(
    w: &EncoderBlockWeights,
    cfg: &BlockConfig,
    acts: &EncoderActivations,
    upstream: &Matrix,
) -> Result<EncoderGradients> {
    let d = w.d();
    if upstream.shape() != acts.out.shape() {
        return Err(Error::shape("teb_backward", upstream.shape(), acts.out.shape()));
    }
    let mut grads = w.zeros_like();

    // MLP
    let d_a2 = upstream;
    grads.w_2 = d_a2.t_matmul(&acts.h)?;
    let d_h = d_a2.matmul(&w.w_2)?;
    let d_a1 = d_h.hadamard(&cfg.activation.derivative(&acts.a1))?;
    grads.w_1 = d_a1.t_matmul(&acts.mlp_in)?;
    let d_mlp_in = d_a1.matmul(&w.w_1)?;

    let d_a = match (&w.norms, &acts.ln2) {
        (Some(n), Some(cache)) => {
            let (dx, dg, db) = layernorm_rows_backward(cache, &n.gamma2, &d_mlp_in)?;
            let gn = grads.norms.as_mut().expect("zeros_like mirrors norms");
            gn.gamma2 = dg;
            gn.beta2 = db;
            // residual: out = r1 + mlp(LN2(r1))
            upstream.add(&dx)?
        }
        _ => d_mlp_in,
    };

    // attention, head by head
    let n_heads = acts.s.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = Matrix::zeros(acts.q.rows(), d);
    let mut d_k = Matrix::zeros(acts.k.rows(), d);
    let mut d_v = Matrix::zeros(acts.v.rows(), d);
    for (head, sh) in acts.s.iter().enumerate() {
        let start = head * dh;
        let d_ah = d_a.col_block(start, dh)?;
        let qh = acts.q.col_block(start, dh)?;
        let kh = acts.k.col_block(start, dh)?;
        let vh = acts.v.col_block(start, dh)?;
        let d_s = d_ah.matmul_t(&vh)?;
        d_v.set_col_block(start, &sh.t_matmul(&d_ah)?)?;
        let d_logits = softmax_rows_backward(sh, &d_s)?.scale(scale);
        d_q.set_col_block(start, &d_logits.matmul(&kh)?)?;
        d_k.set_col_block(start, &d_logits.t_matmul(&qh)?)?;
    }
    grads.w_q = d_q.t_matmul(&acts.x_in)?;
    grads.w_k = d_k.t_matmul(&acts.x_in)?;
    grads.w_v = d_v.t_matmul(&acts.x_in)?;
    if let Some(gb) = grads.biases.as_mut() {
        gb.b_q = d_q.col_sums();
        gb.b_k = d_k.col_sums();
        gb.b_v = d_v.col_sums();
        gb.b_1 = d_a1.col_sums();
        gb.b_2 = d_a2.col_sums();
    }
    let d_x_in = d_q
        .matmul(&w.w_q)?
        .add(&d_k.matmul(&w.w_k)?)?
        .add(&d_v.matmul(&w.w_v)?)?;

    let d_z = match (&w.norms, &acts.ln1) {
        (Some(n), Some(cache)) => {
            let (dx, dg, db) = layernorm_rows_backward(cache, &n.gamma1, &d_x_in)?;
            let gn = grads.norms.as_mut().expect("zeros_like mirrors norms");
            gn.gamma1 = dg;
            gn.beta1 = db;
            // residual: r1 = z + attn(LN1(z))
            d_a.add(&dx)?
        }
        _ => d_x_in,
    };
    Ok(EncoderGradients { params: grads, d_z })
}

fn check_uniform(blocks: &[EncoderBlockWeights]) -> Result<usize> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::config("n_layers", "stack has no blocks"))?;
    let d = first.d();
    for b in blocks {
        if b.d() != d {
            return Err(Error::shape("stack", (d, d), (b.d(), b.d())));
        }
    }
    Ok(d)
}

pub fn stack_forward(
    blocks: &[EncoderBlockWeights],
    cfg: &BlockConfig,
    z: &Matrix,
) -> Result<(Matrix, Vec<EncoderActivations>)> {
    check_uniform(blocks)?;
    let mut x = z.clone();
    let mut cache = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (y, acts) = teb_forward(block, cfg, &x)?;
        cache.push(acts);
        x = y;
    }
    Ok((x, cache))
}

pub fn stack_backward(
    blocks: &[EncoderBlockWeights],
    cfg: &BlockConfig,
    acts: &[EncoderActivations],
    upstream: &Matrix,
) -> Result<StackGradients> {
    check_uniform(blocks)?;
    if acts.len() != blocks.len() {
        return Err(Error::Contract(format!(
            "{} activation caches for {} blocks",
            acts.len(),
            blocks.len()
        )));
    }
    let mut g = upstream.clone();
    let mut grads = Vec::with_capacity(blocks.len());
    for (block, cache) in blocks.iter().zip(acts).rev() {
        let eg = teb_backward(block, cfg, cache, &g)?;
        grads.push(eg.params);
        g = eg.d_z;
    }
    grads.reverse();
    Ok(StackGradients { blocks: grads, d_z: g })
}

/// Scale of the uniform initialiser: entries lie in `[-c/√d, c/√d]`.
pub const INIT_SCALE: f64 = 1.0;

/// Seeded uniform initialisation. Layer-norm gains start at 1 and shifts at 0.
pub fn init_blocks(
    n_layers: usize,
    d: usize,
    variant: TebVariant,
    rng: &mut impl Rng,
) -> Result<Vec<EncoderBlockWeights>> {
    if n_layers == 0 || d == 0 {
        return Err(Error::config("n_layers", "need at least one block of positive width"));
    }
    let bound = INIT_SCALE / (d as f64).sqrt();
    let mat = |rng: &mut dyn rand::RngCore| {
        Matrix::from_fn(d, d, |_, _| rng.random_range(-bound..=bound))
    };
    let mut blocks = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let w_q = mat(rng);
        let w_k = mat(rng);
        let w_v = mat(rng);
        let w_1 = mat(rng);
        let w_2 = mat(rng);
        let (biases, norms) = match variant {
            TebVariant::Minimal => (None, None),
            TebVariant::Full => {
                let mut vec = || (0..d).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
                let biases = BlockBiases {
                    b_q: vec(),
                    b_k: vec(),
                    b_v: vec(),
                    b_1: vec(),
                    b_2: vec(),
                };
                let norms = LayerNormParams {
                    gamma1: vec![1.0; d],
                    beta1: zeros_vec(d),
                    gamma2: vec![1.0; d],
                    beta2: zeros_vec(d),
                };
                (Some(biases), Some(norms))
            }
        };
        blocks.push(EncoderBlockWeights {
            w_q,
            w_k,
            w_v,
            w_1,
            w_2,
            biases,
            norms,
        });
    }
    Ok(blocks)
}

/// Re-keys a whole stack with `p_col`. Rejected for multi-head stacks.
pub fn conjugate_stack(
    blocks: &[EncoderBlockWeights],
    cfg: &BlockConfig,
    p_col: &Permutation,
) -> Result<Vec<EncoderBlockWeights>> {
    if cfg.n_heads != 1 {
        return Err(Error::config(
            "n_heads",
            "weight conjugation requires single-head attention",
        ));
    }
    check_uniform(blocks)?;
    blocks.iter().map(|b| b.conjugate(p_col)).collect()
}

pub fn stack_max_abs_diff(a: &[EncoderBlockWeights], b: &[EncoderBlockWeights]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract("stacks differ in depth".into()));
    }
    a.iter()
        .zip(b)
        .try_fold(0.0f64, |acc, (x, y)| Ok(acc.max(x.max_abs_diff(y)?)))
}

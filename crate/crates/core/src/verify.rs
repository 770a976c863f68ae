//! Named property suite: equivalence laws, gradient checks and dual-run
//! training comparisons, each reporting the largest error it observed.

use rand::Rng;
use serde::Serialize;

use crate::data::{self, Task};
use crate::edgemodel::{
    embed_backward, head_backward, head_forward, patch_embed, soft_cross_entropy, EdgeGeometry, EdgeWeights, Image,
};
use crate::encoder::{
    conjugate_stack, init_blocks, stack_backward, stack_forward, BlockConfig, EncoderBlockWeights, TebVariant,
};
use crate::error::{Error, Result};
use crate::gradcheck::{central_diff_matrix, rel_err};
use crate::permutation::{Permutation, ShuffleKey};
use crate::rngs::{self, random_matrix, random_vector, StreamRng};
use crate::shuffle::{
    authorize, deauthorize, shuffle_feature, shuffle_gradient, train_loopback, unshuffle_output, ShuffleMode,
    TrainConfig,
};
use crate::tensor::{layernorm_rows, layernorm_rows_backward, softmax_rows, softmax_rows_backward, Activation, Matrix};

/// Step used by every finite-difference check.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances for the equivalence properties.
    pub trials: usize,
    /// Random instances for the finite-difference checks.
    pub grad_trials: usize,
    /// Substrings of property names to run; `None` runs everything.
    pub only: Option<Vec<String>>,
    /// Test hook: perturbs every weight conjugation so the conjugation
    /// properties must fail.
    pub corrupt_conjugation: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            grad_trials: 50,
            only: None,
            corrupt_conjugation: false,
        }
    }
}

type Check = fn(&VerifyOptions, &mut StreamRng) -> Result<f64>;

const SUITE: [(&str, f64, Check); 16] = [
    ("tensor.matmul_oracle", 0.0, |o, r| matmul_oracle(r, o.trials)),
    ("tensor.softmax_rows_sum", 1e-12, |o, r| softmax_rows_sum(r, o.trials)),
    ("tensor.gradcheck", 1e-5, |o, r| tensor_gradcheck(r, o.grad_trials)),
    ("permutation.inverse_law", 0.0, |o, r| inverse_law(r, o.trials)),
    ("permutation.conjugation_trace", 1e-12, |o, r| conjugation_trace(r, o.trials)),
    ("encoder.gradcheck", 1e-5, |o, r| encoder_gradcheck(r, o.grad_trials)),
    ("encoder.forward_equivalence", 1e-9, |o, r| forward_equivalence(r, o.trials, o.corrupt_conjugation)),
    ("encoder.weight_gradient_conjugation", 1e-9, |o, r| {
        weight_gradient_conjugation(r, o.trials, o.corrupt_conjugation)
    }),
    ("edgemodel.gradcheck", 1e-5, |o, r| edge_gradcheck(r, o.grad_trials)),
    ("shuffle.round_trip", 0.0, |o, r| shuffle_round_trip(r, o.trials)),
    ("shuffle.authorize_round_trip", 0.0, |o, r| authorize_round_trip(r, o.trials)),
    ("shuffle.cutmix_label_mass", 1e-12, |o, r| cutmix_label_mass(r, o.trials)),
    ("shuffle.row_shuffle_lossless", 1e-10, |o, _| Ok(dual_run(o)?.rs_loss)),
    ("shuffle.rcs_lossless", 1e-10, |o, _| Ok(dual_run(o)?.rcs_loss)),
    ("shuffle.rcs_weight_conjugation", 1e-8, |o, _| Ok(dual_run(o)?.rcs_weights)),
    ("shuffle.edge_parameter_invariance", 1e-12, |o, _| edge_parameter_invariance(o.seed, o.corrupt_conjugation)),
];

pub fn property_names() -> Vec<&'static str> {
    SUITE.iter().map(|(n, _, _)| *n).collect()
}

/// Runs the selected properties. Fails only on infrastructure errors; a
/// violated property is reported with `passed = false`.
pub fn run(opts: &VerifyOptions) -> Result<Summary> {
    let selected: Vec<_> = SUITE
        .iter()
        .filter(|(name, _, _)| match &opts.only {
            None => true,
            Some(pats) => pats.iter().any(|p| name.contains(p.as_str())),
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::config("only", "no properties selected"));
    }
    let mut properties = Vec::with_capacity(selected.len());
    for (name, tol, check) in selected {
        let mut rng = rngs::substream(opts.seed, name);
        let max_error = check(opts, &mut rng)?;
        properties.push(PropertyResult {
            name,
            max_error,
            tolerance: *tol,
            passed: max_error <= *tol,
        });
    }
    Ok(Summary {
        passed: properties.iter().all(|p| p.passed),
        properties,
    })
}

fn conj(blocks: &[EncoderBlockWeights], cfg: &BlockConfig, p: &Permutation, corrupt: bool) -> Result<Vec<EncoderBlockWeights>> {
    let mut out = conjugate_stack(blocks, cfg, p)?;
    if corrupt {
        out[0].w_q.data_mut()[0] += 1e-3;
    }
    Ok(out)
}

/// Left-to-right triple loop, the reference for `matmul`.
fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut acc = 0.0;
        for k in 0..a.cols() {
            acc += a.get(i, k) * b.get(k, j);
        }
        acc
    })
}

pub fn matmul_oracle(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (m, k, n) = (rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9));
        let a = random_matrix(rng, m, k, 2.0);
        let b = random_matrix(rng, k, n, 2.0);
        worst = worst.max(a.matmul(&b)?.max_abs_diff(&naive_matmul(&a, &b))?);
    }
    Ok(worst)
}

pub fn softmax_rows_sum(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random_matrix(rng, r, c, 30.0);
        let s = softmax_rows(&x);
        for i in 0..s.rows() {
            worst = worst.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn weighted_sum(y: &Matrix, g: &Matrix) -> f64 {
    y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

/// Softmax, layer-norm and activation backward rules against finite differences.
pub fn tensor_gradcheck(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(2..=6));
        let x = random_matrix(rng, r, c, 2.0);
        let g = random_matrix(rng, r, c, 1.0);

        let s = softmax_rows(&x);
        let analytic = softmax_rows_backward(&s, &g)?;
        let numeric = central_diff_matrix(&x, FD_STEP, |x| weighted_sum(&softmax_rows(x), &g));
        worst = worst.max(rel_err(&analytic, &numeric));

        let gamma = random_vector(rng, c, 1.5);
        let beta = random_vector(rng, c, 1.0);
        let (_, cache) = layernorm_rows(&x, &gamma, &beta, 1e-5)?;
        let (dx, dgamma, dbeta) = layernorm_rows_backward(&cache, &gamma, &g)?;
        let ln = |x: &Matrix, gm: &[f64], bt: &[f64]| weighted_sum(&layernorm_rows(x, gm, bt, 1e-5).expect("shapes").0, &g);
        worst = worst.max(rel_err(&dx, &central_diff_matrix(&x, FD_STEP, |x| ln(x, &gamma, &beta))));
        let gm = Matrix::row_vector(&gamma)?;
        let num_g = central_diff_matrix(&gm, FD_STEP, |v| ln(&x, v.data(), &beta));
        worst = worst.max(rel_err(&Matrix::row_vector(&dgamma)?, &num_g));
        let bt = Matrix::row_vector(&beta)?;
        let num_b = central_diff_matrix(&bt, FD_STEP, |v| ln(&x, &gamma, v.data()));
        worst = worst.max(rel_err(&Matrix::row_vector(&dbeta)?, &num_b));

        for act in [Activation::Relu, Activation::Tanh] {
            let analytic = act.derivative(&x).hadamard(&g)?;
            let numeric = central_diff_matrix(&x, FD_STEP, |x| weighted_sum(&act.forward(x), &g));
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    Ok(worst)
}

pub fn inverse_law(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=12);
        let p = Permutation::sample(n, rng)?;
        let c = rng.random_range(1..=5);
        let z = random_matrix(rng, n, c, 1.0);
        worst = worst.max(p.inverse().apply_rows(&p.apply_rows(&z)?)?.max_abs_diff(&z)?);
        if !p.compose(&p.inverse())?.is_identity() {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

pub fn conjugation_trace(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=10);
        let p = Permutation::sample(n, rng)?;
        let w = random_matrix(rng, n, n, 1.0);
        let c = p.conjugate_weight(&w)?;
        worst = worst.max((c.trace() - w.trace()).abs());
        worst = worst.max(c.max_abs_diff(&p.to_matrix().matmul(&w)?.matmul_t(&p.to_matrix())?)?);
    }
    Ok(worst)
}

/// A random stack with non-trivial layer-norm affines.
pub fn random_stack(rng: &mut StreamRng, layers: usize, d: usize, variant: TebVariant) -> Result<Vec<EncoderBlockWeights>> {
    let mut blocks = init_blocks(layers, d, variant, rng)?;
    for b in &mut blocks {
        if let Some(n) = &mut b.norms {
            for v in [&mut n.gamma1, &mut n.gamma2] {
                v.iter_mut().for_each(|g| *g += rng.random_range(-0.5..0.5));
            }
            for v in [&mut n.beta1, &mut n.beta2] {
                v.iter_mut().for_each(|g| *g = rng.random_range(-0.5..0.5));
            }
        }
    }
    Ok(blocks)
}

fn random_block_config(rng: &mut StreamRng, column_shuffle: bool) -> (BlockConfig, TebVariant) {
    let variant = if rng.random_bool(0.5) { TebVariant::Full } else { TebVariant::Minimal };
    let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    let cfg = BlockConfig {
        variant,
        activation,
        column_shuffle,
        ..Default::default()
    };
    (cfg, variant)
}

pub fn forward_equivalence(rng: &mut StreamRng, trials: usize, corrupt: bool) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (p, d, layers) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=3));
        let (cfg, variant) = random_block_config(rng, true);
        let blocks = random_stack(rng, layers, d, variant)?;
        let z = random_matrix(rng, p, d, 1.0);
        let key = ShuffleKey::new(p, d, Permutation::sample(d, rng)?, 0)?;
        let p_r = Permutation::sample(p, rng)?;
        let (y, _) = stack_forward(&blocks, &cfg, &z)?;
        let conj_blocks = conj(&blocks, &cfg, key.p_col(), corrupt)?;
        let (y_s, _) = stack_forward(&conj_blocks, &cfg, &shuffle_feature(&z, &p_r, &key)?)?;
        worst = worst.max(y_s.max_abs_diff(&shuffle_feature(&y, &p_r, &key)?)?);
    }
    Ok(worst)
}

/// Plain and shuffled backward passes: weight gradients must be conjugates
/// and the input gradient must be the shuffled plain gradient.
pub fn weight_gradient_conjugation(rng: &mut StreamRng, trials: usize, corrupt: bool) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (p, d, layers) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=3));
        let (cfg, variant) = random_block_config(rng, true);
        let blocks = random_stack(rng, layers, d, variant)?;
        let z = random_matrix(rng, p, d, 1.0);
        let g = random_matrix(rng, p, d, 1.0);
        let key = ShuffleKey::new(p, d, Permutation::sample(d, rng)?, 0)?;
        let p_r = Permutation::sample(p, rng)?;

        let (_, acts) = stack_forward(&blocks, &cfg, &z)?;
        let plain = stack_backward(&blocks, &cfg, &acts, &g)?;
        let conj_blocks = conj(&blocks, &cfg, key.p_col(), corrupt)?;
        let (_, acts_s) = stack_forward(&conj_blocks, &cfg, &shuffle_feature(&z, &p_r, &key)?)?;
        let shuffled = stack_backward(&conj_blocks, &cfg, &acts_s, &shuffle_gradient(&g, &p_r, &key)?)?;

        let expected = conjugate_stack(&plain.blocks, &cfg, key.p_col())?;
        worst = worst.max(crate::encoder::stack_max_abs_diff(&shuffled.blocks, &expected)?);
        worst = worst.max(unshuffle_output(&shuffled.d_z, &p_r, &key)?.max_abs_diff(&plain.d_z)?);
    }
    Ok(worst)
}

/// Finite-difference gradient of `loss` with respect to every parameter slice.
fn numeric_param_grads<W: Clone>(
    w: &W,
    slices: fn(&mut W) -> Vec<&mut [f64]>,
    mut loss: impl FnMut(&W) -> f64,
) -> Vec<Vec<f64>> {
    let mut probe = w.clone();
    let lens: Vec<usize> = slices(&mut probe).iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(lens.len());
    for (k, &len) in lens.iter().enumerate() {
        let mut grad = Vec::with_capacity(len);
        for i in 0..len {
            let orig = slices(&mut probe)[k][i];
            slices(&mut probe)[k][i] = orig + FD_STEP;
            let plus = loss(&probe);
            slices(&mut probe)[k][i] = orig - FD_STEP;
            let minus = loss(&probe);
            slices(&mut probe)[k][i] = orig;
            grad.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.push(grad);
    }
    out
}

/// Max-norm relative error over a whole parameter set. Per-tensor ratios are
/// meaningless for tensors whose exact gradient vanishes (the key bias, whose
/// shift every softmax row ignores).
fn params_rel_err<'a>(analytic: impl IntoIterator<Item = &'a [f64]>, numeric: &[Vec<f64>]) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 1e-8f64);
    for (a, n) in analytic.into_iter().zip(numeric) {
        for (x, y) in a.iter().zip(n) {
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    diff / scale
}

/// Stack backward (all parameters and the input) against finite differences.
pub fn encoder_gradcheck(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (p, layers) = (rng.random_range(2..=5), rng.random_range(1..=2));
        // Multi-head layouts need a width the head count divides.
        let n_heads = if t % 3 == 2 { 2 } else { 1 };
        let d = n_heads * rng.random_range(1..=3) + usize::from(n_heads == 1);
        let (mut cfg, variant) = random_block_config(rng, false);
        cfg.n_heads = n_heads;
        let blocks = random_stack(rng, layers, d, variant)?;
        let z = random_matrix(rng, p, d, 1.0);
        let g = random_matrix(rng, p, d, 1.0);
        let (_, acts) = stack_forward(&blocks, &cfg, &z)?;
        let grads = stack_backward(&blocks, &cfg, &acts, &g)?;

        let f = |bs: &[EncoderBlockWeights], z: &Matrix| weighted_sum(&stack_forward(bs, &cfg, z).expect("shapes").0, &g);
        worst = worst.max(rel_err(&grads.d_z, &central_diff_matrix(&z, FD_STEP, |z| f(&blocks, z))));
        for (i, block_grads) in grads.blocks.iter().enumerate() {
            let numeric = numeric_param_grads(&blocks[i], EncoderBlockWeights::param_slices_mut, |b| {
                let mut bs = blocks.clone();
                bs[i] = b.clone();
                f(&bs, &z)
            });
            worst = worst.max(params_rel_err(block_grads.param_slices().into_iter().map(|(_, a)| a), &numeric));
            if let Some(b) = &block_grads.biases {
                worst = worst.max(b.b_k.iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
    }
    Ok(worst)
}

fn random_image(rng: &mut StreamRng, g: &EdgeGeometry) -> Result<Image> {
    let n = g.channels * g.image_h * g.image_w;
    Image::new(g.channels, g.image_h, g.image_w, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
}

/// Embedding, head and soft cross-entropy against finite differences.
pub fn edge_gradcheck(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let geom = EdgeGeometry {
            channels: rng.random_range(1..=2),
            image_h: 4,
            image_w: 4,
            patch_h: 2,
            patch_w: rng.random_range(1..=2) * 2,
            d: rng.random_range(2..=6),
            n_classes: rng.random_range(2..=4),
            position_embedding: rng.random_bool(0.5),
        };
        let mut w = EdgeWeights::init(&geom, rng)?;
        w.b_head = random_vector(rng, geom.n_classes, 0.5);
        let image = random_image(rng, &geom)?;
        let a = random_matrix(rng, geom.p(), geom.d, 1.0);
        let mut target: Vec<f64> = (0..geom.n_classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = target.iter().sum();
        target.iter_mut().for_each(|t| *t /= total);
        let g_z = random_matrix(rng, geom.p(), geom.d, 1.0);

        // head + loss, gradients for w_head, b_head and a_final
        let head_loss = |w: &EdgeWeights, a: &Matrix| {
            soft_cross_entropy(&head_forward(w, a).expect("shapes"), &target).expect("target").0
        };
        let (_, d_logits) = soft_cross_entropy(&head_forward(&w, &a)?, &target)?;
        let mut grads = w.zeros_like();
        let d_a = head_backward(&w, &a, &d_logits, &mut grads)?;
        worst = worst.max(rel_err(&d_a, &central_diff_matrix(&a, FD_STEP, |a| head_loss(&w, a))));
        // embedding with a linear readout
        let emb = patch_embed(&w, &geom, &image)?;
        embed_backward(&emb, &g_z, &mut grads)?;
        let total_loss = |w: &EdgeWeights| {
            head_loss(w, &a) + weighted_sum(&patch_embed(w, &geom, &image).expect("shapes").z, &g_z)
        };
        let numeric = numeric_param_grads(&w, EdgeWeights::param_slices_mut, total_loss);
        worst = worst.max(params_rel_err(grads.param_slices().into_iter().map(|(_, a)| a), &numeric));
    }
    Ok(worst)
}

pub fn shuffle_round_trip(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (p, d) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let key = ShuffleKey::generate(p, d, rng.random())?;
        let y = random_matrix(rng, p, d, 5.0);
        let p_r = key.row_perm(0, t as u64);
        worst = worst.max(unshuffle_output(&shuffle_feature(&y, &p_r, &key)?, &p_r, &key)?.max_abs_diff(&y)?);
    }
    Ok(worst)
}

pub fn authorize_round_trip(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials.min(20) {
        let d = rng.random_range(2..=8);
        let (cfg, variant) = random_block_config(rng, true);
        let layers = rng.random_range(1..=3);
        let blocks = random_stack(rng, layers, d, variant)?;
        let key = ShuffleKey::generate(2, d, rng.random())?;
        let back = deauthorize(&authorize(&blocks, &cfg, key.p_col())?, &cfg, &key)?;
        worst = worst.max(crate::encoder::stack_max_abs_diff(&back, &blocks)?);
    }
    Ok(worst)
}

pub fn cutmix_label_mass(rng: &mut StreamRng, trials: usize) -> Result<f64> {
    let geom = EdgeGeometry {
        channels: 1,
        image_h: 8,
        image_w: 8,
        patch_h: 4,
        patch_w: 4,
        d: 4,
        n_classes: 4,
        position_embedding: false,
    };
    let batch = data::generate(&geom, Task::Plain, 8, rng.random(), "cutmix")?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        for m in crate::shuffle::cutmix(&batch, 1.0, 4, rng)? {
            worst = worst.max((m.soft_label.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Small training configuration shared by the dual-run properties.
pub fn small_train_config(mode: ShuffleMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        mixup_prob: 0.5,
        lr: 0.05,
        epochs: 2,
        batch_size: 8,
        seed,
        geometry: EdgeGeometry {
            channels: 1,
            image_h: 8,
            image_w: 8,
            patch_h: 4,
            patch_w: 4,
            d: 8,
            n_classes: 4,
            position_embedding: false,
        },
        n_layers: 2,
        n_heads: 1,
        teb_variant: TebVariant::Full,
        activation: Activation::Relu,
    }
}

pub struct DualRun {
    pub rs_loss: f64,
    pub rcs_loss: f64,
    pub rcs_weights: f64,
}

/// Largest per-step loss gap between two runs; infinite if they differ in length.
pub fn max_loss_gap(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dual_run(o: &VerifyOptions) -> Result<DualRun> {
    let base = small_train_config(ShuffleMode::Vanilla, o.seed);
    let data = data::generate(&base.geometry, Task::Plain, 48, o.seed, "data-train")?;
    let key = ShuffleKey::generate(base.geometry.p(), base.geometry.d, o.seed)?;
    let van = train_loopback(&base, &key, &data)?;
    let rs = train_loopback(&small_train_config(ShuffleMode::RowShuffle, o.seed), &key, &data)?;
    let rcs_cfg = small_train_config(ShuffleMode::RowColumnShuffle, o.seed);
    let rcs = train_loopback(&rcs_cfg, &key, &data)?;
    let expected = conj(&van.cloud, &rcs_cfg.block_config(), key.p_col(), o.corrupt_conjugation)?;
    Ok(DualRun {
        rs_loss: max_loss_gap(&van.step_losses(), &rs.step_losses()),
        rcs_loss: max_loss_gap(&van.step_losses(), &rcs.step_losses()),
        rcs_weights: crate::encoder::stack_max_abs_diff(&rcs.cloud, &expected)?,
    })
}

/// Edge weights after one optimiser step with and without shuffling.
pub fn edge_parameter_invariance(seed: u64, corrupt: bool) -> Result<f64> {
    let mut worst = 0.0f64;
    for mode in [ShuffleMode::RowShuffle, ShuffleMode::RowColumnShuffle] {
        let mut cfg = small_train_config(ShuffleMode::Vanilla, seed);
        cfg.epochs = 1;
        let data = data::generate(&cfg.geometry, Task::Plain, cfg.batch_size, seed, "data-train")?;
        let key = ShuffleKey::generate(cfg.geometry.p(), cfg.geometry.d, seed)?;
        let van = train_loopback(&cfg, &key, &data)?;
        cfg.mode = mode;
        let shuffled = if corrupt && mode == ShuffleMode::RowColumnShuffle {
            let (edge, plain) = crate::shuffle::initial_models(&cfg)?;
            let cloud = conj(&plain, &cfg.block_config(), key.p_col(), true)?;
            let server = crate::proto::CloudServer::new(cloud, cfg.block_config(), cfg.lr)?;
            let mut t = crate::shuffle::EdgeTrainer::connect(cfg.clone(), edge, &key, crate::proto::LoopbackTransport::new(server))?;
            t.train_epoch(&data)?;
            t.into_parts().0
        } else {
            train_loopback(&cfg, &key, &data)?.edge
        };
        worst = worst.max(shuffled.max_abs_diff(&van.edge)?);
    }
    Ok(worst)
}

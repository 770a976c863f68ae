//! Input-reconstruction attackers against the features the cloud observes,
//! and reconstruction metrics.
//!
//! The attacker side of this module only ever handles wire frames and, for
//! the white-box attacker, the edge embedding weights. Shuffle keys stay on
//! the [`Victim`] side.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::{self, Task};
use crate::edgemodel::{patch_embed, patchify, unpatchify, EdgeGeometry, EdgeWeights, Image};
use crate::error::{Error, Result};
use crate::permutation::ShuffleKey;
use crate::proto::{decode, encode, Message};
use crate::rngs::{self, StreamRng};
use crate::shuffle::{shuffle_feature, ShuffleMode};
use crate::tensor::{relu, relu_grad, Matrix};

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("mse", (a.len(), 1), (b.len(), 1)));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the inputs match.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Domain(format!("psnr max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Produces exactly the bytes a curious cloud receives in FWD_REQ frames.
pub struct Victim<'a> {
    edge: &'a EdgeWeights,
    geom: &'a EdgeGeometry,
    key: Option<ShuffleKey>,
}

impl<'a> Victim<'a> {
    pub fn new(edge: &'a EdgeWeights, geom: &'a EdgeGeometry, mode: ShuffleMode, key: &ShuffleKey) -> Result<Self> {
        if key.p() != geom.p() || key.d() != geom.d {
            return Err(Error::config("key", "key dimensions do not match the model"));
        }
        let key = match mode {
            ShuffleMode::Vanilla => None,
            ShuffleMode::RowShuffle => Some(ShuffleKey::row_only(key.p(), key.d(), key.row_seed())?),
            ShuffleMode::RowColumnShuffle => Some(key.clone()),
        };
        Ok(Self { edge, geom, key })
    }

    /// One frame per round; round `r` of sample `index` uses a fresh row
    /// permutation.
    pub fn observe(&self, image: &Image, index: u64, rounds: usize) -> Result<Vec<Vec<u8>>> {
        let z = patch_embed(self.edge, self.geom, image)?.z;
        (0..rounds as u64)
            .map(|r| {
                let sent = match &self.key {
                    Some(k) => shuffle_feature(&z, &k.row_perm(r, index), k)?,
                    None => z.clone(),
                };
                Ok(encode(&Message::FwdReq(sent)))
            })
            .collect()
    }
}

/// Recovers the feature matrices from captured frames.
pub fn features_from_frames(frames: &[Vec<u8>]) -> Result<Vec<Matrix>> {
    frames
        .iter()
        .map(|f| match decode(f)?.0 {
            Message::FwdReq(m) => Ok(m),
            other => Err(Error::Protocol {
                code: crate::proto::codes::MALFORMED,
                message: format!("expected FWD_REQ, got {:?}", other.kind()),
            }),
        })
        .collect()
}

fn flatten(features: &[Matrix]) -> Vec<f64> {
    features.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Two-layer decoder `G(x) = relu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl DecoderWeights {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::config("hidden", "decoder dimensions must be positive"));
        }
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w1: rngs::random_matrix(rng, in_dim, hidden, s1),
            b1: vec![0.0; hidden],
            w2: rngs::random_matrix(rng, hidden, out_dim, s2),
            b2: vec![0.0; out_dim],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let a = x.matmul(&self.w1)?.add_row_vector(&self.b1)?;
        relu(&a).matmul(&self.w2)?.add_row_vector(&self.b2)
    }

    /// One SGD step on mean per-sample squared error; returns the per-pixel
    /// MSE before the step.
    fn sgd_step(&mut self, x: &Matrix, target: &Matrix, lr: f64) -> Result<f64> {
        let a = x.matmul(&self.w1)?.add_row_vector(&self.b1)?;
        let r = relu(&a);
        let y = r.matmul(&self.w2)?.add_row_vector(&self.b2)?;
        let diff = y.sub(target)?;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / diff.data().len() as f64;
        let dy = diff.scale(2.0 / x.rows() as f64);
        let dw2 = r.t_matmul(&dy)?;
        let db2 = dy.col_sums();
        let da = dy.matmul_t(&self.w2)?.hadamard(&relu_grad(&a))?;
        let dw1 = x.t_matmul(&da)?;
        let db1 = da.col_sums();
        self.w1.axpy(-lr, &dw1)?;
        self.w2.axpy(-lr, &dw2)?;
        self.b1.iter_mut().zip(&db1).for_each(|(b, g)| *b -= lr * g);
        self.b2.iter_mut().zip(&db2).for_each(|(b, g)| *b -= lr * g);
        Ok(loss)
    }
}

/// An auxiliary pair: the attacker's own image and the frames it produced.
#[derive(Debug, Clone)]
pub struct AuxPair {
    pub image: Image,
    pub frames: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlackboxConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 200,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn design(pairs: &[AuxPair]) -> Result<(Matrix, Matrix)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let first = pairs.first().ok_or_else(|| Error::Domain("auxiliary set is empty".into()))?;
    let in_dim = flatten(&features_from_frames(&first.frames)?).len();
    let out_dim = first.image.data.len();
    for p in pairs {
        let x = flatten(&features_from_frames(&p.frames)?);
        if x.len() != in_dim || p.image.data.len() != out_dim {
            return Err(Error::shape("blackbox design", (x.len(), p.image.data.len()), (in_dim, out_dim)));
        }
        xs.extend(x);
        ys.extend_from_slice(&p.image.data);
    }
    Ok((Matrix::new(pairs.len(), in_dim, xs)?, Matrix::new(pairs.len(), out_dim, ys)?))
}

/// Trains an inversion decoder on auxiliary pairs. Returns the decoder and
/// the per-epoch training MSE.
pub fn train_blackbox(aux: &[AuxPair], cfg: &BlackboxConfig) -> Result<(DecoderWeights, Vec<f64>)> {
    let (x, y) = design(aux)?;
    let mut rng = rngs::substream(cfg.seed, "attack-decoder");
    let mut dec = DecoderWeights::init(x.cols(), cfg.hidden, y.cols(), &mut rng)?;
    let curve = train_decoder(&mut dec, &x, &y, cfg, &mut rng)?;
    Ok((dec, curve))
}

pub fn train_decoder(
    dec: &mut DecoderWeights,
    x: &Matrix,
    y: &Matrix,
    cfg: &BlackboxConfig,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if x.cols() != dec.in_dim() || y.cols() != dec.out_dim() || x.rows() != y.rows() {
        return Err(Error::shape("train_decoder", x.shape(), (dec.in_dim(), dec.out_dim())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx = Matrix::from_fn(chunk.len(), x.cols(), |i, j| x.get(chunk[i], j));
            let by = Matrix::from_fn(chunk.len(), y.cols(), |i, j| y.get(chunk[i], j));
            total += dec.sgd_step(&bx, &by, cfg.lr)? * chunk.len() as f64;
        }
        curve.push(total / x.rows() as f64);
    }
    Ok(curve)
}

/// Decodes one observation into a flattened image estimate.
pub fn blackbox_reconstruct(dec: &DecoderWeights, frames: &[Vec<u8>]) -> Result<Vec<f64>> {
    let x = Matrix::row_vector(&flatten(&features_from_frames(frames)?))?;
    if x.cols() != dec.in_dim() {
        return Err(Error::shape("blackbox_reconstruct", x.shape(), (1, dec.in_dim())));
    }
    Ok(dec.forward(&x)?.into_data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    #[default]
    Naive,
    GreedyRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteboxResult {
    pub image: Image,
    /// Objective at the initial guess followed by one value per iteration.
    pub objective: Vec<f64>,
}

/// Pairs each row of `ours` with a distinct row of `target`, cheapest pairs
/// first. Returns `target` reordered to line up with `ours`.
fn greedy_match(ours: &Matrix, target: &Matrix) -> Matrix {
    let n = ours.rows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let c: f64 = ours.row(i).iter().zip(target.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            pairs.push((c, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut used_i, mut used_j) = (vec![false; n], vec![false; n]);
    let mut assign = vec![0; n];
    for (_, i, j) in pairs {
        if !used_i[i] && !used_j[j] {
            used_i[i] = true;
            used_j[j] = true;
            assign[i] = j;
        }
    }
    Matrix::from_fn(n, target.cols(), |i, c| target.get(assign[i], c))
}

/// Step size `1/L` for the white-box objective over a `p×d` feature, with
/// `L = 2·λmax(W·Wᵀ)/(p·d)` estimated by power iteration.
pub fn whitebox_step_size(edge: &EdgeWeights, p: usize) -> f64 {
    let w = &edge.w_embed;
    let gram = w.matmul_t(w).expect("square gram");
    let mut v = Matrix::filled(gram.rows(), 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..100 {
        let next = gram.matmul(&v).expect("gram times vector");
        let norm = next.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm / v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.scale(1.0 / norm);
    }
    (p * w.cols()) as f64 / (2.0 * lambda.max(1e-12))
}

/// Projected gradient descent on the guess `x` minimising
/// `mean((F₁(x) − observed)²)`, with optional greedy row matching.
pub fn whitebox_invert(
    edge: &EdgeWeights,
    geom: &EdgeGeometry,
    observed: &Matrix,
    init: &Image,
    iters: usize,
    lr: f64,
    matching: Matching,
) -> Result<WhiteboxResult> {
    if observed.shape() != (geom.p(), geom.d) {
        return Err(Error::shape("whitebox_invert", observed.shape(), (geom.p(), geom.d)));
    }
    let n = (geom.p() * geom.d) as f64;
    let eval = |x: &Image| -> Result<(f64, Matrix)> {
        let z = patch_embed(edge, geom, x)?.z;
        let target = match matching {
            Matching::Naive => observed.clone(),
            Matching::GreedyRow => greedy_match(&z, observed),
        };
        let diff = z.sub(&target)?;
        Ok((diff.data().iter().map(|v| v * v).sum::<f64>() / n, diff))
    };
    let mut x = init.clone();
    let mut objective = Vec::with_capacity(iters + 1);
    let (mut obj, mut diff) = eval(&x)?;
    objective.push(obj);
    for _ in 0..iters {
        let d_patches = diff.matmul_t(&edge.w_embed)?.scale(2.0 / n);
        let g = unpatchify(&d_patches, geom)?;
        for (v, gv) in x.data.iter_mut().zip(&g.data) {
            *v = (*v - lr * gv).clamp(0.0, 1.0);
        }
        (obj, diff) = eval(&x)?;
        objective.push(obj);
    }
    debug_assert!(patchify(&x, geom.patch_h, geom.patch_w).is_ok());
    Ok(WhiteboxResult { image: x, objective })
}

fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("nan")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack: &'static str,
    pub mode: ShuffleMode,
    pub e: usize,
    pub seed: u64,
    #[serde(serialize_with = "ser_metric")]
    pub mse: f64,
    #[serde(serialize_with = "ser_metric")]
    pub psnr: f64,
    pub objective_curve: Vec<f64>,
}

/// One paired-attack setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub geometry: EdgeGeometry,
    pub task: Task,
    pub seed: u64,
    pub rounds: usize,
    pub n_aux: usize,
    pub n_target: usize,
    pub blackbox: BlackboxConfig,
    pub whitebox_iters: usize,
    pub matching: Matching,
}

impl AttackConfig {
    /// The desk-scale setting: one-channel 8×8 images, 4×4 patches, d = 32.
    pub fn desk(seed: u64) -> Self {
        Self {
            geometry: EdgeGeometry {
                channels: 1,
                image_h: 8,
                image_w: 8,
                patch_h: 4,
                patch_w: 4,
                d: 32,
                n_classes: 4,
                position_embedding: false,
            },
            task: Task::Plain,
            seed,
            rounds: 1,
            n_aux: 400,
            n_target: 50,
            blackbox: BlackboxConfig {
                seed,
                ..Default::default()
            },
            whitebox_iters: 300,
            matching: Matching::Naive,
        }
    }
}

fn victim_setup(cfg: &AttackConfig) -> Result<(EdgeWeights, ShuffleKey)> {
    let edge = EdgeWeights::init(&cfg.geometry, &mut rngs::substream(cfg.seed, "edge-weights"))?;
    let key = ShuffleKey::generate(cfg.geometry.p(), cfg.geometry.d, cfg.seed)?;
    Ok((edge, key))
}

/// Black-box attack: train on auxiliary data, report held-out reconstruction
/// error on the victim's samples.
pub fn run_blackbox(cfg: &AttackConfig, mode: ShuffleMode) -> Result<AttackReport> {
    let (edge, key) = victim_setup(cfg)?;
    let victim = Victim::new(&edge, &cfg.geometry, mode, &key)?;
    let aux_imgs = data::generate(&cfg.geometry, cfg.task, cfg.n_aux, cfg.seed, "attack-aux")?;
    let tgt_imgs = data::generate(&cfg.geometry, cfg.task, cfg.n_target, cfg.seed, "attack-target")?;
    let aux = aux_imgs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(AuxPair {
                image: s.image.clone(),
                frames: victim.observe(&s.image, i as u64, cfg.rounds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (dec, curve) = train_blackbox(&aux, &cfg.blackbox)?;
    let mut err = 0.0;
    for (i, s) in tgt_imgs.iter().enumerate() {
        let frames = victim.observe(&s.image, (cfg.n_aux + i) as u64, cfg.rounds)?;
        err += mse(&blackbox_reconstruct(&dec, &frames)?, &s.image.data)?;
    }
    let err = err / tgt_imgs.len().max(1) as f64;
    Ok(AttackReport {
        attack: "blackbox",
        mode,
        e: cfg.rounds,
        seed: cfg.seed,
        mse: err,
        psnr: psnr_from_mse(err, 1.0),
        objective_curve: curve,
    })
}

/// White-box attack on the first victim sample, starting from a mid-grey
/// guess. `mse` compares the recovered image with the truth; the curve holds
/// the attacker's objective.
pub fn run_whitebox(cfg: &AttackConfig, mode: ShuffleMode) -> Result<AttackReport> {
    let (edge, key) = victim_setup(cfg)?;
    let victim = Victim::new(&edge, &cfg.geometry, mode, &key)?;
    let target = data::generate(&cfg.geometry, cfg.task, 1, cfg.seed, "attack-target")?.remove(0);
    let observed = features_from_frames(&victim.observe(&target.image, 0, 1)?)?.remove(0);
    let g = &cfg.geometry;
    let init = Image::new(g.channels, g.image_h, g.image_w, vec![0.5; g.channels * g.image_h * g.image_w])?;
    let res = whitebox_invert(&edge, g, &observed, &init, cfg.whitebox_iters, whitebox_step_size(&edge, g.p()), cfg.matching)?;
    let err = mse(&res.image.data, &target.image.data)?;
    Ok(AttackReport {
        attack: "whitebox",
        mode,
        e: 1,
        seed: cfg.seed,
        mse: err,
        psnr: psnr_from_mse(err, 1.0),
        objective_curve: res.objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_closed_forms() {
        let a = vec![0.2, 0.4, 0.6];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((mse(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!((psnr(&a, &b, 1.0).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert!(mse(&a, &b[..2]).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = rngs::substream(4, "attack");
        let a = rngs::random_vector(&mut rng, 97, 1.0);
        let b = rngs::random_vector(&mut rng, 97, 1.0);
        let mut acc = 0.0;
        for i in 0..97 {
            let d = a[i] - b[i];
            acc += d * d;
        }
        assert!((mse(&a, &b).unwrap() - acc / 97.0).abs() < 1e-15);
    }

    #[test]
    fn report_serialises_infinite_psnr() {
        let r = AttackReport {
            attack: "whitebox",
            mode: ShuffleMode::Vanilla,
            e: 1,
            seed: 0,
            mse: 0.0,
            psnr: f64::INFINITY,
            objective_curve: vec![],
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"psnr\":\"inf\""), "{s}");
    }

    #[test]
    fn whitebox_zero_iterations_and_exact_start() {
        let cfg = AttackConfig::desk(1);
        let (edge, _) = victim_setup(&cfg).unwrap();
        let img = data::generate(&cfg.geometry, Task::Plain, 1, 1, "t").unwrap().remove(0).image;
        let observed = patch_embed(&edge, &cfg.geometry, &img).unwrap().z;
        let res = whitebox_invert(&edge, &cfg.geometry, &observed, &img, 0, 0.1, Matching::Naive).unwrap();
        assert_eq!(res.image, img);
        assert_eq!(res.objective, vec![0.0]);
        let res = whitebox_invert(&edge, &cfg.geometry, &observed, &img, 3, 0.1, Matching::GreedyRow).unwrap();
        assert_eq!(res.objective[0], 0.0);
    }

    #[test]
    fn zero_epochs_leaves_decoder_at_init() {
        let mut rng = rngs::substream(0, "t");
        let mut dec = DecoderWeights::init(4, 3, 2, &mut rng).unwrap();
        let before = dec.clone();
        let cfg = BlackboxConfig {
            epochs: 0,
            ..Default::default()
        };
        let curve = train_decoder(&mut dec, &Matrix::zeros(5, 4), &Matrix::zeros(5, 2), &cfg, &mut rng).unwrap();
        assert!(curve.is_empty());
        assert_eq!(dec, before);
        assert!(train_decoder(&mut dec, &Matrix::zeros(5, 3), &Matrix::zeros(5, 2), &cfg, &mut rng).is_err());
    }

    #[test]
    fn greedy_match_undoes_row_permutation() {
        let mut rng = rngs::substream(2, "t");
        let z = rngs::random_matrix(&mut rng, 5, 3, 1.0);
        let p = crate::permutation::Permutation::sample(5, &mut rng).unwrap();
        let shuffled = p.apply_rows(&z).unwrap();
        assert_eq!(greedy_match(&z, &shuffled), z);
    }

    #[test]
    fn frames_decode_to_sent_features() {
        let cfg = AttackConfig::desk(3);
        let (edge, key) = victim_setup(&cfg).unwrap();
        let img = data::generate(&cfg.geometry, Task::Plain, 1, 1, "t").unwrap().remove(0).image;
        let v = Victim::new(&edge, &cfg.geometry, ShuffleMode::Vanilla, &key).unwrap();
        let f = features_from_frames(&v.observe(&img, 0, 2).unwrap()).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0], patch_embed(&edge, &cfg.geometry, &img).unwrap().z);
        assert!(features_from_frames(&[encode(&Message::Step)]).is_err());
    }
}

//! Edge-side layers: patch embedding (F₁) and the mean-pool classification
//! head with softmax cross-entropy (F₃).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A `channels × height × width` image, stored channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width == 0 || data.len() != channels * height * width {
            return Err(Error::Domain(format!(
                "image {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image holds a non-finite value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// Static shape of the edge model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeGeometry {
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d: usize,
    pub n_classes: usize,
    pub position_embedding: bool,
}

impl EdgeGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::config("patch_h", "patch size must be positive"));
        }
        if self.image_h % self.patch_h != 0 || self.image_h == 0 {
            return Err(Error::config("image_h", format!("{} not divisible by patch_h {}", self.image_h, self.patch_h)));
        }
        if self.image_w % self.patch_w != 0 || self.image_w == 0 {
            return Err(Error::config("image_w", format!("{} not divisible by patch_w {}", self.image_w, self.patch_w)));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_h, self.image_w / self.patch_w)
    }

    /// Number of patches.
    pub fn p(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }
}

/// F₁ and F₃ parameters. Gradients reuse this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights {
    /// `patch_dim × d`
    pub w_embed: Matrix,
    pub b_embed: Vec<f64>,
    /// `p × d`, added before any shuffling.
    pub pos_embed: Option<Matrix>,
    /// `d × n_classes`
    pub w_head: Matrix,
    pub b_head: Vec<f64>,
}

impl EdgeWeights {
    pub fn init(geom: &EdgeGeometry, rng: &mut impl Rng) -> Result<Self> {
        geom.validate()?;
        let (pd, d, c) = (geom.patch_dim(), geom.d, geom.n_classes);
        let e = 1.0 / (pd as f64).sqrt();
        let h = 1.0 / (d as f64).sqrt();
        let w_embed = Matrix::from_fn(pd, d, |_, _| rng.random_range(-e..=e));
        let b_embed = (0..d).map(|_| rng.random_range(-e..=e)).collect();
        let pos_embed = geom
            .position_embedding
            .then(|| Matrix::from_fn(geom.p(), d, |_, _| rng.random_range(-h..=h)));
        let w_head = Matrix::from_fn(d, c, |_, _| rng.random_range(-h..=h));
        Ok(Self {
            w_embed,
            b_embed,
            pos_embed,
            w_head,
            b_head: vec![0.0; c],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_embed: Matrix::zeros(self.w_embed.rows(), self.w_embed.cols()),
            b_embed: vec![0.0; self.b_embed.len()],
            pos_embed: self.pos_embed.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            w_head: Matrix::zeros(self.w_head.rows(), self.w_head.cols()),
            b_head: vec![0.0; self.b_head.len()],
        }
    }

    pub fn param_slices(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![
            ("w_embed", self.w_embed.data()),
            ("b_embed", &self.b_embed),
        ];
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed", p.data()));
        }
        out.push(("w_head", self.w_head.data()));
        out.push(("b_head", &self.b_head));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_embed.data_mut(), &mut self.b_embed];
        if let Some(p) = &mut self.pos_embed {
            out.push(p.data_mut());
        }
        out.push(self.w_head.data_mut());
        out.push(&mut self.b_head);
        out
    }

    pub fn axpy(&mut self, c: f64, other: &EdgeWeights) -> Result<()> {
        let theirs = other.param_slices();
        let mine = self.param_slices_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Contract("edge parameter sets differ in layout".into()));
        }
        for (dst, (name, src)) in mine.into_iter().zip(theirs) {
            if dst.len() != src.len() {
                return Err(Error::Contract(format!("edge parameter {name} differs in length")));
            }
            for (a, b) in dst.iter_mut().zip(src) {
                *a += c * b;
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, grads: &EdgeWeights, lr: f64) -> Result<()> {
        self.axpy(-lr, grads)
    }

    pub fn max_abs_diff(&self, other: &EdgeWeights) -> Result<f64> {
        let a = self.param_slices();
        let b = other.param_slices();
        if a.len() != b.len() {
            return Err(Error::Contract("edge parameter sets differ in layout".into()));
        }
        let mut worst = 0.0f64;
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            if x.len() != y.len() {
                return Err(Error::Contract("edge parameter length mismatch".into()));
            }
            for (u, v) in x.iter().zip(y.iter()) {
                worst = worst.max((u - v).abs());
            }
        }
        Ok(worst)
    }
}

/// Splits an image into non-overlapping patches in raster order. Within a
/// patch, values are laid out channel-major, then row, then column.
pub fn patchify(image: &Image, patch_h: usize, patch_w: usize) -> Result<Matrix> {
    if patch_h == 0
        || patch_w == 0
        || image.height % patch_h != 0
        || image.width % patch_w != 0
    {
        return Err(Error::shape(
            "patchify",
            (image.height, image.width),
            (patch_h, patch_w),
        ));
    }
    let (gh, gw) = (image.height / patch_h, image.width / patch_w);
    let dim = image.channels * patch_h * patch_w;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..image.channels {
                for y in 0..patch_h {
                    for x in 0..patch_w {
                        data.push(image.get(c, py * patch_h + y, px * patch_w + x));
                    }
                }
            }
        }
    }
    Matrix::new(gh * gw, dim, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Matrix, geom: &EdgeGeometry) -> Result<Image> {
    if patches.shape() != (geom.p(), geom.patch_dim()) {
        return Err(Error::shape("unpatchify", patches.shape(), (geom.p(), geom.patch_dim())));
    }
    let (_, gw) = geom.grid();
    let mut img = Image::zeros(geom.channels, geom.image_h, geom.image_w);
    for r in 0..patches.rows() {
        let (py, px) = (r / gw, r % gw);
        let mut col = 0;
        for c in 0..geom.channels {
            for y in 0..geom.patch_h {
                for x in 0..geom.patch_w {
                    img.set(c, py * geom.patch_h + y, px * geom.patch_w + x, patches.get(r, col));
                    col += 1;
                }
            }
        }
    }
    Ok(img)
}

/// Output of F₁ plus the flattened patches needed by [`embed_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub z: Matrix,
    pub patches: Matrix,
}

/// `Z = patches·W_embed + b_embed (+ pos_embed)`, a `p×d` feature.
pub fn patch_embed(w: &EdgeWeights, geom: &EdgeGeometry, image: &Image) -> Result<Embedded> {
    if (image.channels, image.height, image.width) != (geom.channels, geom.image_h, geom.image_w) {
        return Err(Error::shape(
            "patch_embed",
            (image.height, image.width),
            (geom.image_h, geom.image_w),
        ));
    }
    let patches = patchify(image, geom.patch_h, geom.patch_w)?;
    let mut z = patches.matmul(&w.w_embed)?.add_row_vector(&w.b_embed)?;
    if let Some(pos) = &w.pos_embed {
        z = z.add(pos)?;
    }
    Ok(Embedded { z, patches })
}

/// Mean-pool over patches, then affine to class logits.
pub fn head_forward(w: &EdgeWeights, a_final: &Matrix) -> Result<Vec<f64>> {
    if a_final.cols() != w.w_head.rows() {
        return Err(Error::shape("head_forward", a_final.shape(), w.w_head.shape()));
    }
    let pooled = Matrix::row_vector(&a_final.mean_rows())?;
    let logits = pooled.matmul(&w.w_head)?.add_row_vector(&w.b_head)?;
    Ok(logits.into_data())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Softmax cross-entropy against a probability vector. Returns `(loss, ∂loss/∂logits)`.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::shape("soft_cross_entropy", (1, logits.len()), (1, target.len())));
    }
    let logp = log_softmax(logits);
    let loss = -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
    let total: f64 = target.iter().sum();
    let grad = logp
        .iter()
        .zip(target)
        .map(|(l, t)| l.exp() * total - t)
        .collect();
    Ok((loss, grad))
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    soft_cross_entropy(logits, &one_hot(label, logits.len()))
}

pub fn one_hot(label: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[label] = 1.0;
    v
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Head gradients written into `grads` (accumulated); returns `∂l/∂a_final`.
pub fn head_backward(
    w: &EdgeWeights,
    a_final: &Matrix,
    d_logits: &[f64],
    grads: &mut EdgeWeights,
) -> Result<Matrix> {
    if d_logits.len() != w.w_head.cols() {
        return Err(Error::shape("head_backward", (1, d_logits.len()), w.w_head.shape()));
    }
    let pooled = Matrix::row_vector(&a_final.mean_rows())?;
    let dl = Matrix::row_vector(d_logits)?;
    grads.w_head.axpy(1.0, &pooled.t_matmul(&dl)?)?;
    for (g, d) in grads.b_head.iter_mut().zip(d_logits) {
        *g += d;
    }
    let d_pooled = dl.matmul_t(&w.w_head)?;
    let p = a_final.rows();
    let inv = 1.0 / p as f64;
    Ok(Matrix::from_fn(p, a_final.cols(), |_, j| d_pooled.get(0, j) * inv))
}

/// Embedding gradients (including the position embedding) accumulated into `grads`.
pub fn embed_backward(embedded: &Embedded, d_z: &Matrix, grads: &mut EdgeWeights) -> Result<()> {
    if d_z.shape() != embedded.z.shape() {
        return Err(Error::shape("embed_backward", d_z.shape(), embedded.z.shape()));
    }
    grads.w_embed.axpy(1.0, &embedded.patches.t_matmul(d_z)?)?;
    for (g, d) in grads.b_embed.iter_mut().zip(d_z.col_sums()) {
        *g += d;
    }
    if let Some(pos) = &mut grads.pos_embed {
        pos.axpy(1.0, d_z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::substream;

    fn geom(h: usize, w: usize, ph: usize, pw: usize, d: usize) -> EdgeGeometry {
        EdgeGeometry {
            channels: 1,
            image_h: h,
            image_w: w,
            patch_h: ph,
            patch_w: pw,
            d,
            n_classes: 3,
            position_embedding: false,
        }
    }

    #[test]
    fn one_pixel_patches() {
        let g = geom(2, 2, 1, 1, 3);
        let w = EdgeWeights::init(&g, &mut substream(1, "e")).unwrap();
        let img = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let e = patch_embed(&w, &g, &img).unwrap();
        assert_eq!(e.z.shape(), (4, 3));
        for r in 0..4 {
            for j in 0..3 {
                let want = img.data[r] * w.w_embed.get(0, j) + w.b_embed[j];
                assert_eq!(e.z.get(r, j), want);
            }
        }
    }

    #[test]
    fn zero_image_zero_bias() {
        let g = geom(4, 4, 2, 2, 3);
        let mut w = EdgeWeights::init(&g, &mut substream(2, "e")).unwrap();
        w.b_embed = vec![0.0; 3];
        let e = patch_embed(&w, &g, &Image::zeros(1, 4, 4)).unwrap();
        assert_eq!(e.z, Matrix::zeros(4, 3));
    }

    #[test]
    fn top_left_patch_matches_index_oracle() {
        let g = EdgeGeometry {
            channels: 2,
            ..geom(8, 8, 4, 4, 5)
        };
        let mut rng = substream(3, "e");
        let w = EdgeWeights::init(&g, &mut rng).unwrap();
        let img = Image::new(2, 8, 8, (0..128).map(|i| i as f64 / 128.0).collect()).unwrap();
        let e = patch_embed(&w, &g, &img).unwrap();
        assert_eq!(e.z.shape(), (4, 5));
        assert_eq!(g.patch_dim(), 32);
        // oracle: explicit (c, y, x) indexing into the flat channel-major buffer
        for j in 0..5 {
            let mut acc = 0.0;
            let mut k = 0;
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        acc += img.data[c * 64 + y * 8 + x] * w.w_embed.get(k, j);
                        k += 1;
                    }
                }
            }
            assert!((e.z.get(0, j) - (acc + w.b_embed[j])).abs() < 1e-14);
        }
        // bottom-right patch starts at pixel (4, 4) of channel 0
        assert_eq!(e.patches.get(3, 0), img.get(0, 4, 4));
        assert_eq!(unpatchify(&e.patches, &g).unwrap(), img);
    }

    #[test]
    fn divisibility_is_checked() {
        let g = geom(6, 6, 4, 4, 3);
        assert!(g.validate().is_err());
        assert!(patchify(&Image::zeros(1, 6, 6), 4, 4).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let (loss, _) = cross_entropy(&[0.3, 0.3, 0.3, 0.3], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let (loss, grad) = cross_entropy(&[60.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.iter().all(|g| g.abs() < 1e-20));
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn head_is_row_permutation_invariant() {
        let g = geom(4, 4, 2, 2, 3);
        let mut rng = substream(4, "e");
        let w = EdgeWeights::init(&g, &mut rng).unwrap();
        let a = crate::rngs::random_matrix(&mut rng, 4, 3, 1.0);
        let p = crate::permutation::Permutation::new(vec![2, 0, 3, 1]).unwrap();
        let l1 = head_forward(&w, &a).unwrap();
        let l2 = head_forward(&w, &p.apply_rows(&a).unwrap()).unwrap();
        for (x, y) in l1.iter().zip(&l2) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(argmax(&l1), argmax(&l2));
    }
}

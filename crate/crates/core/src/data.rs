//! Synthetic datasets and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edgemodel::{patchify, EdgeGeometry, Image, Sample};
use crate::error::{Error, Result};
use crate::rngs::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Class-conditional Gaussian blob position.
    #[default]
    Plain,
    /// Label 1 iff patch mean intensities rise in raster order.
    OrderDependent,
}

const BLOB_CENTERS: [(f64, f64); 4] = [(1.0 / 16.0, 1.0 / 16.0), (7.0 / 16.0, 7.0 / 16.0), (1.0 / 16.0, 7.0 / 16.0), (15.0 / 16.0, 1.0 / 16.0)];
const PIXEL_NOISE: f64 = 0.02;

pub fn check_task(geom: &EdgeGeometry, task: Task) -> Result<()> {
    geom.validate()?;
    match task {
        Task::Plain if !(2..=4).contains(&geom.n_classes) => {
            Err(Error::config("n_classes", "the blob task supports 2 to 4 classes"))
        }
        Task::OrderDependent if geom.n_classes != 2 => {
            Err(Error::config("n_classes", "the order-dependent task has exactly 2 classes"))
        }
        Task::OrderDependent if geom.p() < 2 => Err(Error::config("p", "the order-dependent task needs at least 2 patches")),
        _ => Ok(()),
    }
}

/// `n` samples drawn from the named stream `stream` of `seed`. Labels cycle
/// through the classes so every class is equally represented.
pub fn generate(geom: &EdgeGeometry, task: Task, n: usize, seed: u64, stream: &str) -> Result<Vec<Sample>> {
    check_task(geom, task)?;
    let mut rng = rngs::substream(seed, stream);
    let mut out: Vec<Sample> = (0..n)
        .map(|i| {
            let label = i % geom.n_classes;
            match task {
                Task::Plain => blob_sample(geom, label, &mut rng),
                Task::OrderDependent => order_sample(geom, label, &mut rng),
            }
        })
        .collect::<Result<_>>()?;
    out.shuffle(&mut rng);
    if task == Task::OrderDependent {
        for s in &out {
            self_check_order(geom, s)?;
        }
    }
    Ok(out)
}

/// Train and test sets from disjoint streams of one seed.
pub fn train_test(geom: &EdgeGeometry, task: Task, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((
        generate(geom, task, n_train, seed, "data-train")?,
        generate(geom, task, n_test, seed, "data-test")?,
    ))
}

fn blob_sample(geom: &EdgeGeometry, label: usize, rng: &mut StreamRng) -> Result<Sample> {
    let (h, w) = (geom.image_h as f64, geom.image_w as f64);
    let (fy, fx) = BLOB_CENTERS[label];
    let cy = fy * h + rng.random_range(-0.5..0.5);
    let cx = fx * w + rng.random_range(-0.5..0.5);
    let sigma = h.min(w) / 8.0;
    let mut image = Image::zeros(geom.channels, geom.image_h, geom.image_w);
    for c in 0..geom.channels {
        for y in 0..geom.image_h {
            for x in 0..geom.image_w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp() + rng.random_range(-PIXEL_NOISE..PIXEL_NOISE);
                image.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Sample { image, label })
}

fn order_sample(geom: &EdgeGeometry, label: usize, rng: &mut StreamRng) -> Result<Sample> {
    let p = geom.p();
    let step = 1.0 / p as f64;
    let levels: Vec<f64> = (0..p)
        .map(|k| (k as f64 + 0.5) * step + rng.random_range(-0.2 * step..0.2 * step))
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    if label == 0 {
        while order.windows(2).all(|w| w[0] < w[1]) {
            order.shuffle(rng);
        }
    }
    let (gh, gw) = geom.grid();
    let mut image = Image::zeros(geom.channels, geom.image_h, geom.image_w);
    for (patch, &lvl) in order.iter().enumerate() {
        let (py, px) = (patch / gw, patch % gw);
        debug_assert!(py < gh);
        for c in 0..geom.channels {
            for y in py * geom.patch_h..(py + 1) * geom.patch_h {
                for x in px * geom.patch_w..(px + 1) * geom.patch_w {
                    let v = levels[lvl] + rng.random_range(-0.01..0.01);
                    image.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(Sample { image, label })
}

/// Patch mean intensities in raster order.
pub fn patch_means(geom: &EdgeGeometry, image: &Image) -> Result<Vec<f64>> {
    let patches = patchify(image, geom.patch_h, geom.patch_w)?;
    Ok((0..patches.rows())
        .map(|i| patches.row(i).iter().sum::<f64>() / patches.cols() as f64)
        .collect())
}

pub fn order_label(geom: &EdgeGeometry, image: &Image) -> Result<usize> {
    let m = patch_means(geom, image)?;
    Ok(usize::from(m.windows(2).all(|w| w[0] < w[1])))
}

/// Moves patch `src[i]` to slot `i`.
pub fn reorder_patches(geom: &EdgeGeometry, image: &Image, src: &[usize]) -> Result<Image> {
    let (_, gw) = geom.grid();
    if src.len() != geom.p() {
        return Err(Error::shape("reorder_patches", (src.len(), 1), (geom.p(), 1)));
    }
    let mut out = image.clone();
    for (dst, &s) in src.iter().enumerate() {
        let (dy, dx) = (dst / gw * geom.patch_h, dst % gw * geom.patch_w);
        let (sy, sx) = (s / gw * geom.patch_h, s % gw * geom.patch_w);
        for c in 0..image.channels {
            for y in 0..geom.patch_h {
                for x in 0..geom.patch_w {
                    out.set(c, dy + y, dx + x, image.get(c, sy + y, sx + x));
                }
            }
        }
    }
    Ok(out)
}

fn self_check_order(geom: &EdgeGeometry, s: &Sample) -> Result<()> {
    if order_label(geom, &s.image)? != s.label {
        return Err(Error::Contract("order task label disagrees with patch means".into()));
    }
    let means = patch_means(geom, &s.image)?;
    let mut flip: Vec<usize> = (0..means.len()).collect();
    if s.label == 1 {
        flip.reverse();
    } else {
        flip.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    }
    if order_label(geom, &reorder_patches(geom, &s.image, &flip)?)? == s.label {
        return Err(Error::Contract("reordering patches did not flip the order label".into()));
    }
    Ok(())
}

/// One row per sample: label, then channel-major pixels.
pub fn write_csv(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    for s in samples {
        let mut rec = Vec::with_capacity(s.image.data.len() + 1);
        rec.push(s.label.to_string());
        rec.extend(s.image.data.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>, geom: &EdgeGeometry) -> Result<Vec<Sample>> {
    geom.validate()?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let n_pix = geom.channels * geom.image_h * geom.image_w;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = line + 1;
        if rec.len() != n_pix + 1 {
            return Err(Error::Parse(format!("line {line}: expected {} fields, found {}", n_pix + 1, rec.len())));
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: bad label {:?}", &rec[0])))?;
        if label >= geom.n_classes {
            return Err(Error::Parse(format!("line {line}: label {label} out of range")));
        }
        let data = rec
            .iter()
            .skip(1)
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
                _ => Err(Error::Parse(format!("line {line}: pixel {f:?} is not a number in [0, 1]"))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            image: Image::new(geom.channels, geom.image_h, geom.image_w, data)?,
            label,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

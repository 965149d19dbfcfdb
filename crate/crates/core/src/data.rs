//! Synthetic paired records: a 3-channel histology image, a G-channel
//! high-resolution expression map, an optional block-mean low-resolution map,
//! and the gene panel indices.
//!
//! Every record is rendered from shared latent "tissue" fields (sums of
//! random Gaussian blobs). Histology mixes the fields into colour channels
//! with light texture noise; each gene passes its own weighted field
//! combination through a gene-specific sigmoid before adding independent
//! pixel noise. Histology and expression therefore share spatial content
//! while each carries signal the other lacks.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stsr_tensor::Tensor;
use thiserror::Error;

use crate::container::{ByteReader, ByteWriter, FormatError};
use crate::rng;

pub const DATASET_MAGIC: [u8; 4] = *b"C3DF";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("downsample factor {factor} does not divide {height}x{width}")]
    Indivisible {
        factor: usize,
        height: usize,
        width: usize,
    },
    #[error("tensor error: {0}")]
    Tensor(#[from] stsr_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Generation parameters; recorded in the dataset file so every experiment
/// can be reproduced from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: u32,
    pub height: u32,
    pub width: u32,
    pub genes: u32,
    pub scale: u32,
    pub missing_fraction: f32,
    /// Per-pixel Gaussian noise amplitude added to each gene map.
    pub noise: f32,
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            n_samples: 256,
            height: 40,
            width: 40,
            genes: 4,
            scale: 5,
            missing_fraction: 0.25,
            noise: 0.05,
            seed: 17,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.genes == 0 {
            return Err(DataError::InvalidManifest(
                "n_samples and genes must be positive".into(),
            ));
        }
        if self.scale == 0
            || self.height % self.scale != 0
            || self.width % self.scale != 0
        {
            return Err(DataError::InvalidManifest(format!(
                "scale {} must divide image size {}x{}",
                self.scale, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_fraction) {
            return Err(DataError::InvalidManifest(format!(
                "missing_fraction {} outside [0, 1]",
                self.missing_fraction
            )));
        }
        if self.noise < 0.0 {
            return Err(DataError::InvalidManifest("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// One paired record.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSample {
    pub id: String,
    /// `[3, H, W]`, values in [0, 1].
    pub histology: Tensor,
    /// `[G, H, W]`, values in [0, 1].
    pub hr_st: Tensor,
    /// `[G, H/s, W/s]` when present; equals `downsample(hr_st, s)`.
    pub lr_st: Option<Tensor>,
    pub gene_ids: Vec<u32>,
}

/// Block-mean pooling of each `s x s` patch, the declared HR -> LR relation.
pub fn downsample(hr: &Tensor, s: usize) -> Result<Tensor> {
    let shape = hr.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(DataError::Indivisible {
            factor: s,
            height: h,
            width: w,
        });
    }
    Ok(hr.block_mean_downsample(s)?)
}

const REGION_FIELDS: usize = 3;
const BLOBS_PER_FIELD: usize = 4;
const HISTOLOGY_TEXTURE: f32 = 0.02;

struct DatasetParams {
    hist_mix: Vec<f32>,  // [3 x R]
    hist_base: [f32; 3],
    gene_w: Vec<f32>,    // [G x R]
    gene_bias: Vec<f32>, // [G]
    gene_gain: Vec<f32>, // [G]
}

fn draw_params(rng_: &mut ChaCha8Rng, genes: usize) -> DatasetParams {
    let hist_mix = rng::uniform_vec(rng_, 3 * REGION_FIELDS, -1.0, 1.0);
    let hist_base = [
        rng_.random_range(0.3..0.7),
        rng_.random_range(0.3..0.7),
        rng_.random_range(0.3..0.7),
    ];
    let gene_w = rng::uniform_vec(rng_, genes * REGION_FIELDS, -2.0, 2.0);
    let gene_bias = rng::uniform_vec(rng_, genes, -0.3, 0.3);
    let gene_gain = rng::uniform_vec(rng_, genes, 2.0, 5.0);
    DatasetParams {
        hist_mix,
        hist_base,
        gene_w,
        gene_bias,
        gene_gain,
    }
}

/// Smooth blob field normalized to [0, 1].
fn region_field(rng_: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    let min_dim = h.min(w) as f32;
    for _ in 0..BLOBS_PER_FIELD {
        let cx = rng_.random_range(0.0..w as f32);
        let cy = rng_.random_range(0.0..h as f32);
        let r = rng_.random_range(0.12..0.35) * min_dim;
        let amp = rng_.random_range(0.5..1.0);
        let inv = 1.0 / (2.0 * r * r);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                field[y * w + x] += amp * (-d2 * inv).exp();
            }
        }
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in &field {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let range = (hi - lo).max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - lo) / range);
    field
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates records plus the per-sample `[G, H, W]` latent gene fields
/// (pre-noise, pre-normalization) that produced them.
pub fn generate_with_latents(
    manifest: &DatasetManifest,
) -> Result<(Vec<SpatialSample>, Vec<Tensor>)> {
    manifest.validate()?;
    let (n, h, w, g) = (
        manifest.n_samples as usize,
        manifest.height as usize,
        manifest.width as usize,
        manifest.genes as usize,
    );
    let s = manifest.scale as usize;
    let hw = h * w;

    let mut dataset_rng = rng::stream(manifest.seed, &[0x5354]);
    let params = draw_params(&mut dataset_rng, g);

    let mut histologies: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut raw_genes: Vec<Vec<f32>> = Vec::with_capacity(n); // [G*H*W] per sample
    let mut latents: Vec<Tensor> = Vec::with_capacity(n);

    for i in 0..n {
        let mut srng = rng::stream(manifest.seed, &[0x53_414d, i as u64]);
        let fields: Vec<Vec<f32>> = (0..REGION_FIELDS)
            .map(|_| region_field(&mut srng, h, w))
            .collect();

        let mut hist = vec![0.0f32; 3 * hw];
        let tex = rng::standard_normal_vec(&mut srng, 3 * hw);
        for c in 0..3 {
            for p in 0..hw {
                let mut v = params.hist_base[c];
                for (r, field) in fields.iter().enumerate() {
                    v += params.hist_mix[c * REGION_FIELDS + r] * (field[p] - 0.5) * 0.6;
                }
                v += HISTOLOGY_TEXTURE * tex[c * hw + p];
                hist[c * hw + p] = v.clamp(0.0, 1.0);
            }
        }

        let mut latent = vec![0.0f32; g * hw];
        let mut raw = vec![0.0f32; g * hw];
        let pix_noise = rng::standard_normal_vec(&mut srng, g * hw);
        for gi in 0..g {
            let gain = params.gene_gain[gi];
            let bias = params.gene_bias[gi];
            for p in 0..hw {
                let mut u = 0.0f32;
                for (r, field) in fields.iter().enumerate() {
                    u += params.gene_w[gi * REGION_FIELDS + r] * field[p];
                }
                u = u / REGION_FIELDS as f32 - bias;
                let v = sigmoid(gain * u);
                latent[gi * hw + p] = v;
                raw[gi * hw + p] = v + manifest.noise * pix_noise[gi * hw + p];
            }
        }

        histologies.push(hist);
        raw_genes.push(raw);
        latents.push(Tensor::new(vec![g, h, w], latent)?);
    }

    // Per-gene min-max normalization over the whole dataset.
    let mut lo = vec![f32::INFINITY; g];
    let mut hi = vec![f32::NEG_INFINITY; g];
    for raw in &raw_genes {
        for gi in 0..g {
            for v in &raw[gi * hw..(gi + 1) * hw] {
                lo[gi] = lo[gi].min(*v);
                hi[gi] = hi[gi].max(*v);
            }
        }
    }

    // Which records lose their low-resolution map.
    let missing_count = (manifest.missing_fraction as f64 * n as f64).round() as usize;
    let order = rng::permutation(&mut dataset_rng, n);
    let mut missing = vec![false; n];
    for &idx in order.iter().take(missing_count) {
        missing[idx] = true;
    }

    let mut samples = Vec::with_capacity(n);
    for (i, (hist, raw)) in histologies.into_iter().zip(raw_genes).enumerate() {
        let mut hr = vec![0.0f32; g * hw];
        for gi in 0..g {
            let range = hi[gi] - lo[gi];
            if range < 1e-12 {
                hr[gi * hw..(gi + 1) * hw].iter_mut().for_each(|v| *v = 0.5);
            } else {
                for (o, v) in hr[gi * hw..(gi + 1) * hw].iter_mut().zip(&raw[gi * hw..(gi + 1) * hw]) {
                    *o = (v - lo[gi]) / range;
                }
            }
        }
        let hr_st = Tensor::new(vec![g, h, w], hr)?;
        let lr_st = if missing[i] {
            None
        } else {
            Some(downsample(&hr_st, s)?)
        };
        samples.push(SpatialSample {
            id: format!("s{i:05}"),
            histology: Tensor::new(vec![3, h, w], hist)?,
            hr_st,
            lr_st,
            gene_ids: (0..g as u32).collect(),
        });
    }
    Ok((samples, latents))
}

pub fn generate(manifest: &DatasetManifest) -> Result<Vec<SpatialSample>> {
    Ok(generate_with_latents(manifest)?.0)
}

pub fn dataset_to_bytes(manifest: &DatasetManifest, samples: &[SpatialSample]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(&DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u32(manifest.n_samples);
    w.u32(manifest.height);
    w.u32(manifest.width);
    w.u32(manifest.genes);
    w.u32(manifest.scale);
    w.f32(manifest.missing_fraction);
    w.f32(manifest.noise);
    w.u64(manifest.seed);
    w.u32(samples.len() as u32);
    for s in samples {
        w.string(&s.id);
        w.u32(s.gene_ids.len() as u32);
        for g in &s.gene_ids {
            w.u32(*g);
        }
        w.tensor(&s.histology);
        w.tensor(&s.hr_st);
        match &s.lr_st {
            Some(lr) => {
                w.u8(1);
                w.tensor(lr);
            }
            None => w.u8(0),
        }
    }
    w.into_bytes()
}

pub fn save_dataset(
    manifest: &DatasetManifest,
    samples: &[SpatialSample],
    path: &Path,
) -> Result<()> {
    let bytes = dataset_to_bytes(manifest, samples);
    crate::container::write_file(path, &bytes)?;
    Ok(())
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(DatasetManifest, Vec<SpatialSample>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(&DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let manifest = DatasetManifest {
        n_samples: r.u32()?,
        height: r.u32()?,
        width: r.u32()?,
        genes: r.u32()?,
        scale: r.u32()?,
        missing_fraction: r.f32()?,
        noise: r.f32()?,
        seed: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string()?;
        let n_genes = r.u32()? as usize;
        let mut gene_ids = Vec::with_capacity(n_genes);
        for _ in 0..n_genes {
            gene_ids.push(r.u32()?);
        }
        let histology = r.tensor()?;
        let hr_st = r.tensor()?;
        let lr_st = match r.u8()? {
            0 => None,
            1 => Some(r.tensor()?),
            other => {
                return Err(
                    FormatError::Corrupt(format!("invalid presence flag {other}")).into(),
                )
            }
        };
        samples.push(SpatialSample {
            id,
            histology,
            hr_st,
            lr_st,
            gene_ids,
        });
    }
    Ok((manifest, samples))
}

pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<SpatialSample>)> {
    let bytes = crate::container::read_file(path)?;
    dataset_from_bytes(&bytes)
}

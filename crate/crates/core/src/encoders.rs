//! Modality and content encoders, sphere noise augmentation, and the fused
//! condition generator feeding the denoiser.
//!
//! Each input gets two independent convolutional encoders: a modality head
//! capturing what is characteristic of that input kind across records, and a
//! content head capturing what a specific record shares across kinds. All
//! heads emit unit-norm feature vectors. The condition generator fuses the
//! four feature sets with the upsampled low-resolution map (zeros when
//! absent) and pooled gene embeddings into a channel stack.

use rand_chacha::ChaCha8Rng;
use stsr_tensor::{NodeId, Tape, Tensor, Var};
use thiserror::Error;

use crate::data::SpatialSample;
use crate::rng;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("batch records disagree on shapes or gene panels")]
    InconsistentBatch,
    #[error("tensor error: {0}")]
    Tensor(#[from] stsr_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Feature dimension D of every embedding head.
    pub feature_dim: usize,
    pub conv_widths: [usize; 3],
    pub gene_embed_dim: usize,
    /// Channels of the fused embedding planes in the condition stack.
    pub cond_planes: usize,
    pub gene_vocab: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 64,
            conv_widths: [8, 16, 32],
            gene_embed_dim: 8,
            cond_planes: 8,
            gene_vocab: 64,
            init_seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(EncoderError::InvalidConfig("feature_dim must be >= 2".into()));
        }
        if self.conv_widths.iter().any(|w| *w == 0)
            || self.gene_embed_dim == 0
            || self.cond_planes == 0
            || self.gene_vocab == 0
        {
            return Err(EncoderError::InvalidConfig("all widths must be positive".into()));
        }
        Ok(())
    }
}

fn init_var(rng_: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Var {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = rng::standard_normal_vec(rng_, n)
        .into_iter()
        .map(|v| v * std)
        .collect();
    Var::new(Tensor::new(shape.to_vec(), data).expect("init shape"))
}

/// Three 3x3 conv blocks (relu, 2x mean-pool while the plane stays even),
/// global mean pool, then an affine head onto the unit sphere.
pub struct ConvEncoder {
    convs: Vec<(Var, Var)>,
    head_w: Var,
    head_b: Var,
    in_channels: usize,
}

impl ConvEncoder {
    fn new(rng_: &mut ChaCha8Rng, in_channels: usize, widths: &[usize; 3], feature_dim: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for &cout in widths {
            let w = init_var(rng_, &[cout, cin, 3, 3], (2.0 / (cin * 9) as f32).sqrt());
            let b = Var::new(Tensor::zeros(&[cout]));
            convs.push((w, b));
            cin = cout;
        }
        let head_w = init_var(rng_, &[cin, feature_dim], (2.0 / cin as f32).sqrt());
        let head_b = Var::new(Tensor::zeros(&[feature_dim]));
        ConvEncoder {
            convs,
            head_w,
            head_b,
            in_channels,
        }
    }

    /// `[N, C, H, W] -> [N, D]`, rows unit-norm.
    pub fn forward(&self, tape: &Tape, x: NodeId) -> Result<NodeId> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(EncoderError::Tensor(stsr_tensor::TensorError::BadShape {
                op: "encoder_forward",
                expected: format!("[n, {}, h, w]", self.in_channels),
                actual: shape,
            }));
        }
        let mut h = x;
        for (w, b) in &self.convs {
            let c = tape.conv3x3(h, tape.leaf(w))?;
            let cb = tape.add_chan_bias(c, tape.leaf(b))?;
            h = tape.relu(cb);
            let s = tape.shape(h);
            if s[2] % 2 == 0 && s[3] % 2 == 0 && s[2] > 1 && s[3] > 1 {
                h = tape.avg_pool2(h, 2)?;
            }
        }
        let pooled = tape.mean_spatial(h)?;
        let feat = tape.add_row_bias(tape.matmul(pooled, tape.leaf(&self.head_w))?, tape.leaf(&self.head_b))?;
        Ok(tape.normalize_rows(feat)?)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.w"), w.clone()));
            out.push((format!("{prefix}.conv{i}.b"), b.clone()));
        }
        out.push((format!("{prefix}.head.w"), self.head_w.clone()));
        out.push((format!("{prefix}.head.b"), self.head_b.clone()));
    }
}

/// Raw per-batch embeddings before augmentation/imputation. The expression
/// heads only hold rows for records whose low-resolution map participated.
pub struct RawEmbeddings {
    pub m_h: NodeId,
    pub c_h: NodeId,
    /// `[P, D]` over present records, in `present_idx` order.
    pub m_y: Option<NodeId>,
    pub c_y: Option<NodeId>,
    pub present_idx: Vec<usize>,
    pub n: usize,
}

/// Completed per-batch embeddings: expression rows for missing records are
/// imputed or zero.
pub struct EmbeddingSet {
    pub m_h: NodeId,
    pub c_h: NodeId,
    pub m_y_hat: NodeId,
    pub c_y_hat: NodeId,
    pub present_mask: Vec<bool>,
}

/// Channel layout of the fused conditioning stack.
#[derive(Debug, Clone, Copy)]
pub struct ConditionBundle {
    pub node: NodeId,
    pub channels: usize,
    pub embed_planes: usize,
    pub y_channels: usize,
    pub gene_channels: usize,
}

pub struct EncoderSet {
    pub e_h_m: ConvEncoder,
    pub e_h_c: ConvEncoder,
    pub e_y_m: ConvEncoder,
    pub e_y_c: ConvEncoder,
    pub gene_table: Var,
    fusion_w: Var,
    fusion_b: Var,
    pub cfg: EncoderConfig,
    genes: usize,
}

impl EncoderSet {
    pub fn new(cfg: EncoderConfig, genes: usize) -> Result<Self> {
        cfg.validate()?;
        if genes == 0 || genes > cfg.gene_vocab {
            return Err(EncoderError::InvalidConfig(format!(
                "gene count {genes} outside vocabulary {}",
                cfg.gene_vocab
            )));
        }
        let mut r = rng::stream(cfg.init_seed, &[0x454e43]);
        let e_h_m = ConvEncoder::new(&mut r, 3, &cfg.conv_widths, cfg.feature_dim);
        let e_h_c = ConvEncoder::new(&mut r, 3, &cfg.conv_widths, cfg.feature_dim);
        let e_y_m = ConvEncoder::new(&mut r, genes, &cfg.conv_widths, cfg.feature_dim);
        let e_y_c = ConvEncoder::new(&mut r, genes, &cfg.conv_widths, cfg.feature_dim);
        let gene_table = init_var(&mut r, &[cfg.gene_vocab, cfg.gene_embed_dim], 0.1);
        let fusion_in = 4 * cfg.feature_dim;
        let fusion_w = init_var(&mut r, &[fusion_in, cfg.cond_planes], (2.0 / fusion_in as f32).sqrt());
        let fusion_b = Var::new(Tensor::zeros(&[cfg.cond_planes]));
        Ok(EncoderSet {
            e_h_m,
            e_h_c,
            e_y_m,
            e_y_c,
            gene_table,
            fusion_w,
            fusion_b,
            cfg,
            genes,
        })
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.e_h_m.named_params("enc_h_m", &mut out);
        self.e_h_c.named_params("enc_h_c", &mut out);
        self.e_y_m.named_params("enc_y_m", &mut out);
        self.e_y_c.named_params("enc_y_c", &mut out);
        out.push(("gene_table".into(), self.gene_table.clone()));
        out.push(("fusion.w".into(), self.fusion_w.clone()));
        out.push(("fusion.b".into(), self.fusion_b.clone()));
        out
    }

    fn stack_histology(batch: &[&SpatialSample]) -> Result<Tensor> {
        let shape = batch[0].histology.shape().to_vec();
        let mut data = Vec::with_capacity(batch.len() * batch[0].histology.numel());
        for s in batch {
            if s.histology.shape() != shape.as_slice() {
                return Err(EncoderError::InconsistentBatch);
            }
            data.extend_from_slice(s.histology.data());
        }
        Ok(Tensor::new(
            vec![batch.len(), shape[0], shape[1], shape[2]],
            data,
        )?)
    }

    /// Encodes a batch into the four raw unit-norm feature sets. Expression
    /// heads run only over records with a low-resolution map (and only when
    /// `use_lr` is set); everything stays NaN-free when none are present.
    pub fn encode(&self, tape: &Tape, batch: &[&SpatialSample], use_lr: bool) -> Result<RawEmbeddings> {
        if batch.is_empty() {
            return Err(EncoderError::InconsistentBatch);
        }
        let h_node = tape.constant(Self::stack_histology(batch)?);
        let m_h = self.e_h_m.forward(tape, h_node)?;
        let c_h = self.e_h_c.forward(tape, h_node)?;
        tape.set_tag(m_h, "m_h");
        tape.set_tag(c_h, "c_h");

        let present_idx: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|(_, s)| use_lr && s.lr_st.is_some())
            .map(|(i, _)| i)
            .collect();

        let (m_y, c_y) = if present_idx.is_empty() {
            (None, None)
        } else {
            let lr0 = batch[present_idx[0]].lr_st.as_ref().unwrap();
            let shape = lr0.shape().to_vec();
            let mut data = Vec::with_capacity(present_idx.len() * lr0.numel());
            for &i in &present_idx {
                let lr = batch[i].lr_st.as_ref().unwrap();
                if lr.shape() != shape.as_slice() {
                    return Err(EncoderError::InconsistentBatch);
                }
                data.extend_from_slice(lr.data());
            }
            let y_node = tape.constant(Tensor::new(
                vec![present_idx.len(), shape[0], shape[1], shape[2]],
                data,
            )?);
            let m_y = self.e_y_m.forward(tape, y_node)?;
            let c_y = self.e_y_c.forward(tape, y_node)?;
            tape.set_tag(m_y, "m_y");
            tape.set_tag(c_y, "c_y");
            (Some(m_y), Some(c_y))
        };

        Ok(RawEmbeddings {
            m_h,
            c_h,
            m_y,
            c_y,
            present_idx,
            n: batch.len(),
        })
    }

    /// Pooled gene-panel embedding per record, `[N, gene_embed_dim]`.
    pub fn embed_genes(&self, tape: &Tape, batch: &[&SpatialSample]) -> Result<NodeId> {
        let per = batch[0].gene_ids.len();
        let mut ids = Vec::with_capacity(batch.len() * per);
        for s in batch {
            if s.gene_ids.len() != per {
                return Err(EncoderError::InconsistentBatch);
            }
            ids.extend(s.gene_ids.iter().map(|g| *g as usize));
        }
        let gathered = tape.gather_rows(tape.leaf(&self.gene_table), &ids)?;
        Ok(tape.avg_group_rows(gathered, per)?)
    }

    /// Fuses embeddings, the upsampled low-resolution planes (zeros where
    /// absent), and gene planes into the conditioning stack `[N, C, H, W]`.
    pub fn build_condition(
        &self,
        tape: &Tape,
        set: &EmbeddingSet,
        y_planes: Tensor,
        gene_emb: NodeId,
    ) -> Result<ConditionBundle> {
        let yshape = y_planes.shape().to_vec();
        if yshape.len() != 4 || yshape[0] != set.present_mask.len() {
            return Err(EncoderError::InconsistentBatch);
        }
        let (h, w) = (yshape[2], yshape[3]);
        let cat = tape.concat_cols(&[set.m_h, set.c_h, set.m_y_hat, set.c_y_hat])?;
        let fused = tape.matmul(cat, tape.leaf(&self.fusion_w))?;
        let fused = tape.add_row_bias(fused, tape.leaf(&self.fusion_b))?;
        let fused = tape.relu(fused);
        let planes = tape.broadcast_spatial(fused, h, w)?;
        let y_node = tape.constant(y_planes);
        let gene_planes = tape.broadcast_spatial(gene_emb, h, w)?;
        let node = tape.concat_channels(&[planes, y_node, gene_planes])?;
        tape.set_tag(node, "condition_bundle");
        let y_channels = yshape[1];
        Ok(ConditionBundle {
            node,
            channels: self.cfg.cond_planes + y_channels + self.cfg.gene_embed_dim,
            embed_planes: self.cfg.cond_planes,
            y_channels,
            gene_channels: self.cfg.gene_embed_dim,
        })
    }

    /// Upsampled low-resolution planes for a batch; zero planes where a
    /// record has no map or `use_lr` is off.
    pub fn y_condition_planes(
        &self,
        batch: &[&SpatialSample],
        scale: usize,
        h: usize,
        w: usize,
        use_lr: bool,
    ) -> Result<Tensor> {
        let g = self.genes;
        let mut data = vec![0.0f32; batch.len() * g * h * w];
        for (i, s) in batch.iter().enumerate() {
            if !use_lr {
                continue;
            }
            if let Some(lr) = &s.lr_st {
                let up = lr.upsample_nearest(scale)?;
                debug_assert_eq!(up.shape(), &[g, h, w]);
                data[i * g * h * w..(i + 1) * g * h * w].copy_from_slice(up.data());
            }
        }
        Ok(Tensor::new(vec![batch.len(), g, h, w], data)?)
    }
}

/// Projects a feature vector (or rows of a matrix) onto the unit sphere.
/// A zero vector is an error rather than an arbitrary direction.
pub fn norm_project(tape: &Tape, v: NodeId) -> Result<NodeId> {
    Ok(tape.normalize_rows(v)?)
}

/// Sphere noise augmentation: independent zero-mean Gaussian noise with
/// standard deviation `sigma` per head, then re-projection onto the sphere.
/// `sigma == 0` returns the inputs untouched.
pub fn augment(
    tape: &Tape,
    m_y: NodeId,
    c_y: NodeId,
    sigma: f32,
    rng_: &mut ChaCha8Rng,
) -> Result<(NodeId, NodeId)> {
    if sigma == 0.0 {
        return Ok((m_y, c_y));
    }
    let shape = tape.shape(m_y);
    let n: usize = shape.iter().product();
    let noise_m: Vec<f32> = rng::standard_normal_vec(rng_, n).into_iter().map(|v| v * sigma).collect();
    let noise_c: Vec<f32> = rng::standard_normal_vec(rng_, n).into_iter().map(|v| v * sigma).collect();
    let nm = tape.constant(Tensor::new(shape.clone(), noise_m)?);
    let nc = tape.constant(Tensor::new(shape, noise_c)?);
    let m_hat = tape.normalize_rows(tape.add(m_y, nm)?)?;
    let c_hat = tape.normalize_rows(tape.add(c_y, nc)?)?;
    Ok((m_hat, c_hat))
}

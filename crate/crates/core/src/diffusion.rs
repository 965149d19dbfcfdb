//! Variance-preserving conditional diffusion: forward noising, a small UNet
//! noise predictor, the denoising objective, and guided ancestral sampling.
//!
//! The schedule keeps `a_t^2 + sigma_t^2 = 1` exactly by construction. The
//! sampler walks a strided subset of the timesteps; at each step the noise
//! estimate blends the conditional and unconditional branches with weight
//! `omega` (the unconditional branch sees an all-zero condition stack).

use rand_chacha::ChaCha8Rng;
use stsr_tensor::{NodeId, Tape, Tensor, Var};
use thiserror::Error;

use crate::data::SpatialSample;
use crate::encoders::{EmbeddingSet, EncoderSet};
use crate::rng;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside schedule of {total} steps")]
    BadTimestep { t: usize, total: usize },
    #[error("invalid diffusion config: {0}")]
    InvalidConfig(String),
    #[error("encoder error: {0}")]
    Encoder(#[from] crate::encoders::EncoderError),
    #[error("tensor error: {0}")]
    Tensor(#[from] stsr_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Per-timestep signal scale `a_t` and noise scale `sigma_t`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub a: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl DiffusionSchedule {
    /// Squared-cosine signal schedule with the usual 0.008 offset and a
    /// 0.999 cap on per-step beta.
    pub fn cosine(timesteps: usize) -> Self {
        assert!(timesteps >= 2, "schedule needs at least 2 steps");
        let f = |t: f64| {
            ((t / timesteps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let mut a = Vec::with_capacity(timesteps);
        let mut sigma = Vec::with_capacity(timesteps);
        let mut ab_prev = 1.0f64;
        for t in 0..timesteps {
            let ratio = f((t + 1) as f64) / f(t as f64);
            let beta = (1.0 - ratio).min(0.999);
            let ab = ab_prev * (1.0 - beta);
            a.push(ab.sqrt() as f32);
            sigma.push((1.0 - ab).sqrt() as f32);
            ab_prev = ab;
        }
        DiffusionSchedule { a, sigma }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        (self.a[t] as f64).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceConfig {
    pub omega: f32,
    /// Probability that a record's whole condition stack is zeroed during
    /// training, teaching the unconditional branch.
    pub drop_prob: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega: 1.0,
            drop_prob: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(DiffusionError::InvalidConfig(format!(
                "drop_prob {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// `x_t = a_t x_0 + sigma_t eps`.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if t >= schedule.len() {
        return Err(DiffusionError::BadTimestep {
            t,
            total: schedule.len(),
        });
    }
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::Tensor(
            stsr_tensor::TensorError::ShapeMismatch {
                op: "forward_noise",
                lhs: x0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            },
        ));
    }
    let (a, s) = (schedule.a[t], schedule.sigma[t]);
    let data: Vec<f32> = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + s * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Anything that predicts the injected noise from `x_t` and a condition
/// stack. Implemented by the UNet and by test stubs.
pub trait NoisePredictor {
    fn predict(
        &self,
        tape: &Tape,
        x_t: NodeId,
        cond: NodeId,
        t_idx: &[usize],
        total_steps: usize,
    ) -> Result<NodeId>;
}

/// Sinusoidal timestep features, `[N, dim]`.
pub fn time_embedding(t_idx: &[usize], total_steps: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t_idx.len() * dim);
    for &t in t_idx {
        let pos = t as f64 / total_steps as f64;
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push((pos * freq * std::f64::consts::TAU).sin() as f32);
        }
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push((pos * freq * std::f64::consts::TAU).cos() as f32);
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Tensor::new(vec![t_idx.len(), dim], data).expect("embedding shape")
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub time_dim: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 32,
            time_dim: 32,
            init_seed: 3,
        }
    }
}

struct ConvParam {
    w: Var,
    b: Var,
}

fn conv_param(r: &mut ChaCha8Rng, cout: usize, cin: usize) -> ConvParam {
    let std = (2.0 / (cin * 9) as f32).sqrt();
    let data: Vec<f32> = rng::standard_normal_vec(r, cout * cin * 9)
        .into_iter()
        .map(|v| v * std)
        .collect();
    ConvParam {
        w: Var::new(Tensor::new(vec![cout, cin, 3, 3], data).unwrap()),
        b: Var::new(Tensor::zeros(&[cout])),
    }
}

fn affine_param(r: &mut ChaCha8Rng, input: usize, output: usize) -> (Var, Var) {
    let std = (2.0 / input as f32).sqrt();
    let data: Vec<f32> = rng::standard_normal_vec(r, input * output)
        .into_iter()
        .map(|v| v * std)
        .collect();
    (
        Var::new(Tensor::new(vec![input, output], data).unwrap()),
        Var::new(Tensor::zeros(&[output])),
    )
}

/// Two-level UNet noise predictor. Spatial dims must be divisible by 4.
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    genes: usize,
    cond_channels: usize,
    conv_in: ConvParam,
    enc1: ConvParam,
    down1: ConvParam,
    enc2: ConvParam,
    bott: ConvParam,
    dec2: ConvParam,
    dec1: ConvParam,
    conv_out: ConvParam,
    t_proj: Vec<(Var, Var)>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, genes: usize, cond_channels: usize) -> Result<Self> {
        if cfg.base_width == 0 || cfg.time_dim < 2 {
            return Err(DiffusionError::InvalidConfig(
                "base_width must be positive and time_dim >= 2".into(),
            ));
        }
        let mut r = rng::stream(cfg.init_seed, &[0x444e]);
        let b = cfg.base_width;
        let conv_in = conv_param(&mut r, b, genes + cond_channels);
        let enc1 = conv_param(&mut r, b, b);
        let down1 = conv_param(&mut r, 2 * b, b);
        let enc2 = conv_param(&mut r, 2 * b, 2 * b);
        let bott = conv_param(&mut r, 2 * b, 2 * b);
        let dec2 = conv_param(&mut r, b, 4 * b);
        let dec1 = conv_param(&mut r, b, 2 * b);
        let conv_out = conv_param(&mut r, genes, b);
        let t_proj = vec![
            affine_param(&mut r, cfg.time_dim, b),
            affine_param(&mut r, cfg.time_dim, 2 * b),
            affine_param(&mut r, cfg.time_dim, 2 * b),
            affine_param(&mut r, cfg.time_dim, b),
            affine_param(&mut r, cfg.time_dim, b),
        ];
        Ok(Denoiser {
            cfg,
            genes,
            cond_channels,
            conv_in,
            enc1,
            down1,
            enc2,
            bott,
            dec2,
            dec1,
            conv_out,
            t_proj,
        })
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (name, p) in [
            ("den.conv_in", &self.conv_in),
            ("den.enc1", &self.enc1),
            ("den.down1", &self.down1),
            ("den.enc2", &self.enc2),
            ("den.bott", &self.bott),
            ("den.dec2", &self.dec2),
            ("den.dec1", &self.dec1),
            ("den.conv_out", &self.conv_out),
        ] {
            out.push((format!("{name}.w"), p.w.clone()));
            out.push((format!("{name}.b"), p.b.clone()));
        }
        for (i, (w, b)) in self.t_proj.iter().enumerate() {
            out.push((format!("den.t{i}.w"), w.clone()));
            out.push((format!("den.t{i}.b"), b.clone()));
        }
        out
    }

    fn block(
        &self,
        tape: &Tape,
        x: NodeId,
        conv: &ConvParam,
        temb: Option<(NodeId, &(Var, Var))>,
    ) -> Result<NodeId> {
        let mut h = tape.add_chan_bias(tape.conv3x3(x, tape.leaf(&conv.w))?, tape.leaf(&conv.b))?;
        if let Some((t_node, (w, b))) = temb {
            let proj = tape.add_row_bias(tape.matmul(t_node, tape.leaf(w))?, tape.leaf(b))?;
            h = tape.add_spatial_bias(h, proj)?;
        }
        Ok(tape.relu(h))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(
        &self,
        tape: &Tape,
        x_t: NodeId,
        cond: NodeId,
        t_idx: &[usize],
        total_steps: usize,
    ) -> Result<NodeId> {
        let shape = tape.shape(x_t);
        if shape.len() != 4 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(DiffusionError::InvalidConfig(format!(
                "denoiser needs [n, g, h, w] with h, w divisible by 4, got {shape:?}"
            )));
        }
        let temb = tape.constant(time_embedding(t_idx, total_steps, self.cfg.time_dim));
        let x = tape.concat_channels(&[x_t, cond])?;

        let h0 = self.block(tape, x, &self.conv_in, Some((temb, &self.t_proj[0])))?;
        let skip1 = self.block(tape, h0, &self.enc1, None)?;
        let p1 = tape.avg_pool2(skip1, 2)?;
        let h2 = self.block(tape, p1, &self.down1, Some((temb, &self.t_proj[1])))?;
        let skip2 = self.block(tape, h2, &self.enc2, None)?;
        let p2 = tape.avg_pool2(skip2, 2)?;
        let h3 = self.block(tape, p2, &self.bott, Some((temb, &self.t_proj[2])))?;
        let u2 = tape.upsample_nearest(h3, 2)?;
        let c2 = tape.concat_channels(&[u2, skip2])?;
        let h4 = self.block(tape, c2, &self.dec2, Some((temb, &self.t_proj[3])))?;
        let u1 = tape.upsample_nearest(h4, 2)?;
        let c1 = tape.concat_channels(&[u1, skip1])?;
        let h5 = self.block(tape, c1, &self.dec1, Some((temb, &self.t_proj[4])))?;
        let out = tape.add_chan_bias(
            tape.conv3x3(h5, tape.leaf(&self.conv_out.w))?,
            tape.leaf(&self.conv_out.b),
        )?;
        tape.set_tag(out, "eps_prediction");
        Ok(out)
    }
}

/// Per-record draws for one training step: timestep, injected noise, and
/// whether the condition is dropped. Derived from per-record streams so the
/// objective is invariant to batch ordering.
pub struct StepDraw {
    pub t: usize,
    pub eps: Tensor,
    pub drop: bool,
}

pub fn step_draws(
    seed: u64,
    step: u64,
    batch: &[&SpatialSample],
    schedule: &DiffusionSchedule,
    map_shape: &[usize],
    drop_prob: f32,
) -> Vec<StepDraw> {
    use rand::Rng;
    batch
        .iter()
        .map(|s| {
            let key = rng::mix64(rng::hash_str(&s.id), step);
            let mut r = rng::stream(seed, &[0x4452, key]);
            let t = r.random_range(0..schedule.len());
            let n: usize = map_shape.iter().product();
            let eps = Tensor::new(map_shape.to_vec(), rng::standard_normal_vec(&mut r, n))
                .expect("eps shape");
            let drop = r.random_range(0.0..1.0) < drop_prob;
            StepDraw { t, eps, drop }
        })
        .collect()
}

/// The denoising objective: mean squared error between the injected and the
/// predicted noise, averaged over batch and elements. Records whose `drop`
/// flag is set see an all-zero condition stack.
pub fn mse_step(
    tape: &Tape,
    model: &dyn NoisePredictor,
    x0s: &[&Tensor],
    cond: NodeId,
    draws: &[StepDraw],
    schedule: &DiffusionSchedule,
) -> Result<NodeId> {
    assert_eq!(x0s.len(), draws.len());
    let n = x0s.len();
    let map_shape = x0s[0].shape().to_vec();
    let numel = x0s[0].numel();

    let mut xt_data = Vec::with_capacity(n * numel);
    let mut eps_data = Vec::with_capacity(n * numel);
    let mut t_idx = Vec::with_capacity(n);
    for (x0, d) in x0s.iter().zip(draws) {
        let xt = forward_noise(x0, d.t, &d.eps, schedule)?;
        xt_data.extend_from_slice(xt.data());
        eps_data.extend_from_slice(d.eps.data());
        t_idx.push(d.t);
    }
    let batch_shape = vec![n, map_shape[0], map_shape[1], map_shape[2]];
    let x_t = tape.constant(Tensor::new(batch_shape.clone(), xt_data)?);
    let eps = tape.constant(Tensor::new(batch_shape, eps_data)?);

    let cond_in = if draws.iter().any(|d| d.drop) {
        let cshape = tape.shape(cond);
        let row: usize = cshape[1..].iter().product();
        let mut mask = vec![1.0f32; n * row];
        for (i, d) in draws.iter().enumerate() {
            if d.drop {
                mask[i * row..(i + 1) * row].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        tape.mul(cond, tape.constant(Tensor::new(cshape, mask)?))?
    } else {
        cond
    };

    let pred = model.predict(tape, x_t, cond_in, &t_idx, schedule.len())?;
    let diff = tape.sub(pred, eps)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq);
    tape.set_tag(loss, "mse_loss");
    Ok(loss)
}

/// `omega * eps(x_t, cond) + (1 - omega) * eps(x_t, null)`. The degenerate
/// weights skip the branch they zero out.
#[allow(clippy::too_many_arguments)]
pub fn guided_eps(
    tape: &Tape,
    model: &dyn NoisePredictor,
    x_t: NodeId,
    cond: NodeId,
    null_cond: NodeId,
    omega: f32,
    t_idx: &[usize],
    total_steps: usize,
) -> Result<NodeId> {
    if omega == 1.0 {
        return model.predict(tape, x_t, cond, t_idx, total_steps);
    }
    if omega == 0.0 {
        return model.predict(tape, x_t, null_cond, t_idx, total_steps);
    }
    let c = model.predict(tape, x_t, cond, t_idx, total_steps)?;
    let u = model.predict(tape, x_t, null_cond, t_idx, total_steps)?;
    Ok(tape.add(tape.scale(c, omega), tape.scale(u, 1.0 - omega))?)
}

/// Descending strided timestep subset ending at 0.
pub fn sample_times(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut times: Vec<usize> = (0..steps)
        .map(|i| {
            ((total - 1) as f64 * (1.0 - i as f64 / (steps as f64 - 1.0).max(1.0))).round()
                as usize
        })
        .collect();
    times.dedup();
    times
}

/// Reverse ancestral chain for a batch of records, returning one `[G, H, W]`
/// map per record, clamped to [0, 1].
///
/// The condition stack is built once from the frozen encoders: raw
/// (un-noised) embeddings, zero rows for records without a low-resolution
/// map (or when `use_lr` is off), upsampled map planes or zeros likewise.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch(
    encoders: &EncoderSet,
    model: &dyn NoisePredictor,
    batch: &[&SpatialSample],
    schedule: &DiffusionSchedule,
    steps: usize,
    omega: f32,
    seed: u64,
    use_lr: bool,
) -> Result<Vec<Tensor>> {
    let n = batch.len();
    let g = encoders.genes();
    let hr_shape = batch[0].hr_st.shape().to_vec();
    let (h, w) = (hr_shape[1], hr_shape[2]);
    let scale = if let Some(lr) = batch.iter().find_map(|s| s.lr_st.as_ref()) {
        h / lr.shape()[1]
    } else {
        1
    };

    // Condition stack, built once and reused at every reverse step.
    let cond_tensor = {
        let tape = Tape::new();
        let raw = encoders.encode(&tape, batch, use_lr)?;
        let d = encoders.cfg.feature_dim;
        let zeros = tape.constant(Tensor::zeros(&[n, d]));
        let full = |rows: Option<NodeId>| -> Result<NodeId> {
            Ok(match rows {
                Some(r) if !raw.present_idx.is_empty() => {
                    tape.scatter_rows(r, &raw.present_idx, n)?
                }
                _ => zeros,
            })
        };
        let set = EmbeddingSet {
            m_h: raw.m_h,
            c_h: raw.c_h,
            m_y_hat: full(raw.m_y)?,
            c_y_hat: full(raw.c_y)?,
            present_mask: (0..n).map(|i| raw.present_idx.contains(&i)).collect(),
        };
        let y_planes = encoders.y_condition_planes(batch, scale, h, w, use_lr)?;
        let gene_emb = encoders.embed_genes(&tape, batch)?;
        let bundle = encoders.build_condition(&tape, &set, y_planes, gene_emb)?;
        tape.value(bundle.node)
    };
    let null_tensor = Tensor::zeros(cond_tensor.shape());

    let numel = g * h * w;
    let mut x = vec![0.0f32; n * numel];
    for (i, s) in batch.iter().enumerate() {
        let mut r = rng::stream(seed, &[0x5347, rng::hash_str(&s.id), u64::MAX]);
        let init = rng::standard_normal_vec(&mut r, numel);
        x[i * numel..(i + 1) * numel].copy_from_slice(&init);
    }

    let times = sample_times(schedule.len(), steps);
    for (pos, &t) in times.iter().enumerate() {
        let last = pos + 1 == times.len();
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = if last {
            1.0
        } else {
            schedule.alpha_bar(times[pos + 1])
        };
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;

        let tape = Tape::new();
        let x_node = tape.constant(Tensor::new(vec![n, g, h, w], x.clone())?);
        let cond = tape.constant(cond_tensor.clone());
        let null = tape.constant(null_tensor.clone());
        let eps_hat = guided_eps(
            &tape,
            model,
            x_node,
            cond,
            null,
            omega,
            &vec![t; n],
            schedule.len(),
        )?;
        let eps_v = tape.value(eps_hat);

        let coef = beta / (1.0 - ab_t).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let noise_scale = if last {
            0.0
        } else {
            ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt()
        };
        for (i, s) in batch.iter().enumerate() {
            let z = if last {
                Vec::new()
            } else {
                let mut r = rng::stream(seed, &[0x5347, rng::hash_str(&s.id), pos as u64]);
                rng::standard_normal_vec(&mut r, numel)
            };
            for j in 0..numel {
                let idx = i * numel + j;
                let mean = inv_sqrt_alpha * (x[idx] as f64 - coef * eps_v.data()[idx] as f64);
                let noise = if last { 0.0 } else { noise_scale * z[j] as f64 };
                x[idx] = (mean + noise) as f32;
            }
        }
    }

    Ok((0..n)
        .map(|i| {
            let data: Vec<f32> = x[i * numel..(i + 1) * numel]
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            Tensor::new(vec![g, h, w], data).expect("sample shape")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_identity_and_monotonicity() {
        for t_steps in [10usize, 200, 1000] {
            let s = DiffusionSchedule::cosine(t_steps);
            assert!(s.a[0] > 0.99, "a_0 = {}", s.a[0]);
            assert!(s.sigma[0] < 0.1);
            assert!(s.a[t_steps - 1] < 0.05);
            assert!(s.sigma[t_steps - 1] > 0.99);
            for t in 0..t_steps {
                let id = (s.a[t] as f64).powi(2) + (s.sigma[t] as f64).powi(2);
                assert!((id - 1.0).abs() < 1e-6, "t={t}: {id}");
                if t > 0 {
                    assert!(s.a[t] <= s.a[t - 1]);
                    assert!(s.sigma[t] >= s.sigma[t - 1]);
                }
            }
        }
    }

    #[test]
    fn forward_noise_endpoints() {
        let sched = DiffusionSchedule::cosine(200);
        let mut r = rng::stream(1, &[0]);
        let x0 = Tensor::new(vec![1, 20, 20], rng::uniform_vec(&mut r, 400, 0.0, 1.0)).unwrap();
        let eps = Tensor::new(vec![1, 20, 20], rng::standard_normal_vec(&mut r, 400)).unwrap();

        let x_early = forward_noise(&x0, 0, &eps, &sched).unwrap();
        let rms: f64 = (x_early
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / 400.0)
            .sqrt();
        assert!(rms < 3.0 * sched.sigma[0] as f64, "rms {rms}");

        let x_late = forward_noise(&x0, 199, &eps, &sched).unwrap();
        let n = 400.0;
        let (mx, me) = (
            x_late.data().iter().map(|v| *v as f64).sum::<f64>() / n,
            eps.data().iter().map(|v| *v as f64).sum::<f64>() / n,
        );
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut ve = 0.0;
        for (a, b) in x_late.data().iter().zip(eps.data()) {
            cov += (*a as f64 - mx) * (*b as f64 - me);
            vx += (*a as f64 - mx).powi(2);
            ve += (*b as f64 - me).powi(2);
        }
        assert!(cov / (vx.sqrt() * ve.sqrt()) > 0.99);
    }

    #[test]
    fn forward_noise_of_zero_signal_is_scaled_noise() {
        let sched = DiffusionSchedule::cosine(50);
        let x0 = Tensor::zeros(&[2, 4, 4]);
        let mut r = rng::stream(2, &[0]);
        let eps = Tensor::new(vec![2, 4, 4], rng::standard_normal_vec(&mut r, 32)).unwrap();
        let xt = forward_noise(&x0, 20, &eps, &sched).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert_eq!(*a, sched.sigma[20] * e);
        }
    }

    #[test]
    fn forward_noise_rejects_out_of_range_t() {
        let sched = DiffusionSchedule::cosine(10);
        let x0 = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            forward_noise(&x0, 10, &x0.clone(), &sched),
            Err(DiffusionError::BadTimestep { .. })
        ));
    }

    struct ConstStub {
        value: f32,
    }

    impl NoisePredictor for ConstStub {
        fn predict(
            &self,
            tape: &Tape,
            x_t: NodeId,
            _cond: NodeId,
            _t: &[usize],
            _total: usize,
        ) -> Result<NodeId> {
            let shape = tape.shape(x_t);
            Ok(tape.constant(Tensor::full(&shape, self.value)))
        }
    }

    /// Returns `cond_value` when the condition stack is nonzero, else
    /// `null_value`; used to check the guidance arithmetic.
    struct BranchStub {
        cond_value: f32,
        null_value: f32,
    }

    impl NoisePredictor for BranchStub {
        fn predict(
            &self,
            tape: &Tape,
            x_t: NodeId,
            cond: NodeId,
            _t: &[usize],
            _total: usize,
        ) -> Result<NodeId> {
            let shape = tape.shape(x_t);
            let c = tape.value(cond);
            let nonzero = c.data().iter().any(|v| *v != 0.0);
            let v = if nonzero { self.cond_value } else { self.null_value };
            Ok(tape.constant(Tensor::full(&shape, v)))
        }
    }

    #[test]
    fn zero_predictor_gives_unit_mse() {
        // E||eps||^2 per element is 1 for standard Gaussian noise.
        let sched = DiffusionSchedule::cosine(100);
        let stub = ConstStub { value: 0.0 };
        let mut r = rng::stream(5, &[1]);
        let x0s: Vec<Tensor> = (0..12)
            .map(|_| {
                Tensor::new(vec![1, 32, 32], rng::uniform_vec(&mut r, 1024, 0.0, 1.0)).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = x0s.iter().collect();
        use rand::Rng;
        let draws: Vec<StepDraw> = (0..12)
            .map(|i| {
                let mut rr = rng::stream(6, &[i as u64]);
                StepDraw {
                    t: rr.random_range(0..100),
                    eps: Tensor::new(vec![1, 32, 32], rng::standard_normal_vec(&mut rr, 1024))
                        .unwrap(),
                    drop: false,
                }
            })
            .collect();
        let tape = Tape::new();
        let cond = tape.constant(Tensor::zeros(&[12, 1, 32, 32]));
        let loss = mse_step(&tape, &stub, &refs, cond, &draws, &sched).unwrap();
        let v = tape.scalar(loss).unwrap();
        assert!((v - 1.0).abs() < 0.05, "mse {v}");
    }

    #[test]
    fn oracle_predictor_gives_zero_mse() {
        let sched = DiffusionSchedule::cosine(100);

        struct Oracle {
            eps: Tensor,
        }
        impl NoisePredictor for Oracle {
            fn predict(
                &self,
                tape: &Tape,
                _x: NodeId,
                _c: NodeId,
                _t: &[usize],
                _total: usize,
            ) -> Result<NodeId> {
                Ok(tape.constant(self.eps.clone()))
            }
        }

        let mut r = rng::stream(7, &[2]);
        let x0 = Tensor::new(vec![1, 8, 8], rng::uniform_vec(&mut r, 64, 0.0, 1.0)).unwrap();
        let eps = Tensor::new(vec![1, 8, 8], rng::standard_normal_vec(&mut r, 64)).unwrap();
        let oracle = Oracle {
            eps: Tensor::new(vec![1, 1, 8, 8], eps.data().to_vec()).unwrap(),
        };
        let draws = vec![StepDraw {
            t: 40,
            eps,
            drop: false,
        }];
        let tape = Tape::new();
        let cond = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let loss = mse_step(&tape, &oracle, &[&x0], cond, &draws, &sched).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 0.0);
    }

    #[test]
    fn guidance_matches_affine_formula_on_stub() {
        let stub = BranchStub {
            cond_value: 3.0,
            null_value: 1.0,
        };
        let eval = |omega: f32| -> f32 {
            let tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
            let cond = tape.constant(Tensor::full(&[1, 2, 4, 4], 1.0));
            let null = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
            let e = guided_eps(&tape, &stub, x, cond, null, omega, &[3], 10).unwrap();
            tape.value(e).data()[0]
        };
        assert_eq!(eval(1.0), 3.0); // conditional branch exactly
        assert_eq!(eval(0.0), 1.0); // unconditional branch exactly
        assert_eq!(eval(2.0), 2.0 * 3.0 - 1.0);
        assert_eq!(eval(0.5), 2.0);
        // Affine in omega: the midpoint equals the mean of the endpoints.
        assert!((eval(0.5) - 0.5 * (eval(0.0) + eval(1.0))).abs() < 1e-6);
    }

    #[test]
    fn mse_gradient_matches_finite_differences_on_probe_param() {
        // A one-parameter predictor: eps_hat = theta * x_t.
        struct Probe {
            theta: Var,
        }
        impl NoisePredictor for Probe {
            fn predict(
                &self,
                tape: &Tape,
                x: NodeId,
                _c: NodeId,
                _t: &[usize],
                _total: usize,
            ) -> Result<NodeId> {
                Ok(tape.mul(x, tape.leaf(&self.theta))?)
            }
        }

        let sched = DiffusionSchedule::cosine(50);
        let mut r = rng::stream(8, &[3]);
        let x0 = Tensor::new(vec![1, 4, 4], rng::uniform_vec(&mut r, 16, 0.0, 1.0)).unwrap();
        let eps = Tensor::new(vec![1, 4, 4], rng::standard_normal_vec(&mut r, 16)).unwrap();
        let probe = Probe {
            theta: Var::new(Tensor::new(vec![1], vec![0.3]).unwrap()),
        };
        let draws = vec![StepDraw {
            t: 25,
            eps,
            drop: false,
        }];

        let forward = |p: &Probe| -> f32 {
            let tape = Tape::new();
            let cond = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
            let loss = mse_step(&tape, p, &[&x0], cond, &draws, &sched).unwrap();
            tape.scalar(loss).unwrap()
        };

        let tape = Tape::new();
        let cond = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let loss = mse_step(&tape, &probe, &[&x0], cond, &draws, &sched).unwrap();
        tape.backward(loss).unwrap();
        let analytic = probe.theta.grad_vec()[0];

        let orig = probe.theta.value().data()[0];
        probe.theta.value_mut().data_mut()[0] = orig + 1e-3;
        let up = forward(&probe);
        probe.theta.value_mut().data_mut()[0] = orig - 1e-3;
        let down = forward(&probe);
        probe.theta.value_mut().data_mut()[0] = orig;
        let fd = (up - down) / 2e-3;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(0.2);
        assert!(rel < 1e-3, "{analytic} vs {fd}");
    }

    #[test]
    fn sample_times_are_strided_descending_to_zero() {
        let times = sample_times(200, 40);
        assert_eq!(times[0], 199);
        assert_eq!(*times.last().unwrap(), 0);
        assert!(times.windows(2).all(|w| w[0] > w[1]));
        let one = sample_times(200, 1);
        assert_eq!(one, vec![199]);
    }

    #[test]
    fn denoiser_output_shape_and_determinism() {
        let den = Denoiser::new(
            DenoiserConfig {
                base_width: 4,
                time_dim: 8,
                init_seed: 5,
            },
            2,
            3,
        )
        .unwrap();
        let mut r = rng::stream(9, &[4]);
        let x = Tensor::new(vec![2, 2, 8, 8], rng::standard_normal_vec(&mut r, 2 * 2 * 64)).unwrap();
        let c = Tensor::new(vec![2, 3, 8, 8], rng::standard_normal_vec(&mut r, 2 * 3 * 64)).unwrap();
        let run = || {
            let tape = Tape::new();
            let xn = tape.constant(x.clone());
            let cn = tape.constant(c.clone());
            let out = den.predict(&tape, xn, cn, &[1, 7], 10).unwrap();
            let v = tape.value(out);
            assert_eq!(v.shape(), &[2, 2, 8, 8]);
            assert!(v.is_all_finite());
            v.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}

//! Similarity-weighted imputation of missing expression embeddings.
//!
//! For a record `l` without a low-resolution map, the missing embedding is a
//! convex combination of the present records' (augmented) embeddings,
//! weighted by a softmax over histology-feature cosine similarities at
//! temperature `tau1`, then scaled by an adjusting factor that decays
//! linearly to zero over training. Past the decay horizon the scheme is
//! exactly zero padding, which also covers inference with a batch of one.

use stsr_tensor::{NodeId, Tape, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("imputation with nonzero adjusting factors needs at least one present record; use zero-padding mode instead")]
    NoPresentSamples,
    #[error("present index {idx} out of batch range 0..{n}")]
    BadIndex { idx: usize, n: usize },
    #[error("invalid imputation config: {0}")]
    InvalidConfig(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] stsr_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ImputeError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImputeConfig {
    /// Softmax temperature for the similarity weights (fixed, not learned).
    pub tau1: f32,
    pub alpha0: f32,
    pub beta0: f32,
    /// Step at which both factors reach exactly zero.
    pub decay_steps: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            tau1: 0.1,
            alpha0: 1.0,
            beta0: 1.0,
            decay_steps: 1000,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau1 <= 0.0 {
            return Err(ImputeError::InvalidConfig("tau1 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha0) || !(0.0..=1.0).contains(&self.beta0) {
            return Err(ImputeError::InvalidConfig(
                "alpha0 and beta0 must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// How missing-map records are handled during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeMode {
    /// Similarity-weighted imputation with decaying factors.
    Dynamic,
    /// Incomplete records are excluded from training altogether.
    Dropout,
    /// Missing embeddings are zero vectors from the start.
    ZeroPadding,
    /// Uniform 1/(N-L) weights instead of the softmax.
    ArithmeticAverage,
}

impl ImputeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dynamic" => Some(ImputeMode::Dynamic),
            "dropout" => Some(ImputeMode::Dropout),
            "zero-padding" => Some(ImputeMode::ZeroPadding),
            "arithmetic-average" => Some(ImputeMode::ArithmeticAverage),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ImputeMode::Dynamic => "dynamic",
            ImputeMode::Dropout => "dropout",
            ImputeMode::ZeroPadding => "zero-padding",
            ImputeMode::ArithmeticAverage => "arithmetic-average",
        }
    }
}

/// Linear decay of the adjusting factors: full strength at step 0, exactly
/// zero at `decay_steps` and beyond.
pub fn decay(cfg: &ImputeConfig, step: u64) -> (f32, f32) {
    if cfg.decay_steps == 0 || step >= cfg.decay_steps {
        return (0.0, 0.0);
    }
    let frac = 1.0 - step as f32 / cfg.decay_steps as f32;
    (cfg.alpha0 * frac, cfg.beta0 * frac)
}

/// Counts of similarity-weight computations, for verifying that modes which
/// never weight (zero padding, or fully decayed factors) skip the work.
#[derive(Debug, Default, Clone)]
pub struct ImputeStats {
    pub weight_computations: u64,
}

/// Output of [`impute`]: full `[N, D]` expression embedding matrices with
/// present rows passed through and missing rows filled per the mode.
#[derive(Debug)]
pub struct ImputedEmbeddings {
    pub m_full: NodeId,
    pub c_full: NodeId,
}

/// Builds the full expression embedding matrices.
///
/// `m_y_hat` / `c_y_hat` hold rows for present records only, ordered as
/// `present_idx`. `m_h` / `c_h` are complete `[N, D]` histology embeddings
/// whose similarities drive the weights. Factors `alpha`/`beta` come from
/// [`decay`].
#[allow(clippy::too_many_arguments)]
pub fn impute(
    tape: &Tape,
    m_h: NodeId,
    c_h: NodeId,
    m_y_hat: Option<NodeId>,
    c_y_hat: Option<NodeId>,
    present_idx: &[usize],
    n: usize,
    cfg: &ImputeConfig,
    mode: ImputeMode,
    alpha: f32,
    beta: f32,
    stats: &mut ImputeStats,
) -> Result<ImputedEmbeddings> {
    cfg.validate()?;
    let d = *tape.shape(m_h).last().unwrap();
    if let Some(bad) = present_idx.iter().find(|i| **i >= n) {
        return Err(ImputeError::BadIndex { idx: *bad, n });
    }
    let missing_idx: Vec<usize> = (0..n).filter(|i| !present_idx.contains(i)).collect();

    let zeros_full = || tape.constant(Tensor::zeros(&[n, d]));

    // Present rows scattered into place (zero elsewhere).
    let scatter_present = |rows: Option<NodeId>| -> Result<NodeId> {
        match rows {
            Some(r) if !present_idx.is_empty() => Ok(tape.scatter_rows(r, present_idx, n)?),
            _ => Ok(zeros_full()),
        }
    };

    let base_m = scatter_present(m_y_hat)?;
    let base_c = scatter_present(c_y_hat)?;

    if missing_idx.is_empty() {
        return Ok(ImputedEmbeddings {
            m_full: base_m,
            c_full: base_c,
        });
    }

    let zero_fill = matches!(mode, ImputeMode::ZeroPadding | ImputeMode::Dropout)
        || (alpha == 0.0 && beta == 0.0);
    if zero_fill {
        // Missing rows stay zero; no weights are ever computed.
        return Ok(ImputedEmbeddings {
            m_full: base_m,
            c_full: base_c,
        });
    }

    if present_idx.is_empty() {
        return Err(ImputeError::NoPresentSamples);
    }
    let p = present_idx.len();
    let l = missing_idx.len();

    let mut weighted_fill = |anchor_feats: NodeId, source_rows: NodeId, factor: f32| -> Result<NodeId> {
        if factor == 0.0 {
            return Ok(tape.constant(Tensor::zeros(&[n, d])));
        }
        let anchors = tape.select_rows(anchor_feats, &missing_idx)?; // [L, D]
        let weights = match mode {
            ImputeMode::ArithmeticAverage => {
                tape.constant(Tensor::full(&[l, p], 1.0 / p as f32))
            }
            _ => {
                let present_feats = tape.select_rows(anchor_feats, present_idx)?; // [P, D]
                let sims = tape.matmul(anchors, tape.transpose(present_feats)?)?;
                let scaled = tape.scale(sims, 1.0 / cfg.tau1);
                stats.weight_computations += 1;
                tape.softmax_rows(scaled)?
            }
        };
        let mixed = tape.matmul(weights, source_rows)?; // [L, D]
        let scaled = tape.scale(mixed, factor);
        Ok(tape.scatter_rows(scaled, &missing_idx, n)?)
    };

    let m_fill = weighted_fill(m_h, m_y_hat.expect("present rows exist"), alpha)?;
    let c_fill = weighted_fill(c_h, c_y_hat.expect("present rows exist"), beta)?;

    Ok(ImputedEmbeddings {
        m_full: tape.add(base_m, m_fill)?,
        c_full: tape.add(base_c, c_fill)?,
    })
}

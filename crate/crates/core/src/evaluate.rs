//! Error and correlation metrics over predicted expression maps, report
//! serialization, and plain-text heatmap export.
//!
//! All metrics work on the normalized [0, 1] expression space the model is
//! trained in. Per-gene values are pooled over every spatial position (and
//! every record for dataset-level reports); aggregate values are means of
//! the per-gene values, with undefined correlations (constant truth) kept
//! absent rather than coerced to zero.

use std::path::Path;

use stsr_tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: prediction {pred:?} vs truth {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn gene_planes(t: &Tensor) -> (usize, usize) {
    let shape = t.shape();
    let g = shape[0];
    (g, t.numel() / g)
}

/// Per-gene root-mean-square error over spatial positions of one record.
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<Vec<f32>> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    rmse_pooled(&[pred], &[truth])
}

/// Per-gene RMSE pooled over all records and positions.
pub fn rmse_pooled(preds: &[&Tensor], truths: &[&Tensor]) -> Result<Vec<f32>> {
    assert_eq!(preds.len(), truths.len());
    let (g, hw) = gene_planes(preds[0]);
    let mut acc = vec![0.0f64; g];
    for (p, t) in preds.iter().zip(truths) {
        if p.shape() != t.shape() {
            return Err(EvalError::ShapeMismatch {
                pred: p.shape().to_vec(),
                truth: t.shape().to_vec(),
            });
        }
        for gi in 0..g {
            let pp = &p.data()[gi * hw..(gi + 1) * hw];
            let tt = &t.data()[gi * hw..(gi + 1) * hw];
            acc[gi] += pp
                .iter()
                .zip(tt)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
        }
    }
    let count = (preds.len() * hw) as f64;
    Ok(acc.into_iter().map(|s| (s / count).sqrt() as f32).collect())
}

/// Per-gene Pearson correlation over spatial positions; `None` where the
/// truth map is constant (correlation undefined).
pub fn pcc(pred: &Tensor, truth: &Tensor) -> Result<Vec<Option<f32>>> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    pcc_pooled(&[pred], &[truth])
}

/// Per-gene Pearson correlation pooled over all records and positions.
pub fn pcc_pooled(preds: &[&Tensor], truths: &[&Tensor]) -> Result<Vec<Option<f32>>> {
    assert_eq!(preds.len(), truths.len());
    let (g, hw) = gene_planes(preds[0]);
    let n = (preds.len() * hw) as f64;
    let mut out = Vec::with_capacity(g);
    for gi in 0..g {
        let (mut sp, mut st) = (0.0f64, 0.0f64);
        for (p, t) in preds.iter().zip(truths) {
            if p.shape() != t.shape() {
                return Err(EvalError::ShapeMismatch {
                    pred: p.shape().to_vec(),
                    truth: t.shape().to_vec(),
                });
            }
            sp += p.data()[gi * hw..(gi + 1) * hw]
                .iter()
                .map(|v| *v as f64)
                .sum::<f64>();
            st += t.data()[gi * hw..(gi + 1) * hw]
                .iter()
                .map(|v| *v as f64)
                .sum::<f64>();
        }
        let (mp, mt) = (sp / n, st / n);
        let (mut cov, mut vp, mut vt) = (0.0f64, 0.0f64, 0.0f64);
        for (p, t) in preds.iter().zip(truths) {
            for (a, b) in p.data()[gi * hw..(gi + 1) * hw]
                .iter()
                .zip(&t.data()[gi * hw..(gi + 1) * hw])
            {
                let (da, db) = (*a as f64 - mp, *b as f64 - mt);
                cov += da * db;
                vp += da * da;
                vt += db * db;
            }
        }
        if vt <= 0.0 || vp <= 0.0 {
            out.push(None);
        } else {
            out.push(Some((cov / (vp.sqrt() * vt.sqrt())) as f32));
        }
    }
    Ok(out)
}

/// `G x G` pairwise Pearson correlations of predicted expression across all
/// pooled positions. Genes with zero variance get absent rows/columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneCorrelationMatrix {
    pub genes: usize,
    /// Row-major `G x G`; `None` marks rows/columns of zero-variance genes.
    pub values: Vec<Option<f32>>,
}

impl GeneCorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f32> {
        self.values[i * self.genes + j]
    }

    /// Frobenius distance over entries defined in both matrices.
    pub fn frobenius_distance(&self, other: &GeneCorrelationMatrix) -> f64 {
        assert_eq!(self.genes, other.genes);
        let mut acc = 0.0f64;
        for (a, b) in self.values.iter().zip(&other.values) {
            if let (Some(x), Some(y)) = (a, b) {
                acc += ((x - y) as f64).powi(2);
            }
        }
        acc.sqrt()
    }
}

pub fn gene_correlation(preds: &[&Tensor]) -> Result<GeneCorrelationMatrix> {
    let (g, hw) = gene_planes(preds[0]);
    let total = preds.len() * hw;
    if total < 2 {
        return Err(EvalError::TooFewObservations { need: 2, got: total });
    }
    let n = total as f64;
    let mut means = vec![0.0f64; g];
    for p in preds {
        for gi in 0..g {
            means[gi] += p.data()[gi * hw..(gi + 1) * hw]
                .iter()
                .map(|v| *v as f64)
                .sum::<f64>();
        }
    }
    means.iter_mut().for_each(|m| *m /= n);

    let mut cov = vec![0.0f64; g * g];
    for p in preds {
        for pos in 0..hw {
            for i in 0..g {
                let di = p.data()[i * hw + pos] as f64 - means[i];
                for j in i..g {
                    let dj = p.data()[j * hw + pos] as f64 - means[j];
                    cov[i * g + j] += di * dj;
                }
            }
        }
    }
    let var: Vec<f64> = (0..g).map(|i| cov[i * g + i]).collect();
    let mut values = vec![None; g * g];
    for i in 0..g {
        for j in i..g {
            if var[i] > 0.0 && var[j] > 0.0 {
                let r = (cov[i * g + j] / (var[i].sqrt() * var[j].sqrt())) as f32;
                values[i * g + j] = Some(r);
                values[j * g + i] = Some(r);
            }
        }
    }
    Ok(GeneCorrelationMatrix { genes: g, values })
}

/// Rounds to 6 significant digits, the serialized precision. Applied at
/// construction so reports round-trip exactly.
pub fn round_sig6(v: f32) -> f32 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_gene_rmse: Vec<f32>,
    pub per_gene_pcc: Vec<Option<f32>>,
    pub mean_rmse: f32,
    /// Mean over genes whose correlation is defined; absent when none is.
    pub mean_pcc: Option<f32>,
    pub sample_count: usize,
    pub fingerprint: String,
}

impl MetricReport {
    pub fn new(
        per_gene_rmse: Vec<f32>,
        per_gene_pcc: Vec<Option<f32>>,
        sample_count: usize,
        fingerprint: String,
    ) -> Self {
        let per_gene_rmse: Vec<f32> = per_gene_rmse.into_iter().map(round_sig6).collect();
        let per_gene_pcc: Vec<Option<f32>> =
            per_gene_pcc.into_iter().map(|o| o.map(round_sig6)).collect();
        let mean_rmse = round_sig6(
            per_gene_rmse.iter().map(|v| *v as f64).sum::<f64>() as f32
                / per_gene_rmse.len() as f32,
        );
        let defined: Vec<f32> = per_gene_pcc.iter().flatten().copied().collect();
        let mean_pcc = if defined.is_empty() {
            None
        } else {
            Some(round_sig6(
                defined.iter().map(|v| *v as f64).sum::<f64>() as f32 / defined.len() as f32,
            ))
        };
        MetricReport {
            per_gene_rmse,
            per_gene_pcc,
            mean_rmse,
            mean_pcc,
            sample_count,
            fingerprint,
        }
    }

    pub fn from_predictions(
        preds: &[Tensor],
        truths: &[&Tensor],
        fingerprint: String,
    ) -> Result<Self> {
        let pred_refs: Vec<&Tensor> = preds.iter().collect();
        let r = rmse_pooled(&pred_refs, truths)?;
        let p = pcc_pooled(&pred_refs, truths)?;
        Ok(MetricReport::new(r, p, preds.len(), fingerprint))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn fmt_num(v: f32) -> String {
    format!("{v:.5e}")
}

fn fmt_opt(v: Option<f32>) -> String {
    match v {
        Some(x) => fmt_num(x),
        None => "null".into(),
    }
}

/// Serializes with a deterministic field order; numbers carry 6 significant
/// digits.
pub fn report_to_string(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let rmse_list: Vec<String> = report.per_gene_rmse.iter().map(|v| fmt_num(*v)).collect();
            let pcc_list: Vec<String> = report.per_gene_pcc.iter().map(|v| fmt_opt(*v)).collect();
            format!(
                "{{\"fingerprint\":\"{}\",\"sample_count\":{},\"mean_rmse\":{},\"mean_pcc\":{},\"per_gene_rmse\":[{}],\"per_gene_pcc\":[{}]}}\n",
                report.fingerprint,
                report.sample_count,
                fmt_num(report.mean_rmse),
                fmt_opt(report.mean_pcc),
                rmse_list.join(","),
                pcc_list.join(",")
            )
        }
        ReportFormat::Csv => {
            let mut out = String::from("gene,rmse,pcc\n");
            for (i, (r, p)) in report
                .per_gene_rmse
                .iter()
                .zip(&report.per_gene_pcc)
                .enumerate()
            {
                out.push_str(&format!("{i},{},{}\n", fmt_num(*r), fmt_opt(*p)));
            }
            out.push_str(&format!(
                "mean,{},{}\n",
                fmt_num(report.mean_rmse),
                fmt_opt(report.mean_pcc)
            ));
            out
        }
    }
}

pub fn emit_report(report: &MetricReport, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, report_to_string(report, format))?;
    Ok(())
}

/// Parses a JSON report produced by [`emit_report`].
pub fn load_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| EvalError::Malformed(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| EvalError::Malformed("not an object".into()))?;
    let fingerprint = obj
        .get("fingerprint")
        .and_then(|f| f.as_str())
        .ok_or_else(|| EvalError::Malformed("missing fingerprint".into()))?
        .to_string();
    let sample_count = obj
        .get("sample_count")
        .and_then(|c| c.as_u64())
        .ok_or_else(|| EvalError::Malformed("missing sample_count".into()))? as usize;
    let rmse_arr = obj
        .get("per_gene_rmse")
        .and_then(|a| a.as_array())
        .ok_or_else(|| EvalError::Malformed("missing per_gene_rmse".into()))?;
    let pcc_arr = obj
        .get("per_gene_pcc")
        .and_then(|a| a.as_array())
        .ok_or_else(|| EvalError::Malformed("missing per_gene_pcc".into()))?;
    let per_gene_rmse: Vec<f32> = rmse_arr
        .iter()
        .map(|x| x.as_f64().map(|f| f as f32))
        .collect::<Option<Vec<f32>>>()
        .ok_or_else(|| EvalError::Malformed("non-numeric rmse entry".into()))?;
    let per_gene_pcc: Vec<Option<f32>> = pcc_arr
        .iter()
        .map(|x| {
            if x.is_null() {
                Ok(None)
            } else {
                x.as_f64()
                    .map(|f| Some(f as f32))
                    .ok_or_else(|| EvalError::Malformed("non-numeric pcc entry".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(
        per_gene_rmse,
        per_gene_pcc,
        sample_count,
        fingerprint,
    ))
}

/// Writes one plain-text (P3) heatmap per gene for a predicted map and, when
/// given, its ground truth.
pub fn write_heatmaps(pred: &Tensor, truth: Option<&Tensor>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (g, _) = gene_planes(pred);
    for gi in 0..g {
        write_ppm(pred, gi, &dir.join(format!("gene{gi}_pred.ppm")))?;
        if let Some(t) = truth {
            write_ppm(t, gi, &dir.join(format!("gene{gi}_truth.ppm")))?;
        }
    }
    Ok(())
}

fn write_ppm(map: &Tensor, gene: usize, path: &Path) -> Result<()> {
    let shape = map.shape();
    let (h, w) = (shape[1], shape[2]);
    let plane = &map.data()[gene * h * w..(gene + 1) * h * w];
    let mut out = format!("P3\n{w} {h}\n255\n");
    for v in plane {
        let x = v.clamp(0.0, 1.0);
        let r = (255.0 * x) as u8;
        let g_ = (255.0 * (0.2 + 0.5 * x)) as u8;
        let b = (255.0 * (1.0 - x)) as u8;
        out.push_str(&format!("{r} {g_} {b}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

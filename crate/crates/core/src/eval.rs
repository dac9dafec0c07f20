//! Retrieval metrics and diagnostic analyses: compression-token similarity,
//! stage-wise PCA and per-token loss shape.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::contrastive::EmbeddingSet;
use crate::data::{decode_text, Record, Task};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::{compression_states, forward, BoundParams, ForwardOptions, GradPolicy, ModelConfig, ModelParams};
use crate::pretrain::{batch_loss, pad_batch, record_sequence, LossKind, TokenLoss};
use crate::tensor::{Real, Tape, Tensor};

/// Fraction of queries whose most similar candidate is their gold item.
/// `gold[i]` is the candidate id for query `i`. Ties go to the lowest
/// candidate index.
pub fn precision_at_1<T: Real>(queries: &EmbeddingSet<T>, candidates: &EmbeddingSet<T>, gold: &[String]) -> Result<f64> {
    if gold.len() != queries.len() {
        return Err(Error::invalid("precision_at_1", "one gold id per query required"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("precision_at_1", "no queries"));
    }
    let index: HashMap<&str, usize> = candidates.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut hits = 0;
    for (qi, g) in gold.iter().enumerate() {
        let &gi = index
            .get(g.as_str())
            .ok_or_else(|| Error::Data(format!("gold id `{g}` of query {qi} is not a candidate")))?;
        let q = queries.vectors.row(qi);
        let mut best = (0, f64::NEG_INFINITY);
        for ci in 0..candidates.len() {
            let s: f64 = q
                .iter()
                .zip(candidates.vectors.row(ci))
                .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
                .sum();
            if s > best.1 {
                best = (ci, s);
            }
        }
        hits += (best.0 == gi) as usize;
    }
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub seed: u64,
    /// `(task, P@1, corpus size)`
    pub tasks: Vec<TaskScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    pub p_at_1: f64,
    pub size: usize,
}

/// Mean over payloads of the cosine similarity between every pair of final
/// compression-token states. Symmetric with a unit diagonal.
pub fn token_similarity_matrix<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, payloads: &[Vec<usize>]) -> Result<Tensor<f64>> {
    let k = cfg.n_comp_tokens;
    if payloads.is_empty() {
        return Err(Error::invalid("token_similarity_matrix", "no payloads"));
    }
    let mut acc = vec![0.0f64; k * k];
    for p in payloads {
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, params, GradPolicy::None);
        let states = compression_states(&mut tape, &b, cfg, p)?;
        let states = tape.value(states);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let r: Vec<f64> = states.row(i).iter().map(|v| v.to_f64().unwrap()).collect();
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                r.into_iter().map(|x| x / n).collect()
            })
            .collect();
        for i in 0..k {
            for j in 0..k {
                let c = if i == j { 1.0 } else { rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>() };
                acc[i * k + j] += c.clamp(-1.0, 1.0);
            }
        }
    }
    let n = payloads.len() as f64;
    Tensor::new(vec![k, k], acc.into_iter().map(|v| v / n).collect())
}

/// Plain-text CSV of a square matrix with `row,col,value` lines.
pub fn matrix_csv(m: &Tensor<f64>) -> String {
    let mut out = String::from("row,col,value\n");
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let _ = writeln!(out, "{i},{j},{}", m.at(i, j));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Pca {
    /// `n × n_components` coordinates of the centered points.
    pub projected: Tensor<f64>,
    /// `n_components × dim`, orthonormal rows.
    pub components: Tensor<f64>,
    /// Share of total variance per component, non-increasing.
    pub explained_ratio: Vec<f64>,
    /// All points identical; components are arbitrary and ratios zero.
    pub degenerate: bool,
}

/// PCA through the eigen-decomposition of the sample covariance.
pub fn pca_project(points: &Tensor<f64>, n_components: usize) -> Result<Pca> {
    let (n, dim) = (points.rows(), points.cols());
    if n < n_components + 1 {
        return Err(Error::invalid("pca_project", format!("need at least {} points, got {n}", n_components + 1)));
    }
    if n_components == 0 || n_components > dim {
        return Err(Error::invalid("pca_project", "n_components must be in 1..=dim"));
    }
    let x = DMatrix::from_row_slice(n, dim, points.data());
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let degenerate = total <= 1e-12 * (1.0 + x.abs().max());
    let mut comps = Vec::with_capacity(n_components * dim);
    let mut ratios = Vec::with_capacity(n_components);
    for &i in order.iter().take(n_components) {
        let v = eig.eigenvectors.column(i);
        // Sign convention: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        comps.extend(v.iter().map(|x| x * s));
        ratios.push(if degenerate { 0.0 } else { eig.eigenvalues[i].max(0.0) / total });
    }
    let components = Tensor::new(vec![n_components, dim], comps)?;
    let c = DMatrix::from_row_slice(n_components, dim, components.data());
    let proj = &centered * c.transpose();
    let projected = Tensor::new(vec![n, n_components], proj.transpose().as_slice().to_vec())?;
    Ok(Pca {
        projected,
        components,
        explained_ratio: ratios,
        degenerate,
    })
}

/// Representation a plain causal model gives a payload: the final state of
/// its last token, normalized. Used as the "base" stage for PCA.
pub fn last_token_embedding<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, payload: &[usize]) -> Result<Vec<f64>> {
    if payload.is_empty() {
        return Err(Error::invalid("last_token_embedding", "empty payload"));
    }
    let mut tape = Tape::new();
    let b = BoundParams::bind(&mut tape, params, GradPolicy::None);
    let out = forward(&mut tape, &b, cfg, payload, &AttentionMask::causal(payload.len()), &ForwardOptions::default())?;
    let row: Vec<f64> = tape.value(out.final_hidden).row(payload.len() - 1).iter().map(|v| v.to_f64().unwrap()).collect();
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Ok(row.into_iter().map(|x| x / n).collect())
}

/// Joint PCA over embeddings from several stages. Returns the projection
/// and the stage label of every projected row.
pub fn stage_pca(stages: &[(String, Vec<Vec<f64>>)], n_components: usize) -> Result<(Pca, Vec<String>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (stage, points) in stages {
        for p in points {
            rows.push(p.clone());
            labels.push(stage.clone());
        }
    }
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("stage_pca", "all embeddings must share one width"));
    }
    let points = Tensor::new(vec![rows.len(), dim], rows.concat())?;
    Ok((pca_project(&points, n_components)?, labels))
}

/// `stage,index,pc1,pc2,…` lines.
pub fn pca_csv(pca: &Pca, labels: &[String]) -> String {
    let nc = pca.projected.cols();
    let mut out = String::from("stage,index");
    for c in 1..=nc {
        let _ = write!(out, ",pc{c}");
    }
    out.push('\n');
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (r, label) in labels.iter().enumerate() {
        let idx = seen.entry(label).or_default();
        let _ = write!(out, "{label},{idx}");
        *idx += 1;
        for c in 0..nc {
            let _ = write!(out, ",{}", pca.projected.at(r, c));
        }
        out.push('\n');
    }
    out
}

/// One answer token's loss, labelled for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledLoss {
    pub position: usize,
    pub token: String,
    pub value: f64,
}

/// Per-answer-token loss of `record` under `kind`, plus the scalar loss.
pub fn loss_distribution<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    record: &Record,
    kind: LossKind,
) -> Result<(Vec<LabelledLoss>, f64)> {
    let seq = record_sequence(record, cfg)?;
    let batch = pad_batch(vec![seq])?;
    let out = batch_loss(params, cfg, &batch, kind, false)?;
    let labelled = out
        .per_token
        .iter()
        .map(|t: &TokenLoss| LabelledLoss {
            position: t.position,
            token: decode_text(&[t.token]),
            value: t.value,
        })
        .collect();
    Ok((labelled, out.loss))
}

/// Share of the summed loss carried by the largest `frac` of values
/// (at least one value).
pub fn top_share(values: &[f64], frac: f64) -> f64 {
    let total: f64 = values.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((values.len() as f64 * frac).ceil() as usize).max(1);
    v[..k].iter().sum::<f64>() / total
}

/// `position,token,ce,kl` lines for paired per-token losses.
pub fn loss_pair_csv(ce: &[LabelledLoss], kl: &[LabelledLoss]) -> String {
    let mut out = String::from("position,token,ce,kl\n");
    for (a, b) in ce.iter().zip(kl) {
        let _ = writeln!(out, "{},{},{},{}", a.position, a.token, a.value, b.value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn set(rows: Vec<Vec<f64>>) -> EmbeddingSet<f64> {
        let n = rows.len();
        let ids = (0..n).map(|i| format!("c{i}")).collect();
        EmbeddingSet::new(ids, Tensor::from_rows(&rows)).unwrap()
    }

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn identical_queries_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows = unit_rows(8, 5, &mut rng);
        let c = set(rows.clone());
        let q = set(rows);
        assert_eq!(precision_at_1(&q, &c, &c.ids.clone()).unwrap(), 1.0);
    }

    #[test]
    fn distractor_wins_everywhere() {
        let q = set(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let c = set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let gold = vec!["c1".to_string(), "c1".to_string()];
        assert_eq!(precision_at_1(&q, &c, &gold).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let q = set(vec![vec![1.0, 0.0]]);
        let c = set(vec![vec![0.0, 1.0], vec![0.0, -1.0]]);
        assert_eq!(precision_at_1(&q, &c, &["c0".into()]).unwrap(), 1.0);
        assert_eq!(precision_at_1(&q, &c, &["c1".into()]).unwrap(), 0.0);
    }

    #[test]
    fn missing_gold_is_an_error() {
        let q = set(vec![vec![1.0, 0.0]]);
        assert!(precision_at_1(&q, &q, &["zzz".into()]).is_err());
    }

    #[test]
    fn pca_line_is_one_component() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0, -(i as f64)]).collect();
        let p = pca_project(&Tensor::from_rows(&pts), 2).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-6);
        assert!(!p.degenerate);
    }

    #[test]
    fn pca_mean_maps_to_origin_and_components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = pca_project(&Tensor::from_rows(&pts), 3).unwrap();
        for j in 0..3 {
            let s: f64 = (0..30).map(|i| p.projected.at(i, j)).sum();
            assert!(s.abs() < 1e-9);
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = p.components.row(a).iter().zip(p.components.row(b)).map(|(x, y)| x * y).sum();
                assert!((dot - (a == b) as u8 as f64).abs() < 1e-6);
            }
        }
        assert!(p.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn pca_isotropic_ratios_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> =
            (0..5000).map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]).collect();
        let p = pca_project(&Tensor::from_rows(&pts), 2).unwrap();
        let (a, b) = (p.explained_ratio[0], p.explained_ratio[1]);
        assert!((a - b).abs() / a < 0.1, "{a} {b}");
    }

    #[test]
    fn pca_flags_identical_points() {
        let pts = vec![vec![1.0, 2.0]; 5];
        let p = pca_project(&Tensor::from_rows(&pts), 1).unwrap();
        assert!(p.degenerate);
        assert!(pca_project(&Tensor::from_rows(&pts[..1]), 1).is_err());
    }

    #[test]
    fn top_share_examples() {
        assert_eq!(top_share(&[1.0; 10], 0.1), 0.1);
        assert_eq!(top_share(&[9.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 0.1), 0.9);
        assert_eq!(top_share(&[], 0.1), 0.0);
    }
}

//! Robustness and quality metrics over frozen models.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::log_likelihood;
use crate::error::{ensure_dims, Error, Result};
use crate::models::{row_matrix, Model};
use crate::objectives::{evaluate, sample_eps, ObjectiveKind, ObjectiveSpec};

const CHUNK: usize = 256;

/// Noise standard deviations used by the denoising evaluation by default.
pub const DEFAULT_NOISE_SCALES: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

/// `-log p(x_target | z*)` with `z*` the mean chain of `x_star`.
pub fn neg_target_loglik(model: &Model, x_target: &[f64], x_star: &[f64]) -> Result<f64> {
    ensure_dims("target", x_target.len(), model.config.data_dim)?;
    let chain = model.mean_chain(x_star)?;
    let samples: Vec<Vec<f64>> = chain.into_iter().map(|g| g.mean).collect();
    let lp = model.likelihood_params(&samples)?;
    Ok(-log_likelihood(&lp, x_target)?)
}

/// `||reconstruct(x_a) - x_b||_2`.
pub fn recon_l2(model: &Model, x_a: &[f64], x_b: &[f64]) -> Result<f64> {
    ensure_dims("recon_l2", x_a.len(), x_b.len())?;
    let r = model.reconstruct(x_a)?;
    ensure_dims("recon_l2", r.len(), x_b.len())?;
    Ok(r.iter().zip(x_b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges shared by every scale.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDensity {
    pub scale: f64,
    pub mean: f64,
    pub values: Vec<f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub seed: u64,
    pub scales: Vec<ScaleDensity>,
}

/// Per-row `log p(x | z)` with one chain sample drawn from the encoding of
/// `noisy`.
fn noisy_loglik(model: &Model, clean: &Array2<f64>, noisy: &Array2<f64>, eps: &[Array2<f64>]) -> Result<Vec<f64>> {
    let mut g = model.graph(false, false);
    let xn = g.tape.constant(noisy.clone());
    let chain = model.chain_vars(&mut g, xn, Some(eps))?;
    let samples: Vec<_> = chain.iter().map(|l| l.sample).collect();
    let xc = g.tape.constant(clean.clone());
    let ll = model.log_likelihood_rows(&mut g, xc, &samples)?;
    Ok(g.tape.value(ll).iter().copied().collect())
}

/// `log p(x | z)` with `z ~ q(z | x + e)`, `e ~ N(0, scale^2 I)` drawn fresh
/// per datapoint, for each scale. Histograms share edges across scales.
pub fn denoise_density(
    model: &Model,
    data: &Array2<f64>,
    noise_scales: &[f64],
    seed: u64,
    bins: usize,
) -> Result<DenoiseReport> {
    if noise_scales.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::arg("noise scales must be >= 0"));
    }
    if bins == 0 {
        return Err(Error::arg("histogram needs at least one bin"));
    }
    ensure_dims("data width", data.ncols(), model.config.data_dim)?;
    let n = data.nrows();
    let mut per_scale = Vec::with_capacity(noise_scales.len());
    for (k, &scale) in noise_scales.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut values = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let clean = data.slice(s![start..end, ..]).to_owned();
            let noise = Array2::from_shape_simple_fn(clean.dim(), || rng.sample::<f64, _>(StandardNormal));
            let noisy = &clean + &(noise * scale);
            let eps = sample_eps(&mut rng, end - start, &model.config.z_dims);
            values.extend(noisy_loglik(model, &clean, &noisy, &eps)?);
        }
        per_scale.push(values);
    }
    let lo = per_scale.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = per_scale.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let scales = noise_scales
        .iter()
        .zip(per_scale)
        .map(|(&scale, values)| {
            let mut counts = vec![0; bins];
            for v in &values {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
            ScaleDensity {
                scale,
                mean,
                values,
                histogram: Histogram {
                    edges: edges.clone(),
                    counts,
                },
            }
        })
        .collect();
    Ok(DenoiseReport { seed, scales })
}

/// The model's hierarchical ELBO with `beta = 1` and no free bits, averaged
/// over `data` with one seeded sample per datapoint.
pub fn elbo_unpenalized(model: &Model, data: &Array2<f64>, seed: u64) -> Result<f64> {
    let spec = ObjectiveSpec::new(ObjectiveKind::Seatbelt, 1.0, 0.0);
    let n = data.nrows();
    if n == 0 {
        return Err(Error::arg("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let batch = data.slice(s![start..end, ..]).to_owned();
        let eps = sample_eps(&mut rng, end - start, &model.config.z_dims);
        total += evaluate(model, &spec, &batch, &eps)?.total * (end - start) as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub encoder_norm_a: f64,
    pub encoder_norm_b: f64,
    pub decoder_norm_a: f64,
    pub decoder_norm_b: f64,
    /// `100 (|w_b| - |w_a|) / |w_a|` over inference-network parameters.
    pub encoder_change_pct: f64,
    pub decoder_change_pct: f64,
}

fn side_norms(model: &Model) -> (f64, f64) {
    let (mut enc, mut dec) = (0.0, 0.0);
    for (name, a, trainable) in model.params.iter() {
        if !trainable {
            continue;
        }
        let sq: f64 = a.iter().map(|v| v * v).sum();
        if Model::is_encoder_param(name) {
            enc += sq;
        } else {
            dec += sq;
        }
    }
    (enc.sqrt(), dec.sqrt())
}

/// Relative change of the trainable weight norms from `a` to `b`, split into
/// inference-side and generative-side networks.
pub fn weight_l2_report(a: &Model, b: &Model) -> Result<WeightReport> {
    if a.params.names() != b.params.names() {
        return Err(Error::arg("models have different parameter layouts"));
    }
    let (ea, da) = side_norms(a);
    let (eb, db) = side_norms(b);
    Ok(WeightReport {
        encoder_norm_a: ea,
        encoder_norm_b: eb,
        decoder_norm_a: da,
        decoder_norm_b: db,
        encoder_change_pct: 100.0 * (eb - ea) / ea,
        decoder_change_pct: 100.0 * (db - da) / da,
    })
}

/// One attack cell's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_id: String,
    pub beta: f64,
    #[serde(rename = "L")]
    pub layers: usize,
    /// Layer widths joined with `-`.
    pub z_dims: String,
    pub lambda: f64,
    pub pair: usize,
    pub delta: f64,
    pub neg_loglik: f64,
    pub l2_adv: f64,
    pub l2_clean: f64,
    pub seed: u64,
}

pub fn format_z_dims(z: &[usize]) -> String {
    z.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Linear-interpolation percentile of an unsorted sample, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let (_, &mut a, upper) = v.select_nth_unstable_by(lo, |x, y| x.total_cmp(y));
    let b = if hi == lo {
        a
    } else {
        upper.iter().copied().fold(f64::INFINITY, f64::min)
    };
    a + (b - a) * (rank - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub beta: f64,
    #[serde(rename = "L")]
    pub layers: usize,
    pub count: usize,
    pub delta_median: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub neg_loglik_median: f64,
    pub neg_loglik_lo: f64,
    pub neg_loglik_hi: f64,
}

/// Median and 2.5 / 97.5 percentiles of `delta` and `neg_loglik` per
/// `(beta, L)` group, ordered by `beta` then `L`.
pub fn aggregate_campaign(rows: &[MetricRow]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(u64, usize), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        // non-negative betas order the same as their bit patterns
        let e = groups
            .entry((r.beta.to_bits(), r.layers))
            .or_insert_with(|| (r.beta, Vec::new(), Vec::new()));
        e.1.push(r.delta);
        e.2.push(r.neg_loglik);
    }
    groups
        .into_iter()
        .map(|((_, layers), (beta, d, nl))| CellSummary {
            beta,
            layers,
            count: d.len(),
            delta_median: percentile(&d, 50.0),
            delta_lo: percentile(&d, 2.5),
            delta_hi: percentile(&d, 97.5),
            neg_loglik_median: percentile(&nl, 50.0),
            neg_loglik_lo: percentile(&nl, 2.5),
            neg_loglik_hi: percentile(&nl, 97.5),
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reconstruction of a single row, kept here for report rendering.
pub fn reconstruct_row(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    Ok(model.reconstruct_batch(&row_matrix(x))?.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::LikelihoodFamily;
    use crate::models::ModelConfig;

    fn tiny(z: Vec<usize>, seed: u64) -> Model {
        let cfg = ModelConfig {
            z_dims: z,
            beta: 1.0,
            likelihood: LikelihoodFamily::BernoulliLogits,
            fixed_sigma: 1.0,
            encoder_hidden: vec![5],
            decoder_hidden: vec![5],
            link_hidden: vec![4, 3],
            leaky_slope: 0.2,
            batch_norm: false,
            free_bits: 0.0,
            data_dim: 6,
            dataset_size: 40,
            dlgm: false,
        };
        Model::new(cfg, seed).unwrap()
    }

    fn data(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, 6), || if rng.random::<bool>() { 1.0 } else { -1.0 })
    }

    #[test]
    fn max_entropy_decoder_gives_d_log_two() {
        let mut m = tiny(vec![2], 1);
        for name in ["dec.l1.w", "dec.l1.b"] {
            let id = m.params.id(name).unwrap();
            m.params.get_mut(id).fill(0.0);
        }
        let x = data(2, 3);
        let v = neg_target_loglik(&m, &x.row(0).to_vec(), &x.row(1).to_vec()).unwrap();
        assert!((v - 6.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn neg_target_loglik_is_the_likelihood_of_the_decoded_mean_chain() {
        let m = tiny(vec![3, 2], 2);
        let x = data(2, 4);
        let (xt, xs) = (x.row(0).to_vec(), x.row(1).to_vec());
        let means: Vec<Vec<f64>> = m.mean_chain(&xs).unwrap().into_iter().map(|g| g.mean).collect();
        let direct = -log_likelihood(&m.likelihood_params(&means).unwrap(), &xt).unwrap();
        assert!((neg_target_loglik(&m, &xt, &xs).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn recon_l2_properties() {
        let m = tiny(vec![2], 5);
        let x = data(2, 6);
        let (a, b) = (x.row(0).to_vec(), x.row(1).to_vec());
        let r = m.reconstruct(&a).unwrap();
        assert_eq!(recon_l2(&m, &a, &r).unwrap(), 0.0);
        let naive: f64 = r.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!((recon_l2(&m, &a, &b).unwrap() - naive).abs() < 1e-12);
        assert!(recon_l2(&m, &a, &b[..3]).is_err());
    }

    #[test]
    fn zero_noise_density_is_the_clean_reconstruction_likelihood() {
        let m = tiny(vec![3, 2], 7);
        let x = data(30, 8);
        let rep = denoise_density(&m, &x, &[0.0, 0.5], 11, 10).unwrap();
        // replay the scale-0 stream: the noise draw precedes the chain noise
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(0);
        let _: Vec<f64> = (0..30 * 6).map(|_| rng.sample(StandardNormal)).collect();
        let eps = sample_eps(&mut rng, 30, &[3, 2]);
        let direct = noisy_loglik(&m, &x, &x, &eps).unwrap();
        assert_eq!(rep.scales[0].values, direct);
        for sd in &rep.scales {
            assert_eq!(sd.histogram.counts.iter().sum::<usize>(), 30);
            assert_eq!(sd.histogram.edges.len(), 11);
        }
        assert!(denoise_density(&m, &x, &[-0.1], 0, 10).is_err());
    }

    #[test]
    fn unpenalized_elbo_matches_the_objective_module() {
        let m = tiny(vec![3, 2], 9);
        let x = data(20, 10);
        let v = elbo_unpenalized(&m, &x, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = sample_eps(&mut rng, 20, &[3, 2]);
        let spec = ObjectiveSpec::new(ObjectiveKind::Seatbelt, 1.0, 0.0);
        let direct = evaluate(&m, &spec, &x, &eps).unwrap().total;
        assert!((v - direct).abs() < 1e-8);
        assert!(v.is_finite());
    }

    #[test]
    fn weight_report() {
        let a = tiny(vec![3, 2], 12);
        let r = weight_l2_report(&a, &a).unwrap();
        assert_eq!((r.encoder_change_pct, r.decoder_change_pct), (0.0, 0.0));
        let mut b = a.clone();
        for id in 0..b.params.len() {
            if !Model::is_encoder_param(&b.params.names()[id].clone()) {
                b.params.get_mut(id).mapv_inplace(|v| 2.0 * v);
            }
        }
        let r = weight_l2_report(&a, &b).unwrap();
        assert!((r.decoder_change_pct - 100.0).abs() < 1e-10);
        assert_eq!(r.encoder_change_pct, 0.0);
        // concatenate-and-norm oracle
        let all: Vec<f64> = a
            .params
            .iter()
            .filter(|(n, _, t)| *t && Model::is_encoder_param(n))
            .flat_map(|(_, arr, _)| arr.iter().copied().collect::<Vec<_>>())
            .collect();
        let norm = all.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r.encoder_norm_a - norm).abs() < 1e-12);
    }

    fn row(beta: f64, layers: usize, delta: f64, pair: usize) -> MetricRow {
        MetricRow {
            model_id: format!("m{layers}"),
            beta,
            layers,
            z_dims: "24-12-6".into(),
            lambda: 0.5f64.powi(pair as i32),
            pair,
            delta,
            neg_loglik: delta * 3.0 + 0.1,
            l2_adv: 1.0 / 3.0,
            l2_clean: 2.0f64.sqrt(),
            seed: 7,
        }
    }

    #[test]
    fn metric_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let rows: Vec<MetricRow> = (0..5).map(|i| row(4.0, 3, 0.1 * i as f64 + 1e-17, i)).collect();
        write_metric_rows(&path, &rows).unwrap();
        assert_eq!(read_metric_rows(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("model_id,beta,L,z_dims,lambda,pair,delta,neg_loglik,l2_adv,l2_clean,seed\n"));
    }

    #[test]
    fn single_row_summary_is_degenerate() {
        let s = aggregate_campaign(&[row(2.0, 1, 3.5, 0)]);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].delta_median, s[0].delta_lo, s[0].delta_hi), (3.5, 3.5, 3.5));
    }

    #[test]
    fn summaries_ignore_row_order_and_match_sorting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows: Vec<MetricRow> = (0..1000)
            .map(|i| row([1.0, 4.0, 8.0][i % 3], 1 + (i % 2) * 2, rng.random_range(0.0..10.0), i))
            .collect();
        let a = aggregate_campaign(&rows);
        rows.reverse();
        assert_eq!(a, aggregate_campaign(&rows));
        assert_eq!(a.len(), 6);
        for cell in &a {
            let mut d: Vec<f64> = rows
                .iter()
                .filter(|r| r.beta == cell.beta && r.layers == cell.layers)
                .map(|r| r.delta)
                .collect();
            d.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let at = |p: f64| {
                let rank = p / 100.0 * (d.len() - 1) as f64;
                let (i, frac) = (rank.floor() as usize, rank.fract());
                if i + 1 < d.len() { d[i] * (1.0 - frac) + d[i + 1] * frac } else { d[i] }
            };
            assert!((cell.delta_median - at(50.0)).abs() < 1e-12);
            assert!((cell.delta_lo - at(2.5)).abs() < 1e-12);
            assert!((cell.delta_hi - at(97.5)).abs() < 1e-12);
        }
        assert!(a.windows(2).all(|w| (w[0].beta, w[0].layers) < (w[1].beta, w[1].layers)));
    }
}

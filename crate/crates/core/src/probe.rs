//! Linear probe for the interpolation time `t`: ridge regression on hidden
//! state summaries, with grouped train/test splits and controls.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{solve_spd, Matrix, Rng};
use crate::subspace::centered_global;
use crate::trainer::{make_batch, SyntheticDataset};

pub const PROBE_SCHEMA: &str = "mvlab.probe.v1";

/// Scalar statistics of the noisy input latent: mean, RMS and centered RMS.
pub const INPUT_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatures {
    pub img_mean: Vec<f64>,
    /// RMS of the centered image tokens.
    pub img_centered_rms: f64,
    pub txt_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    /// Source sample id; splits never separate rows of one group.
    pub group: usize,
    pub t: f64,
    pub input: [f64; INPUT_FEATURES],
    /// One entry per probed layer, in the order of [`FeatureTable::layers`].
    pub layers: Vec<LayerFeatures>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub layers: Vec<usize>,
    pub rows: Vec<ProbeRow>,
}

/// Every `stride`-th layer, starting at 0.
pub fn default_layers(depth: usize, stride: usize) -> Vec<usize> {
    (0..depth).step_by(stride.max(1)).collect()
}

fn input_stats(z: &Matrix) -> [f64; INPUT_FEATURES] {
    let n = z.data().len() as f64;
    let mean = z.data().iter().sum::<f64>() / n;
    [mean, z.rms(), centered_global(z).rms()]
}

/// Runs `groups` samples, each at `draws` values of `t`, through `model` and
/// summarizes the hidden state after each probed block.
pub fn collect_probe_features(
    model: &Model,
    dataset: &SyntheticDataset,
    groups: usize,
    draws: usize,
    layers: &[usize],
    rng: &mut Rng,
) -> Result<FeatureTable> {
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.config.depth) {
        return Err(Error::Config(format!(
            "probe layer {bad} does not exist in a {}-layer model",
            model.config.depth
        )));
    }
    let layout = model.config.layout();
    let base = make_batch(dataset, groups, None, rng);
    let mut rows = Vec::with_capacity(groups * draws);
    for g in 0..groups {
        for _ in 0..draws {
            let t = rng.uniform();
            let z = base.x0[g].scale(1.0 - t).add(&base.x1[g].scale(t));
            let input = crate::model::ModelInput {
                latents: z.clone(),
                text: base.text[g].clone(),
            };
            let (_, tape) = model.forward(&input)?;
            let feats = layers
                .iter()
                .map(|&l| {
                    let h = tape.blocks[l].output();
                    let img = h.row_block(layout.image_range().start, layout.image_range().end);
                    let txt = h.row_block(layout.text_range().start, layout.text_range().end);
                    LayerFeatures {
                        img_mean: img.col_mean(),
                        img_centered_rms: centered_global(&img).rms(),
                        txt_mean: txt.col_mean(),
                    }
                })
                .collect();
            rows.push(ProbeRow {
                group: g,
                t,
                input: input_stats(&z),
                layers: feats,
            });
        }
    }
    Ok(FeatureTable {
        layers: layers.to_vec(),
        rows,
    })
}

/// Row indices of a split that never puts one group on both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl GroupSplit {
    /// Sends a `test_fraction` share of the distinct groups, chosen at
    /// random, to the test side.
    pub fn new(groups: &[usize], test_fraction: f64, rng: &mut Rng) -> Result<Self> {
        let mut ids: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if ids.len() < 2 {
            return Err(Error::Config("a grouped split needs at least 2 groups".into()));
        }
        rng.shuffle(&mut ids);
        let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
        let test_ids: BTreeSet<usize> = ids[..n_test].iter().copied().collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, g) in groups.iter().enumerate() {
            if test_ids.contains(g) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok(Self { train, test })
    }

    pub fn is_group_disjoint(&self, groups: &[usize]) -> bool {
        let a: BTreeSet<usize> = self.train.iter().map(|&i| groups[i]).collect();
        self.test.iter().all(|&i| !a.contains(&groups[i]))
    }
}

/// A ridge fit on standardized features with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Held-out coefficient of determination.
    pub r2: f64,
    /// Held-out mean absolute error.
    pub mae: f64,
    /// Held-out sum of squared errors.
    pub sse: f64,
}

impl RidgeFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.weights)
                .zip(self.feature_mean.iter().zip(&self.feature_scale))
                .map(|((x, w), (m, s))| w * (x - m) / s)
                .sum::<f64>()
    }
}

/// Solves `(XᵀX + λI) w = Xᵀy` on the training rows after standardizing each
/// feature with training statistics, then scores the test rows.
pub fn ridge_fit(features: &Matrix, targets: &[f64], lambda: f64, split: &GroupSplit) -> Result<RidgeFit> {
    let p = features.cols();
    if targets.len() != features.rows() {
        return Err(crate::error::dim_err(
            "ridge_fit",
            format!("{} rows vs {} targets", features.rows(), targets.len()),
        ));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Config("ridge_fit needs train and test rows".into()));
    }
    let n = split.train.len() as f64;
    let mut feature_mean = vec![0.0; p];
    for &i in &split.train {
        feature_mean
            .iter_mut()
            .zip(features.row(i))
            .for_each(|(m, x)| *m += x / n);
    }
    let mut feature_scale = vec![0.0; p];
    for &i in &split.train {
        for ((s, x), m) in feature_scale.iter_mut().zip(features.row(i)).zip(&feature_mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut feature_scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let y_mean = split.train.iter().map(|&i| targets[i]).sum::<f64>() / n;
    let mut gram = Matrix::zeros(p, p);
    let mut rhs = vec![0.0; p];
    let mut z = vec![0.0; p];
    for &i in &split.train {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = (features[(i, k)] - feature_mean[k]) / feature_scale[k];
        }
        let dy = targets[i] - y_mean;
        for a in 0..p {
            rhs[a] += z[a] * dy;
            let row = gram.row_mut(a);
            for b in 0..p {
                row[b] += z[a] * z[b];
            }
        }
    }
    for a in 0..p {
        gram[(a, a)] += lambda;
    }
    let weights = solve_spd(&gram, &rhs).map_err(|_| Error::Singular("ridge normal equations".into()))?;
    let mut fit = RidgeFit {
        weights,
        intercept: y_mean,
        feature_mean,
        feature_scale,
        r2: 0.0,
        mae: 0.0,
        sse: 0.0,
    };
    let m = split.test.len() as f64;
    let test_mean = split.test.iter().map(|&i| targets[i]).sum::<f64>() / m;
    let (mut sse, mut sst, mut abs) = (0.0, 0.0, 0.0);
    for &i in &split.test {
        let e = targets[i] - fit.predict(features.row(i));
        sse += e * e;
        abs += e.abs();
        sst += (targets[i] - test_mean) * (targets[i] - test_mean);
    }
    fit.sse = sse;
    fit.mae = abs / m;
    fit.r2 = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeature {
    ImgMean,
    ImgCenteredRms,
    TxtMean,
}

impl ProbeFeature {
    pub const ALL: [ProbeFeature; 3] = [
        ProbeFeature::ImgMean,
        ProbeFeature::ImgCenteredRms,
        ProbeFeature::TxtMean,
    ];

    fn extract(self, f: &LayerFeatures) -> Vec<f64> {
        match self {
            ProbeFeature::ImgMean => f.img_mean.clone(),
            ProbeFeature::ImgCenteredRms => vec![f.img_centered_rms],
            ProbeFeature::TxtMean => f.txt_mean.clone(),
        }
    }
}

fn design(table: &FeatureTable, layer_idx: Option<usize>, feature: Option<ProbeFeature>, with_input: bool) -> Matrix {
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| {
            let mut v = Vec::new();
            if with_input {
                v.extend_from_slice(&r.input);
            }
            if let (Some(l), Some(f)) = (layer_idx, feature) {
                v.extend(f.extract(&r.layers[l]));
            }
            v
        })
        .collect();
    let p = rows.first().map_or(0, Vec::len);
    Matrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: usize,
    pub feature: ProbeFeature,
    pub r2: f64,
    pub mae: f64,
    /// `1 − SSE(input + feature) / SSE(input)`.
    pub residual_removed: f64,
    pub shuffled_r2: f64,
    /// Same probe on a freshly initialized model; absent when not run.
    pub untrained_r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema: String,
    pub lambda: f64,
    pub rows: usize,
    pub groups: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub input_r2: f64,
    pub input_mae: f64,
    pub records: Vec<ProbeRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub groups: usize,
    pub draws: usize,
    pub lambda: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            groups: 200,
            draws: 4,
            lambda: 1e-3,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

fn fit_table(
    table: &FeatureTable,
    split: &GroupSplit,
    settings: &ProbeSettings,
    shuffled: &[f64],
) -> Result<(RidgeFit, Vec<(usize, ProbeFeature, RidgeFit, f64, f64)>)> {
    let t: Vec<f64> = table.rows.iter().map(|r| r.t).collect();
    let input = ridge_fit(&design(table, None, None, true), &t, settings.lambda, split)?;
    let mut out = Vec::new();
    for (li, &layer) in table.layers.iter().enumerate() {
        for feature in ProbeFeature::ALL {
            let fit = ridge_fit(
                &design(table, Some(li), Some(feature), false),
                &t,
                settings.lambda,
                split,
            )?;
            let joint = ridge_fit(
                &design(table, Some(li), Some(feature), true),
                &t,
                settings.lambda,
                split,
            )?;
            let shuffled_fit = ridge_fit(
                &design(table, Some(li), Some(feature), false),
                shuffled,
                settings.lambda,
                split,
            )?;
            let removed = 1.0 - joint.sse / input.sse;
            out.push((layer, feature, fit, removed, shuffled_fit.r2));
        }
    }
    Ok((input, out))
}

/// Probes `model`, and when given, the same probe on `untrained` as a control.
pub fn run_probe(
    model: &Model,
    untrained: Option<&Model>,
    dataset: &SyntheticDataset,
    layers: &[usize],
    settings: &ProbeSettings,
) -> Result<ProbeReport> {
    let mut rng = Rng::new(settings.seed).substream(30);
    let table = collect_probe_features(model, dataset, settings.groups, settings.draws, layers, &mut rng)?;
    let groups: Vec<usize> = table.rows.iter().map(|r| r.group).collect();
    let mut split_rng = Rng::new(settings.seed).substream(31);
    let split = GroupSplit::new(&groups, settings.test_fraction, &mut split_rng)?;
    if !split.is_group_disjoint(&groups) {
        return Err(Error::Config("probe split shares groups".into()));
    }
    let mut shuffled: Vec<f64> = table.rows.iter().map(|r| r.t).collect();
    split_rng.shuffle(&mut shuffled);
    let (input, fits) = fit_table(&table, &split, settings, &shuffled)?;
    let control = match untrained {
        Some(m) => {
            let mut rng = Rng::new(settings.seed).substream(30);
            let table = collect_probe_features(m, dataset, settings.groups, settings.draws, layers, &mut rng)?;
            Some(fit_table(&table, &split, settings, &shuffled)?.1)
        }
        None => None,
    };
    let records = fits
        .into_iter()
        .enumerate()
        .map(|(k, (layer, feature, fit, removed, shuffled_r2))| ProbeRecord {
            layer,
            feature,
            r2: fit.r2,
            mae: fit.mae,
            residual_removed: removed,
            shuffled_r2,
            untrained_r2: control.as_ref().map(|c| c[k].2.r2),
        })
        .collect();
    Ok(ProbeReport {
        schema: PROBE_SCHEMA.into(),
        lambda: settings.lambda,
        rows: table.rows.len(),
        groups: settings.groups,
        train_rows: split.train.len(),
        test_rows: split.test.len(),
        input_r2: input.r2,
        input_mae: input.mae,
        records,
    })
}

pub fn write_probe_csv<W: Write>(mut sink: W, report: &ProbeReport) -> Result<()> {
    writeln!(sink, "#schema={PROBE_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(sink);
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

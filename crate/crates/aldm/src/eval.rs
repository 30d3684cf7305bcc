//! Evaluation: oracle segmenter, mIoU, style accuracy, diversity and the
//! domain-generalization experiment.

use crate::error::{AldmError, Result};
use crate::losses;
use crate::nets::{
    argmax_labels, denoise, init_segnet, init_style_probe, onehot_labels, probe_forward,
    segment, segnet_forward, DenoiserSpec, ParameterTree, SegNetSpec, StyleProbeSpec,
    TapedParams,
};
use crate::optim::AdamW;
use crate::schedule::{self, NoiseSchedule, TimestepSubsequence};
use crate::synthdata::{generate_scene, Dataset, LayoutSample};
use crate::tape::Tape;
use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ORACLE_MIOU_FLOOR: f64 = 0.95;
pub const PROBE_ACCURACY_FLOOR: f64 = 0.99;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub style_accuracy: f64,
    pub diversity: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-class intersection-over-union aggregated over the whole batch.
/// Classes with zero union are excluded from the mean and reported as None.
pub fn miou(
    pred: &Array3<usize>,
    gt: &Array3<usize>,
    n_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    if pred.dim() != gt.dim() {
        return Err(AldmError::invalid(format!(
            "miou shape mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p >= n_classes || g >= n_classes {
            return Err(AldmError::invalid(format!(
                "label out of range for {n_classes} classes: pred={p} gt={g}"
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        if union[c] == 0 {
            per_class.push(None);
        } else {
            let iou = inter[c] as f64 / union[c] as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(AldmError::invalid("miou over empty label maps"));
    }
    Ok((sum / counted as f64, per_class))
}

fn stack_samples(samples: &[&LayoutSample]) -> (Array4<f64>, Array3<usize>, Vec<usize>) {
    let (h, w) = samples[0].labels.dim();
    let b = samples.len();
    let mut x = Array4::<f64>::zeros((b, 3, h, w));
    let mut labels = Array3::<usize>::zeros((b, h, w));
    let mut styles = Vec::with_capacity(b);
    for (bi, s) in samples.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), bi).assign(&s.image_chw());
        for i in 0..h {
            for j in 0..w {
                labels[[bi, i, j]] = s.labels[[i, j]];
            }
        }
        styles.push(s.style_id);
    }
    (x, labels, styles)
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { iters: 300, batch_size: 8, lr: 3e-3, seed: 0 }
    }
}

/// Train an N-class segmenter on in-memory samples with gamma-weighted CE.
pub fn fit_segmenter(
    samples: &[LayoutSample],
    spec: &SegNetSpec,
    cfg: &FitConfig,
) -> Result<ParameterTree> {
    if samples.is_empty() {
        return Err(AldmError::invalid("fit_segmenter needs at least one sample"));
    }
    let mut params = init_segnet(spec, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e67);
    for _ in 0..cfg.iters {
        let batch: Vec<&LayoutSample> = (0..cfg.batch_size)
            .map(|_| &samples[rng.gen_range(0..samples.len())])
            .collect();
        let (x, labels, _) = stack_samples(&batch);
        let gamma = losses::class_weights(&labels, spec.out_channels)?;
        let tape = Tape::new();
        let tp = TapedParams::lift(&tape, &params);
        let logits = segnet_forward(spec, &tp, tape.leaf(x.into_dyn()))?;
        let loss = losses::segmentation_loss(logits, &labels, &gamma)?;
        if !loss.scalar().is_finite() {
            return Err(AldmError::Numerical("non-finite segmenter loss".into()));
        }
        let grads = tp.gradients(&tape.backward(loss));
        opt.step(&mut params, &grads)?;
    }
    Ok(params)
}

/// Segment a set of samples and score against their ground-truth labels.
pub fn segmenter_miou(
    spec: &SegNetSpec,
    params: &ParameterTree,
    samples: &[LayoutSample],
) -> Result<(f64, Vec<Option<f64>>)> {
    if samples.is_empty() {
        return Err(AldmError::invalid("no samples to evaluate"));
    }
    let mut preds: Vec<Array3<usize>> = Vec::new();
    let mut gts: Vec<Array3<usize>> = Vec::new();
    for chunk in samples.chunks(8) {
        let refs: Vec<&LayoutSample> = chunk.iter().collect();
        let (x, labels, _) = stack_samples(&refs);
        let logits = segment(spec, params, &x)?;
        preds.push(argmax_labels(&logits));
        gts.push(labels);
    }
    let (h, w) = samples[0].labels.dim();
    let b = samples.len();
    let mut pred_all = Array3::<usize>::zeros((b, h, w));
    let mut gt_all = Array3::<usize>::zeros((b, h, w));
    let mut bi = 0;
    for (p, g) in preds.iter().zip(gts.iter()) {
        for k in 0..p.dim().0 {
            pred_all
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&p.index_axis(ndarray::Axis(0), k));
            gt_all
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&g.index_axis(ndarray::Axis(0), k));
            bi += 1;
        }
    }
    miou(&pred_all, &gt_all, spec.out_channels)
}

#[derive(Debug)]
pub struct Oracle {
    pub spec: SegNetSpec,
    pub params: ParameterTree,
    pub val_miou: f64,
}

/// Train the frozen evaluation segmenter on real data across all styles.
/// Fails loudly below the mIoU floor: evaluation would be meaningless.
pub fn train_oracle_segmenter(dataset: &Dataset, seed: u64, cfg: &FitConfig) -> Result<Oracle> {
    let n = dataset.manifest.num_classes;
    let spec = SegNetSpec { in_channels: 3, out_channels: n, base_width: 8, depth: 2 };
    let train: Vec<LayoutSample> = dataset
        .train_indices()
        .into_iter()
        .map(|i| dataset.load(i))
        .collect::<Result<_>>()?;
    let fit_cfg = FitConfig { seed, ..cfg.clone() };
    let params = fit_segmenter(&train, &spec, &fit_cfg)?;
    let val: Vec<LayoutSample> = dataset
        .val_indices()
        .into_iter()
        .map(|i| dataset.load(i))
        .collect::<Result<_>>()?;
    let (val_miou, _) = segmenter_miou(&spec, &params, &val)?;
    if val_miou < ORACLE_MIOU_FLOOR {
        return Err(AldmError::GateFailed(format!(
            "oracle segmenter reached {val_miou:.4} mIoU, below the {ORACLE_MIOU_FLOOR} floor"
        )));
    }
    Ok(Oracle { spec, params, val_miou })
}

#[derive(Debug)]
pub struct StyleProbe {
    pub spec: StyleProbeSpec,
    pub params: ParameterTree,
    pub accuracy: f64,
}

/// Fraction of samples whose probe-predicted style matches style_id.
pub fn probe_accuracy(
    spec: &StyleProbeSpec,
    params: &ParameterTree,
    samples: &[LayoutSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(AldmError::invalid("no samples to evaluate"));
    }
    let mut hits = 0usize;
    for chunk in samples.chunks(16) {
        let refs: Vec<&LayoutSample> = chunk.iter().collect();
        let (x, _, styles) = stack_samples(&refs);
        let preds = probe_styles(spec, params, &x)?;
        hits += preds.iter().zip(styles.iter()).filter(|(p, s)| p == s).count();
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn probe_styles(
    spec: &StyleProbeSpec,
    params: &ParameterTree,
    images: &Array4<f64>,
) -> Result<Vec<usize>> {
    let tape = Tape::no_grad();
    let tp = TapedParams::lift(&tape, params);
    let logits = probe_forward(spec, &tp, tape.leaf(images.clone().into_dyn()))?;
    let v = logits.value();
    let l2 = v
        .as_ref()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| AldmError::invalid(format!("probe logits not 2d: {e}")))?;
    Ok(l2
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect())
}

/// Train the frozen style classifier on real data; gate at 99% accuracy.
pub fn train_style_probe(dataset: &Dataset, seed: u64, cfg: &FitConfig) -> Result<StyleProbe> {
    let spec = StyleProbeSpec { num_styles: dataset.manifest.num_styles, base_width: 8 };
    let mut params = init_style_probe(&spec, seed)?;
    let mut opt = AdamW::new(&params, cfg.lr);
    let train: Vec<LayoutSample> = dataset
        .train_indices()
        .into_iter()
        .map(|i| dataset.load(i))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(AldmError::invalid("empty training set for the style probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f6265);
    for _ in 0..cfg.iters {
        let batch: Vec<&LayoutSample> = (0..cfg.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let (x, _, styles) = stack_samples(&batch);
        let tape = Tape::new();
        let tp = TapedParams::lift(&tape, &params);
        let logits = probe_forward(&spec, &tp, tape.leaf(x.into_dyn()))?;
        let loss = losses::classification_loss(logits, &styles)?;
        if !loss.scalar().is_finite() {
            return Err(AldmError::Numerical("non-finite probe loss".into()));
        }
        let grads = tp.gradients(&tape.backward(loss));
        opt.step(&mut params, &grads)?;
    }
    let val: Vec<LayoutSample> = dataset
        .val_indices()
        .into_iter()
        .map(|i| dataset.load(i))
        .collect::<Result<_>>()?;
    let accuracy = probe_accuracy(&spec, &params, &val)?;
    if accuracy < PROBE_ACCURACY_FLOOR {
        return Err(AldmError::GateFailed(format!(
            "style probe reached {accuracy:.4} accuracy, below the {PROBE_ACCURACY_FLOOR} floor"
        )));
    }
    Ok(StyleProbe { spec, params, accuracy })
}

/// Deterministic DDIM sampling from a trained generator. Outputs are clamped
/// to the data range [-1, 1] so downstream evaluators only ever see in-range
/// pixels.
pub fn sample_images(
    dspec: &DenoiserSpec,
    gen: &ParameterTree,
    labels: &Array3<usize>,
    styles: &[usize],
    sched: &NoiseSchedule,
    steps: &TimestepSubsequence,
    seed: u64,
) -> Result<Array4<f64>> {
    let y = onehot_labels(labels, dspec.num_classes);
    let mut imgs = schedule::sample(
        |x, y, s, t| denoise(dspec, gen, x, y, s, &vec![t; s.len()], sched.t_max()),
        &y,
        styles,
        sched,
        steps,
        seed,
    )?;
    imgs.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(imgs)
}

/// Layout faithfulness: sample one image per validation layout under its
/// ground-truth style, segment with the oracle, score against conditioning.
pub fn layout_faithfulness(
    dspec: &DenoiserSpec,
    gen: &ParameterTree,
    dataset: &Dataset,
    oracle: &Oracle,
    n_layouts: usize,
    sched: &NoiseSchedule,
    steps: &TimestepSubsequence,
    seed: u64,
) -> Result<(f64, Vec<Option<f64>>)> {
    let idx = dataset.val_indices();
    if idx.is_empty() {
        return Err(AldmError::invalid("no validation layouts"));
    }
    let take = n_layouts.min(idx.len()).max(1);
    let mut preds: Vec<Array3<usize>> = Vec::new();
    let mut gts: Vec<Array3<usize>> = Vec::new();
    for (ci, chunk) in idx[..take].chunks(8).enumerate() {
        let samples: Vec<LayoutSample> =
            chunk.iter().map(|&i| dataset.load(i)).collect::<Result<_>>()?;
        let refs: Vec<&LayoutSample> = samples.iter().collect();
        let (_, labels, styles) = stack_samples(&refs);
        let imgs = sample_images(
            dspec,
            gen,
            &labels,
            &styles,
            sched,
            steps,
            seed.wrapping_add(ci as u64),
        )?;
        let logits = segment(&oracle.spec, &oracle.params, &imgs)?;
        preds.push(argmax_labels(&logits));
        gts.push(labels);
    }
    let (h, w) = (dataset.manifest.resolution, dataset.manifest.resolution);
    let mut pred_all = Array3::<usize>::zeros((take, h, w));
    let mut gt_all = Array3::<usize>::zeros((take, h, w));
    let mut bi = 0;
    for (p, g) in preds.iter().zip(gts.iter()) {
        for k in 0..p.dim().0 {
            pred_all
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&p.index_axis(ndarray::Axis(0), k));
            gt_all
                .index_axis_mut(ndarray::Axis(0), bi)
                .assign(&g.index_axis(ndarray::Axis(0), k));
            bi += 1;
        }
    }
    miou(&pred_all, &gt_all, dataset.manifest.num_classes)
}

/// Editability probe: sample every (layout, style token) combination,
/// including combinations absent from the training pairs, and report the
/// fraction the frozen probe classifies as the conditioning style.
pub fn style_accuracy(
    dspec: &DenoiserSpec,
    gen: &ParameterTree,
    dataset: &Dataset,
    probe: &StyleProbe,
    n_layouts: usize,
    sched: &NoiseSchedule,
    steps: &TimestepSubsequence,
    seed: u64,
) -> Result<f64> {
    let idx = dataset.val_indices();
    if idx.is_empty() {
        return Err(AldmError::invalid("no validation layouts"));
    }
    let take = n_layouts.min(idx.len()).max(1);
    let s_count = dataset.manifest.num_styles;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ci, &i) in idx[..take].iter().enumerate() {
        let sample = dataset.load(i)?;
        let refs = [&sample];
        let (_, labels1, _) = stack_samples(&refs);
        let (h, w) = sample.labels.dim();
        // one batch per layout: all style tokens at once
        let mut labels = Array3::<usize>::zeros((s_count, h, w));
        for s in 0..s_count {
            labels
                .index_axis_mut(ndarray::Axis(0), s)
                .assign(&labels1.index_axis(ndarray::Axis(0), 0));
        }
        let styles: Vec<usize> = (0..s_count).collect();
        let imgs = sample_images(
            dspec,
            gen,
            &labels,
            &styles,
            sched,
            steps,
            seed.wrapping_add(ci as u64),
        )?;
        let preds = probe_styles(&probe.spec, &probe.params, &imgs)?;
        hits += preds.iter().zip(styles.iter()).filter(|(p, s)| p == s).count();
        total += s_count;
    }
    Ok(hits as f64 / total as f64)
}

/// Mean pairwise root-mean-square distance between m samples for one
/// (layout, style) pair under different noise draws.
pub fn diversity_score(
    dspec: &DenoiserSpec,
    gen: &ParameterTree,
    labels: &ndarray::Array2<usize>,
    style: usize,
    m: usize,
    sched: &NoiseSchedule,
    steps: &TimestepSubsequence,
    seed: u64,
) -> Result<f64> {
    if m < 2 {
        return Err(AldmError::invalid("diversity_score needs m >= 2"));
    }
    let (h, w) = labels.dim();
    let mut batch = Array3::<usize>::zeros((m, h, w));
    for k in 0..m {
        for i in 0..h {
            for j in 0..w {
                batch[[k, i, j]] = labels[[i, j]];
            }
        }
    }
    let styles = vec![style; m];
    let imgs = sample_images(dspec, gen, &batch, &styles, sched, steps, seed)?;
    let n = (3 * h * w) as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..m {
        for b in a + 1..m {
            let xa = imgs.index_axis(ndarray::Axis(0), a);
            let xb = imgs.index_axis(ndarray::Axis(0), b);
            let mut sq = 0.0;
            for (u, v) in xa.iter().zip(xb.iter()) {
                sq += (u - v) * (u - v);
            }
            total += (sq / n).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgResult {
    pub source_style: usize,
    pub target_style: usize,
    pub miou_source_only: f64,
    pub miou_augmented: f64,
    pub gain: f64,
    pub n_aug: usize,
}

/// Desk-scale domain generalization: train a downstream segmenter on
/// source-style real data, with and without generator samples carrying the
/// target style token, then score both on real target-style scenes rendered
/// from the validation geometry.
pub fn dg_experiment(
    dataset: &Dataset,
    source_style: usize,
    target_style: usize,
    dspec: &DenoiserSpec,
    gen: &ParameterTree,
    n_aug: usize,
    sched: &NoiseSchedule,
    steps: &TimestepSubsequence,
    cfg: &FitConfig,
) -> Result<DgResult> {
    let n = dataset.manifest.num_classes;
    let res = dataset.manifest.resolution;
    let source: Vec<LayoutSample> = dataset
        .train_indices()
        .into_iter()
        .map(|i| dataset.load(i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|s| s.style_id == source_style)
        .collect();
    if source.is_empty() {
        return Err(AldmError::invalid("no source-style training samples"));
    }
    // real target-style validation data, re-rendered from held-out geometry
    let target_val: Vec<LayoutSample> = dataset
        .val_indices()
        .into_iter()
        .map(|i| {
            let s = dataset.load(i)?;
            generate_scene(s.scene_seed, target_style, res, n)
        })
        .collect::<Result<_>>()?;

    let spec = SegNetSpec { in_channels: 3, out_channels: n, base_width: 8, depth: 2 };
    let params_a = fit_segmenter(&source, &spec, cfg)?;
    let (miou_a, _) = segmenter_miou(&spec, &params_a, &target_val)?;

    // augmentation: generator samples on source layouts with the target token
    let take = n_aug.min(source.len()).max(1);
    let mut augmented = source.clone();
    for (ci, chunk) in source[..take].chunks(8).enumerate() {
        let refs: Vec<&LayoutSample> = chunk.iter().collect();
        let (_, labels, _) = stack_samples(&refs);
        let styles = vec![target_style; chunk.len()];
        let imgs = sample_images(
            dspec,
            gen,
            &labels,
            &styles,
            sched,
            steps,
            cfg.seed.wrapping_add(0xd6).wrapping_add(ci as u64),
        )?;
        for (k, s) in chunk.iter().enumerate() {
            let (h, w) = s.labels.dim();
            let mut hwc = Array3::<f64>::zeros((h, w, 3));
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        hwc[[i, j, c]] = imgs[[k, c, i, j]].clamp(-1.0, 1.0);
                    }
                }
            }
            augmented.push(LayoutSample {
                image: hwc,
                labels: s.labels.clone(),
                style_id: target_style,
                scene_seed: s.scene_seed,
            });
        }
    }
    let params_b = fit_segmenter(&augmented, &spec, cfg)?;
    let (miou_b, _) = segmenter_miou(&spec, &params_b, &target_val)?;

    Ok(DgResult {
        source_style,
        target_style,
        miou_source_only: miou_a,
        miou_augmented: miou_b,
        gain: miou_b - miou_a,
        n_aug: take,
    })
}

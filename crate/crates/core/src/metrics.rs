//! Evaluation metrics: Fréchet feature distance, diversity and recognition
//! accuracy for generation; framewise accuracy, segmental edit score and
//! segmental F1 for perception; and the small motion classifier whose
//! penultimate layer provides the features.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{derive_rng, Adam, AdamConfig, GradBuffer, Linear, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `n x F`.
    pub features: Mat,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: Mat, extractor_id: impl Into<String>) -> Self {
        Self {
            features,
            extractor_id: extractor_id.into(),
        }
    }

    fn check_stat(&self) -> Result<()> {
        if self.features.rows() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 feature vectors, got {}",
                self.features.rows()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidInput("non-finite features".into()));
        }
        Ok(())
    }

    /// Mean and unbiased covariance.
    pub fn gaussian(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, f) = self.features.shape();
        let x = DMatrix::from_row_slice(n, f, self.features.data());
        let mu = x.row_mean().transpose();
        let mut c = x.clone();
        for mut r in c.row_iter_mut() {
            r -= mu.transpose();
        }
        let cov = c.transpose() * &c / (n as f64 - 1.0);
        (mu, cov)
    }
}

pub const FID_JITTER: f64 = 1e-6;

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| !v.is_finite() || v < -1e-6 * scale) {
        return Err(Error::Numerical(format!(
            "covariance square root: eigenvalue {bad} (spectrum {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians. `Tr((Sa Sb)^1/2)` is computed as
/// `Tr((Sa^1/2 Sb Sa^1/2)^1/2)`, which is symmetric PSD.
pub fn fid_gaussian(mu_a: &DVector<f64>, sa: &DMatrix<f64>, mu_b: &DVector<f64>, sb: &DMatrix<f64>) -> Result<f64> {
    let f = mu_a.len();
    if mu_b.len() != f || sa.shape() != (f, f) || sb.shape() != (f, f) {
        return Err(Error::Shape("Gaussian dimensions disagree".into()));
    }
    let jit = DMatrix::<f64>::identity(f, f) * FID_JITTER;
    let sa = sa + &jit;
    let sb = sb + &jit;
    let ra = sym_sqrt(&sa)?;
    let cross = sym_sqrt(&(&ra * &sb * &ra))?;
    let d = (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    if !d.is_finite() {
        return Err(Error::Numerical(format!("non-finite FID ({d})")));
    }
    Ok(d.max(0.0))
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::Config(format!(
            "features from different extractors: {} vs {}",
            a.extractor_id, b.extractor_id
        )));
    }
    if a.features.cols() != b.features.cols() {
        return Err(Error::Shape(format!(
            "feature widths {} vs {}",
            a.features.cols(),
            b.features.cols()
        )));
    }
    a.check_stat()?;
    b.check_stat()?;
    let (ma, sa) = a.gaussian();
    let (mb, sb) = b.gaussian();
    fid_gaussian(&ma, &sa, &mb, &sb)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivMode {
    /// Mean distance over random disjoint pairs.
    #[default]
    PairDistance,
    /// Trace of the feature covariance.
    Variance,
}

/// Diversity of a feature set.
pub fn div(a: &FeatureSet, pairs: usize, seed: u64, mode: DivMode) -> Result<f64> {
    a.check_stat()?;
    match mode {
        DivMode::Variance => Ok(a.gaussian().1.trace()),
        DivMode::PairDistance => {
            let n = a.features.rows();
            if pairs == 0 || pairs > n / 2 {
                return Err(Error::Config(format!("{pairs} disjoint pairs requested from {n} features")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut derive_rng(seed, &[0xD1F]));
            let total: f64 = idx
                .chunks_exact(2)
                .take(pairs)
                .map(|p| {
                    let (x, y) = (a.features.row(p[0]), a.features.row(p[1]));
                    x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
                })
                .sum();
            Ok(total / pairs as f64)
        }
    }
}

/// Run-length view of per-frame labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segmentation {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for (t, &l) in self.labels.iter().enumerate() {
            match out.last_mut() {
                Some(s) if s.label == l => s.end = t + 1,
                _ => out.push(Segment {
                    label: l,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        out
    }
}

pub fn framewise_acc(pred: &Segmentation, gt: &Segmentation) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} true frames", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput("empty segmentation".into()));
    }
    let hit = pred.labels.iter().zip(&gt.labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hit as f64 / gt.len() as f64)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Segmental edit score in `[0, 100]`.
pub fn edit_score(pred: &Segmentation, gt: &Segmentation) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput("edit score of an empty segmentation".into()));
    }
    let p: Vec<usize> = pred.segments().iter().map(|s| s.label).collect();
    let g: Vec<usize> = gt.segments().iter().map(|s| s.label).collect();
    let d = levenshtein(&p, &g) as f64;
    Ok((100.0 * (1.0 - d / p.len().max(g.len()) as f64)).max(0.0))
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    inter as f64 / union as f64
}

/// Segmental F1 at IoU threshold `tau`. Each predicted segment is matched to
/// its best-overlapping unused ground-truth segment of the same label.
pub fn f1_at_k(pred: &Segmentation, gt: &Segmentation, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("overlap threshold must be in (0, 1], got {tau}")));
    }
    f1_segments(&pred.segments(), &gt.segments(), tau)
}

/// Segmental F1 on explicit segment lists (segments need not tile a
/// common range).
pub fn f1_segments(ps: &[Segment], gs: &[Segment], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("overlap threshold must be in (0, 1], got {tau}")));
    }
    if ps.is_empty() && gs.is_empty() {
        return Ok(100.0);
    }
    if ps.is_empty() || gs.is_empty() {
        return Ok(0.0);
    }
    let mut used = vec![false; gs.len()];
    let mut tp = 0usize;
    for p in ps {
        let best = gs
            .iter()
            .enumerate()
            .filter(|(_, g)| g.label == p.label)
            .map(|(j, g)| (j, iou(p, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= tau && !used[j] {
                used[j] = true;
                tp += 1;
            }
        }
    }
    let precision = tp as f64 / ps.len() as f64;
    let recall = tp as f64 / gs.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_dim: 16,
            steps: 300,
            lr: 5e-3,
            seed: 0,
        }
    }
}

/// Sequence classifier over whole motions: per-frame MLP on poses and
/// velocities, mean and max pooling over time, a feature layer, and a
/// linear head.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub cfg: ExtractorConfig,
    pub pose_dim: usize,
    pub num_classes: usize,
    pub store: ParamStore,
    frame: Linear,
    feat: Linear,
    head: Linear,
    id: String,
}

#[derive(Clone, Debug)]
pub struct ExtractorReport {
    pub train_acc: f64,
    pub final_loss: f64,
    /// Set when training accuracy does not clear chance level.
    pub warning: Option<String>,
}

fn with_velocity(m: &Mat) -> Mat {
    let (t, d) = m.shape();
    let mut out = Mat::zeros(t, 2 * d);
    for r in 0..t {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(m.row(r));
        if r > 0 {
            for c in 0..d {
                row[d + c] = m.get(r, c) - m.get(r - 1, c);
            }
        }
    }
    out
}

impl FeatureExtractor {
    pub fn new(pose_dim: usize, num_classes: usize, cfg: ExtractorConfig) -> Result<Self> {
        if num_classes < 2 || pose_dim == 0 || cfg.hidden == 0 || cfg.feature_dim == 0 {
            return Err(Error::Config("extractor needs >= 2 classes and non-zero widths".into()));
        }
        let mut rng = derive_rng(cfg.seed, &[0xFE]);
        let mut store = ParamStore::new();
        let frame = Linear::new(&mut store, "fx.frame", 2 * pose_dim, cfg.hidden, true, &mut rng);
        let feat = Linear::new(&mut store, "fx.feat", 2 * cfg.hidden, cfg.feature_dim, true, &mut rng);
        let head = Linear::new(&mut store, "fx.head", cfg.feature_dim, num_classes, true, &mut rng);
        let mut fx = Self {
            cfg,
            pose_dim,
            num_classes,
            store,
            frame,
            feat,
            head,
            id: String::new(),
        };
        fx.refresh_id();
        Ok(fx)
    }

    /// Content hash of the weights.
    pub fn id(&self) -> &str {
        &self.id
    }

    fn refresh_id(&mut self) {
        let mut h = Sha256::new();
        for (name, m) in self.store.iter() {
            h.update(name.as_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        self.id = format!("fx-{}", d[..8].iter().map(|b| format!("{b:02x}")).collect::<String>());
    }

    fn check(&self, m: &Mat) -> Result<()> {
        if m.rows() == 0 || m.cols() != self.pose_dim {
            return Err(Error::Shape(format!(
                "motion {:?} for a {}-dim extractor",
                m.shape(),
                self.pose_dim
            )));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, m: &Mat) -> (Var, Var) {
        let t = m.rows();
        let x = tape.leaf(with_velocity(m));
        let h = self.frame.forward(tape, &self.store, x);
        let h = tape.relu(h);
        let mean = tape.sparse_mix(h, Arc::new(vec![(0..t).map(|r| (r, 1.0 / t as f64)).collect()]));
        let mx = tape.group_max(h, &[(0..t).collect()]);
        let pooled = tape.concat_cols(&[mean, mx]);
        let f = self.feat.forward(tape, &self.store, pooled);
        let f = tape.relu(f);
        let logits = self.head.forward(tape, &self.store, f);
        (f, logits)
    }

    pub fn features(&self, motions: &[Mat]) -> Result<FeatureSet> {
        let mut rows = Vec::with_capacity(motions.len());
        for m in motions {
            self.check(m)?;
            let mut tape = Tape::new();
            let (f, _) = self.forward(&mut tape, m);
            rows.push(tape.value(f).row(0).to_vec());
        }
        let features = if rows.is_empty() {
            Mat::zeros(0, self.cfg.feature_dim)
        } else {
            Mat::from_rows(&rows)
        };
        Ok(FeatureSet::new(features, self.id.clone()))
    }

    pub fn classify(&self, motion: &Mat) -> Result<usize> {
        self.check(motion)?;
        let mut tape = Tape::new();
        let (_, l) = self.forward(&mut tape, motion);
        Ok(tape.value(l).argmax_row(0))
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l >= self.num_classes) {
            Some(l) => Err(Error::Config(format!(
                "class {l} outside the classifier's {} classes",
                self.num_classes
            ))),
            None => Ok(()),
        }
    }

    /// Full-batch training; the extractor is frozen afterwards.
    pub fn train(
        pose_dim: usize,
        num_classes: usize,
        motions: &[Mat],
        labels: &[usize],
        cfg: ExtractorConfig,
    ) -> Result<(Self, ExtractorReport)> {
        if motions.len() != labels.len() || motions.is_empty() {
            return Err(Error::Shape(format!("{} motions, {} labels", motions.len(), labels.len())));
        }
        let mut fx = Self::new(pose_dim, num_classes, cfg)?;
        fx.check_labels(labels)?;
        for m in motions {
            fx.check(m)?;
        }
        let mut opt = Adam::new(
            AdamConfig {
                lr: fx.cfg.lr,
                ..AdamConfig::default()
            },
            &fx.store,
        );
        let w = 1.0 / motions.len() as f64;
        let mut last = f64::NAN;
        for step in 0..fx.cfg.steps {
            let mut grads = GradBuffer::new(&fx.store);
            let mut total = 0.0;
            for (m, &y) in motions.iter().zip(labels) {
                let mut tape = Tape::new();
                let (_, l) = fx.forward(&mut tape, m);
                let loss = tape.cross_entropy(l, Arc::new(vec![y]));
                total += w * tape.value(loss).get(0, 0);
                let g = tape.backward(loss);
                grads.accumulate(&tape, &g, w);
            }
            if !total.is_finite() {
                return Err(Error::Numerical(format!("extractor loss {total} at step {step}")));
            }
            last = total;
            opt.update(&mut fx.store, &grads);
        }
        fx.refresh_id();
        let train_acc = recognition_accuracy(&fx, motions, labels)?;
        let chance = 100.0 / num_classes as f64;
        let warning = (train_acc <= chance).then(|| {
            format!("extractor train accuracy {train_acc:.1}% does not exceed chance {chance:.1}%")
        });
        Ok((
            fx,
            ExtractorReport {
                train_acc,
                final_loss: last,
                warning,
            },
        ))
    }
}

/// Percentage of motions whose predicted class matches the given class.
pub fn recognition_accuracy(fx: &FeatureExtractor, motions: &[Mat], labels: &[usize]) -> Result<f64> {
    if motions.len() != labels.len() || motions.is_empty() {
        return Err(Error::Shape(format!("{} motions, {} labels", motions.len(), labels.len())));
    }
    fx.check_labels(labels)?;
    let mut hit = 0usize;
    for (m, &y) in motions.iter().zip(labels) {
        if fx.classify(m)? == y {
            hit += 1;
        }
    }
    Ok(100.0 * hit as f64 / motions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(v: &[usize]) -> Segmentation {
        Segmentation::new(v.to_vec())
    }

    #[test]
    fn segments_partition() {
        let s = seg(&[1, 1, 2, 2, 2, 1]).segments();
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].start, s[0].end, s[2].start, s[2].end), (0, 2, 5, 6));
    }

    #[test]
    fn framewise_cases() {
        let gt = seg(&[0; 10]);
        assert_eq!(framewise_acc(&gt, &gt).unwrap(), 100.0);
        assert_eq!(framewise_acc(&seg(&[1; 10]), &gt).unwrap(), 0.0);
        assert_eq!(framewise_acc(&seg(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]), &gt).unwrap(), 50.0);
        assert!(matches!(framewise_acc(&seg(&[0; 9]), &gt), Err(Error::Shape(_))));
    }

    #[test]
    fn edit_cases() {
        let gt = seg(&[0, 0, 1, 1]);
        assert_eq!(edit_score(&gt, &gt).unwrap(), 100.0);
        let e = edit_score(&seg(&[0, 1, 2]), &seg(&[0, 0, 1])).unwrap();
        assert!((e - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(edit_score(&seg(&[0, 1, 0]), &seg(&[2, 3, 2])).unwrap(), 0.0);
        assert!(matches!(edit_score(&seg(&[]), &gt), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn f1_threshold_crossing() {
        // gt segment of label 1 covers [0, 10); prediction covers [6, 10) of label 1 -> IoU 0.4
        let gt = seg(&[1; 10]);
        let pred = seg(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        let p = &pred.segments()[1];
        assert!((iou(p, &gt.segments()[0]) - 0.4).abs() < 1e-12);
        let gs = [Segment { label: 1, start: 0, end: 10 }];
        let ps = [Segment { label: 1, start: 6, end: 10 }];
        assert_eq!(f1_segments(&ps, &gs, 0.5).unwrap(), 0.0);
        assert_eq!(f1_segments(&ps, &gs, 0.25).unwrap(), 100.0);
        assert_eq!(f1_at_k(&gt, &gt, 0.5).unwrap(), 100.0);
        assert_eq!(f1_at_k(&seg(&[]), &seg(&[]), 0.5).unwrap(), 100.0);
        assert_eq!(f1_at_k(&seg(&[]), &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn fid_closed_forms() {
        let f = 3;
        let z = DVector::zeros(f);
        let i = DMatrix::<f64>::identity(f, f);
        assert!(fid_gaussian(&z, &i, &z, &i).unwrap() < 1e-8);
        let d = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!((fid_gaussian(&d, &i, &z, &i).unwrap() - 5.25).abs() < 1e-8);
        let four = &i * 4.0;
        assert!((fid_gaussian(&z, &four, &z, &i).unwrap() - f as f64).abs() < 1e-5);
    }

    #[test]
    fn fid_rejects_mismatch() {
        let a = FeatureSet::new(Mat::zeros(3, 2), "x");
        let b = FeatureSet::new(Mat::zeros(3, 2), "y");
        assert!(matches!(fid(&a, &b), Err(Error::Config(_))));
        let c = FeatureSet::new(Mat::zeros(1, 2), "x");
        assert!(matches!(fid(&a, &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn div_cases() {
        let same = FeatureSet::new(Mat::filled(6, 3, 1.5), "x");
        assert_eq!(div(&same, 3, 0, DivMode::PairDistance).unwrap(), 0.0);
        let two = FeatureSet::new(Mat::from_rows(&[[0.0, 0.0], [3.0, 4.0]]), "x");
        assert_eq!(div(&two, 1, 9, DivMode::PairDistance).unwrap(), 5.0);
        assert!(matches!(div(&two, 2, 0, DivMode::PairDistance), Err(Error::Config(_))));
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2]), 1);
        assert_eq!(levenshtein(&[], &[4, 5]), 2);
        assert_eq!(levenshtein(&[1, 2], &[2, 1]), 2);
    }
}

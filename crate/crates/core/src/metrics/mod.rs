//! Sample-quality metrics: Fréchet distance, inception-style score, k-NN
//! precision/recall and class-distribution divergence.
//!
//! Features come from a small locally trained classifier (or raw pixels),
//! so absolute values are only comparable within one feature space.

mod classifier;
mod linalg;
mod scores;

pub use classifier::{train_eval_classifier, EvalClassifier, FEATURE_DIM};
pub use linalg::{matrix_sqrt_psd, symmetric_eigen};
pub use scores::{
    frechet_distance, gaussian_stats, inception_style_score, knn_precision_recall, sorted_histogram,
    sorted_histogram_csv, tv_distance, FeatureSpace, FeatureStats, Features, MetricsReport,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_SPLITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub histogram: Vec<usize>,
    pub tv_distance: f64,
    pub sorted: Vec<(usize, usize)>,
}

/// Classifies every sample and compares the class histogram against
/// `reference_histogram`.
pub fn class_distribution(
    classifier: &EvalClassifier,
    samples: &Tensor,
    reference_histogram: &[usize],
) -> Result<ClassDistribution> {
    if !classifier.is_trained() {
        return Err(Error::Usage("class_distribution needs a trained classifier".into()));
    }
    let mut histogram = vec![0; classifier.num_classes()];
    for c in classifier.predict(samples)? {
        histogram[c] += 1;
    }
    Ok(ClassDistribution {
        tv_distance: tv_distance(&histogram, reference_histogram)?,
        sorted: sorted_histogram(&histogram),
        histogram,
    })
}

/// Everything computed once about the real reference set.
#[derive(Debug, Clone)]
pub struct MetricsContext {
    pub classifier: EvalClassifier,
    pub feature_space: FeatureSpace,
    pub k: usize,
    pub splits: usize,
    reference_features: Features,
    reference_stats: FeatureStats,
    reference_histogram: Vec<usize>,
}

impl MetricsContext {
    pub fn new(classifier: EvalClassifier, reference: &Dataset, feature_space: FeatureSpace, k: usize) -> Result<Self> {
        if !classifier.is_trained() {
            return Err(Error::Usage("metrics need a trained classifier".into()));
        }
        let reference_features = extract(&classifier, feature_space, reference.images())?;
        Ok(MetricsContext {
            reference_stats: gaussian_stats(&reference_features)?,
            reference_histogram: reference.class_counts(),
            reference_features,
            classifier,
            feature_space,
            k,
            splits: DEFAULT_SPLITS,
        })
    }

    pub fn reference_features(&self) -> &Features {
        &self.reference_features
    }

    pub fn features(&self, samples: &Tensor) -> Result<Features> {
        let f = extract(&self.classifier, self.feature_space, samples)?;
        if f.d != self.reference_features.d {
            return Err(Error::Argument(format!(
                "sample features have dim {}, reference {}",
                f.d, self.reference_features.d
            )));
        }
        Ok(f)
    }

    pub fn precision_recall(&self, samples: &Tensor) -> Result<(f64, f64)> {
        knn_precision_recall(&self.reference_features, &self.features(samples)?, self.k)
    }

    pub fn report(&self, samples: &Tensor) -> Result<MetricsReport> {
        let feats = self.features(samples)?;
        let fid = frechet_distance(&self.reference_stats, &gaussian_stats(&feats)?)?;
        let (precision, recall) = knn_precision_recall(&self.reference_features, &feats, self.k)?;
        let probs = self.classifier.probabilities(samples)?;
        let (is_mean, is_std) = inception_style_score(&probs, self.splits.min(probs.n))?;
        let dist = class_distribution(&self.classifier, samples, &self.reference_histogram)?;
        Ok(MetricsReport {
            fid,
            is_mean,
            is_std,
            precision,
            recall,
            class_histogram: dist.histogram,
            tv_distance: dist.tv_distance,
            feature_space: self.feature_space,
            n_generated: feats.n,
            n_reference: self.reference_features.n,
        })
    }
}

fn extract(classifier: &EvalClassifier, space: FeatureSpace, images: &Tensor) -> Result<Features> {
    match space {
        FeatureSpace::Classifier => classifier.features(images),
        FeatureSpace::Pixels => Ok(Features::from_tensor(images)),
    }
}

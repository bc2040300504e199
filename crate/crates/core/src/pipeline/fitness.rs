//! Wrapper fitness: `1 - gmean` of a one-vs-rest SVM on the validation split.

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

use super::split::SplitIndices;
use crate::convnet::layers::softmax;
use crate::de::BitMask;
use crate::metrics::{aggregate_confusions, auc_ovr, rmse, MetricError, MulticlassConfusion};
use crate::svm::{train_ovr_k, SvmError, SvmModel, SvmParams};

/// Fitness of the all-zero mask, the worst possible value of `1 - gmean`.
pub const EMPTY_MASK_PENALTY: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitnessError {
    #[error("mask has {mask} bits but there are {features} features")]
    MaskLength { mask: usize, features: usize },
    #[error("{0} rows but {1} labels")]
    LabelCount(usize, usize),
    #[error("split index {0} out of range")]
    IndexOutOfRange(usize),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub fn select_columns(x: ArrayView2<'_, f64>, columns: &[usize]) -> Array2<f64> {
    x.select(Axis(1), columns)
}

pub fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Confusion matrix, per-class AUC and RMSE of a model on one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub confusion: MulticlassConfusion,
    pub auc: Vec<Option<f64>>,
    pub rmse: f64,
}

/// AUC uses the raw decision score of each class; RMSE uses the softmax of
/// the decision scores so that it lies in `[0, 1]`.
pub fn score_model(
    model: &SvmModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<Scored, FitnessError> {
    let scores = model.decision_scores(x)?;
    let predicted = crate::svm::predict_from_scores(scores.view());
    let k = model.classes;
    let confusion = MulticlassConfusion::from_labels(labels, &predicted, k)?;
    let auc = (0..k)
        .map(|c| {
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_ovr(&scores.column(c).to_vec(), &positive).ok()
        })
        .collect();
    let mut probs = scores.clone();
    for mut row in probs.rows_mut() {
        let p = softmax(&row.to_vec());
        row.iter_mut().zip(p).for_each(|(d, s)| *d = s);
    }
    Ok(Scored {
        confusion,
        auc,
        rmse: rmse(probs.view(), labels)?,
    })
}

/// Train and validation rows of a feature matrix, prepared once and reused
/// for every mask.
#[derive(Debug, Clone)]
pub struct WrapperFitness {
    x_train: Array2<f64>,
    y_train: Vec<usize>,
    x_val: Array2<f64>,
    y_val: Vec<usize>,
    classes: usize,
    params: SvmParams,
}

impl WrapperFitness {
    pub fn new(
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        classes: usize,
        split: &SplitIndices,
        params: SvmParams,
    ) -> Result<Self, FitnessError> {
        if x.nrows() != labels.len() {
            return Err(FitnessError::LabelCount(x.nrows(), labels.len()));
        }
        if let Some(&i) = split
            .train
            .iter()
            .chain(&split.validation)
            .find(|&&i| i >= labels.len())
        {
            return Err(FitnessError::IndexOutOfRange(i));
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        Ok(Self {
            x_train: select_rows(x, &split.train),
            y_train: pick(&split.train),
            x_val: select_rows(x, &split.validation),
            y_val: pick(&split.validation),
            classes,
            params,
        })
    }

    pub fn features(&self) -> usize {
        self.x_train.ncols()
    }

    /// Validation confusion of the SVM trained on the masked columns.
    pub fn validation_confusion(
        &self,
        mask: &BitMask,
    ) -> Result<MulticlassConfusion, FitnessError> {
        let cols = mask.selected();
        let model = train_ovr_k(
            select_columns(self.x_train.view(), &cols).view(),
            &self.y_train,
            self.classes,
            &self.params,
        )?;
        let predicted = model.predict(select_columns(self.x_val.view(), &cols).view())?;
        Ok(MulticlassConfusion::from_labels(
            &self.y_val,
            &predicted,
            self.classes,
        )?)
    }

    /// `1 - gmean` of the mean one-vs-rest confusion; the empty mask and an
    /// undefined geometric mean both score [`EMPTY_MASK_PENALTY`].
    pub fn evaluate(&self, mask: &BitMask) -> Result<f64, FitnessError> {
        if mask.len() != self.features() {
            return Err(FitnessError::MaskLength {
                mask: mask.len(),
                features: self.features(),
            });
        }
        if mask.none_set() {
            return Ok(EMPTY_MASK_PENALTY);
        }
        let confusion = self.validation_confusion(mask)?;
        let aggregate = aggregate_confusions(&confusion.one_vs_rest_all())?;
        match aggregate.geometric_mean() {
            Ok(g) => Ok((1.0 - g).clamp(0.0, 1.0)),
            Err(e) => {
                log::warn!("fitness of mask {mask} set to {EMPTY_MASK_PENALTY}: {e}");
                Ok(EMPTY_MASK_PENALTY)
            }
        }
    }
}

/// One-shot form of [`WrapperFitness::evaluate`].
pub fn wrapper_fitness(
    mask: &BitMask,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    split: &SplitIndices,
    params: SvmParams,
) -> Result<f64, FitnessError> {
    WrapperFitness::new(x, labels, classes, split, params)?.evaluate(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::split::split_data;
    use crate::pipeline::synth::FeatureSynth;

    fn synth() -> (Array2<f64>, Vec<usize>) {
        let ds = FeatureSynth::default().generate().unwrap();
        (ds.features().unwrap().clone(), ds.labels)
    }

    #[test]
    fn empty_mask_is_penalised() {
        let (x, y) = synth();
        let split = split_data(y.len(), 1).unwrap();
        let f = wrapper_fitness(
            &BitMask::zeros(20),
            x.view(),
            &y,
            3,
            &split,
            SvmParams::default(),
        );
        assert_eq!(f.unwrap(), 1.0);
    }

    #[test]
    fn separable_full_mask_is_near_zero() {
        let ds = FeatureSynth {
            noise: 0.0,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let split = split_data(ds.len(), 2).unwrap();
        let f = wrapper_fitness(
            &BitMask::ones(20),
            ds.features().unwrap().view(),
            &ds.labels,
            3,
            &split,
            SvmParams::default(),
        )
        .unwrap();
        assert!(f < 0.01, "{f}");
    }

    #[test]
    fn informative_beats_noise() {
        let (x, y) = synth();
        let split = split_data(y.len(), 3).unwrap();
        let w = WrapperFitness::new(x.view(), &y, 3, &split, SvmParams::default()).unwrap();
        let informative = BitMask::new((0..20).map(|j| j < 5).collect());
        let noise = BitMask::new((0..20).map(|j| j >= 5).collect());
        let (fi, fn_) = (
            w.evaluate(&informative).unwrap(),
            w.evaluate(&noise).unwrap(),
        );
        assert!(fi < fn_, "{fi} vs {fn_}");
        for f in [fi, fn_] {
            assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn mask_length_checked() {
        let (x, y) = synth();
        let split = split_data(y.len(), 3).unwrap();
        let w = WrapperFitness::new(x.view(), &y, 3, &split, SvmParams::default()).unwrap();
        assert!(matches!(
            w.evaluate(&BitMask::ones(3)),
            Err(FitnessError::MaskLength { .. })
        ));
    }
}

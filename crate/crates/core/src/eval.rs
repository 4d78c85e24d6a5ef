//! Confusion-matrix evaluation: per-class IoU and mIoU over a sample set,
//! with ignore-marked pixels excluded and absent classes dropped from the
//! mean rather than counted as zero.

use crate::data::Sample;
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::nets::SegNet;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Result};

#[derive(Debug, Clone)]
pub struct Confusion {
    pub classes: usize,
    /// counts[truth * classes + pred]
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) {
        assert_eq!((pred.h, pred.w), (truth.h, truth.w));
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_LABEL {
                continue;
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
    }

    /// TP/(TP+FP+FN); None when the class never occurs in truth or prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.counts[c * self.classes + c];
        let row: u64 = (0..self.classes).map(|p| self.counts[c * self.classes + p]).sum();
        let col: u64 = (0..self.classes).map(|t| self.counts[t * self.classes + c]).sum();
        let denom = row + col - tp;
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Clean-input evaluation: no perturbation, no masking.
pub fn evaluate<S: Scalar>(net: &SegNet<S>, samples: &[&Sample], h: usize, w: usize) -> Result<EvalResult> {
    let classes = net.cfg.num_classes;
    let mut confusion = Confusion::new(classes);
    no_grad(|| -> Result<()> {
        for s in samples {
            let (pred, _) = net.predict(&s.image::<S>(h, w))?.argmax_channels()?;
            confusion.add(&pred, &s.label);
        }
        Ok(())
    })?;
    Ok(EvalResult { miou: confusion.miou(), per_class: confusion.per_class() })
}

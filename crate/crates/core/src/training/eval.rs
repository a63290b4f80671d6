use rayon::prelude::*;

use super::LabeledTensors;
use crate::error::Result;
use crate::model::{argmax, ProtoConceptsNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(net: &ProtoConceptsNet, data: &LabeledTensors) -> Result<EvalReport> {
    let predictions: Vec<usize> = data
        .inputs
        .par_iter()
        .map(|x| {
            net.trace(x)
                .map(|t| argmax(&net.evidence.logits(&t.similarities)))
        })
        .collect::<Result<_>>()?;
    let mut per_class = vec![ClassAccuracy::default(); net.num_classes()];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(&data.labels) {
        if let Some(c) = per_class.get_mut(y) {
            c.total += 1;
            c.correct += (p == y) as usize;
        }
        correct += (p == y) as usize;
    }
    Ok(EvalReport {
        accuracy: if data.is_empty() {
            0.0
        } else {
            correct as f64 / data.len() as f64
        },
        per_class,
        predictions,
    })
}

use sigclass::evalx::{ClassProbs, ProbabilisticClassifier};
use sigclass::NUM_CLASSES;

use crate::model::WrnModel;
use crate::WrnError;

/// Averages the softmax outputs of its members.
#[derive(Clone)]
pub struct Ensemble {
    members: Vec<WrnModel<f32>>,
}

impl Ensemble {
    pub fn new(members: Vec<WrnModel<f32>>) -> Result<Self, WrnError> {
        let first = members.first().ok_or_else(|| WrnError::Config("ensemble needs at least one member".into()))?;
        let c = *first.config();
        for m in &members[1..] {
            let o = m.config();
            if (o.classes, o.in_channels, o.input_h, o.input_w) != (c.classes, c.in_channels, c.input_h, c.input_w) {
                return Err(WrnError::Config("ensemble members disagree on input shape or classes".into()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[WrnModel<f32>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mean member probabilities, `n×classes` row-major.
    pub fn predict(&self, inputs: &[f32], n: usize) -> Result<Vec<f64>, WrnError> {
        let mut acc: Option<Vec<f64>> = None;
        for m in &self.members {
            let p = m.predict_proba(&m.batch(inputs.to_vec(), n)?)?;
            match acc.as_mut() {
                None => acc = Some(p),
                Some(a) => a.iter_mut().zip(&p).for_each(|(a, b)| *a += b),
            }
        }
        let k = self.members.len() as f64;
        Ok(acc.unwrap_or_default().into_iter().map(|v| v / k).collect())
    }
}

fn to_class_probs(flat: &[f64]) -> Vec<ClassProbs> {
    assert_eq!(flat.len() % NUM_CLASSES, 0, "classifier must have {NUM_CLASSES} classes");
    flat.chunks(NUM_CLASSES)
        .map(|r| {
            let mut p = [0.0; NUM_CLASSES];
            p.copy_from_slice(r);
            p
        })
        .collect()
}

impl ProbabilisticClassifier for WrnModel<f32> {
    fn input_len(&self) -> usize {
        self.config().input_len()
    }

    fn predict_proba(&self, inputs: &[f32], n: usize) -> Vec<ClassProbs> {
        let x = self.batch(inputs.to_vec(), n).expect("input batch shape");
        to_class_probs(&WrnModel::predict_proba(self, &x).expect("input batch shape"))
    }
}

impl ProbabilisticClassifier for Ensemble {
    fn input_len(&self) -> usize {
        self.members[0].config().input_len()
    }

    fn predict_proba(&self, inputs: &[f32], n: usize) -> Vec<ClassProbs> {
        to_class_probs(&self.predict(inputs, n).expect("input batch shape"))
    }
}

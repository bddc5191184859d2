use ctxnorm::{Error, Result, Tensor};

use crate::model::InputShape;

/// Labelled inputs stored as `[N, C, H·W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub shape: InputShape,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, shape: InputShape) -> Result<Self> {
        let (n, c, l) = inputs.dims3()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
        }
        if c != shape.channels || l != shape.height * shape.width {
            return Err(Error::Shape(format!("inputs {:?} do not match {shape:?}", inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { inputs, labels, classes, shape })
    }

    /// Flat feature vectors `[N, D]` as `[N, D, 1]`.
    pub fn from_features(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, d) = features.dims2()?;
        Self::new(features.reshape(&[n, d, 1])?, labels, classes, InputShape::flat(d))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            shape: self.shape,
        })
    }

    /// Rows as `[N, C·H·W]` feature vectors.
    pub fn flat_features(&self) -> Result<Tensor> {
        let n = self.len();
        self.inputs.clone().reshape(&[n, self.inputs.len() / n.max(1)])
    }
}

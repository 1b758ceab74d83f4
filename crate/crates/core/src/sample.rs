//! Sample and condition types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout of a sample's flat data vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// A point in `D` dimensions.
    Points { dim: usize },
    /// A row-major `height × width × channels` grid.
    Grid {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl Shape {
    pub fn points(dim: usize) -> Self {
        Shape::Points { dim }
    }

    pub fn grid(height: usize, width: usize, channels: usize) -> Self {
        Shape::Grid {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            Shape::Points { dim } => dim,
            Shape::Grid {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Points { dim } => write!(f, "{dim}"),
            Shape::Grid {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
        }
    }
}

/// A finite signal vector with a shape: clean samples, noisy samples and noise all use this type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    data: Vec<f64>,
    shape: Shape,
}

impl Sample {
    pub fn new(data: Vec<f64>, shape: Shape) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample data".into()));
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            data: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_same_shape(&self, other: &Sample) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }
}

/// Conditioning signal: a class id, or the null condition used for unconditional predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition(Option<usize>);

impl Condition {
    pub const NULL: Condition = Condition(None);

    pub fn class(label: usize) -> Self {
        Condition(Some(label))
    }

    pub fn label(&self) -> Option<usize> {
        self.0
    }

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(c) => write!(f, "class {c}"),
            None => write!(f, "null"),
        }
    }
}

/// Learned class-embedding rows plus a fixed all-zeros row for [`Condition::NULL`].
///
/// The table is a view over `(num_classes + 1) * dim` parameters; the null row is the last one
/// and is never trained.
#[derive(Clone, Copy, Debug)]
pub struct ConditionTable<'a> {
    rows: &'a [f64],
    num_classes: usize,
    dim: usize,
}

impl<'a> ConditionTable<'a> {
    pub fn new(rows: &'a [f64], num_classes: usize, dim: usize) -> Self {
        debug_assert_eq!(rows.len(), (num_classes + 1) * dim);
        Self {
            rows,
            num_classes,
            dim,
        }
    }

    pub fn row_index(&self, cond: Condition) -> usize {
        match cond.label() {
            Some(c) => {
                assert!(c < self.num_classes, "class {c} out of range");
                c
            }
            None => self.num_classes,
        }
    }

    pub fn embed(&self, cond: Condition) -> &'a [f64] {
        let r = self.row_index(cond);
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(matches!(
            Sample::new(vec![1.0], Shape::points(2)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Sample::new(vec![1.0, f64::NAN], Shape::points(2)),
            Err(Error::NonFinite(_))
        ));
        let g = Sample::new(vec![0.0; 12], Shape::grid(2, 3, 2)).unwrap();
        assert_eq!(g.len(), 12);
    }

    #[test]
    fn null_row_is_last_and_zero() {
        let rows = [1.0, 2.0, 3.0, 4.0, 0.0, 0.0];
        let table = ConditionTable::new(&rows, 2, 2);
        assert_eq!(table.embed(Condition::class(1)), &[3.0, 4.0]);
        assert_eq!(table.embed(Condition::NULL), &[0.0, 0.0]);
    }
}

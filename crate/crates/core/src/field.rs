//! Cell-centered scalar fields and face-centered vector fields.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::DomainGrid;

/// One value per inside cell.
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: Arc<DomainGrid>,
    pub values: Vec<f64>,
}

/// Values on interior x-faces and y-faces. Faces touching the outside carry
/// no unknown, so the normal component there is identically zero.
#[derive(Debug, Clone)]
pub struct VectorField {
    grid: Arc<DomainGrid>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub(crate) fn same_grid(a: &Arc<DomainGrid>, b: &Arc<DomainGrid>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a.same_layout(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

impl ScalarField {
    pub fn new(grid: Arc<DomainGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidShape(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: &Arc<DomainGrid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Arc<DomainGrid>, c: f64) -> Self {
        ScalarField {
            values: vec![c; grid.len()],
            grid: grid.clone(),
        }
    }

    /// Samples `f` at cell centers.
    pub fn from_fn(grid: &Arc<DomainGrid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let [x, y] = grid.center(k);
                f(x, y)
            })
            .collect();
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<DomainGrid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `sum f h^2`, accumulated in cell order.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn mass(&self) -> f64 {
        self.integral()
    }

    pub fn mean(&self) -> f64 {
        self.integral() / self.grid.area()
    }

    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        same_grid(&self.grid, &other.grid)?;
        Ok(self.inner_unchecked(other))
    }

    pub(crate) fn inner_unchecked(&self, other: &ScalarField) -> f64 {
        dot(&self.values, &other.values) * self.grid.cell_area()
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner_unchecked(self).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<ScalarField> {
        same_grid(&self.grid, &other.grid)?;
        Ok(ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> Result<ScalarField> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        self.map(|v| a * v)
    }

    /// Subtracts the mean so that the integral vanishes.
    pub fn zero_mean(&self) -> ScalarField {
        let m = self.values.iter().sum::<f64>() / self.values.len() as f64;
        self.map(|v| v - m)
    }

    /// Rescales to unit mass.
    pub fn normalized(&self) -> Result<ScalarField> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::Invalid(format!("cannot normalize field with mass {m}")));
        }
        Ok(self.scaled(1.0 / m))
    }
}

impl VectorField {
    pub fn zeros(grid: &Arc<DomainGrid>) -> Self {
        VectorField {
            x: vec![0.0; grid.x_faces().len()],
            y: vec![0.0; grid.y_faces().len()],
            grid: grid.clone(),
        }
    }

    pub fn new(grid: Arc<DomainGrid>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != grid.x_faces().len() || y.len() != grid.y_faces().len() {
            return Err(Error::InvalidShape("face count mismatch".into()));
        }
        Ok(VectorField { grid, x, y })
    }

    pub fn grid(&self) -> &Arc<DomainGrid> {
        &self.grid
    }

    /// `sum (vx wx + vy wy) h^2`.
    pub fn inner(&self, other: &VectorField) -> Result<f64> {
        same_grid(&self.grid, &other.grid)?;
        Ok((dot(&self.x, &other.x) + dot(&self.y, &other.y)) * self.grid.cell_area())
    }

    pub fn max_abs(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lo_i, hi_i]` per state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub bounds: Vec<[f64; 2]>,
}

impl DomainBox {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::invalid("domain_box", "box has no dimensions"));
        }
        for (i, [lo, hi]) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(Error::invalid(
                    format!("domain_box[{i}]"),
                    format!("degenerate interval [{lo}, {hi}]"),
                ));
            }
        }
        Ok(Self { bounds })
    }

    /// The same symmetric interval `[-half, half]` in every dimension.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![[-half_width, half_width]; dim])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn lo(&self, i: usize) -> f64 {
        self.bounds[i][0]
    }

    pub fn hi(&self, i: usize) -> f64 {
        self.bounds[i][1]
    }

    pub fn width(&self, i: usize) -> f64 {
        self.bounds[i][1] - self.bounds[i][0]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }

    pub fn clamp(&self, x: &DVector<f64>) -> (DVector<f64>, bool) {
        let mut clamped = false;
        let y = DVector::from_iterator(
            x.len(),
            x.iter().zip(&self.bounds).map(|(v, [lo, hi])| {
                let c = v.clamp(*lo, *hi);
                if c != *v {
                    clamped = true;
                }
                c
            }),
        );
        (y, clamped)
    }

    /// Distance from the origin to the farthest corner.
    pub fn max_corner_norm(&self) -> f64 {
        self.bounds
            .iter()
            .map(|[lo, hi]| lo.abs().max(hi.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Smallest half-width over all dimensions.
    pub fn min_half_width(&self) -> f64 {
        (0..self.dim())
            .map(|i| 0.5 * self.width(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.bounds
                .iter()
                .map(|[lo, hi]| rng.random_range(*lo..*hi)),
        )
    }
}

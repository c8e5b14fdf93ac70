//! Row-major `steps × channels` grids.

use crate::error::{Error, Result};

/// A dense time × channel grid stored row-major (one row per time step).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    steps: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(steps: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if steps == 0 || channels == 0 {
            return Err(Error::Empty("grid needs at least one step and one channel"));
        }
        if data.len() != steps * channels {
            return Err(Error::Shape(format!("{} values for a {steps}x{channels} grid", data.len())));
        }
        Ok(Self { steps, channels, data })
    }

    pub fn filled(steps: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(steps, channels, vec![value; steps * channels])
    }

    /// Builds a grid from per-channel columns of equal length.
    pub fn from_columns(columns: &[Vec<T>]) -> Result<Self> {
        let channels = columns.len();
        let steps = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != steps) {
            return Err(Error::MismatchedDurations(columns.iter().map(Vec::len).collect()));
        }
        let mut data = Vec::with_capacity(steps * channels);
        for t in 0..steps {
            data.extend(columns.iter().map(|c| c[t]));
        }
        Self::new(steps, channels, data)
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize) -> T {
        self.data[t * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, value: T) {
        self.data[t * self.channels + c] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.steps).map(|t| self.get(t, c)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<T>> {
        (0..self.channels).map(|c| self.column(c)).collect()
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { steps: self.steps, channels: self.channels, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

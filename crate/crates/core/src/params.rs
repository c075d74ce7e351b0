//! Flat parameter storage with a named layer layout.
//!
//! Policies, critics, optimizer moments, and gradients all share this
//! representation: a flat `Vec<f64>` plus an immutable layout describing
//! where each named block (weight matrix, bias, log-std head) lives. The
//! optimizers only need elementwise arithmetic and norms; the networks
//! use the named views.

use std::fmt;
use std::sync::Arc;

/// One named block inside a [`ParamVector`]. `rows == 0` is not allowed;
/// vectors (biases) use `cols == 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable layout shared by every vector of the same architecture.
#[derive(Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayerSpec>,
    total: usize,
}

impl ParamLayout {
    /// Build a layout from `(name, rows, cols)` blocks, packed in order.
    pub fn new(blocks: &[(&str, usize, usize)]) -> Arc<Self> {
        let mut entries = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for &(name, rows, cols) in blocks {
            assert!(rows > 0 && cols > 0, "zero-sized layer {name}");
            entries.push(LayerSpec {
                name: name.to_string(),
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        }
        Arc::new(Self {
            entries,
            total: offset,
        })
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayerSpec] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<&LayerSpec> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat 64-bit parameter vector with a named layout.
#[derive(Clone)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ParamVector({} values, {} layers)",
            self.values.len(),
            self.layout.entries.len()
        )
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), layout.total_len(), "layout/value mismatch");
        Self { layout, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Named read-only view, e.g. `view("w1")`.
    pub fn view(&self, name: &str) -> Option<&[f64]> {
        let spec = self.layout.find(name)?;
        Some(&self.values[spec.offset..spec.offset + spec.len()])
    }

    pub fn view_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.find(name)?.clone();
        Some(&mut self.values[spec.offset..spec.offset + spec.len()])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn fill(&mut self, x: f64) {
        self.values.iter_mut().for_each(|v| *v = x);
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ParamVector {
        let layout = ParamLayout::new(&[("w", 2, 3), ("b", 2, 1)]);
        ParamVector::zeros(layout)
    }

    #[test]
    fn layout_packs_in_order() {
        let p = small();
        assert_eq!(p.len(), 8);
        let w = p.layout().find("w").unwrap();
        let b = p.layout().find("b").unwrap();
        assert_eq!((w.offset, w.len()), (0, 6));
        assert_eq!((b.offset, b.len()), (6, 2));
    }

    #[test]
    fn views_alias_the_flat_buffer() {
        let mut p = small();
        p.view_mut("b").unwrap()[1] = 7.0;
        assert_eq!(p.values()[7], 7.0);
        assert_eq!(p.view("b").unwrap(), &[0.0, 7.0]);
    }

    #[test]
    fn norm_and_axpy() {
        let mut p = small();
        p.fill(2.0);
        assert!((p.norm2() - (8.0f64 * 4.0).sqrt()).abs() < 1e-15);
        let q = p.clone();
        p.add_scaled(&q, -1.0);
        assert_eq!(p.norm2(), 0.0);
    }
}

//! Per-pixel category maps with a reserved no-label sentinel.

use crate::error::{shape_err, value_err, Result};

/// Sentinel marking pixels excluded from losses and evaluation.
pub const NO_LABEL: u8 = 255;

/// Per-pixel label map. Values are class indices in `0..C-1` or [`NO_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(value_err!("label map dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(shape_err!(
                "label data length {} does not match {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(LabelMap { width, height, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { width, height, data: vec![value; height * width] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Number of pixels carrying a real label.
    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != NO_LABEL).count()
    }

    /// Errors if any label is outside `0..num_classes` (NO_LABEL allowed).
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != NO_LABEL && (v as usize) >= num_classes {
                return Err(value_err!("label {v} out of range for {num_classes} classes"));
            }
        }
        Ok(())
    }
}

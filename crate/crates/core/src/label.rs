//! Dense per-pixel class labels.

use crate::tensor::nearest_index_map;

/// Marker for pixels excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "label map data does not match {h}x{w}");
        LabelMap { h, w, data }
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        LabelMap { h, w, data: vec![value; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.w + x] = value;
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_LABEL).count()
    }

    /// Nearest-neighbor resize, matching the index mapping used for tensors so
    /// labels and feature maps stay aligned after downsampling.
    pub fn resize_nearest(&self, nh: usize, nw: usize) -> LabelMap {
        if nh == self.h && nw == self.w {
            return self.clone();
        }
        let rows = nearest_index_map(self.h, nh);
        let cols = nearest_index_map(self.w, nw);
        let mut data = Vec::with_capacity(nh * nw);
        for &sy in &rows {
            for &sx in &cols {
                data.push(self.data[sy * self.w + sx]);
            }
        }
        LabelMap { h: nh, w: nw, data }
    }
}

//! Padded row-major layout arithmetic.
//!
//! Tensors are stored row-major with the last dimension padded to a
//! multiple of four elements, so every row begins on a 128-bit boundary.

use crate::error::{Error, Result};

/// Physical extent of the last dimension: ceil(last / 4) * 4.
pub fn physical_last(last: usize) -> usize {
    last.div_ceil(4) * 4
}

/// Number of padded rows: the product of all but the last extent.
pub fn row_count(shape: &[usize]) -> usize {
    match shape.len() {
        0 => 0,
        1 => 1,
        _ => shape[..shape.len() - 1].iter().product(),
    }
}

pub fn last_extent(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(0)
}

pub fn elem_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Physical element count including pad lanes.
pub fn physical_count(shape: &[usize]) -> usize {
    row_count(shape) * physical_last(last_extent(shape))
}

/// Map a logical index to its physical element offset.
pub fn layout_map(shape: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != shape.len() || shape.is_empty() {
        return Err(Error::Shape(format!(
            "layout_map: index rank {} does not match shape rank {}",
            index.len(),
            shape.len()
        )));
    }
    for (d, (&i, &ext)) in index.iter().zip(shape).enumerate() {
        if i >= ext {
            return Err(Error::Shape(format!(
                "layout_map: index {i} out of range for extent {ext} in dimension {d}"
            )));
        }
    }
    let mut row = 0;
    for d in 0..shape.len() - 1 {
        row = row * shape[d] + index[d];
    }
    Ok(row * physical_last(last_extent(shape)) + index[shape.len() - 1])
}

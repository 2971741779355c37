use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// A named contiguous slice of a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn new(name: impl Into<String>, start: usize, len: usize) -> Self {
        Self {
            name: name.into(),
            start,
            len,
        }
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Flat model parameters with a block layout that partitions `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    data: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParameterVector {
    pub fn new(data: Vec<f64>, blocks: Vec<Block>) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid!("parameter vector must not be empty"));
        }
        validate_layout(&blocks, data.len())?;
        Ok(Self { data, blocks })
    }

    /// One block named `theta` covering everything.
    pub fn single(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        Self::new(data, vec![Block::new("theta", 0, len)])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.data[b.range()])
    }

    /// Replaces the values, keeping the layout.
    pub fn with_values(&self, data: Vec<f64>) -> Result<Self> {
        crate::error::check_len(self.data.len(), data.len())?;
        Ok(Self {
            data,
            blocks: self.blocks.clone(),
        })
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

pub(crate) fn validate_layout(blocks: &[Block], len: usize) -> Result<()> {
    if blocks.is_empty() {
        return Err(invalid!("block layout must contain at least one block"));
    }
    let mut sorted: Vec<&Block> = blocks.iter().collect();
    sorted.sort_by_key(|b| b.start);
    let mut cursor = 0;
    for b in sorted {
        if b.len == 0 {
            return Err(invalid!("block '{}' is empty", b.name));
        }
        if b.start != cursor {
            return Err(invalid!(
                "blocks must partition 0..{len} without gaps or overlap (block '{}' starts at {}, expected {cursor})",
                b.name,
                b.start
            ));
        }
        cursor += b.len;
    }
    if cursor != len {
        return Err(invalid!("blocks cover 0..{cursor} but the vector has length {len}"));
    }
    Ok(())
}

pub(crate) fn default_layout(len: usize) -> Vec<Block> {
    vec![Block::new("theta".to_string(), 0, len)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_overlap_and_gaps() {
        let data = vec![0.0; 4];
        assert!(ParameterVector::new(data.clone(), vec![Block::new("a", 0, 3), Block::new("b", 2, 2)]).is_err());
        assert!(ParameterVector::new(data.clone(), vec![Block::new("a", 0, 1), Block::new("b", 2, 2)]).is_err());
        assert!(ParameterVector::new(data.clone(), vec![Block::new("a", 0, 3)]).is_err());
        let ok = ParameterVector::new(data, vec![Block::new("b", 2, 2), Block::new("a", 0, 2)]).unwrap();
        assert_eq!(ok.block("b"), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn rejects_empty() {
        assert!(ParameterVector::single(vec![]).is_err());
    }
}

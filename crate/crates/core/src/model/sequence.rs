use super::ModelError;

/// An ordered list of `dim`-wide item embeddings stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    dim: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(ModelError::Shape(format!("{} values do not form {dim}-wide embeddings", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        Self { dim, data: vec![0.0; dim * len] }
    }

    pub fn from_items(dim: usize, items: &[Vec<f64>]) -> Result<Self, ModelError> {
        if let Some(bad) = items.iter().find(|e| e.len() != dim) {
            return Err(ModelError::Shape(format!("embedding of width {} in a {dim}-wide sequence", bad.len())));
        }
        Self::new(dim, items.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn items(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Items `range` as a new sequence.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self { dim: self.dim, data: self.data[range.start * self.dim..range.end * self.dim].to_vec() }
    }

    pub fn push(&mut self, embedding: &[f64]) -> Result<(), ModelError> {
        if embedding.len() != self.dim {
            return Err(ModelError::Shape(format!(
                "embedding of width {} pushed to a {}-wide sequence",
                embedding.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(embedding);
        Ok(())
    }
}

/// Contiguous equal partition into `num_blocks` sub-sequences.
pub fn split_sequence(history: &TokenSequence, num_blocks: usize) -> Result<Vec<TokenSequence>, ModelError> {
    let len = history.len();
    if num_blocks == 0 || !len.is_multiple_of(num_blocks) {
        return Err(ModelError::Indivisible { len, blocks: num_blocks });
    }
    let part = len / num_blocks;
    Ok((0..num_blocks).map(|b| history.slice(b * part..(b + 1) * part)).collect())
}

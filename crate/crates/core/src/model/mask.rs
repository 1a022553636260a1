//! Attention permission masks.

/// Which key positions each query position may attend to.
pub trait AttentionMask {
    /// Side length of the square mask.
    fn size(&self) -> usize;

    fn allows(&self, query: usize, key: usize) -> bool;

    /// Whether any key in `keys` is visible from `query`. Tiled kernels use
    /// this to skip whole tiles.
    fn allows_any(&self, query: usize, keys: std::ops::Range<usize>) -> bool {
        keys.into_iter().any(|k| self.allows(query, k))
    }
}

/// Causal history followed by mutually isolated candidates.
///
/// Rows `i < hist_len` see keys `j <= i`. Candidate rows see the whole
/// history and themselves, never another candidate, which makes each
/// candidate's output independent of which other candidates share the pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SumiMask {
    hist_len: usize,
    cand_count: usize,
}

impl SumiMask {
    pub fn new(hist_len: usize, cand_count: usize) -> Self {
        Self { hist_len, cand_count }
    }

    pub fn hist_len(&self) -> usize {
        self.hist_len
    }

    pub fn cand_count(&self) -> usize {
        self.cand_count
    }

    /// Number of visible keys for `query`.
    pub fn row_count(&self, query: usize) -> usize {
        if query < self.hist_len {
            query + 1
        } else {
            self.hist_len + 1
        }
    }

    /// Total number of `true` entries.
    pub fn allowed_pairs(&self) -> usize {
        let h = self.hist_len;
        h * (h + 1) / 2 + self.cand_count * (h + 1)
    }

    pub fn to_dense(&self) -> DenseMask {
        let n = self.size();
        DenseMask::from_fn(n, |i, j| self.allows(i, j))
    }
}

impl AttentionMask for SumiMask {
    fn size(&self) -> usize {
        self.hist_len + self.cand_count
    }

    #[inline]
    fn allows(&self, query: usize, key: usize) -> bool {
        if query < self.hist_len {
            key <= query
        } else {
            key < self.hist_len || key == query
        }
    }

    #[inline]
    fn allows_any(&self, query: usize, keys: std::ops::Range<usize>) -> bool {
        if keys.is_empty() {
            return false;
        }
        if query < self.hist_len {
            keys.start <= query
        } else {
            keys.start < self.hist_len || keys.contains(&query)
        }
    }
}

/// A materialized boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseMask {
    size: usize,
    allowed: Vec<bool>,
}

impl DenseMask {
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(f(i, j));
            }
        }
        Self { size, allowed }
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.size..(i + 1) * self.size]
    }
}

impl AttentionMask for DenseMask {
    fn size(&self) -> usize {
        self.size
    }

    #[inline]
    fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }
}

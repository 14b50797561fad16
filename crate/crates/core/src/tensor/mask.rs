use std::rc::Rc;

/// Allow/deny matrix for attention, `rows` queries by `cols` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Rc<Vec<bool>>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        AttentionMask {
            rows,
            cols,
            allow: Rc::new(allow),
        }
    }

    /// Every position sees every position.
    pub fn full(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| true)
    }

    /// Position `i` sees positions `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Bidirectional inside the first `prefix` positions, causal after them;
    /// the prefix is visible to every position.
    pub fn prefix_causal(n: usize, prefix: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i < prefix { j < prefix } else { j <= i })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

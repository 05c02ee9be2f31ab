/// Per-row, per-pair rotation angles for rotary embeddings.
///
/// Row `r`, pair `k` rotates features `(2k, 2k+1)` by the angle whose cosine
/// and sine are stored at `r * dim / 2 + k`. The tape treats the table as a
/// constant linear map; its transpose is the inverse rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    rows: usize,
    dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    /// Builds a table from per-row pair angles, `angles.len() == rows * dim / 2`.
    pub fn from_angles(rows: usize, dim: usize, angles: &[f64]) -> Self {
        assert!(dim % 2 == 0, "rotary width must be even");
        assert_eq!(angles.len(), rows * dim / 2);
        Self {
            rows,
            dim,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rotates `x` (rows × dim, row-major) into `out`; `inverse` applies the
    /// opposite rotation.
    pub fn apply(&self, x: &[f64], out: &mut [f64], inverse: bool) {
        let half = self.dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for r in 0..self.rows {
            for k in 0..half {
                let (c, s) = (self.cos[r * half + k], sign * self.sin[r * half + k]);
                let i = r * self.dim + 2 * k;
                let (a, b) = (x[i], x[i + 1]);
                out[i] = a * c - b * s;
                out[i + 1] = a * s + b * c;
            }
        }
    }
}

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{FuseError, Result};

/// Maximum allowed deviation of a row sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-9;

const PDM_MAGIC: &[u8; 4] = b"PDM1";
const PDM_DTYPE_F64: u32 = 1;
const PDM_HEADER_LEN: usize = 16;

/// A token sequence over a vocabulary of known size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(FuseError::Dimension("token sequence must be nonempty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(FuseError::Vocabulary { id, vocab });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// An N×V row-stochastic matrix: row `n` is a distribution over the next token
/// at position `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    values: Array2<f64>,
}

impl ProbMatrix {
    /// Validates nonnegativity, finiteness and row sums.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(FuseError::InvalidDistribution(format!(
                "empty matrix {rows}x{cols}"
            )));
        }
        for (n, row) in values.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for (v, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(FuseError::InvalidDistribution(format!(
                        "non-finite entry at ({n}, {v})"
                    )));
                }
                if x < 0.0 {
                    return Err(FuseError::InvalidDistribution(format!(
                        "negative entry {x} at ({n}, {v})"
                    )));
                }
                sum += x;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(FuseError::InvalidDistribution(format!(
                    "row {n} sums to {sum}"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Builds a matrix from raw nonnegative rows, dividing each row by its sum.
    pub fn normalized(mut values: Array2<f64>) -> Result<Self> {
        for mut row in values.rows_mut() {
            let sum: f64 = row.sum();
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(FuseError::InvalidDistribution(format!(
                    "cannot normalize row with mass {sum}"
                )));
            }
            row.mapv_inplace(|x| x / sum);
        }
        Self::new(values)
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            values: Array2::from_elem((rows, cols), 1.0 / cols as f64),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.values.row(n)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<ProbMatrix> {
        if range.start >= range.end || range.end > self.rows() {
            return Err(FuseError::Dimension(format!(
                "row range {range:?} outside 0..{}",
                self.rows()
            )));
        }
        Ok(Self {
            values: self
                .values
                .slice(ndarray::s![range.start..range.end, ..])
                .to_owned(),
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[ProbMatrix]) -> Result<ProbMatrix> {
        let Some(first) = parts.first() else {
            return Err(FuseError::Dimension("nothing to stack".into()));
        };
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if parts.iter().any(|p| p.cols() != first.cols()) {
            return Err(FuseError::Dimension("column counts differ".into()));
        }
        let values = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| FuseError::Dimension(e.to_string()))?;
        Ok(Self { values })
    }

    pub fn to_pdm_bytes(&self) -> Vec<u8> {
        let (n, v) = self.dim();
        let mut out = Vec::with_capacity(PDM_HEADER_LEN + 8 * n * v);
        out.extend_from_slice(PDM_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(&PDM_DTYPE_F64.to_le_bytes());
        for x in self.values.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_pdm_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < PDM_HEADER_LEN {
            return Err(FuseError::format(path, "truncated header"));
        }
        if &bytes[0..4] != PDM_MAGIC {
            return Err(FuseError::format(path, "bad magic, expected PDM1"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (n, v, dtype) = (word(4), word(8), word(12) as u32);
        if dtype != PDM_DTYPE_F64 {
            return Err(FuseError::format(path, format!("unsupported dtype code {dtype}")));
        }
        let expected = PDM_HEADER_LEN + 8 * n * v;
        if bytes.len() != expected {
            return Err(FuseError::format(
                path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let data: Vec<f64> = bytes[PDM_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = Array2::from_shape_vec((n, v), data)
            .map_err(|e| FuseError::format(path, e.to_string()))?;
        Self::new(values).map_err(|e| FuseError::format(path, e.to_string()))
    }

    pub fn write_pdm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| FuseError::io(path, e))?;
        file.write_all(&self.to_pdm_bytes())
            .map_err(|e| FuseError::io(path, e))
    }

    pub fn read_pdm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FuseError::io(path, e))?;
        Self::from_pdm_bytes(&bytes, path)
    }
}

/// One-hot label matrix stored sparsely as the hot index per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotLabels {
    ids: Vec<usize>,
    vocab: usize,
}

impl OneHotLabels {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(FuseError::Vocabulary { id, vocab });
        }
        Ok(Self { ids, vocab })
    }

    /// Labels for next-token prediction: row `n` is token `n` of the sequence.
    pub fn from_seq(seq: &TokenSeq, vocab: usize) -> Result<Self> {
        Self::new(seq.ids().to_vec(), vocab)
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn cols(&self) -> usize {
        self.vocab
    }

    pub fn hot(&self, row: usize) -> usize {
        self.ids[row]
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.ids.len(), self.vocab));
        for (n, &id) in self.ids.iter().enumerate() {
            out[[n, id]] = 1.0;
        }
        out
    }
}

/// Supervision target for a row-wise cross-entropy.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Dist(&'a ProbMatrix),
    OneHot(&'a OneHotLabels),
}

impl Target<'_> {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            Target::Dist(p) => p.dim(),
            Target::OneHot(o) => (o.rows(), o.cols()),
        }
    }
}

impl<'a> From<&'a ProbMatrix> for Target<'a> {
    fn from(p: &'a ProbMatrix) -> Self {
        Target::Dist(p)
    }
}

impl<'a> From<&'a OneHotLabels> for Target<'a> {
    fn from(o: &'a OneHotLabels) -> Self {
        Target::OneHot(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_bad_rows() {
        assert!(ProbMatrix::new(array![[0.5, 0.4]]).is_err());
        assert!(ProbMatrix::new(array![[1.5, -0.5]]).is_err());
        assert!(ProbMatrix::new(array![[f64::NAN, 1.0]]).is_err());
        assert!(ProbMatrix::new(array![[0.25, 0.75], [1.0, 0.0]]).is_ok());
    }

    #[test]
    fn token_seq_checks_range() {
        assert!(TokenSeq::new(vec![], 4).is_err());
        assert!(matches!(
            TokenSeq::new(vec![1, 4], 4),
            Err(FuseError::Vocabulary { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn pdm_header_layout() {
        let m = ProbMatrix::new(array![[0.25, 0.75], [1.0, 0.0], [0.5, 0.5]]).unwrap();
        let bytes = m.to_pdm_bytes();
        assert_eq!(&bytes[..4], b"PDM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0.25);
        let back = ProbMatrix::from_pdm_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pdm_reader_validates_rows() {
        let m = ProbMatrix::uniform(2, 2);
        let mut bytes = m.to_pdm_bytes();
        bytes[16..24].copy_from_slice(&0.9f64.to_le_bytes());
        let err = ProbMatrix::from_pdm_bytes(&bytes, Path::new("x.pdm")).unwrap_err();
        assert!(err.to_string().contains("x.pdm"));
        bytes[0] = b'Q';
        assert!(ProbMatrix::from_pdm_bytes(&bytes, Path::new("x.pdm")).is_err());
    }

    #[test]
    fn one_hot_dense() {
        let o = OneHotLabels::new(vec![2, 0], 3).unwrap();
        assert_eq!(o.to_dense(), array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
    }
}

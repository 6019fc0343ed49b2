//! Dense row-major matrices and named parameter collections.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Row-major `rows x cols` matrix of 64-bit values. One row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::shape(
                "matrix construction",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ModelError> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ModelError::shape(
                    format!("row {i}"),
                    format!("{cols} columns"),
                    format!("{} columns", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        ParamEntry {
            name: name.into(),
            shape,
            values: vec![0.0; len],
        }
    }
}

/// Ordered, named collection of parameter arrays.
///
/// Two sets built from the same [`super::ModelConfig`] share names and shapes in
/// the same order, so elementwise arithmetic walks them in lockstep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self, ModelError> {
        for e in &entries {
            let len: usize = e.shape.iter().product();
            if len != e.values.len() {
                return Err(ModelError::shape(
                    format!("parameter `{}`", e.name),
                    format!("{len} values for shape {:?}", e.shape),
                    format!("{} values", e.values.len()),
                ));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub(crate) fn values(&self, index: usize) -> &[f64] {
        &self.entries[index].values
    }

    pub(crate) fn values_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.entries[index].values
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry::zeros(e.name.clone(), e.shape.clone()))
                .collect(),
        }
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.values.iter().all(|v| v.is_finite()))
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), ModelError> {
        if self.entries.len() != other.entries.len() {
            return Err(ModelError::shape(
                "parameter set",
                format!("{} entries", self.entries.len()),
                format!("{} entries", other.entries.len()),
            ));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(ModelError::shape(
                    "parameter set",
                    format!("`{}` {:?}", a.name, a.shape),
                    format!("`{}` {:?}", b.name, b.shape),
                ));
            }
        }
        Ok(())
    }

    /// Iterates all scalars in entry order.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.values.iter().copied())
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.entries.iter_mut().flat_map(|e| e.values.iter_mut())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<(), ModelError> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64, ModelError> {
        self.check_compatible(other)?;
        Ok(self
            .flat()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Elementwise `sum_i coeffs[i] * sets[i]`.
///
/// The accumulator starts at zero and adds terms in list order, so the result
/// is reproducible bit for bit for a fixed input order.
pub fn linear_combine(sets: &[&ParamSet], coeffs: &[f64]) -> Result<ParamSet, ModelError> {
    let first = sets.first().ok_or(ModelError::Empty)?;
    if sets.len() != coeffs.len() {
        return Err(ModelError::shape(
            "linear_combine",
            format!("{} coefficients", sets.len()),
            format!("{} coefficients", coeffs.len()),
        ));
    }
    let mut out = first.zeros_like();
    for (set, &c) in sets.iter().zip(coeffs) {
        out.add_scaled(set, c)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: f64, b: f64) -> ParamSet {
        ParamSet::new(vec![ParamEntry {
            name: "w".into(),
            shape: vec![2],
            values: vec![a, b],
        }])
        .unwrap()
    }

    #[test]
    fn combine_identity() {
        let p = pair(1.25, -3.5);
        assert_eq!(linear_combine(&[&p], &[1.0]).unwrap(), p);
        assert_eq!(linear_combine(&[&p, &p], &[0.5, 0.5]).unwrap(), p);
    }

    #[test]
    fn combine_elementwise_mean() {
        let a = pair(1.0, 3.0);
        let b = pair(3.0, 5.0);
        let m = linear_combine(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(m, pair(2.0, 4.0));
    }

    #[test]
    fn combine_errors() {
        assert!(matches!(linear_combine(&[], &[]), Err(ModelError::Empty)));
        let a = pair(1.0, 2.0);
        let b = ParamSet::new(vec![ParamEntry::zeros("w", vec![3])]).unwrap();
        assert!(linear_combine(&[&a, &b], &[1.0, 1.0]).is_err());
        assert!(linear_combine(&[&a], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bad_entry_length_rejected() {
        let e = ParamEntry {
            name: "w".into(),
            shape: vec![2, 2],
            values: vec![0.0; 3],
        };
        assert!(ParamSet::new(vec![e]).is_err());
    }
}

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Ordered, uniquely named collection of tensors with flat-index addressing.
///
/// The flat index of a value is its offset in the concatenation of all entries
/// in insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterVector {
    entries: Vec<(String, Tensor)>,
}

impl ParameterVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut pv = Self::new();
        for (name, t) in entries {
            pv.push(name, t)?;
        }
        Ok(pv)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Data(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero-filled vector with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Checks that names and shapes agree entry by entry.
    pub fn expect_same_layout(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return shape_err(format!(
                "parameter vectors have {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return shape_err(format!("entry `{na}` {:?} vs `{nb}` {:?}", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.entries.iter_mut().flat_map(|(_, t)| t.data_mut().iter_mut())
    }

    fn locate(&self, index: usize) -> Option<(usize, usize)> {
        let mut offset = index;
        for (i, (_, t)) in self.entries.iter().enumerate() {
            if offset < t.len() {
                return Some((i, offset));
            }
            offset -= t.len();
        }
        None
    }

    pub fn get_flat(&self, index: usize) -> Option<f64> {
        self.locate(index).map(|(e, o)| self.entries[e].1.data()[o])
    }

    pub fn set_flat(&mut self, index: usize, value: f64) -> Result<()> {
        let (e, o) = self
            .locate(index)
            .ok_or_else(|| Error::Shape(format!("flat index {index} out of range")))?;
        self.entries[e].1.data_mut()[o] = value;
        Ok(())
    }

    /// Name of the entry holding flat index `index`.
    pub fn name_of_flat(&self, index: usize) -> Option<&str> {
        self.locate(index).map(|(e, _)| self.entries[e].0.as_str())
    }

    /// Elementwise combination of two identically laid out vectors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_layout(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.zip_map(b, &f)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_addressing_spans_entries() {
        let pv = ParameterVector::from_entries(vec![
            ("a".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            ("b".into(), Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap()),
        ])
        .unwrap();
        assert_eq!(pv.total_len(), 5);
        assert_eq!(pv.get_flat(3), Some(4.0));
        assert_eq!(pv.name_of_flat(1), Some("a"));
        assert_eq!(pv.name_of_flat(2), Some("b"));
        assert_eq!(pv.get_flat(5), None);
        assert_eq!(pv.flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut pv = ParameterVector::new();
        pv.push("w", Tensor::scalar(1.0)).unwrap();
        assert!(pv.push("w", Tensor::scalar(2.0)).is_err());
    }
}

use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"SSNP1\n";

/// Ordered, named collection of parameter tensors for one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Register every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Register every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.input(t.clone())).collect()
    }

    /// Gradients for bound parameters, zero-filled where nothing flowed.
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, v)| grads.get_or_zeros(*v, t))
            .collect()
    }

    /// Flat copy of every scalar, in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        write_tensors(&mut out, &self.names, &self.tensors);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| NnError::Blob("bad magic".into()))?;
        let mut r = Reader { buf: rest, pos: 0 };
        let (names, tensors) = read_tensors(&mut r)?;
        if r.pos != rest.len() {
            return Err(NnError::Blob("trailing bytes".into()));
        }
        Ok(Self { names, tensors })
    }
}

pub(crate) fn write_tensors(out: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NnError::Blob("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub(crate) fn read_tensors(r: &mut Reader<'_>) -> Result<(Vec<String>, Vec<Tensor>)> {
    let count = r.u64()? as usize;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| NnError::Blob("name is not utf-8".into()))?;
        let rank = r.u64()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel > r.buf.len() / 8 {
            return Err(NnError::Blob("tensor larger than blob".into()));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok((names, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut ps = ParamSet::new();
            ps.push("a", Tensor::new(vec![split], values[..split].to_vec()).unwrap());
            ps.push("b.weight", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap());
            let back = ParamSet::from_bytes(&ps.to_bytes()).unwrap();
            prop_assert_eq!(back, ps);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::full(vec![3], 1.5));
        let bytes = ps.to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParamSet::from_bytes(b"nope").is_err());
    }
}

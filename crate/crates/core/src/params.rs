use alloc::string::{String, ToString};
use alloc::vec::Vec;

use core::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

static NEXT_UID: AtomicUsize = AtomicUsize::new(1);

fn fresh_uid() -> usize {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Named, ordered collection of learnable tensors. The trainability flag of a
/// parameter is its tensor's `requires_grad`.
///
/// Every store, clones included, carries a process-unique tag so a graph can
/// tell parameters with equal ids from different stores apart.
#[derive(Debug)]
pub struct ParamStore {
    uid: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: fresh_uid(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn uid(&self) -> usize {
        self.uid
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::invalid(alloc::format!("duplicate parameter `{name}`")));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].set_requires_grad(flag);
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(flag);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::len)
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Replaces the payload of an existing parameter, keeping its flag.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape(
                "assign",
                alloc::format!("{:?} vs {:?}", cur.shape(), value.shape()),
            ));
        }
        cur.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian payloads, in store order.
    pub fn content_hash(&self) -> [u8; 32] {
        self.hash_of(self.ids())
    }

    pub fn hash_of(&self, ids: impl IntoIterator<Item = ParamId>) -> [u8; 32] {
        let mut h = Sha256::new();
        for id in ids {
            let t = &self.tensors[id.0];
            h.update(self.names[id.0].as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.le_bytes());
        }
        h.finalize().into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![2])).unwrap();
        let h0 = s.content_hash();
        s.get_mut(id).data_mut()[1] = 1.0;
        assert_ne!(h0, s.content_hash());
        assert_eq!(hex(&[0xab, 0x01]), "ab01");
    }
}

//! Named parameter store with checkpoint persistence.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::tensor_io::{self, Tensor};

/// Parameter name → real tensor, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Result<(), ModelError> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(ModelError::Params(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, value.as_standard_layout().into_owned());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Same names, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        tensor_io::encode_checkpoint(&self.records())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_records(tensor_io::decode_checkpoint(bytes)?)
    }

    fn records(&self) -> Vec<(String, Tensor)> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::from_real_array(v)))
            .collect()
    }

    fn from_records(records: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut p = Self::new();
        for (name, t) in records {
            let arr = t
                .to_real_array()
                .ok_or_else(|| ModelError::Params(format!("parameter {name} is not real")))?;
            p.insert(name, arr)?;
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(tensor_io::write_checkpoint(path, &self.records())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_records(tensor_io::read_checkpoint(path)?)
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

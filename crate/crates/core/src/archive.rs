//! Named-array archive: one named little-endian `f32` entry per tensor,
//! behind a JSON header listing names and shapes (the safetensors layout).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrayArchive {
    entries: BTreeMap<String, StoredArray>,
    metadata: BTreeMap<String, String>,
}

const PACKED_METADATA: &str = "dynprompt";

fn archive_err(e: impl std::fmt::Display) -> Error {
    Error::Archive(e.to_string())
}

impl NamedArrayArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("entry {name}: shape {shape:?} does not match {} values", data.len())));
        }
        self.entries.insert(name, StoredArray { shape, data });
        Ok(())
    }

    pub fn insert<D: ndarray::Dimension>(&mut self, name: impl Into<String>, array: &ndarray::Array<f64, D>) {
        let shape = array.shape().to_vec();
        let data = array.iter().map(|&v| v as f32).collect();
        self.entries.insert(name.into(), StoredArray { shape, data });
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, name: &str) -> Result<&StoredArray> {
        self.entries.get(name).ok_or_else(|| Error::NotFound(format!("archive entry {name}")))
    }

    pub fn get_dyn(&self, name: &str) -> Result<ArrayD<f64>> {
        let e = self.raw(name)?;
        ArrayD::from_shape_vec(IxDyn(&e.shape), e.data.iter().map(|&v| v as f64).collect()).map_err(archive_err)
    }

    pub fn get1(&self, name: &str) -> Result<Array1<f64>> {
        self.get_dyn(name)?.into_dimensionality().map_err(|e| Error::Archive(format!("{name}: {e}")))
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f64>> {
        self.get_dyn(name)?.into_dimensionality().map_err(|e| Error::Archive(format!("{name}: {e}")))
    }

    pub fn get3(&self, name: &str) -> Result<Array3<f64>> {
        self.get_dyn(name)?.into_dimensionality().map_err(|e| Error::Archive(format!("{name}: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.data.iter().flat_map(|f| f.to_le_bytes()).collect(), v.shape.clone()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| Ok((k.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(archive_err)?)))
            .collect::<Result<Vec<_>>>()?;
        // one packed key keeps the header byte-stable; the writer iterates a HashMap
        let meta = if self.metadata.is_empty() {
            None
        } else {
            let packed = serde_json::to_string(&self.metadata).map_err(archive_err)?;
            Some(HashMap::from([(PACKED_METADATA.to_string(), packed)]))
        };
        safetensors::serialize(views, meta).map_err(archive_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(archive_err)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(archive_err)?;
        let mut out = Self::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Archive(format!("entry {name} is {:?}, expected F32", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.entries.insert(name, StoredArray { shape: view.shape().to_vec(), data });
        }
        if let Some(meta) = header.metadata() {
            out.metadata = match meta.get(PACKED_METADATA) {
                Some(packed) => serde_json::from_str(packed).map_err(archive_err)?,
                None => meta.clone().into_iter().collect(),
            };
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

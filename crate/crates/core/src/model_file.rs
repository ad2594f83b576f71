//! Trained models stored in the same container as datasets: the
//! architecture and run summary in the manifest, one tensor per weight,
//! bias and kernel block in parameter order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::deeponet::{Architecture, DeepONetModel, ModelError};
use crate::linalg::Matrix;
use crate::nets::Fcn;
use crate::train::Mode;

pub const MODEL_FORMAT: &str = "deeponet-model-v1";

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelFileError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub format: String,
    pub architecture: Architecture,
    pub mode: Mode,
    pub final_wu: usize,
    /// λ of the last metrics row.
    pub final_lambda: f64,
    /// Term weights the model was trained with, if they differ from the dataset's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub meta: ModelMeta,
    pub model: DeepONetModel,
}

fn push_fcn(c: &mut Container, prefix: &str, net: &Fcn) {
    for (k, l) in net.layers.iter().enumerate() {
        c.push(format!("{prefix}{k}.w"), l.w.clone());
        if let Some(b) = &l.b {
            c.push(format!("{prefix}{k}.b"), Matrix::from_rows(&[b]));
        }
    }
}

fn take(c: &Container, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let m = c.get(name)?;
    if m.shape() != (rows, cols) {
        return Err(ModelFileError::Format(format!(
            "tensor {name} is {}x{}, architecture needs {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m.clone())
}

fn read_fcn(c: &Container, prefix: &str, net: &mut Fcn) -> Result<()> {
    for (k, l) in net.layers.iter_mut().enumerate() {
        l.w = take(c, &format!("{prefix}{k}.w"), l.w.rows(), l.w.cols())?;
        if let Some(b) = &mut l.b {
            *b = take(c, &format!("{prefix}{k}.b"), 1, b.len())?.data().to_vec();
        }
    }
    Ok(())
}

impl SavedModel {
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_value(&self.meta).map_err(ContainerError::from)?;
        let mut c = Container::new(meta);
        if let Some(cnn) = &self.model.branch_conv {
            for (k, l) in cnn.layers.iter().enumerate() {
                let block = l.in_ch * l.kernel.0 * l.kernel.1;
                let kernels = Matrix::new(l.out_ch, block, l.kernels.clone()).map_err(ModelError::from)?;
                c.push(format!("conv{k}.kernels"), kernels);
                if let Some(b) = &l.bias {
                    c.push(format!("conv{k}.b"), Matrix::from_rows(&[b]));
                }
            }
        }
        push_fcn(&mut c, "branch", &self.model.branch_fcn);
        push_fcn(&mut c, "trunk", &self.model.trunk);
        c.push("c", self.model.c.clone());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(c.meta.clone()).map_err(ContainerError::from)?;
        if meta.format != MODEL_FORMAT {
            return Err(ModelFileError::Format(format!("format {:?}, expected {MODEL_FORMAT:?}", meta.format)));
        }
        let mut model = DeepONetModel::new(&meta.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
        if let Some(cnn) = &mut model.branch_conv {
            for (k, l) in cnn.layers.iter_mut().enumerate() {
                let block = l.in_ch * l.kernel.0 * l.kernel.1;
                l.kernels = take(c, &format!("conv{k}.kernels"), l.out_ch, block)?.data().to_vec();
                if let Some(b) = &mut l.bias {
                    *b = take(c, &format!("conv{k}.b"), 1, b.len())?.data().to_vec();
                }
            }
        }
        read_fcn(c, "branch", &mut model.branch_fcn)?;
        read_fcn(c, "trunk", &mut model.trunk)?;
        let (i, j) = model.c.shape();
        model.c = take(c, "c", i, j)?;
        if c.tensors.len() != count_tensors(&model) {
            return Err(ModelFileError::Format("unexpected extra tensors".into()));
        }
        Ok(SavedModel { meta, model })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn count_tensors(m: &DeepONetModel) -> usize {
    let fcn = |f: &Fcn| f.layers.iter().map(|l| 1 + l.b.is_some() as usize).sum::<usize>();
    let conv = m.branch_conv.as_ref().map_or(0, |c| c.layers.iter().map(|l| 1 + l.bias.is_some() as usize).sum());
    conv + fcn(&m.branch_fcn) + fcn(&m.trunk) + 1
}

//! Checkpoint containers, architecture descriptors and the canonical
//! in-memory weight layout.

mod arch;
mod dtype;
mod loader;
mod safetensors;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

pub use arch::{ArchSpec, Layout, NameTemplate, LAYER_PLACEHOLDER};
pub use dtype::{encode_values, promote_dtype, Dtype};
pub use loader::{load_model, load_model_auto, read_arch_metadata, write_model, ARCH_METADATA_KEY};
pub use safetensors::{
    encode_container, parse_container, write_container, Container, TensorData, TensorRef,
};

/// Canonical role of a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Embedding,
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Role {
    pub const LAYER_ROLES: [Role; 7] = [Role::Q, Role::K, Role::V, Role::O, Role::Gate, Role::Up, Role::Down];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Embedding => "Embedding",
            Role::Q => "Q",
            Role::K => "K",
            Role::V => "V",
            Role::O => "O",
            Role::Gate => "Gate",
            Role::Up => "Up",
            Role::Down => "Down",
        };
        f.write_str(s)
    }
}

/// Projection weights of one block, each stored input × output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl LayerWeights {
    pub fn get(&self, role: Role) -> Option<&Matrix> {
        match role {
            Role::Q => Some(&self.q),
            Role::K => Some(&self.k),
            Role::V => Some(&self.v),
            Role::O => Some(&self.o),
            Role::Gate => Some(&self.gate),
            Role::Up => Some(&self.up),
            Role::Down => Some(&self.down),
            Role::Embedding => None,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> Option<&mut Matrix> {
        match role {
            Role::Q => Some(&mut self.q),
            Role::K => Some(&mut self.k),
            Role::V => Some(&mut self.v),
            Role::O => Some(&mut self.o),
            Role::Gate => Some(&mut self.gate),
            Role::Up => Some(&mut self.up),
            Role::Down => Some(&mut self.down),
            Role::Embedding => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Role, &Matrix)> {
        Role::LAYER_ROLES.into_iter().map(move |r| (r, self.get(r).unwrap()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub arch: ArchSpec,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub source_path: String,
}

impl ModelBundle {
    /// Checks shapes against the architecture and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.num_layers {
            return Err(Error::ShapeMismatch {
                what: "layer count".into(),
                expected: vec![self.arch.num_layers],
                found: vec![self.layers.len()],
            });
        }
        check_matrix(&self.arch, Role::Embedding, None, &self.embedding)?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (role, m) in layer.iter() {
                check_matrix(&self.arch, role, Some(l), m)?;
            }
        }
        Ok(())
    }

    pub fn matrix(&self, role: Role, layer: usize) -> Option<&Matrix> {
        match role {
            Role::Embedding => Some(&self.embedding),
            _ => self.layers.get(layer).and_then(|lw| lw.get(role)),
        }
    }
}

pub(crate) fn check_matrix(arch: &ArchSpec, role: Role, layer: Option<usize>, m: &Matrix) -> Result<()> {
    let (r, c) = arch.shape(role);
    let label = || match layer {
        Some(l) => format!("{role} of layer {l}"),
        None => role.to_string(),
    };
    if m.shape() != (r, c) {
        return Err(Error::ShapeMismatch {
            what: label(),
            expected: vec![r, c],
            found: vec![m.rows(), m.cols()],
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteValue(label()));
    }
    Ok(())
}

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use super::arch::{ArchSpec, Layout};
use super::dtype::{encode_values, promote_dtype, Dtype};
use super::safetensors::{write_container, Container, TensorData, TensorRef};
use super::{check_matrix, LayerWeights, ModelBundle, Role};
use crate::error::{Error, Result};
use crate::Matrix;

/// Container metadata key under which written fixtures record their [`ArchSpec`].
pub const ARCH_METADATA_KEY: &str = "mdir.arch";

const INDEX_FILE: &str = "model.safetensors.index.json";
const SINGLE_FILE: &str = "model.safetensors";

#[derive(Deserialize)]
struct ShardIndex {
    weight_map: BTreeMap<String, String>,
}

struct TensorSource {
    containers: Vec<Container>,
    by_name: HashMap<String, (usize, TensorRef)>,
}

impl TensorSource {
    fn open(path: &Path) -> Result<Self> {
        let files = resolve_files(path)?;
        let containers = files.iter().map(Container::open).collect::<Result<Vec<_>>>()?;
        let mut by_name = HashMap::new();
        for (ci, c) in containers.iter().enumerate() {
            for t in &c.tensors {
                if by_name.insert(t.name.clone(), (ci, t.clone())).is_some() {
                    return Err(Error::MalformedHeader(format!(
                        "tensor {} appears in more than one shard",
                        t.name
                    )));
                }
            }
        }
        Ok(TensorSource { containers, by_name })
    }

    fn read(&self, key: &str) -> Option<Result<(Vec<usize>, Vec<f64>)>> {
        let (ci, t) = self.by_name.get(key)?;
        Some(
            self.containers[*ci]
                .read_raw(t)
                .and_then(|raw| promote_dtype(&raw, t.dtype))
                .map(|v| (t.shape.clone(), v)),
        )
    }
}

fn resolve_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let index = path.join(INDEX_FILE);
        if index.is_file() {
            return index_files(&index);
        }
        let single = path.join(SINGLE_FILE);
        if single.is_file() {
            return Ok(vec![single]);
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} contains no safetensors files",
                path.display()
            )));
        }
        return Ok(found);
    }
    if path.extension().is_some_and(|x| x == "json") {
        return index_files(path);
    }
    Ok(vec![path.to_path_buf()])
}

fn index_files(index: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
    let parsed: ShardIndex = serde_json::from_str(&text)?;
    let dir = index.parent().unwrap_or(Path::new("."));
    let mut files: Vec<PathBuf> = parsed.weight_map.values().map(|f| dir.join(f)).collect();
    files.sort();
    files.dedup();
    Ok(files)
}

/// Reads the architecture recorded in a container's metadata, if any.
pub fn read_arch_metadata(path: impl AsRef<Path>) -> Result<Option<ArchSpec>> {
    let files = resolve_files(path.as_ref())?;
    for f in files {
        let c = Container::open(&f)?;
        if let Some(text) = c.metadata.get(ARCH_METADATA_KEY) {
            return ArchSpec::from_json(text).map(Some);
        }
    }
    Ok(None)
}

/// Loads with an explicit architecture, or the one embedded in the container.
pub fn load_model_auto(path: impl AsRef<Path>, arch: Option<&ArchSpec>) -> Result<ModelBundle> {
    let path = path.as_ref();
    match arch {
        Some(a) => load_model(path, a),
        None => {
            let a = read_arch_metadata(path)?.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{} carries no architecture metadata; supply an ArchSpec",
                    path.display()
                ))
            })?;
            load_model(path, &a)
        }
    }
}

/// Loads a single container, a directory, or a shard index into canonical
/// orientation with every value widened to `f64`.
pub fn load_model(path: impl AsRef<Path>, arch: &ArchSpec) -> Result<ModelBundle> {
    let path = path.as_ref();
    arch.validate()?;
    let source = TensorSource::open(path)?;

    let embedding = load_role(&source, arch, Role::Embedding, None)?;
    let layers = (0..arch.num_layers)
        .into_par_iter()
        .map(|l| {
            let get = |role| load_role(&source, arch, role, Some(l));
            Ok(LayerWeights {
                q: get(Role::Q)?,
                k: get(Role::K)?,
                v: get(Role::V)?,
                o: get(Role::O)?,
                gate: get(Role::Gate)?,
                up: get(Role::Up)?,
                down: get(Role::Down)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ModelBundle {
        arch: arch.clone(),
        embedding,
        layers,
        source_path: path.display().to_string(),
    })
}

fn load_role(source: &TensorSource, arch: &ArchSpec, role: Role, layer: Option<usize>) -> Result<Matrix> {
    let key = arch.name_template.key(role, layer);
    let (shape, values) = source
        .read(&key)
        .ok_or_else(|| Error::MissingTensor { role, layer, key: key.clone() })??;
    let (r, c) = arch.shape(role);
    let transposed = role != Role::Embedding && arch.name_template.layout == Layout::OutIn;
    let expected = if transposed { vec![c, r] } else { vec![r, c] };
    if shape != expected {
        return Err(Error::ShapeMismatch { what: key, expected, found: shape });
    }
    let stored = Matrix::from_vec(expected[0], expected[1], values)?;
    let m = if transposed { stored.transpose() } else { stored };
    check_matrix(arch, role, layer, &m).map_err(|e| match e {
        Error::NonFiniteValue(_) => Error::NonFiniteValue(key.clone()),
        other => other,
    })?;
    Ok(m)
}

fn tensor_for(arch: &ArchSpec, role: Role, layer: Option<usize>, m: &Matrix, dtype: Dtype) -> TensorData {
    let stored = if role != Role::Embedding && arch.name_template.layout == Layout::OutIn {
        m.transpose()
    } else {
        m.clone()
    };
    TensorData {
        name: arch.name_template.key(role, layer),
        dtype,
        shape: vec![stored.rows(), stored.cols()],
        bytes: encode_values(stored.data(), dtype),
    }
}

/// Writes a bundle as one container using its architecture's naming and
/// layout, recording the architecture in the metadata.
pub fn write_model(bundle: &ModelBundle, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    bundle.validate()?;
    let arch = &bundle.arch;
    let mut tensors = vec![tensor_for(arch, Role::Embedding, None, &bundle.embedding, dtype)];
    for (l, layer) in bundle.layers.iter().enumerate() {
        for (role, m) in layer.iter() {
            tensors.push(tensor_for(arch, role, Some(l), m, dtype));
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("format".to_string(), "pt".to_string());
    meta.insert(ARCH_METADATA_KEY.to_string(), serde_json::to_string(arch)?);
    write_container(path, &tensors, &meta)
}

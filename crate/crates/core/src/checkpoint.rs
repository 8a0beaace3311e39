//! Model archives and pretrained backbone import, both as safetensors.
//!
//! A checkpoint stores every parameter in `f64` under its store name, plus a
//! header carrying a format tag, a version and the JSON [`AssessorConfig`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::assessor::{Assessor, AssessorConfig};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT: &str = "reqa-checkpoint";
pub const VERSION: u32 = 1;

/// Batch-norm epsilon used when folding running statistics.
const BN_EPS: f64 = 1e-5;

fn err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Serialized checkpoint bytes.
pub fn to_bytes(model: &Assessor) -> Result<Vec<u8>> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .iter()
        .map(|(_, p)| {
            let bytes = p
                .value
                .data()
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            (p.name.clone(), p.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes).map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("cannot encode tensor: {e}")))?;
    let mut cfg = model.config().clone();
    // the archive already holds the imported weights
    cfg.backbone.pretrained = None;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("assessor_config".to_string(), serde_json::to_string(&cfg)?),
    ]);
    safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::Config(format!("cannot encode checkpoint: {e}")))
}

/// Writes `model` to `path` atomically.
pub fn save(model: &Assessor, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    crate::harness::write_atomic(path, &bytes)
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Assessor> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, path)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Assessor> {
    let (_, header) = SafeTensors::read_metadata(bytes)
        .map_err(|e| err(path, format!("not a safetensors file: {e}")))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| err(path, "missing metadata"))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(err(path, format!("not a {FORMAT} archive")));
    }
    let version: u32 = meta
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(path, "missing version"))?;
    if version != VERSION {
        return Err(err(
            path,
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let cfg: AssessorConfig = serde_json::from_str(
        meta.get("assessor_config")
            .ok_or_else(|| err(path, "missing assessor_config"))?,
    )
    .map_err(|e| err(path, format!("bad assessor_config: {e}")))?;
    let tensors =
        SafeTensors::deserialize(bytes).map_err(|e| err(path, format!("corrupt tensors: {e}")))?;
    let mut model = Assessor::new(&cfg)?;
    let stored: Vec<&str> = tensors.names();
    if stored.len() != model.store.len() {
        return Err(err(
            path,
            format!(
                "archive holds {} tensors, model expects {}",
                stored.len(),
                model.store.len()
            ),
        ));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.param(id).name.clone();
        let view = tensors
            .tensor(&name)
            .map_err(|_| err(path, format!("missing tensor {name}")))?;
        let t = decode(&view, path, &name)?;
        set(&mut model.store, id, t, path, &name)?;
    }
    Ok(model)
}

fn decode(view: &TensorView<'_>, path: &Path, name: &str) -> Result<Tensor> {
    let raw = view.data();
    let data: Vec<f64> = match view.dtype() {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        other => return Err(err(path, format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(Tensor::new(view.shape(), data))
}

fn set(
    store: &mut ParamStore,
    id: crate::params::ParamId,
    t: Tensor,
    path: &Path,
    name: &str,
) -> Result<()> {
    let want = store.get(id).shape().to_vec();
    if t.shape() != want.as_slice() {
        return Err(err(
            path,
            format!("{name}: shape {:?} does not match {:?}", t.shape(), want),
        ));
    }
    if !t.all_finite() {
        return Err(err(path, format!("{name}: non-finite values")));
    }
    *store.get_mut(id) = t;
    Ok(())
}

/// Copies ImageNet weights into the `full` backbone parameters of `store`.
///
/// Convolution weights are matched by name. Each `<bn>.scale`/`<bn>.shift`
/// pair is taken verbatim when present, otherwise folded from
/// `<bn>.weight`, `.bias`, `.running_mean` and `.running_var`.
pub fn load_pretrained_backbone(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
    let tensors =
        SafeTensors::deserialize(&bytes).map_err(|e| err(path, format!("corrupt tensors: {e}")))?;
    let get = |name: &str| -> Result<Tensor> {
        let view = tensors
            .tensor(name)
            .map_err(|_| err(path, format!("missing tensor {name}")))?;
        decode(&view, path, name)
    };
    let targets: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Backbone)
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let mut updates = Vec::with_capacity(targets.len());
    for (id, name) in targets {
        let value = if let Some(bn) = name.strip_suffix(".scale") {
            match get(&name) {
                Ok(t) => t,
                Err(_) => fold_bn(&get, bn)?.0,
            }
        } else if let Some(bn) = name.strip_suffix(".shift") {
            match get(&name) {
                Ok(t) => t,
                Err(_) => fold_bn(&get, bn)?.1,
            }
        } else {
            get(&name)?
        };
        updates.push((id, name, value));
    }
    // all-or-nothing
    let mut staged = store.clone();
    for (id, name, value) in updates {
        set(&mut staged, id, value, path, &name)?;
    }
    *store = staged;
    Ok(())
}

fn fold_bn(get: &impl Fn(&str) -> Result<Tensor>, bn: &str) -> Result<(Tensor, Tensor)> {
    let gamma = get(&format!("{bn}.weight"))?;
    let beta = get(&format!("{bn}.bias"))?;
    let mean = get(&format!("{bn}.running_mean"))?;
    let var = get(&format!("{bn}.running_var"))?;
    let scale: Vec<f64> = gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(mean.data())
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    let n = scale.len();
    Ok((Tensor::new([n], scale), Tensor::new([n], shift)))
}

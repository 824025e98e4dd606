//! Model checkpoints: a magic string, a JSON manifest describing the layer
//! stack, and a raw little-endian f64 parameter blob in `flat_params` order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cil::model::{AffineLayer, BodyLayer, ConvLayer, NormSpec, TinyModel};
use crate::error::{Error, Result};
use crate::norm::{AblationFlags, NormKind, NormLayer};

pub const MAGIC: &[u8; 7] = b"TBNORM1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDesc {
    Affine {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Norm {
        norm: NormKind,
        channels: usize,
        groups: usize,
        epsilon: f64,
        momentum_new: f64,
        bessel: bool,
        ablation: AblationFlags,
    },
    Relu,
    GlobalAvgPool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    body: Vec<LayerDesc>,
    head_in: usize,
    head_out: usize,
    param_count: usize,
}

fn describe(model: &TinyModel) -> Manifest {
    let body = model
        .body
        .iter()
        .map(|layer| match layer {
            BodyLayer::Affine(a) => LayerDesc::Affine {
                in_features: a.in_features,
                out_features: a.out_features,
            },
            BodyLayer::Conv(c) => LayerDesc::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            },
            BodyLayer::Norm(n) => LayerDesc::Norm {
                norm: n.kind,
                channels: n.state.channels(),
                groups: n.state.groups,
                epsilon: n.state.epsilon,
                momentum_new: n.state.momentum_new,
                bessel: n.state.bessel_on_running_var,
                ablation: n.state.ablation,
            },
            BodyLayer::Relu => LayerDesc::Relu,
            BodyLayer::GlobalAvgPool => LayerDesc::GlobalAvgPool,
        })
        .collect();
    Manifest {
        body,
        head_in: model.head.in_features,
        head_out: model.head.out_features,
        param_count: model.flat_params().len(),
    }
}

pub fn save_model(model: &TinyModel, path: &Path) -> Result<()> {
    let manifest = serde_json::to_vec(&describe(model))?;
    let params = model.flat_params();
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest.len() as u32).to_le_bytes())?;
    file.write_all(&manifest)?;
    for p in &params {
        file.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TinyModel> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 7];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint {
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u32::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() != manifest.param_count * 8 {
        return Err(Error::Checkpoint {
            reason: format!(
                "parameter blob holds {} bytes, manifest expects {}",
                blob.len(),
                manifest.param_count * 8
            ),
        });
    }
    let mut params = Vec::with_capacity(manifest.param_count);
    for chunk in blob.chunks_exact(8) {
        params.push(f64::from_le_bytes(chunk.try_into().expect("chunk size is 8")));
    }

    // Rebuild the layer stack with placeholder parameters, then fill.
    let mut body = Vec::with_capacity(manifest.body.len());
    for desc in &manifest.body {
        body.push(match desc {
            LayerDesc::Affine {
                in_features,
                out_features,
            } => BodyLayer::Affine(zeroed_affine(*in_features, *out_features)),
            LayerDesc::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => BodyLayer::Conv(ConvLayer {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                weight: vec![0.0; out_channels * in_channels * kernel * kernel],
                bias: vec![0.0; *out_channels],
            }),
            LayerDesc::Norm {
                norm,
                channels,
                groups,
                epsilon,
                momentum_new,
                bessel,
                ablation,
            } => {
                let spec = NormSpec {
                    kind: *norm,
                    groups: *groups,
                    ablation: *ablation,
                    bessel: *bessel,
                };
                let mut layer: NormLayer = spec.build(*channels);
                layer.state.epsilon = *epsilon;
                layer.state.momentum_new = *momentum_new;
                BodyLayer::Norm(layer)
            }
            LayerDesc::Relu => BodyLayer::Relu,
            LayerDesc::GlobalAvgPool => BodyLayer::GlobalAvgPool,
        });
    }
    let mut model = TinyModel {
        body,
        head: zeroed_affine(manifest.head_in, manifest.head_out),
    };
    model.load_flat_params(&params).map_err(|reason| Error::Checkpoint { reason })?;
    Ok(model)
}

fn zeroed_affine(in_features: usize, out_features: usize) -> AffineLayer {
    AffineLayer {
        in_features,
        out_features,
        weight: vec![0.0; in_features * out_features],
        bias: vec![0.0; out_features],
    }
}

//! Single-file checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "PCNCKPT\0"
//! version      u32       currently 1
//! header_len   u32       N
//! header       N bytes   UTF-8 `key=value` lines:
//!                          geometry, backbone, backbone_channels, input_size,
//!                          prototype_dim, num_prototypes, num_classes,
//!                          addon_squash, seed, stages, pruned
//! body         f64[]     in order:
//!                          [epsilon, min_radius]
//!                          backbone parameters (layer order, weights then bias)
//!                          add-on parameters (first then second 1×1 conv)
//!                          centers (m×D)
//!                          radius params (m)
//!                          evidence weights w_h (m×C)
//!                          prune mask (m, 0.0 / 1.0)
//!                          class assignment (m×C, 0.0 / 1.0)
//! checksum     32 bytes  SHA-256 of everything above
//! ```
//!
//! Floats are stored as raw bit patterns, so a save → load round trip
//! reproduces forward outputs bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AddOnLayers, BackboneAdapter, EvidenceLayer, ProtoConceptsNet, TrainingMetadata};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, GeometryConfig, PrototypeBall};
use crate::losses::ClassAssignment;

const MAGIC: &[u8; 8] = b"PCNCKPT\0";
const VERSION: u32 = 1;

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn header(net: &ProtoConceptsNet) -> String {
    let channels = match &net.backbone {
        BackboneAdapter::TinyConv(t) => t.channels(),
    };
    let mut lines = vec![
        format!("geometry={}", net.geometry),
        format!("backbone={}", net.backbone.id()),
        format!("backbone_channels={}", join(&channels)),
        format!("input_size={}x{}", net.input_size.0, net.input_size.1),
        format!("prototype_dim={}", net.latent_dim()),
        format!("num_prototypes={}", net.num_prototypes()),
        format!("num_classes={}", net.num_classes()),
        format!("addon_squash={}", net.addon.squash),
        format!("seed={}", net.metadata.seed),
        format!("stages={}", join(&net.metadata.stages_completed)),
        format!("pruned={}", net.metadata.pruned),
    ];
    lines.push(String::new());
    lines.join("\n")
}

pub fn to_bytes(net: &ProtoConceptsNet) -> Vec<u8> {
    let head = header(net);
    let mut body: Vec<f64> = vec![net.geometry_config.epsilon, net.geometry_config.min_radius];
    body.extend(net.backbone.parameters());
    body.extend(net.addon.parameters());
    for b in &net.balls {
        body.extend_from_slice(&b.center);
    }
    body.extend(net.balls.iter().map(|b| b.radius_param));
    body.extend_from_slice(&net.evidence.weights);
    body.extend(net.evidence.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    for row in net.evidence.assignment.rows() {
        body.extend(row.iter().map(|&a| if a { 1.0 } else { 0.0 }));
    }

    let mut out = Vec::with_capacity(16 + head.len() + body.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(head.as_bytes());
    for v in body {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Body<'a> {
    values: &'a [u8],
    at: usize,
}

impl Body<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n * 8;
        if self.at + bytes > self.values.len() {
            return Err(bad("body is truncated"));
        }
        let out = self.values[self.at..self.at + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.at += bytes;
        Ok(out)
    }
}

fn parse_flag(values: Vec<f64>) -> Result<Vec<bool>> {
    values
        .into_iter()
        .map(|v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(bad(format!("expected a 0/1 flag, found {v}"))),
        })
        .collect()
}

pub fn from_bytes(bytes: &[u8]) -> Result<ProtoConceptsNet> {
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (content, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(content).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(content[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let head_len = u32::from_le_bytes(content[12..16].try_into().expect("4 bytes")) as usize;
    let head = content
        .get(16..16 + head_len)
        .ok_or_else(|| bad("header is truncated"))?;
    let head = std::str::from_utf8(head).map_err(|_| bad("header is not UTF-8"))?;
    let fields: BTreeMap<&str, &str> = head
        .lines()
        .filter(|l| !l.is_empty())
        .filter_map(|l| l.split_once('='))
        .collect();
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| bad(format!("missing header key {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("header key {k} is not an integer")))
    };
    let list = |s: &str| -> Result<Vec<usize>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.parse().map_err(|_| bad(format!("bad list entry {p}"))))
            .collect()
    };

    let geometry = Geometry::parse(get("geometry")?).ok_or_else(|| bad("unknown geometry"))?;
    if get("backbone")? != "tiny-conv" {
        return Err(bad(format!("unknown backbone {}", get("backbone")?)));
    }
    let channels = list(get("backbone_channels")?)?;
    let (ih, iw) = get("input_size")?
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .ok_or_else(|| bad("bad input_size"))?;
    let dim = num("prototype_dim")?;
    let m = num("num_prototypes")?;
    let c = num("num_classes")?;
    let squash = get("addon_squash")? == "true";
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed"))?;
    let stages_field = get("stages")?;
    let stages = if stages_field.is_empty() {
        Vec::new()
    } else {
        stages_field.split(',').map(str::to_string).collect()
    };
    let pruned = get("pruned")? == "true";

    // Shapes come from the header; values from the body.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut backbone = BackboneAdapter::tiny_conv(&channels, &mut rng);
    let mut addon = AddOnLayers::new(backbone.out_channels(), dim, squash, &mut rng);

    let mut body = Body {
        values: &content[16 + head_len..],
        at: 0,
    };
    let consts = body.take(2)?;
    let geometry_config = GeometryConfig {
        epsilon: consts[0],
        min_radius: consts[1],
    };
    backbone.set_parameters(&body.take(backbone.num_parameters())?);
    addon.set_parameters(&body.take(addon.num_parameters())?);
    let centers = body.take(m * dim)?;
    let radii = body.take(m)?;
    let weights = body.take(m * c)?;
    let mask = parse_flag(body.take(m)?)?;
    let assign_flat = parse_flag(body.take(m * c)?)?;
    if body.at != body.values.len() {
        return Err(bad("trailing bytes after body"));
    }

    let balls = (0..m)
        .map(|j| PrototypeBall::new(centers[j * dim..(j + 1) * dim].to_vec(), radii[j], geometry))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<bool>> = assign_flat.chunks(c.max(1)).map(<[bool]>::to_vec).collect();
    let assignment = if m == 0 {
        ClassAssignment::class_specific(0, c)
    } else {
        ClassAssignment::from_rows(&rows)?
    };
    let mut evidence = EvidenceLayer::from_assignment(assignment);
    evidence.weights = weights;
    evidence.mask = mask;

    Ok(ProtoConceptsNet {
        backbone,
        addon,
        balls,
        evidence,
        geometry,
        geometry_config,
        input_size: (ih, iw),
        metadata: TrainingMetadata {
            seed,
            stages_completed: stages,
            pruned,
        },
    })
}

pub fn save(net: &ProtoConceptsNet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ProtoConceptsNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

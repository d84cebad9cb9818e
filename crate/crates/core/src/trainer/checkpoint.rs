use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::layers::INIT_SCHEME;
use crate::model::{BlockGraph, GraphSpec};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFFCKPT1";
const MAGIC_STEM: &[u8; 7] = b"SFFCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header stored after the magic bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub version: u32,
    pub spec: GraphSpec,
    pub init: String,
    pub seed: u64,
    /// Per-channel input standardization fitted on the training split.
    pub input_norm: Option<Normalizer>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Descriptor,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Outcome of loading a checkpoint into a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Present in the checkpoint, absent from the graph.
    pub ignored: Vec<String>,
    /// Present in the graph, absent from the checkpoint; left at their
    /// initial values.
    pub fresh: Vec<String>,
}

/// Serialize every parameter and buffer of `graph` as little-endian f32.
pub fn save_checkpoint<T: Real>(
    graph: &BlockGraph<T>,
    seed: u64,
    input_norm: Option<&Normalizer>,
    path: &Path,
) -> Result<()> {
    let named = graph.named_tensors();
    let descriptor = Descriptor {
        version: FORMAT_VERSION,
        spec: graph.spec.clone(),
        init: INIT_SCHEME.to_string(),
        seed,
        input_norm: input_norm.cloned(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&descriptor).map_err(|e| Error::Format(e.to_string()))?;
    let total: usize = named.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + json.len() + 4 * total);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let short = || Error::Format(format!("{}: truncated checkpoint", path.display()));
    let magic = bytes.get(..8).ok_or_else(short)?;
    if magic != CHECKPOINT_MAGIC {
        if magic.starts_with(MAGIC_STEM) {
            return Err(Error::VersionMismatch(format!(
                "{}: header {:?}",
                path.display(),
                String::from_utf8_lossy(magic)
            )));
        }
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let len = bytes.get(8..12).ok_or_else(short)?;
    let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(short)?;
    let descriptor: Descriptor =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if descriptor.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: version {}",
            path.display(),
            descriptor.version
        )));
    }
    let mut pos = 12 + len;
    let mut tensors = Vec::with_capacity(descriptor.tensors.len());
    for e in &descriptor.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(short)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint { descriptor, tensors })
}

impl Checkpoint {
    /// Rebuild the stored graph with every tensor restored.
    pub fn build<T: Real>(&self) -> Result<BlockGraph<T>> {
        let mut graph = self.descriptor.spec.build::<T>(&mut Rng::new(self.descriptor.seed))?;
        let report = load_into(self, &mut graph)?;
        if !report.fresh.is_empty() {
            return Err(Error::Format(format!("checkpoint lacks {:?}", report.fresh)));
        }
        Ok(graph)
    }
}

/// Copy matching tensors into `graph`. The preset, input shape and class
/// count must agree; heads missing from the checkpoint stay freshly
/// initialized and tensors the graph has no slot for are ignored.
pub fn load_into<T: Real>(ckpt: &Checkpoint, graph: &mut BlockGraph<T>) -> Result<LoadReport> {
    let src = &ckpt.descriptor.spec;
    let dst = &graph.spec;
    if src.preset != dst.preset {
        return Err(Error::PresetMismatch(format!(
            "checkpoint holds {}, graph is {}",
            src.preset, dst.preset
        )));
    }
    if src.input != dst.input || src.classes != dst.classes || src.widths != dst.widths {
        return Err(Error::PresetMismatch(format!(
            "checkpoint input {:?}, {} classes, widths {:?}; graph input {:?}, {} classes, widths {:?}",
            src.input, src.classes, src.widths, dst.input, dst.classes, dst.widths
        )));
    }
    let mut stored: HashMap<&str, &Tensor<f32>> = ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut report = LoadReport::default();
    for (name, slot) in graph.named_tensors_mut() {
        match stored.remove(name.as_str()) {
            Some(t) if t.shape() == slot.shape() => {
                for (d, &s) in slot.data_mut().iter_mut().zip(t.data()) {
                    *d = T::lit(s as f64);
                }
                report.loaded.push(name);
            }
            Some(t) => {
                return Err(Error::PresetMismatch(format!(
                    "{name}: checkpoint shape {:?}, graph shape {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => report.fresh.push(name),
        }
    }
    report.ignored = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| stored.contains_key(n.as_str()))
        .map(|(n, _)| n.clone())
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Preset, TrainMode};

    fn graph(preset: Preset, mode: TrainMode, seed: u64) -> BlockGraph<f32> {
        GraphSpec::new(preset, mode, 10, [1, 12, 12])
            .unwrap()
            .build(&mut Rng::new(seed))
            .unwrap()
    }

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        for preset in [Preset::Cnn, Preset::Cnnb, Preset::TinyResnet] {
            for mode in [TrainMode::Sff, TrainMode::Cwc, TrainMode::Bp] {
                let g = graph(preset, mode, 3);
                save_checkpoint(&g, 3, None, &p).unwrap();
                let back: BlockGraph<f32> = read_checkpoint(&p).unwrap().build().unwrap();
                let a = g.named_tensors();
                let b = back.named_tensors();
                assert_eq!(a.len(), b.len());
                for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
                    assert_eq!(na, nb);
                    assert_eq!(ta, tb);
                }
                let bytes = std::fs::read(&p).unwrap();
                save_checkpoint(&back, 3, None, &p).unwrap();
                assert_eq!(bytes, std::fs::read(&p).unwrap());
            }
        }
    }

    #[test]
    fn bp_into_sff_keeps_fresh_heads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bp.ckpt");
        let bp = graph(Preset::Cnnb, TrainMode::Bp, 1);
        save_checkpoint(&bp, 1, None, &p).unwrap();
        let mut sff = graph(Preset::Cnnb, TrainMode::Sff, 2);
        let heads_before: Vec<Tensor<f32>> = sff.blocks.iter().map(|b| b.head.as_ref().unwrap().conv.weight.clone()).collect();
        let report = load_into(&read_checkpoint(&p).unwrap(), &mut sff).unwrap();
        assert_eq!(report.fresh.len(), 6);
        assert!(report.fresh.iter().all(|n| n.contains(".head.")));
        assert!(report.ignored.iter().all(|n| n.starts_with("cls.")));
        assert!(!report.ignored.is_empty());
        for (b, h) in sff.blocks.iter().zip(&heads_before) {
            assert_eq!(&b.head.as_ref().unwrap().conv.weight, h);
        }
        for (b0, b1) in bp.blocks.iter().zip(&sff.blocks) {
            assert_eq!(b0.params(), b1.params()[..b0.params().len()].to_vec());
        }
    }

    #[test]
    fn mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&graph(Preset::Cnn, TrainMode::Bp, 1), 1, None, &p).unwrap();
        let ck = read_checkpoint(&p).unwrap();
        let mut other = graph(Preset::TinyResnet, TrainMode::Sff, 1);
        assert!(matches!(load_into(&ck, &mut other), Err(Error::PresetMismatch(_))));
        let mut wide: BlockGraph<f32> = GraphSpec::with_widths(Preset::Cnn, TrainMode::Bp, 10, [1, 12, 12], vec![8, 8, 8])
            .unwrap()
            .build(&mut Rng::new(0))
            .unwrap();
        assert!(matches!(load_into(&ck, &mut wide), Err(Error::PresetMismatch(_))));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[7] = b'2';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::VersionMismatch(_))));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
        bytes[0] = b'S';
        bytes[7] = b'1';
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
    }
}

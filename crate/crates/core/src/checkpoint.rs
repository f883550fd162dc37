//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DPSS"  version:u32  classes:u64
//! input_rank:u32  input_dims:u64*
//! layer_count:u32  { tag:u8  fields:u64* }*
//! param_count:u32  { name_len:u32 name  rank:u32 dims:u64*  data:f64* }*
//! has_mask:u8  [ part_count:u32 { name_len:u32 name  count:u64 non_selected:u64* }* ]
//! ```
//!
//! Layer tags and their fields: 1 conv2d (out, kernel, stride, padding),
//! 2 group_norm (groups, 0 for the default), 3 relu, 4 max_pool (size),
//! 5 flatten, 6 fc (out). The mask section stores the non-selected
//! indices of each pruned tensor; the selected set is the complement.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, ModelSpec};
use crate::sparsify::{FrozenMask, IndexPartition, Split, TensorPartition};

pub const MAGIC: &[u8; 4] = b"DPSS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f64>,
    pub frozen: Option<FrozenMask>,
}

impl Checkpoint {
    pub fn new(model: Model<f64>) -> Self {
        Checkpoint { model, frozen: None }
    }

    pub fn with_mask(model: Model<f64>, mask: FrozenMask) -> Self {
        Checkpoint {
            model,
            frozen: Some(mask),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u64(&mut w, self.model.class_count() as u64);
        let spec = self.model.spec();
        put_u32(&mut w, spec.input.len() as u32);
        for &d in &spec.input {
            put_u64(&mut w, d as u64);
        }
        put_u32(&mut w, spec.layers.len() as u32);
        for layer in &spec.layers {
            let (tag, fields) = layer_record(layer);
            w.push(tag);
            for f in fields {
                put_u64(&mut w, f as u64);
            }
        }
        let layout = self.model.layout();
        put_u32(&mut w, layout.len() as u32);
        for (i, info) in layout.entries().iter().enumerate() {
            put_name(&mut w, &info.name);
            put_u32(&mut w, info.shape.rank() as u32);
            for &d in info.shape.dims() {
                put_u64(&mut w, d as u64);
            }
            for &v in self.model.param(i) {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.frozen {
            None => w.push(0),
            Some(mask) => {
                w.push(1);
                let parts = mask.partition().parts();
                put_u32(&mut w, parts.len() as u32);
                for tp in parts {
                    put_name(&mut w, &layout.entries()[tp.param].name);
                    put_u64(&mut w, tp.split.non_selected.len() as u64);
                    for &i in &tp.split.non_selected {
                        put_u64(&mut w, i as u64);
                    }
                }
            }
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let classes = r.usize()?;
        let rank = r.u32()? as usize;
        let input = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let layer_count = r.u32()? as usize;
        let layers = (0..layer_count).map(|_| r.layer()).collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec { input, layers };
        let mut model = Model::<f64>::zeroed(&spec, classes)
            .map_err(|e| Error::format(format!("checkpoint model spec is invalid: {e}")))?;
        let layout = model.layout().clone();
        let count = r.u32()? as usize;
        if count != layout.len() {
            return Err(Error::format(format!(
                "checkpoint has {count} parameters, spec implies {}",
                layout.len()
            )));
        }
        for (i, info) in layout.entries().iter().enumerate() {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            if name != info.name || dims != info.shape.dims() {
                return Err(Error::format(format!(
                    "parameter record {name} {dims:?} does not match {} {:?}",
                    info.name,
                    info.shape.dims()
                )));
            }
            let values = (0..info.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            model
                .set_param(i, &values)
                .map_err(|e| Error::format(format!("parameter {name}: {e}")))?;
        }
        let frozen = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut parts = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = r.name()?;
                    let param = layout
                        .position(&name)
                        .ok_or_else(|| Error::format(format!("mask names unknown parameter {name}")))?;
                    let k = r.usize()?;
                    let len = layout.entries()[param].len();
                    if k > len {
                        return Err(Error::format(format!("mask for {name} lists {k} of {len} indices")));
                    }
                    let non_selected = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
                    let mut drop = vec![false; len];
                    for &i in &non_selected {
                        if i >= len {
                            return Err(Error::format(format!("mask index {i} out of range for {name}")));
                        }
                        drop[i] = true;
                    }
                    let selected = (0..len).filter(|&i| !drop[i]).collect();
                    parts.push(TensorPartition {
                        param,
                        split: Split {
                            selected,
                            non_selected,
                        },
                    });
                }
                let partition = IndexPartition::from_parts(&layout, parts)
                    .map_err(|e| Error::format(format!("invalid frozen mask: {e}")))?;
                Some(FrozenMask::new(partition))
            }
            b => return Err(Error::format(format!("bad mask flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model, frozen })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn layer_record(layer: &LayerSpec) -> (u8, Vec<usize>) {
    match *layer {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => (1, vec![out_channels, kernel, stride, padding]),
        LayerSpec::GroupNorm { groups } => (2, vec![groups.unwrap_or(0)]),
        LayerSpec::Relu => (3, vec![]),
        LayerSpec::MaxPool { size } => (4, vec![size]),
        LayerSpec::Flatten => (5, vec![]),
        LayerSpec::Linear { out_features } => (6, vec![out_features]),
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    put_u32(w, name.len() as u32);
    w.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(format!("size {v} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("parameter name is not UTF-8"))
    }

    fn layer(&mut self) -> Result<LayerSpec> {
        Ok(match self.u8()? {
            1 => LayerSpec::Conv2d {
                out_channels: self.usize()?,
                kernel: self.usize()?,
                stride: self.usize()?,
                padding: self.usize()?,
            },
            2 => LayerSpec::GroupNorm {
                groups: Some(self.usize()?).filter(|&g| g > 0),
            },
            3 => LayerSpec::Relu,
            4 => LayerSpec::MaxPool { size: self.usize()? },
            5 => LayerSpec::Flatten,
            6 => LayerSpec::Linear {
                out_features: self.usize()?,
            },
            t => return Err(Error::format(format!("unknown layer tag {t}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::sparsify::{partition_for_step, Criterion, SparsityMode, SparsityPlan};

    fn model() -> Model<f64> {
        Model::build(&ModelSpec::tiny_cnn(1, 4, 3), 3, &mut RngStream::new(2, 0)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = model();
        // values that text formats tend to mangle
        let w = m.layout().position("5.bias").unwrap();
        m.set_param(w, &[f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]).unwrap();
        let ck = Checkpoint::new(m);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        let bits = |m: &Model<f64>| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&ck.model));
        assert_eq!(back.model.spec(), ck.model.spec());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn header_bytes() {
        let bytes = Checkpoint::new(model()).encode();
        assert_eq!(&bytes[..4], b"DPSS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
    }

    #[test]
    fn mask_round_trip() {
        let m = model();
        let plan = SparsityPlan::new(SparsityMode::Freezing, Criterion::Random, 0.6, 1).unwrap();
        let mask = FrozenMask::new(partition_for_step(&plan, 0, &m, None).unwrap());
        let ck = Checkpoint::with_mask(m, mask);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_input_is_format_error() {
        let bytes = Checkpoint::new(model()).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Checkpoint::decode(&version), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.dpss");
        let ck = Checkpoint::new(model());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        match Checkpoint::load(&dir.path().join("missing")) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("missing")),
            other => panic!("{other:?}"),
        }
    }
}

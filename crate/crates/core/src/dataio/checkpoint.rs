//! Binary checkpoints: a text header followed by little-endian f32 blobs.
//!
//! ```text
//! PCAPS
//! version=1
//! <key>=<value>            metadata, sorted by key
//! tensor=<name> <kind> <d0>x<d1>...
//! end
//! <value, m, v blobs of each tensor in header order>
//! ```
//!
//! `kind` is `param` for trainable entries and `buffer` otherwise; buffers
//! carry only their value blob.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Entry, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &str = "PCAPS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub value: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Configs, seeds and counters as flat key/value pairs.
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

fn narrow<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

impl Checkpoint {
    /// Snapshot of `store`, including its optimizer state and step counter.
    pub fn from_store<T: Real>(
        store: &ParameterStore<T>,
        mut meta: BTreeMap<String, String>,
    ) -> Self {
        meta.insert("step".into(), store.step().to_string());
        let tensors = store
            .iter()
            .map(|(name, e)| StoredTensor {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                value: narrow(&e.value),
                m: if e.trainable {
                    narrow(&e.m)
                } else {
                    Vec::new()
                },
                v: if e.trainable {
                    narrow(&e.v)
                } else {
                    Vec::new()
                },
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn step(&self) -> u64 {
        self.meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }

    /// Rebuilds a store; gradients start at zero.
    pub fn to_store<T: Real>(&self) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        for t in &self.tensors {
            let make = |d: &[f32]| {
                Tensor::new(
                    t.shape.clone(),
                    d.iter().map(|&x| T::of(x as f64)).collect(),
                )
            };
            let value = make(&t.value)?;
            let (m, v) = if t.trainable {
                (make(&t.m)?, make(&t.v)?)
            } else {
                (
                    Tensor::zeros(t.shape.clone()),
                    Tensor::zeros(t.shape.clone()),
                )
            };
            store.insert_entry(
                &t.name,
                Entry {
                    grad: Tensor::zeros(t.shape.clone()),
                    value,
                    m,
                    v,
                    trainable: t.trainable,
                },
            )?;
        }
        store.set_step(self.step());
        Ok(store)
    }

    /// Loads into a store laid out as `expected`, naming the first tensor whose
    /// shape differs or that is missing.
    pub fn restore_into<T: Real>(&self, expected: &ParameterStore<T>) -> Result<ParameterStore<T>> {
        let by_name: BTreeMap<&str, &StoredTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, e) in expected.iter() {
            let want = e.value.shape().to_vec();
            match by_name.get(name) {
                Some(t) if t.shape == want => {}
                Some(t) => {
                    return Err(Error::ShapeDisagreement {
                        name: name.into(),
                        found: t.shape.clone(),
                        expected: want,
                    })
                }
                None => {
                    return Err(Error::ShapeDisagreement {
                        name: name.into(),
                        found: vec![],
                        expected: want,
                    })
                }
            }
        }
        if let Some(extra) = self.tensors.iter().find(|t| !expected.contains(&t.name)) {
            return Err(Error::ShapeDisagreement {
                name: extra.name.clone(),
                found: extra.shape.clone(),
                expected: vec![],
            });
        }
        self.to_store()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nversion={VERSION}\n");
        for (k, v) in &self.meta {
            head.push_str(&format!("{k}={v}\n"));
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let kind = if t.trainable { "param" } else { "buffer" };
            head.push_str(&format!("tensor={} {kind} {}\n", t.name, dims.join("x")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            for blob in [&t.value, &t.m, &t.v] {
                for x in blob.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
            return Err(Error::MagicMismatch);
        }
        let mut pos = MAGIC.len() + 1;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Truncated("header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Truncated("header is not text".into()))
        };
        let version = next_line()?;
        let found = version
            .strip_prefix("version=")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Truncated(format!("bad version line `{version}`")))?;
        if found != VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: VERSION,
            });
        }
        let mut meta = BTreeMap::new();
        let mut layout = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Truncated(format!("bad header line `{line}`")))?;
            if key == "tensor" {
                let parts: Vec<&str> = value.split(' ').collect();
                let [name, kind, dims] = parts[..] else {
                    return Err(Error::Truncated(format!("bad tensor line `{line}`")));
                };
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| Error::Truncated(format!("bad shape `{dims}`")))
                    })
                    .collect::<Result<_>>()?;
                let trainable = match kind {
                    "param" => true,
                    "buffer" => false,
                    other => {
                        return Err(Error::Truncated(format!("unknown tensor kind `{other}`")))
                    }
                };
                layout.push((name.to_string(), shape, trainable));
            } else {
                meta.insert(key.to_string(), value.to_string());
            }
        }
        let mut body = &bytes[pos..];
        let mut take = |count: usize, name: &str| -> Result<Vec<f32>> {
            if body.len() < count * 4 {
                return Err(Error::Truncated(format!("data of `{name}` ends early")));
            }
            let (head, rest) = body.split_at(count * 4);
            body = rest;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape, trainable) in layout {
            let count = shape.iter().product();
            let value = take(count, &name)?;
            let (m, v) = if trainable {
                (take(count, &name)?, take(count, &name)?)
            } else {
                (vec![], vec![])
            };
            tensors.push(StoredTensor {
                name,
                shape,
                trainable,
                value,
                m,
                v,
            });
        }
        if !body.is_empty() {
            return Err(Error::Truncated(format!("{} trailing bytes", body.len())));
        }
        Ok(Self { meta, tensors })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParameterStore::<f32>::new();
        store
            .insert(
                "a.weight",
                Tensor::from_f64([2, 3], &[1.0, -2.5, 3.25, 1e-7, 0.0, 7.0]).unwrap(),
            )
            .unwrap();
        store
            .insert_buffer(
                "a.bn.running_var",
                Tensor::from_f64([3], &[1.0, 2.0, 0.5]).unwrap(),
            )
            .unwrap();
        store.entry_mut("a.weight").unwrap().m = Tensor::from_f64([2, 3], &[0.1; 6]).unwrap();
        store.set_step(12);
        let meta = BTreeMap::from([("seed".to_string(), "7".to_string())]);
        Checkpoint::from_store(&store, meta)
    }

    #[test]
    fn byte_round_trip_is_canonical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let store: ParameterStore<f32> = back.to_store().unwrap();
        assert_eq!(store.step(), 12);
        assert_eq!(store.value("a.weight").unwrap().data()[3], 1e-7f32);
        assert!(!store.is_trainable("a.bn.running_var").unwrap());
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::MagicMismatch)
        ));
        let text = String::from_utf8_lossy(&bytes).replacen("version=1", "version=9", 1);
        assert!(matches!(
            Checkpoint::from_bytes(text.as_bytes()),
            Err(Error::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..12]),
            Err(Error::Truncated(_))
        ));

        let mut expected = ParameterStore::<f32>::new();
        expected
            .insert("a.weight", Tensor::zeros(vec![3, 2]))
            .unwrap();
        expected
            .insert_buffer("a.bn.running_var", Tensor::zeros(vec![3]))
            .unwrap();
        match sample().restore_into(&expected) {
            Err(Error::ShapeDisagreement {
                name,
                found,
                expected,
            }) => {
                assert_eq!(
                    (name.as_str(), found, expected),
                    ("a.weight", vec![2, 3], vec![3, 2])
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pcaps");
        save_checkpoint(&sample(), &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
    }
}

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IRNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named single-precision parameter arrays followed by a JSON trailer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub trailer: Value,
}

impl Checkpoint {
    /// Snapshot of `store` (rounded to f32) in storage order.
    pub fn from_store(store: &ParamStore, trailer: Value) -> Self {
        let arrays = store
            .iter()
            .map(|(_, name, t)| NamedArray {
                name: name.to_string(),
                dims: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Checkpoint { arrays, trailer }
    }

    /// Copies every array into the parameter of the same name. Names missing
    /// on either side or mismatched shapes are data errors.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.arrays.len() != store.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} arrays, model expects {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for a in &self.arrays {
            let values = a.values.iter().map(|&v| f64::from(v)).collect();
            store.assign(&a.name, &a.dims, values)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(u32::try_from(self.arrays.len()).map_err(|_| Error::data("too many arrays"))?);
        for a in &self.arrays {
            let expect: usize = a.dims.iter().product();
            if expect != a.values.len() {
                return Err(Error::data(format!(
                    "array {} has inconsistent dims",
                    a.name
                )));
            }
            let name = a.name.as_bytes();
            w.u32(u32::try_from(name.len()).map_err(|_| Error::data("name too long"))?);
            w.bytes(name);
            w.dims(&a.dims)?;
            w.f32s(&a.values);
        }
        let json = serde_json::to_vec(&self.trailer)?;
        w.u64(json.len() as u64);
        w.bytes(&json);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: at,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| r.fail("parameter name is not UTF-8"))?
                .to_string();
            let dims = r.dims()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.fail("size overflow"))?;
            let values = r.f32s(n)?;
            arrays.push(NamedArray { name, dims, values });
        }
        let len = r.u64()? as usize;
        let json = r.take(len)?;
        let trailer =
            serde_json::from_slice(json).map_err(|e| r.fail(format!("bad trailer: {e}")))?;
        if r.remaining() != 0 {
            return Err(r.fail(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { arrays, trailer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::rng::substream;
    use proptest::prelude::*;

    fn model_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "ckpt");
        Encoder::new(
            &mut store,
            &EncoderConfig {
                hidden: 8,
                ..EncoderConfig::default()
            },
            5,
            2,
            &mut rng,
        )
        .unwrap();
        store
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let store = model_store();
        let ck = Checkpoint::from_store(&store, serde_json::json!({"epoch": 3, "best": 0.75}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

        let mut other = model_store();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).data_mut().fill(0.0);
        }
        back.load_into(&mut other).unwrap();
        for ((_, _, a), (_, _, b)) in store.iter().zip(other.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    #[test]
    fn corruption_reports_offsets() {
        let ck = Checkpoint::from_store(&model_store(), Value::Null);
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("x.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format { offset: 4, .. })
        ));
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(cut, p) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ck = Checkpoint::from_store(&model_store(), Value::Null);
        ck.arrays[0].dims = vec![1, ck.arrays[0].values.len()];
        let mut store = model_store();
        assert!(ck.load_into(&mut store).is_err());
        ck.arrays.pop();
        assert!(matches!(ck.load_into(&mut store), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(
            vals in proptest::collection::vec(any::<f32>().prop_filter("bit-comparable", |v| !v.is_nan()), 0..40),
            name in "[a-z.0-9]{1,12}",
        ) {
            let ck = Checkpoint {
                arrays: vec![NamedArray { name, dims: vec![vals.len()], values: vals }],
                trailer: serde_json::json!({"k": [1, 2]}),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("p")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn scalar_params_keep_empty_dims() {
        let mut store = ParamStore::new();
        store.add("g", Tensor::scalar(1.5));
        let ck = Checkpoint::from_store(&store, Value::Null);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("p")).unwrap();
        assert_eq!(back.arrays[0].dims, Vec::<usize>::new());
        assert_eq!(back.arrays[0].values, vec![1.5]);
    }
}

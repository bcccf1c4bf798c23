use super::{NumericsError, Result, Tape, Tensor, Var};
use crate::binfile;
use indexmap::IndexMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const PARAM_MAGIC: &[u8; 4] = b"DNPT";
const PARAM_VERSION: u32 = 1;

/// Stable handle into a [`ParamSet`]; model structs hold these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named collection of trainable tensors.
///
/// Registration order is the canonical order used by bindings, gradients and
/// the optimizer state, so it must be identical across save/load.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        self.entries.insert(name.to_string(), tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.entries[index]
    }

    pub fn tensor_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index]
    }

    /// Total number of scalar values across all entries.
    pub fn value_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Copy values from another set with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
            if !dst.same_shape(src) {
                return Err(NumericsError::ParamFile(format!(
                    "shape mismatch for '{}': {:?} vs {:?}",
                    name,
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<ParamSet> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Flat container: version header, then `name / rows / cols / f64 data`
    /// per entry, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfile::write_header(w, PARAM_MAGIC, PARAM_VERSION)?;
        binfile::write_u32(w, self.entries.len() as u32)?;
        for (name, tensor) in &self.entries {
            binfile::write_string(w, name)?;
            binfile::write_u32(w, tensor.rows() as u32)?;
            binfile::write_u32(w, tensor.cols() as u32)?;
            binfile::write_f64_slice(w, tensor.data())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ParamSet> {
        let version = binfile::read_header(r, PARAM_MAGIC)
            .map_err(|e| NumericsError::ParamFile(e.to_string()))?;
        if version != PARAM_VERSION {
            return Err(NumericsError::ParamFile(format!(
                "unsupported parameter format version {version}"
            )));
        }
        let count = binfile::read_u32(r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = binfile::read_string(r)?;
            let rows = binfile::read_u32(r)? as usize;
            let cols = binfile::read_u32(r)? as usize;
            let data = binfile::read_f64_vec(r)?;
            let tensor = Tensor::from_vec(rows, cols, data)?;
            set.register(&name, tensor)?;
        }
        Ok(set)
    }
}

/// All parameters of a set loaded onto one tape, in registration order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Load every parameter as a tracked (or constant) leaf.
    pub fn bind(tape: &mut Tape, set: &ParamSet, tracked: bool) -> Binding {
        let vars = set
            .entries
            .values()
            .map(|t| {
                if tracked {
                    tape.tracked_leaf(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in registration order; zero tensors where nothing flowed.
    pub fn grads(&self, tape: &Tape, set: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| match tape.grad(v) {
                Some(g) => g.clone(),
                None => {
                    let t = set.tensor_at(i);
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
    }

    /// Accumulate this tape's gradients into `acc` (parallel to set order).
    pub fn accumulate_grads(&self, tape: &Tape, acc: &mut [Tensor]) {
        for (i, &v) in self.vars.iter().enumerate() {
            if let Some(g) = tape.grad(v) {
                acc[i].add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut set = ParamSet::new();
        set.register("w", Tensor::zeros(2, 2)).unwrap();
        assert!(set.register("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let mut set = ParamSet::new();
        set.register("a.w", Tensor::from_vec(2, 3, vec![1.5, -2.0, 0.0, 3.25, 4.0, -0.5]).unwrap())
            .unwrap();
        set.register("b.bias", Tensor::row_vec(vec![0.125])).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        set.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();

        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.by_name("a.w").unwrap(), set.by_name("a.w").unwrap());
        assert_eq!(
            loaded.by_name("b.bias").unwrap(),
            set.by_name("b.bias").unwrap()
        );
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a parameter file").unwrap();
        assert!(ParamSet::load(&path).is_err());
    }
}

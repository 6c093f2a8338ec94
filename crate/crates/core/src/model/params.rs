use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter table in registration order. Frozen entries are bound as
/// tape constants and therefore never receive a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    names: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.names.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Binds every parameter onto `tape`. Trainable entries become gradient
    /// leaves only when `with_grad` is set.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if with_grad && p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of the trainable parameters after a backward sweep, in
    /// [`ParamStore::trainable`] order. Missing gradients read as zero.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.trainable()
            .into_iter()
            .map(|id| {
                tape.grad(bound.var(id))
                    .map_or_else(|| vec![0.0; self.get(id).numel()], <[f64]>::to_vec)
            })
            .collect()
    }

    /// Overwrites values from `other` by name; shapes and trainability must agree
    /// and both stores must hold the same names.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for p in &other.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", p.name)))?;
            let mine = &mut self.params[id.0];
            if mine.value.shape() != p.value.shape() || mine.trainable != p.trainable {
                return Err(Error::Checkpoint(format!(
                    "{}: stored {:?} (trainable {}), model {:?} (trainable {})",
                    p.name,
                    p.value.shape(),
                    p.trainable,
                    mine.value.shape(),
                    mine.trainable
                )));
            }
            mine.value = p.value.clone();
        }
        Ok(())
    }
}

/// `u32 count`, then per entry `u32 name length | name | u8 trainable | tensor`.
pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in &store.params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[u8::from(p.trainable)])?;
        write_tensor(w, &p.value)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)?;
    let n = u32::from_le_bytes(u32_buf);
    let mut store = ParamStore::new();
    for _ in 0..n {
        r.read_exact(&mut u32_buf)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32_buf) as usize];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let value = read_tensor(r)?;
        store.add(name, value, flag[0] != 0)?;
    }
    Ok(store)
}

/// `N(0, std^2)` initialised tensor.
pub fn normal_init<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_have_no_grad() {
        let mut s = ParamStore::new();
        let a = s
            .add("a", Tensor::from_vec(vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let b = s
            .add("b", Tensor::from_vec(vec![3.0, 4.0]).unwrap(), false)
            .unwrap();
        assert!(s.add("a", Tensor::scalar(0.0), true).is_err());
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, true);
        let p = tape.mul(bound.var(a), bound.var(b)).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(bound.var(a)).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(bound.var(b)).is_none());
        assert_eq!(s.collect_grads(&tape, &bound), vec![vec![3.0, 4.0]]);
        assert_eq!(s.trainable_numel(), 2);
    }

    #[test]
    fn param_table_round_trip() {
        let mut s = ParamStore::new();
        s.add(
            "enc.w",
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]).unwrap(),
            false,
        )
        .unwrap();
        s.add("b", Tensor::scalar(0.25), true).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &s).unwrap();
        assert_eq!(read_params(&mut buf.as_slice()).unwrap(), s);
        assert!(read_params(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn load_checks_shapes() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2]), true).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::ones(&[2, 2]), true).unwrap();
        s.load_from(&other).unwrap();
        assert_eq!(s.get(ParamId(0)), &Tensor::ones(&[2, 2]));
        let mut wrong = ParamStore::new();
        wrong.add("w", Tensor::ones(&[4]), true).unwrap();
        assert!(s.load_from(&wrong).is_err());
    }
}

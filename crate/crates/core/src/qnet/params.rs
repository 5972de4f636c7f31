use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::NetArchitecture;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
}

/// Gradients share the parameter layout.
pub type GradStore<T> = ParamStore<T>;

impl<T: Scalar> ParamStore<T> {
    pub fn zeros(arch: &NetArchitecture) -> Self {
        Self::from_tensors(
            arch.param_shapes()
                .into_iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    ParamTensor {
                        name,
                        shape,
                        data: vec![T::zero(); n],
                    }
                })
                .collect(),
        )
    }

    pub fn from_tensors(tensors: Vec<ParamTensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&[T]> {
        Ok(&self.tensors[self.index_of(name)?].data)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i].data)
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_values(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout<U>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameter layouts differ".into()))
        }
    }

    /// Layout check against an architecture.
    pub fn check_arch(&self, arch: &NetArchitecture) -> Result<()> {
        let shapes = arch.param_shapes();
        let ok = shapes.len() == self.tensors.len()
            && shapes
                .iter()
                .zip(&self.tensors)
                .all(|((n, s), t)| *n == t.name && *s == t.shape && t.data.len() == s.iter().product::<usize>());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameters do not match the architecture".into()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.iter_values_mut().zip(other.iter_values()) {
            *a += scale * *b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.iter_values().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                match T::BYTES {
                    4 => h.update(v.as_f32().to_le_bytes()),
                    _ => h.update(v.as_f64().to_le_bytes()),
                }
            }
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// He-uniform conv kernels, Xavier-uniform dense weights, zero biases.
pub fn init_params<T: Scalar>(arch: &NetArchitecture, seed_value: u64) -> Result<ParamStore<T>> {
    arch.validate()?;
    let mut rng = seed::derived_rng(seed_value, &[seed::purpose::INIT]);
    let mut store = ParamStore::<T>::zeros(arch);
    for t in store.tensors_mut() {
        if t.name.ends_with(".bias") {
            continue;
        }
        let bound = if t.shape.len() == 4 {
            let fan_in = t.shape[1] * t.shape[2] * t.shape[3];
            (6.0 / fan_in as f64).sqrt()
        } else {
            let (fan_out, fan_in) = (t.shape[0], t.shape[1]);
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        for v in &mut t.data {
            *v = T::lit(rng.gen_range(-bound..bound));
        }
    }
    Ok(store)
}

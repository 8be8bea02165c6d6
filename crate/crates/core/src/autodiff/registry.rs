use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Disjoint parameter partitions of an actor-critic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Policy-only weights.
    Policy,
    /// Value-only weights.
    Value,
    /// Shared backbone.
    Shared,
    /// Mix / mask mechanism weights.
    Mechanism,
    /// Slow momentum copies of the mechanism; never touched by gradients.
    Momentum,
    /// Bilinear matrices of the contrastive heads.
    Bilinear,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Policy,
        Group::Value,
        Group::Shared,
        Group::Mechanism,
        Group::Momentum,
        Group::Bilinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Policy => "policy",
            Group::Value => "value",
            Group::Shared => "shared",
            Group::Mechanism => "mechanism",
            Group::Momentum => "momentum",
            Group::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "parameter group",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Named parameters in registration order.
///
/// Flat gradient vectors concatenate each parameter's row-major gradient in
/// registration order, so the same registry always yields the same layout.
#[derive(Debug, Clone, Default)]
pub struct ParameterRegistry {
    params: Vec<Parameter>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        if group == Group::Momentum && tensor.requires_grad() {
            return Err(Error::Contract(format!("momentum parameter `{name}` must not require grad")));
        }
        self.params.push(Parameter { name, group, tensor });
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params.iter().find(|p| p.name == name).ok_or_else(|| Error::Lookup {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(move |p| p.group == group)
    }

    /// Everything gradients may update.
    pub fn trainable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.group != Group::Momentum)
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    pub fn grad_vector(&self, group: Group) -> Vec<f64> {
        self.group(group).flat_map(|p| p.tensor.grad()).collect()
    }

    /// Gradient of every parameter whose name satisfies `pred`.
    pub fn grad_vector_where(&self, pred: impl Fn(&Parameter) -> bool) -> Vec<f64> {
        self.params.iter().filter(|p| pred(p)).flat_map(|p| p.tensor.grad()).collect()
    }

    /// All trainable gradients, registration order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.trainable().flat_map(|p| p.tensor.grad()).collect()
    }

    /// Inverse of [`flat_grads`](Self::flat_grads).
    pub fn set_flat_grads(&self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for p in self.trainable() {
            let n = p.tensor.numel();
            let chunk = flat
                .get(offset..offset + n)
                .ok_or_else(|| Error::dim("set_flat_grads", &[&[flat.len()]]))?;
            p.tensor.set_grad(chunk.to_vec())?;
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::dim("set_flat_grads", &[&[offset], &[flat.len()]]));
        }
        Ok(())
    }

    /// Index ranges inside [`flat_grads`](Self::flat_grads) covered by `groups`.
    pub fn flat_ranges(&self, groups: &[Group]) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for p in self.trainable() {
            let n = p.tensor.numel();
            if groups.contains(&p.group) {
                out.push(offset..offset + n);
            }
            offset += n;
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|p| p.tensor.numel()).sum()
    }

    /// Snapshot of every parameter value, registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Contract("snapshot does not match registry".into()));
        }
        for (p, v) in self.params.iter().zip(snapshot) {
            p.tensor.set_data(v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout_and_empty_group() {
        let mut reg = ParameterRegistry::new();
        let w = Tensor::param(vec![0.0; 4], &[2, 2]).unwrap();
        reg.register("w", Group::Policy, w.clone()).unwrap();
        w.set_grad(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(reg.grad_vector(Group::Policy), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(reg.grad_vector(Group::Value).is_empty());
    }

    #[test]
    fn group_slices_are_disjoint_parts_of_the_flat_vector() {
        let mut reg = ParameterRegistry::new();
        let a = Tensor::param(vec![0.0; 2], &[2]).unwrap();
        let b = Tensor::param(vec![0.0; 3], &[3]).unwrap();
        let c = Tensor::param(vec![0.0; 1], &[1]).unwrap();
        reg.register("a", Group::Policy, a.clone()).unwrap();
        reg.register("b", Group::Value, b.clone()).unwrap();
        reg.register("c", Group::Policy, c.clone()).unwrap();
        a.set_grad(vec![1.0, 2.0]).unwrap();
        b.set_grad(vec![3.0, 4.0, 5.0]).unwrap();
        c.set_grad(vec![6.0]).unwrap();
        let all = reg.flat_grads();
        let pol: Vec<f64> = reg.flat_ranges(&[Group::Policy]).into_iter().flat_map(|r| all[r].to_vec()).collect();
        let val: Vec<f64> = reg.flat_ranges(&[Group::Value]).into_iter().flat_map(|r| all[r].to_vec()).collect();
        assert_eq!(pol, reg.grad_vector(Group::Policy));
        assert_eq!(val, reg.grad_vector(Group::Value));
        assert_eq!(pol.len() + val.len(), all.len());
    }

    #[test]
    fn unknown_group_name_is_a_lookup_error() {
        assert!(matches!("critic".parse::<Group>(), Err(Error::Lookup { .. })));
        assert_eq!("shared".parse::<Group>().unwrap(), Group::Shared);
    }

    #[test]
    fn momentum_params_cannot_be_trainable() {
        let mut reg = ParameterRegistry::new();
        let t = Tensor::param(vec![0.0], &[1]).unwrap();
        assert!(reg.register("m", Group::Momentum, t).is_err());
    }
}

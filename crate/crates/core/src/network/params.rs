//! Named parameter storage and the graph builder that binds it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

/// The three separately trainable parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subnet {
    Deblur,
    Disp,
    Fusion,
}

impl Subnet {
    pub const ALL: [Subnet; 3] = [Subnet::Deblur, Subnet::Disp, Subnet::Fusion];

    pub fn prefix(self) -> &'static str {
        match self {
            Subnet::Deblur => "deblur",
            Subnet::Disp => "disp",
            Subnet::Fusion => "fusion",
        }
    }

    /// The subnetwork owning a parameter, from its name prefix.
    pub fn of(name: &str) -> Option<Subnet> {
        let head = name.split('.').next()?;
        Subnet::ALL.into_iter().find(|s| s.prefix() == head)
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count of the parameters of `subnet`.
    pub fn count(&self, subnet: Subnet) -> usize {
        self.iter()
            .filter(|(n, _)| Subnet::of(n) == Some(subnet))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with standard deviation `gain / sqrt(fan_in)`.
    FanIn(f64),
    Zero,
    /// 1x1 convolution weights copying input channel `offset + o` to output `o`.
    Identity { offset: usize },
}

fn make(shape: [usize; 4], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::FanIn(gain) => {
            let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
            let a = gain * (3.0 / fan_in).sqrt();
            Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-a..=a))
        }
        Init::Identity { offset } => Tensor::from_fn(shape, |o, i, _, _| if i == o + offset { 1.0 } else { 0.0 }),
    }
}

enum Source<'s> {
    Create {
        store: &'s mut ParamStore,
        rng: ChaCha8Rng,
    },
    Bound(&'s ParamStore),
}

/// Builds a forward graph over a [`ParamStore`].
///
/// In creation mode missing parameters are allocated on first use in call
/// order, so running one forward pass defines the full parameter layout.
/// Parameters of subnetworks in `trainable` enter the graph as tracked
/// leaves; all others are constants.
pub struct Builder<'s> {
    pub graph: Graph,
    source: Source<'s>,
    vars: HashMap<String, Var>,
    trainable: Vec<Subnet>,
    pub slope: f64,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s ParamStore, trainable: &[Subnet], slope: f64) -> Self {
        Builder {
            graph: Graph::new(),
            source: Source::Bound(store),
            vars: HashMap::new(),
            trainable: trainable.to_vec(),
            slope,
        }
    }

    pub(crate) fn creating(store: &'s mut ParamStore, seed: u64, slope: f64) -> Self {
        Builder {
            graph: Graph::new(),
            source: Source::Create {
                store,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            vars: HashMap::new(),
            trainable: Vec::new(),
            slope,
        }
    }

    /// Variable for a named parameter with the given shape.
    pub fn param(&mut self, name: &str, shape: [usize; 4], init: Init) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            if self.graph.shape(v) != shape {
                return Err(Error::contract(format!(
                    "parameter `{name}` reused with shape {shape:?}, bound as {:?}",
                    self.graph.shape(v)
                )));
            }
            return Ok(v);
        }
        let value = match &mut self.source {
            Source::Create { store, rng } => match store.get(name) {
                Some(t) => t.clone(),
                None => {
                    let t = make(shape, init, rng);
                    store.insert(name, t.clone());
                    t
                }
            },
            Source::Bound(store) => store
                .get(name)
                .cloned()
                .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?,
        };
        if value.shape() != shape {
            return Err(Error::contract(format!(
                "parameter `{name}` has shape {:?}, layer expects {shape:?}",
                value.shape()
            )));
        }
        let tracked = Subnet::of(name).is_some_and(|s| self.trainable.contains(&s));
        let v = if tracked {
            self.graph.param(value)
        } else {
            self.graph.input(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Tracked parameters bound so far, by name.
    pub fn tracked(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .vars
            .iter()
            .filter(|(n, _)| Subnet::of(n).is_some_and(|s| self.trainable.contains(&s)))
            .map(|(n, &v)| (n.clone(), v))
            .collect();
        out.sort_by_key(|(_, v)| v.index());
        out
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    pub fn channels(&self, x: Var) -> usize {
        self.graph.shape(x)[1]
    }

    /// Convolution with bias `{name}.b` and weights `{name}.w`.
    pub fn conv(&mut self, x: Var, name: &str, cout: usize, spec: ConvSpec, init: Init) -> Result<Var> {
        let cin = self.channels(x);
        let w = self.param(&format!("{name}.w"), [cout, cin, spec.kernel, spec.kernel], init)?;
        let b = self.param(&format!("{name}.b"), [cout, 1, 1, 1], Init::Zero)?;
        Ok(self.graph.conv(x, w, Some(b), spec))
    }

    /// Convolution followed by the leaky rectifier.
    pub fn conv_act(&mut self, x: Var, name: &str, cout: usize, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(x, name, cout, spec, Init::FanIn(1.0))?;
        Ok(self.graph.leaky_relu(y, self.slope))
    }

    pub fn act(&mut self, x: Var) -> Var {
        self.graph.leaky_relu(x, self.slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subnet_from_name() {
        assert_eq!(Subnet::of("deblur.enc0.w"), Some(Subnet::Deblur));
        assert_eq!(Subnet::of("fusion.gate.c0.b"), Some(Subnet::Fusion));
        assert_eq!(Subnet::of("other.w"), None);
    }

    #[test]
    fn creation_then_binding() {
        let mut store = ParamStore::new();
        {
            let mut b = Builder::creating(&mut store, 1, 0.1);
            let x = b.input(Tensor::zeros([1, 2, 4, 4]));
            b.conv(x, "deblur.a", 3, ConvSpec::same(3, 1), Init::FanIn(1.0)).unwrap();
        }
        assert_eq!(store.names(), &["deblur.a.w".to_string(), "deblur.a.b".to_string()]);
        assert_eq!(store.get("deblur.a.w").unwrap().shape(), [3, 2, 3, 3]);
        let mut b = Builder::new(&store, &[Subnet::Deblur], 0.1);
        let x = b.input(Tensor::zeros([1, 5, 4, 4]));
        let err = b.conv(x, "deblur.a", 3, ConvSpec::same(3, 1), Init::Zero);
        assert!(matches!(err, Err(Error::Contract(_))));
        let x = b.input(Tensor::zeros([1, 2, 4, 4]));
        b.conv(x, "deblur.a", 3, ConvSpec::same(3, 1), Init::Zero).unwrap();
        assert_eq!(b.tracked().len(), 2);
        let mut b = Builder::new(&store, &[Subnet::Disp], 0.1);
        let x = b.input(Tensor::zeros([1, 2, 4, 4]));
        b.conv(x, "deblur.a", 3, ConvSpec::same(3, 1), Init::Zero).unwrap();
        assert!(b.tracked().is_empty());
        assert!(b.conv(x, "deblur.missing", 3, ConvSpec::same(3, 1), Init::Zero).is_err());
    }

    #[test]
    fn fan_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = make([64, 32, 3, 3], Init::FanIn(1.0), &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var * 288.0 - 1.0).abs() < 0.05, "{var}");
        let id = make([2, 6, 1, 1], Init::Identity { offset: 2 }, &mut rng);
        assert_eq!(id.at(0, 2, 0, 0), 1.0);
        assert_eq!(id.at(1, 3, 0, 0), 1.0);
        assert_eq!(id.sum(), 2.0);
    }
}

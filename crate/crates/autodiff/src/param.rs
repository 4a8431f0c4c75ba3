use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, persistent tensor that survives across graphs.
///
/// Buffers (e.g. batch-norm running statistics) live in the same store so
/// they are checkpointed with the weights, but they never take gradients.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub grad: Vec<f64>,
    pub frozen: bool,
    pub buffer: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn trainable(&self) -> bool {
        !self.frozen && !self.buffer
    }

    /// Mutable access to the values; copies only if a live graph still
    /// shares them.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(bound) => {
                if bound == 0.0 {
                    return vec![0.0; n];
                }
                let d = Uniform::new(-bound, bound).expect("finite bound");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter data does not match its shape"
        );
        let n = data.len();
        self.params.push(Parameter {
            name: name.into(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: vec![0.0; n],
            frozen: false,
            buffer: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
    ) -> ParamId {
        let id = self.add(name, shape, data);
        self.params[id.0].buffer = true;
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add per-parameter gradients (as produced by
    /// [`crate::Graph::param_grads`]) into the store.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Element counts: (trainable, frozen weights, total weights). Buffers
    /// are not counted.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for p in self.params.iter().filter(|p| !p.buffer) {
            if p.frozen {
                frozen += p.numel();
            } else {
                trainable += p.numel();
            }
        }
        (trainable, frozen, trainable + frozen)
    }
}

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{Graph, Scalar, Shape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Owns every learnable tensor of one model, keyed by unique dotted path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(id.0, self.params[id.0].value.clone())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Moves the parameter gradients of a finished backward pass into the
    /// store, summing over repeated bindings of the same parameter.
    pub fn collect_grads(&mut self, g: &Graph<T>) {
        for (slot, grad) in g.param_grads() {
            match &mut self.params[slot].grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a = *a + b;
                    }
                }
                slot_grad => *slot_grad = Some(grad.clone()),
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain·sqrt(6 / fan_in)`.
    HeUniform { gain: f64 },
    Zeros,
}

impl Init {
    pub const HE: Init = Init::HeUniform { gain: 1.0 };

    pub fn tensor<T: Scalar>(self, shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::HeUniform { gain } => {
                let fan_in = (shape.c() * shape.h() * shape.w()).max(1) as f64;
                let bound = gain * (6.0 / fan_in).sqrt();
                let data = (0..shape.numel())
                    .map(|_| T::lit(rng.gen_range(-1.0..1.0) * bound))
                    .collect();
                Tensor::from_vec(shape, data).expect("init shape")
            }
        }
    }
}

/// Worst relative error between backprop parameter gradients of `loss_fn`
/// and central differences over every scalar of every parameter.
pub fn grad_check_params<T, F>(store: &mut ParamStore<T>, loss_fn: F, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grads();
    store.collect_grads(&g);
    let analytic: Vec<Tensor<T>> = store
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();

    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v}")));
        }
        Ok(v)
    };
    let two_h = step + step;
    let mut worst = T::zero();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = store.params[pi].value.data()[i];
            store.params[pi].value.data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.params[pi].value.data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.params[pi].value.data_mut()[i] = orig;
            worst = worst.max(relative_error(grad.data()[i], (up - down) / two_h));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.add("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
        assert_eq!(s.find("a.weight"), Some(ParamId(0)));
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = Init::HE.tensor(Shape::new(8, 4, 3, 3), &mut rng);
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.max_abs() > 0.5 * bound);
    }

    #[test]
    fn repeated_bindings_accumulate() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
        let mut g = Graph::new();
        let a = s.bind(&mut g, id);
        let b = s.bind(&mut g, id);
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        s.collect_grads(&g);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[6.0]);
    }
}

//! Named parameter storage and the glue that turns stored tensors into graph
//! variables for one forward/backward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use fusekit_autograd::{Conv2dSpec, Gradients, Real, Tape, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

/// Parameters keyed by dotted path, e.g. `gen_a.res3.conv1.w`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Rc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Rc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_rc(&self, name: &str) -> Option<Rc<Tensor<T>>> {
        self.params.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Mutable access for in-place updates. Copies the tensor if a graph
    /// still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Rc::make_mut)
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.params.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            self.params.insert(k.clone(), v.clone());
            n += 1;
        }
        n
    }

    /// Parameters under `prefix` as a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        out.copy_prefix_from(self, prefix);
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Rc::new(v.cast::<U>())))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` values of every
    /// parameter under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }
}

/// Lazily binds stored parameters to leaf variables on a tape.
///
/// Parameters accepted by the trainable predicate become gradient-tracked
/// variables; the rest are recorded as constants, which is how freezing is
/// implemented.
pub struct Binder<'t, 's, T: Real> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'t, 's, T: Real> Binder<'t, 's, T> {
    /// Every parameter is trainable.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_filter(tape, store, |_| true)
    }

    /// Every parameter is a constant.
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_filter(tape, store, |_| false)
    }

    pub fn with_filter(
        tape: &'t Tape<T>,
        store: &'s ParamStore<T>,
        trainable: impl Fn(&str) -> bool + 's,
    ) -> Self {
        Self {
            tape,
            store,
            trainable: Box::new(trainable),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Trainable iff the name starts with one of `prefixes`.
    pub fn with_prefixes(tape: &'t Tape<T>, store: &'s ParamStore<T>, prefixes: &'s [&'s str]) -> Self {
        Self::with_filter(tape, store, move |n| prefixes.iter().any(|p| n.starts_with(p)))
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// The variable for `name`; panics if the parameter does not exist,
    /// which indicates a network/initializer mismatch.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get_rc(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never initialized"));
        let var = if (self.trainable)(name) {
            self.tape.variable_rc(value)
        } else {
            self.tape.constant_rc(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients of every bound trainable parameter that influenced the output.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Convolution with weight `{name}.w` and, if present, bias `{name}.b`.
    pub fn conv(&self, name: &str, x: Var<'t, T>, spec: Conv2dSpec) -> Var<'t, T> {
        let w = self.get(&format!("{name}.w"));
        let bname = format!("{name}.b");
        let b = self.has(&bname).then(|| self.get(&bname));
        x.conv2d(w, b, spec)
    }

    /// Per-channel affine `x * g + b` with `{name}.g` and `{name}.b` of shape `[C]`.
    pub fn channel_affine(&self, name: &str, x: Var<'t, T>) -> Var<'t, T> {
        let c = x.shape()[1];
        let g = self.get(&format!("{name}.g")).reshape(&[1, c, 1, 1]);
        let b = self.get(&format!("{name}.b")).reshape(&[1, c, 1, 1]);
        x.mul(g).add(b)
    }
}

/// Helpers that create parameters with standard initializations.
pub struct Init<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    pub fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize, bias: bool) {
        let fan_in = (cin_per_group * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        self.conv_scaled(name, cout, cin_per_group, k, bias, bound);
    }

    /// Uniform in `±bound`, bias (if any) in `±1/sqrt(fan_in)`.
    pub fn conv_scaled(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize, bias: bool, bound: f64) {
        let w = Tensor::uniform(&[cout, cin_per_group, k, k], -bound, bound, self.rng);
        self.store.insert(format!("{name}.w"), w);
        if bias {
            let bb = 1.0 / ((cin_per_group * k * k) as f64).sqrt();
            self.store
                .insert(format!("{name}.b"), Tensor::uniform(&[cout], -bb, bb, self.rng));
        }
    }

    /// A convolution whose weights and bias start at zero.
    pub fn conv_zero(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) {
        self.store
            .insert(format!("{name}.w"), Tensor::zeros(&[cout, cin_per_group, k, k]));
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// Per-channel affine initialized to the identity.
    pub fn affine(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.g"), Tensor::ones(&[c]));
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) {
        self.store.insert(name, value);
    }
}

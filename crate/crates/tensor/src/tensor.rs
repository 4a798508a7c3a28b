use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{dim_err, Result, TensorError};
use crate::{Real, Rng};

/// Gradient of the output with respect to each parent, `None` when a parent
/// receives nothing (for example an integer-like index input).
pub(crate) type Grads = Vec<Option<Vec<Real>>>;

type BackwardFn = Box<dyn Fn(&[Real], &[Tensor]) -> Grads + Send + Sync>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<Real>>>,
    grad_fn: Option<GradFn>,
}

/// Dense row-major array participating in an autodiff graph.
///
/// Cloning is cheap (reference counted). Data is immutable once created;
/// optimizers produce new leaf tensors instead of mutating in place.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.0.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .field("data[..8]", &preview)
            .finish()
    }
}

impl Tensor {
    fn leaf(data: Vec<Real>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        }))
    }

    pub fn new(data: Vec<Real>, shape: &[usize]) -> Result<Self> {
        check_shape("new", shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<Real>, shape: &[usize]) -> Result<Self> {
        check_shape("param", shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(v: Real) -> Self {
        Self::leaf(vec![v], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: Real) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![v; n], shape.to_vec(), false)
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self::leaf(rng.normal_vec(n), shape.to_vec(), false)
    }

    /// Records an op output. Gradient tracking is attached only when grad mode
    /// is on and at least one parent requires it.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<Real>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[Real], &[Tensor]) -> Grads + Send + Sync + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Ok(Self::leaf(data, shape, false));
        }
        Ok(Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad: true,
            grad: Mutex::new(None),
            grad_fn: Some(GradFn {
                name,
                parents,
                backward: Box::new(backward),
            }),
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Leaf copy without graph history or gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn grad(&self) -> Option<Vec<Real>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Identity of the underlying node; stable for the tensor's lifetime.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients are accumulated (`+=`) into every reachable leaf that
    /// requires them; calling twice without [`Tensor::zero_grad`] doubles
    /// them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<Real>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &gf.parents);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} grad size", gf.name);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return dim_err(op, format!("zero extent in shape {shape:?}"));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return dim_err(op, format!("shape {shape:?} needs {n} values, got {len}"));
    }
    Ok(())
}

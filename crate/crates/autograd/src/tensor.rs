use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Values handed to a backward closure.
///
/// When gradients are requested without `create_graph`, every tensor in
/// here has been detached, so whatever the closure builds stays untracked.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub parents: &'a [Tensor],
    /// Which parents need a gradient (tracked before any detaching).
    pub needs_grad: &'a [bool],
    pub output: &'a Tensor,
}

pub(crate) type BackwardFn = dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync;

pub(crate) struct GradFn {
    pub name: &'static str,
    pub parents: Vec<Tensor>,
    pub backward: Box<BackwardFn>,
}

pub(crate) struct Node {
    pub id: u64,
    pub data: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad_fn: Option<GradFn>,
}

/// An immutable, reference-counted n-d array of `f64` that remembers how it
/// was computed.
///
/// Cloning is cheap. Every op returns a new tensor; the op's backward rule
/// is expressed with the same differentiable ops, so gradients can
/// themselves be differentiated.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (never receives gradients).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: next_id(),
            data: Arc::new(data),
            shape: shape.to_vec(),
            requires_grad: false,
            grad_fn: None,
        }))
    }

    /// Leaf tensor that gradients flow into.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Self {
        let t = Self::new(data, shape);
        t.into_leaf()
    }

    fn into_leaf(self) -> Self {
        let node = &self.0;
        Tensor(Arc::new(Node {
            id: next_id(),
            data: node.data.clone(),
            shape: node.shape.clone(),
            requires_grad: true,
            grad_fn: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(vec![1.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![value], &[1])
    }

    pub(crate) fn from_op<F>(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Self
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward: Box::new(backward),
        });
        Tensor(Arc::new(Node {
            id: next_id(),
            data: Arc::new(data),
            shape,
            requires_grad,
            grad_fn,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            requires_grad: false,
            grad_fn: None,
        }))
    }

    /// Same values as a fresh leaf that collects gradients.
    pub fn detach_leaf(&self) -> Tensor {
        self.detach().into_leaf()
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn> {
        self.0.grad_fn.as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.grad_fn().map(|g| g.name).unwrap_or("leaf");
        write!(f, "Tensor(shape={:?}, op={}", self.shape(), op)?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", self.data())?;
        }
        write!(f, ")")
    }
}

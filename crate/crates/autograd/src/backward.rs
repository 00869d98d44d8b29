use std::collections::{HashMap, HashSet};

use crate::tensor::{BackwardCtx, Tensor};

/// Nodes reachable from `root` through tracked edges, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(gf) = node.grad_fn() {
            for p in &gf.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// With `create_graph` the returned tensors are themselves part of the graph
/// and can be differentiated again. Inputs that `output` does not depend on
/// get `None`.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Option<Tensor>> {
    let wanted: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();
    let found = backprop(output, create_graph, |t| wanted.contains(&t.id()));
    inputs.iter().map(|t| found.get(&t.id()).cloned()).collect()
}

/// Gradients of a scalar `output` for every leaf it depends on, keyed by
/// tensor id.
pub fn backward(output: &Tensor) -> Gradients {
    Gradients(backprop(output, false, |t| t.is_leaf()))
}

fn backprop(
    output: &Tensor,
    create_graph: bool,
    keep: impl Fn(&Tensor) -> bool,
) -> HashMap<u64, Tensor> {
    assert_eq!(
        output.numel(),
        1,
        "gradients need a scalar output, got shape {:?}",
        output.shape()
    );
    let mut results = HashMap::new();
    if !output.requires_grad() {
        return results;
    }
    let order = topo_order(output);
    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    pending.insert(output.id(), Tensor::ones(output.shape()));

    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.id()) else {
            continue;
        };
        if keep(node) {
            results.insert(node.id(), g.clone());
        }
        let Some(gf) = node.grad_fn() else {
            continue;
        };
        let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
        let parent_grads = if create_graph {
            (gf.backward)(&BackwardCtx {
                grad: &g,
                parents: &gf.parents,
                needs_grad: &needs,
                output: node,
            })
        } else {
            let parents: Vec<Tensor> = gf.parents.iter().map(Tensor::detach).collect();
            let out = node.detach();
            let g = g.detach();
            (gf.backward)(&BackwardCtx {
                grad: &g,
                parents: &parents,
                needs_grad: &needs,
                output: &out,
            })
        };
        debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
        for (p, pg) in gf.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !p.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), p.shape(), "grad shape from {}", gf.name);
            let acc = match pending.remove(&p.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            pending.insert(p.id(), acc);
        }
    }
    results
}

/// Leaf gradients from [`backward`].
#[derive(Debug, Default)]
pub struct Gradients(HashMap<u64, Tensor>);

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.0.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::primitive::{self, Primitive, Saved};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Define-by-run record of primitive applications. Build a fresh tape per
/// forward pass.
#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`]: one gradient slot per recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients keyed like a parameter binding.
    pub fn named(&self, bindings: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor<T>> {
        bindings.iter().map(|(k, &v)| (k.clone(), self.wrt(v))).collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, None, Vec::new(), Saved::None, requires_grad)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        prim: Option<Primitive>,
        inputs: Vec<Var>,
        saved: Saved<T>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            prim,
            inputs,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, saved) = primitive::forward(&prim, &vals)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Some(prim), inputs.to_vec(), saved, requires_grad))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.apply(Primitive::Conv2d { stride, pad }, &ins)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.apply(Primitive::Dense, &ins)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d { size }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    /// Inverted dropout when `seed` is given (train mode); identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: Option<u64>) -> Result<Var> {
        match seed {
            Some(seed) if rate > 0.0 => self.apply(Primitive::Dropout { rate, seed }, &[x]),
            _ => Ok(x),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Result<Var> {
        self.apply(Primitive::Scale(f), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(prim) = &node.prim else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let gins = primitive::backward(prim, &ins, &node.value, &node.saved, &gout, &need)?;
            for (v, g) in node.inputs.iter().zip(gins) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Recompute every recorded node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.prim {
                None => node.value.clone(),
                Some(p) => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &out[v.0]).collect();
                    primitive::forward(p, &ins)?.0
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Hash of the piecewise-smooth region a pass lies in: the sign pattern
    /// of every ReLU input and the winning index of every max-pool window.
    /// Finite differences are only meaningful between passes that agree.
    pub fn region_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match (&node.prim, &node.saved) {
                (Some(Primitive::Relu), _) => {
                    for v in self.nodes[node.inputs[0].0].value.values() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                (Some(Primitive::MaxPool2d { .. }), Saved::Indices(idx)) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Recorded values, in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap().wrt(x);
        assert_eq!(g.values(), &[1.0; 6]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[4], 3.0).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let z = tape.scale(s, 0.0).unwrap();
        assert_eq!(tape.backward(z).unwrap().wrt(x).values(), &[0.0; 4]);
    }

    #[test]
    fn off_path_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0).with_requires_grad(true));
        let y = tape.leaf(Tensor::full(&[3], 1.0).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(y).values(), &[0.0; 3]);
    }

    #[test]
    fn loss_must_be_scalar_and_attached() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DetachedLoss)));
    }

    #[test]
    fn reused_var_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).values(), &[3.0, -4.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 3, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9]).unwrap());
        let w = tape.leaf(
            Tensor::from_f64(&[2, 1, 2, 2], &[0.5, -0.1, 0.2, 0.3, 0.9, 0.1, -0.4, 0.2])
                .unwrap()
                .with_requires_grad(true),
        );
        let c = tape.conv2d(x, w, None, 1, 0).unwrap();
        let d = tape.dropout(c, 0.5, Some(11)).unwrap();
        let r = tape.relu(d).unwrap();
        let _ = tape.softmax(r).unwrap();
        let replayed = tape.replay().unwrap();
        for (a, b) in tape.values().zip(&replayed) {
            assert_eq!(a.values(), b.values());
        }
    }
}

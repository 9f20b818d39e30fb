use super::tensor::{ParamId, ParamStore};
use super::NnError;
use crate::scalar::Scalar;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy of probability `p` against `label`.
pub fn bce_loss<T: Scalar>(p: T, label: bool) -> T {
    let eps = T::from_real(BCE_EPS);
    let p = p.max(eps).min(T::one() - eps);
    if label {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// d(bce_loss)/dp; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(p: T, label: bool) -> T {
    let eps = T::from_real(BCE_EPS);
    if p < eps || p > T::one() - eps {
        return T::zero();
    }
    if label {
        -T::one() / p
    } else {
        T::one() / (T::one() - p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Row { table: ParamId, index: usize },
    MatVec { w: ParamId, x: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    Slice { a: NodeId, start: usize },
    Bce { p: NodeId, label: bool },
    GradScale { a: NodeId, factor: T },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
}

/// Tape of vector-valued operations, rebuilt for every example.
///
/// Forward methods read parameters from a [`ParamStore`]; [`Graph::backward`]
/// accumulates into that store's gradients.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, expected: usize, got: usize) -> NnError {
    NnError::Shape {
        op,
        expected: vec![expected],
        got: vec![got],
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// First element of a node's value; the usual way to read a scalar output.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, values: Vec<T>) -> NodeId {
        self.push(values, Op::Input)
    }

    /// Whole parameter as a flat vector (biases).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.value(id).data().to_vec(), Op::Param(id))
    }

    pub fn row(&mut self, store: &ParamStore<T>, table: ParamId, index: usize) -> Result<NodeId, NnError> {
        let t = store.value(table);
        let rows = t.shape()[0];
        if index >= rows {
            return Err(NnError::IndexOutOfRange { index, len: rows });
        }
        Ok(self.push(t.row(index).to_vec(), Op::Row { table, index }))
    }

    /// `W x` for a `[n_out, n_in]` parameter.
    pub fn matvec(&mut self, store: &ParamStore<T>, w: ParamId, x: NodeId) -> Result<NodeId, NnError> {
        let wt = store.value(w);
        let shape = wt.shape();
        let xv = &self.nodes[x.0].value;
        if shape.len() != 2 || shape[1] != xv.len() {
            return Err(NnError::Shape {
                op: "matvec",
                expected: shape.to_vec(),
                got: vec![xv.len()],
            });
        }
        let n_in = shape[1];
        let out = wt
            .data()
            .chunks_exact(n_in)
            .map(|row| row.iter().zip(xv).map(|(&a, &b)| a * b).sum())
            .collect();
        Ok(self.push(out, Op::MatVec { w, x }))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(shape_err(op, av.len(), bv.len()));
        }
        Ok(av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|&x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts
            .iter()
            .flat_map(|p| self.nodes[p.0].value.iter().copied())
            .collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let av = &self.nodes[a.0].value;
        if start + len > av.len() || len == 0 {
            return Err(shape_err("slice", start + len, av.len()));
        }
        let v = av[start..start + len].to_vec();
        Ok(self.push(v, Op::Slice { a, start }))
    }

    /// Clamped binary cross-entropy of a length-1 probability node.
    pub fn bce(&mut self, p: NodeId, label: bool) -> Result<NodeId, NnError> {
        let pv = &self.nodes[p.0].value;
        if pv.len() != 1 {
            return Err(shape_err("bce", 1, pv.len()));
        }
        let loss = bce_loss(pv[0], label);
        Ok(self.push(vec![loss], Op::Bce { p, label }))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::GradScale { a, factor })
    }

    /// Back-propagates from scalar node `out`, adding into `store` gradients.
    pub fn backward(&self, out: NodeId, store: &mut ParamStore<T>) -> Result<(), NnError> {
        let n_out = self.nodes[out.0].value.len();
        if n_out != 1 {
            return Err(NnError::NonScalarOutput(n_out));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
            grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (dst, &gi) in p.grad.data_mut().iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::Row { table, index } => {
                    let p = store.get_mut(*table);
                    let width = g.len();
                    let row = &mut p.grad.data_mut()[index * width..(index + 1) * width];
                    for (dst, &gi) in row.iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::MatVec { w, x } => {
                    let xv = &self.nodes[x.0].value;
                    let n_in = xv.len();
                    let p = store.get_mut(*w);
                    let gx = acc(&mut grads, *x, n_in);
                    let (wv, wg) = (p.value.data(), p.grad.data_mut());
                    for (r, &gr) in g.iter().enumerate() {
                        let wrow = &wv[r * n_in..(r + 1) * n_in];
                        let grow = &mut wg[r * n_in..(r + 1) * n_in];
                        for j in 0..n_in {
                            gx[j] += wrow[j] * gr;
                            grow[j] += gr * xv[j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for id in [a, b] {
                        let ga = acc(&mut grads, *id, g.len());
                        for (dst, &gi) in ga.iter_mut().zip(&g) {
                            *dst += gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (T::one() - y[k]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (T::one() - y[k] * y[k]);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let gp = acc(&mut grads, *p, len);
                        for k in 0..len {
                            gp[k] += g[offset + k];
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, start } => {
                    let len = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, *a, len);
                    for (k, &gi) in g.iter().enumerate() {
                        ga[start + k] += gi;
                    }
                }
                Op::Bce { p, label } => {
                    let pv = self.nodes[p.0].value[0];
                    let gp = acc(&mut grads, *p, 1);
                    gp[0] += g[0] * bce_grad(pv, *label);
                }
                Op::GradScale { a, factor } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (dst, &gi) in ga.iter_mut().zip(&g) {
                        *dst += gi * *factor;
                    }
                }
            }
        }
        Ok(())
    }
}

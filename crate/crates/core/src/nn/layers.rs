use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{Graph, NodeId};
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NnError;
use crate::scalar::Scalar;

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| T::from_real(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = W x + b`.
pub fn linear_forward<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    w: ParamId,
    b: ParamId,
) -> Result<NodeId, NnError> {
    let wx = graph.matvec(store, w, x)?;
    let bias = graph.param(store, b);
    graph.add(wx, bias)
}

/// Row `index` of an embedding table.
pub fn embedding_lookup<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    table: ParamId,
    index: usize,
) -> Result<NodeId, NnError> {
    graph.row(store, table, index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let weight = store.add(
            format!("{name}.weight"),
            uniform(vec![n_out, n_in], xavier(n_in, n_out), rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![n_out]))?;
        Ok(Linear {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        linear_forward(graph, store, x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    /// Uniform(-0.1, 0.1) table.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let table = store.add(format!("{name}.table"), uniform(vec![rows, dim], 0.1, rng))?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        index: usize,
    ) -> Result<NodeId, NnError> {
        embedding_lookup(graph, store, self.table, index)
    }
}

/// LSTM cell with fused gate weights in `i, f, g, o` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    /// Glorot-uniform weights; forget-gate bias starts at 1, other biases at 0.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let h = hidden_dim;
        let w_ih = store.add(
            format!("{name}.w_ih"),
            uniform(vec![4 * h, input_dim], xavier(input_dim, h), rng),
        )?;
        let w_hh = store.add(format!("{name}.w_hh"), uniform(vec![4 * h, h], xavier(h, h), rng))?;
        let mut b = vec![T::zero(); 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = T::one());
        let bias = store.add(format!("{name}.bias"), Tensor::vector(b))?;
        Ok(LstmCell {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    pub fn zero_state<T: Scalar>(&self, graph: &mut Graph<T>) -> (NodeId, NodeId) {
        let h = graph.input(vec![T::zero(); self.hidden_dim]);
        let c = graph.input(vec![T::zero(); self.hidden_dim]);
        (h, c)
    }
}

/// One LSTM step: `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_step<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    cell: &LstmCell,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId), NnError> {
    let hd = cell.hidden_dim;
    for (node, want) in [(h_prev, hd), (c_prev, hd)] {
        let got = graph.value(node).len();
        if got != want {
            return Err(NnError::Shape {
                op: "lstm_step",
                expected: vec![want],
                got: vec![got],
            });
        }
    }
    let wx = graph.matvec(store, cell.w_ih, x)?;
    let wh = graph.matvec(store, cell.w_hh, h_prev)?;
    let b = graph.param(store, cell.bias);
    let pre = graph.add(wx, wh)?;
    let pre = graph.add(pre, b)?;

    let gate = |graph: &mut Graph<T>, k: usize| graph.slice(pre, k * hd, hd);
    let i = gate(graph, 0)?;
    let f = gate(graph, 1)?;
    let g = gate(graph, 2)?;
    let o = gate(graph, 3)?;
    let i = graph.sigmoid(i);
    let f = graph.sigmoid(f);
    let g = graph.tanh(g);
    let o = graph.sigmoid(o);

    let fc = graph.mul(f, c_prev)?;
    let ig = graph.mul(i, g)?;
    let c = graph.add(fc, ig)?;
    let tc = graph.tanh(c);
    let h = graph.mul(o, tc)?;
    Ok((h, c))
}

/// Stack of affine layers with `tanh` between them. The last layer is
/// followed by `tanh` only when `squash_output` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub squash_output: bool,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        sizes: &[usize],
        squash_output: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_, _>>()?;
        Ok(Mlp { layers, squash_output })
    }

    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: NodeId,
    ) -> Result<NodeId, NnError> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(graph, store, x)?;
            if i < last || self.squash_output {
                x = graph.tanh(x);
            }
        }
        Ok(x)
    }
}

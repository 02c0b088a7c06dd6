//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse, accumulating adjoints. Fake-quant nodes pass gradients straight
//! through inside their clipping range and block them outside.

use crate::error::{Error, Result};
use crate::quant::{QuantParams, QuantScheme};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable parameter across tapes.
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    /// `mask[i]` is the STE indicator for element `i`.
    FakeQuant { x: Var, mask: Vec<bool> },
    L2Normalize { x: Var, norms: Vec<f32> },
    Scale { x: Var, factor: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operations and cached values for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant (no parameter gradient is reported for it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(t, Op::Param(id))
    }

    /// `x · wᵀ + b` for `x: [M, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || bv.rank() != 1 || bv.len() != wv.shape()[0] {
            return Err(Error::dim(format!(
                "linear weight {:?} / bias {:?} do not compose",
                wv.shape(),
                bv.shape()
            )));
        }
        let out = xv.matmul_transposed(wv)?.add_row(bv)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.push(out, Op::Relu { x })
    }

    /// Quantize-dequantize with one parameter set for the whole tensor.
    pub fn fake_quant(&mut self, x: Var, params: &QuantParams) -> Var {
        self.fake_quant_scheme(x, &QuantScheme::PerTensor(*params))
            .expect("per-tensor scheme fits any shape")
    }

    pub fn fake_quant_scheme(&mut self, x: Var, scheme: &QuantScheme) -> Result<Var> {
        let (out, mask) = scheme.fake_quantize(self.value(x))?;
        Ok(self.push(out, Op::FakeQuant { x, mask }))
    }

    /// Row-wise L2 normalization of a rank-2 value.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.l2_normalize()?;
        let norms = (0..xv.rows()).map(|i| crate::tensor::row_norm(xv.row(i))).collect();
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// Back-propagates `seed` (the gradient of the objective with respect
    /// to `output`) through the whole tape.
    pub fn backward(self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::dim(format!(
                "seed shape {:?} != output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    adj[idx] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    // dx = g · W, dW = gᵀ · x, db = column sums of g
                    let dx = g.matmul(wv)?;
                    let dw = g.transpose()?.matmul(xv)?;
                    let db = g.sum_rows()?;
                    accumulate(&mut adj, *x, dx)?;
                    accumulate(&mut adj, *w, dw)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g.zip_map(xv, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::FakeQuant { x, mask } => {
                    let mut dx = g;
                    for (d, &keep) in dx.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::L2Normalize { x, norms } => {
                    // y = x / |x|  =>  dx = (g - y (g·y)) / |x|
                    let y = &node.value;
                    let d = y.cols();
                    let mut dx = Vec::with_capacity(y.len());
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = &g.data()[i * d..(i + 1) * d];
                        let mut dot = 0.0f32;
                        for (&a, &b) in gr.iter().zip(yr) {
                            dot += a * b;
                        }
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * dot) / n));
                    }
                    accumulate(&mut adj, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut adj, *x, g.map(|v| v * f))?;
                }
            }
        }

        let mut params = std::collections::BTreeMap::new();
        for (node, a) in self.nodes.iter().zip(adj.iter_mut()) {
            if let (Op::Param(id), Some(g)) = (&node.op, a.as_ref()) {
                params.insert(*id, g.clone());
            }
        }
        Ok(Gradients { nodes: adj, params })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    let slot = &mut adj[v.0];
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
    });
    Ok(())
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: std::collections::BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf (input or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> std::collections::BTreeMap<ParamId, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::BitWidth;

    #[test]
    fn fake_quant_forward_and_ste() {
        let p = QuantParams::from_range(0.0, 2.55, BitWidth::W8).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 5.0, -1.0, 2.55]).unwrap());
        let y = tape.fake_quant(x, &p);
        assert_eq!(tape.value(y).data()[0], 1.0);
        let g = tape.backward(y, Tensor::vector(vec![0.7, 0.7, 0.7, 0.7]).unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.7, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[[1.0f32, 0.0]]).unwrap());
        let w = tape.param(0, Tensor::from_rows(&[[2.0f32, 3.0]]).unwrap());
        let b = tape.param(1, Tensor::vector(vec![0.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);

        let mut tape = Tape::new();
        let xs = Tensor::from_rows(&[[1.5f32, -2.0, 0.25], [3.0, 0.0, -1.0]]).unwrap();
        let x = tape.input(xs.clone());
        let w = tape.param(0, Tensor::eye(3));
        let b = tape.param(1, Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), &xs);
        let seed = Tensor::full(&[2, 3], 1.0);
        let g = tape.backward(y, seed).unwrap();
        assert_eq!(g.param(1).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3]));
        let w = tape.param(0, Tensor::zeros(&[2, 2]));
        let b = tape.param(1, Tensor::zeros(&[2]));
        assert!(matches!(tape.linear(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn shared_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let a = tape.scale(x, 2.0);
        let b = tape.scale(a, 1.0);
        let c = tape.scale(a, 3.0);
        let _ = (b, c);
        let g = tape.backward(c, Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0, 6.0]);
    }
}

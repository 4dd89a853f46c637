//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and the recipe
//! for its backward pass. [`Graph::backward`] walks the tape in reverse,
//! so node ids double as a topological order.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Sum(Var),
    SegmentMean {
        input: Var,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a leaf (an input or a parameter copy).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `y = x·Wᵀ + b` for a batch `x` of shape `[n, in]`, `W` of shape
    /// `[out, in]` and `b` of shape `[out]`. Each row computes `W·x_i + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
            return Err(Error::Shape {
                op: "affine",
                left: wv.shape().to_vec(),
                right: xv.shape().to_vec(),
            });
        }
        let (out, inner) = (wv.shape()[0], wv.shape()[1]);
        if bv.len() != out {
            return Err(Error::Shape {
                op: "affine bias",
                left: wv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = xv.rows();
        let mut y = Vec::with_capacity(n * out);
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for i in 0..n {
            let xi = &xd[i * inner..(i + 1) * inner];
            for o in 0..out {
                let wo = &wd[o * inner..(o + 1) * inner];
                let dot: f64 = xi.iter().zip(wo).map(|(a, b)| a * b).sum();
                y.push(dot + bd[o]);
            }
        }
        let value = Tensor::new(vec![n, out], y)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so divergence surfaces in the loss
        let value = self.value(a).map(|v| if v <= 0.0 { 0.0 } else { v });
        self.push(value, Op::Relu(a))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a))
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Row means per group: output row `g` is the mean of the input rows `i`
    /// with `groups[i] == g`. Every group id below `n_groups` must occur.
    pub fn segment_mean(&mut self, a: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let av = self.value(a);
        if groups.len() != av.rows() {
            return Err(Error::Shape {
                op: "segment_mean",
                left: av.shape().to_vec(),
                right: vec![groups.len()],
            });
        }
        let cols = av.cols();
        let mut counts = vec![0usize; n_groups];
        let mut out = vec![0.0; n_groups * cols];
        for (i, &g) in groups.iter().enumerate() {
            if g >= n_groups {
                return Err(Error::Label {
                    label: g,
                    classes: n_groups,
                });
            }
            counts[g] += 1;
            for (o, v) in out[g * cols..(g + 1) * cols].iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Coverage(format!("segment {empty} has no rows")));
        }
        for (g, &c) in counts.iter().enumerate() {
            for o in &mut out[g * cols..(g + 1) * cols] {
                *o /= c as f64;
            }
        }
        let value = Tensor::new(vec![n_groups, cols], out)?;
        Ok(self.push(
            value,
            Op::SegmentMean {
                input: a,
                groups: groups.to_vec(),
                counts,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n || n == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let probs = softmax_rows(lv);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = lv.row(i);
                let top = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                let max = row[top];
                let rest: f64 = (0..k).filter(|&j| j != top).map(|j| (row[j] - max).exp()).sum();
                max - row[y] + rest.ln_1p()
            })
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0; self.value(loss).len()]).expect("seed gradient"));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (out, inner) = (wv.shape()[0], wv.shape()[1]);
                    let n = xv.rows();
                    let (gd, xd, wd) = (gout.data(), xv.data(), wv.data());
                    let mut gx = vec![0.0; n * inner];
                    let mut gw = vec![0.0; out * inner];
                    let mut gb = vec![0.0; out];
                    for i in 0..n {
                        let xi = &xd[i * inner..(i + 1) * inner];
                        let gxi = &mut gx[i * inner..(i + 1) * inner];
                        for o in 0..out {
                            let g = gd[i * out + o];
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            let wo = &wd[o * inner..(o + 1) * inner];
                            let gwo = &mut gw[o * inner..(o + 1) * inner];
                            for k in 0..inner {
                                gxi[k] += g * wo[k];
                                gwo[k] += g * xi[k];
                            }
                        }
                    }
                    let gx = Tensor::new(xv.shape().to_vec(), gx).expect("affine dx");
                    let gw = Tensor::new(wv.shape().to_vec(), gw).expect("affine dw");
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), gb).expect("affine db");
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let data = gout
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), data).expect("relu"));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, gout.map(|g| -g));
                    acc(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = gout.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gout.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga).expect("mul"));
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb).expect("mul"));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, gout.map(|g| g * c));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, gout),
                Op::Exp(a) => {
                    let data = gout.data().iter().zip(node.value.data()).map(|(g, e)| g * e).collect();
                    acc(&mut grads, *a, Tensor::new(node.value.shape().to_vec(), data).expect("exp"));
                }
                Op::Sum(a) => {
                    let g = gout.item();
                    let av = self.value(*a);
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), vec![g; av.len()]).expect("sum"));
                }
                Op::SegmentMean { input, groups, counts } => {
                    let iv = self.value(*input);
                    let cols = iv.cols();
                    let mut gi = Tensor::zeros(iv.shape());
                    for (i, &g) in groups.iter().enumerate() {
                        let inv = 1.0 / counts[g] as f64;
                        for (d, s) in gi.row_mut(i).iter_mut().zip(&gout.data()[g * cols..(g + 1) * cols]) {
                            *d = s * inv;
                        }
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let g = gout.item() / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gl.row_mut(i)[y] -= 1.0;
                    }
                    for v in gl.data_mut() {
                        *v *= g;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Grads { grads }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..logits.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_is_identity_on_positive_inputs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.5, 3.0, 1e-9]));
        let y = g.relu(x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn affine_scalar_case() {
        let mut g = Graph::new();
        let w = g.input(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = g.input(Tensor::vector(vec![3.0]));
        let x = g.input(Tensor::new(vec![1, 1], vec![4.0]).unwrap());
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn affine_identity_weights() {
        let mut g = Graph::new();
        let xt = Tensor::from_rows(&[[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]]).unwrap();
        let x = g.input(xt.clone());
        let w = g.input(Tensor::identity(3));
        let b = g.input(Tensor::zeros(&[3]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn affine_reports_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[4, 5]));
        let b = g.input(Tensor::zeros(&[4]));
        match g.affine(x, w, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![4, 5]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[3, 7]));
        let loss = g.softmax_cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_give_vanishing_loss() {
        let mut previous = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0, 1000.0] {
            let mut g = Graph::new();
            let logits = g.input(Tensor::from_rows(&[[margin, 0.0, 0.0]]).unwrap());
            let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
            let l = g.value(loss).item();
            assert!(l.is_finite() && l >= 0.0);
            assert!(l < previous || l == 0.0);
            previous = l;
        }
        assert!(previous < 1e-300);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[[1.0, 2.0, -30.0], [700.0, 699.0, 0.0]]).unwrap();
        let p = softmax_rows(&t);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn segment_mean_requires_every_group() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.segment_mean(x, &[0, 0], 2), Err(Error::Coverage(_))));
    }
}

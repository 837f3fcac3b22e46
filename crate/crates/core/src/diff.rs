//! Reverse-mode gradient tape over small dense vectors.
//!
//! Only the primitives the learners need are supported: add, scale,
//! elementwise multiply, dot, matrix-vector product, L2 normalization and
//! softmax cross-entropy. Every value is a flat `Vec<f64>`; scalars have
//! length one and matrices are stored row-major.
//!
//! ```
//! use driftbench_core::diff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(vec![3.0]);
//! let y = tape.dot(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), &[6.0]);
//! ```

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Dot(NodeId, NodeId),
    MatVec {
        matrix: NodeId,
        vector: NodeId,
        rows: usize,
        cols: usize,
    },
    Normalize {
        input: NodeId,
        norm: f64,
    },
    SoftmaxCe {
        logits: Vec<NodeId>,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Append-only record of a forward computation. Inputs always precede the
/// nodes that consume them, so a reverse sweep is a valid topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> &[f64] {
        &self.adjoints[node.0]
    }
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax cross-entropy over empty logits".into()));
    }
    if target >= logits.len() {
        return Err(Error::Range {
            index: target,
            limit: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Input node: a parameter block or a constant.
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, node: NodeId) -> &[f64] {
        &self.nodes[node.0].value
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.nodes[node.0].value[0]
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::Shape(format!("{what}: lengths {la} and {lb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "add")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| c * x).collect();
        self.push(Op::Scale(a, c), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "mul")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "dot")?;
        let value = vec![dot(self.value(a), self.value(b))];
        Ok(self.push(Op::Dot(a, b), value))
    }

    /// `matrix · vector` with `matrix` stored row-major as `rows × cols`.
    pub fn matvec(&mut self, matrix: NodeId, rows: usize, cols: usize, vector: NodeId) -> Result<NodeId> {
        let m = self.value(matrix);
        let x = self.value(vector);
        if m.len() != rows * cols || x.len() != cols {
            return Err(Error::Shape(format!(
                "matvec: {}-element matrix as {rows}x{cols} times {}-vector",
                m.len(),
                x.len()
            )));
        }
        let value = m.chunks_exact(cols).map(|row| dot(row, x)).collect();
        Ok(self.push(
            Op::MatVec {
                matrix,
                vector,
                rows,
                cols,
            },
            value,
        ))
    }

    /// `x / ‖x‖`; the zero vector maps to zero with a zero subgradient.
    pub fn normalize(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let norm = l2_norm(x);
        let value = if norm > 0.0 {
            x.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; x.len()]
        };
        self.push(Op::Normalize { input, norm }, value)
    }

    /// Cross-entropy of the softmax over scalar logit nodes.
    pub fn softmax_ce(&mut self, logits: &[NodeId], target: usize) -> Result<NodeId> {
        let mut values = Vec::with_capacity(logits.len());
        for &l in logits {
            let v = self.value(l);
            if v.len() != 1 {
                return Err(Error::Shape(format!("logit node has length {}", v.len())));
            }
            values.push(v[0]);
        }
        let (loss, mut probs) = softmax_cross_entropy(&values, target)?;
        probs[target] += 1.0;
        Ok(self.push(
            Op::SoftmaxCe {
                logits: logits.to_vec(),
                target,
                probs,
            },
            vec![loss],
        ))
    }

    /// Sum of scalar nodes, built from `add`.
    pub fn sum(&mut self, terms: &[NodeId]) -> Result<Option<NodeId>> {
        let mut iter = terms.iter().copied();
        let Some(mut acc) = iter.next() else {
            return Ok(None);
        };
        for t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from a non-scalar node of length {}",
                self.value(loss).len()
            )));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if adj[idx].iter().all(|g| *g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut adj[a.0], 1.0, &g);
                    axpy(&mut adj[b.0], 1.0, &g);
                }
                Op::Scale(a, c) => axpy(&mut adj[a.0], *c, &g),
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k] * vb[k];
                        adj[b.0][k] += g[k] * va[k];
                    }
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    axpy(&mut adj[a.0], g[0], vb);
                    axpy(&mut adj[b.0], g[0], va);
                }
                Op::MatVec {
                    matrix,
                    vector,
                    rows,
                    cols,
                } => {
                    let m = self.value(*matrix);
                    let x = self.value(*vector);
                    for r in 0..*rows {
                        if g[r] == 0.0 {
                            continue;
                        }
                        let row = &m[r * cols..(r + 1) * cols];
                        axpy(&mut adj[matrix.0][r * cols..(r + 1) * cols], g[r], x);
                        axpy(&mut adj[vector.0], g[r], row);
                    }
                }
                Op::Normalize { input, norm } => {
                    if *norm > 0.0 {
                        let y = &self.nodes[idx].value;
                        let proj = dot(y, &g);
                        for k in 0..g.len() {
                            adj[input.0][k] += (g[k] - y[k] * proj) / norm;
                        }
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    for (k, l) in logits.iter().enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        adj[l.0][0] += g[0] * (probs[k] - onehot);
                    }
                }
            }
            adj[idx] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Central finite differences of `f` at `params`, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + eps;
        let up = f(&x)?;
        x[k] = orig - eps;
        let down = f(&x)?;
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("f is not finite around coordinate {k}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `max_k |analytic_k - numeric_k| / max(1, |numeric_k|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of a loss builder against finite differences.
///
/// `build` receives a fresh tape and one leaf per parameter block and returns
/// the scalar loss node.
pub fn grad_check<F>(build: F, blocks: &[Vec<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = blocks.iter().map(|b| tape.leaf(b.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| grads.wrt(l).to_vec()).collect();

    let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
    let flat: Vec<f64> = blocks.concat();
    let evaluate = |x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut offset = 0;
        let leaves: Vec<NodeId> = sizes
            .iter()
            .map(|&n| {
                let leaf = tape.leaf(x[offset..offset + n].to_vec());
                offset += n;
                leaf
            })
            .collect();
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.scalar(loss))
    };
    let numeric = finite_difference_gradient(evaluate, &flat, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_ce_closed_forms() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad, vec![-0.5, 0.5]);

        let (loss, _) = softmax_cross_entropy(&[1000.0, -1000.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        let (loss, grad) = softmax_cross_entropy(&[1e6, -1e6, 3.0], 1).unwrap();
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));

        assert!(matches!(softmax_cross_entropy(&[], 0), Err(Error::Shape(_))));
    }

    #[test]
    fn square_and_constant_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0]);
        let y = tape.dot(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0, -1.0]);
        let c = tape.leaf(vec![2.0]);
        let _unused = tape.scale(x, 4.0);
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.wrt(x), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matvec_by_hand() {
        let mut tape = Tape::new();
        let m = tape.leaf(vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.leaf(vec![1.0, 1.0]);
        let y = tape.matvec(m, 2, 2, x).unwrap();
        assert_eq!(tape.value(y), &[3.0, 7.0]);
        assert!(matches!(tape.matvec(m, 2, 2, y).and_then(|_| tape.matvec(m, 3, 2, x)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_vector_normalizes_to_zero_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0]);
        let w = tape.leaf(vec![1.0, 2.0]);
        let n = tape.normalize(x);
        assert_eq!(tape.value(n), &[0.0, 0.0]);
        let loss = tape.dot(n, w).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x), &[0.0, 0.0]);
    }

    #[test]
    fn square_grad_check_is_tight() {
        let err = grad_check(|t, p| t.dot(p[0], p[0]), &[vec![3.0]], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_ce_grad_check_at_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let target = rng.gen_range(0..5);
            let err = grad_check(
                |t, p| {
                    let scalars: Vec<NodeId> = (0..5)
                        .map(|k| {
                            let mut e = vec![0.0; 5];
                            e[k] = 1.0;
                            let e = t.leaf(e);
                            t.dot(p[0], e)
                        })
                        .collect::<Result<_>>()?;
                    t.softmax_ce(&scalars, target)
                },
                &[logits],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn doubled_gradient_is_detected() {
        let numeric = finite_difference_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        let err = max_relative_error(&[12.0], &numeric);
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn composite_embed_cosine_ce_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = vec![0.3, -0.7];
        let protos = [vec![1.0, 0.2, -0.5], vec![-0.4, 0.9, 0.1]];
        let err = grad_check(
            |t, p| {
                let x = t.leaf(x.clone());
                let e = t.matvec(p[0], 3, 2, x)?;
                let e = t.normalize(e);
                let logits = protos
                    .iter()
                    .map(|q| {
                        let q = t.leaf(q.clone());
                        let q = t.normalize(q);
                        let c = t.dot(e, q)?;
                        Ok(t.scale(c, 5.0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                t.softmax_ce(&logits, 1)
            },
            &[w],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mul_and_add_gradients() {
        let err = grad_check(
            |t, p| {
                let m = t.mul(p[0], p[1])?;
                let s = t.add(m, p[0])?;
                t.dot(s, s)
            },
            &[vec![0.5, -1.5, 2.0], vec![1.1, 0.3, -0.2]],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bad_step_is_rejected() {
        assert!(finite_difference_gradient(|x| Ok(x[0]), &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_difference_gradient(|_| Ok(f64::NAN), &[1.0], 1e-3),
            Err(Error::Numeric(_))
        ));
    }
}

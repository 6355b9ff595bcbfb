//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use super::kernels::{self, broadcast_binary, reduce_to};
use super::Tensor;
use crate::error::{DddmError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    MeanPool(Var, usize),
    Sum(Var),
    L1Loss(Var, Var),
    MseLoss(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input or parameter. Matrices only; vectors enter as `[1, n]`.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.require_matrix("leaf")?;
        self.push(value, Op::Leaf, "leaf")
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_cols(&values)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_pool(&mut self, a: Var, group: usize) -> Result<Var> {
        let out = kernels::mean_pool(self.value(a), group)?;
        self.push(out, Op::MeanPool(a, group), "mean_pool")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(DddmError::shape(
                "l1_loss",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let n = va.len() as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::L1Loss(a, b), "l1_loss")
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(DddmError::shape(
                "mse_loss",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let n = va.len() as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::MseLoss(a, b), "mse_loss")
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(DddmError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));

        fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                // Leaf gradients are what callers read back.
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = kernels::matmul_nt(&g, self.value(*b));
                    let gb = kernels::matmul_tn(self.value(*a), &g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, reduce_to(&g, self.value(*a).shape()));
                    accum(&mut grads, *b, reduce_to(&g, self.value(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, reduce_to(&g, self.value(*a).shape()));
                    accum(&mut grads, *b, reduce_to(&g.map(|v| -v), self.value(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_binary("mul", &g, vb, |x, y| x * y)?;
                    let gb = broadcast_binary("mul", &g, va, |x, y| x * y)?;
                    accum(&mut grads, *a, reduce_to(&ga, va.shape()));
                    accum(&mut grads, *b, reduce_to(&gb, vb.shape()));
                }
                Op::Scale(a, k) => accum(&mut grads, *a, g.map(|v| v * k)),
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= 1.0 - y * y;
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut gp = Tensor::zeros(self.value(p).shape().to_vec());
                        for i in 0..g.rows() {
                            gp.row_mut(i)
                                .copy_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                        }
                        offset += pc;
                        accum(&mut grads, p, gp);
                    }
                }
                Op::MeanPool(a, group) => {
                    let va = self.value(*a);
                    let mut ga = Tensor::zeros(va.shape().to_vec());
                    let inv = 1.0 / *group as f64;
                    for i in 0..va.rows() {
                        let src = g.row(i / group).to_vec();
                        for (o, s) in ga.row_mut(i).iter_mut().zip(src) {
                            *o = s * inv;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accum(&mut grads, *a, Tensor::filled(self.value(*a).shape().to_vec(), gv));
                }
                Op::L1Loss(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = g.item() / va.len() as f64;
                    let sign = |d: f64| {
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    let ga = Tensor::new(
                        va.shape().to_vec(),
                        va.data().iter().zip(vb.data()).map(|(x, y)| k * sign(x - y)).collect(),
                    )?;
                    let gb = ga.map(|v| -v);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::MseLoss(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.item() / va.len() as f64;
                    let ga = Tensor::new(
                        va.shape().to_vec(),
                        va.data().iter().zip(vb.data()).map(|(x, y)| k * (x - y)).collect(),
                    )?;
                    let gb = ga.map(|v| -v);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Scalarise with fixed random weights, then compare every input
    /// coordinate against a central difference of the forward pass.
    fn check(build: Build, shapes: &[(usize, usize)], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random_matrix(&mut rng, r, c)).collect();
        let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (Tape, Var, Vec<Var>, Tensor) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let out = build(&mut tape, &vars).unwrap();
            let shape = tape.value(out).shape().to_vec();
            let w = weights.cloned().unwrap_or_else(|| {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                random_matrix(&mut r, shape[0], shape[1])
            });
            let wv = tape.leaf(w.clone()).unwrap();
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            (tape, loss, vars, w)
        };
        let (tape, loss, vars, w) = eval(&inputs, None);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[k]);
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= h;
                let (tp, lp, _, _) = eval(&plus, Some(&w));
                let (tm, lm, _, _) = eval(&minus, Some(&w));
                let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
                let an = g.data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn check20(build: Build, shapes: &[(usize, usize)]) {
        for seed in 0..20 {
            let err = check(build, shapes, seed);
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn fd_matmul() {
        check20(|t, v| t.matmul(v[0], v[1]), &[(3, 4), (4, 2)]);
    }

    #[test]
    fn fd_add_broadcast() {
        check20(|t, v| t.add(v[0], v[1]), &[(3, 4), (1, 4)]);
        check20(|t, v| t.add(v[0], v[1]), &[(3, 4), (3, 1)]);
    }

    #[test]
    fn fd_sub_and_mul() {
        check20(|t, v| t.sub(v[0], v[1]), &[(2, 3), (2, 3)]);
        check20(|t, v| t.mul(v[0], v[1]), &[(3, 3), (3, 1)]);
        check20(|t, v| t.scale(v[0], -2.5), &[(2, 2)]);
    }

    #[test]
    fn fd_activations() {
        check20(|t, v| t.tanh(v[0]), &[(3, 5)]);
        check20(|t, v| t.sigmoid(v[0]), &[(3, 5)]);
    }

    #[test]
    fn fd_concat_and_pool() {
        check20(|t, v| t.concat(&[v[0], v[1], v[2]]), &[(2, 1), (2, 3), (2, 2)]);
        check20(|t, v| t.mean_pool(v[0], 3), &[(6, 2)]);
    }

    #[test]
    fn fd_losses() {
        check20(|t, v| t.mse_loss(v[0], v[1]), &[(3, 4), (3, 4)]);
        // Kinks of |x| sit on a null set; random inputs avoid them.
        check20(|t, v| t.l1_loss(v[0], v[1]), &[(3, 4), (3, 4)]);
    }

    #[test]
    fn fd_composite_network() {
        check20(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add(h, v[2])?;
                let h = t.tanh(h)?;
                let o = t.matmul(h, v[3])?;
                t.mse_loss(o, v[4])
            },
            &[(4, 3), (3, 5), (1, 5), (5, 2), (4, 2)],
        );
    }

    #[test]
    fn simple_cases() {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::identity(2)).unwrap();
        let v = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let mv = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(mv), tape.value(v));
        let l1 = tape.l1_loss(v, v).unwrap();
        assert_eq!(tape.value(l1).item(), 0.0);

        let zero = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let th = tape.tanh(zero).unwrap();
        let g = tape.backward(th).unwrap();
        assert_eq!(g.wrt(zero).item(), 1.0);
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::row_vector(&[0.5, -1.0, 2.0])).unwrap();
        let x = tape.leaf(Tensor::row_vector(&[3.0, 1.0, -4.0])).unwrap();
        let unused = tape.leaf(Tensor::row_vector(&[9.0])).unwrap();
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[3.0, 1.0, -4.0]);
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row_vector(&[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(v), Err(DddmError::Contract(_))));
    }

    #[test]
    fn non_finite_rejected_at_boundary() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(Tensor::scalar(f64::NAN)),
            Err(DddmError::Numeric(_))
        ));
        let big = tape.leaf(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(tape.mul(big, big), Err(DddmError::Numeric(_))));
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(DddmError::Shape { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let a = tape.leaf(random_matrix(&mut rng, 8, 6)).unwrap();
            let b = tape.leaf(random_matrix(&mut rng, 6, 4)).unwrap();
            let h = tape.matmul(a, b).unwrap();
            let h = tape.tanh(h).unwrap();
            let l = tape.sum(h).unwrap();
            let g = tape.backward(l).unwrap();
            (g.wrt(a), g.wrt(b))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records an eager forward pass as a list of nodes; calling
//! [`Tape::backward`] on a scalar output walks the list in reverse and
//! accumulates gradients for every node, including the leaves that hold
//! model parameters. One tape belongs to one forward pass.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2, RMS_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R: Scalar> {
    Leaf,
    MatMulNN(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Scale(Var, R),
    Relu(Var),
    RmsNormRows {
        x: Var,
        gain: Var,
        denoms: Vec<R>,
    },
    ScaledSoftmaxRows {
        s: Var,
        scale: R,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        src: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<R>,
        target: usize,
    },
}

struct Node<R: Scalar> {
    value: Tensor2<R>,
    op: Op<R>,
}

/// Eager forward recorder with reverse-mode backward.
pub struct Tape<R: Scalar> {
    nodes: Vec<Node<R>>,
}

impl<R: Scalar> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Scalar> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor2<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor2<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor2<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> R {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar_value requires a 1x1 node");
        t.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMulNN(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    pub fn rms_norm_rows(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (value, denoms) = self.value(x).rms_norm_rows(self.value(gain))?;
        Ok(self.push(value, Op::RmsNormRows { x, gain, denoms }))
    }

    pub fn scaled_softmax_rows(&mut self, s: Var, scale: R) -> Var {
        let value = self.value(s).scaled_softmax_rows(scale);
        self.push(value, Op::ScaledSoftmaxRows { s, scale })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor2<R>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor2::concat_cols(&tensors)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(src).select_rows(indices)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                src,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Negative log softmax probability of `target` for a 1-by-V logits row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let row = self.value(logits);
        if row.rows() != 1 {
            return Err(Error::InvalidArgument(
                "cross_entropy expects a single logits row".to_string(),
            ));
        }
        if target >= row.cols() {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy target {target} outside vocabulary of {}",
                row.cols()
            )));
        }
        let (loss, probs) = crate::numerics::cross_entropy_logits(row.row(0), target);
        let value = Tensor2::from_vec(1, 1, vec![loss]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                target,
            },
        ))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, out: Var) -> Result<Gradients<R>> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::InvalidArgument(
                "backward requires a scalar (1x1) output node".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor2<R>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor2::from_vec(1, 1, vec![R::one()]));

        for idx in (0..=out.0).rev() {
            // Take to appease the borrow checker; restored after dispatch.
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMulNN(a, b) => {
                    let da = upstream.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&upstream)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulNT(a, b) => {
                    let da = upstream.matmul(self.value(*b))?;
                    let db = upstream.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone())?;
                    accumulate(&mut grads, *b, upstream.clone())?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, upstream.scale(*c))?;
                }
                Op::Relu(a) => {
                    let mask = self.value(*a);
                    let mut da = upstream.clone();
                    for (g, &x) in da.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        if x <= R::zero() {
                            *g = R::zero();
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::RmsNormRows { x, gain, denoms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (rows, cols) = xv.shape();
                    let n = R::from_usize(cols).unwrap();
                    let mut dx = Tensor2::zeros(rows, cols);
                    let mut dg = Tensor2::zeros(1, cols);
                    for i in 0..rows {
                        let rho = denoms[i];
                        let xr = xv.row(i);
                        let ur = upstream.row(i);
                        let g = gv.row(0);
                        // s1 = sum_j u_j g_j x_j
                        let mut s1 = R::zero();
                        for j in 0..cols {
                            s1 = s1 + ur[j] * g[j] * xr[j];
                        }
                        let rho3 = rho * rho * rho;
                        for j in 0..cols {
                            let v = ur[j] * g[j] / rho - xr[j] * s1 / (n * rho3);
                            dx.set(i, j, v);
                            let cur = dg.get(0, j);
                            dg.set(0, j, cur + ur[j] * xr[j] / rho);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dg)?;
                }
                Op::ScaledSoftmaxRows { s, scale } => {
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = y.shape();
                    let mut ds = Tensor2::zeros(rows, cols);
                    for i in 0..rows {
                        let yr = y.row(i);
                        let ur = upstream.row(i);
                        let mut dot = R::zero();
                        for j in 0..cols {
                            dot = dot + ur[j] * yr[j];
                        }
                        for j in 0..cols {
                            ds.set(i, j, *scale * yr[j] * (ur[j] - dot));
                        }
                    }
                    accumulate(&mut grads, *s, ds)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let rows = upstream.rows();
                        let mut dp = Tensor2::zeros(rows, pc);
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(&upstream.row(i)[off..off + pc]);
                        }
                        accumulate(&mut grads, p, dp)?;
                        off += pc;
                    }
                }
                Op::SelectRows { src, indices } => {
                    let (rows, cols) = self.value(*src).shape();
                    let mut ds = Tensor2::zeros(rows, cols);
                    for (i, &idx) in indices.iter().enumerate() {
                        let dst = ds.row_mut(idx);
                        for (d, &u) in dst.iter_mut().zip(upstream.row(i)) {
                            *d = *d + u;
                        }
                    }
                    accumulate(&mut grads, *src, ds)?;
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    target,
                } => {
                    let u = upstream.get(0, 0);
                    let mut dl = Tensor2::zeros(1, probs.len());
                    for (j, &p) in probs.iter().enumerate() {
                        let delta = if j == *target { R::one() } else { R::zero() };
                        dl.set(0, j, u * (p - delta));
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<R: Scalar>(
    grads: &mut [Option<Tensor2<R>>],
    v: Var,
    delta: Tensor2<R>,
) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Gradients indexed by tape node, produced by [`Tape::backward`].
pub struct Gradients<R: Scalar> {
    grads: Vec<Option<Tensor2<R>>>,
}

impl<R: Scalar> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor2<R>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node, materializing zeros for nodes the output never
    /// depended on.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor2<R> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor2::zeros(shape.0, shape.1),
        }
    }
}

/// `sqrt(mean(x^2) + eps)` shared by forward and analysis code.
pub fn rms_denominator<R: Scalar>(row: &[R]) -> R {
    let n = R::from_usize(row.len()).unwrap();
    let ms = row.iter().map(|&v| v * v).sum::<R>() / n;
    (ms + R::of_f64(RMS_EPS)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Tensor2<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Tensor2::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Builds a small composite graph exercising every op and returns the
    /// scalar loss for the given parameter set.
    fn composite_loss(params: &[Tensor2<f64>]) -> (f64, Vec<Tensor2<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let (w1, w2, gain, emb) = (vars[0], vars[1], vars[2], vars[3]);

        let x = tape.select_rows(emb, &[0, 2, 1]).unwrap(); // 3 x 4
        let normed = tape.rms_norm_rows(x, gain).unwrap();
        let h = tape.matmul_nt(normed, w1).unwrap(); // 3 x 5
        let h = tape.relu(h);
        let s = tape.matmul_nt(h, h).unwrap(); // 3 x 3
        let a = tape.scaled_softmax_rows(s, 0.5);
        let o = tape.matmul(a, h).unwrap(); // 3 x 5
        let left = tape.select_rows(o, &[0]).unwrap();
        let right = tape.select_rows(o, &[1]).unwrap();
        let both = tape.concat_cols(&[left, right].to_vec()).unwrap(); // 1 x 10
        let both = tape.scale(both, 1.7);
        let logits = tape.matmul_nt(both, w2).unwrap(); // 1 x 6
        let loss = tape.cross_entropy(logits, 2).unwrap();

        let grads = tape.backward(loss).unwrap();
        let analytic = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        (tape.scalar_value(loss), analytic)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let params = vec![
            seeded(5, 4, 1),
            seeded(6, 10, 2),
            seeded(1, 4, 3),
            seeded(3, 4, 4),
        ];
        let (_, analytic) = composite_loss(&params);
        let err = grad_check(|p| composite_loss(p).0, &params, &analytic, 1e-5);
        assert!(err < 1e-6, "composite gradcheck error {err}");
    }

    #[test]
    fn add_and_scale_gradients() {
        let a0 = seeded(2, 3, 7);
        let b0 = seeded(2, 3, 8);
        let run = |params: &[Tensor2<f64>]| {
            let mut tape = Tape::new();
            let a = tape.leaf(params[0].clone());
            let b = tape.leaf(params[1].clone());
            let s = tape.add(a, b).unwrap();
            let s = tape.scale(s, 0.7);
            let sq = tape.matmul_nt(s, s).unwrap(); // 2x2
            let picked = tape.select_rows(sq, &[0]).unwrap();
            let loss = tape.cross_entropy(picked, 0).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.scalar_value(loss),
                vec![
                    grads.get_or_zeros(a, params[0].shape()),
                    grads.get_or_zeros(b, params[1].shape()),
                ],
            )
        };
        let params = vec![a0, b0];
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5);
        assert!(err < 1e-7, "add/scale gradcheck error {err}");
    }

    #[test]
    fn rms_norm_gradient_matches_finite_differences() {
        let run = |params: &[Tensor2<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(params[0].clone());
            let g = tape.leaf(params[1].clone());
            let y = tape.rms_norm_rows(x, g).unwrap();
            let q = tape.matmul_nt(y, y).unwrap();
            let row = tape.select_rows(q, &[1]).unwrap();
            let loss = tape.cross_entropy(row, 0).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.scalar_value(loss),
                vec![
                    grads.get_or_zeros(x, params[0].shape()),
                    grads.get_or_zeros(g, params[1].shape()),
                ],
            )
        };
        let params = vec![seeded(3, 6, 11), seeded(1, 6, 12)];
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5);
        assert!(err < 1e-4, "rms_norm gradcheck error {err}");
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(seeded(1, 2, 20));
        let unused = tape.leaf(seeded(4, 4, 21));
        let loss = tape.cross_entropy(used, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(seeded(2, 2, 30));
        assert!(tape.backward(a).is_err());
    }
}

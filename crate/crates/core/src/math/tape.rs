//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Parameter
//! leaves remember their offset in the owning model's flat parameter vector, so
//! [`Tape::gradients`] returns `∂loss/∂θ` laid out exactly like
//! `flatten()` output.

use std::collections::HashMap;

use super::linalg::{matvec_unchecked, sigmoid, softplus};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param {
        offset: usize,
    },
    MatVec {
        w: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    LogSoftmax(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Min(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Recorded computation graph for one loss evaluation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
    params: HashMap<usize, Var>,
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<f64>,
    nodes: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to the flat parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Gradient with respect to any recorded node.
    pub fn of(&self, var: Var) -> &[f64] {
        &self.nodes[var.0]
    }
}

impl Tape {
    /// A tape for a model with `n_params` flat parameters.
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            n_params,
            params: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a parameter block living at `offset` in the flat vector.
    /// Repeated registration of the same offset returns the same node.
    pub fn param(&mut self, offset: usize, values: &[f64]) -> Var {
        if let Some(&v) = self.params.get(&offset) {
            return v;
        }
        assert!(
            offset + values.len() <= self.n_params,
            "parameter block out of range"
        );
        let v = self.push(values.to_vec(), Op::Param { offset });
        self.params.insert(offset, v);
        v
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        crate::error::check_len(op, la, lb)
    }

    /// `W x` where `w` holds a row-major `rows × cols` matrix.
    pub fn matvec(&mut self, w: Var, rows: usize, cols: usize, x: Var) -> Result<Var> {
        crate::error::check_len("matvec weight", rows * cols, self.len_of(w))?;
        crate::error::check_len("matvec input", cols, self.len_of(x))?;
        let value = matvec_unchecked(self.value(w), rows, cols, self.value(x));
        Ok(self.push(value, Op::MatVec { w, x, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| softplus(x)).collect();
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(value, Op::Ln(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.push(value, Op::Sum(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::with_capacity(parts.iter().map(|&p| self.len_of(p)).sum());
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.len_of(x);
        if start + len > n {
            return Err(Error::Shape {
                op: "slice",
                expected: n,
                found: start + len,
            });
        }
        let value = self.value(x)[start..start + len].to_vec();
        Ok(self.push(value, Op::Slice { x, start }))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = super::linalg::log_softmax(self.value(x));
        self.push(value, Op::LogSoftmax(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(value, Op::Clamp { x, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b)?;
        let value = zip(self.value(a), self.value(b), f64::min);
        Ok(self.push(value, Op::Min(a, b)))
    }

    /// Reverse sweep from a scalar node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.len_of(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {} elements",
                self.len_of(loss)
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param { .. } => {}
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    {
                        let gw = &mut grads[w.0];
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                for (dst, xi) in row.iter_mut().zip(xv) {
                                    *dst += gr * xi;
                                }
                            }
                        }
                    }
                    let gx = &mut grads[x.0];
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (dst, wi) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                                *dst += gr * wi;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g, |_, gi| gi);
                    accumulate(&mut grads[b.0], &g, |_, gi| gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g, |_, gi| gi);
                    accumulate(&mut grads[b.0], &g, |_, gi| -gi);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    accumulate(&mut grads[a.0], &g, |i, gi| gi * bv[i]);
                    accumulate(&mut grads[b.0], &g, |i, gi| gi * av[i]);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    accumulate(&mut grads[a.0], &g, |i, gi| gi / bv[i]);
                    accumulate(&mut grads[b.0], &g, |i, gi| -gi * av[i] / (bv[i] * bv[i]));
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], &g, |_, gi| gi * f),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], &g, |_, gi| gi),
                Op::Tanh(a) => {
                    let out = &node.value;
                    accumulate(&mut grads[a.0], &g, |i, gi| gi * (1.0 - out[i] * out[i]));
                }
                Op::Softplus(a) => {
                    let inp = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g, |i, gi| gi * sigmoid(inp[i]));
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    accumulate(&mut grads[a.0], &g, |i, gi| gi * out[i]);
                }
                Op::Ln(a) => {
                    let inp = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g, |i, gi| gi / inp[i]);
                }
                Op::Sum(a) => {
                    for d in grads[a.0].iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let src = &g[start..start + n];
                        accumulate(&mut grads[p.0], src, |_, gi| gi);
                        start += n;
                    }
                }
                Op::Slice { x, start } => {
                    let dst = &mut grads[x.0][*start..*start + g.len()];
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::LogSoftmax(x) => {
                    let out = &node.value;
                    let total: f64 = g.iter().sum();
                    accumulate(&mut grads[x.0], &g, |i, gi| gi - out[i].exp() * total);
                }
                Op::Clamp { x, lo, hi } => {
                    let inp = &self.nodes[x.0].value;
                    accumulate(&mut grads[x.0], &g, |i, gi| {
                        if inp[i] < *lo || inp[i] > *hi {
                            0.0
                        } else {
                            gi
                        }
                    });
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    accumulate(
                        &mut grads[a.0],
                        &g,
                        |i, gi| if av[i] <= bv[i] { gi } else { 0.0 },
                    );
                    accumulate(
                        &mut grads[b.0],
                        &g,
                        |i, gi| if av[i] <= bv[i] { 0.0 } else { gi },
                    );
                }
            }
            grads[idx] = g;
        }

        let mut params = vec![0.0; self.n_params];
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let Op::Param { offset } = node.op {
                for (dst, gi) in params[offset..offset + g.len()].iter_mut().zip(g) {
                    *dst += gi;
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (d, &gi)) in dst.iter_mut().zip(src).enumerate() {
        *d += f(i, gi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn linear_function_gradient() {
        let mut tape = Tape::new(1);
        let theta = tape.param(0, &[2.0]);
        let x = tape.constant(vec![3.0]);
        let prod = tape.mul(theta, x).unwrap();
        let loss = tape.sum(prod);
        assert_eq!(tape.scalar(loss), 6.0);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.params(), &[3.0]);
    }

    #[test]
    fn unused_parameter_has_exact_zero_gradient() {
        let mut tape = Tape::new(2);
        let used = tape.param(0, &[1.5]);
        let _unused = tape.param(1, &[4.0]);
        let sq = tape.mul(used, used).unwrap();
        let loss = tape.sum(sq);
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.params()[1], 0.0);
        assert_eq!(g.params()[0], 3.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new(0);
        let v = tape.constant(vec![1.0, 2.0]);
        assert!(matches!(tape.gradients(v), Err(Error::Contract(_))));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // f(x) = sum( min(clamp(e^{x0} * ln(x1+3), 0, 4), softplus(x) / (x+2) ) + log_softmax(W x)[1] + tanh(x)·x )
        let f_tape = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new(3);
            let xv = t.param(0, x);
            let a = t.slice(xv, 0, 1).unwrap();
            let b = t.slice(xv, 1, 1).unwrap();
            let ea = t.exp(a);
            let b3 = t.add_scalar(b, 3.0);
            let lb = t.ln(b3);
            let p = t.mul(ea, lb).unwrap();
            let pc = t.clamp(p, 0.0, 4.0);
            let sp = t.softplus(xv);
            let x2 = t.add_scalar(xv, 2.0);
            let q = t.div(sp, x2).unwrap();
            let q0 = t.slice(q, 0, 1).unwrap();
            let m = t.min(pc, q0).unwrap();
            let w = t.constant(vec![0.3, -0.2, 0.5, 1.1, 0.4, -0.7]);
            let wx = t.matvec(w, 2, 3, xv).unwrap();
            let ls = t.log_softmax(wx);
            let l1 = t.slice(ls, 1, 1).unwrap();
            let th = t.tanh(xv);
            let thx = t.mul(th, xv).unwrap();
            let s = t.sum(thx);
            let cat = t.concat(&[m, l1, s]);
            let scaled = t.scale(cat, 0.7);
            let diff = t.sub(scaled, cat).unwrap();
            let tot = t.add(diff, cat).unwrap();
            let loss = t.sum(tot);
            let g = t.gradients(loss).unwrap();
            (t.scalar(loss), g.into_params())
        };
        let x = [0.3, -0.4, 0.9];
        let (_, analytic) = f_tape(&x);
        let numeric = central_diff(|x| f_tape(x).0, &x, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
            assert!(rel < 1e-6, "analytic {a} numeric {n}");
        }
    }
}

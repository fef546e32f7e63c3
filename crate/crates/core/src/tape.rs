//! Minimal scalar reverse-mode tape.
//!
//! Objectives are written as expressions over sequence- or token-level
//! log-probabilities (the tape's inputs). Backward yields the loss
//! sensitivity to each input; the policy then maps those sensitivities onto
//! parameters. Constants carry no adjoint, which is how stop-gradient
//! weights are expressed.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct Node {
    value: f64,
    // (parent, local derivative); at most two parents.
    parents: [(usize, f64); 2],
    arity: u8,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: f64, parents: [(usize, f64); 2], arity: u8) -> Var {
        self.nodes.push(Node { value, parents, arity });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input. Inputs are numbered in creation order.
    pub fn input(&mut self, value: f64) -> Var {
        let v = self.push(value, [(0, 0.0); 2], 0);
        self.inputs.push(v.0);
        v
    }

    /// A value that is not differentiated through.
    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, [(0, 0.0); 2], 0)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, [(a.0, 1.0), (b.0, 1.0)], 2)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, [(a.0, 1.0), (b.0, -1.0)], 2)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, [(a.0, vb), (b.0, va)], 2)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = c * self.value(a);
        self.push(value, [(a.0, c), (0, 0.0)], 1)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).exp();
        self.push(value, [(a.0, value), (0, 0.0)], 1)
    }

    /// `log sigma(a)`, evaluated stably; derivative `1 - sigma(a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let z = self.value(a);
        let value = log_sigmoid(z);
        self.push(value, [(a.0, 1.0 - sigmoid(z)), (0, 0.0)], 1)
    }

    /// `min(a, c)` for a constant bound; the gradient passes only while
    /// `a <= c`.
    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        if va <= c {
            self.push(va, [(a.0, 1.0), (0, 0.0)], 1)
        } else {
            self.constant(c)
        }
    }

    /// `max(a, c)` for a constant bound; the gradient passes only while
    /// `a >= c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        if va >= c {
            self.push(va, [(a.0, 1.0), (0, 0.0)], 1)
        } else {
            self.constant(c)
        }
    }

    /// Sum in slice order.
    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Adjoints of `output` with respect to every input, in input order.
    pub fn input_gradients(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; output.0 + 1];
        adj[output.0] = 1.0;
        for i in (0..=output.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            for &(p, d) in &node.parents[..node.arity as usize] {
                adj[p] += a * d;
            }
        }
        self.inputs
            .iter()
            .map(|&i| if i <= output.0 { adj[i] } else { 0.0 })
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log sigma(z) = -softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_chain() {
        let mut t = Tape::new();
        let x = t.input(2.0);
        let y = t.input(3.0);
        let xy = t.mul(x, y);
        let e = t.exp(x);
        let out = t.add(xy, e);
        let g = t.input_gradients(out);
        assert_eq!(t.value(out), 6.0 + 2f64.exp());
        assert!((g[0] - (3.0 + 2f64.exp())).abs() < 1e-12);
        assert_eq!(g[1], 2.0);
    }

    #[test]
    fn constants_block_gradient() {
        let mut t = Tape::new();
        let x = t.input(0.3);
        let w = t.constant(5.0);
        let out = t.mul(w, x);
        assert_eq!(t.input_gradients(out), vec![5.0]);
    }

    #[test]
    fn one_sided_clips() {
        let mut t = Tape::new();
        let x = t.input(1.5);
        let c = t.min_const(x, 1.2);
        assert_eq!(t.value(c), 1.2);
        assert_eq!(t.input_gradients(c), vec![0.0]);

        let mut t = Tape::new();
        let x = t.input(1.0);
        let c = t.max_const(x, 0.8);
        assert_eq!(t.input_gradients(c), vec![1.0]);
    }

    #[test]
    fn log_sigmoid_matches_naive_and_derivative() {
        for &z in &[-30.0f64, -2.0, 0.0, 0.7, 25.0] {
            let naive = (1.0 / (1.0 + (-z).exp())).ln();
            assert!((log_sigmoid(z) - naive).abs() < 1e-12);
            let h = 1e-6;
            let fd = (log_sigmoid(z + h) - log_sigmoid(z - h)) / (2.0 * h);
            let mut t = Tape::new();
            let v = t.input(z);
            let o = t.log_sigmoid(v);
            assert!((t.input_gradients(o)[0] - fd).abs() < 1e-8);
        }
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}

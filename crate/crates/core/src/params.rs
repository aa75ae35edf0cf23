//! Named parameter tensors shared by encoders, the predictor and the policy head.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{arg_err, Result, ZiaError};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Role of a tensor; compression only touches `Weight` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    LogSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix<T>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Param<T>>", into = "Vec<Param<T>>")]
pub struct ParamSet<T: Clone> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Clone> From<Vec<Param<T>>> for ParamSet<T> {
    fn from(params: Vec<Param<T>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self { params, index }
    }
}

impl<T: Clone> From<ParamSet<T>> for Vec<Param<T>> {
    fn from(set: ParamSet<T>) -> Self {
        set.params
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        value: Matrix<T>,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return arg_err(format!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| ZiaError::Argument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => arg_err(format!("unknown parameter {name}")),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// `θ ← θ − lr·g` for every tensor that received a gradient.
    pub fn sgd_step(&mut self, bound: &Bound, grads: &Gradients<T>, lr: T) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.value
                    .axpy(-lr, g)
                    .expect("gradient shape matches parameter");
            }
        }
    }

    /// Copies tensors from `other` with matching names and shapes.
    pub fn absorb(&mut self, other: &ParamSet<T>) -> Result<()> {
        for p in &other.params {
            let dst = self.get_mut(&p.name)?;
            if dst.shape() != p.value.shape() {
                return arg_err(format!("shape mismatch for {}", p.name));
            }
            *dst = p.value.clone();
        }
        Ok(())
    }
}

/// Adam moments for one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam<T: Clone> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam step on every tensor that received a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, bound: &Bound, grads: &Gradients<T>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, eps) = (self.lr, self.eps);
        for (i, (p, &var)) in params.params.iter_mut().zip(&bound.vars).enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p
                .value
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = mi.as_f64() / c1;
                let vh = vi.as_f64() / c2;
                *x -= T::lit(lr * mh / (vh.sqrt() + eps));
            }
        }
    }
}

/// Tape variables for a [`ParamSet`], in insertion order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Panics on unknown names; callers bind the set they built themselves.
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_serde_roundtrip() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", ParamKind::Weight, Matrix::filled(2, 3, 0.5))
            .unwrap();
        ps.insert("b", ParamKind::Bias, Matrix::zeros(1, 3))
            .unwrap();
        assert!(ps
            .insert("w", ParamKind::Weight, Matrix::zeros(1, 1))
            .is_err());
        assert_eq!(ps.numel(), 9);
        assert!(ps.get("nope").is_err());
        let json = serde_json::to_string(&ps).unwrap();
        let back: ParamSet<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", ParamKind::Weight, Matrix::filled(1, 2, 1.0))
            .unwrap();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let sq = tape.hadamard(b.var("w"), b.var("w"));
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss);
        ps.sgd_step(&b, &g, 0.25);
        assert_eq!(ps.get("w").unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert(
            "w",
            ParamKind::Weight,
            Matrix::from_vec(1, 2, vec![1.0, -3.0]).unwrap(),
        )
        .unwrap();
        let mut opt = Adam::new(&ps, 0.1);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let sq = tape.hadamard(b.var("w"), b.var("w"));
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss);
        opt.step(&mut ps, &b, &g);
        // the bias-corrected first step is lr·sign(g)
        let w = ps.get("w").unwrap().as_slice();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 2.9).abs() < 1e-6);
    }
}

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Two graph-convolution layers: `w1, b1, w2, b2`.
    Gcn2,
    /// Four dense layers with a sigmoid head: `w1..w4, b1..b4`.
    Mlp4,
}

/// Ordered bundle of named 2-D tensors. Biases are stored as `1 x n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<(String, Array2<f64>)>,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

impl ModelParams {
    pub fn from_tensors(arch: Architecture, tensors: Vec<(String, Array2<f64>)>) -> Result<Self, NnError> {
        let expected: &[&str] = match arch {
            Architecture::Gcn2 => &["w1", "b1", "w2", "b2"],
            Architecture::Mlp4 => &["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"],
        };
        let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != expected {
            return Err(NnError::Shape(format!("{arch:?} expects tensors {expected:?}, got {names:?}")));
        }
        let p = ModelParams { arch, tensors };
        p.check_chain()?;
        Ok(p)
    }

    fn check_chain(&self) -> Result<(), NnError> {
        let layers = self.tensors.len() / 2;
        let mut prev_out: Option<usize> = None;
        for l in 0..layers {
            let w = &self.tensors[2 * l].1;
            let b = &self.tensors[2 * l + 1].1;
            if b.nrows() != 1 || b.ncols() != w.ncols() {
                return Err(NnError::Shape(format!("bias b{} has shape {:?}", l + 1, b.dim())));
            }
            if let Some(p) = prev_out {
                if w.nrows() != p {
                    return Err(NnError::Shape(format!("w{} expects {} inputs, previous layer gives {p}", l + 1, w.nrows())));
                }
            }
            prev_out = Some(w.ncols());
        }
        if self.arch == Architecture::Mlp4 && prev_out != Some(1) {
            return Err(NnError::Shape("mlp4 output layer must have width 1".into()));
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_gcn2<R: Rng + ?Sized>(in_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let tensors = vec![
            ("w1".to_string(), glorot(rng, in_dim, hidden)),
            ("b1".to_string(), Array2::zeros((1, hidden))),
            ("w2".to_string(), glorot(rng, hidden, classes)),
            ("b2".to_string(), Array2::zeros((1, classes))),
        ];
        ModelParams {
            arch: Architecture::Gcn2,
            tensors,
        }
    }

    /// Layer widths `in_dim -> hidden[0] -> hidden[1] -> hidden[2] -> 1`.
    pub fn init_mlp4<R: Rng + ?Sized>(in_dim: usize, hidden: [usize; 3], rng: &mut R) -> Self {
        let widths = [in_dim, hidden[0], hidden[1], hidden[2], 1];
        let mut tensors = Vec::with_capacity(8);
        for l in 0..4 {
            tensors.push((format!("w{}", l + 1), glorot(rng, widths[l], widths[l + 1])));
            tensors.push((format!("b{}", l + 1), Array2::zeros((1, widths[l + 1]))));
        }
        ModelParams {
            arch: Architecture::Mlp4,
            tensors,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.dim())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Array2::zeros(t.dim())))
                .collect(),
        }
    }

    pub fn ensure_compatible(&self, other: &ModelParams) -> Result<(), NnError> {
        if self.arch != other.arch || self.shapes() != other.shapes() {
            return Err(NnError::Shape(format!(
                "incompatible parameter bundles {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<(), NnError> {
        self.ensure_compatible(other)?;
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            Zip::from(a).and(b).for_each(|x, &y| *x += scale * y);
        }
        Ok(())
    }

    pub fn add(&mut self, other: &ModelParams) -> Result<(), NnError> {
        self.ensure_compatible(other)?;
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams, NnError> {
        self.ensure_compatible(other)?;
        let mut out = self.clone();
        for ((_, a), (_, b)) in out.tensors.iter_mut().zip(&other.tensors) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of every coordinate.
    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.shapes() == other.shapes()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((_, a), (_, b))| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Rounds every coordinate to `f32` precision, matching what a checkpoint
    /// round trip produces.
    pub fn quantized_f32(&self) -> ModelParams {
        let mut out = self.clone();
        for (_, t) in &mut out.tensors {
            t.mapv_inplace(|x| x as f32 as f64);
        }
        out
    }
}

//! JumpReLU sparse autoencoders over residual-stream activations.
//!
//! `z_pre = a W_enc + b_enc`, `z_post = z_pre · 1[z_pre > θ]` and
//! `SAE(a) = z_post W_dec + b_dec`. Training minimizes the fraction of
//! variance left unexplained plus `λ_s` times the expected number of active
//! latents, with the threshold learned through a straight-through estimator.

use crate::autodiff::Graph;
use crate::checkpoint::Container;
use crate::error::{ensure, Error, Result};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    /// `[d, m]`.
    pub w_enc: Tensor,
    /// `[m]`.
    pub b_enc: Tensor,
    /// `[m, d]`, unit-norm rows.
    pub w_dec: Tensor,
    /// `[d]`.
    pub b_dec: Tensor,
    /// `[m]`, strictly positive.
    pub threshold: Tensor,
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub sparsity: f64,
    pub expansion: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Width of the rectangle kernel in the threshold pseudo-gradient, in
    /// units of the per-dimension activation standard deviation.
    pub bandwidth: f64,
    /// Initial threshold, in the same units as `bandwidth`.
    pub threshold_init: f64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            epochs: 300,
            lr: 3e-3,
            sparsity: 5e-4,
            expansion: 4,
            seed: 0,
            batch_size: 256,
            bandwidth: 0.1,
            threshold_init: 0.03,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "SAE epochs must be positive");
        ensure!(self.lr > 0.0, "SAE learning rate must be positive");
        ensure!(self.sparsity >= 0.0, "sparsity weight must be non-negative");
        ensure!(self.expansion >= 1, "expansion factor must be at least 1");
        ensure!(self.batch_size >= 1, "SAE batch size must be positive");
        ensure!(self.bandwidth > 0.0, "kernel bandwidth must be positive");
        ensure!(self.threshold_init > 0.0, "initial threshold must be positive");
        Ok(())
    }
}

impl SaeParams {
    pub fn d(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn m(&self) -> usize {
        self.w_enc.cols()
    }

    fn check_width(&self, got: usize, want: usize, what: &str) -> Result<()> {
        ensure!(got == want, "{what} width {got} does not match SAE ({want})");
        Ok(())
    }

    /// Pre-activations for rows `a: [n, d]`.
    pub fn encode_pre_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.check_width(a.cols(), self.d(), "activation")?;
        let (n, d, m) = (a.len() / self.d(), self.d(), self.m());
        let mut z = matmul(a.data(), self.w_enc.data(), n, d, m);
        for row in z.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(self.b_enc.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![n, m], z)
    }

    pub fn encode_pre(&self, a: &[f32]) -> Result<Vec<f32>> {
        Ok(self.encode_pre_rows(&Tensor::vector(a.to_vec()))?.into_data())
    }

    /// Applies the strict jump gate to pre-activations.
    pub fn gate(&self, z_pre: &[f32]) -> Vec<f32> {
        let th = self.threshold.data();
        z_pre
            .iter()
            .enumerate()
            .map(|(i, &z)| if z > th[i % th.len()] { z } else { 0.0 })
            .collect()
    }

    pub fn encode_post(&self, a: &[f32]) -> Result<Vec<f32>> {
        Ok(self.gate(&self.encode_pre(a)?))
    }

    pub fn encode_post_rows(&self, a: &Tensor) -> Result<Tensor> {
        let z = self.encode_pre_rows(a)?;
        let g = self.gate(z.data());
        Tensor::new(z.shape().to_vec(), g)
    }

    pub fn decode_rows(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z.cols(), self.m(), "latent")?;
        let (n, d, m) = (z.len() / self.m(), self.d(), self.m());
        let mut x = matmul(z.data(), self.w_dec.data(), n, m, d);
        for row in x.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(self.b_dec.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![n, d], x)
    }

    pub fn decode(&self, z_post: &[f32]) -> Result<Vec<f32>> {
        Ok(self.decode_rows(&Tensor::vector(z_post.to_vec()))?.into_data())
    }

    pub fn reconstruct_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.decode_rows(&self.encode_post_rows(a)?)
    }

    fn names(layer: usize) -> [String; 5] {
        ["w_enc", "b_enc", "w_dec", "b_dec", "threshold"].map(|n| format!("sae.{layer}.{n}"))
    }

    pub fn add_to_container(&self, c: &mut Container) {
        let tensors = [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec, &self.threshold];
        for (name, t) in Self::names(self.layer).into_iter().zip(tensors) {
            c.sections.push((name, t.clone()));
        }
    }

    pub fn from_container(c: &Container, layer: usize) -> Result<SaeParams> {
        let [we, be, wd, bd, th] = Self::names(layer).map(|n| {
            c.get(&n)
                .cloned()
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {n}")))
        });
        let p = SaeParams {
            w_enc: we?,
            b_enc: be?,
            w_dec: wd?,
            b_dec: bd?,
            threshold: th?,
            layer,
        };
        let (d, m) = (p.d(), p.m());
        let shapes_ok = p.w_enc.rank() == 2
            && p.b_enc.shape() == [m]
            && p.w_dec.shape() == [m, d]
            && p.b_dec.shape() == [d]
            && p.threshold.shape() == [m];
        if !shapes_ok || p.threshold.data().iter().any(|&t| !(t > 0.0)) {
            return Err(Error::format("checkpoint", format!("inconsistent SAE tensors for layer {layer}")));
        }
        Ok(p)
    }
}

fn normalize_rows(w: &mut Tensor) {
    for i in 0..w.rows() {
        let r = w.row_mut(i);
        let n = r.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Summary of reconstruction quality on a set of activations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeQuality {
    pub explained_variance: f64,
    pub mean_l0: f64,
    pub mse: f64,
}

fn column_mean(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += *v as f64 / n as f64;
        }
    }
    mu
}

/// Mean squared distance of rows from their mean.
pub fn total_variance(x: &Tensor) -> f64 {
    let mu = column_mean(x);
    let n = x.rows();
    (0..n)
        .map(|i| x.row(i).iter().zip(&mu).map(|(v, m)| (*v as f64 - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

pub fn quality(sae: &SaeParams, x: &Tensor) -> Result<SaeQuality> {
    ensure!(x.rows() > 0, "no activations to evaluate");
    let z = sae.encode_post_rows(x)?;
    let rec = sae.decode_rows(&z)?;
    let n = x.rows();
    let sq: f64 = x.data().iter().zip(rec.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let mse = sq / n as f64;
    let l0 = z.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    Ok(SaeQuality {
        explained_variance: 1.0 - mse / total_variance(x),
        mean_l0: l0,
        mse,
    })
}

/// Trains one SAE on rows `x: [n, d]`.
pub fn train_sae(x: &Tensor, layer: usize, config: &SaeTrainConfig) -> Result<SaeParams> {
    config.validate()?;
    ensure!(x.rank() == 2 && x.rows() > 1, "need a matrix of at least 2 activations");
    ensure!(x.is_finite(), "activations contain non-finite values");
    let (n, d) = (x.rows(), x.cols());
    let m = d * config.expansion;
    if n < 10 * m {
        log::warn!("layer {layer}: {n} activations for {m} latents (fewer than 10 per latent)");
    }
    let var = total_variance(x);
    ensure!(var > 0.0, "activations have zero variance");
    // Train on activations with unit per-dimension variance so that the
    // kernel bandwidth and initial thresholds mean the same at every layer;
    // the scale is folded back into the biases and thresholds at the end.
    let scale = (var / d as f64).sqrt() as f32;
    let x = &x.map(|v| v / scale);
    let var = var / (scale as f64 * scale as f64);

    let root = Rng::new(config.seed).split(layer as u64);
    let mut init = root.split(1);
    let mut w_dec = Tensor::new(vec![m, d], (0..m * d).map(|_| init.normal() as f32).collect())?;
    normalize_rows(&mut w_dec);
    let mut w_enc = Tensor::zeros(&[d, m]);
    for j in 0..m {
        for i in 0..d {
            w_enc.data_mut()[i * m + j] = w_dec.data()[j * d + i];
        }
    }
    let mu: Vec<f32> = column_mean(x).into_iter().map(|v| v as f32).collect();
    // centre the encoder so a mean activation sits at zero pre-activation
    let shift = matmul(&mu, w_enc.data(), 1, d, m);
    let b_enc = Tensor::vector(shift.iter().map(|v| -v).collect());
    let mut params = vec![
        w_enc,
        b_enc,
        w_dec,
        Tensor::vector(mu),
        Tensor::full(&[m], (config.threshold_init as f32).ln()),
    ];
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = root.split(2);
    let rec_scale = 1.0 / var;
    let bw = config.bandwidth as f32;

    for epoch in 0..config.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| x.row(i)).collect();
            let batch = Tensor::from_rows(&rows)?;
            let b = chunk.len() as f64;
            let mut g = Graph::new();
            let ids: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
            let xb = g.constant(batch);
            let z = g.matmul(xb, ids[0]);
            let z = g.add_row(z, ids[1]);
            let post = g.jump_relu(z, ids[4], bw);
            let rec = g.matmul(post, ids[2]);
            let rec = g.add_row(rec, ids[3]);
            let diff = g.sub(rec, xb);
            let sq = g.mul(diff, diff);
            let sq = g.sum(sq);
            let fvu = g.scale(sq, (rec_scale / b) as f32);
            let loss = if config.sparsity > 0.0 {
                let l0 = g.active_count(z, ids[4], bw);
                let l0 = g.scale(l0, (config.sparsity / b) as f32);
                g.add(fvu, l0)
            } else {
                fvu
            };
            let grads = g.backward(loss).map_err(|e| match e {
                Error::Numeric { location, detail } => {
                    Error::numeric(format!("SAE layer {layer} epoch {epoch}, {location}"), detail)
                }
                other => other,
            })?;
            let grads: Vec<Tensor> = ids
                .iter()
                .zip(&params)
                .map(|(id, t)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam.step(&mut params, &grads, config.lr)?;
            normalize_rows(&mut params[2]);
        }
    }
    let [w_enc, b_enc, w_dec, b_dec, log_th]: [Tensor; 5] = params.try_into().expect("five tensors");
    let sae = SaeParams {
        w_enc,
        b_enc: b_enc.map(|v| v * scale),
        w_dec,
        b_dec: b_dec.map(|v| v * scale),
        threshold: log_th.map(|v| v.exp() * scale),
        layer,
    };
    let all_finite = [&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec, &sae.threshold]
        .iter()
        .all(|t| t.is_finite());
    if !all_finite || sae.threshold.data().iter().any(|&t| !(t > 0.0)) {
        return Err(Error::numeric(format!("SAE layer {layer}"), "training diverged"));
    }
    Ok(sae)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_sae() -> SaeParams {
        // d = 2, m = 3
        SaeParams {
            w_enc: Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, -1.0, 0.0]).unwrap(),
            b_enc: Tensor::vector(vec![0.0; 3]),
            w_dec: Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap(),
            b_dec: Tensor::vector(vec![0.1, -0.2]),
            threshold: Tensor::vector(vec![0.1, 1.0, 1.0]),
            layer: 1,
        }
    }

    #[test]
    fn encode_pre_is_affine() {
        let mut s = hand_sae();
        assert_eq!(s.encode_pre(&[1.0, 0.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        s.b_enc = Tensor::vector(vec![0.5, -0.5, 1.0]);
        assert_eq!(s.encode_pre(&[0.0, 0.0]).unwrap(), s.b_enc.data());
        let (a1, a2) = ([0.3f32, -1.2], [2.0f32, 0.7]);
        let sum: Vec<f32> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let f = |a: &[f32]| -> Vec<f32> {
            s.encode_pre(a).unwrap().iter().zip(s.b_enc.data()).map(|(z, b)| z - b).collect()
        };
        for ((l, r1), r2) in f(&sum).iter().zip(f(&a1)).zip(f(&a2)) {
            assert!((l - r1 - r2).abs() < 1e-6);
        }
        assert!(s.encode_pre(&[1.0]).is_err());
    }

    #[test]
    fn gate_is_strict() {
        let s = hand_sae();
        assert_eq!(s.gate(&[-1.0, 0.5, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(s.gate(&[0.1, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_is_affine() {
        let s = hand_sae();
        assert_eq!(s.decode(&[0.0; 3]).unwrap(), vec![0.1, -0.2]);
        let out = s.decode(&[0.0, 0.0, 2.0]).unwrap();
        assert!((out[0] - (1.2 + 0.1)).abs() < 1e-6 && (out[1] - (1.6 - 0.2)).abs() < 1e-6);
        assert!(s.decode(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn container_round_trip() {
        let s = hand_sae();
        let mut c = Container::new(crate::lm::ModelDims {
            vocab: 5,
            d: 2,
            layers: 2,
            maxlen: 4,
        });
        s.add_to_container(&mut c);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(SaeParams::from_container(&back, 1).unwrap(), s);
        assert!(SaeParams::from_container(&back, 2).is_err());
    }
}

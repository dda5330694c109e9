use latentforge_core::rng::Rng;
use latentforge_core::sae::{quality, train_sae, SaeTrainConfig};
use latentforge_core::tensor::Tensor;

fn orthonormal(d: usize, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis
}

/// Rows `Σ_i b_i·c_i·u_i + noise` with `b_i ~ Bernoulli(p)`, `c_i ~ U(1, 2)`.
fn sparse_rows(dirs: &[Vec<f64>], n: usize, p: f64, noise: f64, rng: &mut Rng) -> Tensor {
    let d = dirs[0].len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut x: Vec<f64> = (0..d).map(|_| noise * rng.normal()).collect();
        for u in dirs {
            if rng.next_f64() < p {
                let c = 1.0 + rng.next_f64();
                x.iter_mut().zip(u).for_each(|(a, b)| *a += c * b);
            }
        }
        data.extend(x.into_iter().map(|v| v as f32));
    }
    Tensor::matrix(n, d, data).unwrap()
}

#[test]
fn recovers_isolated_directions() {
    let (d, k) = (8, 3);
    let mut rng = Rng::new(21);
    let dirs = orthonormal(d, k, &mut rng);
    let train = sparse_rows(&dirs, 2000, 0.7, 0.02, &mut rng);
    let held = sparse_rows(&dirs, 500, 0.7, 0.02, &mut rng);
    // co-occurring features get absorbed into joint latents under a strong
    // L0 penalty, so this data wants a milder one than the LM default
    let cfg = SaeTrainConfig {
        epochs: 150,
        lr: 1e-2,
        sparsity: 5e-3,
        expansion: 2,
        seed: 3,
        ..SaeTrainConfig::default()
    };
    let sae = train_sae(&train, 1, &cfg).unwrap();
    let z = sae.encode_post_rows(&held).unwrap();
    let m = sae.m();
    let freq: Vec<f64> = (0..m)
        .map(|j| (0..held.rows()).filter(|&i| z.data()[i * m + j] > 0.0).count() as f64 / held.rows() as f64)
        .collect();
    let frequent = freq.iter().filter(|&&f| f > 0.5).count();
    let q = quality(&sae, &held).unwrap();
    assert!(frequent >= k, "only {frequent} latents fire on more than half the rows: {freq:?}");
    assert!(q.mean_l0 <= 2.0 * k as f64, "mean L0 {}", q.mean_l0);
    assert!(q.explained_variance > 0.9, "explained variance {}", q.explained_variance);
}

/// Mean squared residual per row after projecting the centred data onto its
/// top `r` principal directions, found by power iteration with deflation.
fn pca_mse(x: &Tensor, r: usize) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mu: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j] as f64).sum::<f64>() / n as f64).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().zip(&mu).map(|(v, m)| *v as f64 - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += row[a] * row[b] / n as f64;
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for c in 0..r {
        let mut v: Vec<f64> = (0..d).map(|i| if i == c { 1.0 } else { 0.3 }).collect();
        for _ in 0..2000 {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a][b] * v[b]).sum()).collect();
            for u in &comps {
                let p: f64 = w.iter().zip(u).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            let nrm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.into_iter().map(|x| x / nrm).collect();
        }
        comps.push(v);
    }
    rows.iter()
        .map(|row| {
            let mut res = row.clone();
            for u in &comps {
                let p: f64 = row.iter().zip(u).map(|(x, y)| x * y).sum();
                res.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            res.iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn without_sparsity_it_matches_a_pca_of_the_signal_rank() {
    let (d, r) = (8, 3);
    let mut rng = Rng::new(8);
    let dirs = orthonormal(d, r, &mut rng);
    let mut data = Vec::new();
    for _ in 0..1500 {
        let mut x: Vec<f64> = (0..d).map(|_| 0.05 * rng.normal()).collect();
        for (i, u) in dirs.iter().enumerate() {
            let c = (3.0 - i as f64) * rng.normal();
            x.iter_mut().zip(u).for_each(|(a, b)| *a += c * b);
        }
        data.extend(x.into_iter().map(|v| v as f32));
    }
    let x = Tensor::matrix(1500, d, data).unwrap();
    let cfg = SaeTrainConfig {
        epochs: 200,
        lr: 1e-2,
        sparsity: 0.0,
        expansion: 4,
        seed: 1,
        ..SaeTrainConfig::default()
    };
    let sae = train_sae(&x, 1, &cfg).unwrap();
    let ours = quality(&sae, &x).unwrap().mse;
    let pca = pca_mse(&x, r);
    assert!(ours <= pca, "SAE mse {ours} above rank-{r} PCA mse {pca}");
}

#[test]
fn same_seed_gives_identical_parameters() {
    let mut rng = Rng::new(2);
    let dirs = orthonormal(6, 2, &mut rng);
    let x = sparse_rows(&dirs, 300, 0.5, 0.05, &mut rng);
    let cfg = SaeTrainConfig {
        epochs: 5,
        seed: 12,
        ..SaeTrainConfig::default()
    };
    let a = train_sae(&x, 2, &cfg).unwrap();
    assert_eq!(a, train_sae(&x, 2, &cfg).unwrap());
    assert_ne!(a, train_sae(&x, 2, &SaeTrainConfig { seed: 13, ..cfg }).unwrap());
}

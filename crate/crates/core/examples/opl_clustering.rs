//! Optimizes free embeddings with the orthogonal projection loss alone and
//! prints the class structure it produces.
//!
//! `cargo run --example opl_clustering`

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emodiff::op_edm::{opl_values, orthogonal_projection_loss};
use emodiff::training::Adam;

fn class_means(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut means = vec![vec![0.0; rows[0].len()]; k];
    for (r, &l) in rows.iter().zip(labels) {
        let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (m, x) in means[l].iter_mut().zip(r) {
            *m += x / n;
        }
    }
    means
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn main() -> emodiff::Result<()> {
    let (k, per, dim) = (3, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init: Vec<f64> = (0..k * per * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Var::from_tensor(&Tensor::from_vec(init, (k * per, dim), &Device::Cpu)?)?;
    let labels: Vec<usize> = (0..k * per).map(|i| i / per).collect();
    let vars = vec![("x".to_string(), x.clone())];
    let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8, None);

    for step in 0..=500 {
        if step % 100 == 0 {
            let (same, diff, loss) = opl_values(x.as_tensor(), &labels)?;
            println!("step {step:>3}  E_same {:.4}  E_diff {:+.4}  L_opl {loss:.4}", same.unwrap_or(f64::NAN), diff.unwrap_or(f64::NAN));
        }
        let loss = orthogonal_projection_loss(x.as_tensor(), &labels)?;
        opt.step(&vars, &loss.backward()?)?;
    }

    let means = class_means(&x.as_tensor().to_vec2::<f64>()?, &labels, k);
    println!("cosines between class means:");
    for a in &means {
        println!("  {}", means.iter().map(|b| format!("{:+.3}", cos(a, b))).collect::<Vec<_>>().join("  "));
    }
    Ok(())
}

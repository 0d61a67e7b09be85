use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::SampleShape;
use crate::rng::{stream, Stream};

/// Gaussian blobs with unit covariance, one mean per class, every pair of
/// means at least `separation` apart. Samples are grouped by class.
pub fn make_synthetic(classes: usize, dim: usize, per_class: usize, seed: u64, separation: f64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 || !(separation > 0.0) {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2 and positive dim/per_class/separation, got C={classes} d={dim} n={per_class} sep={separation}"
        )));
    }
    let mut rng = stream(seed, Stream::Synthetic, &[classes as u64, dim as u64]);
    let means = class_means(classes, dim, separation, &mut rng)?;
    let mut inputs = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in mean {
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push((mu + noise) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(format!("synthetic-c{classes}-d{dim}"), SampleShape::flat(dim), inputs, labels, classes)
}

fn class_means(classes: usize, dim: usize, separation: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if dim >= classes {
        // Scaled basis vectors are pairwise exactly `scale * sqrt(2)` apart.
        let scale = separation / std::f64::consts::SQRT_2 * (1.0 + 1e-9);
        return Ok((0..classes)
            .map(|c| (0..dim).map(|k| if k == c { scale } else { 0.0 }).collect())
            .collect());
    }
    let mut half_width = separation * classes as f64;
    for _ in 0..64 {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for _ in 0..classes * 1000 {
            if means.len() == classes {
                break;
            }
            let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect();
            let far = means
                .iter()
                .all(|m| m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation);
            if far {
                means.push(cand);
            }
        }
        if means.len() == classes {
            return Ok(means);
        }
        half_width *= 2.0;
    }
    Err(Error::Config(format!("could not place {classes} means {separation} apart in {dim} dimensions")))
}

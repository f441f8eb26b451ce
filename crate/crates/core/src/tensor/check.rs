use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

const STEP: f64 = 1e-5;

/// Central finite differences of `f` with respect to every element of every
/// input, compared against reverse mode. The scalar objective is a fixed
/// random projection of the output so that no gradient is trivially uniform.
///
/// Returns `max |analytic - numeric| / max |numeric|`.
pub fn gradcheck(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let make = |vals: &[Vec<f64>]| -> Vec<Tensor> {
        vals.iter()
            .zip(inputs)
            .map(|(v, (_, s))| Tensor::parameter(v.clone(), s).expect("input shape"))
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let probe = f(&make(&base));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights: Vec<f64> = (0..probe.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights = Tensor::new(weights, probe.shape()).expect("projection shape");
    let objective = |vals: &[Vec<f64>]| -> f64 {
        let out = f(&make(vals));
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let leaves = make(&base);
    let loss = f(&leaves).mul(&weights).expect("projection").sum();
    loss.backward().expect("scalar objective");

    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base[i].len()]);
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += STEP;
            let mut minus = base.clone();
            minus[i][j] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            worst = worst.max((analytic[j] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    worst / scale.max(1e-12)
}

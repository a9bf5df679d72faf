//! The no-change baseline: the future image is predicted to equal the
//! base image.

use crate::dataio::Volume;

pub fn identity_predict(base: &Volume) -> Volume {
    base.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand_distr::Distribution;

    fn vol(seed: u64) -> Volume {
        let mut rng = seeds::rng(seed, "idvol", 0);
        let data: Vec<f32> = (0..27)
            .map(|_| {
                let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
                e as f32
            })
            .collect();
        Volume::centered([3, 3, 3], 1.0, data).unwrap()
    }

    #[test]
    fn prediction_is_the_base_bitwise() {
        let base = vol(1);
        let pred = identity_predict(&base);
        assert_eq!(pred.data(), base.data());
        assert_eq!(pred.shape, base.shape);
        assert_eq!(pred.grid_to_world, base.grid_to_world);
    }

    #[test]
    fn self_pair_has_zero_error() {
        let base = vol(2);
        let pred = identity_predict(&base);
        let sse: f64 = pred
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert_eq!(sse, 0.0);
    }

    #[test]
    fn mse_against_target_matches_direct_computation() {
        let base = vol(3);
        let target = vol(4);
        let pred = identity_predict(&base);
        let n = base.data().len() as f64;
        let mse_pred: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
        let mse_direct: f64 = base
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
        assert_eq!(mse_pred, mse_direct);
    }
}

//! With Ω held at the identity the joint sampler's latent and location steps
//! factor into three independent samplers; check that against independently
//! coded ones.

mod common;

use common::*;
use nalgebra::Matrix3;
use threepart::model::PriorSpec;
use threepart::rng::{Block, Streams};
use threepart::sampler::GibbsSampler;
use threepart::synthetic::{generate, GeneratorSpec};

#[test]
fn fixed_identity_covariance_matches_univariate_samplers() {
    let mut spec = GeneratorSpec::recovery_design(2000, 71);
    spec.sigma = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let data = generate(&spec).unwrap();
    let sampler = GibbsSampler::new(&data.dataset, PriorSpec::vague(9)).unwrap();
    let streams = Streams::new(72);
    let (iters, burn) = (5000, 500);
    let omega = Matrix3::identity();
    let mut latents = sampler.initial_latents(&streams).unwrap();
    let mut theta = threepart::model::LocationParams::zeros([3, 3, 3]);
    let mut draws = Vec::new();
    for sweep in 1..=iters as u64 {
        sampler.draw_latents(&mut latents, &theta, &omega, &streams, sweep).unwrap();
        theta = sampler
            .draw_theta(&latents, &omega, &mut streams.block(sweep, Block::Location))
            .unwrap();
        if sweep > burn as u64 {
            draws.push(theta.stacked());
        }
    }

    let m = margins(&data.dataset);
    let uni = [
        probit_gibbs(&m.xa, &m.a, iters, burn, 1),
        probit_gibbs(&m.xc, &m.c, iters, burn, 2),
        regression_gibbs(&m.xy, &m.y, Some(1.0), iters, burn, 3),
    ];
    let mut k = 0;
    for block in &uni {
        for j in 0..3 {
            let u: Vec<f64> = block.iter().map(|d| d[j]).collect();
            let jt: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let z = mc_z(&jt, &u);
            // nine comparisons; 3.5 keeps the family-wise false alarm rate
            // near 0.4%
            assert!(z.abs() < 3.5, "coefficient {k}: z = {z:.2}");
            assert!((sd(&jt) / sd(&u) - 1.0).abs() < 0.1, "coefficient {k}: sd {} vs {}", sd(&jt), sd(&u));
            k += 1;
        }
    }
}

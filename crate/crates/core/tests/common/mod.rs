//! Oracles and fixtures shared by several test targets.
#![allow(dead_code)]

pub fn naive_conv(x: &[f32], n: usize, cin: usize, h: usize, w: usize, k: &[f32], cout: usize, kh: usize, kw: usize, b: &[f32], pad: usize) -> Vec<f32> {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let mut y = vec![0.0f32; n * cout * ho * wo];
    for i in 0..n {
        for o in 0..cout {
            for r in 0..ho {
                for c in 0..wo {
                    let mut acc = 0.0f64;
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let yy = r as isize + dy as isize - pad as isize;
                                let xx = c as isize + dx as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((i * cin + ci) * h + yy as usize) * w + xx as usize];
                                let kv = k[((o * cin + ci) * kh + dy) * kw + dx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    y[((i * cout + o) * ho + r) * wo + c] = (acc + b[o] as f64) as f32;
                }
            }
        }
    }
    y
}

pub fn naive_pool(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut y = Vec::new();
    for p in 0..planes {
        for r in 0..h / 2 {
            for c in 0..w / 2 {
                let at = |dr: usize, dc: usize| x[p * h * w + (2 * r + dr) * w + 2 * c + dc];
                y.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    y
}

pub fn naive_dense(x: &[f32], rows: usize, inp: usize, w: &[f32], out: usize, b: &[f32]) -> Vec<f32> {
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        for o in 0..out {
            let acc: f64 = (0..inp).map(|i| x[r * inp + i] as f64 * w[o * inp + i] as f64).sum();
            y.push((acc + b[o] as f64) as f32);
        }
    }
    y
}

pub mod grad {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use xsl_core::kernel::{grad_check, GradCheckReport, Gradients, Mode, OpKind, Tensor};
    use xsl_core::model::{forward_batch, init_params, Arch, Example, ModelParams, PARAM_NAMES};
    use xsl_core::scenegen::{quadrant_origin, SCENE_PIXELS, SCENE_SIDE};

    pub const TOL: f64 = 1e-4;
    pub const PER_PARAM: usize = 50;
    pub const STEP: f64 = 1e-6;

    /// A scene with random strokes in `quadrants`, the rest blank.
    pub fn random_scene(rng: &mut ChaCha8Rng, quadrants: &[usize]) -> Vec<f32> {
        let mut s = vec![0.0f32; SCENE_PIXELS];
        for &q in quadrants {
            let (r0, c0) = quadrant_origin(q);
            for r in r0 + 4..r0 + 24 {
                for c in c0 + 4..c0 + 24 {
                    if rng.random::<f32>() < 0.4 {
                        s[r * SCENE_SIDE + c] = rng.random();
                    }
                }
            }
        }
        s
    }

    pub struct Fixture {
        pub scenes: Vec<Vec<f32>>,
        pub captions: Vec<Vec<u8>>,
        pub labels: Vec<bool>,
    }

    /// A matching two-object trial, its mismatch, and a repeat of the first
    /// scene so the shared-encoding path is exercised.
    pub fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_scene(&mut rng, &[0, 3]);
        let b = random_scene(&mut rng, &[1, 2]);
        Fixture {
            scenes: vec![a.clone(), b, a],
            captions: vec![vec![4, 7], vec![4, 7], vec![2, 9]],
            labels: vec![true, false, false],
        }
    }

    pub fn loss_and_grads(
        arch: Arch,
        fx: &Fixture,
        params: &[Tensor<f64>],
        fault: Option<OpKind>,
    ) -> xsl_core::Result<(f64, Gradients<f64>)> {
        let mp = ModelParams { arch, tensors: params.to_vec() };
        let ex: Vec<Example<'_>> =
            fx.scenes.iter().zip(&fx.captions).map(|(s, c)| Example { scene: s, caption: c }).collect();
        let mut pass = forward_batch(&mp, &ex, Some(&fx.labels), Mode::Train, &mut ChaCha8Rng::seed_from_u64(5))?;
        if let Some(kind) = fault {
            pass.graph.inject_backward_fault(kind, 1.01);
        }
        let loss = pass.loss_value().expect("labels given");
        Ok((loss, pass.backward()?))
    }

    /// Initial weights with small random biases. Zero biases put every ReLU
    /// fed by a blank quadrant exactly at its kink, where the derivative is
    /// undefined and finite differences see half a slope.
    pub fn generic_params(arch: Arch) -> ModelParams<f64> {
        let mut p = init_params(arch, 3).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (name, t) in PARAM_NAMES.iter().zip(p.tensors.iter_mut()) {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        p
    }

    pub fn check(arch: Arch, fault: Option<OpKind>) -> GradCheckReport {
        let fx = fixture();
        let params = generic_params(arch);
        let report = grad_check(
            |p| loss_and_grads(arch, &fx, p, fault),
            &params.tensors,
            STEP,
            PER_PARAM,
            TOL,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        if let Some((p, i, a, n)) = report.worst {
            eprintln!(
                "{arch:?} fault={fault:?}: max rel err {:.3e} over {} coords; worst {}[{i}] analytic {a:.6e} numeric {n:.6e}",
                report.max_rel_error, report.checked, PARAM_NAMES[p]
            );
        }
        report
    }
}

pub mod chance {
    use xsl_core::experiment::evaluate_4afc;
    use xsl_core::mnist::Mnist;
    use xsl_core::model::{init_params, Arch};
    use xsl_core::scenegen::{generate_eval_trials, substream, ExemplarMode};

    /// Correct responses of untrained networks over `n` 4AFC trials, each
    /// answered by its own freshly initialized network. A single network's
    /// answers are strongly correlated (its class ranking is fixed at
    /// init), so pooling many trials from a few networks is overdispersed
    /// relative to a binomial; one network per trial makes the trials
    /// independent. Modes alternate fixed/varying.
    pub fn hits(data: &Mnist, arch: Arch, n: usize, seed_base: u64) -> usize {
        (0..n)
            .filter(|&i| {
                let seed = seed_base + i as u64;
                let (mode, store) =
                    if i % 2 == 0 { (ExemplarMode::Fixed, &data.train) } else { (ExemplarMode::Varying, &data.test) };
                let trials = generate_eval_trials(store, mode, &mut substream(seed, 2), 1).unwrap();
                let trial = &trials[i % trials.len()];
                let (acc, _) = evaluate_4afc(&init_params(arch, seed), std::slice::from_ref(trial)).unwrap();
                acc == 1.0
            })
            .count()
    }

    /// Whether `hits` of `n` lies inside the three-sigma binomial band around 1/4.
    pub fn within_band(hits: usize, n: usize) -> (f64, f64, bool) {
        let p = hits as f64 / n as f64;
        let band = 3.0 * (0.25 * 0.75 / n as f64).sqrt();
        (p, band, (p - 0.25).abs() <= band)
    }
}

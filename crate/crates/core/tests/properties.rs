use matforge::data::{select_lowest, CATEGORIES};
use matforge::grid::MaterialMaps;
use matforge::render::{make_environment_set, plane_irradiance, shade_linear, Lighting, RenderConfig};
use matforge::reward::{normalize_score, reward_loss};
use matforge::rng::stream;
use matforge::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const FD_STEP: f64 = 1e-6;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

type Build = fn(&mut Graph, &[Var]) -> Var;
type Case = (&'static str, Build, fn(u64) -> Vec<Tensor>);

/// Scalar loss `sum(op(inputs) * w)` with a fixed random weight `w`, so every
/// output element contributes with its own coefficient.
fn weighted_loss(build: Build, inputs: &[Tensor], weight_seed: u64) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad(true))).collect();
    let out = build(&mut g, &vars);
    let w = Tensor::randn(g.shape(out), 1.0, &mut stream(weight_seed, &[]));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss).item().unwrap();
    let grads = g.backward(loss).unwrap();
    (value, vars.iter().map(|&v| grads.get(v)).collect())
}

fn check_gradient(build: Build, inputs: Vec<Tensor>, seed: u64) -> Result<(), TestCaseError> {
    let (_, analytic) = weighted_loss(build, &inputs, seed);
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let at = |delta: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[k] += delta;
                weighted_loss(build, &moved, seed).0
            };
            let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            let g = analytic[i].data()[k];
            prop_assert!(
                (g - fd).abs() <= RTOL * g.abs().max(fd.abs()) + ATOL,
                "input {i}[{k}]: analytic {g:e}, finite difference {fd:e}"
            );
        }
    }
    Ok(())
}

fn randn(shape: &[usize], seed: u64, k: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut stream(seed, &[k]))
}

fn positive(shape: &[usize], seed: u64, k: u64) -> Tensor {
    randn(shape, seed, k).map(|x| 0.5 + x.abs())
}

fn primitives() -> Vec<Case> {
    vec![
        ("add", |g, v| g.add(v[0], v[1]).unwrap(), |s| vec![randn(&[2, 3], s, 0), randn(&[2, 3], s, 1)]),
        (
            "add broadcast",
            |g, v| g.add(v[0], v[1]).unwrap(),
            |s| vec![randn(&[2, 3, 2], s, 0), randn(&[2, 1, 1], s, 1)],
        ),
        ("sub", |g, v| g.sub(v[0], v[1]).unwrap(), |s| vec![randn(&[4], s, 0), randn(&[4], s, 1)]),
        ("mul", |g, v| g.mul(v[0], v[1]).unwrap(), |s| vec![randn(&[3, 2], s, 0), randn(&[3, 2], s, 1)]),
        ("minimum", |g, v| g.minimum(v[0], v[1]).unwrap(), |s| vec![randn(&[5], s, 0), randn(&[5], s, 1)]),
        (
            "matmul",
            |g, v| g.matmul(v[0], v[1]).unwrap(),
            |s| vec![randn(&[2, 3], s, 0), randn(&[3, 4], s, 1)],
        ),
        (
            "conv2d 3x3",
            |g, v| g.conv2d(v[0], v[1]).unwrap(),
            |s| vec![randn(&[2, 4, 4], s, 0), randn(&[3, 2, 3, 3], s, 1)],
        ),
        (
            "conv2d 1x1",
            |g, v| g.conv2d(v[0], v[1]).unwrap(),
            |s| vec![randn(&[2, 3, 3], s, 0), randn(&[2, 2, 1, 1], s, 1)],
        ),
        ("silu", |g, v| g.silu(v[0]), |s| vec![randn(&[6], s, 0)]),
        ("group_norm", |g, v| g.group_norm(v[0], 2, 1e-5).unwrap(), |s| vec![randn(&[4, 2, 2], s, 0)]),
        ("reshape", |g, v| g.reshape(v[0], &[3, 2]).unwrap(), |s| vec![randn(&[2, 3], s, 0)]),
        (
            "concat",
            |g, v| g.concat(&[v[0], v[1]], 1).unwrap(),
            |s| vec![randn(&[2, 1, 2], s, 0), randn(&[2, 3, 2], s, 1)],
        ),
        ("slice", |g, v| g.slice(v[0], 1, 1, 2).unwrap(), |s| vec![randn(&[2, 4], s, 0)]),
        ("sum", |g, v| g.sum(v[0]), |s| vec![randn(&[3, 2], s, 0)]),
        ("mean", |g, v| g.mean(v[0]), |s| vec![randn(&[3, 2], s, 0)]),
        ("add_scalar", |g, v| g.add_scalar(v[0], 0.7), |s| vec![randn(&[3], s, 0)]),
        ("mul_scalar", |g, v| g.mul_scalar(v[0], -1.3), |s| vec![randn(&[3], s, 0)]),
        ("exp", |g, v| g.exp(v[0]), |s| vec![randn(&[4], s, 0)]),
        ("log", |g, v| g.log(v[0]), |s| vec![positive(&[4], s, 0)]),
        ("square", |g, v| g.square(v[0]), |s| vec![randn(&[4], s, 0)]),
        ("clamp", |g, v| g.clamp(v[0], -0.5, 0.5), |s| vec![randn(&[6], s, 0)]),
        ("avg_pool2", |g, v| g.avg_pool2(v[0]).unwrap(), |s| vec![randn(&[2, 4, 2], s, 0)]),
        ("upsample2", |g, v| g.upsample2(v[0]).unwrap(), |s| vec![randn(&[2, 2, 3], s, 0)]),
    ]
}

fn composite(g: &mut Graph, v: &[Var]) -> Var {
    let h = g.matmul(v[0], v[1]).unwrap();
    let h = g.silu(h);
    let h = g.square(h);
    g.mean(h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for (name, build, inputs) in primitives() {
            check_gradient(build, inputs(seed), seed).map_err(|e| TestCaseError::fail(format!("{name}: {e}")))?;
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>()) {
        let inputs = vec![randn(&[3, 4], seed, 0), randn(&[4, 2], seed, 1)];
        let (la, ga) = weighted_loss(composite, &inputs, seed);
        let (lb, gb) = weighted_loss(composite, &inputs, seed);
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        for (a, b) in ga.iter().zip(&gb) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gradient_is_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = randn(&[3, 3], seed, 0);
        let grad_of = |coef_f: f64, coef_g: f64| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone().with_grad(true));
            let sq = g.square(xv);
            let f = g.sum(sq);
            let e = g.exp(xv);
            let h = g.mean(e);
            let fa = g.mul_scalar(f, coef_f);
            let hb = g.mul_scalar(h, coef_g);
            let loss = g.add(fa, hb).unwrap();
            g.backward(loss).unwrap().get(xv)
        };
        let combined = grad_of(a, b);
        let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for k in 0..x.numel() {
            let expected = a * gf.data()[k] + b * gg.data()[k];
            prop_assert!((combined.data()[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn environments_hold_the_target_irradiance(seed in any::<u64>(), lights in 1usize..6, level in 0.1f64..2.0) {
        let set = make_environment_set(3, lights, seed, [level; 3]).unwrap();
        for env in &set.environments {
            for c in plane_irradiance(env) {
                prop_assert!((c - level).abs() <= 1e-9 * level);
            }
        }
    }

    #[test]
    fn brighter_albedo_never_darkens_linear_shading(seed in any::<u64>(), boost in 0.0f64..0.5) {
        let res = 8;
        let mut rng = stream(seed, &[]);
        let mut unit = |n: usize| (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
        let (albedo, height, rough, metal) = (unit(3 * res * res), unit(res * res), unit(res * res), unit(res * res));
        let brighter: Vec<f64> = albedo.iter().map(|a| (a + boost).min(1.0)).collect();
        let env = &make_environment_set(1, 4, seed, [0.8; 3]).unwrap().environments[0];
        let cfg = RenderConfig::default();
        let dim = MaterialMaps::new(res, albedo, height.clone(), rough.clone(), metal.clone()).unwrap();
        let lit = MaterialMaps::new(res, brighter, height, rough, metal).unwrap();
        let a = shade_linear(&dim, Lighting::Environment(env), &cfg).unwrap();
        let b = shade_linear(&lit, Lighting::Environment(env), &cfg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!(y + 1e-12 >= *x);
        }
    }

    #[test]
    fn reward_loss_without_smoothness_is_mse(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = stream(seed, &[]);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let (loss, _) = reward_loss(&scores, &labels, &refs, 4, 1.0, 0.0).unwrap();
        let mse = scores.iter().zip(&labels).map(|(s, l)| (s - l) * (s - l)).sum::<f64>() / n as f64;
        prop_assert_eq!(loss, mse);
    }

    #[test]
    fn normalized_score_is_strictly_increasing(lo in -5.0f64..5.0, width in 0.01f64..10.0, x in -20.0f64..20.0, dx in 1e-6f64..5.0) {
        let bounds = (lo, lo + width);
        prop_assert!(normalize_score(x + dx, bounds).unwrap() > normalize_score(x, bounds).unwrap());
    }

    #[test]
    fn selection_is_the_bottom_k_per_category(seed in any::<u64>(), per in 1usize..6, keep in 0usize..6) {
        let keep = keep.min(per);
        let cats: Vec<usize> = (0..CATEGORIES.len()).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        let mut rng = stream(seed, &[]);
        // coarse scores so ties occur
        let scores: Vec<f64> = cats.iter().map(|_| f64::from(rng.random_range(0..4u8))).collect();
        let picked = select_lowest(&cats, &scores, &vec![keep; CATEGORIES.len()]).unwrap();
        prop_assert_eq!(picked.len(), keep * CATEGORIES.len());
        for c in 0..CATEGORIES.len() {
            let mine: Vec<usize> = picked.iter().copied().filter(|&i| cats[i] == c).collect();
            for i in (0..cats.len()).filter(|&i| cats[i] == c && !mine.contains(&i)) {
                for &j in &mine {
                    prop_assert!(scores[j] < scores[i] || (scores[j] == scores[i] && j < i));
                }
            }
        }
    }

    #[test]
    fn clipping_is_pessimistic_for_positive_advantages(seed in any::<u64>(), clip in 0.01f64..0.5) {
        let mut g = Graph::new();
        let log_ratio = g.constant(randn(&[32], seed, 0).map(|z| 0.5 * z));
        let advantage = g.constant(positive(&[32], seed, 1));
        let ratio = g.exp(log_ratio);
        let unclipped = g.mul(ratio, advantage).unwrap();
        let clamped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
        let clipped_term = g.mul(clamped, advantage).unwrap();
        let surrogate = g.minimum(unclipped, clipped_term).unwrap();
        let (s, u) = (g.mean(surrogate), g.mean(unclipped));
        prop_assert!(g.value(s).item().unwrap() <= g.value(u).item().unwrap());
    }
}

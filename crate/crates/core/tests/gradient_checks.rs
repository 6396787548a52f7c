//! Finite-difference oracles for every differentiable operation and for
//! the composed sampling/objective pipelines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tempoflow::consistency::objective;
use tempoflow::diffusion::{
    ddim_denoise, frame_decode, DiffusionSchedule, GeneratorSpec, NoisePredictor, ToyGenerator,
};
use tempoflow::flow::{valid_mask, warp_nearest, FlowField, OcclusionMask};
use tempoflow::tensor::{concat_channels, masked_nmse, ConvKernel};
use tempoflow::Tensor;

const H_STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += H_STEP;
            xm[i] -= H_STEP;
            (f(&xp) - f(&xm)) / (2.0 * H_STEP)
        })
        .collect()
}

fn assert_grad_close(analytic: &[f64], fd: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.len(), fd.len());
    for i in 0..fd.len() {
        let tol = atol + rtol * analytic[i].abs().max(fd[i].abs());
        assert!(
            (analytic[i] - fd[i]).abs() <= tol,
            "{what}[{i}]: analytic {} vs fd {}",
            analytic[i],
            fd[i]
        );
    }
}

/// Gradient of `sum(op(x) .* weights)` both analytically and by central
/// differences; weights make permutation errors visible.
fn check_weighted(
    seed: u64,
    shape: &[usize],
    build: impl Fn(&Tensor) -> Tensor,
    what: &str,
) {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let x0 = uniform(&mut r, n);
    let out_shape = build(&Tensor::from_vec(shape, x0.clone()).unwrap())
        .shape()
        .to_vec();
    let out_n: usize = out_shape.iter().product();
    let weights = Tensor::from_vec(&out_shape, uniform(&mut r, out_n)).unwrap();

    let f = |x: &[f64]| -> f64 {
        let t = Tensor::from_vec(shape, x.to_vec()).unwrap();
        build(&t).mul(&weights).unwrap().sum_all().item()
    };
    let fd = finite_diff(&f, &x0);

    let var = Tensor::variable(shape, x0.clone()).unwrap();
    build(&var).mul(&weights).unwrap().sum_all().backward().unwrap();
    assert_grad_close(&var.grad().unwrap(), &fd, 1e-4, 1e-9, what);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let other = Tensor::from_vec(&[2, 4, 4], uniform(&mut rng(9), 32)).unwrap();
    check_weighted(1, &[2, 4, 4], |x| x.add(&other).unwrap(), "add");
    check_weighted(2, &[2, 4, 4], |x| x.sub(&other).unwrap(), "sub");
    check_weighted(3, &[2, 4, 4], |x| x.mul(&other).unwrap(), "mul");
    check_weighted(4, &[2, 4, 4], |x| x.add_scalar(0.37), "add_scalar");
    check_weighted(5, &[2, 4, 4], |x| x.mul_scalar(-1.84), "mul_scalar");
    check_weighted(6, &[2, 8, 8], |x| x.tanh_act(), "tanh");
}

#[test]
fn both_mul_operands_match_finite_differences() {
    let mut r = rng(17);
    let a0 = uniform(&mut r, 16);
    let b0 = uniform(&mut r, 16);
    let f = |joint: &[f64]| -> f64 {
        let a = Tensor::from_vec(&[16], joint[..16].to_vec()).unwrap();
        let b = Tensor::from_vec(&[16], joint[16..].to_vec()).unwrap();
        a.mul(&b).unwrap().sum_all().item()
    };
    let joint: Vec<f64> = a0.iter().chain(&b0).cloned().collect();
    let fd = finite_diff(&f, &joint);
    let av = Tensor::variable(&[16], a0).unwrap();
    let bv = Tensor::variable(&[16], b0).unwrap();
    av.mul(&bv).unwrap().sum_all().backward().unwrap();
    assert_grad_close(&av.grad().unwrap(), &fd[..16], 1e-4, 1e-9, "mul lhs");
    assert_grad_close(&bv.grad().unwrap(), &fd[16..], 1e-4, 1e-9, "mul rhs");
}

#[test]
fn conv2d_input_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let kernel = ConvKernel::new(2, 1, uniform(&mut r, 18)).unwrap();
    check_weighted(12, &[1, 4, 4], |x| x.conv2d(&kernel).unwrap(), "conv2d");
    let kernel3 = ConvKernel::new(3, 2, uniform(&mut r, 54)).unwrap();
    check_weighted(13, &[2, 8, 8], |x| x.conv2d(&kernel3).unwrap(), "conv2d wide");
}

#[test]
fn concat_gradient_matches_finite_differences() {
    let fixed = Tensor::from_vec(&[2, 3, 3], uniform(&mut rng(21), 18)).unwrap();
    check_weighted(
        22,
        &[1, 3, 3],
        |x| concat_channels(&[x.clone(), fixed.clone()]).unwrap(),
        "concat",
    );
}

#[test]
fn masked_nmse_gradient_matches_finite_differences() {
    let mut r = rng(31);
    let mask: Vec<bool> = (0..16).map(|_| r.gen_bool(0.7)).collect();
    let b = Tensor::from_vec(&[2, 4, 4], uniform(&mut r, 32)).unwrap();
    let x0 = uniform(&mut r, 32);
    let mask_c = mask.clone();
    let f = |x: &[f64]| -> f64 {
        let t = Tensor::from_vec(&[2, 4, 4], x.to_vec()).unwrap();
        masked_nmse(&t, &b, &mask_c).unwrap().item()
    };
    let fd = finite_diff(&f, &x0);
    let var = Tensor::variable(&[2, 4, 4], x0).unwrap();
    masked_nmse(&var, &b, &mask).unwrap().backward().unwrap();
    assert_grad_close(&var.grad().unwrap(), &fd, 1e-4, 1e-9, "masked_nmse");
}

#[test]
fn warp_gather_gradient_matches_finite_differences() {
    let mut r = rng(41);
    let flow = FlowField::new(
        4,
        4,
        (0..16)
            .map(|_| [r.gen_range(-2..3) as f64, r.gen_range(-2..3) as f64])
            .collect(),
    )
    .unwrap();
    let occ = OcclusionMask::new(4, 4, (0..16).map(|_| r.gen_bool(0.2)).collect()).unwrap();
    let mask = valid_mask(&flow, &occ).unwrap();
    check_weighted(
        42,
        &[3, 4, 4],
        |x| warp_nearest(x, &flow, &mask).unwrap().0,
        "warp gather",
    );
}

#[test]
fn clamp_unit_gradient_matches_finite_differences_away_from_kinks() {
    let mut r = rng(51);
    // keep samples a safe distance from the clamp kinks at 0 and 1
    let x0: Vec<f64> = (0..32)
        .map(|_| loop {
            let v: f64 = r.gen_range(-0.5..1.5);
            if (v - 0.0).abs() > 10.0 * H_STEP && (v - 1.0).abs() > 10.0 * H_STEP {
                break v;
            }
        })
        .collect();
    let f = |x: &[f64]| -> f64 {
        Tensor::from_vec(&[32], x.to_vec()).unwrap().clamp_unit().sum_all().item()
    };
    let fd = finite_diff(&f, &x0);
    let var = Tensor::variable(&[32], x0).unwrap();
    var.clamp_unit().sum_all().backward().unwrap();
    assert_grad_close(&var.grad().unwrap(), &fd, 1e-4, 1e-9, "clamp_unit");
}

#[test]
fn conv2d_equals_six_loop_reference_bit_for_bit() {
    // reference: plain sextuple loop in the same accumulation order
    fn reference(
        input: &[f64],
        (c_in, h, w): (usize, usize, usize),
        weights: &[f64],
        c_out: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; c_out * h * w];
        for oc in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += input[(ic * h + sy as usize) * w + sx as usize]
                                    * weights[((oc * c_in + ic) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(oc * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    let mut r = rng(61);
    for (c_in, c_out, h, w) in [(1, 1, 3, 3), (3, 2, 8, 8), (2, 3, 5, 7)] {
        let input = uniform(&mut r, c_in * h * w);
        let weights = uniform(&mut r, c_out * c_in * 9);
        let t = Tensor::from_vec(&[c_in, h, w], input.clone()).unwrap();
        let k = ConvKernel::new(c_out, c_in, weights.clone()).unwrap();
        let got = t.conv2d(&k).unwrap().to_vec();
        let expect = reference(&input, (c_in, h, w), &weights, c_out);
        assert_eq!(
            got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn toy_generator_gradient_matches_finite_differences() {
    let sched = DiffusionSchedule::linear(4, 0.3).unwrap();
    let gen = ToyGenerator::new(GeneratorSpec::default(), 1).unwrap();
    let cond = Tensor::from_vec(&[1, 4, 4], uniform(&mut rng(71), 16)).unwrap();
    let cond = cond.mul_scalar(0.5).add_scalar(0.5); // conditions live in [0,1]
    let mut r = rng(72);
    let x0 = uniform(&mut r, 48);
    let weights = Tensor::from_vec(&[3, 4, 4], uniform(&mut r, 48)).unwrap();
    let f = |x: &[f64]| -> f64 {
        let z = Tensor::from_vec(&[3, 4, 4], x.to_vec()).unwrap();
        gen.predict_noise(&z, &cond, 2, &sched)
            .unwrap()
            .mul(&weights)
            .unwrap()
            .sum_all()
            .item()
    };
    let fd = finite_diff(&f, &x0);
    let z = Tensor::variable(&[3, 4, 4], x0).unwrap();
    gen.predict_noise(&z, &cond, 2, &sched)
        .unwrap()
        .mul(&weights)
        .unwrap()
        .sum_all()
        .backward()
        .unwrap();
    assert_grad_close(&z.grad().unwrap(), &fd, 1e-4, 1e-9, "toy generator");
}

#[test]
fn end_to_end_sampler_gradient_matches_finite_differences() {
    // sum(frame_decode(ddim_denoise(z, L))) differentiated w.r.t. z
    let sched = DiffusionSchedule::linear(3, 0.4).unwrap();
    let gen = ToyGenerator::new(GeneratorSpec::default(), 1).unwrap();
    let cond = Tensor::full(&[1, 4, 4], 0.6).unwrap();
    let x0 = uniform(&mut rng(81), 48);
    let f = |x: &[f64]| -> f64 {
        let z = Tensor::from_vec(&[3, 4, 4], x.to_vec()).unwrap();
        frame_decode(&ddim_denoise(&z, 3, &cond, &gen, &sched).unwrap())
            .sum_all()
            .item()
    };
    let fd = finite_diff(&f, &x0);
    let z = Tensor::variable(&[3, 4, 4], x0).unwrap();
    frame_decode(&ddim_denoise(&z, 3, &cond, &gen, &sched).unwrap())
        .sum_all()
        .backward()
        .unwrap();
    assert_grad_close(&z.grad().unwrap(), &fd, 1e-3, 1e-7, "sampler chain");
}

#[test]
fn objective_gradient_matches_finite_differences() {
    // T=3 pipeline: latents -> denoise -> decode -> windowed objective
    let sched = DiffusionSchedule::linear(3, 0.4).unwrap();
    let gen = ToyGenerator::new(GeneratorSpec::default(), 1).unwrap();
    let conds: Vec<Tensor> = (0..3)
        .map(|t| Tensor::full(&[1, 4, 4], 0.3 + 0.2 * t as f64).unwrap())
        .collect();
    let mut r = rng(91);
    let flows: Vec<FlowField> = (0..2)
        .map(|_| {
            FlowField::new(
                4,
                4,
                (0..16)
                    .map(|_| [r.gen_range(-1..2) as f64, r.gen_range(-1..2) as f64])
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let occs = vec![OcclusionMask::clear(4, 4); 2];
    let x0 = uniform(&mut r, 3 * 48);

    let eval = |x: &[f64], grad_for: Option<usize>| -> (f64, Option<Vec<f64>>) {
        let latents: Vec<Tensor> = (0..3)
            .map(|t| {
                let chunk = x[t * 48..(t + 1) * 48].to_vec();
                if Some(t) == grad_for {
                    Tensor::variable(&[3, 4, 4], chunk).unwrap()
                } else {
                    Tensor::from_vec(&[3, 4, 4], chunk).unwrap()
                }
            })
            .collect();
        let frames: Vec<Tensor> = (0..3)
            .map(|t| {
                frame_decode(&ddim_denoise(&latents[t], 3, &conds[t], &gen, &sched).unwrap())
            })
            .collect();
        let obj = objective(&frames, &flows, &occs, 3).unwrap();
        let value = obj.item();
        let grad = grad_for.map(|t| {
            obj.backward().unwrap();
            latents[t].grad().unwrap_or_else(|| vec![0.0; 48])
        });
        (value, grad)
    };

    let f = |x: &[f64]| eval(x, None).0;
    let fd = finite_diff(&f, &x0);
    for t in 0..3 {
        let (_, grad) = eval(&x0, Some(t));
        assert_grad_close(&grad.unwrap(), &fd[t * 48..(t + 1) * 48], 1e-3, 1e-7, "objective");
    }
}

#[test]
fn diffuse_is_differentiable_in_both_inputs() {
    use tempoflow::diffusion::diffuse;
    let sched = DiffusionSchedule::linear(5, 0.2).unwrap();
    let mut r = rng(101);
    let z0 = uniform(&mut r, 12);
    let zl = uniform(&mut r, 12);
    let joint: Vec<f64> = z0.iter().chain(&zl).cloned().collect();
    let f = |x: &[f64]| -> f64 {
        let a = Tensor::from_vec(&[3, 2, 2], x[..12].to_vec()).unwrap();
        let b = Tensor::from_vec(&[3, 2, 2], x[12..].to_vec()).unwrap();
        diffuse(&a, &b, 3, &sched).unwrap().sum_all().item()
    };
    let fd = finite_diff(&f, &joint);
    let a = Tensor::variable(&[3, 2, 2], z0).unwrap();
    let b = Tensor::variable(&[3, 2, 2], zl).unwrap();
    diffuse(&a, &b, 3, &sched).unwrap().sum_all().backward().unwrap();
    assert_grad_close(&a.grad().unwrap(), &fd[..12], 1e-4, 1e-9, "diffuse z0");
    assert_grad_close(&b.grad().unwrap(), &fd[12..], 1e-4, 1e-9, "diffuse noise");
}

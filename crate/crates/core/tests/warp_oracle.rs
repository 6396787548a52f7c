//! Brute-force per-pixel re-evaluation of the warping, masking, and mask
//! composition semantics, checked bit-for-bit against the library, plus
//! scene ground-truth exactness on randomized specs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tempoflow::flow::{
    chain_warp, valid_mask, warp_nearest, FlowField, OcclusionMask, ValidityMask,
};
use tempoflow::metrics::warp_error;
use tempoflow::scene::{condition_stack, generate, SceneSpec, SpriteSpec};
use tempoflow::Tensor;

/// Independent re-statement of the masking rule: unoccluded and the
/// rounded target inside the frame.
fn brute_valid(flow: &FlowField, occ: &OcclusionMask) -> Vec<bool> {
    let (w, h) = (flow.width(), flow.height());
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.at(x, y);
            let tx = (x as f64 + dx).round();
            let ty = (y as f64 + dy).round();
            let inside = tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64;
            out[y * w + x] = inside && !occ.is_occluded(x, y);
        }
    }
    out
}

/// Independent re-statement of the nearest-neighbor pull warp.
fn brute_warp(frame: &[f64], c: usize, flow: &FlowField, valid: &[bool]) -> Vec<f64> {
    let (w, h) = (flow.width(), flow.height());
    let plane = w * h;
    let mut out = vec![0.0; c * plane];
    for y in 0..h {
        for x in 0..w {
            if !valid[y * w + x] {
                continue;
            }
            let [dx, dy] = flow.at(x, y);
            let tx = (x as f64 + dx).round() as usize;
            let ty = (y as f64 + dy).round() as usize;
            for ch in 0..c {
                out[ch * plane + y * w + x] = frame[ch * plane + ty * w + tx];
            }
        }
    }
    out
}

/// Independent chain evaluation: follow each pixel's correspondence hop
/// by hop; it stays valid only if every hop is valid. Warps apply by
/// pulling, so the first hop from an output pixel uses the last flow in
/// the application list.
fn brute_chain(
    frame: &[f64],
    c: usize,
    flows: &[&FlowField],
    occs: &[&OcclusionMask],
) -> (Vec<f64>, Vec<bool>) {
    let (w, h) = (flows[0].width(), flows[0].height());
    let plane = w * h;
    let mut out = vec![0.0; c * plane];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut cx, mut cy) = (x, y);
            let mut ok = true;
            for (flow, occ) in flows.iter().zip(occs).rev() {
                if occ.is_occluded(cx, cy) {
                    ok = false;
                    break;
                }
                match flow.target(cx, cy) {
                    Some((nx, ny)) => {
                        cx = nx;
                        cy = ny;
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                valid[y * w + x] = true;
                for ch in 0..c {
                    out[ch * plane + y * w + x] = frame[ch * plane + cy * w + cx];
                }
            }
        }
    }
    (out, valid)
}

fn random_case(r: &mut ChaCha20Rng, w: usize, h: usize) -> (FlowField, OcclusionMask, Tensor) {
    let vectors: Vec<[f64; 2]> = (0..w * h)
        .map(|_| {
            if r.gen_bool(0.5) {
                [r.gen_range(-3..4) as f64, r.gen_range(-3..4) as f64]
            } else {
                [r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0)]
            }
        })
        .collect();
    let flow = FlowField::new(w, h, vectors).unwrap();
    let occ = OcclusionMask::new(w, h, (0..w * h).map(|_| r.gen_bool(0.15)).collect()).unwrap();
    let frame = Tensor::from_vec(
        &[3, h, w],
        (0..3 * w * h).map(|_| r.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    (flow, occ, frame)
}

#[test]
fn warp_and_masks_agree_with_brute_force_on_random_cases() {
    let mut r = ChaCha20Rng::seed_from_u64(7);
    for case in 0..50 {
        let (flow, occ, frame) = random_case(&mut r, 16, 16);
        let mask = valid_mask(&flow, &occ).unwrap();
        assert_eq!(mask.as_slice(), brute_valid(&flow, &occ), "case {case}: mask");

        let (warped, out_mask) = warp_nearest(&frame, &flow, &mask).unwrap();
        let expect = brute_warp(&frame.to_vec(), 3, &flow, mask.as_slice());
        assert_eq!(
            warped.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "case {case}: warp"
        );
        assert_eq!(out_mask, mask);
    }
}

#[test]
fn chain_warp_agrees_with_brute_force_on_random_cases() {
    let mut r = ChaCha20Rng::seed_from_u64(8);
    for case in 0..50 {
        let steps = r.gen_range(1..=4);
        let mut flows = Vec::new();
        let mut occs = Vec::new();
        let (_, _, frame) = random_case(&mut r, 16, 16);
        for _ in 0..steps {
            let (f, o, _) = random_case(&mut r, 16, 16);
            flows.push(f);
            occs.push(o);
        }
        let flow_refs: Vec<&FlowField> = flows.iter().collect();
        let occ_refs: Vec<&OcclusionMask> = occs.iter().collect();
        let (got, got_mask) = chain_warp(&frame, &flow_refs, &occ_refs).unwrap();
        let (expect, expect_mask) = brute_chain(&frame.to_vec(), 3, &flow_refs, &occ_refs);
        assert_eq!(got_mask.as_slice(), expect_mask, "case {case}: chain mask");
        assert_eq!(
            got.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "case {case}: chain values"
        );
    }
}

#[test]
fn warped_values_are_always_gathered_input_pixels() {
    let mut r = ChaCha20Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (flow, occ, frame) = random_case(&mut r, 12, 9);
        let mask = valid_mask(&flow, &occ).unwrap();
        let (warped, _) = warp_nearest(&frame, &flow, &mask).unwrap();
        let (src, out) = (frame.to_vec(), warped.to_vec());
        let plane = 12 * 9;
        for (i, v) in out.iter().enumerate() {
            let pix = i % plane;
            if mask.as_slice()[pix] {
                assert!(
                    src.iter().any(|s| s.to_bits() == v.to_bits()),
                    "warped value not an input pixel"
                );
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

fn arb_scene() -> impl Strategy<Value = (SceneSpec, u64)> {
    (
        2usize..5,          // frames
        12usize..24,        // size
        1usize..6,          // sprite size
        -2i64..3,           // vx
        -2i64..3,           // vy
        any::<u64>(),       // scene seed
        0u64..1000,         // texture seed
        proptest::bool::ANY, // camera pan on x
    )
        .prop_map(|(t, size, sw, vx, vy, seed, tex, pan)| {
            let spec = SceneSpec {
                width: size,
                height: size,
                frames: t,
                background_seed: tex,
                background_depth: 9.0,
                sprites: vec![SpriteSpec {
                    width: sw,
                    height: sw,
                    x: (size / 2) as i64 - 2,
                    y: (size / 2) as i64 - 2,
                    velocity: (vx, vy),
                    depth: 3.0,
                    texture_seed: tex ^ 0xDEAD,
                }],
                camera_pan: (if pan { 1 } else { 0 }, 0),
                focal: (10.0, 10.0),
            };
            (spec, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scene_bundles_are_exactly_consistent((spec, seed) in arb_scene()) {
        let b = generate(&spec, seed).unwrap();
        let (w, h) = (spec.width, spec.height);
        let plane = w * h;
        // frames agree along flows off occlusion, bit for bit
        for t in 0..b.flows.len() {
            let (a, next) = (b.frames[t].to_vec(), b.frames[t + 1].to_vec());
            for y in 0..h {
                for x in 0..w {
                    if b.occlusions[t].is_occluded(x, y) {
                        continue;
                    }
                    let (tx, ty) = b.flows[t].target(x, y).expect("unoccluded target in frame");
                    for ch in 0..3 {
                        prop_assert_eq!(
                            a[ch * plane + y * w + x].to_bits(),
                            next[ch * plane + ty * w + tx].to_bits()
                        );
                    }
                }
            }
        }
        // the bundle's own warp error is exactly zero
        let we = warp_error(&b.frames, &b.flows, &b.occlusions, b.frames.len()).unwrap();
        prop_assert_eq!(we, 0.0);
        // photometric occlusion derivation reproduces the ground truth
        for t in 0..b.flows.len() {
            let derived = tempoflow::flow::derive_occlusion(
                &b.frames[t], &b.frames[t + 1], &b.flows[t], 1e-6).unwrap();
            prop_assert_eq!(&derived, &b.occlusions[t]);
        }
    }

    #[test]
    fn chain_validity_never_exceeds_its_first_hop((spec, seed) in arb_scene()) {
        // the first hop from an output pixel uses the last-applied flow
        let b = generate(&spec, seed).unwrap();
        if b.flows.len() < 2 {
            return Ok(());
        }
        let flow_refs: Vec<&FlowField> = vec![&b.flows[1], &b.flows[0]];
        let occ_refs: Vec<&OcclusionMask> = vec![&b.occlusions[1], &b.occlusions[0]];
        let (_, v2) = chain_warp(&b.frames[2], &flow_refs, &occ_refs).unwrap();
        let hop: ValidityMask = valid_mask(&b.flows[0], &b.occlusions[0]).unwrap();
        for i in 0..spec.width * spec.height {
            prop_assert!(!v2.as_slice()[i] || hop.as_slice()[i]);
        }
    }

    #[test]
    fn depth_conditions_stay_in_unit_range((spec, seed) in arb_scene()) {
        let b = generate(&spec, seed).unwrap();
        for modality in [tempoflow::diffusion::Modality::Depth, tempoflow::diffusion::Modality::Normal] {
            let stack = condition_stack(&b, modality).unwrap();
            for f in stack.frames() {
                prop_assert!(f.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

//! Flow warping, validity masking, mask composition along warp chains,
//! occlusion derivation, and depth-to-normal conversion.
//!
//! Flows are stored as t -> t+1 pixel displacements; warping pulls frame
//! t+1 back onto frame t's grid through a nearest-neighbor gather. The
//! pixel correspondence depends only on the flow, never on frame values,
//! so gradients route cleanly through the gather to the source pixels.

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Per-pixel (dx, dy) displacements in pixels, row-major, pointing from
/// frame t to frame t+1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f64; 2]>) -> Result<Self> {
        contract!(width > 0 && height > 0, "flow field needs positive dims");
        contract!(
            vectors.len() == width * height,
            "flow field {width}x{height} needs {} vectors, got {}",
            width * height,
            vectors.len()
        );
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field component".into()));
        }
        Ok(FlowField {
            width,
            height,
            vectors,
        })
    }

    pub fn zero(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            vectors: vec![[0.0, 0.0]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.width + x]
    }

    /// Rounded target pixel of `(x, y)` under this flow, or `None` when it
    /// leaves the frame. Rounding is half-away-from-zero.
    pub fn target(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let [dx, dy] = self.at(x, y);
        let tx = (x as f64 + dx).round();
        let ty = (y as f64 + dy).round();
        if tx >= 0.0 && tx < self.width as f64 && ty >= 0.0 && ty < self.height as f64 {
            Some((tx as usize, ty as usize))
        } else {
            None
        }
    }
}

/// True where a pixel's correspondence in the next frame is undefined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    occluded: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, occluded: Vec<bool>) -> Result<Self> {
        contract!(width > 0 && height > 0, "occlusion mask needs positive dims");
        contract!(
            occluded.len() == width * height,
            "occlusion mask {width}x{height} needs {} entries, got {}",
            width * height,
            occluded.len()
        );
        Ok(OcclusionMask {
            width,
            height,
            occluded,
        })
    }

    pub fn clear(width: usize, height: usize) -> Self {
        OcclusionMask {
            width,
            height,
            occluded: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.occluded
    }

    pub fn is_occluded(&self, x: usize, y: usize) -> bool {
        self.occluded[y * self.width + x]
    }
}

/// True where a warped comparison is meaningful: unoccluded and with an
/// in-frame flow target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, valid: Vec<bool>) -> Result<Self> {
        contract!(width > 0 && height > 0, "validity mask needs positive dims");
        contract!(
            valid.len() == width * height,
            "validity mask {width}x{height} needs {} entries, got {}",
            width * height,
            valid.len()
        );
        Ok(ValidityMask {
            width,
            height,
            valid,
        })
    }

    pub fn all_valid(width: usize, height: usize) -> Self {
        ValidityMask {
            width,
            height,
            valid: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel positive depth in scene units.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        contract!(width > 0 && height > 0, "depth map needs positive dims");
        contract!(
            values.len() == width * height,
            "depth map {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        );
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("depth map value".into()));
        }
        contract!(
            values.iter().all(|&v| v > 0.0),
            "depth map must be strictly positive everywhere"
        );
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MIN, f64::max)
    }
}

/// Per-pixel surface normal encoded into \[0,1\], stored planar `[3,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    channels: Vec<f64>,
}

impl NormalMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Encoded channel values, `[3,H,W]` row-major.
    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [
            self.channels[i],
            self.channels[plane + i],
            self.channels[2 * plane + i],
        ]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.channels.clone())
            .expect("normal map data is finite by construction")
    }
}

/// 3x3 intrinsics with focal lengths on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    matrix: [[f64; 3]; 3],
}

impl CameraIntrinsics {
    pub fn from_focal(fx: f64, fy: f64) -> Result<Self> {
        contract!(
            fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0,
            "focal lengths must be positive and finite"
        );
        Ok(CameraIntrinsics {
            matrix: [[fx, 0.0, 0.0], [0.0, fy, 0.0], [0.0, 0.0, 1.0]],
        })
    }

    pub fn fx(&self) -> f64 {
        self.matrix[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.matrix[1][1]
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }
}

fn check_dims(flow: &FlowField, w: usize, h: usize, what: &str) -> Result<()> {
    contract!(
        flow.width == w && flow.height == h,
        "{what}: flow is {}x{}, expected {w}x{h}",
        flow.width,
        flow.height
    );
    Ok(())
}

/// A pixel is valid when it is unoccluded and its rounded flow target
/// lands inside the frame.
pub fn valid_mask(flow: &FlowField, occ: &OcclusionMask) -> Result<ValidityMask> {
    check_dims(flow, occ.width, occ.height, "valid_mask")?;
    let mut valid = vec![false; flow.width * flow.height];
    for y in 0..flow.height {
        for x in 0..flow.width {
            let i = y * flow.width + x;
            valid[i] = !occ.occluded[i] && flow.target(x, y).is_some();
        }
    }
    ValidityMask::new(flow.width, flow.height, valid)
}

fn gather_mapping(flow: &FlowField, validity: &ValidityMask) -> Vec<Option<usize>> {
    let mut mapping = vec![None; flow.width * flow.height];
    for y in 0..flow.height {
        for x in 0..flow.width {
            if validity.is_valid(x, y) {
                // validity guarantees the target is in frame
                let (tx, ty) = flow.target(x, y).expect("valid pixel has in-frame target");
                mapping[y * flow.width + x] = Some(ty * flow.width + tx);
            }
        }
    }
    mapping
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    contract!(
        frame.shape().len() == 3,
        "frame must be [C,H,W], got {:?}",
        frame.shape()
    );
    Ok((frame.shape()[2], frame.shape()[1]))
}

/// Nearest-neighbor pull warp: `out[p] = frame[round(p + flow[p])]` where
/// the mask is valid, zero elsewhere. Differentiable w.r.t. the frame.
pub fn warp_nearest(
    frame: &Tensor,
    flow: &FlowField,
    mask: &ValidityMask,
) -> Result<(Tensor, ValidityMask)> {
    let (w, h) = frame_dims(frame)?;
    check_dims(flow, w, h, "warp_nearest")?;
    contract!(
        mask.width == w && mask.height == h,
        "warp_nearest: mask is {}x{}, expected {w}x{h}",
        mask.width,
        mask.height
    );
    let mapping = gather_mapping(flow, mask);
    Ok((frame.gather_pixels(&mapping)?, mask.clone()))
}

/// Extend a warp chain by one step. The output validity is the step's
/// own validity AND the carried validity looked up at the flow target,
/// so a pixel stays valid only while every intermediate correspondence
/// was valid.
pub fn extend_chain(
    current: &Tensor,
    carried: Option<&ValidityMask>,
    flow: &FlowField,
    occ: &OcclusionMask,
) -> Result<(Tensor, ValidityMask)> {
    let (w, h) = frame_dims(current)?;
    check_dims(flow, w, h, "extend_chain")?;
    let step = valid_mask(flow, occ)?;
    let composed = match carried {
        None => step,
        Some(prev) => {
            let mut valid = vec![false; w * h];
            for y in 0..h {
                for x in 0..w {
                    if step.is_valid(x, y) {
                        let (tx, ty) = flow.target(x, y).expect("valid pixel has in-frame target");
                        valid[y * w + x] = prev.is_valid(tx, ty);
                    }
                }
            }
            ValidityMask::new(w, h, valid)?
        }
    };
    let mapping = gather_mapping(flow, &composed);
    Ok((current.gather_pixels(&mapping)?, composed))
}

/// Repeated `warp_nearest` along `flows`/`occs` in the given order; the
/// result validity is the conjunction of per-step validities propagated
/// through the chain.
pub fn chain_warp(
    frame: &Tensor,
    flows: &[&FlowField],
    occs: &[&OcclusionMask],
) -> Result<(Tensor, ValidityMask)> {
    contract!(!flows.is_empty(), "chain_warp needs at least one step");
    contract!(
        flows.len() == occs.len(),
        "chain_warp: {} flows vs {} occlusion maps",
        flows.len(),
        occs.len()
    );
    let mut current = frame.clone();
    let mut carried: Option<ValidityMask> = None;
    for (flow, occ) in flows.iter().zip(occs) {
        let (next, validity) = extend_chain(&current, carried.as_ref(), flow, occ)?;
        current = next;
        carried = Some(validity);
    }
    Ok((current, carried.expect("chain has at least one step")))
}

/// Mark pixels whose flow target leaves the frame or whose photometric
/// correspondence disagrees beyond `threshold` (mean squared difference
/// over channels).
pub fn derive_occlusion(
    frame_t: &Tensor,
    frame_t1: &Tensor,
    flow: &FlowField,
    threshold: f64,
) -> Result<OcclusionMask> {
    let (w, h) = frame_dims(frame_t)?;
    contract!(
        frame_t.shape() == frame_t1.shape(),
        "derive_occlusion: frame shapes {:?} vs {:?}",
        frame_t.shape(),
        frame_t1.shape()
    );
    check_dims(flow, w, h, "derive_occlusion")?;
    contract!(threshold > 0.0, "derive_occlusion threshold must be > 0");
    let c = frame_t.shape()[0];
    let plane = w * h;
    let occluded = frame_t.with_data(|a| {
        frame_t1.with_data(|b| {
            let mut occ = vec![false; plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    match flow.target(x, y) {
                        None => occ[i] = true,
                        Some((tx, ty)) => {
                            let j = ty * w + tx;
                            let mut msd = 0.0;
                            for ch in 0..c {
                                let d = a[ch * plane + i] - b[ch * plane + j];
                                msd += d * d;
                            }
                            msd /= c as f64;
                            occ[i] = msd > threshold;
                        }
                    }
                }
            }
            occ
        })
    });
    OcclusionMask::new(w, h, occluded)
}

/// Surface normals from depth derivatives: central differences in the
/// interior, one-sided at the borders, scaled by focal length over depth;
/// the unit normal `normalize((-dx, -dy, 1))` is encoded as `n*0.5 + 0.5`
/// clipped to \[0,1\].
pub fn depth_to_normal(depth: &DepthMap, cam: &CameraIntrinsics) -> Result<NormalMap> {
    let (w, h) = (depth.width, depth.height);
    let plane = w * h;
    let mut channels = vec![0.0; 3 * plane];
    let d = &depth.values;
    let grad_1d = |lo: f64, hi: f64, spacing: f64| (hi - lo) / spacing;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if w == 1 {
                0.0
            } else if x == 0 {
                grad_1d(d[i], d[i + 1], 1.0)
            } else if x == w - 1 {
                grad_1d(d[i - 1], d[i], 1.0)
            } else {
                grad_1d(d[i - 1], d[i + 1], 2.0)
            };
            let dy = if h == 1 {
                0.0
            } else if y == 0 {
                grad_1d(d[i], d[i + w], 1.0)
            } else if y == h - 1 {
                grad_1d(d[i - w], d[i], 1.0)
            } else {
                grad_1d(d[i - w], d[i + w], 2.0)
            };
            let sx = dx * cam.fx() / d[i];
            let sy = dy * cam.fy() / d[i];
            let norm = (sx * sx + sy * sy + 1.0).sqrt();
            let n = [-sx / norm, -sy / norm, 1.0 / norm];
            for (ch, v) in n.iter().enumerate() {
                channels[ch * plane + i] = (v * 0.5 + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    Ok(NormalMap {
        width: w,
        height: h,
        channels,
    })
}

//! Temporal-consistency evaluation: endpoint error between flow fields,
//! the warp objective as a pure metric, and a brute-force block-matching
//! flow estimator.

use serde::{Deserialize, Serialize};

use crate::consistency::objective;
use crate::error::{contract, Result};
use crate::flow::{FlowField, OcclusionMask, ValidityMask};
use crate::tensor::Tensor;

/// Aggregated endpoint error over a clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpeResult {
    /// Mean endpoint error in pixels across all evaluated transitions.
    pub mean_epe: f64,
    /// Endpoint error per transition.
    pub per_frame: Vec<f64>,
    /// Fraction of pixels that entered the evaluation.
    pub valid_pixel_fraction: f64,
}

/// Mean Euclidean distance between predicted and ground-truth flow
/// vectors over the valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, mask: &ValidityMask) -> Result<f64> {
    contract!(
        pred.width() == gt.width() && pred.height() == gt.height(),
        "epe: flow dims disagree ({}x{} vs {}x{})",
        pred.width(),
        pred.height(),
        gt.width(),
        gt.height()
    );
    contract!(
        mask.width() == pred.width() && mask.height() == pred.height(),
        "epe: mask dims disagree with flows"
    );
    let valid = mask.count_valid();
    contract!(valid > 0, "epe over an empty mask is undefined");
    let mut sum = 0.0;
    for (i, (p, g)) in pred.vectors().iter().zip(gt.vectors()).enumerate() {
        if mask.as_slice()[i] {
            let du = p[0] - g[0];
            let dv = p[1] - g[1];
            sum += (du * du + dv * dv).sqrt();
        }
    }
    Ok(sum / valid as f64)
}

/// Mean endpoint error across a clip's transitions plus the fraction of
/// pixels evaluated.
pub fn epe_sequence(
    preds: &[FlowField],
    gts: &[FlowField],
    masks: &[ValidityMask],
) -> Result<EpeResult> {
    contract!(
        preds.len() == gts.len() && masks.len() == gts.len() && !preds.is_empty(),
        "epe_sequence needs equally many predictions, references, and masks"
    );
    let mut per_frame = Vec::with_capacity(preds.len());
    let mut valid = 0usize;
    let mut total = 0usize;
    for ((p, g), m) in preds.iter().zip(gts).zip(masks) {
        per_frame.push(epe(p, g, m)?);
        valid += m.count_valid();
        total += m.width() * m.height();
    }
    Ok(EpeResult {
        mean_epe: per_frame.iter().sum::<f64>() / per_frame.len() as f64,
        per_frame,
        valid_pixel_fraction: valid as f64 / total as f64,
    })
}

/// The consistency objective evaluated as a pure metric on detached
/// frames; no flow estimator involved.
pub fn warp_error(
    frames: &[Tensor],
    flows: &[FlowField],
    occs: &[OcclusionMask],
    window: usize,
) -> Result<f64> {
    let detached: Vec<Tensor> = frames.iter().map(|f| f.detach()).collect();
    Ok(objective(&detached, flows, occs, window)?.item())
}

struct PlaneDims {
    channels: usize,
    width: usize,
    height: usize,
}

/// Normalized SSD of one (possibly truncated) tile of `a` against its
/// displaced position in `b`, minimized over the search square; ties
/// break toward the smallest displacement norm, then row-major order.
fn best_tile_displacement(
    a: &[f64],
    b: &[f64],
    dims: &PlaneDims,
    (tx, ty): (usize, usize),
    block: usize,
    radius: isize,
) -> (isize, isize) {
    let (w, h, plane) = (dims.width, dims.height, dims.width * dims.height);
    let tile_w = block.min(w - tx);
    let tile_h = block.min(h - ty);
    let mut best: Option<(f64, isize, isize)> = None;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let mut ssd = 0.0;
            let mut overlap = 0usize;
            for y in ty..ty + tile_h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in tx..tx + tile_w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    overlap += 1;
                    let src = y * w + x;
                    let dst = sy as usize * w + sx as usize;
                    for ch in 0..dims.channels {
                        let d = a[ch * plane + src] - b[ch * plane + dst];
                        ssd += d * d;
                    }
                }
            }
            if overlap == 0 {
                continue;
            }
            let cost = ssd / overlap as f64;
            let better = match &best {
                None => true,
                Some((bc, bdx, bdy)) => {
                    cost < *bc || (cost == *bc && dx * dx + dy * dy < bdx * bdx + bdy * bdy)
                }
            };
            if better {
                best = Some((cost, dx, dy));
            }
        }
    }
    let (_, dx, dy) = best.expect("a zero displacement always overlaps");
    (dx, dy)
}

/// Exhaustive block-matching flow estimation.
///
/// Frame `a` is tiled into `block`-sized squares (tiles overhanging the
/// right/bottom edge are truncated to the frame). Each tile's SSD against
/// frame `b` is scanned over every integer displacement within
/// `±radius`, normalized by the number of overlapping pixels; the
/// minimizing displacement is assigned to every pixel of the tile. Tile
/// rows are scanned in parallel up to the `TEMPOFLOW_THREADS` cap; tiles
/// are independent, so the result does not depend on the worker count.
pub fn block_match_flow(
    frame_a: &Tensor,
    frame_b: &Tensor,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    contract!(block >= 1 && radius >= 1, "block and radius must be >= 1");
    contract!(
        frame_a.shape() == frame_b.shape() && frame_a.shape().len() == 3,
        "block matching needs two [C,H,W] frames of equal shape"
    );
    let (c, h, w) = (frame_a.shape()[0], frame_a.shape()[1], frame_a.shape()[2]);
    contract!(
        w >= block && h >= block,
        "frame {w}x{h} is smaller than one {block}x{block} block"
    );
    let dims = PlaneDims {
        channels: c,
        width: w,
        height: h,
    };
    let r = radius as isize;
    let tile_rows: Vec<usize> = (0..h).step_by(block).collect();

    let row_results: Vec<(usize, Vec<(isize, isize)>)> = frame_a.with_data(|a| {
        frame_b.with_data(|b| {
            let scan_row = |ty: usize| -> (usize, Vec<(isize, isize)>) {
                let picks = (0..w)
                    .step_by(block)
                    .map(|tx| best_tile_displacement(a, b, &dims, (tx, ty), block, r))
                    .collect();
                (ty, picks)
            };
            let workers = crate::worker_count().min(tile_rows.len()).max(1);
            if workers <= 1 {
                tile_rows.iter().map(|&ty| scan_row(ty)).collect()
            } else {
                let chunk = tile_rows.len().div_ceil(workers);
                std::thread::scope(|scope| {
                    let handles: Vec<_> = tile_rows
                        .chunks(chunk)
                        .map(|rows| scope.spawn(|| rows.iter().map(|&ty| scan_row(ty)).collect::<Vec<_>>()))
                        .collect();
                    handles
                        .into_iter()
                        .flat_map(|handle| handle.join().expect("scan worker panicked"))
                        .collect()
                })
            }
        })
    });

    let mut vectors = vec![[0.0, 0.0]; w * h];
    for (ty, picks) in row_results {
        let tile_h = block.min(h - ty);
        for (i, (dx, dy)) in picks.iter().enumerate() {
            let tx = i * block;
            let tile_w = block.min(w - tx);
            for y in ty..ty + tile_h {
                for x in tx..tx + tile_w {
                    vectors[y * w + x] = [*dx as f64, *dy as f64];
                }
            }
        }
    }
    FlowField::new(w, h, vectors)
}

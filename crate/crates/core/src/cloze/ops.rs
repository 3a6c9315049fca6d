//! The four option-creation operations plus resize/crop preprocessing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClozeConfig, ClozeError, IndexPair, RotationAngle, SUBCLIPS, TILE_GRID};
use crate::video::{Clip, VideoTensor};

/// Rotates every frame clockwise; temporal order is untouched.
/// Requires a square clip so extents are preserved.
pub fn op_spatial_rotation(clip: &Clip, angle: RotationAngle) -> Result<Clip, ClozeError> {
    let (t_n, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    if h != w {
        return Err(ClozeError::NonSquare { height: h, width: w });
    }
    let n = h;
    let mut out = clip.clone();
    let src = clip.data();
    let dst = out.data_mut();
    let plane = n * n * c;
    for t in 0..t_n {
        let s = &src[t * plane..(t + 1) * plane];
        let d = &mut dst[t * plane..(t + 1) * plane];
        for y in 0..n {
            for x in 0..n {
                // Clockwise rotation source coordinates.
                let (sy, sx) = match angle {
                    RotationAngle::Deg90 => (n - 1 - x, y),
                    RotationAngle::Deg180 => (n - 1 - y, n - 1 - x),
                    RotationAngle::Deg270 => (x, n - 1 - y),
                };
                let si = (sy * n + sx) * c;
                let di = (y * n + x) * c;
                d[di..di + c].copy_from_slice(&s[si..si + c]);
            }
        }
    }
    Ok(out)
}

/// Swaps two of the four 2x2-grid tiles in every frame.
/// Requires even extents so tiles are equal-sized.
pub fn op_spatial_permutation(clip: &Clip, tiles: IndexPair) -> Result<Clip, ClozeError> {
    let (t_n, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ClozeError::OddExtents { height: h, width: w });
    }
    let (th, tw) = (h / TILE_GRID.0, w / TILE_GRID.1);
    let tile_origin = |tile: usize| -> (usize, usize) {
        (tile / TILE_GRID.1 * th, tile % TILE_GRID.1 * tw)
    };
    let (ay, ax) = tile_origin(tiles.first());
    let (by, bx) = tile_origin(tiles.second());
    let mut out = clip.clone();
    let data = out.data_mut();
    let row_stride = w * c;
    let plane = h * row_stride;
    for t in 0..t_n {
        for dy in 0..th {
            let a_row = t * plane + (ay + dy) * row_stride + ax * c;
            let b_row = t * plane + (by + dy) * row_stride + bx * c;
            let run = tw * c;
            // Tiles never overlap, so split the borrow around the gap.
            let (lo, hi) = if a_row < b_row { (a_row, b_row) } else { (b_row, a_row) };
            let (head, tail) = data.split_at_mut(hi);
            head[lo..lo + run].swap_with_slice(&mut tail[..run]);
        }
    }
    Ok(out)
}

/// Swaps two of the four equal-length sub-clips.
pub fn op_temporal_adjacent(clip: &Clip, subclips: IndexPair) -> Result<Clip, ClozeError> {
    let t_n = clip.frames();
    if t_n % SUBCLIPS != 0 {
        return Err(ClozeError::BadClipLength { len: t_n });
    }
    let sub_len = t_n / SUBCLIPS;
    let frame_stride = clip.height() * clip.width() * clip.channels();
    let block = sub_len * frame_stride;
    let mut out = clip.clone();
    let data = out.data_mut();
    let a = subclips.first() * block;
    let b = subclips.second() * block;
    let (head, tail) = data.split_at_mut(b);
    head[a..a + block].swap_with_slice(&mut tail[..block]);
    Ok(out)
}

/// Remote start positions: at least `d` frames before the span or after it.
/// Returned as (left, right) inclusive ranges of feasible clip starts.
#[allow(clippy::type_complexity)]
pub fn feasible_remote_starts(
    frame_count: usize,
    span_start: usize,
    span_len: usize,
    clip_len: usize,
    remote_dist: usize,
) -> (Option<(usize, usize)>, Option<(usize, usize)>) {
    // Left: clip [s, s+k) must end at least d frames before span_start.
    let left = span_start
        .checked_sub(clip_len + remote_dist)
        .map(|hi| (0, hi));
    // Right: clip must start at least d frames after the span end.
    let right_lo = span_start + span_len + remote_dist;
    let right = (right_lo + clip_len <= frame_count).then(|| (right_lo, frame_count - clip_len));
    (left, right)
}

/// Extracts a raw k-frame clip at least `remote_dist` frames away from the
/// span, uniform over all feasible starts on both sides. Returns the clip
/// and its signed offset from the span start.
pub fn op_temporal_remote(
    video: &VideoTensor,
    span_start: usize,
    config: &ClozeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Clip, i64), ClozeError> {
    let k = config.clip_len;
    let span_len = config.span();
    let (left, right) = feasible_remote_starts(
        video.frame_count(),
        span_start,
        span_len,
        k,
        config.remote_dist,
    );
    let count = |r: Option<(usize, usize)>| r.map_or(0, |(lo, hi)| hi - lo + 1);
    let total = count(left) + count(right);
    if total == 0 {
        return Err(ClozeError::RemoteInfeasible {
            video_id: video.video_id().to_string(),
            span_start,
            span_end: span_start + span_len,
            remote_dist: config.remote_dist,
            clip_len: k,
        });
    }
    let draw = rng.gen_range(0..total);
    let start = match left {
        Some((lo, hi)) if draw <= hi - lo => lo + draw,
        _ => {
            let (lo, _) = right.expect("draw beyond left range implies right exists");
            lo + draw - count(left)
        }
    };
    let clip = video.extract_clip(start, k)?;
    Ok((clip, start as i64 - span_start as i64))
}

/// Bilinear resize of one H×W×C u8 frame using the half-pixel convention,
/// rounding half up. Identity extents return an exact copy.
fn resize_frame(
    src: &[u8],
    (sh, sw): (usize, usize),
    channels: usize,
    (dh, dw): (usize, usize),
) -> Vec<u8> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let mut out = vec![0u8; dh * dw * channels];
    let scale_y = sh as f32 / dh as f32;
    let scale_x = sw as f32 / dw as f32;
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f32;
            for ch in 0..channels {
                let p = |yy: usize, xx: usize| src[(yy * sw + xx) * channels + ch] as f32;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                out[(y * dw + x) * channels + ch] = (v + 0.5) as u8;
            }
        }
    }
    out
}

/// Bilinearly resizes every frame to the given extents.
pub fn resize_clip(clip: &Clip, target: (usize, usize)) -> Clip {
    let (t_n, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    if (h, w) == target {
        return clip.clone();
    }
    let mut data = Vec::with_capacity(t_n * target.0 * target.1 * c);
    for t in 0..t_n {
        data.extend_from_slice(&resize_frame(clip.frame(t), (h, w), c, target));
    }
    Clip::new(t_n, target.0, target.1, c, data).expect("resize extents are positive")
}

fn crop_clip(clip: &Clip, top: usize, left: usize, crop: (usize, usize)) -> Result<Clip, ClozeError> {
    let (t_n, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    if top + crop.0 > h || left + crop.1 > w {
        return Err(ClozeError::CropBounds {
            crop,
            extents: (h, w),
            offset: (top, left),
        });
    }
    let mut data = Vec::with_capacity(t_n * crop.0 * crop.1 * c);
    for t in 0..t_n {
        let frame = clip.frame(t);
        for y in 0..crop.0 {
            let row = ((top + y) * w + left) * c;
            data.extend_from_slice(&frame[row..row + crop.1 * c]);
        }
    }
    Clip::new(t_n, crop.0, crop.1, c, data).map_err(ClozeError::Video)
}

/// Draws the shared crop window: top uniform over [0, rs_h - crop_h],
/// then left uniform over [0, rs_w - crop_w].
pub fn sample_crop_window(config: &ClozeConfig, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let top = rng.gen_range(0..=config.resize.0 - config.crop.0);
    let left = rng.gen_range(0..=config.resize.1 - config.crop.1);
    (top, left)
}

/// Resizes a clip then applies an already-drawn crop window.
pub fn apply_resize_crop(
    clip: &Clip,
    config: &ClozeConfig,
    window: (usize, usize),
) -> Result<Clip, ClozeError> {
    crop_clip(&resize_clip(clip, config.resize), window.0, window.1, config.crop)
}

/// Draws one crop window and applies resize+crop to every clip of an item.
pub fn resize_and_crop(
    clips: &[Clip],
    config: &ClozeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Clip>, (usize, usize)), ClozeError> {
    let window = sample_crop_window(config, rng);
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        out.push(apply_resize_crop(clip, config, window)?);
    }
    Ok((out, window))
}

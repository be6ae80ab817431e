//! Binary PPM (P6) overlays of saliency maps on clip frames.

use crate::eb::SaliencySequence;
use crate::error::{Error, Result};
use crate::forward::Clip;
use crate::grounding::upsample_nearest;
use crate::tensor::Tensor;

const RED: [f64; 3] = [255.0, 0.0, 0.0];
const BLUE: [f64; 3] = [0.0, 0.0, 255.0];

/// Encode an RGB buffer (`height * width * 3` bytes) as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Blend the grayscale of `frame` (`[C, H, W]`, values in `[0, 1]`) with a
/// signed map. Each pixel moves towards red (positive) or blue (negative)
/// with weight `alpha * |value| / scale`; a zero `scale` leaves the frame gray.
pub fn overlay(frame: &Tensor, map: &Tensor, scale: f64, alpha: f64) -> Result<Vec<u8>> {
    let &[c, h, w] = frame.shape() else {
        return Err(Error::ShapeMismatch(format!("frame must be [C, H, W], got {:?}", frame.shape())));
    };
    if map.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("map must be 2-D, got {:?}", map.shape())));
    }
    let up = upsample_nearest(map, h, w);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let gray = (0..c).map(|ch| frame.data()[ch * h * w + i]).sum::<f64>() / c as f64 * 255.0;
        let v = if scale > 0.0 { up.data()[i] / scale } else { 0.0 };
        let a = (v.abs() * alpha).clamp(0.0, 1.0);
        let target = if v >= 0.0 { RED } else { BLUE };
        for tc in target {
            rgb.push(((1.0 - a) * gray + a * tc).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(encode_ppm(w, h, &rgb))
}

/// One PPM per frame, normalized by the largest `|value|` in the sequence.
pub fn render_sequence(sal: &SaliencySequence, clip: &Clip, alpha: f64) -> Result<Vec<Vec<u8>>> {
    if sal.len() != clip.len() {
        return Err(Error::LengthMismatch { left: sal.len(), right: clip.len() });
    }
    let maps: Vec<Tensor> = (0..sal.len()).map(|t| sal.spatial(t)).collect();
    let scale = maps.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    maps.iter().enumerate().map(|(t, m)| overlay(&clip.frame(t), m, scale, alpha)).collect()
}

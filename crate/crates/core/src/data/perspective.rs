use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::vit::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Border {
    /// Coordinates are clamped into the frame.
    Clamp,
    /// Samples outside the frame read as zero.
    Zero,
}

/// Bilinear read at pixel-center coordinates (integer = pixel center).
pub(crate) fn sample_bilinear(img: &Image, x: f64, y: f64, c: usize, border: Border) -> f64 {
    let (w, h) = (img.width as f64, img.height as f64);
    let (x, y) = match border {
        Border::Clamp => (x.clamp(0.0, w - 1.0), y.clamp(0.0, h - 1.0)),
        Border::Zero => (x, y),
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let read = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
            0.0
        } else {
            f64::from(img.at(yi as usize, xi as usize, c))
        }
    };
    let top = read(x0, y0) * (1.0 - fx) + if fx > 0.0 { read(x0 + 1.0, y0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = read(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { read(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// A random projective warp: the image corners move by `displacements`
/// (top-left, top-right, bottom-right, bottom-left) and `homography` maps
/// output pixel coordinates to source coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Perspective {
    pub displacements: [(f64, f64); 4],
    pub homography: [f64; 9],
}

fn corners(h: usize, w: usize) -> [(f64, f64); 4] {
    let (r, b) = (w as f64 - 1.0, h as f64 - 1.0);
    [(0.0, 0.0), (r, 0.0), (r, b), (0.0, b)]
}

/// Solves the 8-parameter homography taking `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Result<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        rhs[r] = u;
        rhs[r + 1] = v;
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("degenerate perspective corners".into()))?;
    Ok([sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0])
}

/// Draws each corner displacement uniformly within
/// `±strength · min(H, W) / 4` per axis.
pub fn sample_perspective<R: Rng>(height: usize, width: usize, strength: f64, rng: &mut R) -> Result<Perspective> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("perspective strength {strength} not in [0, 1]")));
    }
    let bound = strength * height.min(width) as f64 / 4.0;
    let mut displacements = [(0.0, 0.0); 4];
    for d in &mut displacements {
        if bound > 0.0 {
            *d = (rng.gen_range(-bound..=bound), rng.gen_range(-bound..=bound));
        }
    }
    let from = corners(height, width);
    let to: [(f64, f64); 4] = std::array::from_fn(|i| (from[i].0 + displacements[i].0, from[i].1 + displacements[i].1));
    Ok(Perspective {
        displacements,
        homography: homography(&from, &to)?,
    })
}

/// Resamples `img` bilinearly through the warp, zero outside the frame.
pub fn warp_perspective(img: &Image, p: &Perspective) -> Image {
    let m = &p.homography;
    let mut out = Image::zeros(img.height, img.width, img.channels);
    out.label = img.label;
    for y in 0..img.height {
        for x in 0..img.width {
            let (xf, yf) = (x as f64, y as f64);
            let den = m[6] * xf + m[7] * yf + m[8];
            let u = (m[0] * xf + m[1] * yf + m[2]) / den;
            let v = (m[3] * xf + m[4] * yf + m[5]) / den;
            for c in 0..img.channels {
                out.set(y, x, c, sample_bilinear(img, u, v, c, Border::Zero).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

pub fn perspective_perturb<R: Rng>(img: &Image, strength: f64, rng: &mut R) -> Result<Image> {
    if strength == 0.0 {
        // identity warp: skip resampling so clean and zero-strength evals agree exactly
        return Ok(img.clone());
    }
    let p = sample_perspective(img.height, img.width, strength, rng)?;
    Ok(warp_perspective(img, &p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_of_fixed_corners_is_identity() {
        let c = corners(8, 6);
        let h = homography(&c, &c).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in h.iter().zip(eye) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn homography_maps_corners_exactly() {
        let from = corners(10, 10);
        let to = [(1.0, 0.5), (8.0, -1.0), (9.5, 9.0), (-0.5, 8.0)];
        let h = homography(&from, &to).unwrap();
        for ((x, y), (u, v)) in from.iter().zip(to) {
            let w = h[6] * x + h[7] * y + h[8];
            assert!(((h[0] * x + h[1] * y + h[2]) / w - u).abs() < 1e-9);
            assert!(((h[3] * x + h[4] * y + h[5]) / w - v).abs() < 1e-9);
        }
    }
}

use super::{ObjectSpec, SceneAnnotation, Shape, SQUARE_HALF, TRIANGLE_CIRCUM};
use crate::numcore::Tensor;

pub const BACKGROUND: f32 = 0.5;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `[3, R, R]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[objects, R, R]` fractional coverage.
    pub masks: Tensor<f32>,
}

fn inside(o: &ObjectSpec, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - o.x, py - o.y);
    match o.shape {
        Shape::Circle => dx * dx + dy * dy <= o.radius * o.radius,
        Shape::Square => {
            let h = o.radius * SQUARE_HALF;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => {
            // apex up; inradius is half the circumradius
            let r = o.radius * TRIANGLE_CIRCUM;
            let s3 = 3f64.sqrt();
            dy <= r / 2.0 && s3 * dx - dy <= r && -s3 * dx - dy <= r
        }
    }
}

/// Rasterizes a scene with 4×4 supersampling over a mid-gray background.
pub fn render(scene: &SceneAnnotation, resolution: usize) -> Rendered {
    let r = resolution;
    let n = scene.objects.len();
    let mut masks = vec![0f32; n * r * r];
    let step = 1.0 / (r * SUPERSAMPLE) as f64;
    let per_sample = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for (k, o) in scene.objects.iter().enumerate() {
        let br = o.bounding_radius();
        let lo_x = ((o.x - br) * r as f64).floor().max(0.0) as usize;
        let hi_x = (((o.x + br) * r as f64).ceil() as usize).min(r);
        let lo_y = ((o.y - br) * r as f64).floor().max(0.0) as usize;
        let hi_y = (((o.y + br) * r as f64).ceil() as usize).min(r);
        let plane = &mut masks[k * r * r..(k + 1) * r * r];
        for py in lo_y..hi_y {
            for px in lo_x..hi_x {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (px * SUPERSAMPLE + sx) as f64 * step + step / 2.0;
                        let y = (py * SUPERSAMPLE + sy) as f64 * step + step / 2.0;
                        hits += inside(o, x, y) as usize;
                    }
                }
                plane[py * r + px] = hits as f32 * per_sample;
            }
        }
    }
    let mut image = vec![BACKGROUND; 3 * r * r];
    for p in 0..r * r {
        let mut covered = 0f32;
        let mut rgb = [0f32; 3];
        for (k, o) in scene.objects.iter().enumerate() {
            let a = masks[k * r * r + p];
            if a > 0.0 {
                covered += a;
                let c = o.color.rgb();
                for ch in 0..3 {
                    rgb[ch] += a * c[ch];
                }
            }
        }
        if covered > 0.0 {
            let bg = (1.0 - covered).max(0.0);
            for ch in 0..3 {
                image[ch * r * r + p] = (bg * BACKGROUND + rgb[ch]).clamp(0.0, 1.0);
            }
        }
    }
    Rendered {
        image: Tensor::new(&[3, r, r], image).expect("sized"),
        masks: Tensor::new(&[n, r, r], masks).expect("sized"),
    }
}

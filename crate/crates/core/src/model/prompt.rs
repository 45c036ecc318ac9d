use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::rng;

/// Positive point prompts as `(row, col)` pixel coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<(usize, usize)>,
}

/// Prompt heatmap at patch resolution, row-major over the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptHeatmap {
    pub grid: usize,
    pub values: Vec<f64>,
}

/// Gaussian bump per point on the patch grid, max-combined and scaled to peak 1.
///
/// Points are snapped to the patch that contains them, so every bump peaks
/// at exactly one cell.
pub fn make_heatmap(prompts: &PromptSet, image_size: usize, grid: usize, sigma: f64) -> Result<PromptHeatmap> {
    if prompts.points.is_empty() {
        return Err(Error::Validation("heatmap needs at least one prompt point".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!("heatmap sigma must be > 0, got {sigma}")));
    }
    if grid == 0 || image_size % grid != 0 {
        return Err(Error::Validation(format!("grid {grid} does not tile image {image_size}")));
    }
    let patch = image_size / grid;
    let mut values = vec![0.0f64; grid * grid];
    let mut cells = Vec::with_capacity(prompts.points.len());
    for &(r, c) in &prompts.points {
        if r >= image_size || c >= image_size {
            return Err(Error::Bounds(format!(
                "prompt ({r}, {c}) outside {image_size}x{image_size} image"
            )));
        }
        cells.push(((r / patch) as f64, (c / patch) as f64));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in 0..grid {
        for j in 0..grid {
            let v = cells
                .iter()
                .map(|&(pr, pc)| {
                    let d2 = (i as f64 - pr).powi(2) + (j as f64 - pc).powi(2);
                    (-d2 * inv).exp()
                })
                .fold(0.0, f64::max);
            values[i * grid + j] = v;
        }
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    for v in values.iter_mut() {
        *v /= peak;
    }
    Ok(PromptHeatmap { grid, values })
}

/// `k` distinct foreground pixels, partial Fisher-Yates over the mask's
/// foreground indices in raster order.
pub fn sample_prompts(mask: &Mask, k: usize, seed: u64) -> Result<PromptSet> {
    let mut fg: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
    if fg.is_empty() {
        return Err(Error::Validation("cannot sample prompts from an empty mask".into()));
    }
    if k > fg.len() {
        return Err(Error::Validation(format!(
            "{k} prompts requested from a mask of {} pixels",
            fg.len()
        )));
    }
    let mut r = rng::stream(&[rng::tag::PROMPTS, seed]);
    for i in 0..k {
        let j = r.random_range(i..fg.len());
        fg.swap(i, j);
    }
    let points = fg[..k].iter().map(|&i| (i / mask.width, i % mask.width)).collect();
    Ok(PromptSet { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_center_point_is_one_hot_for_small_sigma() {
        // 8×8 grid of 4-pixel patches; pixel (17, 18) is in cell (4, 4)
        let p = PromptSet { points: vec![(17, 18)] };
        let h = make_heatmap(&p, 32, 8, 0.05).unwrap();
        for (i, &v) in h.values.iter().enumerate() {
            if i == 4 * 8 + 4 {
                assert_eq!(v, 1.0);
            } else {
                assert!(v < 1e-50);
            }
        }
    }

    #[test]
    fn coincident_points_match_single() {
        let one = PromptSet { points: vec![(9, 20)] };
        let two = PromptSet { points: vec![(9, 20), (9, 20)] };
        assert_eq!(make_heatmap(&one, 32, 8, 1.0).unwrap(), make_heatmap(&two, 32, 8, 1.0).unwrap());
    }

    #[test]
    fn distant_points_compose_by_max() {
        let a = PromptSet { points: vec![(2, 3)] };
        let b = PromptSet { points: vec![(27, 29)] };
        let ab = PromptSet { points: vec![(2, 3), (27, 29)] };
        let ha = make_heatmap(&a, 32, 8, 1.0).unwrap();
        let hb = make_heatmap(&b, 32, 8, 1.0).unwrap();
        let hab = make_heatmap(&ab, 32, 8, 1.0).unwrap();
        for i in 0..64 {
            assert_eq!(hab.values[i], ha.values[i].max(hb.values[i]));
        }
        assert_eq!(hab.values.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn heatmap_errors() {
        let out = PromptSet { points: vec![(32, 0)] };
        assert!(matches!(make_heatmap(&out, 32, 8, 1.0), Err(Error::Bounds(_))));
        let none = PromptSet { points: vec![] };
        assert!(make_heatmap(&none, 32, 8, 1.0).is_err());
        let ok = PromptSet { points: vec![(0, 0)] };
        assert!(make_heatmap(&ok, 32, 8, 0.0).is_err());
    }

    #[test]
    fn forced_and_deterministic_sampling() {
        let mut m = Mask::empty(5, 5);
        m.data[7] = true;
        assert_eq!(sample_prompts(&m, 1, 3).unwrap().points, vec![(1, 2)]);
        let mut big = Mask::empty(6, 6);
        for i in 3..20 {
            big.data[i] = true;
        }
        let a = sample_prompts(&big, 3, 42).unwrap();
        assert_eq!(a, sample_prompts(&big, 3, 42).unwrap());
        let mut uniq = a.points.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
        assert!(a.points.iter().all(|&(r, c)| big.get(r, c)));
        assert!(sample_prompts(&Mask::empty(3, 3), 1, 0).is_err());
        assert!(sample_prompts(&m, 2, 0).is_err());
    }

    #[test]
    fn two_pixel_mask_is_fair() {
        let mut m = Mask::empty(4, 4);
        m.data[5] = true;
        m.data[10] = true;
        let hits = (0..1000)
            .filter(|&s| sample_prompts(&m, 1, s).unwrap().points[0] == (1, 1))
            .count();
        let freq = hits as f64 / 1000.0;
        assert!((freq - 0.5).abs() <= 0.05, "{freq}");
    }
}

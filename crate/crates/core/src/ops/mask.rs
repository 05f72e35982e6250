use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dft::mirror_position;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Fraction of rows always kept around the center by line masks.
const CENTRAL_BAND_FRACTION: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    RandomUniform,
    CenterWeightedLines,
    Box,
}

impl MaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::RandomUniform => "random-uniform",
            MaskKind::CenterWeightedLines => "center-weighted-lines",
            MaskKind::Box => "box",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-uniform" => Ok(MaskKind::RandomUniform),
            "center-weighted-lines" => Ok(MaskKind::CenterWeightedLines),
            "box" => Ok(MaskKind::Box),
            other => Err(Error::param(format!("unknown mask kind {other:?}"))),
        }
    }
}

/// Binary `size × size` sampling mask.
///
/// * `random-uniform`: exactly `round(keep · size²)` ones at random positions.
/// * `center-weighted-lines`: full rows, symmetric about the center row
///   (`size / 2`). A central band of at least `⌈8% · size⌉` rows is always
///   kept; further row pairs are drawn without replacement with a weight
///   that decays with distance from the center, until at least
///   `round(keep · size)` rows are kept.
/// * `box`: a centered square covering about `keep` of the area.
pub fn make_sampling_mask(kind: MaskKind, keep_fraction: f64, size: usize, seed: u64) -> Result<Tensor2D> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::param(format!("keep_fraction must lie in (0, 1], got {keep_fraction}")));
    }
    if size == 0 {
        return Err(Error::param("mask size must be positive"));
    }
    let total = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; total];
    match kind {
        MaskKind::RandomUniform => {
            let count = ((keep_fraction * total as f64).round() as usize).clamp(1, total);
            for k in index::sample(&mut rng, total, count) {
                data[k] = 1.0;
            }
        }
        MaskKind::CenterWeightedLines => {
            for row in line_rows(keep_fraction, size, &mut rng)? {
                data[row * size..(row + 1) * size].fill(1.0);
            }
        }
        MaskKind::Box => {
            let side = ((size as f64 * keep_fraction.sqrt()).round() as usize).clamp(1, size);
            let start = size / 2 - side / 2;
            for i in start..start + side {
                data[i * size + start..i * size + start + side].fill(1.0);
            }
        }
    }
    Tensor2D::new(size, size, data)
}

fn line_rows(keep_fraction: f64, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let center = size / 2;
    let target = ((keep_fraction * size as f64).round() as usize).clamp(1, size);
    let band = (CENTRAL_BAND_FRACTION * size as f64).ceil() as usize;
    let half_band = (band / 2).min(center).min(size - 1 - center);

    let mut kept = vec![false; size];
    kept[center - half_band..=center + half_band].fill(true);
    let mut count = 2 * half_band + 1;

    // Each candidate is a set of rows closed under mirroring about the center.
    let mut candidates: Vec<(usize, Vec<usize>)> = Vec::new();
    for d in half_band + 1..=size / 2 {
        let lo = (center + size - d) % size;
        let hi = (center + d) % size;
        let rows = if lo == hi { vec![lo] } else { vec![lo, hi] };
        if rows.iter().all(|&r| !kept[r]) && !candidates.iter().any(|(_, c)| c.contains(&lo)) {
            candidates.push((d, rows));
        }
    }
    let scale = size as f64 / 4.0;
    let mut weights: Vec<f64> = candidates
        .iter()
        .map(|(d, _)| (-(*d as f64 / scale).powi(2)).exp().max(1e-12))
        .collect();
    while count < target && weights.iter().any(|&w| w > 0.0) {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap();
        for (k, &w) in weights.iter().enumerate() {
            if w > 0.0 && u < w {
                pick = k;
                break;
            }
            u -= w;
        }
        weights[pick] = 0.0;
        for &r in &candidates[pick].1 {
            kept[r] = true;
            count += 1;
        }
    }
    Ok((0..size).filter(|&r| kept[r]).collect())
}

/// Union of a centered spectrum mask with its conjugate mirror.
pub fn symmetrize_spectrum_mask(mask: &Tensor2D) -> Result<Tensor2D> {
    let (h, w) = mask.shape();
    Tensor2D::from_fn(h, w, |i, j| {
        let (mi, mj) = mirror_position(i, j, h, w);
        mask.get(i, j).max(mask.get(mi, mj))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(m: &Tensor2D) -> usize {
        m.data().iter().filter(|&&v| v == 1.0).count()
    }

    fn kept_rows(m: &Tensor2D) -> Vec<usize> {
        (0..m.height()).filter(|&i| m.get(i, 0) == 1.0).collect()
    }

    #[test]
    fn full_keep_is_all_ones() {
        for kind in [MaskKind::RandomUniform, MaskKind::CenterWeightedLines, MaskKind::Box] {
            let m = make_sampling_mask(kind, 1.0, 16, 3).unwrap();
            assert_eq!(ones(&m), 256, "{kind}");
        }
    }

    #[test]
    fn random_uniform_exact_count() {
        let m = make_sampling_mask(MaskKind::RandomUniform, 0.25, 64, 7).unwrap();
        assert_eq!(ones(&m), 1024);
    }

    #[test]
    fn lines_contain_central_band_and_are_symmetric() {
        for seed in 0..10 {
            let m = make_sampling_mask(MaskKind::CenterWeightedLines, 0.25, 64, seed).unwrap();
            let rows = kept_rows(&m);
            // ⌈0.08·64⌉ = 6 rows; the symmetric band around row 32 spans 29..=35
            for r in 29..=35 {
                assert!(rows.contains(&r), "seed {seed}: band row {r} missing");
            }
            for &r in &rows {
                assert!(m.data()[r * 64..(r + 1) * 64].iter().all(|&v| v == 1.0));
                assert!(rows.contains(&((64 + 64 - r) % 64)), "row {r} lacks its mirror");
            }
            assert!((16..=17).contains(&rows.len()), "kept {} rows", rows.len());
        }
    }

    #[test]
    fn lines_favor_the_center() {
        let mut near = 0;
        let mut far = 0;
        for seed in 0..50 {
            let m = make_sampling_mask(MaskKind::CenterWeightedLines, 0.25, 64, seed).unwrap();
            for r in kept_rows(&m) {
                let d = (r as isize - 32).unsigned_abs();
                if (4..=12).contains(&d) {
                    near += 1;
                } else if d >= 20 {
                    far += 1;
                }
            }
        }
        assert!(near > 4 * far, "near {near} far {far}");
    }

    #[test]
    fn bad_fraction_rejected() {
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                make_sampling_mask(MaskKind::Box, f, 8, 0),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn symmetrize_is_closed_under_mirroring() {
        let m = make_sampling_mask(MaskKind::RandomUniform, 0.3, 9, 1).unwrap();
        let s = symmetrize_spectrum_mask(&m).unwrap();
        assert!(ones(&s) >= ones(&m));
        assert_eq!(symmetrize_spectrum_mask(&s).unwrap(), s);
    }
}

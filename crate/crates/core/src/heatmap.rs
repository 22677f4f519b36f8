//! Keypoint heatmaps: ground-truth synthesis, decoding, and metrics.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gaussian spread in heatmap cells.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Annotations at or below this confidence are treated as missing.
pub const VALID_CONFIDENCE: f64 = 0.3;

/// One annotated person in one frame; coordinates are input pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub clip: String,
    pub frame: usize,
    pub person: usize,
    /// `[x, y, confidence]` per landmark.
    pub kps: Vec<[f64; 3]>,
}

/// Heatmap resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    /// Four cells per token-grid cell (two stride-2 upsamplings).
    pub fn for_tokens(h: usize, w: usize) -> Self {
        Self { height: 4 * h, width: 4 * w }
    }

    /// Map a pixel coordinate in a `width×height` frame to continuous grid
    /// coordinates, aligning pixel and cell centres.
    pub fn from_pixels(&self, x: f64, y: f64, frame_w: usize, frame_h: usize) -> (f64, f64) {
        let sx = self.width as f64 / frame_w as f64;
        let sy = self.height as f64 / frame_h as f64;
        ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5)
    }
}

/// `L` landmark maps with a validity flag per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet<F> {
    /// `L×H×W`
    pub maps: Tensor<F>,
    pub valid: Vec<bool>,
}

impl<F: Scalar> HeatmapSet<F> {
    pub fn empty(landmarks: usize, grid: Grid) -> Self {
        Self { maps: Tensor::zeros(&[landmarks, grid.height, grid.width]), valid: vec![false; landmarks] }
    }

    pub fn landmarks(&self) -> usize {
        self.valid.len()
    }

    pub fn grid(&self) -> Grid {
        let d = self.maps.dims();
        Grid { height: d[1], width: d[2] }
    }

    pub fn channel(&self, l: usize) -> &[F] {
        let cells = self.maps.len() / self.landmarks();
        &self.maps.data()[l * cells..(l + 1) * cells]
    }

    fn channel_mut(&mut self, l: usize) -> &mut [F] {
        let cells = self.maps.len() / self.landmarks();
        &mut self.maps.data_mut()[l * cells..(l + 1) * cells]
    }

    /// Wrap a raw network output, clamping it into `[0, 1]`; every channel is
    /// marked valid.
    pub fn from_prediction(raw: &Tensor<F>) -> Result<Self> {
        if raw.rank() != 3 {
            return Err(Error::shape(format!("heatmaps must be L×H×W, got {:?}", raw.dims())));
        }
        Ok(Self { maps: raw.map(|v| v.max(F::zero()).min(F::one())), valid: vec![true; raw.dims()[0]] })
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.maps.dims() != other.maps.dims() {
            return Err(Error::shape(format!(
                "heatmap sets differ in shape: {:?} vs {:?}",
                self.maps.dims(),
                other.maps.dims()
            )));
        }
        Ok(())
    }
}

/// `exp(-((u-x)² + (v-y)²) / 2σ²)` centred on the grid cell nearest to
/// `(x, y)`, so the peak is exactly 1. `None` when that cell is off the grid.
pub fn render_gaussian<F: Scalar>(x: f64, y: f64, sigma: f64, grid: Grid) -> Option<Tensor<F>> {
    let (cx, cy) = (x.round(), y.round());
    if !(cx >= 0.0 && cy >= 0.0 && cx < grid.width as f64 && cy < grid.height as f64) {
        return None;
    }
    let denom = 2.0 * sigma * sigma;
    Some(Tensor::from_fn(&[grid.height, grid.width], |i| {
        let u = (i % grid.width) as f64 - cx;
        let v = (i / grid.width) as f64 - cy;
        F::lit((-(u * u + v * v) / denom).exp())
    }))
}

/// Heatmaps for one person in one frame. Landmarks with low confidence or
/// off-grid positions get an all-zero map and are marked invalid.
pub fn render_person<F: Scalar>(
    kps: &[[f64; 3]],
    frame_w: usize,
    frame_h: usize,
    grid: Grid,
    sigma: f64,
) -> HeatmapSet<F> {
    let mut set = HeatmapSet::empty(kps.len(), grid);
    for (l, &[x, y, conf]) in kps.iter().enumerate() {
        if conf <= VALID_CONFIDENCE {
            continue;
        }
        let (u, v) = grid.from_pixels(x, y, frame_w, frame_h);
        if let Some(map) = render_gaussian::<F>(u, v, sigma, grid) {
            set.channel_mut(l).copy_from_slice(map.data());
            set.valid[l] = true;
        }
    }
    set
}

/// Per-landmark mean over the frames in which that landmark is valid.
pub fn time_average<F: Scalar>(frames: &[HeatmapSet<F>]) -> Result<HeatmapSet<F>> {
    let first = frames.first().ok_or_else(|| Error::shape("time_average of no frames"))?;
    let mut out = HeatmapSet::empty(first.landmarks(), first.grid());
    let mut counts = vec![0usize; first.landmarks()];
    for f in frames {
        first.check_compatible(f)?;
        for l in 0..f.landmarks() {
            if !f.valid[l] {
                continue;
            }
            counts[l] += 1;
            let src = f.channel(l);
            for (o, &v) in out.channel_mut(l).iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = F::one() / F::lit(c as f64);
            out.channel_mut(l).iter_mut().for_each(|v| *v = *v * inv);
            out.valid[l] = true;
        }
    }
    Ok(out)
}

/// Elementwise maximum over people; a landmark is valid if any person has it.
pub fn combine_multiperson<F: Scalar>(people: &[HeatmapSet<F>]) -> Result<HeatmapSet<F>> {
    let first = people.first().ok_or_else(|| Error::shape("combine_multiperson of nobody"))?;
    let mut out = first.clone();
    for p in &people[1..] {
        first.check_compatible(p)?;
        for (o, &v) in out.maps.data_mut().iter_mut().zip(p.maps.data()) {
            *o = o.max(v);
        }
        for (o, &v) in out.valid.iter_mut().zip(&p.valid) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Arg-max cell `(x, y)` of each channel, lowest row-major index on ties.
/// All-zero channels decode to `None`.
pub fn decode_keypoints<F: Scalar>(set: &HeatmapSet<F>) -> Vec<Option<(usize, usize)>> {
    let w = set.grid().width;
    (0..set.landmarks())
        .map(|l| {
            let ch = set.channel(l);
            if ch.iter().all(|v| v.is_zero()) {
                return None;
            }
            let mut best = 0;
            for (i, &v) in ch.iter().enumerate() {
                if v > ch[best] {
                    best = i;
                }
            }
            Some((best % w, best / w))
        })
        .collect()
}

/// Mean absolute error over the cells of channels valid in `gt`; zero when no
/// channel is valid.
pub fn heatmap_mae<F: Scalar>(pred: &HeatmapSet<F>, gt: &HeatmapSet<F>) -> Result<F> {
    pred.check_compatible(gt)?;
    let mut total = F::zero();
    let mut n = 0usize;
    for l in (0..gt.landmarks()).filter(|&l| gt.valid[l]) {
        for (&p, &t) in pred.channel(l).iter().zip(gt.channel(l)) {
            total = total + (p - t).abs();
        }
        n += gt.channel(l).len();
    }
    Ok(if n == 0 { F::zero() } else { total / F::lit(n as f64) })
}

/// Ground truth for a window of frames: people are max-combined per frame,
/// then frames are averaged.
pub fn clip_target<F: Scalar>(
    annotations: &[&KeypointAnnotation],
    frames: std::ops::Range<usize>,
    landmarks: usize,
    frame_w: usize,
    frame_h: usize,
    grid: Grid,
    sigma: f64,
) -> Result<HeatmapSet<F>> {
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let people: Vec<HeatmapSet<F>> = annotations
            .iter()
            .filter(|a| a.frame == f)
            .map(|a| {
                if a.kps.len() != landmarks {
                    return Err(Error::format(format!(
                        "annotation for clip {} frame {f} has {} landmarks, expected {landmarks}",
                        a.clip,
                        a.kps.len()
                    )));
                }
                Ok(render_person(&a.kps, frame_w, frame_h, grid, sigma))
            })
            .collect::<Result<_>>()?;
        if people.is_empty() {
            per_frame.push(HeatmapSet::empty(landmarks, grid));
        } else {
            per_frame.push(combine_multiperson(&people)?);
        }
    }
    time_average(&per_frame)
}

pub fn write_jsonl<W: Write>(mut out: W, annotations: &[KeypointAnnotation]) -> Result<()> {
    for a in annotations {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<KeypointAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a = serde_json::from_str(&line).map_err(|e| Error::format(format!("annotation line {}: {e}", i + 1)))?;
        out.push(a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const G56: Grid = Grid { height: 56, width: 56 };

    fn single(l: usize, x: f64, y: f64, grid: Grid) -> HeatmapSet<f64> {
        let mut s = HeatmapSet::empty(l, grid);
        let m = render_gaussian::<f64>(x, y, DEFAULT_SIGMA, grid).unwrap();
        s.channel_mut(0).copy_from_slice(m.data());
        s.valid[0] = true;
        s
    }

    #[test]
    fn gaussian_peak_and_neighbour() {
        let m = render_gaussian::<f64>(28.0, 28.0, 2.0, G56).unwrap();
        assert_eq!(m.data()[28 * 56 + 28], 1.0);
        assert!((m.data()[28 * 56 + 30] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((m.data()[28 * 56 + 30] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn gaussian_mass_matches_integral() {
        let m = render_gaussian::<f64>(28.0, 28.0, 2.0, G56).unwrap();
        let expect = 2.0 * std::f64::consts::PI * 4.0;
        assert!((m.sum() - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn off_grid_keypoint_is_invalid() {
        assert!(render_gaussian::<f64>(-3.0, 10.0, 2.0, G56).is_none());
        let set = render_person::<f64>(&[[500.0, 10.0, 1.0], [10.0, 10.0, 0.2]], 224, 224, G56, 2.0);
        assert_eq!(set.valid, vec![false, false]);
        assert!(set.maps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_mapping_finds_containing_cell() {
        let g = Grid { height: 8, width: 8 };
        for x in 0..32 {
            let (u, _) = g.from_pixels(x as f64, 0.0, 32, 32);
            assert_eq!(u.round() as usize, x / 4);
        }
    }

    #[test]
    fn time_average_examples() {
        let a = single(2, 10.0, 10.0, G56);
        let avg = time_average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(avg.valid, a.valid);
        assert!(avg.maps.max_abs_diff(&a.maps) < 1e-15);
        let b = single(2, 40.0, 40.0, G56);
        let avg = time_average(&[a.clone(), b.clone(), a, b]).unwrap();
        assert_eq!(avg.channel(0)[10 * 56 + 10], 0.5);
        assert_eq!(avg.channel(0)[40 * 56 + 40], 0.5);
        assert_eq!(avg.valid, vec![true, false]);
    }

    #[test]
    fn multiperson_examples() {
        let a = single(1, 10.0, 10.0, G56);
        assert_eq!(combine_multiperson(std::slice::from_ref(&a)).unwrap(), a);
        let b = single(1, 45.0, 45.0, G56);
        let c = combine_multiperson(&[a, b]).unwrap();
        assert_eq!(c.channel(0)[10 * 56 + 10], 1.0);
        assert_eq!(c.channel(0)[45 * 56 + 45], 1.0);
    }

    #[test]
    fn decode_examples() {
        let a = single(1, 17.0, 33.0, G56);
        assert_eq!(decode_keypoints(&a), vec![Some((17, 33))]);
        let uniform = HeatmapSet { maps: Tensor::full(&[1, 4, 4], 0.5f64), valid: vec![true] };
        assert_eq!(decode_keypoints(&uniform), vec![Some((0, 0))]);
        let zero = HeatmapSet::<f64>::empty(1, G56);
        assert_eq!(decode_keypoints(&zero), vec![None]);
    }

    #[test]
    fn mae_examples() {
        let a = single(1, 17.0, 33.0, G56);
        assert_eq!(heatmap_mae(&a, &a).unwrap(), 0.0);
        let shifted = HeatmapSet { maps: a.maps.map(|v| v + 0.01), valid: a.valid.clone() };
        assert!((heatmap_mae(&shifted, &a).unwrap() - 0.01).abs() < 1e-12);
        let none = HeatmapSet::<f64>::empty(1, G56);
        assert_eq!(heatmap_mae(&shifted, &none).unwrap(), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let anns = vec![KeypointAnnotation {
            clip: "c0".into(),
            frame: 3,
            person: 1,
            kps: vec![[1.0, 2.0, 1.0], [3.5, 4.0, 0.0]],
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &anns).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"clip":"c0","frame":3,"person":1,"kps":[[1.0,2.0,1.0]"#));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), anns);
        assert!(matches!(read_jsonl(&b"{oops\n"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn render_is_translation_equivariant(x in 8usize..40, y in 8usize..40, dx in 0usize..8, dy in 0usize..8) {
            let a = render_gaussian::<f64>(x as f64, y as f64, 2.0, G56).unwrap();
            let b = render_gaussian::<f64>((x + dx) as f64, (y + dy) as f64, 2.0, G56).unwrap();
            for v in 0..(56 - dy) {
                for u in 0..(56 - dx) {
                    prop_assert_eq!(a.data()[v * 56 + u], b.data()[(v + dy) * 56 + u + dx]);
                }
            }
        }

        #[test]
        fn combine_is_a_semilattice(xs in prop::collection::vec((0usize..16, 0usize..16), 3)) {
            let g = Grid { height: 16, width: 16 };
            let s: Vec<HeatmapSet<f64>> = xs.iter().map(|&(x, y)| single(1, x as f64, y as f64, g)).collect();
            let ab = combine_multiperson(&[s[0].clone(), s[1].clone()]).unwrap();
            let ba = combine_multiperson(&[s[1].clone(), s[0].clone()]).unwrap();
            prop_assert_eq!(&ab, &ba);
            let ab_c = combine_multiperson(&[ab.clone(), s[2].clone()]).unwrap();
            let bc = combine_multiperson(&[s[1].clone(), s[2].clone()]).unwrap();
            let a_bc = combine_multiperson(&[s[0].clone(), bc]).unwrap();
            prop_assert_eq!(ab_c, a_bc);
            prop_assert_eq!(combine_multiperson(&[ab.clone(), ab.clone()]).unwrap(), ab);
        }

        #[test]
        fn outputs_stay_in_unit_range(xs in prop::collection::vec((0usize..16, 0usize..16), 1..5)) {
            let g = Grid { height: 16, width: 16 };
            let s: Vec<HeatmapSet<f64>> = xs.iter().map(|&(x, y)| single(2, x as f64, y as f64, g)).collect();
            let t = time_average(&s).unwrap();
            let c = combine_multiperson(&s).unwrap();
            prop_assert!(t.maps.data().iter().chain(c.maps.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

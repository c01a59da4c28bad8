//! Input-gradient saliency: the derivative of a pre-softmax class score
//! with respect to the input pixels, collapsed across channels by the
//! maximum absolute value.

use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::raster::Raster;

/// Per-pixel nonnegative attribution map with the min/max recorded for
/// rendering.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Raster,
    pub class_index: usize,
    pub min: f64,
    pub max: f64,
}

impl SaliencyMap {
    /// Linear map of the raw values onto `[0, 1]` using the recorded
    /// min/max; a constant map renders as zeros.
    pub fn rendered(&self) -> Raster {
        let range = self.max - self.min;
        let mut out = self.values.clone();
        if range <= 0.0 {
            out.data_mut().iter_mut().for_each(|v| *v = 0.0);
        } else {
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v - self.min) / range);
        }
        out
    }
}

/// Gradient of the class score (pre-softmax logit) with respect to the
/// 3-channel network input, in eval mode.
pub fn input_gradient(
    net: &mut Network,
    input: &Array4<f64>,
    class_index: usize,
) -> Result<Array4<f64>> {
    if class_index > 1 {
        return Err(Error::Model(format!("class index {class_index} out of range")));
    }
    let (logits, _) = net.forward(input, Mode::Eval, None, true);
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for mut row in dlogits.outer_iter_mut() {
        row[class_index] = 1.0;
    }
    Ok(net.backward(dlogits))
}

/// Computes the saliency map of one patch: differentiate the chosen class
/// score, then take the per-pixel maximum of absolute channel gradients.
pub fn saliency_map(net: &mut Network, patch: &Raster, class_index: usize) -> Result<SaliencyMap> {
    let side = net.input_side;
    if patch.width() != side || patch.height() != side {
        return Err(Error::Geometry(format!(
            "patch is {}x{}, network expects {side}x{side}",
            patch.width(),
            patch.height()
        )));
    }
    let mut input = Array4::zeros((1, 3, side, side));
    for y in 0..side {
        for x in 0..side {
            let v = patch.get(x, y);
            input[(0, 0, y, x)] = v;
            input[(0, 1, y, x)] = v;
            input[(0, 2, y, x)] = v;
        }
    }
    let grad = input_gradient(net, &input, class_index)?;
    let mut values = Raster::new(side, side);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for y in 0..side {
        for x in 0..side {
            let g = grad[(0, 0, y, x)]
                .abs()
                .max(grad[(0, 1, y, x)].abs())
                .max(grad[(0, 2, y, x)].abs());
            min = min.min(g);
            max = max.max(g);
            values.set(x, y, g);
        }
    }
    Ok(SaliencyMap {
        values,
        class_index,
        min,
        max,
    })
}

/// Writes a panel image: one column per record, the patch on top and the
/// rendered saliency heatmap below it.
pub fn render_panel(patches: &[Raster], maps: &[SaliencyMap], out_path: &Path) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::Eval("panel needs at least one patch".into()));
    }
    if patches.len() != maps.len() {
        return Err(Error::Eval(format!(
            "panel has {} patches but {} maps",
            patches.len(),
            maps.len()
        )));
    }
    let side = patches[0].width();
    for (p, m) in patches.iter().zip(maps) {
        if p.width() != side || p.height() != side || m.values.width() != side {
            return Err(Error::Eval("panel tiles must share one side length".into()));
        }
    }
    let margin = 2usize;
    let cols = patches.len();
    let width = cols * side + (cols + 1) * margin;
    let height = 2 * side + 3 * margin;
    let mut canvas = ImageBuffer::<Luma<u8>, Vec<u8>>::from_pixel(
        width as u32,
        height as u32,
        Luma([32u8]),
    );
    let mut blit = |tile: &Raster, x0: usize, y0: usize| {
        for y in 0..side {
            for x in 0..side {
                let v = (tile.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([v]));
            }
        }
    };
    for (i, (patch, map)) in patches.iter().zip(maps).enumerate() {
        let x0 = margin + i * (side + margin);
        blit(patch, x0, margin);
        blit(&map.rendered(), x0, 2 * margin + side);
    }
    canvas
        .save(out_path)
        .map_err(|e| Error::image(out_path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_baseline;
    use crate::nn::{Flatten, Layer, Linear, Param};
    use ndarray::{ArrayD, IxDyn};

    fn flat_probe_net(side: usize, weights: &[f64]) -> Network {
        // flatten -> linear(3*side*side, 2); the class-0 column is the
        // probe weight vector, class 1 stays zero
        let f_in = 3 * side * side;
        let mut w = ArrayD::zeros(IxDyn(&[f_in, 2]));
        for (i, &v) in weights.iter().enumerate() {
            w[[i, 0]] = v;
        }
        let weight = Param::new("fc.weight", "fc", w);
        let bias = Param::new("fc.bias", "fc", ArrayD::zeros(IxDyn(&[2])));
        Network::from_layers(
            "baseline",
            side,
            vec![
                Layer::Flatten(Flatten::new()),
                Layer::Linear(Linear::new(weight, bias)),
            ],
        )
    }

    fn checker_patch(side: usize) -> Raster {
        let data: Vec<f64> = (0..side * side)
            .map(|i| ((i % 7) as f64) / 7.0)
            .collect();
        Raster::from_data(side, side, data)
    }

    #[test]
    fn constant_network_has_zero_map() {
        let mut net = build_baseline(16, 0);
        // zero the final layer: logits no longer depend on the input
        net.visit_params_mut(&mut |p| {
            if p.group == "fc3" {
                p.values.fill(0.0);
            }
        });
        let map = saliency_map(&mut net, &checker_patch(16), 0).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        assert!(map.rendered().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_map_saliency_is_abs_weight_max_over_channels() {
        let side = 4;
        let f_in = 3 * side * side;
        let weights: Vec<f64> = (0..f_in).map(|i| (i as f64 - 20.0) / 10.0).collect();
        let mut net = flat_probe_net(side, &weights);
        let map = saliency_map(&mut net, &checker_patch(side), 0).unwrap();
        let plane = side * side;
        for y in 0..side {
            for x in 0..side {
                let i = y * side + x;
                let expected = weights[i]
                    .abs()
                    .max(weights[plane + i].abs())
                    .max(weights[2 * plane + i].abs());
                assert!((map.values.get(x, y) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_final_weights_scales_raw_saliency() {
        let mut net = build_baseline(16, 4);
        let patch = checker_patch(16);
        let base = saliency_map(&mut net, &patch, 1).unwrap();
        let c = 3.5;
        net.visit_params_mut(&mut |p| {
            if p.group == "fc3" {
                p.values.mapv_inplace(|v| v * c);
            }
        });
        let scaled = saliency_map(&mut net, &patch, 1).unwrap();
        for (a, b) in base.values.data().iter().zip(scaled.values.data()) {
            assert!((b - c * a).abs() < 1e-9 * (1.0 + a.abs()), "{b} vs {}", c * a);
        }
    }

    #[test]
    fn saliency_is_deterministic() {
        let mut net = build_baseline(16, 5);
        let patch = checker_patch(16);
        let a = saliency_map(&mut net, &patch, 0).unwrap();
        let b = saliency_map(&mut net, &patch, 0).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn gradient_matches_finite_differences_on_small_net() {
        let side = 16;
        let mut net = build_baseline(side, 6);
        let patch = checker_patch(side);
        let mut input = Array4::zeros((1, 3, side, side));
        for y in 0..side {
            for x in 0..side {
                let v = patch.get(x, y);
                input[(0, 0, y, x)] = v;
                input[(0, 1, y, x)] = v;
                input[(0, 2, y, x)] = v;
            }
        }
        let grad = input_gradient(&mut net, &input, 1).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for &(c, y, x) in &[(0usize, 3usize, 4usize), (1, 7, 9), (2, 12, 1), (0, 15, 15)] {
            let mut plus = input.clone();
            plus[(0, c, y, x)] += h;
            let (lp, _) = net.forward(&plus, Mode::Eval, None, false);
            let mut minus = input.clone();
            minus[(0, c, y, x)] -= h;
            let (lm, _) = net.forward(&minus, Mode::Eval, None, false);
            let fd = (lp[(0, 1)] - lm[(0, 1)]) / (2.0 * h);
            let an = grad[(0, c, y, x)];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-10);
            assert!(rel < 1e-2, "({c},{y},{x}): fd {fd:.3e} vs {an:.3e}, rel {rel:.3e}");
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn panel_writes_expected_grid() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("panel.png");
        let mut net = build_baseline(16, 7);
        let patches: Vec<Raster> = (0..3).map(|_| checker_patch(16)).collect();
        let maps: Vec<SaliencyMap> = patches
            .iter()
            .map(|p| saliency_map(&mut net, p, 1).unwrap())
            .collect();
        render_panel(&patches, &maps, &out).unwrap();
        let img = image::open(&out).unwrap();
        let margin = 2u32;
        assert_eq!(img.width(), 3 * 16 + 4 * margin);
        assert_eq!(img.height(), 2 * 16 + 3 * margin);

        // degenerate panels error out
        assert!(render_panel(&[], &[], &out).is_err());
        assert!(render_panel(&patches[..2], &maps[..1], &out).is_err());

        // a single column works
        render_panel(&patches[..1], &maps[..1], &out).unwrap();
        let img = image::open(&out).unwrap();
        assert_eq!(img.width(), 16 + 2 * margin);
    }
}

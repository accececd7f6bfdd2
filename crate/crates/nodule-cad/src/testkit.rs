//! Brute-force reference oracles and a finite-difference gradient checker.
//!
//! Everything here is deliberately naive: nested loops, quadratic scans,
//! direct formula evaluation. The oracles share no code with the
//! implementation paths they validate. Gated behind the `testkit` feature,
//! which this crate's own test targets enable.

pub mod oracles {
    use crate::geom::BBox;
    use crate::tensor::Tensor;

    /// Nested-loop 2D convolution.
    pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv =
                                    input.data()[(ci * h + iy as usize) * w + ix as usize];
                                let kv = kernels.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Nested-loop 3D convolution.
    pub fn conv3d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Tensor {
        let s = input.shape();
        let (c_in, d, h, w) = (s[0], s[1], s[2], s[3]);
        let ks = kernels.shape();
        let (c_out, kd, kh, kw) = (ks[0], ks[2], ks[3], ks[4]);
        let od = (d + 2 * pad - kd) / stride + 1;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, od, oh, ow]);
        for co in 0..c_out {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iz < 0
                                            || iz >= d as isize
                                            || iy < 0
                                            || iy >= h as isize
                                            || ix < 0
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        let xv = input.data()[((ci * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize];
                                        let kv = kernels.data()
                                            [(((co * c_in + ci) * kd + kz) * kh + ky) * kw + kx];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Transposed convolution by explicit zero-stuffing: insert `stride - 1`
    /// zeros between input cells, then run a stride-1 convolution with the
    /// spatially flipped kernel and padding `k - 1 - pad`.
    pub fn transposed_conv2d_zero_stuffed(
        input: &Tensor,
        kernels: &Tensor, // [C_in, C_out, kH, kW]
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let ks = kernels.shape();
        let (c_out, kh, kw) = (ks[1], ks[2], ks[3]);
        let sh = (h - 1) * stride + 1;
        let sw = (w - 1) * stride + 1;
        let mut stuffed = Tensor::zeros(&[c_in, sh, sw]);
        for c in 0..c_in {
            for y in 0..h {
                for x in 0..w {
                    stuffed.data_mut()[(c * sh + y * stride) * sw + x * stride] =
                        input.data()[(c * h + y) * w + x];
                }
            }
        }
        // Swap in/out channel axes and flip spatially.
        let mut flipped = Tensor::zeros(&[c_out, c_in, kh, kw]);
        for ci in 0..c_in {
            for co in 0..c_out {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = kernels.data()[((ci * c_out + co) * kh + ky) * kw + kx];
                        flipped.data_mut()
                            [((co * c_in + ci) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] = v;
                    }
                }
            }
        }
        conv2d(&stuffed, &flipped, 1, kh - 1 - pad)
    }

    /// Nested-loop max pooling over `[C, spatial...]` (2 or 3 spatial dims).
    pub fn max_pool(input: &Tensor, window: &[usize], stride: &[usize]) -> Tensor {
        let channels = input.shape()[0];
        let ext: Vec<usize> = input.shape()[1..].to_vec();
        let (e3, w3, s3) = if window.len() == 2 {
            (
                [1, ext[0], ext[1]],
                [1, window[0], window[1]],
                [1, stride[0], stride[1]],
            )
        } else {
            (
                [ext[0], ext[1], ext[2]],
                [window[0], window[1], window[2]],
                [stride[0], stride[1], stride[2]],
            )
        };
        let o3 = [
            (e3[0] - w3[0]) / s3[0] + 1,
            (e3[1] - w3[1]) / s3[1] + 1,
            (e3[2] - w3[2]) / s3[2] + 1,
        ];
        let mut out = Vec::new();
        for c in 0..channels {
            for oz in 0..o3[0] {
                for oy in 0..o3[1] {
                    for ox in 0..o3[2] {
                        let mut best = f64::NEG_INFINITY;
                        for kz in 0..w3[0] {
                            for ky in 0..w3[1] {
                                for kx in 0..w3[2] {
                                    let idx = ((c * e3[0] + oz * s3[0] + kz) * e3[1]
                                        + oy * s3[1]
                                        + ky)
                                        * e3[2]
                                        + ox * s3[2]
                                        + kx;
                                    best = best.max(input.data()[idx]);
                                }
                            }
                        }
                        out.push(best);
                    }
                }
            }
        }
        let mut shape = vec![channels];
        if window.len() == 2 {
            shape.extend([o3[1], o3[2]]);
        } else {
            shape.extend(o3);
        }
        Tensor::new(shape, out).unwrap()
    }

    /// Per-cell enumeration ROI pooling using the stated floor-proportional
    /// partition, written independently of the implementation.
    pub fn roi_pool(featmap: &Tensor, roi: (f64, f64, f64, f64), grid: (usize, usize)) -> Tensor {
        let (c, h, w) = (featmap.shape()[0], featmap.shape()[1], featmap.shape()[2]);
        let (gw, gh) = grid;
        let x1 = roi.0.max(0.0);
        let y1 = roi.1.max(0.0);
        let x2 = roi.2.min(w as f64);
        let y2 = roi.3.min(h as f64);
        let x0 = x1.floor() as usize;
        let y0 = y1.floor() as usize;
        let xe = (x2.ceil() as usize).min(w).max(x0 + 1);
        let ye = (y2.ceil() as usize).min(h).max(y0 + 1);
        let (rw, rh) = (xe - x0, ye - y0);
        let mut out = Vec::new();
        for ch in 0..c {
            for gy in 0..gh {
                let ya = y0 + gy * rh / gh;
                let yb = (y0 + (gy + 1) * rh / gh).max(ya + 1);
                for gx in 0..gw {
                    let xa = x0 + gx * rw / gw;
                    let xb = (x0 + (gx + 1) * rw / gw).max(xa + 1);
                    let mut best = f64::NEG_INFINITY;
                    for y in ya..yb {
                        for x in xa..xb {
                            best = best.max(featmap.data()[(ch * h + y) * w + x]);
                        }
                    }
                    out.push(best);
                }
            }
        }
        Tensor::new(vec![c, gh, gw], out).unwrap()
    }

    /// Loop matrix-vector product plus bias.
    pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Tensor {
        let (m, n) = (weights.shape()[0], weights.shape()[1]);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut acc = bias.data()[i];
            for j in 0..n {
                acc += weights.data()[i * n + j] * input.data()[j];
            }
            out.push(acc);
        }
        Tensor::new(vec![m], out).unwrap()
    }

    /// Softmax cross-entropy by a different route: `ln(sum_k exp(l_k - l_label))`
    /// with compensated (Kahan) summation instead of max subtraction.
    pub fn softmax_xent(logits: &[f64], label: usize) -> f64 {
        let rel = logits[label];
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &l in logits {
            let term = (l - rel).exp();
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum.ln()
    }

    /// Corner-form IoU evaluated directly from interval overlaps.
    pub fn iou_corners(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
        let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
        let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        let area_a = (a.2 - a.0) * (a.3 - a.1);
        let area_b = (b.2 - b.0) * (b.3 - b.1);
        inter / (area_a + area_b - inter)
    }

    /// Exhaustive anchor assignment from the full IoU matrix, applying the
    /// threshold and best-anchor-per-gt rules directly.
    pub fn assign_anchors(
        anchors: &[BBox],
        in_bounds: &[bool],
        gts: &[BBox],
        pos_iou: f64,
        neg_iou: f64,
    ) -> Vec<crate::geom::AnchorLabel> {
        use crate::geom::AnchorLabel;
        let n = anchors.len();
        let matrix: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| {
                gts.iter()
                    .map(|g| iou_corners(a.corners(), g.corners()))
                    .collect()
            })
            .collect();
        let mut labels = vec![AnchorLabel::Negative; n];
        for i in 0..n {
            if !in_bounds[i] {
                labels[i] = AnchorLabel::Ignore;
                continue;
            }
            if gts.is_empty() {
                continue;
            }
            let (best_j, best) = matrix[i]
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            labels[i] = if best >= pos_iou {
                AnchorLabel::Positive(best_j)
            } else if best < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
        }
        for (j, _) in gts.iter().enumerate() {
            let mut best = (usize::MAX, 0.0f64);
            for i in 0..n {
                if in_bounds[i] && matrix[i][j] > best.1 {
                    best = (i, matrix[i][j]);
                }
            }
            if best.0 != usize::MAX && best.1 > 0.0 {
                labels[best.0] = AnchorLabel::Positive(j);
            }
        }
        labels
    }

    /// Exhaustive FROC: at every distinct threshold, redo the matching from
    /// scratch over the included candidates and count directly.
    pub fn froc_points(
        scans: &[String],
        candidates: &[crate::ct::Candidate],
        annotations: &[crate::ct::Annotation],
    ) -> Vec<(f64, f64, f64)> {
        let dist = |a: [f64; 3], b: [f64; 3]| -> f64 {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let mut thresholds: Vec<f64> = candidates.iter().map(|c| c.probability).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut out = Vec::new();
        for &t in &thresholds {
            let included: Vec<&crate::ct::Candidate> = candidates
                .iter()
                .filter(|c| c.probability >= t)
                .collect();
            let mut detected = vec![false; annotations.len()];
            let mut fps = 0usize;
            for c in &included {
                let mut hit = None;
                let mut hit_d = f64::INFINITY;
                for (j, a) in annotations.iter().enumerate() {
                    if a.series_uid != c.series_uid {
                        continue;
                    }
                    let d = dist(c.center, a.center);
                    if d < a.diameter_mm / 2.0 && d < hit_d {
                        hit = Some(j);
                        hit_d = d;
                    }
                }
                match hit {
                    Some(j) => detected[j] = true,
                    None => fps += 1,
                }
            }
            let sens = detected.iter().filter(|&&d| d).count() as f64 / annotations.len() as f64;
            out.push((t, fps as f64 / scans.len() as f64, sens));
        }
        out
    }

    /// Quadratic greedy NMS, selecting the best remaining box by linear scan.
    pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
        let n = boxes.len();
        let mut kept = Vec::new();
        let mut dead = vec![false; n];
        loop {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if dead[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) if scores[i] > scores[b] => Some(i),
                    other => other,
                };
            }
            let Some(b) = best else { break };
            kept.push(b);
            dead[b] = true;
            for i in 0..n {
                if !dead[i] && iou_corners(boxes[b].corners(), boxes[i].corners()) > threshold {
                    dead[i] = true;
                }
            }
        }
        kept
    }
}

pub mod gradcheck {
    use crate::tensor::{DiffGraph, Tensor, Var};

    /// Tolerances of the central finite-difference check.
    #[derive(Debug, Clone, Copy)]
    pub struct GradCheckCfg {
        pub rtol: f64,
        pub atol: f64,
        pub step: f64,
    }

    impl Default for GradCheckCfg {
        fn default() -> Self {
            GradCheckCfg {
                rtol: 1e-5,
                atol: 1e-8,
                step: 1e-6,
            }
        }
    }

    /// Outcome of a gradient check: the worst error ratio against the
    /// envelope `atol + rtol * max(|analytic|, |fd|)`; passing means < 1.
    #[derive(Debug, Clone, Copy)]
    pub struct GradReport {
        pub worst_ratio: f64,
        pub checked: usize,
    }

    impl GradReport {
        pub fn passed(&self) -> bool {
            self.worst_ratio < 1.0
        }
    }

    /// Check the gradient of a scalar-valued graph function against central
    /// finite differences, coordinate by coordinate, over every input.
    ///
    /// `build` receives a graph plus one `Var` per input tensor and must
    /// return a scalar. It is re-invoked on perturbed inputs for the numeric
    /// side, on an inference graph so nothing is recorded.
    pub fn check<F>(inputs: &[Tensor], build: F, cfg: GradCheckCfg) -> GradReport
    where
        F: Fn(&mut DiffGraph, &[Var]) -> Var,
    {
        let mut graph = DiffGraph::training();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(true);
                graph.leaf(&t)
            })
            .collect();
        let loss = build(&mut graph, &vars);
        let grads = graph.backward(loss).expect("backward");
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
            })
            .collect();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut g = DiffGraph::inference();
            let vs: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
            let out = build(&mut g, &vs);
            g.value(out).item()
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for ti in 0..inputs.len() {
            for i in 0..inputs[ti].len() {
                let orig = work[ti].data()[i];
                work[ti].data_mut()[i] = orig + cfg.step;
                let fp = eval(&work);
                work[ti].data_mut()[i] = orig - cfg.step;
                let fm = eval(&work);
                work[ti].data_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * cfg.step);
                let g = analytic[ti].data()[i];
                let envelope = cfg.atol + cfg.rtol * g.abs().max(fd.abs());
                let ratio = (g - fd).abs() / envelope;
                if ratio > worst {
                    worst = ratio;
                }
                checked += 1;
            }
        }
        GradReport {
            worst_ratio: worst,
            checked,
        }
    }
}

//! Straight-line reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicelab_core::cae::{ArchConfig, Cae, CaeParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters with every weight and bias drawn from `[-1/sqrt(fan_in), ..]`,
/// biases included so their gradients are exercised away from zero.
pub fn random_params(cfg: &ArchConfig, seed: u64) -> CaeParams<f64> {
    let mut r = rng(seed);
    let mut p = CaeParams::<f64>::zeros(cfg);
    for layer in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
        let s = 1.0 / ((layer.in_channels * layer.size * layer.size) as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = r.gen_range(-s..s);
        }
        for b in layer.bias.iter_mut() {
            *b = r.gen_range(-0.1..0.1);
        }
    }
    p
}

pub fn random_image(w: usize, h: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect()
}

/// Labels in `0..=classes` with roughly a quarter unlabeled, at least one
/// labeled pixel.
pub fn random_labels(n: usize, classes: u8, r: &mut impl Rng) -> Vec<u8> {
    let mut l: Vec<u8> = (0..n).map(|_| if r.gen_bool(0.25) { 0 } else { r.gen_range(1..=classes) }).collect();
    l[0] = 1;
    l
}

type Planes = Vec<Vec<f64>>;

/// Zero-padded same cross-correlation with explicit bounds checks.
fn conv(x: &Planes, h: usize, w: usize, weights: &[f64], bias: &[f64], cout: usize, k: usize) -> Planes {
    let cin = x.len();
    let r = (k / 2) as isize;
    let mut out = vec![vec![0.0; h * w]; cout];
    for (co, plane) in out.iter_mut().enumerate() {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = bias[co];
                for (ci, xin) in x.iter().enumerate() {
                    for i in 0..k as isize {
                        for j in 0..k as isize {
                            let (sy, sx) = (y + i - r, xx + j - r);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wv = weights[((co * cin + ci) * k + i as usize) * k + j as usize];
                            s += wv * xin[sy as usize * w + sx as usize];
                        }
                    }
                }
                plane[y as usize * w + xx as usize] = s;
            }
        }
    }
    out
}

fn relu(x: &mut Planes) {
    for v in x.iter_mut().flatten() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Pools an `h×w` plane after replicating the last row/column out to a
/// multiple of `p`; switches are `(y, x)` in the replicated plane.
fn pool(x: &[f64], h: usize, w: usize, p: usize) -> (Vec<f64>, Vec<(usize, usize)>, usize, usize) {
    let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let at = |y: usize, xx: usize| x[y.min(h - 1) * w + xx.min(w - 1)];
    let mut vals = Vec::new();
    let mut sw = Vec::new();
    for py in 0..hp / p {
        for px in 0..wp / p {
            let mut best = (py * p, px * p);
            for dy in 0..p {
                for dx in 0..p {
                    let (y, xx) = (py * p + dy, px * p + dx);
                    if at(y, xx) > at(best.0, best.1) {
                        best = (y, xx);
                    }
                }
            }
            vals.push(at(best.0, best.1));
            sw.push(best);
        }
    }
    (vals, sw, hp / p, wp / p)
}

/// Scatters into the replicated extent, then crops to `h×w`.
fn unpool(vals: &[f64], sw: &[(usize, usize)], h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let mut big = vec![0.0; hp * wp];
    for (&v, &(y, x)) in vals.iter().zip(sw) {
        big[y * wp + x] = v;
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&big[y * wp..y * wp + w]);
    }
    out
}

/// Class scores `[class][pixel]` of the autoencoder, written without any of
/// the library's kernels.
pub fn naive_logits(params: &CaeParams<f64>, cfg: &ArchConfig, image: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (k, p) = (cfg.filter_size, cfg.pool_dim);
    let mut x: Planes = vec![image.to_vec()];
    let mut dims = vec![];
    let mut switches = vec![];
    let (mut hh, mut ww) = (h, w);
    for layer in &params.encoder {
        let mut a = conv(&x, hh, ww, &layer.weights, &layer.bias, layer.out_channels, k);
        relu(&mut a);
        let mut pooled = vec![];
        let mut sws = vec![];
        let (mut ph, mut pw) = (0, 0);
        for plane in &a {
            let (v, s, a_h, a_w) = pool(plane, hh, ww, p);
            pooled.push(v);
            sws.push(s);
            (ph, pw) = (a_h, a_w);
        }
        dims.push((hh, ww));
        switches.push(sws);
        x = pooled;
        (hh, ww) = (ph, pw);
    }
    for l in (0..cfg.num_layers).rev() {
        let (hh, ww) = dims[l];
        let up: Planes = x.iter().zip(&switches[l]).map(|(v, s)| unpool(v, s, hh, ww, p)).collect();
        let layer = &params.decoder[l];
        x = conv(&up, hh, ww, &layer.weights, &layer.bias, layer.out_channels, k);
        if l > 0 {
            relu(&mut x);
        }
    }
    x.concat()
}

pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let n = logits.len() / classes;
    let mut out = vec![0.0; logits.len()];
    for pix in 0..n {
        let m = (0..classes).map(|c| logits[c * n + pix]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..classes).map(|c| (logits[c * n + pix] - m).exp()).sum();
        for c in 0..classes {
            out[c * n + pix] = (logits[c * n + pix] - m).exp() / z;
        }
    }
    out
}

/// Mean of `-ln p(label)` over labeled pixels from the naive forward pass.
pub fn naive_loss(params: &CaeParams<f64>, cfg: &ArchConfig, image: &[f64], labels: &[u8], w: usize, h: usize) -> f64 {
    let probs = softmax(&naive_logits(params, cfg, image, w, h), cfg.num_classes);
    let n = w * h;
    let labeled: Vec<usize> = (0..n).filter(|&i| labels[i] != 0).collect();
    -labeled.iter().map(|&i| probs[(labels[i] as usize - 1) * n + i].ln()).sum::<f64>() / labeled.len() as f64
}

/// Worst relative error of each parameter tensor between the analytic
/// gradient and central differences of the loss.
pub struct GradCheck {
    pub tensors: Vec<(String, f64)>,
    pub parameters: usize,
    /// Largest absolute analytic/numeric difference over all parameters.
    pub max_abs_diff: f64,
    /// Largest analytic gradient magnitude, for scale.
    pub max_gradient: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor: differences below `1e-9` count
/// as agreement, since central differences of an O(1) loss carry about
/// `1e-11` of rounding noise at this step size.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d < 1e-9 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

pub fn gradient_check(cfg: &ArchConfig, w: usize, h: usize, seed: u64, eps: f64) -> GradCheck {
    let mut r = rng(seed);
    let params = random_params(cfg, seed ^ 0x9e37);
    let image = random_image(w, h, &mut r);
    let labels = random_labels(w * h, cfg.num_classes as u8, &mut r);
    let model = Cae::from_params(cfg.clone(), params.clone()).unwrap();
    let (_, grads) = model.loss_and_gradients(&image, &labels, w, h).unwrap();
    let flat = params.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::new();
    let mut offset = 0;
    let (mut max_abs_diff, mut max_gradient) = (0.0f64, 0.0f64);
    for (name, g) in grads.tensors() {
        let mut worst = 0.0f64;
        for (i, &analytic) in g.iter().enumerate() {
            let idx = offset + i;
            let mut v = flat.clone();
            v[idx] = flat[idx] + eps;
            probe.assign_flat(&v).unwrap();
            let up = Cae::from_params(cfg.clone(), probe.clone()).unwrap().loss(&image, &labels, w, h).unwrap();
            v[idx] = flat[idx] - eps;
            probe.assign_flat(&v).unwrap();
            let down = Cae::from_params(cfg.clone(), probe.clone()).unwrap().loss(&image, &labels, w, h).unwrap();
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
            max_abs_diff = max_abs_diff.max((analytic - numeric).abs());
            max_gradient = max_gradient.max(analytic.abs());
        }
        offset += g.len();
        out.push((name, worst));
    }
    GradCheck { tensors: out, parameters: offset, max_abs_diff, max_gradient }
}

/// The two architectures of the gradient criterion.
pub fn gradient_configs() -> Vec<ArchConfig> {
    vec![
        ArchConfig { num_layers: 1, filters_per_layer: vec![2], filter_size: 3, pool_dim: 2, num_classes: 3 },
        ArchConfig { num_layers: 2, filters_per_layer: vec![2, 3], filter_size: 3, pool_dim: 2, num_classes: 3 },
    ]
}

/// Confusion counts `[a][b]` over pixels both maps label, classes `1..=c`.
pub fn oracle_confusion(a: &[u8], b: &[u8], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for i in 0..a.len() {
        if a[i] != 0 && b[i] != 0 {
            m[a[i] as usize - 1][b[i] as usize - 1] += 1;
        }
    }
    m
}

/// Kappa from observed and chance agreement as probabilities.
pub fn oracle_kappa(m: &[Vec<u64>]) -> f64 {
    let c = m.len();
    let n: f64 = m.iter().flatten().sum::<u64>() as f64;
    let mut po = 0.0;
    for i in 0..c {
        po += m[i][i] as f64 / n;
    }
    let mut pe = 0.0;
    for i in 0..c {
        let row: u64 = m[i].iter().sum();
        let col: u64 = (0..c).map(|j| m[j][i]).sum();
        pe += (row as f64 / n) * (col as f64 / n);
    }
    if pe == 1.0 {
        1.0
    } else {
        (po - pe) / (1.0 - pe)
    }
}

pub fn oracle_jaccard(a: &[u8], b: &[u8], class: u8) -> f64 {
    let inter = (0..a.len()).filter(|&i| a[i] == class && b[i] == class).count();
    let union = (0..a.len()).filter(|&i| a[i] == class || b[i] == class).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(precision, recall, f1, accuracy)` over pixels with nonzero truth.
pub fn oracle_f1(truth: &[u8], pred: &[u8], class: u8) -> (f64, f64, f64, f64) {
    let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != 0).collect();
    let tp = idx.iter().filter(|&&i| truth[i] == class && pred[i] == class).count() as f64;
    let fp = idx.iter().filter(|&&i| truth[i] != class && pred[i] == class).count() as f64;
    let fn_ = idx.iter().filter(|&&i| truth[i] == class && pred[i] != class).count() as f64;
    let correct = idx.iter().filter(|&&i| truth[i] == pred[i]).count() as f64;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let acc = if idx.is_empty() { 0.0 } else { correct / idx.len() as f64 };
    (p, r, f, acc)
}

/// Per-pixel vote count; most votes wins, ties to the smaller class.
pub fn oracle_consensus(maps: &[Vec<u8>]) -> Vec<u8> {
    (0..maps[0].len())
        .map(|i| {
            let mut best = (0u8, 0usize);
            for c in 1..=255u8 {
                let votes = maps.iter().filter(|m| m[i] == c).count();
                if votes > best.1 {
                    best = (c, votes);
                }
            }
            best.0
        })
        .collect()
}

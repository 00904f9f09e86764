//! Plain index-loop re-implementations used as references.
#![allow(clippy::needless_range_loop)]

use rehearsal_core::{AccuracyMatrix, MlpParams, PredictionBatch};

const EPS: f64 = 1e-12;

fn safe_ln(p: f64) -> f64 {
    if p < EPS {
        EPS.ln()
    } else {
        p.ln()
    }
}

fn cell(p: &PredictionBatch, r: usize, c: usize) -> f64 {
    p.probs().get(r, c)
}

pub fn entropy(p: &PredictionBatch) -> f64 {
    let (b, k) = (p.batch_size(), p.num_classes());
    let mut total = 0.0;
    for r in 0..b {
        let mut h = 0.0;
        for c in 0..k {
            let v = cell(p, r, c);
            h -= v * safe_ln(v);
        }
        total += h;
    }
    total / b as f64
}

pub fn diversity(p: &PredictionBatch) -> f64 {
    let (b, k) = (p.batch_size(), p.num_classes());
    let mut total = 0.0;
    for c in 0..k {
        let mut m = 0.0;
        for r in 0..b {
            m += cell(p, r, c);
        }
        m /= b as f64;
        total += m * safe_ln(m);
    }
    total
}

pub fn ewc_penalty(theta: &[f64], anchor: &[f64], fisher: &[f64], strength: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..theta.len() {
        let d = theta[i] - anchor[i];
        s += 0.5 * strength * fisher[i] * d * d;
    }
    s
}

pub fn si_penalty(theta: &[f64], reference: &[f64], importance: &[f64], strength: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..theta.len() {
        let d = theta[i] - reference[i];
        s += importance[i] * d * d;
    }
    strength * s
}

/// `a[i][j]` for `j ≥ i`, from the stored row layout.
fn at(m: &AccuracyMatrix, i: usize, j: usize) -> f64 {
    m.rows()[i][j - i]
}

pub fn acc(m: &AccuracyMatrix) -> f64 {
    let t = m.tasks();
    let mut s = 0.0;
    for i in 0..t {
        s += at(m, i, t - 1);
    }
    s / t as f64
}

pub fn fr(m: &AccuracyMatrix) -> f64 {
    let t = m.tasks();
    let mut s = 0.0;
    for i in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for j in i..t - 1 {
            let drop = at(m, i, j) - at(m, i, t - 1);
            if drop > best {
                best = drop;
            }
        }
        s += best;
    }
    s / (t - 1) as f64
}

/// Logits of one input row, one multiply-add at a time.
pub fn logits(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    let layers = params.layers();
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let w = &layer.weight;
        let mut z = vec![0.0; w.cols()];
        for o in 0..w.cols() {
            let mut s = layer.bias[o];
            for i in 0..w.rows() {
                s += a[i] * w.get(i, o);
            }
            z[o] = if l + 1 < layers.len() && s < 0.0 {
                0.0
            } else {
                s
            };
        }
        a = z;
    }
    a
}

/// Per-sample gradient of `log softmax(z)_y` with respect to all
/// parameters, flattened like [`MlpParams::flatten`], by explicit loops over
/// a one-hidden-layer net.
pub fn log_prob_grad_one_hidden(params: &MlpParams, x: &[f64], y: usize) -> Vec<f64> {
    let [l1, l2] = params.layers() else {
        panic!("expected exactly one hidden layer");
    };
    let (din, h, k) = (l1.weight.rows(), l1.weight.cols(), l2.weight.cols());
    let mut pre = vec![0.0; h];
    for j in 0..h {
        let mut s = l1.bias[j];
        for i in 0..din {
            s += x[i] * l1.weight.get(i, j);
        }
        pre[j] = s;
    }
    let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let mut z = vec![0.0; k];
    for c in 0..k {
        let mut s = l2.bias[c];
        for j in 0..h {
            s += act[j] * l2.weight.get(j, c);
        }
        z[c] = s;
    }
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
    let dz: Vec<f64> = (0..k)
        .map(|c| (if c == y { 1.0 } else { 0.0 }) - (z[c] - zmax).exp() / denom)
        .collect();
    let mut gw1 = vec![0.0; din * h];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; h * k];
    for j in 0..h {
        for c in 0..k {
            gw2[j * k + c] = act[j] * dz[c];
        }
        if pre[j] > 0.0 {
            let mut back = 0.0;
            for c in 0..k {
                back += l2.weight.get(j, c) * dz[c];
            }
            gb1[j] = back;
            for i in 0..din {
                gw1[i * h + j] = x[i] * back;
            }
        }
    }
    let mut out = gw1;
    out.extend(gb1);
    out.extend(gw2);
    out.extend(dz);
    out
}

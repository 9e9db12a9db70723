//! Reference implementations shared by several test targets.

#![allow(dead_code)]

/// Accuracy, per-class F1, sensitivity and specificity by explicit
/// enumeration over (prediction, label) pairs, without a confusion matrix.
pub struct BruteMetrics {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Vec<Vec<usize>>,
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn brute_metrics(pred: &[usize], labels: &[usize], k: usize) -> BruteMetrics {
    let pairs: Vec<(usize, usize)> = pred.iter().copied().zip(labels.iter().copied()).collect();
    let count = |f: &dyn Fn(usize, usize) -> bool| pairs.iter().filter(|&&(p, y)| f(p, y)).count();
    let confusion = (0..k)
        .map(|y| (0..k).map(|p| count(&|pp, yy| pp == p && yy == y)).collect())
        .collect();
    let mut f1 = Vec::new();
    let mut sens = Vec::new();
    let mut spec = Vec::new();
    for c in 0..k {
        let tp = count(&|p, y| p == c && y == c);
        let fp = count(&|p, y| p == c && y != c);
        let fn_ = count(&|p, y| p != c && y == c);
        let tn = count(&|p, y| p != c && y != c);
        f1.push(frac(2 * tp, 2 * tp + fp + fn_));
        sens.push(frac(tp, tp + fn_));
        spec.push(frac(tn, tn + fp));
    }
    let (sensitivity, specificity) = if k == 2 {
        (sens[1], spec[1])
    } else {
        (sens.iter().sum::<f64>() / k as f64, spec.iter().sum::<f64>() / k as f64)
    };
    BruteMetrics {
        accuracy: frac(count(&|p, y| p == y), pairs.len()),
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        per_class_f1: f1,
        sensitivity,
        specificity,
        confusion,
    }
}

/// Same as `brute_metrics` but compares against a library report field by
/// field; returns the first mismatching field name.
pub fn metrics_mismatch(report: &ptsm_core::metrics::MetricsReport, pred: &[usize], labels: &[usize], k: usize) -> Option<&'static str> {
    let b = brute_metrics(pred, labels, k);
    if report.confusion != b.confusion {
        return Some("confusion");
    }
    if report.accuracy != b.accuracy {
        return Some("accuracy");
    }
    if report.per_class_f1 != b.per_class_f1 {
        return Some("per_class_f1");
    }
    if report.macro_f1 != b.macro_f1 {
        return Some("macro_f1");
    }
    if report.sensitivity != b.sensitivity {
        return Some("sensitivity");
    }
    if report.specificity != b.specificity {
        return Some("specificity");
    }
    if report.n != pred.len() {
        return Some("n");
    }
    None
}

// ---- loss oracles ----------------------------------------------------------


pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Textbook sample cross-covariance, `[d_x, d_y]`.
pub fn textbook_cov(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let mean = |m: &[Vec<f64>], j: usize| m.iter().map(|r| r[j]).sum::<f64>() / n;
    let (dx, dy) = (x[0].len(), y[0].len());
    (0..dx)
        .map(|i| {
            (0..dy)
                .map(|j| {
                    let (mx, my) = (mean(x, i), mean(y, j));
                    x.iter().zip(y).map(|(a, b)| (a[i] - mx) * (b[j] - my)).sum::<f64>() / (n - 1.0)
                })
                .collect()
        })
        .collect()
}

pub fn frob(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rows_of(t: &ptsm_core::Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}

/// Supervised NT-Xent by explicit enumeration of anchor/positive/other terms.
pub fn brute_nt_xent(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = emb.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut has = false;
        for k in 0..n {
            if k == a {
                continue;
            }
            let e = (cosine(&emb[a], &emb[k]) / tau).exp();
            den += e;
            if labels[k] == labels[a] {
                num += e;
                has = true;
            }
        }
        if has {
            total += -(num / den).ln();
            anchors += 1;
        }
    }
    total / anchors as f64
}

//! ROC-AUC, multi-label stratified k-fold and the paired t-test.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels differ in length"
    );
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| labels[o] != 0).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-class AUCs over columns of `scores`/`labels` (rows are samples) and
/// their mean over the classes where the AUC is defined.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> (Vec<Option<f64>>, Option<f64>) {
    let n = labels.first().map_or(0, Vec::len);
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
            roc_auc(&s, &l)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per_class, mean)
}

/// Disjoint, exhaustive folds of sample indices (each sorted ascending).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<usize>>,
}

impl FoldAssignment {
    /// Indices outside fold `i`.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Iterative stratification: the rarest remaining label is distributed
/// first, each sample going to the fold that still wants that label most,
/// then the fold that wants the most samples, then a seeded random choice.
pub fn stratified_kfold(labels: &[Vec<u8>], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config("stratified k-fold needs k >= 2"));
    }
    let b = labels.len();
    if b < k {
        return Err(Error::config(format!(
            "cannot split {b} samples into {k} folds"
        )));
    }
    let n = labels[0].len();
    if labels.iter().any(|l| l.len() != n) {
        return Err(Error::shape("label rows differ in width"));
    }
    let mut rng = rng_from(seed, &[0x6b66_6f6c_64]);
    let mut want_total = vec![b as f64 / k as f64; k];
    let mut want_label: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let count = labels.iter().filter(|l| l[c] != 0).count() as f64;
            vec![count / k as f64; k]
        })
        .collect();
    let mut remaining = vec![true; b];
    let mut folds = vec![Vec::new(); k];

    let pick = |cands: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| -> usize {
        if cands.len() == 1 {
            cands[0]
        } else {
            cands[rng.gen_range(0..cands.len())]
        }
    };
    let argmax = |vals: &[f64], among: &[usize]| -> Vec<usize> {
        let best = among
            .iter()
            .map(|&j| vals[j])
            .fold(f64::NEG_INFINITY, f64::max);
        among.iter().copied().filter(|&j| vals[j] == best).collect()
    };

    loop {
        let counts: Vec<usize> = (0..n)
            .map(|c| {
                (0..b)
                    .filter(|&i| remaining[i] && labels[i][c] != 0)
                    .count()
            })
            .collect();
        let Some(label) = (0..n).filter(|&c| counts[c] > 0).min_by_key(|&c| counts[c]) else {
            break;
        };
        for i in 0..b {
            if !remaining[i] || labels[i][label] == 0 {
                continue;
            }
            let all: Vec<usize> = (0..k).collect();
            let by_label = argmax(&want_label[label], &all);
            let by_total = argmax(&want_total, &by_label);
            let f = pick(by_total, &mut rng);
            folds[f].push(i);
            remaining[i] = false;
            want_total[f] -= 1.0;
            for c in 0..n {
                if labels[i][c] != 0 {
                    want_label[c][f] -= 1.0;
                }
            }
        }
    }
    for i in 0..b {
        if remaining[i] {
            let all: Vec<usize> = (0..k).collect();
            let f = pick(argmax(&want_total, &all), &mut rng);
            folds[f].push(i);
            want_total[f] -= 1.0;
        }
    }
    rebalance(labels, &mut folds);
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldAssignment { folds })
}

/// Greedy placement balances the label being distributed but lets
/// co-occurring labels drift. Swapping samples between folds keeps fold
/// sizes and lowers `Σ_c Σ_f (count[c][f] − mean_c)²`; the best swap is
/// applied until none improves or every label is within one.
fn rebalance(labels: &[Vec<u8>], folds: &mut [Vec<usize>]) {
    let n = labels[0].len();
    let k = folds.len();
    let mut counts: Vec<Vec<i64>> = (0..n)
        .map(|c| {
            folds
                .iter()
                .map(|f| f.iter().filter(|&&i| labels[i][c] != 0).count() as i64)
                .collect()
        })
        .collect();
    let spread = |counts: &[Vec<i64>]| {
        counts
            .iter()
            .map(|row| row.iter().max().unwrap() - row.iter().min().unwrap())
            .max()
            .unwrap_or(0)
    };
    while spread(&counts) > 1 {
        // (cost change, fold a, position in a, fold b, position in b)
        let mut best: Option<(i64, usize, usize, usize, usize)> = None;
        for a in 0..k {
            for b in a + 1..k {
                for (pa, &i) in folds[a].iter().enumerate() {
                    for (pb, &j) in folds[b].iter().enumerate() {
                        let mut delta = 0;
                        for (c, row) in counts.iter().enumerate() {
                            match (labels[i][c] != 0, labels[j][c] != 0) {
                                (true, false) => delta += 2 * (row[b] - row[a]) + 2,
                                (false, true) => delta += 2 * (row[a] - row[b]) + 2,
                                _ => {}
                            }
                        }
                        if delta < best.map_or(0, |x| x.0) {
                            best = Some((delta, a, pa, b, pb));
                        }
                    }
                }
            }
        }
        let Some((_, a, pa, b, pb)) = best else {
            break;
        };
        let (i, j) = (folds[a][pa], folds[b][pb]);
        for (c, row) in counts.iter_mut().enumerate() {
            let (li, lj) = (i64::from(labels[i][c] != 0), i64::from(labels[j][c] != 0));
            row[a] += lj - li;
            row[b] += li - lj;
        }
        folds[a][pa] = j;
        folds[b][pb] = i;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub df: usize,
    /// Zero-variance differences: `t` is reported as 0 and `p` as 1.
    pub degenerate: bool,
}

/// Paired two-tailed t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired samples differ in length"));
    }
    let k = a.len();
    if k < 2 {
        return Err(Error::config("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let df = k - 1;
    if var == 0.0 {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            df,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (k as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_tailed(t, df as f64),
        df,
        degenerate: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Lanczos approximation (g = 7, nine terms).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the continued fraction, using the symmetry relation
/// where it converges faster.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

//! Brute-force metric definitions, written from set enumeration and sorting
//! rather than the library's accumulator.

/// Rank via a descending sort: one plus the index of the last score that is
/// still >= `p[j]`.
pub fn rank_sorted(p: &[f64], j: usize) -> usize {
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s.iter().rposition(|&v| v >= p[j]).unwrap() + 1
}

pub struct Oracle {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hamming: f64,
    pub ranking_loss: Option<f64>,
    pub coverage: Option<f64>,
    pub lrap: Option<f64>,
}

pub fn brute_force(k: usize, y: &[u8], p: &[f64], y_hat: &[u8]) -> Oracle {
    let b = y.len() / k;
    let cell = |i: usize, j: usize| i * k + j;

    let mut precs = Vec::new();
    let mut recs = Vec::new();
    for j in 0..k {
        let predicted: Vec<usize> = (0..b).filter(|&i| y_hat[cell(i, j)] == 1).collect();
        let actual: Vec<usize> = (0..b).filter(|&i| y[cell(i, j)] == 1).collect();
        let both = predicted.iter().filter(|i| actual.contains(i)).count();
        precs.push(if predicted.is_empty() { 0.0 } else { both as f64 / predicted.len() as f64 });
        recs.push(if actual.is_empty() { 0.0 } else { both as f64 / actual.len() as f64 });
    }
    let precision = precs.iter().sum::<f64>() / k as f64;
    let recall = recs.iter().sum::<f64>() / k as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let agree = (0..b * k).filter(|&c| y[c] == y_hat[c]).count();
    let accuracy = agree as f64 / (b * k) as f64;
    let hamming = (0..b)
        .map(|i| (0..k).filter(|&j| y[cell(i, j)] != y_hat[cell(i, j)]).count() as f64 / k as f64)
        .sum::<f64>()
        / b as f64;

    let (mut rl, mut rl_n, mut cov, mut lr, mut pos_n) = (0.0, 0, 0.0, 0.0, 0);
    for i in 0..b {
        let row = &p[i * k..(i + 1) * k];
        let pos: Vec<usize> = (0..k).filter(|&j| y[cell(i, j)] == 1).collect();
        let neg: Vec<usize> = (0..k).filter(|&j| y[cell(i, j)] == 0).collect();
        if !pos.is_empty() && !neg.is_empty() {
            let mut bad = 0;
            for &j in &pos {
                for &m in &neg {
                    if row[m] >= row[j] {
                        bad += 1;
                    }
                }
            }
            rl += bad as f64 / (pos.len() * neg.len()) as f64;
            rl_n += 1;
        }
        if !pos.is_empty() {
            cov += pos.iter().map(|&j| rank_sorted(row, j)).max().unwrap() as f64;
            let mut s = 0.0;
            for &j in &pos {
                let higher = pos.iter().filter(|&&m| row[m] >= row[j]).count();
                s += higher as f64 / rank_sorted(row, j) as f64;
            }
            lr += s / pos.len() as f64;
            pos_n += 1;
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { None } else { Some(s / n as f64) };
    Oracle {
        accuracy,
        precision,
        recall,
        f1,
        hamming,
        ranking_loss: avg(rl, rl_n),
        coverage: avg(cov, pos_n),
        lrap: avg(lr, pos_n),
    }
}

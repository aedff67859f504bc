// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Representation analytics: SNR, mutual-information estimators, KDE
//! bounds, mask overlap and representation distance.

use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Penultimate-layer rows grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroupedEmbeddings {
    groups: Vec<Matrix>,
}

impl ClassGroupedEmbeddings {
    pub fn new(groups: Vec<Matrix>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("no classes"));
        }
        let width = groups[0].cols();
        for (c, g) in groups.iter().enumerate() {
            if g.rows() == 0 {
                return Err(Error::invalid(format!("class {c} has no rows")));
            }
            if g.cols() != width {
                return Err(Error::invalid(format!("class {c} has width {} instead of {width}", g.cols())));
            }
        }
        Ok(Self { groups })
    }

    /// Groups the rows of `z` by label.
    pub fn from_labeled(z: &Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != z.rows() {
            return Err(Error::invalid(format!("{} labels for {} rows", labels.len(), z.rows())));
        }
        let mut idx = vec![Vec::new(); num_classes];
        for (r, &y) in labels.iter().enumerate() {
            idx.get_mut(y)
                .ok_or_else(|| Error::invalid(format!("label {y} >= {num_classes}")))?
                .push(r);
        }
        Self::new(idx.iter().map(|i| z.select_rows(i)).collect())
    }

    /// Keeps the first `min_c N_c` rows of every class.
    pub fn balanced(&self) -> Self {
        let n = self.groups.iter().map(Matrix::rows).min().unwrap_or(0);
        let keep: Vec<usize> = (0..n).collect();
        Self {
            groups: self.groups.iter().map(|g| g.select_rows(&keep)).collect(),
        }
    }

    pub fn groups(&self) -> &[Matrix] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }
}

pub const SNR_STABILIZER: f64 = 1e-12;

fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Inter-class over intra-class distance ratio of (optionally signed-sqrt
/// transformed) representations.
pub fn snr(groups: &ClassGroupedEmbeddings, signed_sqrt_transform: bool) -> Result<f64> {
    let c = groups.num_classes();
    if c < 2 {
        return Err(Error::invalid("snr needs at least 2 classes"));
    }
    let n = groups.groups[0].rows();
    if groups.groups.iter().any(|g| g.rows() != n) {
        return Err(Error::invalid(
            "snr needs the same number of rows per class; subsample with ClassGroupedEmbeddings::balanced",
        ));
    }
    if n < 2 {
        return Err(Error::invalid("snr needs at least 2 rows per class"));
    }
    let z: Vec<Matrix> = groups
        .groups
        .iter()
        .map(|g| if signed_sqrt_transform { g.map(signed_sqrt) } else { g.clone() })
        .collect();
    let mut inter = 0.0;
    for s in 0..n {
        for a in 0..c {
            for b in 0..c {
                if a != b {
                    inter += l2(z[a].row(s), z[b].row(s));
                }
            }
        }
    }
    let mut intra = 0.0;
    for g in &z {
        for s in 0..n {
            for t in 0..n {
                if s != t {
                    intra += l2(g.row(s), g.row(t));
                }
            }
        }
    }
    let (nf, cf) = (n as f64, c as f64);
    let num = inter / (nf * (cf - 1.0).powi(2));
    let den = intra / (cf * (nf - 1.0).powi(2));
    Ok(num / (den + SNR_STABILIZER))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimatorConfig {
    pub k: usize,
    pub bins: usize,
    /// Gaussian kernel standard deviation, in bins.
    pub smoothing: f64,
}

impl Default for MiEstimatorConfig {
    fn default() -> Self {
        Self {
            k: 5,
            bins: 256,
            smoothing: 4.0,
        }
    }
}

impl MiEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("mi k must be >= 1"));
        }
        if self.bins < 2 {
            return Err(Error::invalid("mi bins must be >= 2"));
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(Error::invalid(format!("mi smoothing must be >= 0, got {}", self.smoothing)));
        }
        Ok(())
    }
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Kraskov k-nearest-neighbour estimate (max-norm), clipped below at 0.
pub fn mi_knn(zs: &Matrix, zt: &Matrix, config: &MiEstimatorConfig) -> Result<f64> {
    config.validate()?;
    if zs.rows() != zt.rows() {
        return Err(Error::ShapeMismatch {
            op: "mi_knn",
            left: zs.shape(),
            right: zt.shape(),
        });
    }
    let (n, k) = (zs.rows(), config.k);
    if n < k + 2 {
        return Err(Error::invalid(format!("mi_knn needs >= {} rows, got {n}", k + 2)));
    }
    let dx = pairwise_max(zs);
    let dy = pairwise_max(zt);
    let duplicate = (0..n).any(|i| (0..n).any(|j| j != i && dx[i * n + j].max(dy[i * n + j]) == 0.0));
    if duplicate {
        log::info!("mi_knn: duplicate joint rows; adding 1e-10 jitter");
        let mut rng = Rng::new(0x6a17_7e5d);
        let jitter = |m: &Matrix, rng: &mut Rng| {
            let mut out = m.clone();
            out.as_mut_slice().iter_mut().for_each(|v| *v += 1e-10 * rng.normal());
            out
        };
        let (a, b) = (jitter(zs, &mut rng), jitter(zt, &mut rng));
        return knn_from_distances(&pairwise_max(&a), &pairwise_max(&b), n, k);
    }
    knn_from_distances(&dx, &dy, n, k)
}

fn pairwise_max(z: &Matrix) -> Vec<f64> {
    let n = z.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = max_dist(z.row(i), z.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn knn_from_distances(dx: &[f64], dy: &[f64], n: usize, k: usize) -> Result<f64> {
    let mut acc = 0.0;
    let mut joint = Vec::with_capacity(n - 1);
    for i in 0..n {
        joint.clear();
        joint.extend((0..n).filter(|&j| j != i).map(|j| dx[i * n + j].max(dy[i * n + j])));
        let (_, eps, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = *eps;
        let nx = (0..n).filter(|&j| j != i && dx[i * n + j] < eps).count();
        let ny = (0..n).filter(|&j| j != i && dy[i * n + j] < eps).count();
        acc += digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0);
    }
    let mi = digamma(k as f64) + digamma(n as f64) - acc / n as f64;
    Ok(mi.max(0.0))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let half = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Plug-in MI of a Gaussian-smoothed 2-D histogram (zero padding at the edges).
pub fn mi_binned(a: &[f64], b: &[f64], config: &MiEstimatorConfig) -> Result<f64> {
    config.validate()?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "mi_binned",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    if a.len() < 10 {
        return Err(Error::invalid(format!("mi_binned needs >= 10 samples, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mi_binned input".into()));
    }
    let range = |s: &[f64]| s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let ((alo, ahi), (blo, bhi)) = (range(a), range(b));
    if alo == ahi || blo == bhi {
        log::info!("mi_binned: constant series; returning 0");
        return Ok(0.0);
    }
    let nb = config.bins;
    let mut joint = vec![0.0; nb * nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[bin_index(x, alo, ahi, nb) * nb + bin_index(y, blo, bhi, nb)] += 1.0;
    }
    let kernel = gaussian_kernel(config.smoothing);
    let half = (kernel.len() / 2) as i64;
    let convolve = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; nb * nb];
        for i in 0..nb {
            for j in 0..nb {
                let v = src[i * nb + j];
                if v == 0.0 {
                    continue;
                }
                for (t, &kv) in kernel.iter().enumerate() {
                    let off = t as i64 - half;
                    let (ti, tj) = if along_rows { (i as i64 + off, j as i64) } else { (i as i64, j as i64 + off) };
                    if (0..nb as i64).contains(&ti) && (0..nb as i64).contains(&tj) {
                        out[ti as usize * nb + tj as usize] += v * kv;
                    }
                }
            }
        }
        out
    };
    let smoothed = convolve(&convolve(&joint, true), false);
    let total: f64 = smoothed.iter().sum();
    let p: Vec<f64> = smoothed.iter().map(|v| v / total).collect();
    let mut pa = vec![0.0; nb];
    let mut pb = vec![0.0; nb];
    for i in 0..nb {
        for j in 0..nb {
            pa[i] += p[i * nb + j];
            pb[j] += p[i * nb + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..nb {
        for j in 0..nb {
            let pij = p[i * nb + j];
            if pij > 0.0 {
                mi += pij * (pij / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Mean of [`mi_binned`] over matched columns of two representation matrices.
pub fn mi_binned_avg(zs: &Matrix, zt: &Matrix, config: &MiEstimatorConfig) -> Result<f64> {
    if zs.shape() != zt.shape() {
        return Err(Error::ShapeMismatch {
            op: "mi_binned_avg",
            left: zs.shape(),
            right: zt.shape(),
        });
    }
    if zs.cols() == 0 {
        return Err(Error::invalid("mi_binned_avg needs at least one column"));
    }
    let mut total = 0.0;
    for j in 0..zs.cols() {
        total += mi_binned(&zs.column(j), &zt.column(j), config)?;
    }
    Ok(total / zs.cols() as f64)
}

fn kde_entropy_term(rows: &[&[f64]], sigma2: f64) -> f64 {
    let p = rows.len() as f64;
    let mut acc = 0.0;
    let mut expo = Vec::with_capacity(rows.len());
    for hi in rows {
        expo.clear();
        expo.extend(rows.iter().map(|hj| -hi.iter().zip(hj.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * sigma2)));
        let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + expo.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        acc += lse - p.ln();
    }
    -acc / p + 0.0
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("kde noise variance must be > 0, got {sigma2}")))
    }
}

/// `−(1/P)Σ_i log[(1/P)Σ_j exp(−‖h_i−h_j‖²/(2σ²))]`.
pub fn kde_mi_input_bound(h: &Matrix, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if h.rows() < 2 {
        return Err(Error::invalid("kde bound needs at least 2 rows"));
    }
    let rows: Vec<&[f64]> = (0..h.rows()).map(|r| h.row(r)).collect();
    Ok(kde_entropy_term(&rows, sigma2))
}

/// Input bound minus the label-weighted within-class bounds.
pub fn kde_mi_label_bound(h: &Matrix, labels: &[usize], num_classes: usize, sigma2: f64) -> Result<f64> {
    let total = kde_mi_input_bound(h, sigma2)?;
    if labels.len() != h.rows() {
        return Err(Error::invalid(format!("{} labels for {} rows", labels.len(), h.rows())));
    }
    let mut by_class: Vec<Vec<&[f64]>> = vec![Vec::new(); num_classes];
    for (r, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} >= {num_classes}")))?
            .push(h.row(r));
    }
    let p = h.rows() as f64;
    let mut conditional = 0.0;
    for (c, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::invalid(format!("class {c} has no rows")));
        }
        if rows.len() == 1 {
            log::info!("kde label bound: class {c} has a single row; its term is 0");
            continue;
        }
        conditional += rows.len() as f64 / p * kde_entropy_term(rows, sigma2);
    }
    Ok(total - conditional)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOverlap {
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

/// Jaccard similarity of pruned (zero) positions, per layer and overall.
pub fn mask_overlap(a: &[Matrix], b: &[Matrix]) -> Result<MaskOverlap> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} mask layers", a.len(), b.len())));
    }
    let (mut inter_all, mut union_all) = (0usize, 0usize);
    let mut per_layer = Vec::with_capacity(a.len());
    for (ma, mb) in a.iter().zip(b) {
        if ma.shape() != mb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mask_overlap",
                left: ma.shape(),
                right: mb.shape(),
            });
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&x, &y) in ma.as_slice().iter().zip(mb.as_slice()) {
            let (px, py) = (x == 0.0, y == 0.0);
            inter += (px && py) as usize;
            union += (px || py) as usize;
        }
        per_layer.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
        inter_all += inter;
        union_all += union;
    }
    Ok(MaskOverlap {
        per_layer,
        overall: if union_all == 0 { 1.0 } else { inter_all as f64 / union_all as f64 },
    })
}

/// Jaccard similarity of two per-layer position lists (1 when both are empty).
pub fn position_overlap(a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let xs: std::collections::BTreeSet<_> = x.iter().collect();
        let ys: std::collections::BTreeSet<_> = y.iter().collect();
        inter += xs.intersection(&ys).count();
        union += xs.union(&ys).count();
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `‖Z_ref − Z_pruned‖_F`.
pub fn representation_distance(z_ref: &Matrix, z_pruned: &Matrix) -> Result<f64> {
    Ok(z_ref.sub(z_pruned)?.frobenius_norm())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties (0 if either side is constant).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of >= 2 values"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_normal, Rng};
    use proptest::prelude::*;

    fn gaussian_pair(seed: u64, n: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y = x.iter().map(|&v| rho * v + (1.0 - rho * rho).sqrt() * rng.normal()).collect();
        (x, y)
    }

    fn column(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    fn brute_snr(groups: &[Vec<Vec<f64>>]) -> f64 {
        let c = groups.len();
        let n = groups[0].len();
        let t = |v: &Vec<f64>| v.iter().map(|&x: &f64| x.signum() * x.abs().sqrt()).collect::<Vec<_>>();
        let d = |a: &Vec<f64>, b: &Vec<f64>| {
            let (a, b) = (t(a), t(b));
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let mut num = 0.0;
        for s in 0..n {
            for a in 0..c {
                for b in 0..c {
                    if a != b {
                        num += d(&groups[a][s], &groups[b][s]);
                    }
                }
            }
        }
        let mut den = 0.0;
        for g in groups {
            for s in 0..n {
                for u in 0..n {
                    if s != u {
                        den += d(&g[s], &g[u]);
                    }
                }
            }
        }
        (num / (n as f64 * ((c - 1) as f64).powi(2))) / (den / (c as f64 * ((n - 1) as f64).powi(2)) + 1e-12)
    }

    #[test]
    fn snr_brute_force_examples() {
        let groups = vec![vec![vec![0.0], vec![0.0]], vec![vec![4.0], vec![4.0]]];
        let emb = ClassGroupedEmbeddings::new(groups.iter().map(|g| Matrix::from_rows(g).unwrap()).collect()).unwrap();
        let got = snr(&emb, true).unwrap();
        assert!((got - brute_snr(&groups)).abs() <= 1e-12 * got);
        assert!(got > 1e6);

        let mut rng = Rng::new(3);
        let groups: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..4).map(|_| (0..2).map(|_| rng.normal()).collect()).collect())
            .collect();
        let emb = ClassGroupedEmbeddings::new(groups.iter().map(|g| Matrix::from_rows(g).unwrap()).collect()).unwrap();
        assert!((snr(&emb, true).unwrap() - brute_snr(&groups)).abs() < 1e-12);
    }

    #[test]
    fn snr_errors() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(2, 2);
        assert!(snr(&ClassGroupedEmbeddings::new(vec![a.clone(), b]).unwrap(), true).is_err());
        assert!(snr(&ClassGroupedEmbeddings::new(vec![a.clone()]).unwrap(), true).is_err());
        let one = Matrix::zeros(1, 2);
        assert!(snr(&ClassGroupedEmbeddings::new(vec![one.clone(), one]).unwrap(), true).is_err());
        assert!(ClassGroupedEmbeddings::new(vec![a, Matrix::zeros(3, 1)]).is_err());
    }

    #[test]
    fn snr_separated_beats_overlapping() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let noise: Vec<Matrix> = (0..3).map(|_| seeded_normal(&mut rng, 20, 4, 0.0, 1.0).unwrap()).collect();
            let sep: Vec<Matrix> = noise.iter().enumerate().map(|(c, m)| m.map(|v| v + 6.0 * c as f64)).collect();
            let a = snr(&ClassGroupedEmbeddings::new(sep).unwrap(), true).unwrap();
            let b = snr(&ClassGroupedEmbeddings::new(noise).unwrap(), true).unwrap();
            assert!(a > b);
        }
    }

    #[test]
    fn snr_without_transform_is_rotation_invariant() {
        let mut rng = Rng::new(11);
        let groups: Vec<Matrix> = (0..3).map(|c| seeded_normal(&mut rng, 6, 3, c as f64, 1.0).unwrap()).collect();
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Matrix::from_rows(&[vec![c, -s, 0.0], vec![s, c, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let rotated: Vec<Matrix> = groups.iter().map(|g| g.matmul(&rot).unwrap()).collect();
        let a = snr(&ClassGroupedEmbeddings::new(groups).unwrap(), false).unwrap();
        let b = snr(&ClassGroupedEmbeddings::new(rotated).unwrap(), false).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn grouping_and_balancing() {
        let z = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]).unwrap();
        let g = ClassGroupedEmbeddings::from_labeled(&z, &[0, 1, 0, 1, 0], 2).unwrap();
        assert_eq!(g.groups()[0].as_slice(), &[1.0, 3.0, 5.0]);
        let b = g.balanced();
        assert_eq!(b.groups()[0].as_slice(), &[1.0, 3.0]);
        assert_eq!(b.groups()[1].as_slice(), &[2.0, 4.0]);
        assert!(ClassGroupedEmbeddings::from_labeled(&z, &[0, 0, 0, 0, 0], 2).is_err());
    }

    #[test]
    fn knn_identical_is_large() {
        let z = seeded_normal(&mut Rng::new(1), 1000, 1, 0.0, 1.0).unwrap();
        assert!(mi_knn(&z, &z, &MiEstimatorConfig::default()).unwrap() > 2.0);
    }

    #[test]
    fn knn_independent_is_near_zero() {
        for seed in 0..5 {
            let mut rng = Rng::new(20 + seed);
            let a = seeded_normal(&mut rng, 2000, 1, 0.0, 1.0).unwrap();
            let b = seeded_normal(&mut rng, 2000, 1, 0.0, 1.0).unwrap();
            let mi = mi_knn(&a, &b, &MiEstimatorConfig::default()).unwrap();
            assert!(mi < 0.05, "seed {seed}: {mi}");
        }
    }

    #[test]
    fn knn_gaussian_closed_form() {
        for rho in [0.5, 0.9] {
            let (x, y) = gaussian_pair(5, 2000, rho);
            let mi = mi_knn(&column(&x), &column(&y), &MiEstimatorConfig::default()).unwrap();
            let truth = -0.5 * (1.0 - rho * rho).ln();
            assert!((mi - truth).abs() < 0.1, "rho {rho}: {mi} vs {truth}");
        }
    }

    #[test]
    fn knn_duplicates_and_errors() {
        let z = Matrix::from_rows(&vec![vec![1.0]; 10]).unwrap();
        assert!(mi_knn(&z, &z, &MiEstimatorConfig::default()).unwrap().is_finite());
        assert!(mi_knn(&Matrix::zeros(6, 1), &Matrix::zeros(6, 1), &MiEstimatorConfig::default()).is_err());
        assert!(mi_knn(&Matrix::zeros(10, 1), &Matrix::zeros(9, 1), &MiEstimatorConfig::default()).is_err());
    }

    #[test]
    fn binned_self_information_without_smoothing() {
        let (x, _) = gaussian_pair(7, 500, 0.0);
        let cfg = MiEstimatorConfig { smoothing: 0.0, bins: 32, ..MiEstimatorConfig::default() };
        let mi = mi_binned(&x, &x, &cfg).unwrap();
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0.0; 32];
        x.iter().for_each(|&v| counts[bin_index(v, lo, hi, 32)] += 1.0);
        let h: f64 = counts.iter().filter(|&&c| c > 0.0).map(|c| -(c / 500.0) * (c / 500.0f64).ln()).sum();
        assert!((mi - h).abs() < 1e-12);

        let smoothed = mi_binned(&x, &x, &MiEstimatorConfig::default()).unwrap();
        assert!(smoothed <= h + 1e-12);
    }

    #[test]
    fn binned_calibration() {
        let mut rng = Rng::new(9);
        let a: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        assert!(mi_binned(&a, &b, &MiEstimatorConfig::default()).unwrap() < 0.05);
        let (x, y) = gaussian_pair(10, 2000, 0.9);
        let mi = mi_binned(&x, &y, &MiEstimatorConfig::default()).unwrap();
        assert!((mi - 0.8304).abs() < 0.15, "{mi}");
    }

    #[test]
    fn binned_constant_and_errors() {
        let c = vec![1.0; 20];
        let v: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(mi_binned(&c, &v, &MiEstimatorConfig::default()).unwrap(), 0.0);
        assert!(mi_binned(&v[..5], &v[..5], &MiEstimatorConfig::default()).is_err());
        assert!(mi_binned(&v, &v[..19], &MiEstimatorConfig::default()).is_err());
        let bad = MiEstimatorConfig { bins: 1, ..MiEstimatorConfig::default() };
        assert!(mi_binned(&v, &v, &bad).is_err());
    }

    #[test]
    fn binned_average_over_columns() {
        let (x, y) = gaussian_pair(12, 300, 0.7);
        let zs = Matrix::from_vec(300, 2, x.iter().flat_map(|&v| [v, v]).collect()).unwrap();
        let zt = Matrix::from_vec(300, 2, y.iter().flat_map(|&v| [v, 1.0]).collect()).unwrap();
        let cfg = MiEstimatorConfig::default();
        let avg = mi_binned_avg(&zs, &zt, &cfg).unwrap();
        assert!((avg - mi_binned(&x, &y, &cfg).unwrap() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kde_examples() {
        let same = Matrix::filled(5, 3, 0.7);
        assert_eq!(kde_mi_input_bound(&same, 1.0).unwrap(), 0.0);
        let far = Matrix::from_rows(&[vec![0.0], vec![100.0]]).unwrap();
        assert!((kde_mi_input_bound(&far, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(kde_mi_input_bound(&far, 0.0).is_err());
        assert!(kde_mi_input_bound(&Matrix::zeros(1, 2), 1.0).is_err());

        let h = seeded_normal(&mut Rng::new(2), 30, 4, 0.0, 1.0).unwrap();
        let grid = [0.01, 0.1, 1.0, 10.0];
        let vals: Vec<f64> = grid.iter().map(|&s| kde_mi_input_bound(&h, s).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));

        assert_eq!(kde_mi_label_bound(&h, &[0; 30], 1, 1.0).unwrap(), 0.0);
        let two = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![100.0], vec![100.0]]).unwrap();
        assert!((kde_mi_label_bound(&two, &[0, 0, 1, 1], 2, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let single = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(kde_mi_label_bound(&single, &[0, 0, 1], 2, 1.0).unwrap().is_finite());
    }

    #[test]
    fn overlap_examples() {
        let a = vec![Matrix::from_vec(1, 4, vec![0.0, 1.0, 0.0, 1.0]).unwrap()];
        let b = vec![Matrix::from_vec(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap()];
        assert_eq!(mask_overlap(&a, &a).unwrap().overall, 1.0);
        assert_eq!(mask_overlap(&a, &b).unwrap().overall, 0.0);
        let full = vec![Matrix::filled(2, 2, 1.0)];
        assert_eq!(mask_overlap(&full, &full).unwrap().per_layer, vec![1.0]);
        assert!(mask_overlap(&a, &full).is_err());
        assert_eq!(position_overlap(&[vec![1, 2]], &[vec![2, 3]]), 1.0 / 3.0);
        assert_eq!(position_overlap(&[vec![]], &[vec![]]), 1.0);
    }

    #[test]
    fn random_mask_overlap_matches_expectation() {
        let n = 10_000;
        let d = 0.5;
        let mut rng = Rng::new(4);
        let mk = |rng: &mut Rng| {
            let mut m = Matrix::filled(1, n, 1.0);
            for i in rng.sample_indices(n, (d * n as f64) as usize) {
                m.as_mut_slice()[i] = 0.0;
            }
            vec![m]
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let got = mask_overlap(&a, &b).unwrap().overall;
        let expected = d / (2.0 - d);
        // intersection is hypergeometric with variance ≈ n·d²(1−d)²/... ; 3σ band
        let sd_inter = (n as f64 * d * d * (1.0 - d) * (1.0 - d)).sqrt() / n as f64;
        let sd = sd_inter * 2.0 / (2.0 - d).powi(2) * 2.0;
        assert!((got - expected).abs() < 3.0 * sd, "{got} vs {expected}");
    }

    #[test]
    fn representation_distance_examples() {
        let z = seeded_normal(&mut Rng::new(5), 4, 3, 0.0, 1.0).unwrap();
        assert_eq!(representation_distance(&z, &z).unwrap(), 0.0);
        assert!((representation_distance(&z, &z.scale(2.0)).unwrap() - z.frobenius_norm()).abs() < 1e-12);
        let w = seeded_normal(&mut Rng::new(6), 4, 3, 0.0, 1.0).unwrap();
        let oracle: f64 = z.as_slice().iter().zip(w.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((representation_distance(&z, &w).unwrap() - oracle).abs() < 1e-12);
        assert!(representation_distance(&z, &Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn label_bound_never_exceeds_input_bound(seed in 0u64..200, sigma2 in 0.01f64..10.0) {
            let mut rng = Rng::new(seed);
            let h = seeded_normal(&mut rng, 24, 3, 0.0, 1.0).unwrap();
            let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
            let input = kde_mi_input_bound(&h, sigma2).unwrap();
            let label = kde_mi_label_bound(&h, &labels, 3, sigma2).unwrap();
            prop_assert!(label <= input + 1e-12);
            prop_assert!(label >= -1e-12);
        }

        #[test]
        fn mi_estimators_are_symmetric_and_nonnegative(seed in 0u64..100) {
            let (x, y) = gaussian_pair(seed, 200, 0.6);
            let cfg = MiEstimatorConfig::default();
            let ab = mi_binned(&x, &y, &cfg).unwrap();
            let ba = mi_binned(&y, &x, &cfg).unwrap();
            prop_assert!(ab >= 0.0 && (ab - ba).abs() < 1e-9);
            let k1 = mi_knn(&column(&x), &column(&y), &cfg).unwrap();
            let k2 = mi_knn(&column(&y), &column(&x), &cfg).unwrap();
            prop_assert!(k1 >= 0.0 && (k1 - k2).abs() < 1e-9);
        }

        #[test]
        fn overlap_is_bounded(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let mk = |rng: &mut Rng| Matrix::from_vec(3, 5, (0..15).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect()).unwrap();
            let a = vec![mk(&mut rng)];
            let b = vec![mk(&mut rng)];
            let o = mask_overlap(&a, &b).unwrap().overall;
            prop_assert!((0.0..=1.0).contains(&o));
            prop_assert_eq!(mask_overlap(&a, &a).unwrap().overall, 1.0);
        }
    }
}

//! Greedy residual k-means initialisation (the baseline).
//!
//! Codebook `m` is fitted by Euclidean k-means++ / Lloyd on the residual left
//! after subtracting the codewords chosen from codebooks `0..m`. An optional
//! [`CodebookRefiner`] can rework each codebook before its residual is taken.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantcore::{CodeMatrix, CodebookSet, Groups};
use crate::synth::{derive_seed, StreamTag};

/// Centroids, assignments and the objective they achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// `K × g`, row-major.
    pub centroids: Vec<f64>,
    pub assign: Vec<usize>,
    pub inertia: f64,
    pub g: usize,
}

impl ClusterState {
    pub fn num_centroids(&self) -> usize {
        self.centroids.len() / self.g
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.g..(k + 1) * self.g]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tol: 1e-4,
        }
    }
}

/// Reworks one freshly fitted codebook. Stage `m` is the codebook index.
pub trait CodebookRefiner {
    fn refine(&self, stage: usize, targets: &Groups, state: ClusterState) -> Result<ClusterState>;
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance, ties to the lowest index.
pub fn nearest_euclidean(point: &[f64], centroids: &[f64]) -> (usize, f64) {
    let g = point.len();
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(g).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &Groups, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let pairs: Vec<(usize, f64)> = (0..points.len())
        .into_par_iter()
        .map(|i| nearest_euclidean(points.get(i), centroids))
        .collect();
    pairs.into_iter().unzip()
}

/// k-means++ seeding with D² sampling. When `k` exceeds the number of
/// points the surplus centroids are uniformly drawn duplicates.
pub fn kmeanspp_seed(points: &Groups, k: usize, seed: u64) -> Result<Vec<f64>> {
    kmeanspp_seed_with(points, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn kmeanspp_seed_with<R: Rng>(points: &Groups, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::Domain(
            "cannot seed centroids from zero points".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Domain("need at least one centroid".into()));
    }
    let g = points.dim();
    let mut centroids = Vec::with_capacity(k * g);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(points.get(first));
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, points.get(first)))
        .collect();

    for _ in 1..k.min(n) {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > u {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave u at the very top of the mass
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        let c = points.get(pick);
        centroids.extend_from_slice(c);
        for (d, p) in d2.iter_mut().zip(points.iter()) {
            *d = d.min(sq_dist(p, c));
        }
    }
    for _ in n..k {
        centroids.extend_from_slice(points.get(rng.random_range(0..n)));
    }
    Ok(centroids)
}

/// Lloyd iterations plus the inertia after every accepted iteration.
pub fn lloyd_traced(
    points: &Groups,
    centroids: Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterState, Vec<f64>)> {
    let g = points.dim();
    if centroids.is_empty() || !centroids.len().is_multiple_of(g) {
        return Err(Error::Dimension(format!(
            "{} centroid values do not form {g}-vectors",
            centroids.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::Domain("no points to cluster".into()));
    }
    let k = centroids.len() / g;
    let mut centroids = centroids;
    let (mut assign, mut dists) = assign_all(points, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let mut trace = vec![inertia];

    for _ in 0..max_iters {
        let next = update_means(points, &centroids, &assign, &dists, k);
        let (next_assign, next_dists) = assign_all(points, &next);
        let next_inertia: f64 = next_dists.iter().sum();
        if next_inertia > inertia {
            // only reachable through rounding in the mean update
            break;
        }
        let changed = next_assign != assign;
        let prev = inertia;
        centroids = next;
        assign = next_assign;
        dists = next_dists;
        inertia = next_inertia;
        trace.push(inertia);
        if !changed || prev == 0.0 || (prev - inertia) / prev < tol {
            break;
        }
    }
    Ok((
        ClusterState {
            centroids,
            assign,
            inertia,
            g,
        },
        trace,
    ))
}

pub fn lloyd(
    points: &Groups,
    centroids: Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterState> {
    lloyd_traced(points, centroids, max_iters, tol).map(|(s, _)| s)
}

/// Cluster means; empty clusters move to the points farthest from their
/// current centroids.
fn update_means(
    points: &Groups,
    old: &[f64],
    assign: &[usize],
    dists: &[f64],
    k: usize,
) -> Vec<f64> {
    let g = points.dim();
    let mut sums = vec![0.0; k * g];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, &v) in sums[a * g..(a + 1) * g].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut out = old.to_vec();
    for c in 0..k {
        if counts[c] > 0 {
            for (o, s) in out[c * g..(c + 1) * g]
                .iter_mut()
                .zip(&sums[c * g..(c + 1) * g])
            {
                *o = s / counts[c] as f64;
            }
        }
    }
    let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empties.is_empty() {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        for (&c, &i) in empties.iter().zip(order.iter()) {
            out[c * g..(c + 1) * g].copy_from_slice(points.get(i));
        }
    }
    out
}

/// Fits `m` codebooks of size `k` greedily on successive residuals.
pub fn residual_init(
    groups: &Groups,
    m: usize,
    k: usize,
    kmeans: &KMeansConfig,
    seed: u64,
    refine: Option<&dyn CodebookRefiner>,
) -> Result<(CodebookSet, CodeMatrix)> {
    if m == 0 {
        return Err(Error::Domain("need at least one codebook".into()));
    }
    let g = groups.dim();
    let mut targets = groups.clone();
    let mut books = Vec::with_capacity(m);
    let mut columns = Vec::with_capacity(m);
    for stage in 0..m {
        let init = kmeanspp_seed(
            &targets,
            k,
            derive_seed(seed, StreamTag::KMeans, stage as u32),
        )?;
        let mut state = lloyd(&targets, init, kmeans.max_iters, kmeans.tol)?;
        if let Some(r) = refine {
            state = r.refine(stage, &targets, state)?;
        }
        // residuals are taken against the stored (f32) codewords
        let stored: Vec<f64> = state.centroids.iter().map(|&v| v as f32 as f64).collect();
        for (i, &a) in state.assign.iter().enumerate() {
            for (t, &c) in targets
                .get_mut(i)
                .iter_mut()
                .zip(&stored[a * g..(a + 1) * g])
            {
                *t -= c;
            }
        }
        books.push(stored);
        columns.push(state.assign);
    }
    Ok((
        CodebookSet::from_codebooks(g, &books)?,
        CodeMatrix::from_columns(&columns)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(g: usize, v: &[f64]) -> Groups {
        Groups::new(g, v.to_vec()).unwrap()
    }

    #[test]
    fn single_centroid_is_a_point() {
        let p = pts(2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let c = kmeanspp_seed(&p, 1, 7).unwrap();
        assert!(p.iter().any(|q| q == c.as_slice()));
    }

    #[test]
    fn identical_points_give_identical_centroids() {
        let p = pts(2, &[1.5, -2.0].repeat(10));
        let c = kmeanspp_seed(&p, 4, 1).unwrap();
        assert!(c.chunks(2).all(|x| x == [1.5, -2.0]));
    }

    #[test]
    fn surplus_centroids_duplicate_points() {
        let p = pts(1, &[0.0, 10.0]);
        let c = kmeanspp_seed(&p, 5, 3).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c[..2].contains(&0.0) && c[..2].contains(&10.0));
        assert!(c.iter().all(|v| *v == 0.0 || *v == 10.0));
    }

    #[test]
    fn empty_points_rejected() {
        let p = pts(2, &[]);
        assert!(matches!(kmeanspp_seed(&p, 2, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn points_equal_to_centroids_converge_immediately() {
        let p = pts(2, &[0.0, 0.0, 1.0, 1.0, 5.0, -1.0]);
        let (s, trace) = lloyd_traced(&p, p.data().to_vec(), 25, 1e-4).unwrap();
        assert_eq!(s.inertia, 0.0);
        assert_eq!(trace.len(), 2);
        assert_eq!(s.assign, vec![0, 1, 2]);
    }

    #[test]
    fn one_dimensional_two_clusters() {
        let p = pts(1, &[0.0, 1.0, 10.0, 11.0]);
        let s = lloyd(&p, vec![0.0, 11.0], 25, 1e-4).unwrap();
        assert_eq!(s.centroids, vec![0.5, 10.5]);
        assert_eq!(s.inertia, 1.0);
        assert_eq!(s.assign, vec![0, 0, 1, 1]);
    }

    #[test]
    fn empty_cluster_reseeded_to_farthest_point() {
        let p = pts(1, &[0.0, 1.0, 10.0, 11.0]);
        // centroid 1 at 100 attracts nothing
        let s = lloyd(&p, vec![5.0, 100.0], 25, 0.0).unwrap();
        let mut c = s.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
        assert_eq!(s.inertia, 1.0);
    }

    #[test]
    fn single_codebook_matches_lloyd() {
        let p = pts(2, &[0.0, 0.1, 0.2, 0.0, 3.0, 3.1, 2.9, 3.0, -1.0, 4.0]);
        let cfg = KMeansConfig::default();
        let (cb, codes) = residual_init(&p, 1, 2, &cfg, 11, None).unwrap();
        let init = kmeanspp_seed(&p, 2, derive_seed(11, StreamTag::KMeans, 0)).unwrap();
        let s = lloyd(&p, init, cfg.max_iters, cfg.tol).unwrap();
        let expected: Vec<f32> = s.centroids.iter().map(|&v| v as f32).collect();
        assert_eq!(cb.entries(), expected.as_slice());
        let got: Vec<usize> = codes.flat().iter().map(|&c| c as usize).collect();
        assert_eq!(got, s.assign);
    }

    #[test]
    fn representable_groups_reach_zero_error() {
        let base = [0.5, -0.5, 2.0, 1.0, -3.0, 0.25];
        let p = pts(2, &base.repeat(5));
        let (cb, codes) = residual_init(&p, 2, 3, &KMeansConfig::default(), 2, None).unwrap();
        let mut r = vec![0.0; 2];
        for i in 0..p.len() {
            cb.residual_into(p.get(i), codes.code(i), &mut r);
            assert!(r.iter().all(|v| v.abs() < 1e-6));
        }
    }

    struct Fixed(Vec<Vec<f64>>);

    impl CodebookRefiner for Fixed {
        fn refine(&self, stage: usize, targets: &Groups, _: ClusterState) -> Result<ClusterState> {
            let centroids = self.0[stage].clone();
            let assign: Vec<usize> = targets
                .iter()
                .map(|t| nearest_euclidean(t, &centroids).0)
                .collect();
            let inertia = targets
                .iter()
                .zip(&assign)
                .map(|(t, &a)| sq_dist(t, &centroids[a..a + 1]))
                .sum();
            Ok(ClusterState {
                centroids,
                assign,
                inertia,
                g: 1,
            })
        }
    }

    #[test]
    fn greedy_pipeline_commits_prematurely() {
        let p = pts(1, &[1.0]);
        let hook = Fixed(vec![vec![0.9, 0.4], vec![0.0, 0.6]]);
        let (cb, codes) =
            residual_init(&p, 2, 2, &KMeansConfig::default(), 0, Some(&hook)).unwrap();
        assert_eq!(codes.code(0), &[0, 0]);
        let mut r = [0.0];
        cb.residual_into(p.get(0), codes.code(0), &mut r);
        assert!((r[0] * r[0] - 0.01).abs() < 1e-7);
        cb.residual_into(p.get(0), &[1, 1], &mut r);
        assert!(r[0].abs() < 1e-7);
    }
}

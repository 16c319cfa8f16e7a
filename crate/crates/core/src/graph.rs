//! Adaptive slide-graph construction: a two-layer projection into a hidden
//! space, kNN hyperedge formation there, and the normalized propagation
//! operator consumed by the convolution branch.
//!
//! The kNN selection is discrete, so no gradient reaches the projection; by
//! default its weights are a seeded random projection that stays fixed for
//! the whole run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How the space for neighbor search is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggMode {
    /// Fixed random two-layer projection (seeded, never trained).
    FixedRandom,
    /// No projection: distances are taken directly in the backbone's
    /// embedding space, tying the graph geometry to the backbone.
    Tied,
}

/// Weights of the two fully connected projection layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AggParams<T: Scalar> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Scalar> AggParams<T> {
    pub fn init(d_s: usize, d_h: usize, rng: &mut Rng) -> Self {
        AggParams {
            w1: rng.glorot_matrix(d_s, d_h),
            b1: Matrix::zeros(1, d_h),
            w2: rng.glorot_matrix(d_h, d_h),
            b2: Matrix::zeros(1, d_h),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![("agg.w1", &self.w1), ("agg.b1", &self.b1), ("agg.w2", &self.w2), ("agg.b2", &self.b2)]
    }
}

/// `relu(x * w1 + b1) * w2 + b2` on plain matrices; the output feeds only the
/// discrete neighbor search.
pub fn agg_project<T: Scalar>(x: &Matrix<T>, p: &AggParams<T>) -> Result<Matrix<T>> {
    if x.cols() != p.w1.rows() {
        return Err(Error::DimensionMismatch(format!(
            "agg_project: input width {} vs layer width {}",
            x.cols(),
            p.w1.rows()
        )));
    }
    let mut h = x.matmul(&p.w1);
    for r in 0..h.rows() {
        for (v, &b) in h.row_mut(r).iter_mut().zip(p.b1.row(0)) {
            *v = (*v + b).max(T::zero());
        }
    }
    let mut out = h.matmul(&p.w2);
    for r in 0..out.rows() {
        for (v, &b) in out.row_mut(r).iter_mut().zip(p.b2.row(0)) {
            *v += b;
        }
    }
    Ok(out)
}

/// Hypergraph over `n` nodes: each hyperedge is a sorted set of node indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypergraph {
    pub n: usize,
    pub edges: Vec<Vec<usize>>,
}

impl Hypergraph {
    pub fn validate(&self) -> Result<()> {
        for (e, members) in self.edges.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::EmptyInput(format!("hyperedge {e} has no members")));
            }
            for &i in members {
                if i >= self.n {
                    return Err(Error::IndexOutOfRange(format!(
                        "hyperedge {e} names node {i} of {}",
                        self.n
                    )));
                }
            }
        }
        Ok(())
    }

    /// 0/1 incidence matrix, `n x |edges|`.
    pub fn incidence<T: Scalar>(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.n, self.edges.len());
        for (e, members) in self.edges.iter().enumerate() {
            for &i in members {
                m[(i, e)] = T::one();
            }
        }
        m
    }

    /// Debug dump as `{"n":…, "edges":[[…],…]}`.
    pub fn to_debug_json(&self) -> String {
        serde_json::to_string(self).expect("hypergraph serializes")
    }
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// One hyperedge per center: the center plus its `min(k, n-1)` nearest other
/// nodes by Euclidean distance in the projected space. Distance ties break
/// toward the lower node index. `k` larger than `n-1` is clamped with a
/// warning on stderr.
pub fn knn_hyperedges<T: Scalar>(
    projected: &Matrix<T>,
    k: usize,
    centers: std::ops::Range<usize>,
) -> Result<Hypergraph> {
    let n = projected.rows();
    if n == 0 {
        return Err(Error::EmptyInput("knn over zero nodes".into()));
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if centers.end > n {
        return Err(Error::IndexOutOfRange(format!(
            "centers {centers:?} over {n} nodes"
        )));
    }
    let k_eff = k.min(n - 1);
    if k_eff < k && n > 1 {
        eprintln!("warning: k={k} clamped to {k_eff} for a {n}-node graph");
    }
    let mut edges = Vec::with_capacity(centers.len());
    for c in centers {
        let crow = projected.row(c);
        let mut dists: Vec<(T, usize)> = (0..n)
            .filter(|&j| j != c)
            .map(|j| (squared_distance(crow, projected.row(j)), j))
            .collect();
        dists.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("distances must be comparable (finite inputs)")
                .then(a.1.cmp(&b.1))
        });
        let mut members: Vec<usize> = dists.iter().take(k_eff).map(|&(_, j)| j).collect();
        members.push(c);
        members.sort_unstable();
        edges.push(members);
    }
    Ok(Hypergraph { n, edges })
}

/// Normalized hypergraph propagation operator
/// `P = Dv^{-1/2} M De^{-1} M^T Dv^{-1/2}` with identity hyperedge weights.
/// Rows and columns of nodes in no hyperedge are zero.
pub fn build_propagation_operator<T: Scalar>(g: &Hypergraph) -> Result<Matrix<T>> {
    g.validate()?;
    let n = g.n;
    let mut node_degree = vec![0usize; n];
    for members in &g.edges {
        for &i in members {
            node_degree[i] += 1;
        }
    }
    let dv_inv_sqrt: Vec<T> = node_degree
        .iter()
        .map(|&d| if d == 0 { T::zero() } else { T::one() / T::c(d as f64).sqrt() })
        .collect();

    let mut p = Matrix::zeros(n, n);
    for members in &g.edges {
        let inv_size = T::one() / T::c(members.len() as f64);
        for &i in members {
            let wi = dv_inv_sqrt[i] * inv_size;
            for &j in members {
                p[(i, j)] += wi * dv_inv_sqrt[j];
            }
        }
    }
    Ok(p)
}

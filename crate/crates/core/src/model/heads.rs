//! Temporal aggregation heads: average pooling, NetVLAD and GhostVLAD.

use crate::tensor::{Float, Graph, Result, Tensor, TensorError, Var};

/// Trainable VLAD parameters for `K` real and `G` ghost clusters over `D`-dim descriptors.
///
/// Row `k` of `assign_weights`/`assign_bias` scores cluster `k`; rows `K..K+G`
/// are the ghost clusters, which take part in the soft assignment only.
#[derive(Clone, Debug, PartialEq)]
pub struct VladParams<T> {
    pub clusters: usize,
    pub ghosts: usize,
    pub dim: usize,
    /// `(K+G) x D`.
    pub assign_weights: Tensor<T>,
    /// `K+G`.
    pub assign_bias: Tensor<T>,
    /// `(K+G) x D`.
    pub centres: Tensor<T>,
    /// Per-cluster L2 normalization before flattening.
    pub intra_normalize: bool,
}

impl<T: Float> VladParams<T> {
    pub fn new(
        clusters: usize,
        ghosts: usize,
        assign_weights: Tensor<T>,
        assign_bias: Tensor<T>,
        centres: Tensor<T>,
    ) -> Result<Self> {
        let total = clusters + ghosts;
        let dim = *assign_weights.shape().last().unwrap_or(&0);
        if clusters == 0
            || assign_weights.shape() != [total, dim]
            || assign_bias.shape() != [total]
            || centres.shape() != [total, dim]
        {
            return Err(TensorError::ShapeMismatch {
                op: "vlad_params",
                detail: format!(
                    "K={clusters} G={ghosts}: weights {:?}, bias {:?}, centres {:?}",
                    assign_weights.shape(),
                    assign_bias.shape(),
                    centres.shape()
                ),
            });
        }
        if !(assign_weights.is_finite() && assign_bias.is_finite() && centres.is_finite()) {
            return Err(TensorError::NonFinite("VLAD parameters".into()));
        }
        Ok(Self {
            clusters,
            ghosts,
            dim,
            assign_weights,
            assign_bias,
            centres,
            intra_normalize: true,
        })
    }

    pub fn total_clusters(&self) -> usize {
        self.clusters + self.ghosts
    }

    fn bind(&self, g: &mut Graph<T>) -> (Var, Var, Var) {
        (
            g.constant(self.assign_weights.clone()),
            g.constant(self.assign_bias.clone()),
            g.constant(self.centres.clone()),
        )
    }
}

/// Soft-assignment weights `N x T x (K+G)` for `N x T x D` features.
pub fn soft_assign_graph<T: Float>(g: &mut Graph<T>, features: Var, weights: Var, bias: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let [n, t, d] = shape[..] else {
        return Err(TensorError::ShapeMismatch {
            op: "soft_assign",
            detail: format!("expected N x T x D features, got {shape:?}"),
        });
    };
    let total = g.shape(weights)[0];
    let flat = g.reshape(features, &[n * t, d])?;
    let wt = g.transpose(weights)?;
    let logits = g.linear(flat, wt, Some(bias))?;
    let assign = g.softmax_rows(logits);
    g.reshape(assign, &[n, t, total])
}

/// Full VLAD head on a graph: `N x T x D` features to `N x (K*D)`.
#[allow(clippy::too_many_arguments)]
pub fn vlad_graph<T: Float>(
    g: &mut Graph<T>,
    features: Var,
    weights: Var,
    bias: Var,
    centres: Var,
    clusters: usize,
    intra_normalize: bool,
) -> Result<Var> {
    let n = g.shape(features)[0];
    let d = g.shape(features)[2];
    let assign = soft_assign_graph(g, features, weights, bias)?;
    let mut v = g.vlad_residuals(assign, features, centres, clusters)?;
    if intra_normalize {
        v = g.l2_normalize(v, 2)?;
    }
    let flat = g.reshape(v, &[n, clusters * d])?;
    g.l2_normalize(flat, 1)
}

fn check_features<T: Float>(features: &Tensor<T>, dim: usize) -> Result<(usize, usize)> {
    match *features.shape() {
        [t, d] if d == dim => Ok((t, d)),
        _ => Err(TensorError::ShapeMismatch {
            op: "vlad",
            detail: format!("features {:?} for descriptor dim {dim}", features.shape()),
        }),
    }
}

/// Soft-assignment matrix `T x (K+G)` for `T x D` features.
pub fn soft_assignment<T: Float>(features: &Tensor<T>, params: &VladParams<T>) -> Result<Tensor<T>> {
    let (t, d) = check_features(features, params.dim)?;
    let mut g = Graph::inference();
    let x = g.constant(features.clone().reshape([1, t, d])?);
    let (w, b, _) = params.bind(&mut g);
    let a = soft_assign_graph(&mut g, x, w, b)?;
    g.value(a).clone().reshape([t, params.total_clusters()])
}

/// Unnormalized residual matrix `K x D` (ghost rows dropped).
pub fn vlad_matrix<T: Float>(features: &Tensor<T>, params: &VladParams<T>) -> Result<Tensor<T>> {
    let (t, d) = check_features(features, params.dim)?;
    let mut g = Graph::inference();
    let x = g.constant(features.clone().reshape([1, t, d])?);
    let (w, b, c) = params.bind(&mut g);
    let a = soft_assign_graph(&mut g, x, w, b)?;
    let v = g.vlad_residuals(a, x, c, params.clusters)?;
    g.value(v).clone().reshape([params.clusters, d])
}

fn aggregate<T: Float>(features: &Tensor<T>, params: &VladParams<T>) -> Result<Tensor<T>> {
    let (t, d) = check_features(features, params.dim)?;
    let mut g = Graph::inference();
    let x = g.constant(features.clone().reshape([1, t, d])?);
    let (w, b, c) = params.bind(&mut g);
    let out = vlad_graph(&mut g, x, w, b, c, params.clusters, params.intra_normalize)?;
    g.value(out).clone().reshape([params.clusters * d])
}

/// NetVLAD over `T x D` descriptors; `params.ghosts` must be zero.
pub fn netvlad_aggregate<T: Float>(features: &Tensor<T>, params: &VladParams<T>) -> Result<Tensor<T>> {
    if params.ghosts != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "netvlad_aggregate",
            detail: format!("{} ghost clusters given to NetVLAD", params.ghosts),
        });
    }
    aggregate(features, params)
}

/// GhostVLAD: assignment over all `K+G` clusters, residuals for the `K` real ones.
pub fn ghostvlad_aggregate<T: Float>(features: &Tensor<T>, params: &VladParams<T>) -> Result<Tensor<T>> {
    aggregate(features, params)
}

/// Mean of `T x D` descriptors over time.
pub fn tap_aggregate<T: Float>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let [t, d] = features.shape()[..] else {
        return Err(TensorError::ShapeMismatch {
            op: "tap_aggregate",
            detail: format!("expected T x D, got {:?}", features.shape()),
        });
    };
    let mut g = Graph::inference();
    let x = g.constant(features.clone().reshape([1, t, d])?);
    let m = g.mean_time(x)?;
    g.value(m).clone().reshape([d])
}

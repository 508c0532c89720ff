#pragma once

#include "repflow/common.hpp"

#include <cstdint>
#include <vector>

namespace repflow {

struct SvdResult {
    Matrix U;
    Vector S;  ///< descending, non-negative
    Matrix V;
};

/// Thin SVD, A = U diag(S) V^T. Throws InvalidArgument on non-finite input.
SvdResult svd(const Matrix& A);

struct Whitened {
    /// Centered data in whitened coordinates (N x k, k = retained rank).
    Matrix data;
    /// Maps centered original coordinates to whitened ones: data = (X - mean) * basis.
    Matrix basis;
    Eigen::RowVectorXd mean;
    /// Covariance eigenvalues of the retained directions, descending.
    Vector eigenvalues;
};

/// Centers columns and whitens with the sample covariance. Directions with
/// eigenvalue <= eps * lambda_max are dropped and the ridge eps * lambda_max is
/// added to the rest. eps = 0 on constant data throws.
Whitened center_whiten(const Matrix& X, double eps = 1e-10);

Matrix center_columns(const Matrix& X);

struct ClusteringResult {
    Matrix centroids;  ///< C x d
    std::vector<std::int32_t> assignments;
    double inertia = 0.0;
    /// Inertia after every full-batch round; empty in mini-batch mode.
    std::vector<double> round_inertia;
};

struct KMeansOptions {
    std::size_t clusters = 1000;
    std::size_t batch_size = 100;
    /// Number of mini-batch updates (or full rounds when batch_size >= N).
    std::size_t iterations = 0;
    /// When iterations == 0: epochs * N / batch_size updates.
    double epochs = 10.0;
    std::uint64_t seed = 0;
    bool kmeans_plus_plus = false;
};

/// Sculley-style mini-batch k-means with per-centroid 1/count learning rates.
/// batch_size >= N switches to full-batch Lloyd rounds. Final assignments are
/// always a full nearest-centroid pass (ties to the lower centroid index).
ClusteringResult minibatch_kmeans(const Matrix& points, const KMeansOptions& options);

/// Nearest centroid for each row of `points`, ties to the lower index.
std::vector<std::int32_t> assign_nearest(const Matrix& points, const Matrix& centroids, double* inertia = nullptr);

enum class Metric { Euclidean, Cosine };

/// Exact k nearest pool rows per query, distance-ascending, ties to the lower
/// index. When `self_index` is given, query q never returns pool row
/// self_index[q] (use -1 for "not in pool").
std::vector<std::vector<std::int32_t>> knn(const Matrix& queries, const Matrix& pool, std::size_t k, Metric metric,
                                           const std::vector<std::int32_t>* self_index = nullptr);

/// Convenience: queries are the pool itself; every row excludes its own index.
std::vector<std::vector<std::int32_t>> knn_self(const Matrix& pool, std::size_t k, Metric metric);

bool all_finite(const Matrix& m);

}  // namespace repflow

#pragma once

#include "repflow/common.hpp"

namespace repflow {

struct CanonicalCorrelations {
    /// Descending, clipped to [0, 1]; length min(rank X, rank Y).
    Vector rho;
    /// Canonical variates of each view (N x len(rho)), unit variance.
    Matrix hx, hy;
};

/// Centers and whitens both views (ridge eps * lambda_max), then takes the SVD
/// of the whitened cross-covariance. Rows of X and Y are the same occurrences.
/// Throws InvalidArgument when N <= max(a, b) or inputs are non-finite; warns
/// when N < 10 * max(a, b).
CanonicalCorrelations cca_correlations(const Matrix& X, const Matrix& Y, double eps = 1e-10);

struct CCAResult {
    Vector rho;
    /// Projection weights over rho, weighted by alignment with X's neurons (sum 1).
    Vector alpha_x;
    /// Same, weighted by Y's neurons.
    Vector alpha_y;
    double similarity_xy = 0.0;
    double similarity_yx = 0.0;
    /// 1 - similarity, per direction and averaged.
    double distance_xy = 0.0;
    double distance_yx = 0.0;
    double distance = 0.0;
};

/// Projection-weighted CCA. alpha_i is proportional to sum_j |<h_i, x_j>| over
/// the centered columns x_j of the reference view; similarity = sum alpha_i rho_i.
CCAResult pwcca(const Matrix& X, const Matrix& Y, double eps = 1e-10);

inline double pwcca_distance(const Matrix& X, const Matrix& Y, double eps = 1e-10) { return pwcca(X, Y, eps).distance; }

/// Each view keeps its top singular directions explaining `var_fraction` of the
/// variance; distance = 1 - mean canonical correlation of the truncated views.
double svcca_distance(const Matrix& X, const Matrix& Y, double var_fraction = 0.99, double eps = 1e-10);

/// Projects centered X onto its top singular directions explaining `var_fraction` of the variance.
Matrix truncate_by_variance(const Matrix& X, double var_fraction);

}  // namespace repflow

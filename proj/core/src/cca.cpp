#include "repflow/cca.hpp"

#include "repflow/numerics.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace repflow {

namespace {

void check_views(const Matrix& X, const Matrix& Y) {
    if (X.rows() != Y.rows())
        throw InvalidArgument("cca: views have different row counts (" + std::to_string(X.rows()) + " vs " +
                              std::to_string(Y.rows()) + ")");
    if (X.cols() == 0 || Y.cols() == 0) throw InvalidArgument("cca: empty view");
    const auto width = std::max(X.cols(), Y.cols());
    if (X.rows() <= width)
        throw InvalidArgument("cca: N = " + std::to_string(X.rows()) + " samples must exceed the view width " +
                              std::to_string(width));
    if (!X.allFinite() || !Y.allFinite()) throw InvalidArgument("cca: non-finite input");
    if (X.rows() < 10 * width)
        spdlog::warn("cca: N = {} is below 10 x view width ({}); correlations are biased upward", X.rows(), 10 * width);
}

Vector projection_weights(const Matrix& h, const Matrix& centered) {
    Vector a = (h.transpose() * centered).cwiseAbs().rowwise().sum();
    const double s = a.sum();
    if (s > 0) a /= s;
    return a;
}

}  // namespace

CanonicalCorrelations cca_correlations(const Matrix& X, const Matrix& Y, double eps) {
    check_views(X, Y);
    const auto wx = center_whiten(X, eps);
    const auto wy = center_whiten(Y, eps);
    CanonicalCorrelations out;
    const auto k = std::min(wx.data.cols(), wy.data.cols());
    if (k == 0) {
        out.rho = Vector(0);
        out.hx = Matrix(X.rows(), 0);
        out.hy = Matrix(X.rows(), 0);
        return out;
    }
    const Matrix cross = (wx.data.transpose() * wy.data) / static_cast<double>(X.rows() - 1);
    const auto s = svd(cross);
    out.rho = s.S.head(k).cwiseMax(0.0).cwiseMin(1.0);
    out.hx = wx.data * s.U.leftCols(k);
    out.hy = wy.data * s.V.leftCols(k);
    return out;
}

CCAResult pwcca(const Matrix& X, const Matrix& Y, double eps) {
    const auto cc = cca_correlations(X, Y, eps);
    CCAResult r;
    r.rho = cc.rho;
    if (cc.rho.size() == 0) {
        r.alpha_x = r.alpha_y = Vector(0);
        r.distance = r.distance_xy = r.distance_yx = 1.0;
        return r;
    }
    r.alpha_x = projection_weights(cc.hx, center_columns(X));
    r.alpha_y = projection_weights(cc.hy, center_columns(Y));
    r.similarity_xy = std::clamp(r.alpha_x.dot(cc.rho), 0.0, 1.0);
    r.similarity_yx = std::clamp(r.alpha_y.dot(cc.rho), 0.0, 1.0);
    r.distance_xy = 1.0 - r.similarity_xy;
    r.distance_yx = 1.0 - r.similarity_yx;
    r.distance = 0.5 * (r.distance_xy + r.distance_yx);
    return r;
}

Matrix truncate_by_variance(const Matrix& X, double var_fraction) {
    if (!(var_fraction > 0.0 && var_fraction <= 1.0)) throw InvalidArgument("svcca: var_fraction must lie in (0, 1]");
    const Matrix Xc = center_columns(X);
    const auto s = svd(Xc);
    const Vector energy = s.S.array().square();
    const double total = energy.sum();
    if (total <= 0.0) return Matrix(X.rows(), 0);
    Eigen::Index keep = 0;
    double acc = 0.0;
    const double floor = 1e-12 * energy(0);
    while (keep < energy.size() && energy(keep) > floor) {
        acc += energy(keep);
        ++keep;
        if (acc >= var_fraction * total * (1.0 - 1e-12)) break;
    }
    return s.U.leftCols(keep) * s.S.head(keep).asDiagonal();
}

double svcca_distance(const Matrix& X, const Matrix& Y, double var_fraction, double eps) {
    check_views(X, Y);
    const Matrix tx = truncate_by_variance(X, var_fraction);
    const Matrix ty = truncate_by_variance(Y, var_fraction);
    if (tx.cols() == 0 || ty.cols() == 0) return 1.0;
    const auto cc = cca_correlations(tx, ty, eps);
    if (cc.rho.size() == 0) return 1.0;
    return std::clamp(1.0 - cc.rho.mean(), 0.0, 1.0);
}

}  // namespace repflow

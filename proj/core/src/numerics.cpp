#include "repflow/numerics.hpp"

#include "repflow/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace repflow {

bool all_finite(const Matrix& m) { return m.allFinite(); }

SvdResult svd(const Matrix& A) {
    if (!A.allFinite()) throw InvalidArgument("svd: non-finite input");
    if (A.size() == 0) return {Matrix(A.rows(), 0), Vector(0), Matrix(A.cols(), 0)};
    Eigen::BDCSVD<Matrix> dec(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    // Eigen returns singular values sorted in decreasing order.
    return {dec.matrixU(), dec.singularValues(), dec.matrixV()};
}

Matrix center_columns(const Matrix& X) {
    const Eigen::RowVectorXd mean = X.colwise().mean();
    return X.rowwise() - mean;
}

Whitened center_whiten(const Matrix& X, double eps) {
    if (X.rows() < 2) throw InvalidArgument("center_whiten: need at least 2 rows");
    if (!X.allFinite()) throw InvalidArgument("center_whiten: non-finite input");
    if (eps < 0) throw InvalidArgument("center_whiten: eps must be non-negative");
    Whitened w;
    w.mean = X.colwise().mean();
    const Matrix Xc = X.rowwise() - w.mean;
    const Matrix cov = (Xc.transpose() * Xc) / static_cast<double>(X.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    // Ascending from Eigen; walk from the top.
    const Vector& evals = es.eigenvalues();
    const Matrix& evecs = es.eigenvectors();
    const auto d = evals.size();
    const double lmax = d > 0 ? std::max(evals(d - 1), 0.0) : 0.0;
    if (lmax <= 0.0) {
        if (eps == 0.0) throw InvalidArgument("center_whiten: zero-variance input with eps = 0");
        w.basis = Matrix(X.cols(), 0);
        w.data = Matrix(X.rows(), 0);
        w.eigenvalues = Vector(0);
        return w;
    }
    const double ridge = eps * lmax;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = d - 1; i >= 0; --i)
        if (evals(i) > ridge && evals(i) > 0.0) keep.push_back(i);
    w.basis.resize(X.cols(), static_cast<Eigen::Index>(keep.size()));
    w.eigenvalues.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) {
        const auto i = keep[j];
        const auto jj = static_cast<Eigen::Index>(j);
        w.eigenvalues(jj) = evals(i);
        w.basis.col(jj) = evecs.col(i) / std::sqrt(evals(i) + ridge);
    }
    w.data = Xc * w.basis;
    return w;
}

namespace {

/// Squared euclidean distances between every row of `points` and every centroid (N x C).
Matrix squared_distances(const Matrix& points, const Matrix& centroids) {
    const Vector pn = points.rowwise().squaredNorm();
    const Vector cn = centroids.rowwise().squaredNorm();
    Matrix d = -2.0 * points * centroids.transpose();
    d.colwise() += pn;
    d.rowwise() += cn.transpose();
    return d;
}

std::vector<std::int32_t> choose_distinct_rows(const Matrix& points, std::size_t count, Rng& rng) {
    const auto n = static_cast<std::size_t>(points.rows());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::vector<std::int32_t> chosen;
    chosen.reserve(count);
    auto same = [&](std::size_t a, std::size_t b) { return points.row(static_cast<Eigen::Index>(a)) == points.row(static_cast<Eigen::Index>(b)); };
    // Hash rows by bit content so exact duplicates are skipped.
    std::unordered_multiset<std::size_t> seen_hashes;
    std::vector<std::pair<std::size_t, std::size_t>> seen;  // (hash, row)
    for (auto idx : order) {
        if (chosen.size() == count) break;
        std::size_t h = 0;
        for (Eigen::Index c = 0; c < points.cols(); ++c) {
            double v = points(static_cast<Eigen::Index>(idx), c);
            if (v == 0.0) v = 0.0;  // fold -0
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            h = static_cast<std::size_t>(Rng::mix(h ^ bits));
        }
        bool dup = false;
        if (seen_hashes.count(h))
            for (const auto& [hh, row] : seen)
                if (hh == h && same(row, idx)) {
                    dup = true;
                    break;
                }
        if (dup) continue;
        seen_hashes.insert(h);
        seen.emplace_back(h, idx);
        chosen.push_back(static_cast<std::int32_t>(idx));
    }
    if (chosen.size() < count)
        throw InvalidArgument("minibatch_kmeans: requested " + std::to_string(count) + " clusters but only " +
                              std::to_string(chosen.size()) + " distinct points");
    return chosen;
}

Matrix kmeans_pp_init(const Matrix& points, std::size_t count, Rng& rng) {
    const auto n = points.rows();
    Matrix centroids(static_cast<Eigen::Index>(count), points.cols());
    centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n))));
    Vector best = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
    for (std::size_t c = 1; c < count; ++c) {
        const double total = best.sum();
        if (total <= 0.0) throw InvalidArgument("minibatch_kmeans: fewer distinct points than clusters");
        double u = rng.uniform() * total;
        Eigen::Index pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
            u -= best(i);
            if (u < 0.0) {
                pick = i;
                break;
            }
        }
        while (best(pick) <= 0.0 && pick > 0) --pick;
        centroids.row(static_cast<Eigen::Index>(c)) = points.row(pick);
        best = best.cwiseMin((points.rowwise() - centroids.row(static_cast<Eigen::Index>(c))).rowwise().squaredNorm());
    }
    return centroids;
}

double exact_inertia(const Matrix& points, const Matrix& centroids, const std::vector<std::int32_t>& assign) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i)
        total += (points.row(i) - centroids.row(assign[static_cast<std::size_t>(i)])).squaredNorm();
    return total;
}

}  // namespace

std::vector<std::int32_t> assign_nearest(const Matrix& points, const Matrix& centroids, double* inertia) {
    std::vector<std::int32_t> out(static_cast<std::size_t>(points.rows()));
    constexpr Eigen::Index kBlock = 4096;
    for (Eigen::Index start = 0; start < points.rows(); start += kBlock) {
        const auto len = std::min(kBlock, points.rows() - start);
        const Matrix d = squared_distances(points.middleRows(start, len), centroids);
        for (Eigen::Index i = 0; i < len; ++i) {
            Eigen::Index best = 0;
            double bv = d(i, 0);
            for (Eigen::Index c = 1; c < d.cols(); ++c)
                if (d(i, c) < bv) {
                    bv = d(i, c);
                    best = c;
                }
            out[static_cast<std::size_t>(start + i)] = static_cast<std::int32_t>(best);
        }
    }
    if (inertia) *inertia = exact_inertia(points, centroids, out);
    return out;
}

ClusteringResult minibatch_kmeans(const Matrix& points, const KMeansOptions& opt) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (n == 0) throw InvalidArgument("minibatch_kmeans: empty input");
    if (opt.clusters == 0) throw InvalidArgument("minibatch_kmeans: cluster count must be positive");
    if (opt.clusters > n)
        throw InvalidArgument("minibatch_kmeans: " + std::to_string(opt.clusters) + " clusters for " +
                              std::to_string(n) + " points");
    if (opt.batch_size == 0) throw InvalidArgument("minibatch_kmeans: batch_size must be >= 1");
    if (!points.allFinite()) throw InvalidArgument("minibatch_kmeans: non-finite input");

    Rng rng(opt.seed);
    Rng init_rng = rng.substream("init");
    Rng batch_rng = rng.substream("batches");

    ClusteringResult res;
    if (opt.kmeans_plus_plus) {
        res.centroids = kmeans_pp_init(points, opt.clusters, init_rng);
    } else {
        const auto rows = choose_distinct_rows(points, opt.clusters, init_rng);
        res.centroids.resize(static_cast<Eigen::Index>(opt.clusters), points.cols());
        for (std::size_t c = 0; c < rows.size(); ++c) res.centroids.row(static_cast<Eigen::Index>(c)) = points.row(rows[c]);
    }

    const bool full_batch = opt.batch_size >= n;
    std::size_t iters = opt.iterations;
    if (iters == 0)
        iters = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(opt.epochs * static_cast<double>(n) /
                                                                            static_cast<double>(opt.batch_size))));

    if (full_batch) {
        std::vector<std::int32_t> assign;
        double inertia = 0.0;
        assign = assign_nearest(points, res.centroids, &inertia);
        res.round_inertia.push_back(inertia);
        for (std::size_t it = 0; it < iters; ++it) {
            Matrix sums = Matrix::Zero(res.centroids.rows(), res.centroids.cols());
            std::vector<std::size_t> counts(opt.clusters, 0);
            for (std::size_t i = 0; i < n; ++i) {
                sums.row(assign[i]) += points.row(static_cast<Eigen::Index>(i));
                ++counts[static_cast<std::size_t>(assign[i])];
            }
            for (std::size_t c = 0; c < opt.clusters; ++c)
                if (counts[c] > 0) res.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
            auto next = assign_nearest(points, res.centroids, &inertia);
            res.round_inertia.push_back(inertia);
            const bool converged = next == assign;
            assign = std::move(next);
            if (converged) break;
        }
    } else {
        std::vector<std::size_t> counts(opt.clusters, 0);
        Matrix batch(static_cast<Eigen::Index>(opt.batch_size), points.cols());
        std::vector<std::size_t> idx(opt.batch_size);
        for (std::size_t it = 0; it < iters; ++it) {
            for (std::size_t b = 0; b < opt.batch_size; ++b) {
                idx[b] = static_cast<std::size_t>(batch_rng.uniform_int(n));
                batch.row(static_cast<Eigen::Index>(b)) = points.row(static_cast<Eigen::Index>(idx[b]));
            }
            const auto assign = assign_nearest(batch, res.centroids);
            for (std::size_t b = 0; b < opt.batch_size; ++b) {
                const auto c = static_cast<std::size_t>(assign[b]);
                const double eta = 1.0 / static_cast<double>(++counts[c]);
                auto row = res.centroids.row(static_cast<Eigen::Index>(c));
                row = (1.0 - eta) * row + eta * batch.row(static_cast<Eigen::Index>(b));
            }
        }
    }
    res.assignments = assign_nearest(points, res.centroids, &res.inertia);
    return res;
}

namespace {

double exact_distance(const Matrix& queries, Eigen::Index q, const Matrix& pool, Eigen::Index p, Metric metric,
                      const Vector& qn, const Vector& pn) {
    if (metric == Metric::Euclidean) return (queries.row(q) - pool.row(p)).squaredNorm();
    if (qn(q) == 0.0 || pn(p) == 0.0) return 1.0;
    double dot = 0.0;
    for (Eigen::Index c = 0; c < pool.cols(); ++c) dot += queries(q, c) * pool(p, c);
    return 1.0 - dot / (qn(q) * pn(p));
}

}  // namespace

std::vector<std::vector<std::int32_t>> knn(const Matrix& queries, const Matrix& pool, std::size_t k, Metric metric,
                                           const std::vector<std::int32_t>* self_index) {
    const auto m = static_cast<std::size_t>(pool.rows());
    if (queries.cols() != pool.cols()) throw InvalidArgument("knn: query and pool dimensions differ");
    if (self_index && self_index->size() != static_cast<std::size_t>(queries.rows()))
        throw InvalidArgument("knn: self_index length must equal the number of queries");

    std::vector<std::int32_t> self(static_cast<std::size_t>(queries.rows()), -1);
    if (self_index) {
        self = *self_index;
    } else {
        // A query that occurs in the pool is that occurrence: exclude the first exact match.
        for (Eigen::Index q = 0; q < queries.rows(); ++q)
            for (Eigen::Index p = 0; p < pool.rows(); ++p)
                if (queries.row(q) == pool.row(p)) {
                    self[static_cast<std::size_t>(q)] = static_cast<std::int32_t>(p);
                    break;
                }
    }
    for (auto s : self)
        if (k > m - (s >= 0 ? 1 : 0)) throw InvalidArgument("knn: k exceeds the available pool size");
    if (k == 0) return std::vector<std::vector<std::int32_t>>(static_cast<std::size_t>(queries.rows()));

    Vector qn, pn;
    const double pool_max_sq = pool.rows() > 0 ? pool.rowwise().squaredNorm().maxCoeff() : 0.0;
    if (metric == Metric::Cosine) {
        qn = queries.rowwise().norm();
        pn = pool.rowwise().norm();
    }

    std::vector<std::vector<std::int32_t>> out(static_cast<std::size_t>(queries.rows()));
    constexpr Eigen::Index kBlock = 512;
    std::vector<std::pair<double, std::int32_t>> cand;
    std::vector<double> row_vals(m);
    for (Eigen::Index start = 0; start < queries.rows(); start += kBlock) {
        const auto len = std::min(kBlock, queries.rows() - start);
        Matrix approx;
        if (metric == Metric::Euclidean) {
            approx = squared_distances(queries.middleRows(start, len), pool);
        } else {
            approx = queries.middleRows(start, len) * pool.transpose();
            for (Eigen::Index i = 0; i < len; ++i)
                for (Eigen::Index p = 0; p < pool.rows(); ++p) {
                    const double a = qn(start + i), b = pn(p);
                    approx(i, p) = (a == 0.0 || b == 0.0) ? 1.0 : 1.0 - approx(i, p) / (a * b);
                }
        }
        for (Eigen::Index i = 0; i < len; ++i) {
            const auto q = start + i;
            const auto s = self[static_cast<std::size_t>(q)];
            for (std::size_t p = 0; p < m; ++p) row_vals[p] = approx(i, static_cast<Eigen::Index>(p));
            if (s >= 0) row_vals[static_cast<std::size_t>(s)] = std::numeric_limits<double>::infinity();
            // The GEMM route is only a filter: everything within a rounding margin of the
            // k-th value is rescored exactly before ordering.
            std::vector<double> sorted(row_vals);
            std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
            const double kth = sorted[k - 1];
            const double scale = metric == Metric::Euclidean
                                     ? std::max({1.0, std::abs(kth), queries.row(q).squaredNorm(), pool_max_sq})
                                     : 1.0;
            const double margin = 1e-9 * scale;
            cand.clear();
            for (std::size_t p = 0; p < m; ++p)
                if (static_cast<std::int32_t>(p) != s && row_vals[p] <= kth + margin)
                    cand.emplace_back(exact_distance(queries, q, pool, static_cast<Eigen::Index>(p), metric, qn, pn),
                                      static_cast<std::int32_t>(p));
            std::sort(cand.begin(), cand.end());
            auto& res = out[static_cast<std::size_t>(q)];
            res.reserve(k);
            for (std::size_t j = 0; j < k; ++j) res.push_back(cand[j].second);
        }
    }
    return out;
}

std::vector<std::vector<std::int32_t>> knn_self(const Matrix& pool, std::size_t k, Metric metric) {
    std::vector<std::int32_t> self(static_cast<std::size_t>(pool.rows()));
    std::iota(self.begin(), self.end(), 0);
    return knn(pool, pool, k, metric, &self);
}

}  // namespace repflow

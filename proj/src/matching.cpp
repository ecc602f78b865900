#include "uaom/matching.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <utility>

#include <json.hpp>

namespace uaom {

std::size_t MatchSet::inlier_count() const {
  return static_cast<std::size_t>(std::count(inlier_flags.begin(), inlier_flags.end(), true));
}

std::vector<Match> ratio_match(const DistanceMatrix& d, double ratio_threshold) {
  if (d.cols < 2) throw std::invalid_argument("ratio_match: need at least two candidates per row");
  std::vector<Match> out;
  for (std::size_t i = 0; i < d.rows; ++i) {
    std::size_t best = 0;
    float d1 = std::numeric_limits<float>::infinity(), d2 = d1;
    for (std::size_t j = 0; j < d.cols; ++j) {
      const float v = d.at(i, j);
      if (v < d1) {
        d2 = d1;
        d1 = v;
        best = j;
      } else if (v < d2) {
        d2 = v;
      }
    }
    const float ratio = d2 > 0.0f ? d1 / d2 : 1.0f;
    if (ratio < ratio_threshold) {
      Match m;
      m.idx_a = i;
      m.idx_b = best;
      m.dist = d1;
      m.ratio = ratio;
      out.push_back(m);
    }
  }
  return out;
}

void attach_points(std::vector<Match>& matches, const std::vector<Keypoint>& kps_a,
                   const std::vector<Keypoint>& kps_b) {
  for (Match& m : matches) {
    const Keypoint& a = kps_a.at(m.idx_a);
    const Keypoint& b = kps_b.at(m.idx_b);
    m.pt_a = {a.x, a.y};
    m.pt_b = {b.x, b.y};
  }
}

std::vector<Match> cross_check(const std::vector<Match>& m_ab, const std::vector<Match>& m_ba) {
  std::set<std::pair<std::size_t, std::size_t>> back;
  for (const Match& m : m_ba) back.emplace(m.idx_a, m.idx_b);
  std::vector<Match> out;
  for (const Match& m : m_ab)
    if (back.contains({m.idx_b, m.idx_a})) out.push_back(m);
  return out;
}

Point2 apply(const Mat3& h, Point2 p) {
  const double w = h[6] * p.x + h[7] * p.y + h[8];
  return {(h[0] * p.x + h[1] * p.y + h[2]) / w, (h[3] * p.x + h[4] * p.y + h[5]) / w};
}

namespace {

using Eigen::Matrix3d;

Matrix3d to_eigen(const Mat3& h) {
  Matrix3d m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = h[static_cast<std::size_t>(3 * r + c)];
  return m;
}

std::optional<Mat3> from_eigen(const Matrix3d& m) {
  if (!m.allFinite()) return std::nullopt;
  double s = m(2, 2);
  if (std::abs(s) < 1e-12 * m.norm()) return std::nullopt;
  Mat3 h;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) h[static_cast<std::size_t>(3 * r + c)] = m(r, c) / s;
  return h;
}

// Similarity moving the centroid to the origin with mean distance sqrt(2).
Matrix3d normalizer(const std::vector<Point2>& pts) {
  double cx = 0.0, cy = 0.0;
  for (const Point2& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean = 0.0;
  for (const Point2& p : pts) mean += std::hypot(p.x - cx, p.y - cy);
  mean /= static_cast<double>(pts.size());
  const double s = mean > 0.0 ? std::sqrt(2.0) / mean : 1.0;
  Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

double triangle_area2(const Point2& a, const Point2& b, const Point2& c) {
  return std::abs((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x));
}

bool has_collinear_triple(const std::vector<Point2>& p) {
  double ext = 1.0;
  for (const Point2& q : p) ext = std::max({ext, std::abs(q.x - p[0].x), std::abs(q.y - p[0].y)});
  const double tol = 1e-6 * ext * ext;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j)
      for (std::size_t k = j + 1; k < p.size(); ++k)
        if (triangle_area2(p[i], p[j], p[k]) <= tol) return true;
  return false;
}

std::optional<Mat3> fit_homography(const std::vector<Point2>& a, const std::vector<Point2>& b) {
  const std::size_t n = a.size();
  const Matrix3d ta = normalizer(a), tb = normalizer(b);
  Eigen::MatrixXd m(2 * n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d pa = ta * Eigen::Vector3d(a[i].x, a[i].y, 1.0);
    const Eigen::Vector3d pb = tb * Eigen::Vector3d(b[i].x, b[i].y, 1.0);
    const double x = pa.x(), y = pa.y(), u = pb.x(), v = pb.y();
    const auto r = static_cast<Eigen::Index>(2 * i);
    m.row(r) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    m.row(r + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  // Four points are squared up with a zero row so the full V holds the null
  // vector. A second vanishing singular value means the points do not fix H.
  Eigen::MatrixXd sq = m;
  if (n == 4) {
    sq = Eigen::MatrixXd::Zero(9, 9);
    sq.topRows(8) = m;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sq, Eigen::ComputeFullV);
  const Eigen::VectorXd& sv = svd.singularValues();
  if (!(sv(7) > 1e-9 * sv(0))) return std::nullopt;
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return from_eigen(tb.inverse() * hn * ta);
}

std::optional<Mat3> fit_affine(const std::vector<Point2>& a, const std::vector<Point2>& b) {
  const std::size_t n = a.size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), 3);
  Eigen::MatrixXd rhs(static_cast<Eigen::Index>(n), 2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    m.row(r) << a[i].x, a[i].y, 1.0;
    rhs.row(r) << b[i].x, b[i].y;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  if (qr.rank() < 3) return std::nullopt;
  const Eigen::MatrixXd sol = qr.solve(rhs);
  Matrix3d h;
  h << sol(0, 0), sol(1, 0), sol(2, 0), sol(0, 1), sol(1, 1), sol(2, 1), 0, 0, 1;
  return from_eigen(h);
}

struct Scored {
  std::vector<bool> flags;
  std::size_t count = 0;
  double error_sum = 0.0;
};

Scored score(const Mat3& h, const std::vector<Match>& matches, double thresh) {
  Scored s;
  s.flags.assign(matches.size(), false);
  const auto inv = invert(h);
  if (!inv) return s;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const Point2 fb = apply(h, matches[i].pt_a);
    const Point2 ba = apply(*inv, matches[i].pt_b);
    const double e = std::max(std::hypot(fb.x - matches[i].pt_b.x, fb.y - matches[i].pt_b.y),
                              std::hypot(ba.x - matches[i].pt_a.x, ba.y - matches[i].pt_a.y));
    if (e < thresh) {
      s.flags[i] = true;
      ++s.count;
      s.error_sum += e;
    }
  }
  return s;
}

}  // namespace

std::optional<Mat3> invert(const Mat3& h) {
  const Matrix3d m = to_eigen(h);
  const double det = m.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12 * std::pow(m.norm(), 3)) return std::nullopt;
  return from_eigen(m.inverse());
}

double symmetric_error(const Mat3& h, const Point2& a, const Point2& b) {
  const auto inv = invert(h);
  if (!inv) return std::numeric_limits<double>::infinity();
  const Point2 fb = apply(h, a);
  const Point2 ba = apply(*inv, b);
  return std::max(std::hypot(fb.x - b.x, fb.y - b.y), std::hypot(ba.x - a.x, ba.y - a.y));
}

std::optional<Mat3> fit_model(const std::vector<Point2>& a, const std::vector<Point2>& b, GeometricModel kind) {
  if (a.size() != b.size()) throw std::invalid_argument("fit_model: point lists differ in length");
  if (kind == GeometricModel::kAffine) {
    if (a.size() < 3) return std::nullopt;
    return fit_affine(a, b);
  }
  if (a.size() < 4) return std::nullopt;
  return fit_homography(a, b);
}

RansacResult ransac(const std::vector<Match>& matches, const RansacOptions& opts) {
  if (matches.size() < 4) throw std::invalid_argument("ransac: need at least 4 matches");
  const std::size_t sample = opts.model == GeometricModel::kAffine ? 3 : 4;
  const std::size_t n = matches.size();

  std::mt19937_64 rng(opts.seed ^ 0x2545f4914f6cdd1dULL);
  std::optional<Mat3> best_model;
  Scored best;
  int needed = opts.max_iters;
  int it = 0;
  std::vector<Point2> pa(sample), pb(sample);
  std::vector<std::size_t> idx(sample);
  for (; it < std::min(needed, opts.max_iters); ++it) {
    for (std::size_t k = 0; k < sample; ++k) {
      bool fresh;
      do {
        idx[k] = static_cast<std::size_t>(rng() % n);
        fresh = std::find(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx[k]) ==
                idx.begin() + static_cast<std::ptrdiff_t>(k);
      } while (!fresh);
      pa[k] = matches[idx[k]].pt_a;
      pb[k] = matches[idx[k]].pt_b;
    }
    if (has_collinear_triple(pa) || has_collinear_triple(pb)) continue;
    const auto h = fit_model(pa, pb, opts.model);
    if (!h) continue;
    Scored s = score(*h, matches, opts.thresh_px);
    if (s.count > best.count || (s.count == best.count && s.count > 0 && s.error_sum < best.error_sum)) {
      best = std::move(s);
      best_model = h;
      const double w = static_cast<double>(best.count) / static_cast<double>(n);
      const double p_fail = 1.0 - std::pow(w, static_cast<double>(sample));
      if (p_fail <= 0.0) {
        needed = 0;
      } else if (p_fail < 1.0) {
        const double k = std::log(1.0 - opts.confidence) / std::log(p_fail);
        needed = static_cast<int>(std::min<double>(opts.max_iters, std::ceil(k)));
      }
    }
  }
  if (!best_model || best.count < 4) throw RansacError("ransac: no model with at least 4 inliers");

  // Refit on the consensus set until it stops changing.
  for (int round = 0; round < 20; ++round) {
    std::vector<Point2> a, b;
    for (std::size_t i = 0; i < n; ++i)
      if (best.flags[i]) {
        a.push_back(matches[i].pt_a);
        b.push_back(matches[i].pt_b);
      }
    const auto refit = fit_model(a, b, opts.model);
    if (!refit) break;
    Scored s = score(*refit, matches, opts.thresh_px);
    if (s.count < best.count || (s.count == best.count && s.error_sum >= best.error_sum)) break;
    const bool same = s.flags == best.flags;
    best = std::move(s);
    best_model = refit;
    if (same) break;
  }

  RansacResult r;
  r.model = *best_model;
  r.inliers = std::move(best.flags);
  r.inlier_count = best.count;
  r.iterations = it;
  return r;
}

namespace {

// Pixel-centre convention of resize_bilinear.
Point2 rescale(Point2 p, double s) { return {(p.x + 0.5) * s - 0.5, (p.y + 0.5) * s - 0.5}; }

}  // namespace

MatchSet fuse_and_project(const MatchSet& m_opt, const MatchSet& m_ac, double scale_a, double scale_b,
                          double dedup_radius, const RansacOptions& opts) {
  std::vector<Match> all;
  all.reserve(m_opt.matches.size() + m_ac.matches.size());
  for (int src = 0; src < 2; ++src)
    for (Match m : (src == 0 ? m_opt : m_ac).matches) {
      m.pt_a = rescale(m.pt_a, scale_a);
      m.pt_b = rescale(m.pt_b, scale_b);
      m.source = src;
      all.push_back(m);
    }
  std::stable_sort(all.begin(), all.end(), [](const Match& a, const Match& b) { return a.dist < b.dist; });

  MatchSet out;
  out.src_tag = "fused";
  const double r2 = dedup_radius * dedup_radius;
  auto near = [r2](const Point2& p, const Point2& q) {
    const double dx = p.x - q.x, dy = p.y - q.y;
    return dx * dx + dy * dy <= r2;
  };
  for (const Match& m : all) {
    const bool dup = std::any_of(out.matches.begin(), out.matches.end(), [&](const Match& k) {
      return near(m.pt_a, k.pt_a) && near(m.pt_b, k.pt_b);
    });
    if (!dup) out.matches.push_back(m);
  }

  out.inlier_flags.assign(out.matches.size(), false);
  if (out.matches.size() >= 4) {
    try {
      RansacResult r = ransac(out.matches, opts);
      out.model = r.model;
      out.inlier_flags = std::move(r.inliers);
    } catch (const RansacError&) {
    }
  }
  return out;
}

std::string matches_to_json_lines(const MatchSet& set) {
  std::string out;
  for (std::size_t i = 0; i < set.matches.size(); ++i) {
    const Match& m = set.matches[i];
    nlohmann::ordered_json j;
    j["idx_a"] = m.idx_a;
    j["idx_b"] = m.idx_b;
    j["pt_a"] = {m.pt_a.x, m.pt_a.y};
    j["pt_b"] = {m.pt_b.x, m.pt_b.y};
    j["dist"] = m.dist;
    j["ratio"] = m.ratio;
    j["inlier"] = i < set.inlier_flags.size() && set.inlier_flags[i];
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace uaom

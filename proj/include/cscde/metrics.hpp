#pragma once

// Overlap and surface-distance metrics for label maps of shape (1,1,h,w).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "cscde/errors.hpp"
#include "cscde/tensor.hpp"

namespace cscde {

namespace detail {

inline void require_same_plane(const LabelMap& a, const LabelMap& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + a.shape().str() +
                     " and ground truth " + b.shape().str() + " differ");
  }
  if (a.n() != 1 || a.c() != 1) {
    throw ShapeError(std::string(what) + ": expected a single (1,1,h,w) mask, got " +
                     a.shape().str());
  }
}

// Foreground pixels of class `cls` with a non-class 8-neighbour or touching
// the image border.
inline std::vector<std::uint8_t> boundary_mask(const LabelMap& m, std::uint8_t cls) {
  const long H = static_cast<long>(m.h()), W = static_cast<long>(m.w());
  const std::uint8_t* p = m.data();
  std::vector<std::uint8_t> b(m.size(), 0);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      if (p[y * W + x] != cls) continue;
      bool edge = y == 0 || x == 0 || y == H - 1 || x == W - 1;
      for (long dy = -1; dy <= 1 && !edge; ++dy)
        for (long dx = -1; dx <= 1 && !edge; ++dx) edge = p[(y + dy) * W + x + dx] != cls;
      b[y * W + x] = edge;
    }
  return b;
}

// Exact squared Euclidean distance to the nearest set pixel (Meijster et al.
// two-pass algorithm). Integer arithmetic throughout; `kFar` where the set is
// empty.
inline constexpr long kFar = std::numeric_limits<long>::max() / 4;

inline std::vector<long> squared_edt(const std::vector<std::uint8_t>& set, long H, long W) {
  const long inf = H + W + 1;
  std::vector<long> g(set.size());
  for (long x = 0; x < W; ++x) {
    g[x] = set[x] ? 0 : inf;
    for (long y = 1; y < H; ++y) g[y * W + x] = set[y * W + x] ? 0 : g[(y - 1) * W + x] + 1;
    for (long y = H - 2; y >= 0; --y) {
      if (g[(y + 1) * W + x] < g[y * W + x]) g[y * W + x] = g[(y + 1) * W + x] + 1;
    }
  }
  std::vector<long> dt(set.size(), kFar);
  std::vector<long> s(W), t(W);
  auto f = [&](long x, long i, const long* row) { return (x - i) * (x - i) + row[i] * row[i]; };
  auto sep = [&](long i, long u, const long* row) {
    return (u * u - i * i + row[u] * row[u] - row[i] * row[i]) / (2 * (u - i));
  };
  for (long y = 0; y < H; ++y) {
    const long* row = g.data() + y * W;
    if (std::all_of(row, row + W, [&](long v) { return v >= inf; })) continue;
    long q = 0;
    s[0] = 0;
    t[0] = 0;
    for (long u = 1; u < W; ++u) {
      while (q >= 0 && f(t[q], s[q], row) > f(t[q], u, row)) --q;
      if (q < 0) {
        q = 0;
        s[0] = u;
      } else {
        const long w = 1 + sep(s[q], u, row);
        if (w < W) {
          ++q;
          s[q] = u;
          t[q] = w;
        }
      }
    }
    for (long u = W - 1; u >= 0; --u) {
      dt[y * W + u] = f(u, s[q], row);
      if (u == t[q]) --q;
    }
  }
  return dt;
}

}  // namespace detail

/// Dice similarity of class `cls`; 1 when the class is absent from both masks.
inline double dsc(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("dsc: prediction " + pred.shape().str() + " and ground truth " +
                     gt.shape().str() + " differ");
  }
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == cls, b = gt[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// 95th percentile (linear interpolation between order statistics).
inline double percentile95(std::vector<double> d) {
  if (d.empty()) return 0.0;
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (d[hi] - d[lo]) * (pos - static_cast<double>(lo));
}

/// Pooled symmetric 95th-percentile boundary distance, in pixels. Both masks
/// empty gives 0; exactly one empty gives the image diagonal.
inline double hd95(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  detail::require_same_plane(pred, gt, "hd95");
  const long H = static_cast<long>(pred.h()), W = static_cast<long>(pred.w());
  const auto bp = detail::boundary_mask(pred, cls);
  const auto bg = detail::boundary_mask(gt, cls);
  const bool ep = std::none_of(bp.begin(), bp.end(), [](auto v) { return v; });
  const bool eg = std::none_of(bg.begin(), bg.end(), [](auto v) { return v; });
  if (ep && eg) return 0.0;
  if (ep || eg) return std::sqrt(static_cast<double>(H * H + W * W));
  const auto dp = detail::squared_edt(bp, H, W);
  const auto dg = detail::squared_edt(bg, H, W);
  std::vector<double> d;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) d.push_back(std::sqrt(static_cast<double>(dg[i])));
  }
  for (std::size_t i = 0; i < bg.size(); ++i) {
    if (bg[i]) d.push_back(std::sqrt(static_cast<double>(dp[i])));
  }
  return percentile95(std::move(d));
}

struct ClassScore {
  int cls = 0;
  double dsc = 0;
  double hd95 = 0;
};

/// Metrics averaged over cases, foreground classes only.
struct EvalReport {
  std::vector<ClassScore> per_class;
  double mean_dsc = 0;
  double mean_hd95 = 0;
  std::size_t n_cases = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& c : r.per_class) pc.push_back({{"class", c.cls}, {"dsc", c.dsc}, {"hd95", c.hd95}});
  j = nlohmann::json{
      {"mean_dsc", r.mean_dsc}, {"mean_hd95", r.mean_hd95}, {"per_class", pc}, {"n_cases", r.n_cases}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.mean_dsc = j.at("mean_dsc").get<double>();
  r.mean_hd95 = j.at("mean_hd95").get<double>();
  r.n_cases = j.at("n_cases").get<std::size_t>();
  r.per_class.clear();
  for (const auto& c : j.at("per_class")) {
    r.per_class.push_back({c.at("class").get<int>(), c.at("dsc").get<double>(), c.at("hd95").get<double>()});
  }
}

/// Accumulates per-case scores over the foreground classes. Within a case,
/// classes absent from both prediction and ground truth are left out of the
/// case mean; a case with no foreground anywhere scores dsc 1 and hd95 0. The
/// means are over cases; per-class entries average the cases where the class
/// occurs (dsc 1, hd95 0 if it never does).
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t n_classes)
      : n_classes_(n_classes), dsc_sum_(n_classes, 0), hd_sum_(n_classes, 0), count_(n_classes, 0) {}

  void add(const LabelMap& pred, const LabelMap& gt) {
    detail::require_same_plane(pred, gt, "evaluate");
    std::vector<bool> seen(256, false);
    for (auto v : pred.vec()) seen[v] = true;
    for (auto v : gt.vec()) seen[v] = true;
    double case_dsc = 0, case_hd = 0;
    std::size_t present = 0;
    for (std::size_t k = 1; k < n_classes_; ++k) {
      if (!seen[k]) continue;
      const auto cls = static_cast<std::uint8_t>(k);
      const double d = dsc(pred, gt, cls), h = hd95(pred, gt, cls);
      dsc_sum_[k] += d;
      hd_sum_[k] += h;
      ++count_[k];
      case_dsc += d;
      case_hd += h;
      ++present;
    }
    if (present) {
      mean_dsc_ += case_dsc / static_cast<double>(present);
      mean_hd_ += case_hd / static_cast<double>(present);
    } else {
      mean_dsc_ += 1.0;
    }
    ++cases_;
  }

  EvalReport report() const {
    EvalReport r;
    r.n_cases = cases_;
    for (std::size_t k = 1; k < n_classes_; ++k) {
      ClassScore s{static_cast<int>(k), 1.0, 0.0};
      if (count_[k]) {
        s.dsc = dsc_sum_[k] / static_cast<double>(count_[k]);
        s.hd95 = hd_sum_[k] / static_cast<double>(count_[k]);
      }
      r.per_class.push_back(s);
    }
    if (cases_) {
      r.mean_dsc = mean_dsc_ / static_cast<double>(cases_);
      r.mean_hd95 = mean_hd_ / static_cast<double>(cases_);
    }
    return r;
  }

 private:
  std::size_t n_classes_;
  std::vector<double> dsc_sum_, hd_sum_;
  std::vector<std::size_t> count_;
  double mean_dsc_ = 0, mean_hd_ = 0;
  std::size_t cases_ = 0;
};

/// Scores a predictor over (image, mask) pairs. The predictor maps one image
/// to one label map of the same plane size.
template <typename Image>
EvalReport evaluate(const std::vector<std::pair<Image, LabelMap>>& cases, std::size_t n_classes,
                    const std::function<LabelMap(const Image&)>& predict) {
  MetricAccumulator acc(n_classes);
  for (const auto& [img, gt] : cases) acc.add(predict(img), gt);
  return acc.report();
}

}  // namespace cscde

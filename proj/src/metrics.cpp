#include "skyrm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace skyrm {

ConfusionCounts confusion_from_masks(const ClassMask& pred, const ClassMask& truth, const PositiveRule& rule) {
  if (!pred.same_dims(truth))
    throw ShapeError("confusion_from_masks: prediction is " + dims_str(pred.h, pred.w) + ", truth is " +
                     dims_str(truth.h, truth.w));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = rule(pred.data[i]);
    const bool t = rule(truth.data[i]);
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double mcc(const ConfusionCounts& c) noexcept {
  const double tp = static_cast<double>(c.tp);
  const double tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  const double a = tp + fp, b = tp + fn, d = tn + fp, e = tn + fn;
  if (a == 0.0 || b == 0.0 || d == 0.0 || e == 0.0) return 0.0;
  const double r = (tp * tn - fp * fn) / (std::sqrt(a) * std::sqrt(b) * std::sqrt(d) * std::sqrt(e));
  return std::clamp(r, -1.0, 1.0);
}

std::vector<Component> connected_components(const ClassMask& mask, int class_id, Connectivity connectivity) {
  if (class_id < 0 || class_id > kDefect)
    throw ConfigError("connected_components: invalid class id " + std::to_string(class_id));
  const auto target = static_cast<std::uint8_t>(class_id);
  const int h = mask.h, w = mask.w;
  std::vector<std::int32_t> label(mask.size(), -1);
  std::vector<Component> out;
  std::vector<std::int32_t> stack;

  static constexpr int dy8[] = {-1, -1, -1, 0, 0, 1, 1, 1};
  static constexpr int dx8[] = {-1, 0, 1, -1, 1, -1, 0, 1};
  static constexpr int dy4[] = {-1, 0, 0, 1};
  static constexpr int dx4[] = {0, -1, 1, 0};
  const bool eight = connectivity == Connectivity::eight;
  const int nn = eight ? 8 : 4;
  const int* dy = eight ? dy8 : dy4;
  const int* dx = eight ? dx8 : dx4;

  for (std::int32_t start = 0; start < static_cast<std::int32_t>(mask.size()); ++start) {
    if (mask.data[start] != target || label[start] >= 0) continue;
    const auto id = static_cast<std::int32_t>(out.size());
    Component comp;
    comp.top = start / w;
    comp.left = start % w;
    label[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::int32_t p = stack.back();
      stack.pop_back();
      comp.pixels.push_back(p);
      const int y = p / w, x = p % w;
      for (int k = 0; k < nn; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const std::int32_t q = ny * w + nx;
        if (mask.data[q] == target && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
    std::sort(comp.pixels.begin(), comp.pixels.end());
    comp.size = static_cast<int>(comp.pixels.size());
    double sy = 0.0, sx = 0.0;
    for (std::int32_t p : comp.pixels) {
      sy += p / w;
      sx += p % w;
    }
    comp.centroid_y = sy / comp.size;
    comp.centroid_x = sx / comp.size;
    out.push_back(std::move(comp));
  }
  return out;
}

std::vector<double> uniform_edges(double lo, double hi, double width) {
  if (!(width > 0.0) || !(hi > lo)) throw ConfigError("uniform_edges: need hi > lo and width > 0");
  std::vector<double> e;
  const auto n = static_cast<std::size_t>(std::ceil((hi - lo) / width - 1e-9));
  for (std::size_t i = 0; i <= n; ++i) e.push_back(std::min(hi, lo + width * static_cast<double>(i)));
  return e;
}

namespace {

std::optional<std::size_t> find_secondary_mode(const std::vector<std::uint64_t>& c, std::size_t primary) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (i == primary || c[i] == 0) continue;
    const bool left_ok = i == 0 || c[i] > c[i - 1];
    const bool right_ok = i + 1 == c.size() || c[i] >= c[i + 1];
    if (!left_ok || !right_ok) continue;
    // Require a valley below half the peak between it and the primary mode.
    const std::size_t lo = std::min(i, primary), hi = std::max(i, primary);
    std::uint64_t valley = c[i];
    for (std::size_t j = lo + 1; j < hi; ++j) valley = std::min(valley, c[j]);
    if (2 * valley >= c[i]) continue;
    if (!best || c[i] > c[*best]) best = i;
  }
  return best;
}

}  // namespace

SizeHistogram size_histogram(std::span<const ClassMask> masks, int class_id, std::span<const double> edges,
                             Connectivity connectivity) {
  if (edges.size() < 2) throw ConfigError("size_histogram: need at least two bin edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw ConfigError("size_histogram: bin edges must be strictly increasing");

  SizeHistogram hist;
  hist.edges.assign(edges.begin(), edges.end());
  hist.counts.assign(edges.size() - 1, 0);
  for (const auto& m : masks)
    for (const auto& comp : connected_components(m, class_id, connectivity)) hist.sizes.push_back(comp.size);

  for (int s : hist.sizes) {
    if (s < edges.front()) continue;
    auto it = std::upper_bound(edges.begin(), edges.end(), static_cast<double>(s));
    auto bin = static_cast<std::size_t>(it - edges.begin()) - 1;
    hist.counts[std::min(bin, hist.counts.size() - 1)]++;
  }
  if (hist.sizes.empty()) return hist;

  hist.mean = std::accumulate(hist.sizes.begin(), hist.sizes.end(), 0.0) / static_cast<double>(hist.sizes.size());
  std::vector<int> sorted = hist.sizes;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  hist.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const auto primary =
      static_cast<std::size_t>(std::max_element(hist.counts.begin(), hist.counts.end()) - hist.counts.begin());
  if (hist.counts[primary] > 0) {
    hist.primary_mode = primary;
    hist.secondary_mode = find_secondary_mode(hist.counts, primary);
  }
  return hist;
}

int speckle_count(const ClassMask& mask, int class_id, int max_size, Connectivity connectivity) {
  int n = 0;
  for (const auto& comp : connected_components(mask, class_id, connectivity))
    if (comp.size <= max_size) ++n;
  return n;
}

std::vector<double> class_fractions(const ClassMask& mask, int num_classes) {
  std::vector<double> f(static_cast<std::size_t>(num_classes), 0.0);
  if (mask.empty()) return f;
  for (std::uint8_t v : mask.data)
    if (v < num_classes) f[v] += 1.0;
  for (double& x : f) x /= static_cast<double>(mask.size());
  return f;
}

}  // namespace skyrm

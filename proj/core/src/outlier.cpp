#include "qarvd/outlier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace qarvd {

namespace {

double sorted_median(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const std::set<std::string>& known_layer_types() {
  static const std::set<std::string> types = {
      "self_attn.q",  "self_attn.k",  "self_attn.v",  "self_attn.o",
      "cross_attn.q", "cross_attn.k", "cross_attn.v", "cross_attn.o",
      "ffn.0",        "ffn.2"};
  return types;
}

}  // namespace

MadResult mad(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mad: empty vector");
  std::vector<double> tmp = v;
  MadResult r;
  r.median = sorted_median(tmp);
  for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = std::fabs(v[i] - r.median);
  r.mad = sorted_median(tmp);
  return r;
}

std::vector<size_t> detect_outliers(const std::vector<double>& norms, double tau,
                                    double alpha_min) {
  if (norms.empty()) throw std::invalid_argument("detect_outliers: empty norm vector");
  if (!(tau > 0.0)) throw std::invalid_argument("detect_outliers: tau must be positive");
  if (!(alpha_min > 1.0)) throw std::invalid_argument("detect_outliers: alpha_min must exceed 1");
  const MadResult m = mad(norms);
  const double threshold =
      std::max(m.median + (tau / kModifiedZScoreFactor) * m.mad, alpha_min * m.median);
  std::vector<size_t> out;
  for (size_t i = 0; i < norms.size(); ++i)
    if (norms[i] > threshold) out.push_back(i);
  return out;
}

std::vector<size_t> align_outliers(const std::vector<size_t>& raw,
                                   const std::vector<double>& norms, size_t align) {
  if (align == 0) throw std::invalid_argument("align_outliers: align must be >= 1");
  if (raw.empty()) return {};
  const size_t d_in = norms.size();
  if (d_in < 2 * align) return raw;  // too narrow to carve tiles; keep raw set

  size_t target = ((raw.size() + align - 1) / align) * align;
  const size_t cap = d_in - align;  // normal group keeps at least one tile
  if (target > cap) {
    target = (cap / align) * align;
    if (target < raw.size()) return raw;  // cannot align without dropping true outliers
  }

  // target largest-norm channels, ties broken by lower index
  std::vector<size_t> order(d_in);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (norms[a] != norms[b]) return norms[a] > norms[b];
    return a < b;
  });
  std::vector<size_t> aligned(order.begin(), order.begin() + static_cast<long>(target));
  std::sort(aligned.begin(), aligned.end());
  return aligned;
}

OutlierReport analyze_norms(const std::string& layer_name, std::vector<double> norms,
                            double tau, double alpha_min, size_t align) {
  OutlierReport rep;
  rep.layer_name = layer_name;
  rep.tau = tau;
  rep.alpha_min = alpha_min;
  rep.align = align;
  rep.norms = std::move(norms);
  const MadResult m = mad(rep.norms);
  rep.median = m.median;
  rep.mad = m.mad;
  rep.threshold =
      std::max(m.median + (tau / kModifiedZScoreFactor) * m.mad, alpha_min * m.median);
  rep.raw_outliers = detect_outliers(rep.norms, tau, alpha_min);
  rep.aligned_outliers = align_outliers(rep.raw_outliers, rep.norms, align);
  return rep;
}

OutlierReport analyze_layer(const std::string& layer_name, const Tensor& w, double tau,
                            double alpha_min, size_t align) {
  const Tensor norms = channel_l2_norms(w, 1);
  return analyze_norms(layer_name, norms.vec(), tau, alpha_min, align);
}

ParsedLayerName parse_layer_name(const std::string& name) {
  const std::string prefix = "block";
  auto fail = [&]() -> ParsedLayerName {
    throw std::invalid_argument("layer name does not match block{i}.{type}: " + name);
  };
  if (name.rfind(prefix, 0) != 0) return fail();
  size_t pos = prefix.size();
  size_t digits = 0;
  size_t block = 0;
  while (pos < name.size() && std::isdigit(static_cast<unsigned char>(name[pos]))) {
    block = block * 10 + static_cast<size_t>(name[pos] - '0');
    ++pos;
    ++digits;
  }
  if (digits == 0 || pos >= name.size() || name[pos] != '.') return fail();
  const std::string type = name.substr(pos + 1);
  if (known_layer_types().count(type) == 0) return fail();
  return {block, type};
}

FleetStats fleet_outlier_stats(const std::vector<OutlierReport>& reports) {
  FleetStats stats;
  std::map<std::string, size_t> hit_by_type;
  std::map<size_t, size_t> hit_by_depth;
  for (const auto& rep : reports) {
    const ParsedLayerName p = parse_layer_name(rep.layer_name);
    stats.layers_by_type[p.type] += 1;
    stats.layers_by_depth[p.block] += 1;
    if (rep.has_outliers()) {
      hit_by_type[p.type] += 1;
      hit_by_depth[p.block] += 1;
    }
  }
  for (const auto& [type, total] : stats.layers_by_type)
    stats.ratio_by_type[type] =
        static_cast<double>(hit_by_type.count(type) ? hit_by_type[type] : 0) /
        static_cast<double>(total);
  for (const auto& [depth, total] : stats.layers_by_depth)
    stats.ratio_by_depth[depth] =
        static_cast<double>(hit_by_depth.count(depth) ? hit_by_depth[depth] : 0) /
        static_cast<double>(total);
  return stats;
}

}  // namespace qarvd

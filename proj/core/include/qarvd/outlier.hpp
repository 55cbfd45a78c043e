#ifndef QARVD_OUTLIER_HPP
#define QARVD_OUTLIER_HPP

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "qarvd/tensor.hpp"

namespace qarvd {

inline constexpr double kModifiedZScoreFactor = 0.6745;
inline constexpr double kDefaultTau = 3.5;
inline constexpr double kDefaultAlphaMin = 1.2;
inline constexpr size_t kDefaultAlign = 32;

struct MadResult {
  double median = 0.0;
  double mad = 0.0;
};

// Median by midpoint of the two central order statistics for even n;
// MAD = median(|v_i - median(v)|).
MadResult mad(const std::vector<double>& v);

// Channels whose norm exceeds max(median + (tau/0.6745)*MAD, alpha_min*median).
// The division-free form keeps MAD = 0 well-defined: the minimum-magnitude
// guard alpha_min*median takes over for very smooth layers.
std::vector<size_t> detect_outliers(const std::vector<double>& norms,
                                    double tau = kDefaultTau,
                                    double alpha_min = kDefaultAlphaMin);

// Pads the detected set up to the next multiple of `align` with the
// next-largest-norm channels (ties broken by lower index), capped so the
// normal group keeps at least one `align`-wide tile. Alignment is skipped
// entirely when d_in < 2*align.
std::vector<size_t> align_outliers(const std::vector<size_t>& raw,
                                   const std::vector<double>& norms,
                                   size_t align = kDefaultAlign);

struct OutlierReport {
  std::string layer_name;
  std::vector<double> norms;  // per input channel
  double median = 0.0;
  double mad = 0.0;
  double threshold = 0.0;
  double tau = kDefaultTau;
  double alpha_min = kDefaultAlphaMin;
  size_t align = kDefaultAlign;
  std::vector<size_t> raw_outliers;      // sorted
  std::vector<size_t> aligned_outliers;  // sorted, |.| multiple of align or 0

  bool has_outliers() const { return !raw_outliers.empty(); }
};

// Full per-layer analysis on a weight stored [d_out x d_in]; norms are taken
// over the input channels (columns).
OutlierReport analyze_layer(const std::string& layer_name, const Tensor& w,
                            double tau = kDefaultTau, double alpha_min = kDefaultAlphaMin,
                            size_t align = kDefaultAlign);

OutlierReport analyze_norms(const std::string& layer_name, std::vector<double> norms,
                            double tau = kDefaultTau, double alpha_min = kDefaultAlphaMin,
                            size_t align = kDefaultAlign);

// Fraction of layers with at least one detected outlier channel, grouped by
// layer type and by block depth. Layer names must follow "block{i}.{type}"
// with type one of self_attn.{q,k,v,o}, cross_attn.{q,k,v,o}, ffn.0, ffn.2.
struct FleetStats {
  std::map<std::string, double> ratio_by_type;
  std::map<size_t, double> ratio_by_depth;
  std::map<std::string, size_t> layers_by_type;  // denominator per type
  std::map<size_t, size_t> layers_by_depth;
};

FleetStats fleet_outlier_stats(const std::vector<OutlierReport>& reports);

// Parses "block{i}.{type}"; throws naming the offender if the grammar does
// not match.
struct ParsedLayerName {
  size_t block = 0;
  std::string type;
};
ParsedLayerName parse_layer_name(const std::string& name);

}  // namespace qarvd

#endif  // QARVD_OUTLIER_HPP

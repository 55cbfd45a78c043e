#ifndef QARVD_DUAL_SCALE_HPP
#define QARVD_DUAL_SCALE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "qarvd/outlier.hpp"
#include "qarvd/quant.hpp"
#include "qarvd/tensor.hpp"

namespace qarvd {

// Split of a weight's input channels into an outlier group and a normal
// group, each quantized per output channel with its own symmetric scales.
// Disabled plans carry the single-scale baseline in params_normal so
// downstream code has exactly one path.
struct DualScalePlan {
  std::string layer_name;
  bool enabled = false;
  size_t d_in = 0;
  std::vector<size_t> outlier_indices;  // sorted
  std::vector<size_t> normal_indices;   // sorted complement
  std::vector<uint32_t> permutation;    // [outlier | normal] over original column ids
  QuantParams params_outlier;           // per output row, over outlier columns
  QuantParams params_normal;            // per output row, over normal columns

  size_t outlier_count() const { return outlier_indices.size(); }
  bool is_outlier_column(size_t col) const;
  std::vector<uint32_t> inverse_permutation() const;
};

DualScalePlan build_plan(const Tensor& w, const OutlierReport& report, int bits);

// Single-scale plan (per-output-row symmetric minmax), used when dual-scale
// is turned off or no outliers were detected.
DualScalePlan build_single_scale_plan(const std::string& layer_name, const Tensor& w, int bits);

// Columns in the outlier group fake-quantized with params_outlier, others
// with params_normal, reassembled in the original column order.
Tensor fake_quant_dual(const Tensor& w, const DualScalePlan& plan);

}  // namespace qarvd

#endif  // QARVD_DUAL_SCALE_HPP

#include "qarvd/dual_scale.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace qarvd {

namespace {

// per-output-row symmetric minmax scales restricted to a column subset
std::vector<double> row_scales_over_columns(const Tensor& w, const std::vector<size_t>& cols,
                                            int bits) {
  const double qmax = static_cast<double>(QuantParams::symmetric_max(bits));
  const double tiny = std::numeric_limits<double>::min();
  std::vector<double> scales(w.rows(), tiny);
  for (size_t r = 0; r < w.rows(); ++r) {
    double absmax = 0.0;
    for (size_t c : cols) absmax = std::max(absmax, std::fabs(w.at(r, c)));
    if (absmax > 0.0) scales[r] = absmax / qmax;
  }
  return scales;
}

std::vector<size_t> all_columns(size_t d_in) {
  std::vector<size_t> cols(d_in);
  for (size_t i = 0; i < d_in; ++i) cols[i] = i;
  return cols;
}

}  // namespace

bool DualScalePlan::is_outlier_column(size_t col) const {
  return std::binary_search(outlier_indices.begin(), outlier_indices.end(), col);
}

std::vector<uint32_t> DualScalePlan::inverse_permutation() const {
  std::vector<uint32_t> inv(permutation.size());
  for (size_t i = 0; i < permutation.size(); ++i) inv[permutation[i]] = static_cast<uint32_t>(i);
  return inv;
}

DualScalePlan build_single_scale_plan(const std::string& layer_name, const Tensor& w, int bits) {
  DualScalePlan plan;
  plan.layer_name = layer_name;
  plan.enabled = false;
  plan.d_in = w.cols();
  plan.normal_indices = all_columns(plan.d_in);
  plan.permutation.resize(plan.d_in);
  for (size_t i = 0; i < plan.d_in; ++i) plan.permutation[i] = static_cast<uint32_t>(i);
  plan.params_normal = QuantParams::per_channel_symmetric(
      bits, 0, row_scales_over_columns(w, plan.normal_indices, bits));
  plan.params_outlier = plan.params_normal;
  return plan;
}

DualScalePlan build_plan(const Tensor& w, const OutlierReport& report, int bits) {
  if (w.rank() != 2) throw std::invalid_argument("build_plan: weight must be 2-D");
  const size_t d_in = w.cols();
  if (!report.norms.empty() && report.norms.size() != d_in)
    throw std::invalid_argument("build_plan: report does not match the weight's input width");
  for (size_t idx : report.aligned_outliers)
    if (idx >= d_in) throw std::out_of_range("build_plan: outlier index out of range");

  if (report.aligned_outliers.empty())
    return build_single_scale_plan(report.layer_name, w, bits);

  DualScalePlan plan;
  plan.layer_name = report.layer_name;
  plan.enabled = true;
  plan.d_in = d_in;
  plan.outlier_indices = report.aligned_outliers;
  plan.normal_indices.reserve(d_in - plan.outlier_indices.size());
  for (size_t c = 0; c < d_in; ++c)
    if (!std::binary_search(plan.outlier_indices.begin(), plan.outlier_indices.end(), c))
      plan.normal_indices.push_back(c);
  if (plan.normal_indices.empty())
    throw std::invalid_argument("build_plan: outlier set would leave no normal channels");

  plan.permutation.reserve(d_in);
  for (size_t c : plan.outlier_indices) plan.permutation.push_back(static_cast<uint32_t>(c));
  for (size_t c : plan.normal_indices) plan.permutation.push_back(static_cast<uint32_t>(c));

  plan.params_outlier = QuantParams::per_channel_symmetric(
      bits, 0, row_scales_over_columns(w, plan.outlier_indices, bits));
  plan.params_normal = QuantParams::per_channel_symmetric(
      bits, 0, row_scales_over_columns(w, plan.normal_indices, bits));
  return plan;
}

Tensor fake_quant_dual(const Tensor& w, const DualScalePlan& plan) {
  if (w.rank() != 2 || w.cols() != plan.d_in)
    throw std::invalid_argument("fake_quant_dual: weight does not match plan");
  const int32_t qmax = plan.params_normal.q_max;
  const int32_t qmin = plan.params_normal.q_min;
  Tensor out({w.rows(), w.cols()});
  std::vector<uint8_t> outlier_mask(plan.d_in, 0);
  for (size_t c : plan.outlier_indices) outlier_mask[c] = 1;
  for (size_t r = 0; r < w.rows(); ++r) {
    const double s_out = plan.params_outlier.scale[r];
    const double s_norm = plan.params_normal.scale[r];
    for (size_t c = 0; c < w.cols(); ++c) {
      const double v = w.at(r, c);
      if (!std::isfinite(v))
        throw std::invalid_argument("fake_quant_dual: non-finite weight element");
      const double s = (plan.enabled && outlier_mask[c]) ? s_out : s_norm;
      const int64_t code = std::clamp(static_cast<int64_t>(round_half_even(v / s)),
                                      static_cast<int64_t>(qmin), static_cast<int64_t>(qmax));
      out.at(r, c) = static_cast<double>(code) * s;
    }
  }
  return out;
}

}  // namespace qarvd

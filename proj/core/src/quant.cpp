#include "qarvd/quant.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace qarvd {

namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 30)
    throw std::invalid_argument("bit width out of supported range [2,30]: " + std::to_string(bits));
}

// quantile of an ascending-sorted vector, linear interpolation between
// order statistics (the numpy "linear" method)
double interpolated_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty vector");
  if (sorted.size() == 1) return sorted[0];
  const double h = q * static_cast<double>(sorted.size() - 1);
  const size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

QuantParams QuantParams::per_tensor_symmetric(int bits, double s) {
  check_bits(bits);
  QuantParams p;
  p.bits = bits;
  p.symmetric = true;
  p.granularity = Granularity::per_tensor;
  p.scale = {s};
  p.zero_point = {0};
  p.q_max = symmetric_max(bits);
  p.q_min = -p.q_max;
  return p;
}

QuantParams QuantParams::per_channel_symmetric(int bits, size_t axis, std::vector<double> s) {
  check_bits(bits);
  QuantParams p;
  p.bits = bits;
  p.symmetric = true;
  p.granularity = Granularity::per_channel;
  p.channel_axis = axis;
  p.zero_point.assign(s.size(), 0);
  p.scale = std::move(s);
  p.q_max = symmetric_max(bits);
  p.q_min = -p.q_max;
  return p;
}

void QuantParams::validate(const std::vector<size_t>& target_shape) const {
  check_bits(bits);
  if (scale.empty() || scale.size() != zero_point.size())
    throw std::invalid_argument("quant params: scale/zero_point length mismatch");
  for (double s : scale)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::invalid_argument("quant params: scale must be positive and finite");
  if (symmetric) {
    for (int32_t z : zero_point)
      if (z != 0) throw std::invalid_argument("quant params: symmetric requires zero_point 0");
    if (q_max != symmetric_max(bits) || q_min != -q_max)
      throw std::invalid_argument("quant params: symmetric range must be +/-(2^(b-1)-1)");
  }
  if (per_channel()) {
    if (channel_axis >= target_shape.size())
      throw std::invalid_argument("quant params: channel axis out of range");
    if (scale.size() != target_shape[channel_axis])
      throw std::invalid_argument("quant params: per-channel scale length mismatch");
  } else if (scale.size() != 1) {
    throw std::invalid_argument("quant params: per-tensor expects a single scale");
  }
}

BitwidthScheme BitwidthScheme::parse(const std::string& text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  // accepted forms: "w8a8", "w4a6", ... and "lossless"
  if (t == "lossless") return lossless();
  if (t.size() >= 4 && t[0] == 'w') {
    const size_t apos = t.find('a', 1);
    if (apos != std::string::npos && apos > 1 && apos + 1 < t.size()) {
      int wb = -1, ab = -1;
      try {
        wb = std::stoi(t.substr(1, apos - 1));
        ab = std::stoi(t.substr(apos + 1));
      } catch (const std::exception&) {
        throw std::invalid_argument("cannot parse bit-width scheme: " + text);
      }
      if (wb == 0 && ab == 0) return lossless();
      check_bits(wb);
      check_bits(ab);
      return {wb, ab};
    }
  }
  throw std::invalid_argument("cannot parse bit-width scheme: " + text);
}

std::string BitwidthScheme::str() const {
  if (is_lossless()) return "lossless";
  std::ostringstream ss;
  ss << "w" << weight_bits << "a" << activation_bits;
  return ss.str();
}

IntTensor quantize(const Tensor& x, const QuantParams& p) {
  p.validate(x.shape());
  IntTensor out;
  out.shape = x.shape();
  out.bits = p.bits;
  out.data.resize(x.size());

  // per-channel indexing: stride pattern along channel_axis
  size_t axis_extent = 1, inner = 1;
  if (p.per_channel()) {
    axis_extent = x.shape()[p.channel_axis];
    for (size_t a = p.channel_axis + 1; a < x.shape().size(); ++a) inner *= x.shape()[a];
  }
  for (size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (!std::isfinite(v))
      throw std::invalid_argument("quantize: non-finite input at flat index " + std::to_string(i));
    const size_t ch = p.per_channel() ? (i / inner) % axis_extent : 0;
    const double s = p.scale[ch];
    const int64_t code =
        static_cast<int64_t>(round_half_even(v / s)) + static_cast<int64_t>(p.zero_point[ch]);
    out.data[i] = static_cast<int32_t>(
        std::clamp(code, static_cast<int64_t>(p.q_min), static_cast<int64_t>(p.q_max)));
  }
  return out;
}

Tensor dequantize(const IntTensor& q, const QuantParams& p) {
  p.validate(q.shape);
  if (q.bits != p.bits)
    throw std::invalid_argument("dequantize: bit-width mismatch between codes and params");
  Tensor out(q.shape);
  size_t axis_extent = 1, inner = 1;
  if (p.per_channel()) {
    axis_extent = q.shape[p.channel_axis];
    for (size_t a = p.channel_axis + 1; a < q.shape.size(); ++a) inner *= q.shape[a];
  }
  for (size_t i = 0; i < q.data.size(); ++i) {
    const size_t ch = p.per_channel() ? (i / inner) % axis_extent : 0;
    out[i] = static_cast<double>(q.data[i] - p.zero_point[ch]) * p.scale[ch];
  }
  return out;
}

Tensor fake_quant(const Tensor& x, const QuantParams& p) {
  return dequantize(quantize(x, p), p);
}

QuantParams init_scale_minmax(const Tensor& x, int bits, Granularity g, size_t axis) {
  check_bits(bits);
  const double qmax = static_cast<double>(QuantParams::symmetric_max(bits));
  const double tiny = std::numeric_limits<double>::min();
  if (g == Granularity::per_tensor) {
    double absmax = 0.0;
    for (size_t i = 0; i < x.size(); ++i) absmax = std::max(absmax, std::fabs(x[i]));
    return QuantParams::per_tensor_symmetric(bits, absmax > 0.0 ? absmax / qmax : tiny);
  }
  if (axis >= x.shape().size())
    throw std::invalid_argument("init_scale_minmax: axis out of range");
  const size_t extent = x.shape()[axis];
  size_t inner = 1;
  for (size_t a = axis + 1; a < x.shape().size(); ++a) inner *= x.shape()[a];
  std::vector<double> absmax(extent, 0.0);
  for (size_t i = 0; i < x.size(); ++i) {
    const size_t ch = (i / inner) % extent;
    absmax[ch] = std::max(absmax[ch], std::fabs(x[i]));
  }
  std::vector<double> scales(extent);
  for (size_t c = 0; c < extent; ++c) scales[c] = absmax[c] > 0.0 ? absmax[c] / qmax : tiny;
  return QuantParams::per_channel_symmetric(bits, axis, std::move(scales));
}

const std::vector<double>& PercentileSearchResult::percentiles() {
  static const std::vector<double> p = {0.999, 0.9999, 0.99999};
  return p;
}

PercentileSearchResult init_scale_percentile_search(const std::vector<Tensor>& samples, int bits) {
  check_bits(bits);
  if (samples.empty())
    throw std::invalid_argument("percentile search: empty calibration sample list");

  std::vector<double> pooled;
  size_t total = 0;
  for (const auto& s : samples) total += s.size();
  pooled.reserve(total);
  for (const auto& s : samples)
    for (size_t i = 0; i < s.size(); ++i) pooled.push_back(std::fabs(s[i]));
  std::sort(pooled.begin(), pooled.end());

  const double qmax = static_cast<double>(QuantParams::symmetric_max(bits));
  const double tiny = std::numeric_limits<double>::min();

  PercentileSearchResult result;
  double best_mse = std::numeric_limits<double>::infinity();
  for (double pct : PercentileSearchResult::percentiles()) {
    const double threshold = interpolated_quantile(pooled, pct);
    const double scale = threshold > 0.0 ? threshold / qmax : tiny;
    const QuantParams cand = QuantParams::per_tensor_symmetric(bits, scale);
    double mse_sum = 0.0;
    for (const auto& s : samples) {
      const Tensor fq = fake_quant(s, cand);
      mse_sum += frobenius_sq_distance(s, fq) / static_cast<double>(s.size());
    }
    const double mse = mse_sum / static_cast<double>(samples.size());
    result.candidate_mse.push_back(mse);
    if (mse <= best_mse) {  // <= so ties resolve toward the larger percentile
      best_mse = mse;
      result.params = cand;
      result.best_percentile = pct;
    }
  }
  return result;
}

std::vector<double> expected_rounding_error(const QuantParams& p) {
  std::vector<double> e(p.scale.size());
  for (size_t i = 0; i < e.size(); ++i) e[i] = p.scale[i] / 4.0;
  return e;
}

}  // namespace qarvd

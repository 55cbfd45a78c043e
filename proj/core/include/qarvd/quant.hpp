#ifndef QARVD_QUANT_HPP
#define QARVD_QUANT_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qarvd/tensor.hpp"

namespace qarvd {

// Round half to even, independent of the FP environment.
inline double round_half_even(double v) {
  const double fl = std::floor(v);
  const double diff = v - fl;
  if (diff > 0.5) return fl + 1.0;
  if (diff < 0.5) return fl;
  return (std::fmod(fl, 2.0) == 0.0) ? fl : fl + 1.0;
}

enum class Granularity { per_tensor, per_channel };

// Uniform affine quantizer parameters: code = clip(round(x/s)+z, q_min, q_max).
// Symmetric quantizers use z = 0 and the range [-(2^(b-1)-1), 2^(b-1)-1].
struct QuantParams {
  int bits = 8;
  bool symmetric = true;
  Granularity granularity = Granularity::per_tensor;
  size_t channel_axis = 0;          // used when per_channel
  std::vector<double> scale;        // length 1 or the channel-axis extent
  std::vector<int32_t> zero_point;  // same length as scale
  int32_t q_min = -127;
  int32_t q_max = 127;

  static int32_t symmetric_max(int bits) { return (1 << (bits - 1)) - 1; }

  static QuantParams per_tensor_symmetric(int bits, double s);
  static QuantParams per_channel_symmetric(int bits, size_t axis, std::vector<double> s);

  bool per_channel() const { return granularity == Granularity::per_channel; }
  double scale_for(size_t channel) const {
    return per_channel() ? scale[channel] : scale[0];
  }
  int32_t zero_for(size_t channel) const {
    return per_channel() ? zero_point[channel] : zero_point[0];
  }

  void validate(const std::vector<size_t>& target_shape) const;  // throws on misuse
};

// Weight/activation bit-width pair, e.g. W8A8, W4A8, W4A6. Bits of 0 denote
// the lossless identity quantizer (used as the exactness limit in tests).
struct BitwidthScheme {
  int weight_bits = 8;
  int activation_bits = 8;

  static BitwidthScheme parse(const std::string& text);  // "w4a8", "W8A8", ...
  static BitwidthScheme lossless() { return {0, 0}; }
  bool is_lossless() const { return weight_bits == 0; }
  std::string str() const;
};

IntTensor quantize(const Tensor& x, const QuantParams& p);
Tensor dequantize(const IntTensor& q, const QuantParams& p);
Tensor fake_quant(const Tensor& x, const QuantParams& p);

// Symmetric minmax scale: s = max(|x|) / (2^(b-1)-1), per tensor or per
// channel along the given axis. All-zero slices get the smallest positive
// normal double so quantization stays total and zeros survive exactly.
QuantParams init_scale_minmax(const Tensor& x, int bits, Granularity g, size_t axis = 0);

// Clipping-percentile search over {0.999, 0.9999, 0.99999} on the pooled
// absolute values of the calibration samples. Picks the candidate with the
// lowest mean fake-quant MSE; ties go to the larger percentile.
struct PercentileSearchResult {
  QuantParams params;
  double best_percentile = 0.0;
  std::vector<double> candidate_mse;  // one per candidate, same order as percentiles()
  static const std::vector<double>& percentiles();
};
PercentileSearchResult init_scale_percentile_search(const std::vector<Tensor>& samples, int bits);

// Expected |dequant(quant(x)) - x| for uniform in-range inputs: s/4 per scale entry.
std::vector<double> expected_rounding_error(const QuantParams& p);

}  // namespace qarvd

#endif  // QARVD_QUANT_HPP

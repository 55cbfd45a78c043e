#ifndef QARVD_CALIBRATE_HPP
#define QARVD_CALIBRATE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "qarvd/dual_scale.hpp"
#include "qarvd/engine.hpp"
#include "qarvd/quant.hpp"
#include "qarvd/sensitivity.hpp"
#include "qarvd/toy_model.hpp"

namespace qarvd {

struct CalibConfig {
  int iterations = 200;   // desk-scale default; deployment-scale runs use 2000
  int batch_size = 4;     // desk-scale default; deployment-scale runs use 8
  double lr_round = 2e-3;
  double lr_scale = 4e-5;
  BitwidthScheme scheme;
  uint64_t seed = 0;
  bool train_activation_scale = true;
  // rectified-sigmoid soft rounding and its corner-pushing regularizer
  double zeta = 1.1;
  double gamma_lo = -0.1;
  double reg_lambda = 1e-2;
  double beta_start = 10.0;
  double beta_end = 2.0;
  double warmup_frac = 0.2;  // fraction of iterations before the regularizer engages

  void validate() const;
};

// One captured activation with its chunk index; the unit of the frame-
// weighted objective.
struct CalibSample {
  std::string layer;
  size_t chunk = 0;  // 1-based
  Tensor x;
};

// Full-precision rollouts over the calibration prompts with per-layer,
// per-chunk activation capture.
std::vector<CalibSample> collect_calibration(const ToyModel& model,
                                             const std::vector<uint64_t>& prompt_seeds,
                                             const std::vector<std::string>& capture_layers);

// Learnable per-layer quantizer state: per-group per-row weight scales and
// the activation scale in log space, plus continuous rounding variables V
// with h(V) = clip(sigmoid(V)*(zeta-gamma)+gamma, 0, 1).
struct LearnableQuantState {
  Tensor weight;       // reference FP weight [n x k]
  DualScalePlan plan;  // group structure; scales here are the init values
  std::vector<double> log_scale_normal;   // per output row
  std::vector<double> log_scale_outlier;  // per output row; used when plan.enabled
  Tensor v;                               // rounding variables, shape of weight
  double log_act_scale = 0.0;
  int act_bits = 8;
  double zeta = 1.1;
  double gamma_lo = -0.1;

  static LearnableQuantState init(const Tensor& w, const DualScalePlan& plan,
                                  const QuantParams& act_init, const CalibConfig& cfg);

  double weight_scale(size_t row, bool outlier_group) const;
  double act_scale() const;
  double h_of(double raw_v) const;

  Tensor soft_weight() const;            // s * clip(floor(w/s) + h(V), qmin, qmax)
  Tensor hard_weight() const;            // h > 0.5 committed to {0, 1}
  IntTensor hard_codes() const;          // original column order
  QuantParams act_params() const;        // per-tensor symmetric at act_bits
  DualScalePlan plan_with_learned_scales() const;
};

// Frame-weighted reconstruction objective, evaluated with the deployable
// (hard-rounded) weights: mean over the batch of
//   w_chunk * || X W^T - FQ(X) FQ(W)^T ||_F^2.
double weighted_loss(const std::vector<const CalibSample*>& batch,
                     const LearnableQuantState& state,
                     const std::vector<double>& chunk_weights);

// The training surrogate uses soft rounding; gradients follow the
// straight-through convention: rounding output treated as locally constant,
// zero gradient outside the clip range.
double soft_weighted_loss(const std::vector<const CalibSample*>& batch,
                          const LearnableQuantState& state,
                          const std::vector<double>& chunk_weights);

struct CalibGradients {
  Tensor v_grad;
  std::vector<double> log_scale_normal_grad;
  std::vector<double> log_scale_outlier_grad;
  double log_act_scale_grad = 0.0;
};

CalibGradients soft_loss_gradients(const std::vector<const CalibSample*>& batch,
                                   const LearnableQuantState& state,
                                   const std::vector<double>& chunk_weights);

struct LayerCalibResult {
  std::string layer;
  DualScalePlan plan;  // learned scales
  IntTensor codes;     // hard codes, original column order
  QuantParams act;
  double initial_loss = 0.0;        // hard loss before optimization (nearest rounding)
  double final_loss = 0.0;          // hard loss after optimization
  std::vector<double> trace;        // running-min batch loss per iteration
};

LayerCalibResult calibrate_layer(const Tensor& w, const DualScalePlan& plan,
                                 const QuantParams& act_init,
                                 const std::vector<const CalibSample*>& samples,
                                 const std::vector<double>& chunk_weights,
                                 const CalibConfig& cfg);

struct ModelCalibOptions {
  CalibConfig base;
  bool dual_scale = true;
  double tau = kDefaultTau;
  double alpha_min = kDefaultAlphaMin;
  size_t align = kDefaultAlign;
  std::vector<std::string> keep_list = default_keep_list();
  std::vector<uint64_t> prompt_seeds = {9001, 9002};
};

struct ModelCalibResult {
  QuantizedModel qmodel;
  std::vector<LayerCalibResult> layer_results;  // quantized layers, registry order
};

// Whole-model pipeline: outlier detection, dual-scale plans, percentile
// activation init, then per-layer frame-weighted reconstruction. Layers run
// in parallel; results are slot-indexed so any thread count gives identical
// output.
ModelCalibResult calibrate_model(const ToyModel& model,
                                 const std::vector<double>& chunk_weights,
                                 const ModelCalibOptions& opts);

}  // namespace qarvd

#endif  // QARVD_CALIBRATE_HPP

#include "qarvd/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "qarvd/bytes.hpp"
#include "qarvd/rng.hpp"
#include "qarvd/threading.hpp"

namespace qarvd {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor bf16_round(const Tensor& t) {
  Tensor out = t;
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(bf16_to_float(float_to_bf16(static_cast<float>(out[i]))));
  return out;
}

struct AdamBuffer {
  std::vector<double> m, v;
  explicit AdamBuffer(size_t n) : m(n, 0.0), v(n, 0.0) {}
  // standard bias-corrected update
  void step(std::vector<double>& param, const std::vector<double>& grad, double lr, int t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (size_t i = 0; i < param.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

}  // namespace

void CalibConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("calib config: iterations must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("calib config: batch size must be >= 1");
  if (!(lr_round > 0.0) || !(lr_scale > 0.0))
    throw std::invalid_argument("calib config: learning rates must be positive");
  if (!(zeta > 1.0) || !(gamma_lo < 0.0))
    throw std::invalid_argument("calib config: rectified sigmoid needs zeta > 1 > 0 > gamma");
}

std::vector<CalibSample> collect_calibration(const ToyModel& model,
                                             const std::vector<uint64_t>& prompt_seeds,
                                             const std::vector<std::string>& capture_layers) {
  if (prompt_seeds.empty())
    throw std::invalid_argument("collect_calibration: need at least one prompt seed");
  for (const auto& name : capture_layers)
    if (!model.has_layer(name))
      throw std::out_of_range("collect_calibration: layer not in registry: " + name);

  std::vector<std::vector<CalibSample>> per_prompt(prompt_seeds.size());
  parallel_for(prompt_seeds.size(), [&](size_t p) {
    Rollout r = rollout(model, prompt_seeds[p], QuantMode::full_precision(), capture_layers);
    per_prompt[p].reserve(r.captures.size());
    for (auto& cap : r.captures)
      per_prompt[p].push_back({cap.layer, cap.chunk, std::move(cap.x)});
  });

  std::vector<CalibSample> samples;
  for (auto& batch : per_prompt)
    for (auto& s : batch) samples.push_back(std::move(s));
  return samples;
}

LearnableQuantState LearnableQuantState::init(const Tensor& w, const DualScalePlan& plan,
                                              const QuantParams& act_init,
                                              const CalibConfig& cfg) {
  LearnableQuantState st;
  st.weight = w;
  st.plan = plan;
  st.zeta = cfg.zeta;
  st.gamma_lo = cfg.gamma_lo;
  st.act_bits = act_init.bits;
  st.log_act_scale = std::log(act_init.scale[0]);

  st.log_scale_normal.resize(w.rows());
  st.log_scale_outlier.resize(w.rows());
  for (size_t r = 0; r < w.rows(); ++r) {
    st.log_scale_normal[r] = std::log(plan.params_normal.scale[r]);
    st.log_scale_outlier[r] = std::log(plan.params_outlier.scale[r]);
  }

  // V init so that h(V) equals the fractional part of w/s: the soft weight
  // starts exactly at the FP weight and hard rounding starts at nearest.
  st.v = Tensor({w.rows(), w.cols()});
  std::vector<uint8_t> outlier_mask(plan.d_in, 0);
  for (size_t c : plan.outlier_indices) outlier_mask[c] = 1;
  const double span = cfg.zeta - cfg.gamma_lo;
  for (size_t r = 0; r < w.rows(); ++r) {
    for (size_t c = 0; c < w.cols(); ++c) {
      const double s = (plan.enabled && outlier_mask[c]) ? plan.params_outlier.scale[r]
                                                         : plan.params_normal.scale[r];
      const double ratio = w.at(r, c) / s;
      double frac = ratio - std::floor(ratio);
      // keep the pre-activation strictly inside (0,1) so gradients flow
      frac = std::clamp(frac, 1e-4, 1.0 - 1e-4);
      const double p = (frac - cfg.gamma_lo) / span;
      st.v.at(r, c) = std::log(p / (1.0 - p));
    }
  }
  return st;
}

double LearnableQuantState::weight_scale(size_t row, bool outlier_group) const {
  return std::exp(outlier_group ? log_scale_outlier[row] : log_scale_normal[row]);
}

double LearnableQuantState::act_scale() const { return std::exp(log_act_scale); }

double LearnableQuantState::h_of(double raw_v) const {
  return std::clamp(sigmoid(raw_v) * (zeta - gamma_lo) + gamma_lo, 0.0, 1.0);
}

QuantParams LearnableQuantState::act_params() const {
  return QuantParams::per_tensor_symmetric(act_bits, act_scale());
}

namespace {

// element loop shared by soft/hard weight evaluation
template <typename RoundFn>
Tensor quantized_weight(const LearnableQuantState& st, RoundFn&& round_fn) {
  const Tensor& w = st.weight;
  const int32_t qmax = st.plan.params_normal.q_max;
  const int32_t qmin = st.plan.params_normal.q_min;
  std::vector<uint8_t> outlier_mask(st.plan.d_in, 0);
  for (size_t c : st.plan.outlier_indices) outlier_mask[c] = 1;
  Tensor out({w.rows(), w.cols()});
  for (size_t r = 0; r < w.rows(); ++r) {
    for (size_t c = 0; c < w.cols(); ++c) {
      const bool outl = st.plan.enabled && outlier_mask[c];
      const double s = st.weight_scale(r, outl);
      const double u = std::floor(w.at(r, c) / s) + round_fn(st.v.at(r, c));
      const double code = std::clamp(u, static_cast<double>(qmin), static_cast<double>(qmax));
      out.at(r, c) = s * code;
    }
  }
  return out;
}

}  // namespace

Tensor LearnableQuantState::soft_weight() const {
  return quantized_weight(*this, [this](double raw) { return h_of(raw); });
}

Tensor LearnableQuantState::hard_weight() const {
  return quantized_weight(*this, [this](double raw) { return h_of(raw) > 0.5 ? 1.0 : 0.0; });
}

IntTensor LearnableQuantState::hard_codes() const {
  const Tensor& w = weight;
  const int32_t qmax = plan.params_normal.q_max;
  const int32_t qmin = plan.params_normal.q_min;
  std::vector<uint8_t> outlier_mask(plan.d_in, 0);
  for (size_t c : plan.outlier_indices) outlier_mask[c] = 1;
  IntTensor codes;
  codes.shape = {w.rows(), w.cols()};
  codes.bits = plan.params_normal.bits;
  codes.data.resize(w.size());
  for (size_t r = 0; r < w.rows(); ++r) {
    for (size_t c = 0; c < w.cols(); ++c) {
      const bool outl = plan.enabled && outlier_mask[c];
      const double s = weight_scale(r, outl);
      const double u = std::floor(w.at(r, c) / s) + (h_of(v.at(r, c)) > 0.5 ? 1.0 : 0.0);
      codes.data[r * w.cols() + c] = static_cast<int32_t>(
          std::clamp(u, static_cast<double>(qmin), static_cast<double>(qmax)));
    }
  }
  return codes;
}

DualScalePlan LearnableQuantState::plan_with_learned_scales() const {
  DualScalePlan out = plan;
  std::vector<double> sn(weight.rows()), so(weight.rows());
  for (size_t r = 0; r < weight.rows(); ++r) {
    sn[r] = std::exp(log_scale_normal[r]);
    so[r] = std::exp(log_scale_outlier[r]);
  }
  out.params_normal =
      QuantParams::per_channel_symmetric(plan.params_normal.bits, 0, std::move(sn));
  out.params_outlier =
      QuantParams::per_channel_symmetric(plan.params_outlier.bits, 0, std::move(so));
  return out;
}

namespace {

double weighted_recon_loss(const std::vector<const CalibSample*>& batch,
                           const LearnableQuantState& state,
                           const std::vector<double>& chunk_weights, const Tensor& w_hat) {
  if (batch.empty()) throw std::invalid_argument("weighted loss: empty batch");
  const QuantParams act = state.act_params();
  double total = 0.0;
  for (const CalibSample* sample : batch) {
    if (sample->chunk < 1 || sample->chunk > chunk_weights.size())
      throw std::out_of_range("weighted loss: sample chunk outside the weight vector");
    const double w_i = chunk_weights[sample->chunk - 1];
    const Tensor target = matmul_nt(sample->x, state.weight);
    const Tensor pred = matmul_nt(fake_quant(sample->x, act), w_hat);
    total += w_i * frobenius_sq_distance(target, pred);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

double weighted_loss(const std::vector<const CalibSample*>& batch,
                     const LearnableQuantState& state,
                     const std::vector<double>& chunk_weights) {
  return weighted_recon_loss(batch, state, chunk_weights, state.hard_weight());
}

double soft_weighted_loss(const std::vector<const CalibSample*>& batch,
                          const LearnableQuantState& state,
                          const std::vector<double>& chunk_weights) {
  return weighted_recon_loss(batch, state, chunk_weights, state.soft_weight());
}

CalibGradients soft_loss_gradients(const std::vector<const CalibSample*>& batch,
                                   const LearnableQuantState& state,
                                   const std::vector<double>& chunk_weights) {
  if (batch.empty()) throw std::invalid_argument("soft_loss_gradients: empty batch");
  const Tensor& w = state.weight;
  const size_t n = w.rows(), k = w.cols();
  const int32_t qmax = state.plan.params_normal.q_max;
  const int32_t qmin = state.plan.params_normal.q_min;
  const double span = state.zeta - state.gamma_lo;
  const double s_a = state.act_scale();
  const QuantParams act = state.act_params();

  std::vector<uint8_t> outlier_mask(state.plan.d_in, 0);
  for (size_t c : state.plan.outlier_indices) outlier_mask[c] = 1;

  // per-element soft quantities, reused across the batch
  Tensor w_hat({n, k});
  Tensor code({n, k});        // clipped soft code
  Tensor dh_dv({n, k});       // 0 where the pre-activation or the code clips
  for (size_t r = 0; r < n; ++r) {
    for (size_t c = 0; c < k; ++c) {
      const bool outl = state.plan.enabled && outlier_mask[c];
      const double s = state.weight_scale(r, outl);
      const double raw = state.v.at(r, c);
      const double sig = sigmoid(raw);
      const double pre = sig * span + state.gamma_lo;
      const double h = std::clamp(pre, 0.0, 1.0);
      const double u = std::floor(w.at(r, c) / s) + h;
      const double cl = std::clamp(u, static_cast<double>(qmin), static_cast<double>(qmax));
      w_hat.at(r, c) = s * cl;
      code.at(r, c) = cl;
      const bool inside_code = u > static_cast<double>(qmin) && u < static_cast<double>(qmax);
      const bool inside_h = pre > 0.0 && pre < 1.0;
      dh_dv.at(r, c) = (inside_code && inside_h) ? span * sig * (1.0 - sig) : 0.0;
    }
  }

  CalibGradients g;
  g.v_grad = Tensor({n, k});
  g.log_scale_normal_grad.assign(n, 0.0);
  g.log_scale_outlier_grad.assign(n, 0.0);

  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  for (const CalibSample* sample : batch) {
    const double w_i = chunk_weights.at(sample->chunk - 1);
    const Tensor x_hat = fake_quant(sample->x, act);
    const Tensor target = matmul_nt(sample->x, state.weight);
    const Tensor pred = matmul_nt(x_hat, w_hat);
    Tensor diff = pred;  // D = pred - target
    for (size_t i = 0; i < diff.size(); ++i) diff[i] -= target[i];

    const double coeff = 2.0 * w_i * inv_batch;
    // dL/dW_hat = coeff * D^T X_hat  [n x k]
    const Tensor gw = matmul(transpose(diff), x_hat);
    for (size_t r = 0; r < n; ++r) {
      for (size_t c = 0; c < k; ++c) {
        const bool outl = state.plan.enabled && outlier_mask[c];
        const double s = state.weight_scale(r, outl);
        const double gwe = coeff * gw.at(r, c);
        g.v_grad.at(r, c) += gwe * s * dh_dv.at(r, c);
        // d w_hat / d log s = s * code (code held constant)
        const double gs = gwe * s * code.at(r, c);
        if (outl)
          g.log_scale_outlier_grad[r] += gs;
        else
          g.log_scale_normal_grad[r] += gs;
      }
    }
    // dL/dX_hat = coeff * D W_hat  [m x k]; d x_hat / d log s_a = s_a * code_x
    const Tensor gx = matmul(diff, w_hat);
    const IntTensor x_codes = quantize(sample->x, act);
    for (size_t i = 0; i < gx.size(); ++i)
      g.log_act_scale_grad += coeff * gx[i] * s_a * static_cast<double>(x_codes.data[i]);
  }
  return g;
}

LayerCalibResult calibrate_layer(const Tensor& w, const DualScalePlan& plan,
                                 const QuantParams& act_init,
                                 const std::vector<const CalibSample*>& samples,
                                 const std::vector<double>& chunk_weights,
                                 const CalibConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("calibrate_layer: no calibration samples");

  LearnableQuantState state = LearnableQuantState::init(w, plan, act_init, cfg);
  LayerCalibResult result;
  result.layer = plan.layer_name;
  result.initial_loss = weighted_loss(samples, state, chunk_weights);

  const size_t n = w.rows(), k = w.cols();
  AdamBuffer adam_v(n * k);
  AdamBuffer adam_scales(2 * n);
  AdamBuffer adam_act(1);
  Prng sampler(mix_seed(cfg.seed, fnv1a(plan.layer_name.data(), plan.layer_name.size())));

  double best = std::numeric_limits<double>::infinity();
  const int warmup = static_cast<int>(cfg.warmup_frac * static_cast<double>(cfg.iterations));
  for (int t = 0; t < cfg.iterations; ++t) {
    std::vector<const CalibSample*> batch;
    batch.reserve(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(samples[sampler.next_u64() % samples.size()]);

    const double loss = soft_weighted_loss(batch, state, chunk_weights);
    if (!std::isfinite(loss)) {
      std::ostringstream ss;
      ss << "calibration diverged for layer " << plan.layer_name << " at iteration " << t;
      throw std::runtime_error(ss.str());
    }
    best = std::min(best, loss);
    result.trace.push_back(best);

    CalibGradients g = soft_loss_gradients(batch, state, chunk_weights);

    if (t >= warmup && cfg.reg_lambda > 0.0) {
      const double frac = cfg.iterations > 1
                              ? static_cast<double>(t) / static_cast<double>(cfg.iterations - 1)
                              : 1.0;
      const double beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
      for (size_t i = 0; i < state.v.size(); ++i) {
        const double h = state.h_of(state.v[i]);
        const double centered = 2.0 * h - 1.0;
        const double mag = std::abs(centered);
        // d(1 - |2h-1|^beta)/dh, with dh/dV via the rectified sigmoid
        const double dreg_dh =
            -2.0 * beta * std::pow(std::max(mag, 1e-12), beta - 1.0) * (centered >= 0 ? 1.0 : -1.0);
        const double sig = sigmoid(state.v[i]);
        const double pre = sig * (state.zeta - state.gamma_lo) + state.gamma_lo;
        const double dh_dv =
            (pre > 0.0 && pre < 1.0) ? (state.zeta - state.gamma_lo) * sig * (1.0 - sig) : 0.0;
        g.v_grad[i] += cfg.reg_lambda * dreg_dh * dh_dv;
      }
    }

    const double anneal =
        0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(cfg.iterations)));
    adam_v.step(state.v.vec(), g.v_grad.vec(), cfg.lr_round * anneal, t + 1);

    std::vector<double> scale_params(2 * n), scale_grads(2 * n);
    for (size_t r = 0; r < n; ++r) {
      scale_params[r] = state.log_scale_normal[r];
      scale_params[n + r] = state.log_scale_outlier[r];
      scale_grads[r] = g.log_scale_normal_grad[r];
      scale_grads[n + r] = state.plan.enabled ? g.log_scale_outlier_grad[r] : 0.0;
    }
    adam_scales.step(scale_params, scale_grads, cfg.lr_scale * anneal, t + 1);
    for (size_t r = 0; r < n; ++r) {
      state.log_scale_normal[r] = scale_params[r];
      state.log_scale_outlier[r] = scale_params[n + r];
    }

    if (cfg.train_activation_scale) {
      std::vector<double> p{state.log_act_scale}, gr{g.log_act_scale_grad};
      adam_act.step(p, gr, cfg.lr_scale * anneal, t + 1);
      state.log_act_scale = p[0];
    }
  }

  result.final_loss = weighted_loss(samples, state, chunk_weights);
  result.plan = state.plan_with_learned_scales();
  result.codes = state.hard_codes();
  result.act = state.act_params();
  return result;
}

ModelCalibResult calibrate_model(const ToyModel& model,
                                 const std::vector<double>& chunk_weights,
                                 const ModelCalibOptions& opts) {
  opts.base.validate();
  if (chunk_weights.size() != model.config().chunks)
    throw std::invalid_argument("calibrate_model: weight vector length must equal chunk count");

  std::vector<std::string> quant_layers;
  for (const auto& spec : model.registry())
    if (!matches_keep_list(spec.name, opts.keep_list)) quant_layers.push_back(spec.name);

  const std::vector<CalibSample> samples =
      collect_calibration(model, opts.prompt_seeds, quant_layers);

  ModelCalibResult out;
  out.qmodel.cfg = model.config();
  out.qmodel.scheme = opts.base.scheme;
  out.qmodel.keep_list = opts.keep_list;
  out.qmodel.layers.resize(model.registry().size());
  out.layer_results.resize(quant_layers.size());

  // preserved layers: bf16 passthrough, no integer path
  for (size_t li = 0; li < model.registry().size(); ++li) {
    const LayerSpec& spec = model.registry()[li];
    if (!matches_keep_list(spec.name, opts.keep_list)) continue;
    QuantizedLayer l;
    l.name = spec.name;
    l.out_dim = spec.out_dim;
    l.in_dim = spec.in_dim;
    l.preserved = true;
    l.fp_weight = bf16_round(model.weight(spec.name));
    out.qmodel.layers[li] = std::move(l);
  }

  std::vector<size_t> registry_slot(quant_layers.size());
  {
    size_t qi = 0;
    for (size_t li = 0; li < model.registry().size(); ++li)
      if (!matches_keep_list(model.registry()[li].name, opts.keep_list))
        registry_slot[qi++] = li;
  }

  parallel_for(quant_layers.size(), [&](size_t qi) {
    const LayerSpec& spec = model.registry()[registry_slot[qi]];
    const Tensor& w = model.weight(spec.name);

    DualScalePlan plan;
    if (opts.dual_scale) {
      const OutlierReport report =
          analyze_layer(spec.name, w, opts.tau, opts.alpha_min, opts.align);
      plan = build_plan(w, report, opts.base.scheme.weight_bits);
    } else {
      plan = build_single_scale_plan(spec.name, w, opts.base.scheme.weight_bits);
    }

    std::vector<const CalibSample*> layer_samples;
    std::vector<Tensor> act_tensors;
    for (const auto& s : samples)
      if (s.layer == spec.name) {
        layer_samples.push_back(&s);
        act_tensors.push_back(s.x);
      }

    const PercentileSearchResult act_init =
        init_scale_percentile_search(act_tensors, opts.base.scheme.activation_bits);

    LayerCalibResult res = calibrate_layer(w, plan, act_init.params, layer_samples,
                                           chunk_weights, opts.base);

    QuantizedLayer l;
    l.name = spec.name;
    l.out_dim = spec.out_dim;
    l.in_dim = spec.in_dim;
    l.preserved = false;
    l.plan = res.plan;
    l.act = res.act;
    // store codes pre-permuted [outlier | normal]
    l.wq.shape = {spec.out_dim, spec.in_dim};
    l.wq.bits = res.codes.bits;
    l.wq.data.resize(spec.out_dim * spec.in_dim);
    for (size_t r = 0; r < spec.out_dim; ++r)
      for (size_t pos = 0; pos < spec.in_dim; ++pos)
        l.wq.data[r * spec.in_dim + pos] = res.codes.at(r, res.plan.permutation[pos]);

    out.qmodel.layers[registry_slot[qi]] = std::move(l);
    out.layer_results[qi] = std::move(res);
  });

  return out;
}

}  // namespace qarvd

#include "qarvd/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "qarvd/bytes.hpp"

namespace qarvd {

using nlohmann::json;

namespace {
constexpr char kQModelMagic[4] = {'Q', 'A', 'R', 'Q'};
constexpr uint16_t kQModelVersion = 1;

// QTNS sub-header bytes for an int tensor: magic+version+dtype+bits+rank+dims
size_t qtns_int_header_bytes(size_t rank) { return 4 + 2 + 1 + 1 + 1 + 8 * rank; }
}  // namespace

const QuantizedLayer& QuantizedModel::layer(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return l;
  throw std::out_of_range("quantized model has no layer: " + name);
}

IntTensor kernel_a_quantize_activation(const Tensor& x, const QuantParams& p) {
  return quantize(x, p);
}

Tensor permute_activations(const Tensor& x, const DualScalePlan& plan) {
  if (!plan.enabled) return x;
  if (x.cols() != plan.permutation.size())
    throw std::invalid_argument("permute_activations: plan does not match activation width");
  Tensor out({x.rows(), x.cols()});
  for (size_t r = 0; r < x.rows(); ++r)
    for (size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, plan.permutation[c]);
  return out;
}

Tensor kernel_b_gemm_dequant(const IntTensor& xq, const QuantizedLayer& layer) {
  if (layer.preserved)
    throw std::invalid_argument("kernel_b: layer is preserved, no integer path: " + layer.name);
  if (xq.shape.size() != 2 || xq.shape[1] != layer.in_dim)
    throw std::invalid_argument("kernel_b: activation shape does not match layer " + layer.name);

  const size_t m = xq.shape[0], k = layer.in_dim, n = layer.out_dim;
  // 2^(wb-1) * 2^(ab-1) * k must fit the 64-bit accumulator with margin
  if (k > (1ULL << 40))
    throw std::logic_error("kernel_b: reduction dimension too large for exact accumulation");

  const double s_x = layer.act.scale[0];
  const int32_t z_x = layer.act.zero_point[0];

  // groups in permuted column order: [0, n_outlier) then [n_outlier, k)
  const size_t n_outlier = layer.plan.enabled ? layer.plan.outlier_count() : 0;
  struct Group {
    size_t begin, end;
    const std::vector<double>* scales;  // per output row
  };
  std::vector<Group> groups;
  if (layer.plan.enabled) {
    groups.push_back({0, n_outlier, &layer.plan.params_outlier.scale});
    groups.push_back({n_outlier, k, &layer.plan.params_normal.scale});
  } else {
    groups.push_back({0, k, &layer.plan.params_normal.scale});
  }

  // offline per-column integer sums for the zero-point correction
  std::vector<std::vector<int64_t>> colsum(groups.size(), std::vector<int64_t>(n, 0));
  if (z_x != 0) {
    for (size_t g = 0; g < groups.size(); ++g)
      for (size_t j = 0; j < n; ++j) {
        int64_t acc = 0;
        for (size_t c = groups[g].begin; c < groups[g].end; ++c) acc += layer.wq.at(j, c);
        colsum[g][j] = acc;
      }
  }

  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      double val = 0.0;
      for (size_t g = 0; g < groups.size(); ++g) {
        int64_t acc = 0;
        for (size_t c = groups[g].begin; c < groups[g].end; ++c)
          acc += static_cast<int64_t>(xq.at(i, c)) * static_cast<int64_t>(layer.wq.at(j, c));
        val += (s_x * (*groups[g].scales)[j]) * static_cast<double>(acc);
      }
      if (z_x != 0) {
        double corr = 0.0;
        for (size_t g = 0; g < groups.size(); ++g)
          corr += (*groups[g].scales)[j] * static_cast<double>(colsum[g][j]);
        val -= static_cast<double>(z_x) * s_x * corr;
      }
      out.at(i, j) = val;
    }
  }
  return out;
}

Engine parse_engine(const std::string& text) {
  if (text == "int") return Engine::int_kernels;
  if (text == "fakequant") return Engine::fakequant_sim;
  throw std::invalid_argument("unknown engine (expected int|fakequant): " + text);
}

namespace {

// fake-quant simulation reference: dequantized weights in original column
// order, float matmul
Tensor dequantized_weight_original_order(const QuantizedLayer& layer) {
  Tensor w({layer.out_dim, layer.in_dim});
  const size_t n_outlier = layer.plan.enabled ? layer.plan.outlier_count() : 0;
  for (size_t j = 0; j < layer.out_dim; ++j) {
    for (size_t pos = 0; pos < layer.in_dim; ++pos) {
      const size_t orig = layer.plan.enabled ? layer.plan.permutation[pos] : pos;
      const double s = (layer.plan.enabled && pos < n_outlier)
                           ? layer.plan.params_outlier.scale[j]
                           : layer.plan.params_normal.scale[j];
      w.at(j, orig) = static_cast<double>(layer.wq.at(j, pos)) * s;
    }
  }
  return w;
}

}  // namespace

Tensor quantized_layer_forward(const QuantizedLayer& layer, const Tensor& x, Engine engine) {
  if (layer.preserved) return matmul_nt(x, layer.fp_weight);
  if (engine == Engine::int_kernels) {
    const Tensor xp = permute_activations(x, layer.plan);
    const IntTensor xq = kernel_a_quantize_activation(xp, layer.act);
    return kernel_b_gemm_dequant(xq, layer);
  }
  return matmul_nt(fake_quant(x, layer.act), dequantized_weight_original_order(layer));
}

namespace {

class QuantizedProvider : public LinearProvider {
 public:
  QuantizedProvider(const QuantizedModel& qm, Engine engine) : qm_(qm), engine_(engine) {
    if (engine == Engine::fakequant_sim) {
      for (const auto& l : qm.layers)
        if (!l.preserved) sim_weights_.push_back({l.name, dequantized_weight_original_order(l)});
    }
  }

  Tensor forward(const std::string& layer, const Tensor& x) const override {
    const QuantizedLayer& l = qm_.layer(layer);
    if (l.preserved) return matmul_nt(x, l.fp_weight);
    if (engine_ == Engine::int_kernels) {
      const Tensor xp = permute_activations(x, l.plan);
      return kernel_b_gemm_dequant(kernel_a_quantize_activation(xp, l.act), l);
    }
    for (const auto& [name, w] : sim_weights_)
      if (name == layer) return matmul_nt(fake_quant(x, l.act), w);
    throw std::logic_error("missing cached sim weight for " + layer);
  }

 private:
  const QuantizedModel& qm_;
  Engine engine_;
  std::vector<std::pair<std::string, Tensor>> sim_weights_;
};

}  // namespace

Rollout run_quantized(const QuantizedModel& qm, uint64_t prompt_seed, Engine engine) {
  const QuantizedProvider provider(qm, engine);
  return run_rollout(qm.cfg, provider, &provider, QuantTarget::all, 0, prompt_seed);
}

// ---- serialization & size accounting ----

size_t QuantizedLayer::payload_bytes() const {
  if (preserved) return out_dim * in_dim * 2;  // bf16
  size_t bytes = qtns_int_header_bytes(2) + packed_int_data_bytes(out_dim * in_dim, wq.bits);
  bytes += 4 * out_dim;                            // normal-group scales, f32
  if (plan.enabled) bytes += 4 * out_dim;          // outlier-group scales
  if (plan.enabled) bytes += 4 * plan.permutation.size();  // u32 permutation
  bytes += 4 + 4;                                  // activation scale f32 + zero-point i32
  return bytes;
}

namespace {

json qmodel_header(const QuantizedModel& qm) {
  json j;
  j["config"] = json::parse(toy_config_to_json_text(qm.cfg));
  j["scheme"] = qm.scheme.str();
  j["keep_list"] = qm.keep_list;
  j["layers"] = json::array();
  for (const auto& l : qm.layers) {
    json lj;
    lj["name"] = l.name;
    lj["out_dim"] = l.out_dim;
    lj["in_dim"] = l.in_dim;
    lj["preserved"] = l.preserved;
    if (!l.preserved) {
      lj["weight_bits"] = l.wq.bits;
      lj["act_bits"] = l.act.bits;
      lj["act_symmetric"] = l.act.symmetric;
      lj["dual_scale"] = l.plan.enabled;
      lj["outlier_count"] = l.plan.enabled ? l.plan.outlier_count() : 0;
    }
    j["layers"].push_back(lj);
  }
  return j;
}

void write_layer_payload(std::ostream& os, const QuantizedLayer& l) {
  if (l.preserved) {
    for (size_t i = 0; i < l.fp_weight.size(); ++i)
      write_le<uint16_t>(os, float_to_bf16(static_cast<float>(l.fp_weight[i])));
    return;
  }
  save_int_tensor(os, l.wq);
  for (size_t r = 0; r < l.out_dim; ++r)
    write_le<float>(os, static_cast<float>(l.plan.params_normal.scale[r]));
  if (l.plan.enabled) {
    for (size_t r = 0; r < l.out_dim; ++r)
      write_le<float>(os, static_cast<float>(l.plan.params_outlier.scale[r]));
    for (uint32_t p : l.plan.permutation) write_le<uint32_t>(os, p);
  }
  write_le<float>(os, static_cast<float>(l.act.scale[0]));
  write_le<int32_t>(os, l.act.zero_point[0]);
}

QuantizedLayer read_layer_payload(std::istream& is, const json& lj) {
  QuantizedLayer l;
  l.name = lj.at("name").get<std::string>();
  l.out_dim = lj.at("out_dim").get<size_t>();
  l.in_dim = lj.at("in_dim").get<size_t>();
  l.preserved = lj.at("preserved").get<bool>();
  if (l.preserved) {
    l.fp_weight = Tensor({l.out_dim, l.in_dim});
    for (size_t i = 0; i < l.fp_weight.size(); ++i)
      l.fp_weight[i] = static_cast<double>(bf16_to_float(read_le<uint16_t>(is)));
    return l;
  }
  l.wq = load_int_tensor(is);
  if (l.wq.shape != std::vector<size_t>{l.out_dim, l.in_dim})
    throw std::runtime_error("quantized model: weight shape mismatch for " + l.name);
  const int weight_bits = lj.at("weight_bits").get<int>();
  if (l.wq.bits != weight_bits)
    throw std::runtime_error("quantized model: bit-width mismatch for " + l.name);

  l.plan.layer_name = l.name;
  l.plan.d_in = l.in_dim;
  l.plan.enabled = lj.at("dual_scale").get<bool>();
  std::vector<double> normal_scales(l.out_dim);
  for (auto& s : normal_scales) s = static_cast<double>(read_le<float>(is));
  l.plan.params_normal =
      QuantParams::per_channel_symmetric(weight_bits, 0, std::move(normal_scales));
  if (l.plan.enabled) {
    std::vector<double> outlier_scales(l.out_dim);
    for (auto& s : outlier_scales) s = static_cast<double>(read_le<float>(is));
    l.plan.params_outlier =
        QuantParams::per_channel_symmetric(weight_bits, 0, std::move(outlier_scales));
    l.plan.permutation.resize(l.in_dim);
    for (auto& p : l.plan.permutation) p = read_le<uint32_t>(is);
    const size_t n_outlier = lj.at("outlier_count").get<size_t>();
    l.plan.outlier_indices.assign(l.plan.permutation.begin(),
                                  l.plan.permutation.begin() + static_cast<long>(n_outlier));
    std::sort(l.plan.outlier_indices.begin(), l.plan.outlier_indices.end());
    l.plan.normal_indices.assign(l.plan.permutation.begin() + static_cast<long>(n_outlier),
                                 l.plan.permutation.end());
    std::sort(l.plan.normal_indices.begin(), l.plan.normal_indices.end());
  } else {
    l.plan.params_outlier = l.plan.params_normal;
    l.plan.normal_indices.resize(l.in_dim);
    for (size_t i = 0; i < l.in_dim; ++i) l.plan.normal_indices[i] = i;
    l.plan.permutation.resize(l.in_dim);
    for (size_t i = 0; i < l.in_dim; ++i) l.plan.permutation[i] = static_cast<uint32_t>(i);
  }

  const int act_bits = lj.at("act_bits").get<int>();
  const bool act_symmetric = lj.at("act_symmetric").get<bool>();
  const double act_scale = static_cast<double>(read_le<float>(is));
  const int32_t act_zero = read_le<int32_t>(is);
  if (act_symmetric) {
    l.act = QuantParams::per_tensor_symmetric(act_bits, act_scale);
  } else {
    l.act = QuantParams::per_tensor_symmetric(act_bits, act_scale);
    l.act.symmetric = false;
    l.act.zero_point = {act_zero};
    l.act.q_max = (1 << (act_bits - 1)) - 1;
    l.act.q_min = -(1 << (act_bits - 1));
  }
  return l;
}

}  // namespace

void save_quantized_model(const std::string& path, const QuantizedModel& qm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  const std::string htext = qmodel_header(qm).dump();
  write_bytes(os, kQModelMagic, 4);
  write_le<uint16_t>(os, kQModelVersion);
  write_le<uint64_t>(os, htext.size());
  write_bytes(os, htext.data(), htext.size());
  for (const auto& l : qm.layers) write_layer_payload(os, l);
}

QuantizedModel load_quantized_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  read_bytes(is, magic, 4);
  if (std::memcmp(magic, kQModelMagic, 4) != 0)
    throw std::runtime_error("quantized model: bad magic in " + path);
  if (read_le<uint16_t>(is) != kQModelVersion)
    throw std::runtime_error("quantized model: unsupported version");
  const uint64_t hlen = read_le<uint64_t>(is);
  std::string htext(hlen, '\0');
  read_bytes(is, htext.data(), hlen);
  const json header = json::parse(htext);

  QuantizedModel qm;
  qm.cfg = toy_config_from_json_text(header.at("config").dump());
  qm.scheme = BitwidthScheme::parse(header.at("scheme").get<std::string>());
  qm.keep_list = header.at("keep_list").get<std::vector<std::string>>();
  for (const auto& lj : header.at("layers")) qm.layers.push_back(read_layer_payload(is, lj));
  return qm;
}

SizeReport size_report(const QuantizedModel& qm) {
  SizeReport rep;
  for (const auto& l : qm.layers) {
    const size_t bytes = l.payload_bytes();
    rep.per_layer.push_back({l.name, bytes, l.preserved});
    rep.payload_bytes += bytes;
    rep.baseline_bytes += l.out_dim * l.in_dim * 2;
  }
  const std::string htext = qmodel_header(qm).dump();
  rep.header_bytes = 4 + 2 + 8 + htext.size();
  rep.file_bytes = rep.header_bytes + rep.payload_bytes;
  rep.ratio = static_cast<double>(rep.baseline_bytes) / static_cast<double>(rep.payload_bytes);
  return rep;
}

}  // namespace qarvd

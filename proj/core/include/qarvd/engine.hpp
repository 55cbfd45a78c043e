#ifndef QARVD_ENGINE_HPP
#define QARVD_ENGINE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "qarvd/dual_scale.hpp"
#include "qarvd/quant.hpp"
#include "qarvd/tensor.hpp"
#include "qarvd/toy_model.hpp"

namespace qarvd {

// One deployed layer. Quantized layers hold integer codes with the columns
// already reordered [outlier | normal]; preserved layers keep bf16-rounded
// floating weights and never enter the integer path.
struct QuantizedLayer {
  std::string name;
  size_t out_dim = 0;
  size_t in_dim = 0;
  bool preserved = false;

  Tensor fp_weight;    // preserved only; values rounded to bf16 grid
  IntTensor wq;        // quantized only; [out_dim x in_dim], pre-permuted
  DualScalePlan plan;  // group split + per-row scales (original column ids)
  QuantParams act;     // per-tensor static activation params

  size_t payload_bytes() const;  // exact serialized size of this layer's section
};

struct QuantizedModel {
  ToyModelConfig cfg;
  BitwidthScheme scheme;
  std::vector<std::string> keep_list;
  std::vector<QuantizedLayer> layers;  // registry order

  const QuantizedLayer& layer(const std::string& name) const;
};

// Kernel A: float activations to integer codes (same numeric contract as
// quantize; shared oracle).
IntTensor kernel_a_quantize_activation(const Tensor& x, const QuantParams& p);

// Kernel B: integer GEMM over the dual-scale groups with exact wide-integer
// accumulation, then dequantization; zero-point correction uses per-column
// integer column sums precomputed offline.
Tensor kernel_b_gemm_dequant(const IntTensor& xq, const QuantizedLayer& layer);

// Columns reordered to [outlier | normal]; disabled plans are the identity.
Tensor permute_activations(const Tensor& x, const DualScalePlan& plan);

enum class Engine { int_kernels, fakequant_sim };
Engine parse_engine(const std::string& text);

// Rollout with every chunk generated through the quantized model.
Rollout run_quantized(const QuantizedModel& qm, uint64_t prompt_seed, Engine engine);

// Single quantized-layer forward on either path (used by tests and providers).
Tensor quantized_layer_forward(const QuantizedLayer& layer, const Tensor& x, Engine engine);

struct LayerBytes {
  std::string name;
  size_t bytes = 0;
  bool preserved = false;
};

struct SizeReport {
  std::vector<LayerBytes> per_layer;
  size_t payload_bytes = 0;   // sum of per-layer sections
  size_t header_bytes = 0;    // magic + version + JSON header, exact
  size_t file_bytes = 0;      // header_bytes + payload_bytes
  size_t baseline_bytes = 0;  // uniform 16-bit storage of every weight
  double ratio = 0.0;         // baseline / payload (header excluded)
};

SizeReport size_report(const QuantizedModel& qm);

void save_quantized_model(const std::string& path, const QuantizedModel& qm);
QuantizedModel load_quantized_model(const std::string& path);

}  // namespace qarvd

#endif  // QARVD_ENGINE_HPP

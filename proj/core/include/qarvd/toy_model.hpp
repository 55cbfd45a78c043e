#ifndef QARVD_TOY_MODEL_HPP
#define QARVD_TOY_MODEL_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "qarvd/quant.hpp"
#include "qarvd/tensor.hpp"

namespace qarvd {

// Synthetic outlier channels: input channels of layers whose name contains
// `pattern` get multiplied by `gamma` (a seeded choice of round(fraction*d_in)
// columns, at least one).
struct OutlierInjection {
  std::string pattern;
  double fraction = 0.02;
  double gamma = 8.0;
};

struct ToyModelConfig {
  size_t blocks = 2;
  size_t hidden = 64;
  size_t tokens_per_chunk = 16;  // M
  size_t chunks = 7;             // N
  size_t steps = 4;              // denoising steps T per chunk
  size_t context_window = 0;     // previous chunks visible to self-attention; 0 = all
  size_t prompt_tokens = 4;
  size_t time_basis = 16;        // sinusoidal feature width feeding time_embed
  uint64_t seed = 1;
  std::vector<OutlierInjection> injections;

  size_t ffn_dim() const { return 4 * hidden; }
  void validate() const;
};

std::string toy_config_to_json_text(const ToyModelConfig& cfg);
ToyModelConfig toy_config_from_json_text(const std::string& text);

struct LayerSpec {
  std::string name;
  size_t out_dim = 0;
  size_t in_dim = 0;  // input channels; weights are stored [out_dim x in_dim]
};

// Chunk-wise autoregressive denoiser: per block the ten quantizable linear
// layers (self_attn.q/k/v/o, cross_attn.q/k/v/o, ffn.0, ffn.2) plus the
// time-embedding projection and final head, which deployment keeps in high
// precision by default.
class ToyModel {
 public:
  static ToyModel build(const ToyModelConfig& cfg);

  const ToyModelConfig& config() const { return cfg_; }
  const std::vector<LayerSpec>& registry() const { return registry_; }
  bool has_layer(const std::string& name) const { return weights_.count(name) != 0; }
  const Tensor& weight(const std::string& name) const;
  void set_weight(const std::string& name, Tensor w);

  void save(const std::string& path) const;
  static ToyModel load(const std::string& path);

 private:
  ToyModelConfig cfg_;
  std::vector<LayerSpec> registry_;
  std::map<std::string, Tensor> weights_;
};

// Keep-list patterns for the modules preserved at high precision.
std::vector<std::string> default_keep_list();
bool matches_keep_list(const std::string& layer, const std::vector<std::string>& keep_list);

// Pluggable linear layer execution; the rollout itself never touches weights.
class LinearProvider {
 public:
  virtual ~LinearProvider() = default;
  virtual Tensor forward(const std::string& layer, const Tensor& x) const = 0;
};

// Full-precision X * W^T.
class FpProvider : public LinearProvider {
 public:
  explicit FpProvider(const ToyModel& model) : model_(model) {}
  Tensor forward(const std::string& layer, const Tensor& x) const override;

 private:
  const ToyModel& model_;
};

// MinMax-initialized fake quantization with no reconstruction: per-output-
// channel symmetric weights at weight_bits, live per-tensor symmetric
// activations at activation_bits. Layers on the keep list pass through.
class MinMaxFakeQuantProvider : public LinearProvider {
 public:
  MinMaxFakeQuantProvider(const ToyModel& model, BitwidthScheme scheme,
                          std::vector<std::string> keep_list = default_keep_list());
  Tensor forward(const std::string& layer, const Tensor& x) const override;

 private:
  const ToyModel& model_;
  BitwidthScheme scheme_;
  std::vector<std::string> keep_list_;
  std::map<std::string, QuantParams> weight_params_;
  std::map<std::string, Tensor> fq_weights_;  // cached fake-quantized weights
};

enum class QuantTarget { none, all, only_chunk };

struct QuantMode {
  QuantTarget target = QuantTarget::none;
  size_t chunk = 0;  // 1-based, used when target == only_chunk
  BitwidthScheme scheme;
  std::vector<std::string> keep_list = default_keep_list();

  static QuantMode full_precision() { return {}; }
  static QuantMode quantize_all(BitwidthScheme s) { return {QuantTarget::all, 0, s, default_keep_list()}; }
  static QuantMode quantize_only_chunk(size_t i, BitwidthScheme s) {
    return {QuantTarget::only_chunk, i, s, default_keep_list()};
  }
};

// Activation captured at a layer input during the generation of one chunk;
// the T per-step inputs are stacked row-wise into a single matrix.
struct CapturedActivation {
  std::string layer;
  size_t chunk = 0;  // 1-based
  Tensor x;
};

struct Rollout {
  uint64_t prompt_seed = 0;
  std::vector<Tensor> chunks;  // N matrices [M x d], generated in order
  std::vector<CapturedActivation> captures;
};

// Engine-agnostic chunk-wise rollout. `quant` may be null when the target
// never selects it. In only_chunk mode exactly that chunk's denoising steps
// run through `quant`; later chunks condition on the perturbed latents.
Rollout run_rollout(const ToyModelConfig& cfg, const LinearProvider& full_precision,
                    const LinearProvider* quant, QuantTarget target, size_t only_chunk,
                    uint64_t prompt_seed, const std::vector<std::string>& capture_layers = {});

// Convenience wrapper on a ToyModel with the built-in providers.
Rollout rollout(const ToyModel& model, uint64_t prompt_seed, const QuantMode& mode,
                const std::vector<std::string>& capture_layers = {});

// Mean squared difference over all N*M*d latent entries.
double latent_mse(const Rollout& a, const Rollout& b);
std::vector<double> per_chunk_mse(const Rollout& a, const Rollout& b);

}  // namespace qarvd

#endif  // QARVD_TOY_MODEL_HPP

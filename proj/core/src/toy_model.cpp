#include "qarvd/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "qarvd/bytes.hpp"
#include "qarvd/rng.hpp"

namespace qarvd {

namespace {

using nlohmann::json;

constexpr uint64_t kPromptSalt = 0x70726f6d7074ULL;  // "prompt"
constexpr uint64_t kNoiseSalt = 0x6e6f697365ULL;     // "noise"
constexpr uint64_t kInjectSalt = 0x696e6a656374ULL;  // "inject"

const char* kBlockLayerTypes[] = {"self_attn.q", "self_attn.k", "self_attn.v", "self_attn.o",
                                  "cross_attn.q", "cross_attn.k", "cross_attn.v", "cross_attn.o",
                                  "ffn.0", "ffn.2"};

Tensor gaussian_matrix(Prng& rng, size_t rows, size_t cols, double std_dev) {
  Tensor t({rows, cols});
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian() * std_dev;
  return t;
}

Tensor rmsnorm_rows(const Tensor& x) {
  Tensor out({x.rows(), x.cols()});
  const size_t n = x.cols();
  for (size_t r = 0; r < x.rows(); ++r) {
    double ms = 0.0;
    for (size_t c = 0; c < n; ++c) ms += x.at(r, c) * x.at(r, c);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(n) + 1e-6);
    for (size_t c = 0; c < n; ++c) out.at(r, c) = x.at(r, c) * inv;
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out({x.rows(), x.cols()});
  for (size_t r = 0; r < x.rows(); ++r) {
    double mx = x.at(r, 0);
    for (size_t c = 1; c < x.cols(); ++c) mx = std::max(mx, x.at(r, c));
    double sum = 0.0;
    for (size_t c = 0; c < x.cols(); ++c) {
      const double e = std::exp(x.at(r, c) - mx);
      out.at(r, c) = e;
      sum += e;
    }
    for (size_t c = 0; c < x.cols(); ++c) out.at(r, c) /= sum;
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * out[i] * (1.0 + std::erf(out[i] / std::sqrt(2.0)));
  return out;
}

Tensor vstack(const std::vector<const Tensor*>& parts, size_t cols) {
  size_t rows = 0;
  for (const Tensor* p : parts) rows += p->rows();
  Tensor out({rows, cols});
  size_t at = 0;
  for (const Tensor* p : parts) {
    std::copy(p->data(), p->data() + p->size(), out.data() + at * cols);
    at += p->rows();
  }
  return out;
}

Tensor add_broadcast_row(const Tensor& x, const Tensor& row) {
  Tensor out = x;
  for (size_t r = 0; r < x.rows(); ++r)
    for (size_t c = 0; c < x.cols(); ++c) out.at(r, c) += row[c];
  return out;
}

Tensor time_basis_row(size_t width, size_t step) {
  Tensor t({1, width});
  const double pos = static_cast<double>(step + 1);
  for (size_t j = 0; 2 * j < width; ++j) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(width));
    t[2 * j] = std::sin(pos * omega);
    if (2 * j + 1 < width) t[2 * j + 1] = std::cos(pos * omega);
  }
  return t;
}

Tensor prompt_embedding(const ToyModelConfig& cfg, uint64_t prompt_seed) {
  Prng rng(mix_seed(prompt_seed, kPromptSalt));
  return gaussian_matrix(rng, cfg.prompt_tokens, cfg.hidden, 1.0);
}

Tensor chunk_noise(const ToyModelConfig& cfg, uint64_t prompt_seed, size_t chunk_1based) {
  Prng rng(mix_seed(mix_seed(prompt_seed, kNoiseSalt), chunk_1based));
  return gaussian_matrix(rng, cfg.tokens_per_chunk, cfg.hidden, 1.0);
}

}  // namespace

void ToyModelConfig::validate() const {
  if (blocks == 0) throw std::invalid_argument("toy model: blocks must be >= 1");
  if (hidden == 0 || tokens_per_chunk == 0 || prompt_tokens == 0 || time_basis == 0)
    throw std::invalid_argument("toy model: dimensions must be positive");
  if (chunks < 2) throw std::invalid_argument("toy model: need at least 2 chunks");
  if (steps == 0) throw std::invalid_argument("toy model: need at least 1 denoising step");
  for (const auto& inj : injections) {
    if (inj.pattern.empty()) throw std::invalid_argument("toy model: empty injection pattern");
    if (!(inj.fraction > 0.0) || inj.fraction > 1.0)
      throw std::invalid_argument("toy model: injection fraction must be in (0, 1]");
    if (!(inj.gamma > 0.0)) throw std::invalid_argument("toy model: injection gamma must be positive");
  }
}

ToyModel ToyModel::build(const ToyModelConfig& cfg) {
  cfg.validate();
  ToyModel m;
  m.cfg_ = cfg;

  m.registry_.push_back({"time_embed", cfg.hidden, cfg.time_basis});
  for (size_t b = 0; b < cfg.blocks; ++b) {
    for (const char* type : kBlockLayerTypes) {
      std::ostringstream name;
      name << "block" << b << "." << type;
      size_t out_dim = cfg.hidden, in_dim = cfg.hidden;
      if (std::string(type) == "ffn.0") out_dim = cfg.ffn_dim();
      if (std::string(type) == "ffn.2") in_dim = cfg.ffn_dim();
      if (std::string(type) == "cross_attn.k" || std::string(type) == "cross_attn.v")
        in_dim = cfg.hidden;  // prompt embeddings share the hidden width
      m.registry_.push_back({name.str(), out_dim, in_dim});
    }
  }
  m.registry_.push_back({"head", cfg.hidden, cfg.hidden});

  for (size_t li = 0; li < m.registry_.size(); ++li) {
    const LayerSpec& spec = m.registry_[li];
    Prng rng(mix_seed(cfg.seed, li));
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(spec.in_dim));
    Tensor w = gaussian_matrix(rng, spec.out_dim, spec.in_dim, std_dev);

    for (const auto& inj : cfg.injections) {
      if (spec.name.find(inj.pattern) == std::string::npos) continue;
      const size_t count = std::max<size_t>(
          1, static_cast<size_t>(std::llround(inj.fraction * static_cast<double>(spec.in_dim))));
      // seeded partial Fisher-Yates choice of `count` distinct columns
      std::vector<size_t> cols(spec.in_dim);
      std::iota(cols.begin(), cols.end(), 0);
      Prng pick(mix_seed(mix_seed(cfg.seed, li), kInjectSalt));
      for (size_t i = 0; i < count && i < cols.size(); ++i) {
        const size_t j = i + static_cast<size_t>(pick.next_u64() % (cols.size() - i));
        std::swap(cols[i], cols[j]);
      }
      for (size_t i = 0; i < count && i < cols.size(); ++i)
        for (size_t r = 0; r < spec.out_dim; ++r) w.at(r, cols[i]) *= inj.gamma;
    }
    m.weights_.emplace(spec.name, std::move(w));
  }
  return m;
}

const Tensor& ToyModel::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw std::out_of_range("no such layer in registry: " + name);
  return it->second;
}

void ToyModel::set_weight(const std::string& name, Tensor w) {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw std::out_of_range("no such layer in registry: " + name);
  if (w.shape() != it->second.shape())
    throw std::invalid_argument("set_weight: shape mismatch for " + name);
  it->second = std::move(w);
}

std::vector<std::string> default_keep_list() { return {"time_embed", "head"}; }

bool matches_keep_list(const std::string& layer, const std::vector<std::string>& keep_list) {
  for (const auto& pattern : keep_list)
    if (!pattern.empty() && layer.find(pattern) != std::string::npos) return true;
  return false;
}

// ---- model file: magic, JSON header, then QTNS weight blobs in registry order ----

namespace {
constexpr char kModelMagic[4] = {'Q', 'A', 'R', 'M'};
constexpr uint16_t kModelVersion = 1;
}  // namespace

namespace detail {

json config_to_json(const ToyModelConfig& cfg) {
  json j;
  j["blocks"] = cfg.blocks;
  j["hidden"] = cfg.hidden;
  j["tokens_per_chunk"] = cfg.tokens_per_chunk;
  j["chunks"] = cfg.chunks;
  j["steps"] = cfg.steps;
  j["context_window"] = cfg.context_window;
  j["prompt_tokens"] = cfg.prompt_tokens;
  j["time_basis"] = cfg.time_basis;
  j["seed"] = cfg.seed;
  j["injections"] = json::array();
  for (const auto& inj : cfg.injections)
    j["injections"].push_back({{"pattern", inj.pattern},
                               {"fraction", inj.fraction},
                               {"gamma", inj.gamma}});
  return j;
}

ToyModelConfig config_from_json(const json& j) {
  ToyModelConfig cfg;
  cfg.blocks = j.at("blocks").get<size_t>();
  cfg.hidden = j.at("hidden").get<size_t>();
  cfg.tokens_per_chunk = j.at("tokens_per_chunk").get<size_t>();
  cfg.chunks = j.at("chunks").get<size_t>();
  cfg.steps = j.at("steps").get<size_t>();
  cfg.context_window = j.at("context_window").get<size_t>();
  cfg.prompt_tokens = j.at("prompt_tokens").get<size_t>();
  cfg.time_basis = j.at("time_basis").get<size_t>();
  cfg.seed = j.at("seed").get<uint64_t>();
  if (j.contains("injections")) {
    for (const auto& inj : j.at("injections")) {
      cfg.injections.push_back({inj.at("pattern").get<std::string>(),
                                inj.at("fraction").get<double>(),
                                inj.at("gamma").get<double>()});
    }
  }
  return cfg;
}

}  // namespace detail

std::string toy_config_to_json_text(const ToyModelConfig& cfg) {
  return detail::config_to_json(cfg).dump();
}

ToyModelConfig toy_config_from_json_text(const std::string& text) {
  return detail::config_from_json(json::parse(text));
}

void ToyModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  json header;
  header["config"] = detail::config_to_json(cfg_);
  header["layers"] = json::array();
  for (const auto& spec : registry_)
    header["layers"].push_back(
        {{"name", spec.name}, {"out_dim", spec.out_dim}, {"in_dim", spec.in_dim}});
  const std::string htext = header.dump();
  write_bytes(os, kModelMagic, 4);
  write_le<uint16_t>(os, kModelVersion);
  write_le<uint64_t>(os, htext.size());
  write_bytes(os, htext.data(), htext.size());
  for (const auto& spec : registry_) save_tensor(os, weights_.at(spec.name), TensorDType::f64);
}

ToyModel ToyModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  read_bytes(is, magic, 4);
  if (std::memcmp(magic, kModelMagic, 4) != 0)
    throw std::runtime_error("model file: bad magic in " + path);
  if (read_le<uint16_t>(is) != kModelVersion)
    throw std::runtime_error("model file: unsupported version");
  const uint64_t hlen = read_le<uint64_t>(is);
  std::string htext(hlen, '\0');
  read_bytes(is, htext.data(), hlen);
  const json header = json::parse(htext);

  ToyModel m;
  m.cfg_ = detail::config_from_json(header.at("config"));
  for (const auto& spec : header.at("layers")) {
    LayerSpec s{spec.at("name").get<std::string>(), spec.at("out_dim").get<size_t>(),
                spec.at("in_dim").get<size_t>()};
    m.registry_.push_back(s);
  }
  for (const auto& spec : m.registry_) {
    Tensor w = load_tensor(is);
    if (w.shape() != std::vector<size_t>{spec.out_dim, spec.in_dim})
      throw std::runtime_error("model file: weight shape mismatch for " + spec.name);
    m.weights_.emplace(spec.name, std::move(w));
  }
  return m;
}

// ---- providers ----

Tensor FpProvider::forward(const std::string& layer, const Tensor& x) const {
  return matmul_nt(x, model_.weight(layer));
}

MinMaxFakeQuantProvider::MinMaxFakeQuantProvider(const ToyModel& model, BitwidthScheme scheme,
                                                 std::vector<std::string> keep_list)
    : model_(model), scheme_(scheme), keep_list_(std::move(keep_list)) {
  if (scheme_.is_lossless()) return;
  for (const auto& spec : model.registry()) {
    if (matches_keep_list(spec.name, keep_list_)) continue;
    const Tensor& w = model.weight(spec.name);
    QuantParams p = init_scale_minmax(w, scheme_.weight_bits, Granularity::per_channel, 0);
    fq_weights_.emplace(spec.name, fake_quant(w, p));
    weight_params_.emplace(spec.name, std::move(p));
  }
}

Tensor MinMaxFakeQuantProvider::forward(const std::string& layer, const Tensor& x) const {
  if (scheme_.is_lossless() || matches_keep_list(layer, keep_list_))
    return matmul_nt(x, model_.weight(layer));
  const QuantParams act =
      init_scale_minmax(x, scheme_.activation_bits, Granularity::per_tensor);
  return matmul_nt(fake_quant(x, act), fq_weights_.at(layer));
}

// ---- rollout ----

namespace {

struct CaptureSink {
  const std::vector<std::string>* layers = nullptr;
  // per layer: per-step inputs for the chunk currently being generated
  std::map<std::string, std::vector<Tensor>> pending;

  bool wants(const std::string& layer) const {
    if (!layers || layers->empty()) return false;
    return std::find(layers->begin(), layers->end(), layer) != layers->end();
  }
  void record(const std::string& layer, const Tensor& x) { pending[layer].push_back(x); }

  void flush(size_t chunk_1based, std::vector<CapturedActivation>& out) {
    for (auto& [layer, steps] : pending) {
      size_t rows = 0;
      for (const auto& t : steps) rows += t.rows();
      Tensor stacked({rows, steps.front().cols()});
      size_t at = 0;
      for (const auto& t : steps) {
        std::copy(t.data(), t.data() + t.size(), stacked.data() + at * t.cols());
        at += t.rows();
      }
      out.push_back({layer, chunk_1based, std::move(stacked)});
    }
    pending.clear();
  }
};

Tensor denoiser_forward(const ToyModelConfig& cfg, const LinearProvider& lin,
                        const Tensor& z, const std::vector<Tensor>& prev_chunks,
                        const Tensor& prompt, size_t step, CaptureSink& sink) {
  auto call = [&](const std::string& layer, const Tensor& x) {
    if (sink.wants(layer)) sink.record(layer, x);
    return lin.forward(layer, x);
  };

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  const Tensor t_emb = call("time_embed", time_basis_row(cfg.time_basis, step));
  Tensor h = add_broadcast_row(z, t_emb);

  // causal context: the last `context_window` clean chunks plus the working latent
  std::vector<const Tensor*> ctx_parts;
  const size_t window = cfg.context_window == 0 ? prev_chunks.size()
                                                : std::min(cfg.context_window, prev_chunks.size());
  for (size_t i = prev_chunks.size() - window; i < prev_chunks.size(); ++i)
    ctx_parts.push_back(&prev_chunks[i]);

  for (size_t b = 0; b < cfg.blocks; ++b) {
    const std::string base = "block" + std::to_string(b) + ".";

    Tensor hn = rmsnorm_rows(h);
    std::vector<const Tensor*> parts = ctx_parts;
    parts.push_back(&hn);
    const Tensor ctx = rmsnorm_rows(vstack(parts, cfg.hidden));
    Tensor q = call(base + "self_attn.q", hn);
    const Tensor k = call(base + "self_attn.k", ctx);
    const Tensor v = call(base + "self_attn.v", ctx);
    for (size_t i = 0; i < q.size(); ++i) q[i] *= inv_sqrt_d;
    const Tensor attn = softmax_rows(matmul_nt(q, k));
    const Tensor sa = call(base + "self_attn.o", matmul(attn, v));
    for (size_t i = 0; i < h.size(); ++i) h[i] += sa[i];

    hn = rmsnorm_rows(h);
    Tensor q2 = call(base + "cross_attn.q", hn);
    const Tensor k2 = call(base + "cross_attn.k", prompt);
    const Tensor v2 = call(base + "cross_attn.v", prompt);
    for (size_t i = 0; i < q2.size(); ++i) q2[i] *= inv_sqrt_d;
    const Tensor attn2 = softmax_rows(matmul_nt(q2, k2));
    const Tensor ca = call(base + "cross_attn.o", matmul(attn2, v2));
    for (size_t i = 0; i < h.size(); ++i) h[i] += ca[i];

    hn = rmsnorm_rows(h);
    const Tensor u = gelu(call(base + "ffn.0", hn));
    const Tensor ff = call(base + "ffn.2", u);
    for (size_t i = 0; i < h.size(); ++i) h[i] += ff[i];
  }

  return call("head", rmsnorm_rows(h));
}

}  // namespace

Rollout run_rollout(const ToyModelConfig& cfg, const LinearProvider& full_precision,
                    const LinearProvider* quant, QuantTarget target, size_t only_chunk,
                    uint64_t prompt_seed, const std::vector<std::string>& capture_layers) {
  cfg.validate();
  if (target == QuantTarget::only_chunk && (only_chunk < 1 || only_chunk > cfg.chunks))
    throw std::out_of_range("rollout: chunk index out of [1, N]");
  if (target != QuantTarget::none && quant == nullptr)
    throw std::invalid_argument("rollout: quantized provider required for this mode");

  Rollout out;
  out.prompt_seed = prompt_seed;
  const Tensor prompt = prompt_embedding(cfg, prompt_seed);

  CaptureSink sink;
  sink.layers = &capture_layers;

  const double step_scale = 1.0 / static_cast<double>(cfg.steps);
  for (size_t i = 1; i <= cfg.chunks; ++i) {
    const bool quantize_this_chunk =
        target == QuantTarget::all || (target == QuantTarget::only_chunk && i == only_chunk);
    const LinearProvider& lin = quantize_this_chunk ? *quant : full_precision;

    Tensor z = chunk_noise(cfg, prompt_seed, i);
    for (size_t t = 0; t < cfg.steps; ++t) {
      const Tensor delta = denoiser_forward(cfg, lin, z, out.chunks, prompt, t, sink);
      for (size_t e = 0; e < z.size(); ++e) z[e] -= step_scale * delta[e];
      if (!z.all_finite())
        throw std::runtime_error("rollout: non-finite latent at chunk " + std::to_string(i));
    }
    sink.flush(i, out.captures);
    out.chunks.push_back(std::move(z));
  }
  return out;
}

Rollout rollout(const ToyModel& model, uint64_t prompt_seed, const QuantMode& mode,
                const std::vector<std::string>& capture_layers) {
  const FpProvider fp(model);
  if (mode.target == QuantTarget::none)
    return run_rollout(model.config(), fp, nullptr, mode.target, mode.chunk, prompt_seed,
                       capture_layers);
  const MinMaxFakeQuantProvider quant(model, mode.scheme, mode.keep_list);
  return run_rollout(model.config(), fp, &quant, mode.target, mode.chunk, prompt_seed,
                     capture_layers);
}

double latent_mse(const Rollout& a, const Rollout& b) {
  if (a.chunks.size() != b.chunks.size())
    throw std::invalid_argument("latent_mse: chunk count mismatch");
  double acc = 0.0;
  size_t count = 0;
  for (size_t i = 0; i < a.chunks.size(); ++i) {
    acc += frobenius_sq_distance(a.chunks[i], b.chunks[i]);
    count += a.chunks[i].size();
  }
  return acc / static_cast<double>(count);
}

std::vector<double> per_chunk_mse(const Rollout& a, const Rollout& b) {
  if (a.chunks.size() != b.chunks.size())
    throw std::invalid_argument("per_chunk_mse: chunk count mismatch");
  std::vector<double> out(a.chunks.size());
  for (size_t i = 0; i < a.chunks.size(); ++i)
    out[i] = frobenius_sq_distance(a.chunks[i], b.chunks[i]) /
             static_cast<double>(a.chunks[i].size());
  return out;
}

}  // namespace qarvd

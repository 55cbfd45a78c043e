#include "qarvd/sensitivity.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "qarvd/threading.hpp"

namespace qarvd {

using nlohmann::json;

std::vector<double> normalize_alpha(const std::vector<double>& raw) {
  double total = 0.0;
  for (double a : raw) total += a;
  std::vector<double> out(raw.size());
  if (total <= 0.0) {
    // lossless limit: every probe left the video untouched
    for (auto& v : out) v = 1.0 / static_cast<double>(raw.size());
    return out;
  }
  for (size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / total;
  return out;
}

SensitivityProfile profile_sensitivity(const ToyModel& model, BitwidthScheme scheme,
                                       const std::vector<uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("profile_sensitivity: need at least one seed");
  const size_t n_chunks = model.config().chunks;

  const FpProvider fp(model);
  const MinMaxFakeQuantProvider quant(model, scheme);

  // (seed, chunk) probes are independent; slot-indexed writes keep the
  // aggregation identical for any worker count.
  std::vector<Rollout> references(seeds.size());
  parallel_for(seeds.size(), [&](size_t s) {
    references[s] =
        run_rollout(model.config(), fp, nullptr, QuantTarget::none, 0, seeds[s]);
  });

  std::vector<std::vector<double>> per_seed(seeds.size(), std::vector<double>(n_chunks, 0.0));
  parallel_for(seeds.size() * n_chunks, [&](size_t task) {
    const size_t s = task / n_chunks;
    const size_t i = task % n_chunks;  // 0-based chunk
    const Rollout probe = run_rollout(model.config(), fp, &quant, QuantTarget::only_chunk,
                                      i + 1, seeds[s]);
    per_seed[s][i] = latent_mse(references[s], probe);
  });

  SensitivityProfile profile;
  profile.scheme = scheme;
  profile.seeds = seeds;
  profile.per_seed = std::move(per_seed);
  profile.alpha_raw.assign(n_chunks, 0.0);
  for (size_t i = 0; i < n_chunks; ++i) {
    double acc = 0.0;
    for (size_t s = 0; s < seeds.size(); ++s) acc += profile.per_seed[s][i];
    profile.alpha_raw[i] = acc / static_cast<double>(seeds.size());
  }
  profile.alpha_normalized = normalize_alpha(profile.alpha_raw);
  return profile;
}

WeightingKind parse_weighting(const std::string& text) {
  if (text == "uniform") return WeightingKind::uniform;
  if (text == "heuristic_exp") return WeightingKind::heuristic_exp;
  if (text == "reverse") return WeightingKind::reverse;
  if (text == "final_quality") return WeightingKind::final_quality;
  throw std::invalid_argument("unknown weighting kind: " + text);
}

std::string weighting_name(WeightingKind kind) {
  switch (kind) {
    case WeightingKind::uniform: return "uniform";
    case WeightingKind::heuristic_exp: return "heuristic_exp";
    case WeightingKind::reverse: return "reverse";
    case WeightingKind::final_quality: return "final_quality";
  }
  throw std::logic_error("unreachable weighting kind");
}

std::vector<double> weighting_strategy(const SensitivityProfile& profile, WeightingKind kind) {
  const size_t n = profile.num_chunks();
  if (n == 0) throw std::invalid_argument("weighting_strategy: empty profile");
  std::vector<double> w(n);
  switch (kind) {
    case WeightingKind::uniform:
      for (auto& v : w) v = 1.0 / static_cast<double>(n);
      return w;
    case WeightingKind::heuristic_exp: {
      double total = 0.0;
      for (size_t i = 0; i < n; ++i) {
        w[i] = std::pow(2.0, -static_cast<double>(i + 1));
        total += w[i];
      }
      for (auto& v : w) v /= total;
      return w;
    }
    case WeightingKind::reverse: {
      w = profile.alpha_normalized;
      std::reverse(w.begin(), w.end());
      return w;
    }
    case WeightingKind::final_quality:
      return profile.alpha_normalized;
  }
  throw std::logic_error("unreachable weighting kind");
}

std::string profile_to_json(const SensitivityProfile& profile) {
  json j;
  j["scheme"] = profile.scheme.str();
  j["N"] = profile.num_chunks();
  j["alpha_raw"] = profile.alpha_raw;
  j["alpha_normalized"] = profile.alpha_normalized;
  j["seeds"] = profile.seeds;
  j["per_seed"] = profile.per_seed;
  return j.dump(2) + "\n";
}

SensitivityProfile profile_from_json(const std::string& text) {
  const json j = json::parse(text);
  SensitivityProfile p;
  p.scheme = BitwidthScheme::parse(j.at("scheme").get<std::string>());
  p.alpha_raw = j.at("alpha_raw").get<std::vector<double>>();
  p.alpha_normalized = j.at("alpha_normalized").get<std::vector<double>>();
  p.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (j.contains("per_seed")) p.per_seed = j.at("per_seed").get<std::vector<std::vector<double>>>();
  if (p.alpha_raw.size() != j.at("N").get<size_t>() ||
      p.alpha_normalized.size() != p.alpha_raw.size())
    throw std::runtime_error("sensitivity profile: inconsistent lengths");
  return p;
}

void save_profile(const std::string& path, const SensitivityProfile& profile) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << profile_to_json(profile);
}

SensitivityProfile load_profile(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return profile_from_json(ss.str());
}

std::string profile_to_tsv(const SensitivityProfile& profile) {
  std::ostringstream ss;
  ss << "chunk\talpha_raw\talpha_normalized\n";
  for (size_t i = 0; i < profile.num_chunks(); ++i)
    ss << (i + 1) << "\t" << profile.alpha_raw[i] << "\t" << profile.alpha_normalized[i] << "\n";
  return ss.str();
}

}  // namespace qarvd

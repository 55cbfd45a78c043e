#ifndef QARVD_SENSITIVITY_HPP
#define QARVD_SENSITIVITY_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "qarvd/quant.hpp"
#include "qarvd/toy_model.hpp"

namespace qarvd {

// Chunk-wise quantization sensitivity: alpha_raw[i] is the mean (over seeds)
// full-sequence latent MSE between the clean rollout and the rollout with
// quantization enabled only during chunk i+1's generation.
struct SensitivityProfile {
  BitwidthScheme scheme;
  std::vector<uint64_t> seeds;
  std::vector<double> alpha_raw;         // length N
  std::vector<double> alpha_normalized;  // sums to 1; uniform if raw is all zero
  std::vector<std::vector<double>> per_seed;  // [seed][chunk], for auditing

  size_t num_chunks() const { return alpha_raw.size(); }
};

SensitivityProfile profile_sensitivity(const ToyModel& model, BitwidthScheme scheme,
                                       const std::vector<uint64_t>& seeds);

// Normalizes a raw profile; an all-zero profile becomes uniform 1/N.
std::vector<double> normalize_alpha(const std::vector<double>& raw);

enum class WeightingKind { uniform, heuristic_exp, reverse, final_quality };

WeightingKind parse_weighting(const std::string& text);
std::string weighting_name(WeightingKind kind);

// uniform: 1/N each; heuristic_exp: w_i proportional to 2^-i (1-based),
// normalized; reverse: the normalized profile reversed; final_quality: the
// normalized profile itself.
std::vector<double> weighting_strategy(const SensitivityProfile& profile, WeightingKind kind);

std::string profile_to_json(const SensitivityProfile& profile);
SensitivityProfile profile_from_json(const std::string& text);
void save_profile(const std::string& path, const SensitivityProfile& profile);
SensitivityProfile load_profile(const std::string& path);
std::string profile_to_tsv(const SensitivityProfile& profile);

}  // namespace qarvd

#endif  // QARVD_SENSITIVITY_HPP

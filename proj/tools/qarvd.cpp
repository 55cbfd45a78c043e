// qarvd: post-training quantization pipeline for the toy chunk-wise
// autoregressive denoiser. Commands compose through files only; with fixed
// seeds every command writes byte-identical output.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qarvd/calibrate.hpp"
#include "qarvd/engine.hpp"
#include "qarvd/metrics.hpp"
#include "qarvd/outlier.hpp"
#include "qarvd/sensitivity.hpp"
#include "qarvd/threading.hpp"
#include "qarvd/toy_model.hpp"

using nlohmann::json;
using namespace qarvd;

namespace {

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << text;
}

std::vector<uint64_t> seed_range(uint64_t base, size_t count) {
  std::vector<uint64_t> seeds(count);
  for (size_t i = 0; i < count; ++i) seeds[i] = base + i;
  return seeds;
}

std::vector<std::string> parse_keep_list(const std::string& text) {
  if (text.empty()) return {};
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

OutlierInjection parse_injection(const std::string& text) {
  // pattern:fraction:gamma
  const size_t p1 = text.find(':');
  const size_t p2 = text.find(':', p1 == std::string::npos ? p1 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos)
    throw std::invalid_argument("injection spec must be pattern:fraction:gamma, got " + text);
  OutlierInjection inj;
  inj.pattern = text.substr(0, p1);
  inj.fraction = std::stod(text.substr(p1 + 1, p2 - p1 - 1));
  inj.gamma = std::stod(text.substr(p2 + 1));
  return inj;
}

std::vector<std::string> quantizable_layers(const ToyModel& model,
                                            const std::vector<std::string>& keep) {
  std::vector<std::string> out;
  for (const auto& spec : model.registry())
    if (!matches_keep_list(spec.name, keep)) out.push_back(spec.name);
  return out;
}

// ---- command payloads ----

struct GenModelArgs {
  std::string out;
  ToyModelConfig cfg;
  std::vector<std::string> inject_specs;
};

int cmd_gen_model(const GenModelArgs& a) {
  ToyModelConfig cfg = a.cfg;
  for (const auto& spec : a.inject_specs) cfg.injections.push_back(parse_injection(spec));
  const ToyModel model = ToyModel::build(cfg);
  model.save(a.out);
  std::cout << "wrote model with " << model.registry().size() << " layers to " << a.out << "\n";
  return 0;
}

struct DetectArgs {
  std::string model, out, norms_tsv;
  double tau = kDefaultTau;
  double alpha_min = kDefaultAlphaMin;
  size_t align = kDefaultAlign;
  std::string keep_list = "time_embed,head";
};

int cmd_detect(const DetectArgs& a) {
  const ToyModel model = ToyModel::load(a.model);
  const auto keep = parse_keep_list(a.keep_list);
  std::vector<OutlierReport> reports;
  for (const auto& name : quantizable_layers(model, keep))
    reports.push_back(analyze_layer(name, model.weight(name), a.tau, a.alpha_min, a.align));

  const FleetStats fleet = fleet_outlier_stats(reports);

  json j;
  j["tau"] = a.tau;
  j["alpha_min"] = a.alpha_min;
  j["align"] = a.align;
  j["layers"] = json::array();
  for (const auto& rep : reports) {
    j["layers"].push_back({{"name", rep.layer_name},
                           {"channels", rep.norms.size()},
                           {"median", rep.median},
                           {"mad", rep.mad},
                           {"threshold", rep.threshold},
                           {"raw_outliers", rep.raw_outliers},
                           {"aligned_outliers", rep.aligned_outliers}});
  }
  j["fleet"] = {{"ratio_by_type", fleet.ratio_by_type},
                {"ratio_by_depth", json::object()}};
  for (const auto& [depth, ratio] : fleet.ratio_by_depth)
    j["fleet"]["ratio_by_depth"][std::to_string(depth)] = ratio;
  write_text_file(a.out, j.dump(2) + "\n");

  if (!a.norms_tsv.empty()) {
    std::ostringstream tsv;
    tsv << "layer\trank\tchannel\tnorm\toutlier\n";
    for (const auto& rep : reports) {
      std::vector<size_t> order(rep.norms.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](size_t x, size_t y) {
        if (rep.norms[x] != rep.norms[y]) return rep.norms[x] > rep.norms[y];
        return x < y;
      });
      for (size_t r = 0; r < order.size(); ++r) {
        const bool is_outlier = std::binary_search(rep.aligned_outliers.begin(),
                                                   rep.aligned_outliers.end(), order[r]);
        tsv << rep.layer_name << "\t" << r << "\t" << order[r] << "\t" << rep.norms[order[r]]
            << "\t" << (is_outlier ? 1 : 0) << "\n";
      }
    }
    write_text_file(a.norms_tsv, tsv.str());
  }

  size_t with_outliers = 0;
  for (const auto& rep : reports)
    if (rep.has_outliers()) ++with_outliers;
  std::cout << with_outliers << "/" << reports.size() << " layers contain outlier channels\n";
  return 0;
}

struct ProfileArgs {
  std::string model, out, tsv;
  std::string scheme = "w8a8";
  size_t seeds = 16;
  uint64_t seed_base = 100;
};

int cmd_profile(const ProfileArgs& a) {
  const ToyModel model = ToyModel::load(a.model);
  const SensitivityProfile profile = profile_sensitivity(
      model, BitwidthScheme::parse(a.scheme), seed_range(a.seed_base, a.seeds));
  save_profile(a.out, profile);
  if (!a.tsv.empty()) write_text_file(a.tsv, profile_to_tsv(profile));
  std::cout << "alpha_normalized:";
  for (double v : profile.alpha_normalized) std::cout << " " << v;
  std::cout << "\n";
  return 0;
}

struct CalibrateArgs {
  std::string model, profile, out, log;
  std::string scheme = "w4a8";
  std::string weighting = "final_quality";
  int iters = 200;
  int batch = 4;
  double lr_round = 2e-3;
  double lr_scale = 4e-5;
  double reg_lambda = 1e-2;
  uint64_t seed = 0;
  size_t prompts = 2;
  uint64_t prompt_seed_base = 9001;
  double tau = kDefaultTau;
  double alpha_min = kDefaultAlphaMin;
  size_t align = kDefaultAlign;
  bool no_dual_scale = false;
  bool freeze_act_scale = false;
  std::string keep_list = "time_embed,head";
};

std::vector<double> resolve_weights(const std::string& weighting, const std::string& profile_path,
                                    size_t n_chunks) {
  const WeightingKind kind = parse_weighting(weighting);
  SensitivityProfile profile;
  if (!profile_path.empty()) {
    profile = load_profile(profile_path);
    if (profile.num_chunks() != n_chunks)
      throw std::invalid_argument("profile chunk count does not match the model");
  } else {
    if (kind == WeightingKind::final_quality || kind == WeightingKind::reverse)
      throw std::invalid_argument("--weighting " + weighting + " requires --profile");
    profile.alpha_raw.assign(n_chunks, 0.0);
    profile.alpha_normalized.assign(n_chunks, 1.0 / static_cast<double>(n_chunks));
  }
  return weighting_strategy(profile, kind);
}

int cmd_calibrate(const CalibrateArgs& a) {
  const ToyModel model = ToyModel::load(a.model);
  const std::vector<double> weights =
      resolve_weights(a.weighting, a.profile, model.config().chunks);

  ModelCalibOptions opts;
  opts.base.scheme = BitwidthScheme::parse(a.scheme);
  opts.base.iterations = a.iters;
  opts.base.batch_size = a.batch;
  opts.base.lr_round = a.lr_round;
  opts.base.lr_scale = a.lr_scale;
  opts.base.reg_lambda = a.reg_lambda;
  opts.base.seed = a.seed;
  opts.base.train_activation_scale = !a.freeze_act_scale;
  opts.dual_scale = !a.no_dual_scale;
  opts.tau = a.tau;
  opts.alpha_min = a.alpha_min;
  opts.align = a.align;
  opts.keep_list = parse_keep_list(a.keep_list);
  opts.prompt_seeds = seed_range(a.prompt_seed_base, a.prompts);

  const ModelCalibResult result = calibrate_model(model, weights, opts);
  save_quantized_model(a.out, result.qmodel);

  if (!a.log.empty()) {
    json j;
    j["scheme"] = a.scheme;
    j["weighting"] = a.weighting;
    j["iterations"] = a.iters;
    j["chunk_weights"] = weights;
    j["layers"] = json::array();
    for (const auto& lr : result.layer_results) {
      json lj;
      lj["layer"] = lr.layer;
      lj["initial_loss"] = lr.initial_loss;
      lj["final_loss"] = lr.final_loss;
      lj["dual_scale"] = lr.plan.enabled;
      // thin the running-min trace to every 10th point
      json trace = json::array();
      for (size_t i = 0; i < lr.trace.size(); i += 10) trace.push_back(lr.trace[i]);
      if (!lr.trace.empty()) trace.push_back(lr.trace.back());
      lj["trace"] = trace;
      j["layers"].push_back(lj);
    }
    write_text_file(a.log, j.dump(2) + "\n");
  }

  double init_total = 0, final_total = 0;
  for (const auto& lr : result.layer_results) {
    init_total += lr.initial_loss;
    final_total += lr.final_loss;
  }
  std::cout << "calibrated " << result.layer_results.size() << " layers, summed loss "
            << init_total << " -> " << final_total << "\n";
  return 0;
}

struct RunArgs {
  std::string qmodel, out;
  std::string engine = "int";
  uint64_t seed = 1;
};

int cmd_run(const RunArgs& a) {
  const QuantizedModel qm = load_quantized_model(a.qmodel);
  const Rollout r = run_quantized(qm, a.seed, parse_engine(a.engine));
  // stack the chunks into one [N x M x d] tensor
  const size_t n = r.chunks.size(), m = r.chunks[0].rows(), d = r.chunks[0].cols();
  Tensor stacked({n, m, d});
  for (size_t i = 0; i < n; ++i)
    std::copy(r.chunks[i].data(), r.chunks[i].data() + m * d, stacked.data() + i * m * d);
  save_tensor_file(a.out, stacked);
  std::cout << "rollout seed " << a.seed << " -> " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, qmodel, out;
  std::string engine = "fakequant";
  size_t seeds = 5;
  uint64_t seed_base = 5000;
};

json eval_to_json(const ToyModel& model, const QuantizedModel& qm, Engine engine,
                  const std::vector<uint64_t>& seeds) {
  json per_seed = json::array();
  double total = 0.0;
  for (uint64_t seed : seeds) {
    const Rollout ref = rollout(model, seed, QuantMode::full_precision());
    const Rollout q = run_quantized(qm, seed, engine);
    const double mse = latent_mse(ref, q);
    total += mse;
    per_seed.push_back({{"seed", seed}, {"mse", mse}, {"per_chunk", per_chunk_mse(ref, q)}});
  }
  json j;
  j["engine"] = engine == Engine::int_kernels ? "int" : "fakequant";
  j["scheme"] = qm.scheme.str();
  j["mse_mean"] = total / static_cast<double>(seeds.size());
  j["per_seed"] = per_seed;
  return j;
}

int cmd_eval(const EvalArgs& a) {
  const ToyModel model = ToyModel::load(a.model);
  const QuantizedModel qm = load_quantized_model(a.qmodel);
  const json j = eval_to_json(model, qm, parse_engine(a.engine), seed_range(a.seed_base, a.seeds));
  write_text_file(a.out, j.dump(2) + "\n");
  std::cout << "mean latent MSE: " << j["mse_mean"].dump() << "\n";
  return 0;
}

struct MetricsArgs {
  std::string table, directions, out, csv;
  std::string population = "pooled";
};

int cmd_metrics_ds(const MetricsArgs& a) {
  const ResultTable table = load_result_table(a.table, a.directions);
  const CvPopulation pop =
      a.population == "per_bitwidth" ? CvPopulation::per_bitwidth : CvPopulation::pooled;
  const DiscriminabilityReport rep = ds_report(table, pop);
  if (!a.out.empty()) write_text_file(a.out, report_to_json(rep));
  if (!a.csv.empty()) write_text_file(a.csv, report_to_csv(rep));
  for (const auto& s : rep.scores)
    std::cout << s.metric << "\tcv=" << s.cv << "\tboa=" << s.boa << "\tds=" << s.ds << "\n";
  return 0;
}

struct AblateArgs {
  std::string model, profile, out;
  std::string scheme = "w4a8";
  std::string toggles = "dual_scale,frame_weighting";
  std::string sweep;  // "", "tau", or "alpha_min"
  std::string values;
  int iters = 100;
  int batch = 4;
  uint64_t seed = 0;
  size_t prompts = 2;
  uint64_t prompt_seed_base = 9001;
  size_t eval_seeds = 5;
  uint64_t eval_seed_base = 5000;
};

int cmd_ablate(const AblateArgs& a) {
  const ToyModel model = ToyModel::load(a.model);
  const SensitivityProfile profile = load_profile(a.profile);
  if (profile.num_chunks() != model.config().chunks)
    throw std::invalid_argument("profile chunk count does not match the model");
  const std::vector<uint64_t> eval_seeds = seed_range(a.eval_seed_base, a.eval_seeds);

  auto base_opts = [&]() {
    ModelCalibOptions opts;
    opts.base.scheme = BitwidthScheme::parse(a.scheme);
    opts.base.iterations = a.iters;
    opts.base.batch_size = a.batch;
    opts.base.seed = a.seed;
    opts.prompt_seeds = seed_range(a.prompt_seed_base, a.prompts);
    return opts;
  };

  auto run_cell = [&](bool dual, WeightingKind kind) {
    ModelCalibOptions opts = base_opts();
    opts.dual_scale = dual;
    const std::vector<double> weights = weighting_strategy(profile, kind);
    const ModelCalibResult res = calibrate_model(model, weights, opts);
    double total = 0.0;
    for (uint64_t seed : eval_seeds) {
      const Rollout ref = rollout(model, seed, QuantMode::full_precision());
      const Rollout q = run_quantized(res.qmodel, seed, Engine::fakequant_sim);
      total += latent_mse(ref, q);
    }
    return total / static_cast<double>(eval_seeds.size());
  };

  json j;
  j["scheme"] = a.scheme;
  j["iterations"] = a.iters;
  j["eval_seeds"] = eval_seeds;

  if (a.sweep.empty()) {
    // 2x2 grid over the named toggles
    if (a.toggles != "dual_scale,frame_weighting" && a.toggles != "frame_weighting,dual_scale")
      throw std::invalid_argument("supported toggles: dual_scale,frame_weighting");
    j["cells"] = json::array();
    for (const bool dual : {false, true}) {
      for (const bool fw : {false, true}) {
        const double mse =
            run_cell(dual, fw ? WeightingKind::final_quality : WeightingKind::uniform);
        j["cells"].push_back(
            {{"dual_scale", dual}, {"frame_weighting", fw}, {"mse_mean", mse}});
        std::cout << "dual_scale=" << dual << " frame_weighting=" << fw << " mse=" << mse << "\n";
      }
    }
  } else {
    if (a.values.empty()) throw std::invalid_argument("--sweep requires --values");
    std::vector<double> vals;
    std::istringstream ss(a.values);
    std::string item;
    while (std::getline(ss, item, ',')) vals.push_back(std::stod(item));
    j["sweep"] = a.sweep;
    j["rows"] = json::array();
    for (double v : vals) {
      ModelCalibOptions opts = base_opts();
      if (a.sweep == "tau")
        opts.tau = v;
      else if (a.sweep == "alpha_min")
        opts.alpha_min = v;
      else
        throw std::invalid_argument("unknown sweep parameter: " + a.sweep);
      const std::vector<double> weights =
          weighting_strategy(profile, WeightingKind::final_quality);
      const ModelCalibResult res = calibrate_model(model, weights, opts);
      double total = 0.0;
      for (uint64_t seed : eval_seeds) {
        const Rollout ref = rollout(model, seed, QuantMode::full_precision());
        const Rollout q = run_quantized(res.qmodel, seed, Engine::fakequant_sim);
        total += latent_mse(ref, q);
      }
      const double mse = total / static_cast<double>(eval_seeds.size());
      j["rows"].push_back({{"value", v}, {"mse_mean", mse}});
      std::cout << a.sweep << "=" << v << " mse=" << mse << "\n";
    }
  }
  write_text_file(a.out, j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"post-training quantization pipeline for chunk-wise autoregressive denoisers"};
  app.require_subcommand(1);

  unsigned threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware concurrency)");

  GenModelArgs gen;
  auto* c_gen = app.add_subcommand("gen-model", "generate a seeded toy model file");
  c_gen->add_option("--out", gen.out)->required();
  c_gen->add_option("--blocks", gen.cfg.blocks);
  c_gen->add_option("--hidden", gen.cfg.hidden);
  c_gen->add_option("--tokens", gen.cfg.tokens_per_chunk);
  c_gen->add_option("--chunks", gen.cfg.chunks);
  c_gen->add_option("--steps", gen.cfg.steps);
  c_gen->add_option("--context-window", gen.cfg.context_window);
  c_gen->add_option("--prompt-tokens", gen.cfg.prompt_tokens);
  c_gen->add_option("--time-basis", gen.cfg.time_basis);
  c_gen->add_option("--seed", gen.cfg.seed);
  c_gen->add_option("--inject", gen.inject_specs, "pattern:fraction:gamma (repeatable)");

  DetectArgs det;
  auto* c_det = app.add_subcommand("detect-outliers", "per-layer outlier channel report");
  c_det->add_option("--model", det.model)->required();
  c_det->add_option("--out", det.out)->required();
  c_det->add_option("--norms-tsv", det.norms_tsv);
  c_det->add_option("--tau", det.tau);
  c_det->add_option("--alpha-min", det.alpha_min);
  c_det->add_option("--align", det.align);
  c_det->add_option("--keep-list", det.keep_list);

  ProfileArgs prof;
  auto* c_prof = app.add_subcommand("profile-sensitivity", "chunk-wise sensitivity profile");
  c_prof->add_option("--model", prof.model)->required();
  c_prof->add_option("--out", prof.out)->required();
  c_prof->add_option("--tsv", prof.tsv);
  c_prof->add_option("--scheme", prof.scheme);
  c_prof->add_option("--seeds", prof.seeds);
  c_prof->add_option("--seed-base", prof.seed_base);

  CalibrateArgs cal;
  auto* c_cal = app.add_subcommand("calibrate", "frame-weighted reconstruction calibration");
  c_cal->add_option("--model", cal.model)->required();
  c_cal->add_option("--out", cal.out)->required();
  c_cal->add_option("--profile", cal.profile);
  c_cal->add_option("--log", cal.log);
  c_cal->add_option("--scheme", cal.scheme);
  c_cal->add_option("--weighting", cal.weighting)
      ->check(CLI::IsMember({"uniform", "heuristic_exp", "reverse", "final_quality"}));
  c_cal->add_option("--iters", cal.iters);
  c_cal->add_option("--batch", cal.batch);
  c_cal->add_option("--lr-round", cal.lr_round);
  c_cal->add_option("--lr-scale", cal.lr_scale);
  c_cal->add_option("--reg-lambda", cal.reg_lambda);
  c_cal->add_option("--seed", cal.seed);
  c_cal->add_option("--prompts", cal.prompts);
  c_cal->add_option("--prompt-seed-base", cal.prompt_seed_base);
  c_cal->add_option("--tau", cal.tau);
  c_cal->add_option("--alpha-min", cal.alpha_min);
  c_cal->add_option("--align", cal.align);
  c_cal->add_flag("--no-dual-scale", cal.no_dual_scale);
  c_cal->add_flag("--freeze-act-scale", cal.freeze_act_scale);
  c_cal->add_option("--keep-list", cal.keep_list);

  RunArgs run;
  auto* c_run = app.add_subcommand("run", "rollout a quantized model");
  c_run->add_option("--qmodel", run.qmodel)->required();
  c_run->add_option("--out", run.out)->required();
  c_run->add_option("--engine", run.engine)->check(CLI::IsMember({"int", "fakequant"}));
  c_run->add_option("--seed", run.seed);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "latent MSE of a quantized model vs full precision");
  c_ev->add_option("--model", ev.model)->required();
  c_ev->add_option("--qmodel", ev.qmodel)->required();
  c_ev->add_option("--out", ev.out)->required();
  c_ev->add_option("--engine", ev.engine)->check(CLI::IsMember({"int", "fakequant"}));
  c_ev->add_option("--seeds", ev.seeds);
  c_ev->add_option("--seed-base", ev.seed_base);

  MetricsArgs met;
  auto* c_met = app.add_subcommand("metrics-ds", "discriminability analysis of a result table");
  c_met->add_option("--table", met.table)->required();
  c_met->add_option("--directions", met.directions)->required();
  c_met->add_option("--out", met.out);
  c_met->add_option("--csv", met.csv);
  c_met->add_option("--population", met.population)
      ->check(CLI::IsMember({"pooled", "per_bitwidth"}));

  AblateArgs abl;
  auto* c_abl = app.add_subcommand("ablate", "toggle grid or parameter sweep with end-to-end MSE");
  c_abl->add_option("--model", abl.model)->required();
  c_abl->add_option("--profile", abl.profile)->required();
  c_abl->add_option("--out", abl.out)->required();
  c_abl->add_option("--scheme", abl.scheme);
  c_abl->add_option("--toggles", abl.toggles);
  c_abl->add_option("--sweep", abl.sweep);
  c_abl->add_option("--values", abl.values);
  c_abl->add_option("--iters", abl.iters);
  c_abl->add_option("--batch", abl.batch);
  c_abl->add_option("--seed", abl.seed);
  c_abl->add_option("--prompts", abl.prompts);
  c_abl->add_option("--prompt-seed-base", abl.prompt_seed_base);
  c_abl->add_option("--eval-seeds", abl.eval_seeds);
  c_abl->add_option("--eval-seed-base", abl.eval_seed_base);

  CLI11_PARSE(app, argc, argv);

  if (threads > 0) set_num_threads(threads);

  try {
    if (c_gen->parsed()) return cmd_gen_model(gen);
    if (c_det->parsed()) return cmd_detect(det);
    if (c_prof->parsed()) return cmd_profile(prof);
    if (c_cal->parsed()) return cmd_calibrate(cal);
    if (c_run->parsed()) return cmd_run(run);
    if (c_ev->parsed()) return cmd_eval(ev);
    if (c_met->parsed()) return cmd_metrics_ds(met);
    if (c_abl->parsed()) return cmd_ablate(abl);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}

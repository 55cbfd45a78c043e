#include "qarvd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace qarvd {

using nlohmann::json;

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    // trim surrounding whitespace
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double population_cv(const std::vector<double>& cells) {
  double mean = 0.0, abs_mean = 0.0;
  for (double v : cells) {
    mean += v;
    abs_mean += std::fabs(v);
  }
  mean /= static_cast<double>(cells.size());
  abs_mean /= static_cast<double>(cells.size());
  if (abs_mean == 0.0)
    throw std::domain_error("cv undefined: metric mean is zero");
  double var = 0.0;
  for (double v : cells) var += (v - mean) * (v - mean);
  var /= static_cast<double>(cells.size());
  return std::sqrt(var) / abs_mean;
}

}  // namespace

double ResultTable::cell(const std::string& method, const std::string& bitwidth,
                         const std::string& metric) const {
  auto mi = values.find(method);
  if (mi == values.end()) throw std::out_of_range("result table: unknown method " + method);
  auto bi = mi->second.find(bitwidth);
  if (bi == mi->second.end())
    throw std::out_of_range("result table: missing cell " + method + "/" + bitwidth);
  return bi->second.at(metric_index(metric));
}

double ResultTable::reference(const std::string& metric) const {
  return cell(reference_method, reference_bitwidth(), metric);
}

size_t ResultTable::metric_index(const std::string& metric) const {
  for (size_t i = 0; i < metrics.size(); ++i)
    if (metrics[i] == metric) return i;
  throw std::out_of_range("result table: unknown metric " + metric);
}

ResultTable parse_result_table(const std::string& csv_text, const std::string& directions_text) {
  ResultTable t;
  const json dirs = json::parse(directions_text);
  t.bitwidths = dirs.at("bitwidths").get<std::vector<std::string>>();
  t.reference_method = dirs.at("reference_method").get<std::string>();
  for (const auto& [metric, dir] : dirs.at("directions").items()) {
    const std::string d = dir.get<std::string>();
    if (d == "higher_better")
      t.direction[metric] = Direction::higher_better;
    else if (d == "lower_better")
      t.direction[metric] = Direction::lower_better;
    else
      throw std::runtime_error("directions file: bad direction for " + metric + ": " + d);
  }

  std::istringstream ss(csv_text);
  std::string line;
  if (!std::getline(ss, line)) throw std::runtime_error("result table: empty CSV");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "method" || header[1] != "bitwidth")
    throw std::runtime_error("result table: header must start with method,bitwidth");
  t.metrics.assign(header.begin() + 2, header.end());
  for (const auto& m : t.metrics)
    if (t.direction.count(m) == 0)
      throw std::runtime_error("result table: no declared direction for metric " + m);

  while (std::getline(ss, line)) {
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw std::runtime_error("result table: row width mismatch: " + line);
    const std::string& method = fields[0];
    const std::string& bitwidth = fields[1];
    if (std::find(t.bitwidths.begin(), t.bitwidths.end(), bitwidth) == t.bitwidths.end())
      throw std::runtime_error("result table: undeclared bitwidth " + bitwidth);
    std::vector<double> cells(t.metrics.size());
    for (size_t i = 0; i < cells.size(); ++i) cells[i] = std::stod(fields[i + 2]);
    t.values[method][bitwidth] = std::move(cells);
    if (method != t.reference_method &&
        std::find(t.methods.begin(), t.methods.end(), method) == t.methods.end())
      t.methods.push_back(method);
  }

  // every quantized method must have every non-reference bitwidth
  for (const auto& m : t.methods)
    for (size_t b = 1; b < t.bitwidths.size(); ++b)
      if (t.values.at(m).count(t.bitwidths[b]) == 0)
        throw std::runtime_error("result table: missing cell " + m + "/" + t.bitwidths[b]);
  if (t.values.count(t.reference_method) == 0 ||
      t.values.at(t.reference_method).count(t.reference_bitwidth()) == 0)
    throw std::runtime_error("result table: missing reference row");
  return t;
}

ResultTable load_result_table(const std::string& csv_path, const std::string& directions_path) {
  return parse_result_table(read_file(csv_path), read_file(directions_path));
}

double cv(const ResultTable& table, const std::string& metric, CvPopulation population) {
  const size_t mi = table.metric_index(metric);
  if (population == CvPopulation::pooled) {
    std::vector<double> cells;
    for (const auto& method : table.methods)
      for (size_t b = 1; b < table.bitwidths.size(); ++b)
        cells.push_back(table.values.at(method).at(table.bitwidths[b])[mi]);
    return population_cv(cells);
  }
  // per-bitwidth pooling: mean of the within-bitwidth CVs
  double acc = 0.0;
  size_t n = 0;
  for (size_t b = 1; b < table.bitwidths.size(); ++b) {
    std::vector<double> cells;
    for (const auto& method : table.methods)
      cells.push_back(table.values.at(method).at(table.bitwidths[b])[mi]);
    acc += population_cv(cells);
    ++n;
  }
  return acc / static_cast<double>(n);
}

double boa(const ResultTable& table, const std::string& metric) {
  const size_t mi = table.metric_index(metric);
  const bool higher = table.direction.at(metric) == Direction::higher_better;
  size_t holds = 0;
  for (const auto& method : table.methods) {
    std::vector<double> chain;
    chain.push_back(table.reference(metric));
    for (size_t b = 1; b < table.bitwidths.size(); ++b)
      chain.push_back(table.values.at(method).at(table.bitwidths[b])[mi]);
    bool ok = true;
    for (size_t i = 0; i + 1 < chain.size(); ++i) {
      const bool strict = higher ? chain[i] > chain[i + 1] : chain[i] < chain[i + 1];
      if (!strict) {  // ties violate the strict ordering
        ok = false;
        break;
      }
    }
    if (ok) ++holds;
  }
  return static_cast<double>(holds) / static_cast<double>(table.methods.size());
}

DiscriminabilityReport ds_report(const ResultTable& table, CvPopulation population) {
  DiscriminabilityReport rep;
  rep.population = population == CvPopulation::pooled ? "pooled" : "per_bitwidth";
  for (const auto& metric : table.metrics) {
    MetricScore s;
    s.metric = metric;
    s.cv = cv(table, metric, population);
    s.boa = boa(table, metric);
    s.ds = s.cv * s.boa;
    rep.scores.push_back(s);
  }
  std::stable_sort(rep.scores.begin(), rep.scores.end(),
                   [](const MetricScore& a, const MetricScore& b) { return a.ds > b.ds; });
  return rep;
}

std::string report_to_json(const DiscriminabilityReport& report) {
  json j;
  j["population"] = report.population;
  j["note"] = "cv population excludes the full-precision reference row";
  j["scores"] = json::array();
  for (const auto& s : report.scores)
    j["scores"].push_back({{"metric", s.metric}, {"cv", s.cv}, {"boa", s.boa}, {"ds", s.ds}});
  return j.dump(2) + "\n";
}

std::string report_to_csv(const DiscriminabilityReport& report) {
  std::ostringstream ss;
  ss << "metric,cv,boa,ds\n";
  ss.precision(12);
  for (const auto& s : report.scores)
    ss << s.metric << "," << s.cv << "," << s.boa << "," << s.ds << "\n";
  return ss.str();
}

}  // namespace qarvd

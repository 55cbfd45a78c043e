#ifndef QARVD_METRICS_HPP
#define QARVD_METRICS_HPP

#include <map>
#include <string>
#include <vector>

namespace qarvd {

enum class Direction { higher_better, lower_better };

// Quantization result grid: one shared full-precision reference row plus one
// row per (method, bitwidth). Bitwidths are ordered from the reference down
// through increasingly aggressive schemes.
struct ResultTable {
  std::vector<std::string> methods;    // quantized methods, table order
  std::vector<std::string> bitwidths;  // e.g. [BF16, W8A8, W4A8, W4A6]; first is the reference
  std::vector<std::string> metrics;    // column order
  std::map<std::string, Direction> direction;

  // values[method][bitwidth][metric index]; the reference row is stored
  // under the reference method name at bitwidths[0]
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  std::string reference_method;

  const std::string& reference_bitwidth() const { return bitwidths.front(); }
  double cell(const std::string& method, const std::string& bitwidth,
              const std::string& metric) const;
  double reference(const std::string& metric) const;
  size_t metric_index(const std::string& metric) const;
};

// CSV with header "method,bitwidth,<metric>..." plus a JSON sidecar listing
// per-metric directions, the bitwidth order and the reference row's method.
ResultTable load_result_table(const std::string& csv_path, const std::string& directions_path);
ResultTable parse_result_table(const std::string& csv_text, const std::string& directions_text);

enum class CvPopulation { pooled, per_bitwidth };

// Coefficient of variation over the quantized cells of a metric (reference
// row excluded): population standard deviation over the mean of absolute
// values. per_bitwidth averages the CV computed within each bitwidth.
double cv(const ResultTable& table, const std::string& metric,
          CvPopulation population = CvPopulation::pooled);

// Fraction of methods whose full bitwidth chain holds strictly in the
// metric's preferred direction; ties count as violations.
double boa(const ResultTable& table, const std::string& metric);

struct MetricScore {
  std::string metric;
  double cv = 0.0;
  double boa = 0.0;
  double ds = 0.0;
};

struct DiscriminabilityReport {
  std::vector<MetricScore> scores;  // sorted by ds descending
  std::string population;          // which CV population was used
};

DiscriminabilityReport ds_report(const ResultTable& table,
                                 CvPopulation population = CvPopulation::pooled);

std::string report_to_json(const DiscriminabilityReport& report);
std::string report_to_csv(const DiscriminabilityReport& report);

}  // namespace qarvd

#endif  // QARVD_METRICS_HPP

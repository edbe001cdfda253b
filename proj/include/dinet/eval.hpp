#pragma once

// Evaluation: predictions, confusion matrices, metrics reports and the
// files written for them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dinet/data.hpp"
#include "dinet/model.hpp"
#include "dinet/train.hpp"

namespace dinet {

// Eval-mode argmax of the action logits per clip (ties go to the lowest
// class). The domain head is not used.
std::vector<int> predict(DiNetModel<float>& model, const std::vector<Clip>& clips, std::size_t chunk = 16);

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k, std::vector<std::string> names = {});

  std::size_t classes() const { return k_; }
  const std::vector<std::string>& class_names() const { return names_; }
  // rows = true class, columns = predicted class
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  void add(std::size_t truth, std::size_t pred);

  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t truth) const;
  // trace / total; 0 for an empty matrix.
  double accuracy() const;
  // counts[k][k] / row_sum(k); absent for rows without samples.
  std::vector<std::optional<double>> per_class_accuracy() const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_ = 0;
  std::vector<std::size_t> counts_;
  std::vector<std::string> names_;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t k,
                                 std::vector<std::string> names = {});

struct DomainMetrics {
  double top1_accuracy = 0.0;
  std::vector<std::optional<double>> per_class_accuracy;
  ConfusionMatrix confusion;
};

struct MetricsReport {
  DomainMetrics source;
  DomainMetrics target;
  std::optional<double> domain_probe_accuracy;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string mode;
};

struct EvalOptions {
  bool run_probe = true;
  ProbeConfig probe;
};

DomainMetrics domain_metrics(DiNetModel<float>& model, const std::vector<Clip>& clips,
                             const std::vector<std::string>& class_names);

// Source-test and target-test metrics plus the post-hoc domain probe.
MetricsReport evaluate(DiNetModel<float>& model, const DatasetSplit& split, const EvalOptions& options = {});

// Writes metrics.json, confusion.csv and confusion_pct.csv (target test
// set), confusion_source.csv and, when a history is given, history.csv.
void write_report(const MetricsReport& report, const std::filesystem::path& dir,
                  const std::vector<LossRecord>* history = nullptr);
MetricsReport read_report(const std::filesystem::path& dir);

void write_history_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);
std::vector<LossRecord> read_history_csv(const std::filesystem::path& path);

void write_confusion_csv(const ConfusionMatrix& cm, const std::filesystem::path& path, bool percent = false);
ConfusionMatrix read_confusion_csv(const std::filesystem::path& path);

}  // namespace dinet

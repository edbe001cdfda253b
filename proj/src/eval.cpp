#include "dinet/eval.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace dinet {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> predict(DiNetModel<float>& model, const std::vector<Clip>& clips, std::size_t chunk) {
  const auto features = extract_features(model, clips, chunk);
  std::vector<int> out;
  out.reserve(features.size());
  for (const auto& f : features) {
    const auto logits = model.forward_action(Tensor<float>({1, f.size()}, f));
    out.push_back(argmax_rows(logits).front());
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(std::size_t k, std::vector<std::string> names)
    : k_(k), counts_(k * k, 0), names_(std::move(names)) {
  if (k == 0) fail(ErrorCode::invalid_argument, "confusion matrix needs at least one class");
  if (!names_.empty() && names_.size() != k) {
    fail(ErrorCode::invalid_argument, "got " + std::to_string(names_.size()) + " class names for " +
                                          std::to_string(k) + " classes");
  }
}

void ConfusionMatrix::add(std::size_t truth, std::size_t pred) {
  if (truth >= k_ || pred >= k_) {
    fail(ErrorCode::invalid_argument, "class index out of range [0," + std::to_string(k_) + ")");
  }
  ++counts_[truth * k_ + pred];
}

std::size_t ConfusionMatrix::total() const {
  std::size_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t s = 0;
  for (std::size_t i = 0; i < k_; ++i) s += at(i, i);
  return s;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) s += at(truth, j);
  return s;
}

double ConfusionMatrix::accuracy() const {
  const auto n = total();
  return n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_accuracy() const {
  std::vector<std::optional<double>> out(k_);
  for (std::size_t i = 0; i < k_; ++i) {
    const auto n = row_sum(i);
    if (n > 0) out[i] = static_cast<double>(at(i, i)) / static_cast<double>(n);
  }
  return out;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t k,
                                 std::vector<std::string> names) {
  if (preds.size() != labels.size()) {
    fail(ErrorCode::shape_mismatch, std::to_string(preds.size()) + " predictions for " +
                                        std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(k, std::move(names));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0) fail(ErrorCode::invalid_argument, "negative class index");
    cm.add(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return cm;
}

DomainMetrics domain_metrics(DiNetModel<float>& model, const std::vector<Clip>& clips,
                             const std::vector<std::string>& class_names) {
  if (clips.empty()) fail(ErrorCode::invalid_argument, "cannot evaluate an empty clip list");
  std::vector<int> labels;
  for (const auto& c : clips) {
    if (!c.action) fail(ErrorCode::invalid_argument, "evaluation clip " + c.id + " has no action label");
    labels.push_back(*c.action);
  }
  const std::size_t k = model.config().num_actions;
  auto names = class_names.size() == k ? class_names : std::vector<std::string>{};
  DomainMetrics m;
  m.confusion = confusion_matrix(predict(model, clips), labels, k, std::move(names));
  m.top1_accuracy = m.confusion.accuracy();
  m.per_class_accuracy = m.confusion.per_class_accuracy();
  return m;
}

MetricsReport evaluate(DiNetModel<float>& model, const DatasetSplit& split, const EvalOptions& options) {
  if (split.test_source.empty() || split.test_target.empty()) {
    fail(ErrorCode::invalid_argument, "evaluation needs source and target test clips");
  }
  MetricsReport r;
  r.source = domain_metrics(model, split.test_source, split.class_names);
  r.target = domain_metrics(model, split.test_target, split.class_names);
  if (options.run_probe) r.domain_probe_accuracy = model_domain_probe(model, split, options.probe);
  return r;
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::io, "cannot write " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::io, "cannot read " + path.string());
  return is;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string class_label(const ConfusionMatrix& cm, std::size_t i) {
  return cm.class_names().empty() ? "class" + std::to_string(i) : cm.class_names()[i];
}

json metrics_json(const DomainMetrics& m) {
  json per = json::array();
  for (const auto& a : m.per_class_accuracy) per.push_back(a ? json(*a) : json(nullptr));
  json rows = json::array();
  for (std::size_t i = 0; i < m.confusion.classes(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < m.confusion.classes(); ++j) row.push_back(m.confusion.at(i, j));
    rows.push_back(row);
  }
  return {{"top1_accuracy", m.top1_accuracy},
          {"per_class_accuracy", per},
          {"confusion", rows},
          {"class_names", m.confusion.class_names()},
          {"count", m.confusion.total()}};
}

DomainMetrics metrics_from(const json& j) {
  DomainMetrics m;
  const auto& rows = j.at("confusion");
  m.confusion = ConfusionMatrix(rows.size(), j.at("class_names").get<std::vector<std::string>>());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (std::size_t c = rows[i].at(k).get<std::size_t>(); c > 0; --c) m.confusion.add(i, k);
    }
  }
  m.top1_accuracy = j.at("top1_accuracy").get<double>();
  for (const auto& a : j.at("per_class_accuracy")) {
    m.per_class_accuracy.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
  }
  return m;
}

}  // namespace

void write_confusion_csv(const ConfusionMatrix& cm, const fs::path& path, bool percent) {
  auto os = open_out(path);
  os << "true\\pred";
  for (std::size_t j = 0; j < cm.classes(); ++j) os << ',' << class_label(cm, j);
  os << '\n';
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    os << class_label(cm, i);
    const auto n = cm.row_sum(i);
    for (std::size_t j = 0; j < cm.classes(); ++j) {
      os << ',';
      if (!percent) {
        os << cm.at(i, j);
      } else if (n > 0) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * static_cast<double>(cm.at(i, j)) / static_cast<double>(n));
        os << buf;
      }
    }
    os << '\n';
  }
}

ConfusionMatrix read_confusion_csv(const fs::path& path) {
  auto is = open_in(path);
  std::string line;
  std::getline(is, line);
  auto header = split_csv(line);
  if (header.size() < 2) fail(ErrorCode::corrupt_file, "bad confusion header in " + path.string());
  std::vector<std::string> names(header.begin() + 1, header.end());
  ConfusionMatrix cm(names.size(), names);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!std::getline(is, line)) fail(ErrorCode::corrupt_file, "missing confusion rows in " + path.string());
    const auto cells = split_csv(line);
    if (cells.size() != names.size() + 1) fail(ErrorCode::corrupt_file, "bad confusion row in " + path.string());
    for (std::size_t j = 0; j < names.size(); ++j) {
      for (auto c = std::stoull(cells[j + 1]); c > 0; --c) cm.add(i, j);
    }
  }
  return cm;
}

void write_history_csv(const std::vector<LossRecord>& history, const fs::path& path) {
  auto os = open_out(path);
  os << "step,epoch,p,lambda,lr,loss_action,loss_domain,objective_F\n";
  char buf[512];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.epoch, r.p, r.lambda,
                  r.lr, r.loss_action, r.loss_domain, r.objective);
    os << buf;
  }
}

std::vector<LossRecord> read_history_csv(const fs::path& path) {
  auto is = open_in(path);
  std::string line;
  std::getline(is, line);
  if (line != "step,epoch,p,lambda,lr,loss_action,loss_domain,objective_F") {
    fail(ErrorCode::corrupt_file, "unexpected history header in " + path.string());
  }
  std::vector<LossRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 8) fail(ErrorCode::corrupt_file, "bad history row: " + line);
    LossRecord r;
    r.step = std::stoull(c[0]);
    r.epoch = std::stoull(c[1]);
    r.p = std::stod(c[2]);
    r.lambda = std::stod(c[3]);
    r.lr = std::stod(c[4]);
    r.loss_action = std::stod(c[5]);
    r.loss_domain = std::stod(c[6]);
    r.objective = std::stod(c[7]);
    out.push_back(r);
  }
  return out;
}

void write_report(const MetricsReport& report, const fs::path& dir, const std::vector<LossRecord>* history) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorCode::io, "cannot create report directory " + dir.string());
  json j = {{"seed", report.seed},
            {"config_hash", report.config_hash},
            {"mode", report.mode},
            {"source", metrics_json(report.source)},
            {"target", metrics_json(report.target)},
            {"domain_probe_accuracy",
             report.domain_probe_accuracy ? json(*report.domain_probe_accuracy) : json(nullptr)}};
  open_out(dir / "metrics.json") << j.dump(2) << '\n';
  write_confusion_csv(report.target.confusion, dir / "confusion.csv");
  write_confusion_csv(report.target.confusion, dir / "confusion_pct.csv", true);
  write_confusion_csv(report.source.confusion, dir / "confusion_source.csv");
  if (history) write_history_csv(*history, dir / "history.csv");
}

MetricsReport read_report(const fs::path& dir) {
  auto is = open_in(dir / "metrics.json");
  try {
    const auto j = json::parse(is);
    MetricsReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.mode = j.at("mode").get<std::string>();
    r.source = metrics_from(j.at("source"));
    r.target = metrics_from(j.at("target"));
    if (!j.at("domain_probe_accuracy").is_null()) r.domain_probe_accuracy = j.at("domain_probe_accuracy").get<double>();
    return r;
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt_file, "malformed metrics.json in " + dir.string() + ": " + e.what());
  }
}

}  // namespace dinet

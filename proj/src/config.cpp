#include "dinet/config.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

namespace dinet {

using nlohmann::json;

namespace {

json blocks_json(const std::vector<BlockSpec>& blocks) {
  json out = json::array();
  for (const auto& b : blocks) {
    out.push_back({{"kind", block_kind_name(b.kind)},
                   {"out_channels", b.out_channels},
                   {"repeats", b.repeats},
                   {"downsample", b.downsample},
                   {"cardinality", b.cardinality}});
  }
  return out;
}

std::vector<BlockSpec> blocks_from(const json& j) {
  if (!j.is_array()) fail(ErrorCode::invalid_argument, "model.blocks must be an array");
  std::vector<BlockSpec> out;
  for (const auto& b : j) {
    BlockSpec s;
    s.kind = parse_block_kind(b.value("kind", std::string(block_kind_name(s.kind))));
    s.out_channels = b.value("out_channels", s.out_channels);
    s.repeats = b.value("repeats", s.repeats);
    s.downsample = b.value("downsample", s.downsample);
    s.cardinality = b.value("cardinality", s.cardinality);
    for (const auto& [key, _] : b.items()) {
      if (key != "kind" && key != "out_channels" && key != "repeats" && key != "downsample" && key != "cardinality") {
        fail(ErrorCode::invalid_argument, "unknown block key '" + key + "'");
      }
    }
    out.push_back(s);
  }
  return out;
}

json model_json(const ModelConfig& m, bool with_derived) {
  json j = {{"blocks", blocks_json(m.blocks)},
            {"feature_dim", m.feature_dim},
            {"domain_hidden", m.domain_hidden},
            {"input_norm", input_norm_name(m.input_norm)}};
  if (with_derived) {
    j["input_shape"] = m.input_shape;
    j["num_actions"] = m.num_actions;
  }
  return j;
}

void read_model(const json& j, ModelConfig& m) {
  m.blocks = blocks_from(j.at("blocks"));
  m.feature_dim = j.at("feature_dim").get<std::size_t>();
  m.domain_hidden = j.at("domain_hidden").get<std::array<std::size_t, 2>>();
  m.input_norm = parse_input_norm(j.at("input_norm").get<std::string>());
  if (j.contains("input_shape")) m.input_shape = j.at("input_shape").get<std::array<std::size_t, 4>>();
  if (j.contains("num_actions")) m.num_actions = j.at("num_actions").get<std::size_t>();
}

json run_json(const RunConfig& c) {
  const auto& d = c.data;
  const auto& t = c.train;
  return {
      {"seed", c.seed},
      {"data",
       {{"num_classes", d.num_classes},
        {"clips_per_class_per_domain", d.clips_per_class_per_domain},
        {"clip_shape", d.clip_shape},
        {"night", {{"gain", d.night.gain}, {"noise_sigma", d.night.noise_sigma}, {"gamma_curve", d.night.gamma_curve}}},
        {"motion_amplitude", d.motion_amplitude}}},
      {"model", model_json(c.model, false)},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"base_lr", t.base_lr},
        {"momentum", t.momentum},
        {"anneal_a", t.anneal_a},
        {"anneal_b", t.anneal_b},
        {"lambda_gain", t.lambda_gain},
        {"lambda_fixed", t.lambda_fixed ? json(*t.lambda_fixed) : json(nullptr)},
        {"mode", train_mode_name(t.mode)}}},
  };
}

// Recursively overlays `patch` onto `base`, rejecting keys absent from base.
// Arrays and nulls are replaced wholesale.
void overlay(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) fail(ErrorCode::invalid_argument, "config section '" + path + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) fail(ErrorCode::invalid_argument, "unknown config key '" + here + "'");
    if (base[key].is_object()) {
      overlay(base[key], value, here);
    } else {
      base[key] = value;
    }
  }
}

RunConfig parse_run(const json& j) {
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& d = j.at("data");
    c.data.num_classes = d.at("num_classes").get<std::size_t>();
    c.data.clips_per_class_per_domain = d.at("clips_per_class_per_domain").get<std::size_t>();
    c.data.clip_shape = d.at("clip_shape").get<std::array<std::size_t, 4>>();
    c.data.night.gain = d.at("night").at("gain").get<double>();
    c.data.night.noise_sigma = d.at("night").at("noise_sigma").get<double>();
    c.data.night.gamma_curve = d.at("night").at("gamma_curve").get<double>();
    c.data.motion_amplitude = d.at("motion_amplitude").get<double>();
    read_model(j.at("model"), c.model);
    const auto& t = j.at("train");
    c.train.epochs = t.at("epochs").get<std::size_t>();
    c.train.batch_size = t.at("batch_size").get<std::size_t>();
    c.train.base_lr = t.at("base_lr").get<double>();
    c.train.momentum = t.at("momentum").get<double>();
    c.train.anneal_a = t.at("anneal_a").get<double>();
    c.train.anneal_b = t.at("anneal_b").get<double>();
    c.train.lambda_gain = t.at("lambda_gain").get<double>();
    if (!t.at("lambda_fixed").is_null()) c.train.lambda_fixed = t.at("lambda_fixed").get<double>();
    c.train.mode = parse_train_mode(t.at("mode").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad config value: ") + e.what());
  }
  c.finalize();
  return c;
}

}  // namespace

void RunConfig::finalize() {
  data.seed = seed;
  train.seed = seed;
  model.input_shape = data.clip_shape;
  model.num_actions = data.num_classes;
  data.validate();
  model.validate();
  train.validate();
}

std::string RunConfig::to_json(int indent) const { return run_json(*this).dump(indent); }

RunConfig RunConfig::from_json(const std::string& text) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::invalid_argument, std::string("config is not valid JSON: ") + e.what());
  }
  json base = run_json(RunConfig{});
  overlay(base, patch, "");
  return parse_run(base);
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    fail(ErrorCode::invalid_argument, "override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json patch = value;
  std::stringstream parts(key);
  std::vector<std::string> path;
  for (std::string part; std::getline(parts, part, '.');) path.push_back(part);
  for (auto it = path.rbegin(); it != path.rend(); ++it) patch = json{{*it, patch}};
  json base = run_json(*this);
  overlay(base, patch, "");
  *this = parse_run(base);
}

std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : run_json(*this).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

DiNetModel<float> build_model(const RunConfig& config) { return DiNetModel<float>::build(config.model, config.seed); }

std::string model_config_to_json(const ModelConfig& config) { return model_json(config, true).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig m;
  try {
    read_model(json::parse(text), m);
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt_file, std::string("bad model config record: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace dinet

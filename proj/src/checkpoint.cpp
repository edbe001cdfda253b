#include "dinet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>

#include "dinet/config.hpp"

namespace dinet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'I', 'N', 'E', 'T', 'C', 'K', 'P'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t end, const fs::path& path) : buf_(buf), end_(end), path_(path) {}
  template <typename V>
  V get() {
    V v{};
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const char* take(std::size_t n) {
    if (n > end_ - pos_) fail(ErrorCode::corrupt_file, "truncated checkpoint " + path_.string());
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string str() {
    const auto n = get<std::uint64_t>();
    const char* p = take(n);
    return {p, n};
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const fs::path& path_;
};

enum class EntryKind : std::uint8_t { parameter = 0, buffer = 1, velocity = 2 };

void put_entry(Writer& w, const std::string& name, EntryKind kind, const Shape& shape, std::span<const float> data) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.put<std::uint64_t>(d);
  w.bytes(data.data(), data.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const fs::path& path, const DiNetModel<float>& model, const TrainProgress& progress,
                     std::size_t total_steps, const std::string& run_config_json) {
  const auto& params = model.parameters();
  if (!progress.optimizer.velocity.empty() && progress.optimizer.velocity.size() != params.size()) {
    fail(ErrorCode::shape_mismatch, "optimizer state does not match the model parameters");
  }
  json header = {{"model", json::parse(model_config_to_json(model.config()))},
                 {"run", run_config_json},
                 {"step", progress.step},
                 {"total_steps", total_steps},
                 {"progress", total_steps ? static_cast<double>(progress.step) / static_cast<double>(total_steps) : 0.0},
                 {"epoch_batch_hashes", progress.epoch_batch_hashes}};
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.str(header.dump());
  const std::size_t entries = params.size() + model.buffers().size() + progress.optimizer.velocity.size();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries));
  for (const auto& p : params) put_entry(w, p.name, EntryKind::parameter, p.tensor.shape(), p.tensor.data());
  for (const auto& b : model.buffers()) put_entry(w, b.name, EntryKind::buffer, b.tensor.shape(), b.tensor.data());
  for (std::size_t i = 0; i < progress.optimizer.velocity.size(); ++i) {
    put_entry(w, params[i].name, EntryKind::velocity, params[i].tensor.shape(), progress.optimizer.velocity[i]);
  }
  w.put<std::uint64_t>(progress.history.size());
  for (const auto& r : progress.history) {
    w.put<std::uint64_t>(r.step);
    w.put<std::uint64_t>(r.epoch);
    for (double v : {r.p, r.lambda, r.lr, r.loss_action, r.loss_domain, r.objective}) w.put<double>(v);
  }
  auto& buf = w.buffer();
  const auto hash = fnv1a(buf.data(), buf.size());
  w.put<std::uint64_t>(hash);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorCode::io, "cannot write checkpoint " + tmp.string());
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) fail(ErrorCode::io, "failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

Checkpoint load_impl(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::io, "cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + 4 + 8 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorCode::corrupt_file, path.string() + " is not a checkpoint (bad magic or too short)");
  }
  std::uint32_t version;
  std::memcpy(&version, buf.data() + sizeof(kMagic), 4);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  }
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (fnv1a(buf.data(), buf.size() - 8) != stored) {
    fail(ErrorCode::corrupt_file, "checkpoint " + path.string() + " is truncated or damaged (checksum mismatch)");
  }

  Reader r(buf, buf.size() - 8, path);
  r.take(sizeof(kMagic) + 4);
  json header;
  try {
    header = json::parse(r.str());
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt_file, std::string("bad checkpoint header: ") + e.what());
  }
  const auto config = model_config_from_json(header.at("model").dump());
  auto model = DiNetModel<float>::build(config, 0);

  std::map<std::string, Tensor<float>> params, buffers;
  for (const auto& p : model.parameters()) params.emplace(p.name, p.tensor);
  for (const auto& b : model.buffers()) buffers.emplace(b.name, b.tensor);
  std::map<std::string, std::vector<float>> velocities;

  const auto entries = r.get<std::uint32_t>();
  std::size_t n_params = 0, n_buffers = 0;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name(r.take(name_len), name_len);
    const auto kind = static_cast<EntryKind>(r.get<std::uint8_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::corrupt_file, "implausible rank for entry " + name);
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    const std::size_t count = numel(shape);
    const char* raw = r.take(count * sizeof(float));
    std::vector<float> payload(count);
    std::memcpy(payload.data(), raw, count * sizeof(float));

    auto& table = kind == EntryKind::buffer ? buffers : params;
    auto it = table.find(name);
    if (it == table.end()) fail(ErrorCode::shape_mismatch, "checkpoint entry " + name + " is not part of the model");
    if (it->second.shape() != shape) {
      fail(ErrorCode::shape_mismatch, "checkpoint entry " + name + " has shape " + shape_str(shape) + ", model expects " +
                                          shape_str(it->second.shape()));
    }
    switch (kind) {
      case EntryKind::parameter:
        std::ranges::copy(payload, it->second.mutable_data().begin());
        ++n_params;
        break;
      case EntryKind::buffer:
        std::ranges::copy(payload, it->second.mutable_data().begin());
        ++n_buffers;
        break;
      case EntryKind::velocity:
        velocities[name] = std::move(payload);
        break;
      default:
        fail(ErrorCode::corrupt_file, "unknown entry kind for " + name);
    }
  }
  if (n_params != params.size() || n_buffers != buffers.size()) {
    fail(ErrorCode::shape_mismatch, "checkpoint is missing model entries");
  }

  TrainProgress progress;
  progress.step = header.at("step").get<std::size_t>();
  progress.epoch_batch_hashes = header.at("epoch_batch_hashes").get<std::vector<std::uint64_t>>();
  if (!velocities.empty()) {
    if (velocities.size() != params.size()) fail(ErrorCode::shape_mismatch, "checkpoint optimizer state is partial");
    for (const auto& p : model.parameters()) progress.optimizer.velocity.push_back(std::move(velocities.at(p.name)));
  }
  const auto history = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < history; ++i) {
    LossRecord rec;
    rec.step = r.get<std::uint64_t>();
    rec.epoch = r.get<std::uint64_t>();
    for (double* v : {&rec.p, &rec.lambda, &rec.lr, &rec.loss_action, &rec.loss_domain, &rec.objective}) {
      *v = r.get<double>();
    }
    progress.history.push_back(rec);
  }
  if (!r.done()) fail(ErrorCode::corrupt_file, "trailing bytes in checkpoint " + path.string());
  return Checkpoint{std::move(model), std::move(progress), header.at("total_steps").get<std::size_t>(),
                    header.at("run").get<std::string>()};
}

}  // namespace

Checkpoint load_checkpoint(const fs::path& path) {
  try {
    return load_impl(path);
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt_file, "malformed checkpoint header in " + path.string() + ": " + e.what());
  }
}

}  // namespace dinet

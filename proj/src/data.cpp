#include "dinet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <random>
#include <sstream>

#include "dinet/errors.hpp"

namespace dinet {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

namespace fs = std::filesystem;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const std::vector<std::string>& motion_names() {
  static const std::vector<std::string> names{
      "translate_right", "translate_up",   "diagonal",           "oscillate",
      "grow",            "shrink",         "translate_left",     "translate_down",
      "anti_diagonal",   "oscillate_vertical", "circle",         "blink",
  };
  return names;
}

void SyntheticConfig::validate() const {
  if (num_classes < 2 || num_classes > motion_names().size()) {
    fail(ErrorCode::invalid_argument,
         "num_classes must be in [2," + std::to_string(motion_names().size()) + "], got " + std::to_string(num_classes));
  }
  if (clips_per_class_per_domain < 2) fail(ErrorCode::invalid_argument, "need at least 2 clips per class and domain");
  for (auto e : clip_shape) {
    if (e == 0) fail(ErrorCode::invalid_argument, "clip shape extents must be positive");
  }
  if (clip_shape[1] < 2 || clip_shape[2] < 8 || clip_shape[3] < 8) {
    fail(ErrorCode::invalid_argument, "clips need T >= 2 and H, W >= 8");
  }
  if (!(night.gain > 0.0 && night.gain <= 1.0)) fail(ErrorCode::invalid_argument, "night gain must be in (0,1]");
  if (!(night.noise_sigma >= 0.0)) fail(ErrorCode::invalid_argument, "night noise sigma must be >= 0");
  if (!(night.gamma_curve >= 1.0)) fail(ErrorCode::invalid_argument, "night gamma curve must be >= 1");
  if (!(motion_amplitude > 0.0)) fail(ErrorCode::invalid_argument, "motion amplitude must be positive");
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct Pose {
  double x, y, radius, intensity;
};

}  // namespace

Clip generate_clip(std::size_t action, int domain, const SyntheticConfig& cfg, std::uint64_t instance_seed) {
  if (action >= cfg.num_classes) {
    fail(ErrorCode::invalid_argument, "action " + std::to_string(action) + " outside [0," +
                                          std::to_string(cfg.num_classes) + ")");
  }
  if (domain != kSourceDomain && domain != kTargetDomain) fail(ErrorCode::invalid_argument, "domain must be 0 or 1");
  const auto [channels, frames, height, width] = cfg.clip_shape;
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  const double scale = std::min(H, W) / 32.0;

  std::mt19937_64 rng(derive_seed(cfg.seed, instance_seed, 1));
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  // Static textured background.
  const double base = uni(0.25, 0.35);
  struct Grating {
    double amp, fx, fy, phase;
  };
  std::array<Grating, 3> gratings;
  for (auto& g : gratings) g = {uni(0.03, 0.07), uni(-2.5, 2.5), uni(-2.5, 2.5), uni(0.0, 2.0 * std::numbers::pi)};
  std::vector<double> background(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double v = base + uni(-0.03, 0.03);
      for (const auto& g : gratings) v += g.amp * std::sin(2.0 * std::numbers::pi * (g.fx * x / W + g.fy * y / H) + g.phase);
      background[y * width + x] = v;
    }
  }

  // Object and motion program.
  const bool square = uni(0.0, 1.0) < 0.5;
  const double r0 = uni(3.0, 4.5) * scale;
  const double intensity = uni(0.85, 1.0);
  const double speed = uni(0.8, 1.2);
  const double travel = std::min(cfg.motion_amplitude * 12.0 * speed * scale, std::min(H, W) - 2.0 * r0 - 4.0);
  const double phase = uni(0.0, 2.0 * std::numbers::pi);
  const double margin = r0 + 1.0;
  auto place = [&](double lo_extra, double hi_extra, double extent) {
    const double lo = margin + lo_extra, hi = extent - margin - hi_extra;
    return lo < hi ? uni(lo, hi) : 0.5 * extent;
  };

  const std::string& program = motion_names()[action];
  Pose start{};
  double diag = travel / std::numbers::sqrt2;
  if (program == "translate_right" || program == "translate_left") {
    start = {place(0, travel, W), place(0, 0, H), r0, intensity};
  } else if (program == "translate_up" || program == "translate_down") {
    start = {place(0, 0, W), place(0, travel, H), r0, intensity};
  } else if (program == "diagonal" || program == "anti_diagonal") {
    start = {place(0, diag, W), place(0, diag, H), r0, intensity};
  } else if (program == "oscillate") {
    start = {place(travel / 2, travel / 2, W), place(0, 0, H), r0, intensity};
  } else if (program == "oscillate_vertical") {
    start = {place(0, 0, W), place(travel / 2, travel / 2, H), r0, intensity};
  } else if (program == "grow" || program == "shrink") {
    start = {place(r0, r0, W), place(r0, r0, H), r0, intensity};
  } else if (program == "circle") {
    start = {place(travel / 3, travel / 3, W), place(travel / 3, travel / 3, H), r0, intensity};
  } else {
    start = {place(0, 0, W), place(0, 0, H), r0, intensity};
  }

  auto pose_at = [&](double u) {
    Pose p = start;
    if (program == "translate_right") {
      p.x += travel * u;
    } else if (program == "translate_left") {
      p.x += travel * (1.0 - u);
    } else if (program == "translate_up") {
      p.y += travel * (1.0 - u);
    } else if (program == "translate_down") {
      p.y += travel * u;
    } else if (program == "diagonal") {
      p.x += diag * u;
      p.y += diag * u;
    } else if (program == "anti_diagonal") {
      p.x += diag * u;
      p.y += diag * (1.0 - u);
    } else if (program == "oscillate") {
      p.x += 0.5 * travel * std::sin(2.0 * std::numbers::pi * 1.5 * u + phase);
    } else if (program == "oscillate_vertical") {
      p.y += 0.5 * travel * std::sin(2.0 * std::numbers::pi * 1.5 * u + phase);
    } else if (program == "grow") {
      p.radius = r0 * (1.0 + u);
    } else if (program == "shrink") {
      p.radius = r0 * (2.0 - u);
    } else if (program == "circle") {
      p.x += travel / 3 * std::cos(2.0 * std::numbers::pi * u + phase);
      p.y += travel / 3 * std::sin(2.0 * std::numbers::pi * u + phase);
    } else if (program == "blink") {
      p.intensity = 0.35 + (intensity - 0.35) * std::abs(std::cos(2.0 * std::numbers::pi * 1.5 * u + phase));
    }
    return p;
  };

  Clip clip;
  clip.shape = cfg.clip_shape;
  clip.action = static_cast<int>(action);
  clip.domain = kSourceDomain;
  clip.video.resize(channels * frames * height * width);
  const std::size_t plane = height * width;
  for (std::size_t t = 0; t < frames; ++t) {
    const Pose p = pose_at(static_cast<double>(t) / static_cast<double>(frames - 1));
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
        const double dist = square ? std::max(std::abs(dx), std::abs(dy)) : std::hypot(dx, dy);
        const double cover = std::clamp(p.radius + 0.5 - dist, 0.0, 1.0);
        const double v = std::clamp(background[y * width + x] * (1.0 - cover) + p.intensity * cover, 0.0, 1.0);
        for (std::size_t c = 0; c < channels; ++c) clip.video[(c * frames + t) * plane + y * width + x] = static_cast<float>(v);
      }
    }
  }
  if (domain == kTargetDomain) clip = night_transform(std::move(clip), cfg.night, derive_seed(cfg.seed, instance_seed, 2));
  return clip;
}

Clip night_transform(Clip clip, const NightParams& params, std::uint64_t noise_seed) {
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, params.noise_sigma > 0.0 ? params.noise_sigma : 1.0);
  for (auto& v : clip.video) {
    double out = std::pow(params.gain * static_cast<double>(v), params.gamma_curve);
    if (params.noise_sigma > 0.0) out += noise(rng);
    v = static_cast<float>(std::clamp(out, 0.0, 1.0));
  }
  clip.domain = kTargetDomain;
  return clip;
}

DatasetSplit generate_dataset(const SyntheticConfig& cfg) {
  cfg.validate();
  DatasetSplit split;
  split.class_names.assign(motion_names().begin(), motion_names().begin() + static_cast<long>(cfg.num_classes));
  const std::size_t per = cfg.clips_per_class_per_domain;
  const std::size_t train_per = (per * 4) / 5;
  for (int domain : {kSourceDomain, kTargetDomain}) {
    for (std::size_t k = 0; k < cfg.num_classes; ++k) {
      for (std::size_t i = 0; i < per; ++i) {
        const std::uint64_t instance = (static_cast<std::uint64_t>(domain) * cfg.num_classes + k) * per + i;
        Clip clip = generate_clip(k, domain, cfg, instance);
        clip.id = std::string(domain == kSourceDomain ? "s" : "t") + "_c" + std::to_string(k) + "_i" + std::to_string(i);
        const bool train = i < train_per;
        auto& bucket = domain == kSourceDomain ? (train ? split.train_source : split.test_source)
                                               : (train ? split.train_target : split.test_target);
        bucket.push_back(std::move(clip));
      }
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Dataset files

namespace {

constexpr char kClipMagic[4] = {'D', 'N', 'C', 'L'};
constexpr std::uint32_t kClipVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const fs::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    fail(ErrorCode::corrupt_file, "truncated clip file " + path.string());
  }
  return v;
}

}  // namespace

void write_clip_file(const Clip& clip, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::io, "cannot write " + path.string());
  os.write(kClipMagic, 4);
  put<std::uint32_t>(os, kClipVersion);
  for (auto e : clip.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  put<std::int32_t>(os, clip.action.value_or(-1));
  put<std::int32_t>(os, clip.domain);
  os.write(reinterpret_cast<const char*>(clip.video.data()), static_cast<std::streamsize>(clip.video.size() * sizeof(float)));
  if (!os) fail(ErrorCode::io, "failed writing " + path.string());
}

Clip read_clip_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::io, "cannot open clip file " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kClipMagic, 4) != 0) {
    fail(ErrorCode::corrupt_file, "bad clip header in " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kClipVersion) {
    fail(ErrorCode::version_mismatch, "clip file version " + std::to_string(version) + " in " + path.string());
  }
  Clip clip;
  for (auto& e : clip.shape) e = get<std::uint32_t>(is, path);
  const auto action = get<std::int32_t>(is, path);
  if (action >= 0) clip.action = action;
  clip.domain = get<std::int32_t>(is, path);
  clip.video.resize(clip.shape[0] * clip.shape[1] * clip.shape[2] * clip.shape[3]);
  if (!is.read(reinterpret_cast<char*>(clip.video.data()), static_cast<std::streamsize>(clip.video.size() * sizeof(float)))) {
    fail(ErrorCode::corrupt_file, "truncated clip payload in " + path.string());
  }
  return clip;
}

void save_dataset(const DatasetSplit& split, const fs::path& dir) {
  fs::create_directories(dir / "clips");
  std::ofstream index(dir / "index.csv");
  if (!index) fail(ErrorCode::io, "cannot write " + (dir / "index.csv").string());
  index << "id,action,domain,split\n";
  auto emit = [&](const std::vector<Clip>& clips, const char* name) {
    for (const auto& c : clips) {
      index << c.id << ',' << c.action.value_or(-1) << ',' << c.domain << ',' << name << '\n';
      write_clip_file(c, dir / "clips" / (c.id + ".bin"));
    }
  };
  emit(split.train_source, "train");
  emit(split.train_target, "train");
  emit(split.test_source, "test");
  emit(split.test_target, "test");
  std::ofstream classes(dir / "classes.txt");
  for (const auto& name : split.class_names) classes << name << '\n';
}

DatasetSplit load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::io, "dataset directory " + dir.string() + " does not exist");
  std::ifstream index(dir / "index.csv");
  if (!index) fail(ErrorCode::io, "missing " + (dir / "index.csv").string());
  DatasetSplit split;
  std::string line;
  std::getline(index, line);
  if (line != "id,action,domain,split") fail(ErrorCode::corrupt_file, "unexpected index header: " + line);
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, action, domain, which;
    if (!std::getline(ss, id, ',') || !std::getline(ss, action, ',') || !std::getline(ss, domain, ',') ||
        !std::getline(ss, which)) {
      fail(ErrorCode::corrupt_file, "malformed index row: " + line);
    }
    Clip clip = read_clip_file(dir / "clips" / (id + ".bin"));
    clip.id = id;
    const bool train = which == "train";
    if (!train && which != "test") fail(ErrorCode::corrupt_file, "unknown split '" + which + "'");
    auto& bucket = clip.domain == kSourceDomain ? (train ? split.train_source : split.test_source)
                                                : (train ? split.train_target : split.test_target);
    bucket.push_back(std::move(clip));
  }
  std::ifstream classes(dir / "classes.txt");
  while (std::getline(classes, line)) {
    if (!line.empty()) split.class_names.push_back(line);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Frame directories

std::vector<std::size_t> temporal_subsample(std::size_t frame_count, std::size_t target_frames) {
  if (frame_count == 0 || target_frames == 0) fail(ErrorCode::invalid_argument, "empty frame sequence");
  std::vector<std::size_t> idx(target_frames);
  if (target_frames == 1) return idx;
  for (std::size_t i = 0; i < target_frames; ++i) {
    idx[i] = static_cast<std::size_t>(
        std::lround(static_cast<double>(i) * static_cast<double>(frame_count - 1) / static_cast<double>(target_frames - 1)));
  }
  return idx;
}

std::vector<Clip> load_frame_directory(const fs::path& root, const ClipShape& target_shape, int domain_label,
                                       std::vector<std::string>* class_names) {
  if (!fs::is_directory(root)) fail(ErrorCode::io, "frame directory " + root.string() + " does not exist");
  const auto [channels, frames, height, width] = target_shape;
  if (channels != 1 && channels != 3) fail(ErrorCode::invalid_argument, "frame loader supports 1 or 3 channels");
  auto sorted_entries = [](const fs::path& dir, bool dirs) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (dirs ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  std::vector<Clip> clips;
  const auto classes = sorted_entries(root, true);
  if (class_names) class_names->clear();
  for (std::size_t label = 0; label < classes.size(); ++label) {
    if (class_names) class_names->push_back(classes[label].filename().string());
    const auto clip_dirs = sorted_entries(classes[label], true);
    if (clip_dirs.empty()) fail(ErrorCode::io, "class directory " + classes[label].string() + " holds no clips");
    for (const auto& clip_dir : clip_dirs) {
      std::vector<fs::path> frame_files;
      for (const auto& f : sorted_entries(clip_dir, false)) {
        auto ext = f.extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") frame_files.push_back(f);
      }
      if (frame_files.empty()) fail(ErrorCode::io, "clip directory " + clip_dir.string() + " holds no frames");
      Clip clip;
      clip.id = classes[label].filename().string() + "/" + clip_dir.filename().string();
      clip.shape = target_shape;
      clip.action = static_cast<int>(label);
      clip.domain = domain_label;
      clip.video.resize(channels * frames * height * width);
      const auto picks = temporal_subsample(frame_files.size(), frames);
      for (std::size_t t = 0; t < frames; ++t) {
        const auto& file = frame_files[picks[t]];
        cv::Mat img = cv::imread(file.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
        if (img.empty()) fail(ErrorCode::io, "cannot decode frame " + file.string());
        if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
        cv::Mat resized;
        cv::resize(img, resized, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_AREA);
        cv::Mat scaled;
        resized.convertTo(scaled, channels == 1 ? CV_32FC1 : CV_32FC3, 1.0 / 255.0);
        for (std::size_t y = 0; y < height; ++y) {
          const float* row = scaled.ptr<float>(static_cast<int>(y));
          for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
              clip.video[((c * frames + t) * height + y) * width + x] = std::clamp(row[x * channels + c], 0.0f, 1.0f);
            }
          }
        }
      }
      clips.push_back(std::move(clip));
    }
  }
  if (classes.empty()) fail(ErrorCode::io, "frame directory " + root.string() + " holds no class directories");
  return clips;
}

// ---------------------------------------------------------------------------
// Batching

TrainingPools training_pools(const DatasetSplit& split) {
  TrainingPools pools;
  if (split.train_source.empty() || split.train_target.empty()) {
    fail(ErrorCode::invalid_argument, "training needs non-empty source and target pools");
  }
  pools.shape = split.train_source.front().shape;
  for (const auto& c : split.train_source) {
    if (!c.action) fail(ErrorCode::invalid_argument, "source clip " + c.id + " has no action label");
    if (c.shape != pools.shape) fail(ErrorCode::shape_mismatch, "clip " + c.id + " has a different shape");
    pools.source.push_back({&c.video, *c.action, c.id});
  }
  for (const auto& c : split.train_target) {
    if (c.shape != pools.shape) fail(ErrorCode::shape_mismatch, "clip " + c.id + " has a different shape");
    pools.target.push_back({&c.video, c.id});
  }
  return pools;
}

std::vector<Batch> make_batches(std::size_t source_count, std::size_t target_count, std::size_t batch_size,
                                std::uint64_t epoch_seed) {
  if (batch_size == 0 || batch_size % 2 != 0) {
    fail(ErrorCode::invalid_argument, "batch size must be even and positive, got " + std::to_string(batch_size));
  }
  if (source_count == 0 || target_count == 0) fail(ErrorCode::invalid_argument, "both pools must be non-empty");
  const std::size_t half = batch_size / 2;
  std::vector<std::size_t> src(source_count), tgt(target_count);
  for (std::size_t i = 0; i < source_count; ++i) src[i] = i;
  for (std::size_t i = 0; i < target_count; ++i) tgt[i] = i;
  std::mt19937_64 rs(derive_seed(epoch_seed, 11)), rt(derive_seed(epoch_seed, 12));
  std::shuffle(src.begin(), src.end(), rs);
  std::shuffle(tgt.begin(), tgt.end(), rt);
  const std::size_t count = std::min(source_count, target_count) / half;
  std::vector<Batch> batches(count);
  for (std::size_t b = 0; b < count; ++b) {
    batches[b].source.assign(src.begin() + static_cast<long>(b * half), src.begin() + static_cast<long>((b + 1) * half));
    batches[b].target.assign(tgt.begin() + static_cast<long>(b * half), tgt.begin() + static_cast<long>((b + 1) * half));
  }
  return batches;
}

std::uint64_t batch_stream_hash(const std::vector<Batch>& batches, const TrainingPools& pools) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  };
  for (const auto& b : batches) {
    for (auto i : b.source) mix(pools.source.at(i).id);
    for (auto i : b.target) mix(pools.target.at(i).id);
  }
  return h;
}

}  // namespace dinet

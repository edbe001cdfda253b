#pragma once

// Synthetic day/night action clips, on-disk dataset format, frame-directory
// loading, and half-source/half-target batch composition.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dinet {

using ClipShape = std::array<std::size_t, 4>;  // C, T, H, W

inline constexpr int kSourceDomain = 0;
inline constexpr int kTargetDomain = 1;

struct Clip {
  std::string id;
  ClipShape shape{};
  std::vector<float> video;  // row-major [C,T,H,W], values in [0,1]
  std::optional<int> action;
  int domain = kSourceDomain;
};

struct NightParams {
  double gain = 0.15;        // multiplicative darkening, in (0,1]
  double noise_sigma = 0.03;  // additive sensor noise std
  double gamma_curve = 1.5;   // exponent >= 1 applied after the gain
};

struct SyntheticConfig {
  std::size_t num_classes = 6;
  std::size_t clips_per_class_per_domain = 50;
  ClipShape clip_shape{1, 16, 32, 32};
  NightParams night;
  double motion_amplitude = 1.0;  // scales travel distance of every motion program
  std::uint64_t seed = 1;

  void validate() const;
};

// Motion program names, indexed by action class. The first six are the
// default vocabulary.
const std::vector<std::string>& motion_names();

Clip generate_clip(std::size_t action, int domain, const SyntheticConfig& cfg, std::uint64_t instance_seed);

// v' = clamp((gain*v)^gamma_curve + noise, 0, 1); marks the clip as target.
Clip night_transform(Clip clip, const NightParams& params, std::uint64_t noise_seed);

struct DatasetSplit {
  std::vector<Clip> train_source;
  std::vector<Clip> train_target;
  std::vector<Clip> test_source;
  std::vector<Clip> test_target;
  std::vector<std::string> class_names;

  std::size_t total() const {
    return train_source.size() + train_target.size() + test_source.size() + test_target.size();
  }
};

// Balanced classes per domain; the first 80% of instances of every
// (class, domain) pair train, the rest test.
DatasetSplit generate_dataset(const SyntheticConfig& cfg);

// On-disk layout: <dir>/index.csv (id,action,domain,split) and
// <dir>/clips/<id>.bin. See README for the clip header.
void save_dataset(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit load_dataset(const std::filesystem::path& dir);
void write_clip_file(const Clip& clip, const std::filesystem::path& path);
Clip read_clip_file(const std::filesystem::path& path);

// root/<class_name>/<clip_id>/<frames>.png|.jpg. Classes are labeled in
// sorted name order; frames are sorted by file name and subsampled to T
// frames at indices round(i*(n-1)/(T-1)).
std::vector<Clip> load_frame_directory(const std::filesystem::path& root, const ClipShape& target_shape,
                                       int domain_label, std::vector<std::string>* class_names = nullptr);

std::vector<std::size_t> temporal_subsample(std::size_t frame_count, std::size_t target_frames);

// Training view: target clips carry no action labels.
struct LabeledClip {
  const std::vector<float>* video;
  int action;
  std::string id;
};
struct UnlabeledClip {
  const std::vector<float>* video;
  std::string id;
};
struct TrainingPools {
  ClipShape shape{};
  std::vector<LabeledClip> source;
  std::vector<UnlabeledClip> target;
};

// Borrows video buffers from `split`, which must outlive the pools.
TrainingPools training_pools(const DatasetSplit& split);

struct Batch {
  std::vector<std::size_t> source;  // indices into TrainingPools::source
  std::vector<std::size_t> target;  // indices into TrainingPools::target
};

// floor(min(|source|,|target|) / (batch_size/2)) batches, each with exactly
// batch_size/2 clips per domain; pools are shuffled independently.
std::vector<Batch> make_batches(std::size_t source_count, std::size_t target_count, std::size_t batch_size,
                                std::uint64_t epoch_seed);

std::uint64_t batch_stream_hash(const std::vector<Batch>& batches, const TrainingPools& pools);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace dinet

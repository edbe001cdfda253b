#pragma once

// Checkpoint files: model parameters and running statistics, optimizer
// velocities, training progress and loss history.
//
// Layout (all integers little-endian):
//   "DINETCKP"                 8-byte magic
//   u32 version                currently 1
//   u64 length, bytes          JSON header: model config, run config, step,
//                              total_steps, progress, epoch batch hashes
//   u32 entry count, then per entry:
//     u32 name length, name bytes, u8 kind (0 parameter, 1 buffer, 2 velocity),
//     u32 rank, u64 dims[rank], float32 payload
//   u64 history length, then per record: u64 step, u64 epoch, f64 p, lambda,
//     lr, loss_action, loss_domain, objective
//   u64 FNV-1a hash of every preceding byte

#include <filesystem>
#include <string>

#include "dinet/model.hpp"
#include "dinet/train.hpp"

namespace dinet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DiNetModel<float> model;
  TrainProgress progress;
  std::size_t total_steps = 0;
  std::string run_config_json;  // effective run configuration, may be empty

  double progress_fraction() const {
    return total_steps == 0 ? 0.0 : static_cast<double>(progress.step) / static_cast<double>(total_steps);
  }
};

void save_checkpoint(const std::filesystem::path& path, const DiNetModel<float>& model, const TrainProgress& progress,
                     std::size_t total_steps, const std::string& run_config_json = {});

// Errors: io (unreadable), corrupt_file (bad magic, truncation, checksum),
// version_mismatch, shape_mismatch (entries disagree with the stored config).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dinet

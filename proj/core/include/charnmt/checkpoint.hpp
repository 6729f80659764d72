#pragma once

#include <string>

#include "charnmt/trainer.hpp"

namespace charnmt::inline CHARNMT_ABI {

// Text embedded in a checkpoint next to the tensors.
struct CheckpointData {
  std::string config;  // serialised run configuration
  std::string vocab;   // serialised vocabulary
  std::string merges;  // serialised BPE merges, empty for characters
  TrainerState trainer;
};

// Container layout: a UTF-8 manifest (one record per line: counters,
// scheduler state, length-prefixed text blobs, and one line per tensor with
// name, shape, byte offset and count), the line "end <payload bytes>", then
// the raw little-endian 32-bit float payload. Writes atomically via rename.
void save_checkpoint(const std::string& path, const ParameterStore& params,
                     const CheckpointData& data);

// Fills `params` (when given) by name; names and shapes must match exactly.
// Optimizer moments are restored only when the checkpoint carries them.
CheckpointData load_checkpoint(const std::string& path, ParameterStore* params);

}  // namespace charnmt

#pragma once

// Binary checkpointing for model parameters, vocabulary, and optimizer state.
//
// Layout (all integers little-endian, fixed width):
//   magic "STFCKPT1", u32 version
//   model config fields in declaration order (each i64)
//   vocabulary: u64 word count, then per word u32 length + bytes
//     (includes the reserved control words, so index -> word is exact)
//   u64 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, i64 dims, f64 values
//   u8 optimizer flag; when set: u64 step, then m and v vectors as
//     u64 length + f64 data, laid out in parameter traversal order
//
// Saving walks parameters in their canonical traversal order; loading matches
// sections by name against a freshly shaped parameter set, so a checkpoint
// written by any build loads identically: round-trips are bit-exact.

#include <optional>
#include <string>

#include "stfusion/model.hpp"
#include "stfusion/objective.hpp"

namespace stf {

struct Checkpoint {
  ModelParams params;
  Vocab vocab;
  std::optional<AdamState> opt;
  uint64_t step = 0;  // training steps completed when saved
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const Vocab& vocab, const AdamState* opt = nullptr,
                     uint64_t step = 0);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace stf

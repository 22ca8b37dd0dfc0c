// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoints of named float64 parameters.
//
//   "CMKT" | version u32 | count u32 | entries...
//   entry: name_len u16 | name bytes | rank u8 | dims u32 x rank | f64 x numel
//
// All integers and floats are little-endian regardless of host order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "comodal/layers.hpp"
#include "comodal/model.hpp"

namespace comodal {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

using Checkpoint = std::vector<CheckpointEntry>;

Checkpoint to_checkpoint(const ParamList& params);
Checkpoint to_checkpoint(const CoTrainModel& model);
Checkpoint to_checkpoint(const UnimodalModel& model);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError on bad magic, unknown version, truncation (with the
/// byte offset) or trailing bytes.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values into parameters of the same name. Every parameter must be
/// present with the same shape (LookupError / ShapeError), and every entry
/// must name a parameter (LookupError).
void apply_checkpoint(const Checkpoint& checkpoint, ParamList& params);
void apply_checkpoint(const Checkpoint& checkpoint, const CoTrainModel& model);
void apply_checkpoint(const Checkpoint& checkpoint, const UnimodalModel& model);

/// Entries of one modality's stem, tail and head, in checkpoint order.
/// Throws LookupError when the checkpoint holds no such branch.
Checkpoint extract_unimodal_checkpoint(const Checkpoint& checkpoint, const std::string& modality);

/// Modality of a unimodal checkpoint; throws FormatError when entries name
/// several modalities or a multimodal component.
std::string unimodal_checkpoint_modality(const Checkpoint& checkpoint);

/// True when any entry belongs to the multimodal branch ("mm." prefix).
bool has_multimodal_entries(const Checkpoint& checkpoint);

}  // namespace comodal

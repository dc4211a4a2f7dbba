// Copyright 2026 The advmlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ==============================================================================

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advmlm/training.hpp"

namespace advmlm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'M', 'L', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// The whole training state as bytes. Identical states give identical bytes.
std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state);

/// Rebuilds a state. The trailing SHA-256 is checked before anything is
/// parsed, so truncated or altered files are rejected with no partial state.
/// When `expected_fingerprint` is given the embedded config must match it.
TrainState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                  const std::optional<std::string>& expected_fingerprint = std::nullopt);

/// Writes through a temporary file and renames it into place.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_fingerprint = std::nullopt);

/// "ckpt-00000040.bin" for the state after step 40.
std::string checkpoint_name(std::int64_t completed_step);

/// The checkpoint with the highest step in `dir`, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);

}  // namespace advmlm

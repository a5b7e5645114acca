#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvrnet/model.hpp"
#include "cvrnet/optim.hpp"

namespace cvrnet {

/// Checkpoint file layout (all integers little-endian):
///   magic "CVRN" | u32 version | u32 config length | config UTF-8 text |
///   repeated records: u32 name length | name | u32 rank | rank×u32 extents |
///   float32 payload.
/// Optimizer state rides along as reserved "opt.adam.*" records; the RNG
/// seed lives in the config text. Writes are atomic (temp file + rename).
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const CvrNet& model, const std::string& path,
                     const AdamState* opt_state = nullptr, std::uint64_t seed = 0);

/// Rebuilds the model from the embedded config and restores every parameter
/// bit-exactly. Optionally restores optimizer state when present.
CvrNet load_checkpoint(const std::string& path, AdamState* opt_state = nullptr,
                       std::uint64_t* seed = nullptr);

/// Strict restore into an existing model: the embedded config must equal the
/// model's (the error names the first mismatching key), and every model
/// parameter must be present with its exact shape. No state is mutated on
/// failure.
void load_checkpoint_into(CvrNet& model, const std::string& path);

/// Imports only name-matching, shape-matching entries (the transfer-learning
/// hook); everything else is reported, not fatal.
struct PartialLoadReport {
  std::vector<std::string> imported;
  std::vector<std::string> rejected_shape;    // name matched, shape did not
  std::vector<std::string> missing_in_file;   // model entries with no record
  std::vector<std::string> unmatched_in_file; // records with no model entry
};

PartialLoadReport load_checkpoint_partial(CvrNet& model, const std::string& path);

std::string model_config_text(const ModelConfig& config, std::uint64_t seed);
ModelConfig model_config_from_text(const std::string& text, std::uint64_t* seed = nullptr);

}  // namespace cvrnet

#pragma once

// Single-file checkpoint archive:
//
//   PERSA-CKPT 1\n
//   <header byte length>\n
//   <JSON header: config, meta, tensor index with name/section/shape/offset>
//   <payload: float64 little-endian values, concatenated in index order>
//   \nsha256 <hex of header + payload>\n
//
// Sections keep base weights, adapters and auxiliary heads apart so that
// "base + adapter" composition stays explicit on disk.

#include <string>
#include <vector>

#include "json.hpp"
#include "persa/model.hpp"
#include "persa/tensor.hpp"

namespace persa {

struct CheckpointEntry {
  std::string name;
  std::string section;  // "base", "adapter" or "head"
  ad::Tensor tensor;
  bool trainable = false;
};

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  void add(std::string name, std::string section, const ad::Tensor& tensor);
  const CheckpointEntry* find(const std::string& name) const;
  const ad::Tensor& get(const std::string& name) const;

  void save(const std::string& path) const;
  // Throws std::runtime_error on a malformed file or checksum mismatch.
  static Checkpoint load(const std::string& path);
};

Checkpoint to_checkpoint(const PolicyModel& model);
// Restores weights, adapters and requires_grad flags.
PolicyModel policy_from_checkpoint(const Checkpoint& ckpt);

}  // namespace persa

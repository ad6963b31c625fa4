#pragma once

// Checkpoint = <stem>.manifest (text) + <stem>.bin (little-endian float32).
//
//   gasr-checkpoint 1
//   meta <key> <value>                          (insertion order)
//   tensor <name> <byte offset> <count> <shape>  (shape as AxBxC, concatenated in order)
//
// Keys, values and names must not contain whitespace.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gasr/model.hpp"

namespace gasr {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const CheckpointTensor&) const = default;
};

class Checkpoint {
 public:
  static constexpr int kFormatVersion = 1;

  void set_meta(const std::string& key, const std::string& value);
  std::optional<std::string> meta(const std::string& key) const;
  std::string require_meta(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& metadata() const { return metadata_; }

  void add_tensor(CheckpointTensor tensor);
  const CheckpointTensor* find(const std::string& name) const;
  const CheckpointTensor& tensor(const std::string& name) const;
  const std::vector<CheckpointTensor>& tensors() const { return tensors_; }

  bool operator==(const Checkpoint&) const = default;

 private:
  std::vector<std::pair<std::string, std::string>> metadata_;
  std::vector<CheckpointTensor> tensors_;
};

std::string manifest_path(const std::string& stem);
std::string blob_path(const std::string& stem);
bool checkpoint_exists(const std::string& stem);

void save_checkpoint(const std::string& stem, const Checkpoint& checkpoint);
// Throws ParseError (with the path) on malformed or inconsistent files.
Checkpoint load_checkpoint(const std::string& stem);

void store_model_config(Checkpoint& checkpoint, const ModelConfig& config);
ModelConfig load_model_config(const Checkpoint& checkpoint);

// Parameters are stored under `prefix + name`.
template <typename Scalar>
void store_parameters(Checkpoint& checkpoint, const PolicyModel<Scalar>& model, const std::string& prefix = "");
// Throws ContractError on missing names or shape mismatches.
template <typename Scalar>
void load_parameters(PolicyModel<Scalar>& model, const Checkpoint& checkpoint, const std::string& prefix = "");

// Builds a model from a checkpoint's stored config and parameters.
template <typename Scalar>
PolicyModel<Scalar> model_from_checkpoint(const Checkpoint& checkpoint, const std::string& prefix = "");

}  // namespace gasr

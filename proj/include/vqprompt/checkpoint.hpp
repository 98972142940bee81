#pragma once

// Versioned binary checkpoint: header (magic, version, backbone config, pool
// hyperparameters) followed by named parameter blobs, 64-bit little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vqprompt/backbone.hpp"

namespace vqp {

struct CheckpointBlob {
  std::string name;
  Shape shape;
  Matrix value;
};

struct Checkpoint {
  BackboneConfig config;
  bool frozen = false;
  std::uint32_t pool_size = 0;      // 0 when no prompt pool is stored
  std::uint32_t prompt_length = 0;
  std::vector<CheckpointBlob> blobs;

  const CheckpointBlob* find(const std::string& name) const;
  void put(const std::string& name, const Tensor& t);
};

Checkpoint make_checkpoint(const Backbone& backbone);
Backbone backbone_from_checkpoint(const Checkpoint& ckpt);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace vqp

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "otface/tensor.hpp"

namespace otface::backbone {

// Plain conv net. Stage 0 is a stride-1 stem; every later stage halves the
// spatial extent, so stage k emits (input_size / 2^k)^2 atoms.
struct BackboneConfig {
  std::size_t input_size = 32;
  std::size_t in_channels = 1;
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::size_t embedding_dim = 64;
  std::size_t tap_stage = 2;
  std::size_t stem_kernel = 3;  // odd; padding kernel/2
  std::size_t down_kernel = 4;  // even; padding kernel/2 - 1

  void validate() const;
  std::size_t stage_extent(std::size_t stage) const { return input_size >> stage; }
};

// Named parameter tensors in a fixed order:
//   stage<k>.weight, stage<k>.bias for each stage, proj.weight, classifier.weight
class Parameters {
 public:
  Parameters() = default;
  void add(std::string name, Tensor value);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  const Tensor& operator[](std::size_t i) const { return entries_[i].second; }
  Tensor& operator[](std::size_t i) { return entries_[i].second; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  friend bool operator==(const Parameters& a, const Parameters& b);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Kaiming fan-in init from a seeded generator; biases start at zero.
// classifier.weight is [embedding_dim, num_classes].
Parameters init_parameters(const BackboneConfig& cfg, std::size_t num_classes,
                           std::uint64_t seed);

// Parameters recorded as tape leaves, aligned with Parameters' order.
struct BoundParameters {
  std::vector<Var> vars;
  std::size_t num_stages = 0;
  Var stage_weight(std::size_t k) const { return vars[2 * k]; }
  Var stage_bias(std::size_t k) const { return vars[2 * k + 1]; }
  Var projection() const { return vars[2 * num_stages]; }
  Var classifier() const { return vars[2 * num_stages + 1]; }
};
BoundParameters bind(Tape& tape, const Parameters& params, const BackboneConfig& cfg);

struct TrunkOutput {
  Var feature_maps;  // conv output of the tap stage before relu, [c_tap, h, w]
  Var pooled;        // global average of the last stage after relu, [c_last]
};

struct ForwardOutput {
  Var feature_maps;  // [c_tap, h, w]
  Var embedding;     // [embedding_dim], unit norm
};

TrunkOutput forward_trunk(Tape& tape, Var image, const BoundParameters& params,
                          const BackboneConfig& cfg);
ForwardOutput forward(Tape& tape, Var image, const BoundParameters& params,
                      const BackboneConfig& cfg);

// [d, h, w] -> [h*w, d]; row i is the channel vector at pixel i (row-major).
Var to_distribution(Tape& tape, Var feature_maps);
Tensor to_distribution(const Tensor& feature_maps);

}  // namespace otface::backbone

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "otface/tensor.hpp"

namespace otface::mining {

// Embeddings of one mini-batch with labels and handles back to the samples.
struct LabeledBatch {
  Tensor embeddings;                 // [N, d]
  std::vector<std::int64_t> labels;  // N
  std::vector<std::size_t> sample_refs;  // N; defaults to 0..N-1 when empty

  void validate() const;
};

struct HardGroup {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;

  friend bool operator==(const HardGroup&, const HardGroup&) = default;
  friend auto operator<=>(const HardGroup&, const HardGroup&) = default;
};

// All (a, p, n) with label(a) == label(p), a != p, label(a) != label(n) and
// cos(a, p) < cos(a, n), in anchor-major (a, p, n) order. With a cap, each
// anchor keeps its `cap` groups with the largest cos(a, n) - cos(a, p), listed
// hardest first with ties broken by (p, n).
std::vector<HardGroup> mine_hard_groups(const LabeledBatch& batch,
                                        std::optional<std::size_t> cap_per_anchor = {});

}  // namespace otface::mining

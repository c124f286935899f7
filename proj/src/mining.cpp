#include "otface/mining.hpp"

#include <algorithm>
#include <string>

namespace otface::mining {

void LabeledBatch::validate() const {
  if (embeddings.rank() != 2) {
    throw DimensionError("batch embeddings must be [N, d], got " + shape_str(embeddings.shape()));
  }
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (n < 2) throw ContractError("batch needs at least two samples");
  if (labels.size() != n) {
    throw DimensionError("batch has " + std::to_string(n) + " embeddings but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (!sample_refs.empty() && sample_refs.size() != n) {
    throw DimensionError("batch sample_refs length mismatch");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(l2_norm(embeddings.data().subspan(i * d, d)) > kNormFloor)) {
      throw DegenerateInputError("batch embedding " + std::to_string(i) + " has near-zero norm");
    }
  }
}

std::vector<HardGroup> mine_hard_groups(const LabeledBatch& batch,
                                        std::optional<std::size_t> cap_per_anchor) {
  batch.validate();
  const std::size_t n = batch.embeddings.dim(0), d = batch.embeddings.dim(1);
  const auto& lab = batch.labels;

  std::vector<double> sim(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double s = cosine_similarity(batch.embeddings.data().subspan(i * d, d),
                                         batch.embeddings.data().subspan(j * d, d));
      sim[i * n + j] = s;
      sim[j * n + i] = s;
    }
  }

  std::vector<HardGroup> out;
  std::vector<HardGroup> per_anchor;
  for (std::size_t a = 0; a < n; ++a) {
    per_anchor.clear();
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || lab[p] != lab[a]) continue;
      const double sap = sim[a * n + p];
      for (std::size_t q = 0; q < n; ++q) {
        if (lab[q] == lab[a]) continue;
        if (sap < sim[a * n + q]) per_anchor.push_back({a, p, q});
      }
    }
    if (cap_per_anchor) {
      auto hardness = [&](const HardGroup& g) {
        return sim[a * n + g.negative] - sim[a * n + g.positive];
      };
      std::stable_sort(per_anchor.begin(), per_anchor.end(),
                       [&](const HardGroup& x, const HardGroup& y) {
                         return hardness(x) > hardness(y);
                       });
      if (per_anchor.size() > *cap_per_anchor) per_anchor.resize(*cap_per_anchor);
    }
    out.insert(out.end(), per_anchor.begin(), per_anchor.end());
  }
  return out;
}

}  // namespace otface::mining

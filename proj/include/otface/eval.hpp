#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "otface/tensor.hpp"

namespace otface::eval {

struct Pair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool same = false;
  std::size_t fold = 0;
};

struct PairSet {
  std::vector<Pair> pairs;
  std::size_t folds = 10;
};

// Balanced pairs: each fold gets `per_fold` same and `per_fold` different
// pairs drawn from `labels`, without repeating a pair.
PairSet make_pairs(const std::vector<std::size_t>& labels, std::size_t folds,
                   std::size_t per_fold, std::uint64_t seed);

// Cosine similarity of each pair's rows in `embeddings` [M, d].
std::vector<double> pair_scores(const Tensor& embeddings, const PairSet& pairs);

struct RocPoint {
  double far = 0.0;
  double tar = 0.0;
};

struct TarAtFar {
  double far_target = 0.0;
  bool attainable = false;
  double tar = 0.0;        // valid when attainable
  double threshold = 0.0;  // accept when score >= threshold
  double achieved_far = 0.0;
};

struct VerificationReport {
  std::vector<double> fold_accuracy;
  std::vector<double> fold_threshold;
  double mean_accuracy = 0.0;
  std::vector<RocPoint> roc;
  std::vector<TarAtFar> tar_at_far;
  std::optional<double> rank1;
};

// Pairs are predicted "same" when score >= threshold. Candidate thresholds are
// the distinct training scores plus +inf; ties go to the smallest threshold.
double best_threshold(std::span<const double> scores, const std::vector<bool>& same);

// Held-out evaluation over k folds; pair.fold must lie in [0, k).
VerificationReport kfold_accuracy(const PairSet& pairs, std::span<const double> scores,
                                  std::size_t k = 10);

// For each target: the smallest threshold whose impostor pass rate is
// <= target. Targets below 1 / num_impostors are reported unattainable.
std::vector<TarAtFar> tar_at_far(std::span<const double> scores, const std::vector<bool>& same,
                                 std::span<const double> far_targets);

// (FAR, TAR) at every distinct threshold, FAR ascending, from (0, 0) to (1, 1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, const std::vector<bool>& same);

// Fraction of probes whose most cosine-similar gallery row shares its label;
// ties resolve to the lowest gallery index.
double rank1_identification(const Tensor& probes, const std::vector<std::size_t>& probe_labels,
                            const Tensor& gallery,
                            const std::vector<std::size_t>& gallery_labels);

}  // namespace otface::eval

#include "otface/eval.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>

namespace otface::eval {

PairSet make_pairs(const std::vector<std::size_t>& labels, std::size_t folds,
                   std::size_t per_fold, std::uint64_t seed) {
  if (folds < 2) throw ContractError("make_pairs needs at least two folds");
  const std::size_t n = labels.size();
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  std::vector<std::size_t> pairable;  // samples with at least one same-class partner
  for (std::size_t i = 0; i < n; ++i) {
    if (by_class[labels[i]].size() > 1) pairable.push_back(i);
  }
  if (pairable.empty() || by_class.size() < 2) {
    throw SizeError("make_pairs needs two classes and a class with two samples");
  }
  std::mt19937_64 rng(seed);
  std::set<std::pair<std::size_t, std::size_t>> used;
  const std::size_t max_attempts = 1000 * folds * per_fold + 1000;
  std::size_t attempts = 0;
  auto draw = [&](bool same) -> Pair {
    while (attempts++ < max_attempts) {
      std::size_t a, b;
      if (same) {
        a = pairable[std::uniform_int_distribution<std::size_t>(0, pairable.size() - 1)(rng)];
        const auto& peers = by_class[labels[a]];
        b = peers[std::uniform_int_distribution<std::size_t>(0, peers.size() - 1)(rng)];
        if (a == b) continue;
      } else {
        a = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        b = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        if (labels[a] == labels[b]) continue;
      }
      if (!used.insert({std::min(a, b), std::max(a, b)}).second) continue;
      return Pair{a, b, same, 0};
    }
    throw SizeError("make_pairs could not draw " + std::to_string(per_fold) +
                    " distinct pairs per fold from " + std::to_string(n) + " samples");
  };
  PairSet out;
  out.folds = folds;
  for (std::size_t f = 0; f < folds; ++f) {
    for (std::size_t i = 0; i < per_fold; ++i) {
      for (bool same : {true, false}) {
        Pair p = draw(same);
        p.fold = f;
        out.pairs.push_back(p);
      }
    }
  }
  return out;
}

std::vector<double> pair_scores(const Tensor& embeddings, const PairSet& pairs) {
  if (embeddings.rank() != 2) throw DimensionError("pair_scores expects [M, d] embeddings");
  const std::size_t m = embeddings.dim(0), d = embeddings.dim(1);
  std::vector<double> out;
  out.reserve(pairs.pairs.size());
  for (const auto& p : pairs.pairs) {
    if (p.a >= m || p.b >= m) {
      throw ContractError("pair references sample " + std::to_string(std::max(p.a, p.b)) +
                          " of " + std::to_string(m));
    }
    out.push_back(cosine_similarity(embeddings.data().subspan(p.a * d, d),
                                    embeddings.data().subspan(p.b * d, d)));
  }
  return out;
}

double best_threshold(std::span<const double> scores, const std::vector<bool>& same) {
  const std::size_t n = scores.size();
  if (same.size() != n) throw DimensionError("best_threshold: scores/flags length mismatch");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  const auto total_same = static_cast<std::size_t>(std::count(same.begin(), same.end(), true));
  const std::size_t total_diff = n - total_same;

  double best_t = std::numeric_limits<double>::infinity();
  std::size_t best_correct = 0;
  bool have = false;
  std::size_t same_below = 0, diff_below = 0;
  for (std::size_t k = 0; k < n;) {
    const double v = scores[order[k]];
    const std::size_t correct = (total_same - same_below) + diff_below;
    if (!have || correct > best_correct) {
      best_correct = correct;
      best_t = v;
      have = true;
    }
    while (k < n && scores[order[k]] == v) {
      if (same[order[k]]) ++same_below; else ++diff_below;
      ++k;
    }
  }
  if (!have || total_diff > best_correct) best_t = std::numeric_limits<double>::infinity();
  return best_t;
}

VerificationReport kfold_accuracy(const PairSet& pairs, std::span<const double> scores,
                                  std::size_t k) {
  if (k < 2) throw ContractError("kfold_accuracy needs k >= 2, got " + std::to_string(k));
  const std::size_t n = pairs.pairs.size();
  if (scores.size() != n) throw DimensionError("kfold_accuracy: scores/pairs length mismatch");
  std::vector<std::size_t> fold_size(k, 0);
  for (const auto& p : pairs.pairs) {
    if (p.fold >= k) {
      throw ContractError("pair fold " + std::to_string(p.fold) + " outside " +
                          std::to_string(k) + " folds");
    }
    ++fold_size[p.fold];
  }
  for (std::size_t f = 0; f < k; ++f) {
    if (fold_size[f] == 0) throw ContractError("fold " + std::to_string(f) + " is empty");
  }

  VerificationReport rep;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<double> train_scores;
    std::vector<bool> train_same;
    for (std::size_t i = 0; i < n; ++i) {
      if (pairs.pairs[i].fold == f) continue;
      train_scores.push_back(scores[i]);
      train_same.push_back(pairs.pairs[i].same);
    }
    const double t = best_threshold(train_scores, train_same);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (pairs.pairs[i].fold != f) continue;
      if ((scores[i] >= t) == pairs.pairs[i].same) ++correct;
    }
    rep.fold_threshold.push_back(t);
    rep.fold_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(fold_size[f]));
  }
  rep.mean_accuracy = std::accumulate(rep.fold_accuracy.begin(), rep.fold_accuracy.end(), 0.0) /
                      static_cast<double>(k);
  std::vector<bool> flags;
  for (const auto& p : pairs.pairs) flags.push_back(p.same);
  rep.roc = roc_curve(scores, flags);
  return rep;
}

namespace {

struct SortedScores {
  std::vector<double> genuine, impostor, candidates;  // ascending
};

SortedScores sort_scores(std::span<const double> scores, const std::vector<bool>& same) {
  if (scores.size() != same.size()) throw DimensionError("scores/flags length mismatch");
  SortedScores s;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    (same[i] ? s.genuine : s.impostor).push_back(scores[i]);
  }
  std::sort(s.genuine.begin(), s.genuine.end());
  std::sort(s.impostor.begin(), s.impostor.end());
  s.candidates.assign(scores.begin(), scores.end());
  std::sort(s.candidates.begin(), s.candidates.end());
  s.candidates.erase(std::unique(s.candidates.begin(), s.candidates.end()), s.candidates.end());
  s.candidates.push_back(std::numeric_limits<double>::infinity());
  return s;
}

// Fraction of `sorted` with value >= t.
double pass_rate(const std::vector<double>& sorted, double t) {
  if (sorted.empty()) return 0.0;
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), t);
  return static_cast<double>(sorted.end() - it) / static_cast<double>(sorted.size());
}

}  // namespace

std::vector<TarAtFar> tar_at_far(std::span<const double> scores, const std::vector<bool>& same,
                                 std::span<const double> far_targets) {
  const SortedScores s = sort_scores(scores, same);
  if (s.impostor.empty()) throw ContractError("tar_at_far needs at least one impostor pair");
  const double min_far = 1.0 / static_cast<double>(s.impostor.size());
  std::vector<TarAtFar> out;
  for (double target : far_targets) {
    TarAtFar r;
    r.far_target = target;
    if (target < min_far) {
      out.push_back(r);
      continue;
    }
    for (double t : s.candidates) {
      const double far = pass_rate(s.impostor, t);
      if (far <= target) {
        r.attainable = true;
        r.threshold = t;
        r.achieved_far = far;
        r.tar = pass_rate(s.genuine, t);
        break;
      }
    }
    out.push_back(r);
  }
  return out;
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, const std::vector<bool>& same) {
  const SortedScores s = sort_scores(scores, same);
  std::vector<RocPoint> out;
  for (auto it = s.candidates.rbegin(); it != s.candidates.rend(); ++it) {
    out.push_back({pass_rate(s.impostor, *it), pass_rate(s.genuine, *it)});
  }
  return out;
}

double rank1_identification(const Tensor& probes, const std::vector<std::size_t>& probe_labels,
                            const Tensor& gallery,
                            const std::vector<std::size_t>& gallery_labels) {
  if (probes.rank() != 2 || gallery.rank() != 2 || probes.dim(1) != gallery.dim(1)) {
    throw DimensionError("rank1: probes " + shape_str(probes.shape()) + " and gallery " +
                         shape_str(gallery.shape()) + " are incompatible");
  }
  const std::size_t np = probes.dim(0), ng = gallery.dim(0), d = probes.dim(1);
  if (ng == 0) throw ContractError("rank1 needs a nonempty gallery");
  if (probe_labels.size() != np || gallery_labels.size() != ng) {
    throw DimensionError("rank1: label counts do not match embeddings");
  }
  if (np == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t p = 0; p < np; ++p) {
    const auto pv = probes.data().subspan(p * d, d);
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < ng; ++g) {
      const double s = cosine_similarity(pv, gallery.data().subspan(g * d, d));
      if (s > best_sim) {
        best_sim = s;
        best = g;
      }
    }
    if (gallery_labels[best] == probe_labels[p]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(np);
}

}  // namespace otface::eval

#include "otface/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "otface/backbone.hpp"

namespace otface::losses {

MarginConfig MarginConfig::defaults_for(MarginVariant variant) {
  switch (variant) {
    case MarginVariant::kAdditiveCosine:
      return {variant, 30.0, 0.35};
    case MarginVariant::kAdditiveAngular:
      return {variant, 64.0, 0.5};
    case MarginVariant::kPlain:
      break;
  }
  return {MarginVariant::kPlain, 64.0, 0.0};
}

void MarginConfig::validate() const {
  if (!(scale > 0.0)) throw ConfigError("margin scale must be positive");
  if (!(margin >= 0.0)) throw ConfigError("margin must be nonnegative");
  if (variant == MarginVariant::kAdditiveAngular && !(margin < std::numbers::pi / 2)) {
    throw ConfigError("additive_angular margin must be below pi/2");
  }
  if (variant == MarginVariant::kAdditiveCosine && !(margin < 1.0)) {
    throw ConfigError("additive_cosine margin must be below 1");
  }
}

const char* variant_name(MarginVariant v) {
  switch (v) {
    case MarginVariant::kPlain: return "plain";
    case MarginVariant::kAdditiveCosine: return "additive_cosine";
    case MarginVariant::kAdditiveAngular: return "additive_angular";
  }
  return "?";
}

MarginVariant parse_variant(const std::string& name) {
  if (name == "plain") return MarginVariant::kPlain;
  if (name == "additive_cosine") return MarginVariant::kAdditiveCosine;
  if (name == "additive_angular") return MarginVariant::kAdditiveAngular;
  throw ConfigError("unknown margin variant '" + name +
                    "' (expected plain, additive_cosine or additive_angular)");
}

const char* reweight_name(Reweight r) {
  switch (r) {
    case Reweight::kNone: return "none";
    case Reweight::kFocal: return "focal";
    case Reweight::kHardExample: return "hard_example";
  }
  return "?";
}

Reweight parse_reweight(const std::string& name) {
  if (name == "none") return Reweight::kNone;
  if (name == "focal") return Reweight::kFocal;
  if (name == "hard_example") return Reweight::kHardExample;
  throw ConfigError("unknown reweight '" + name + "' (expected none, focal or hard_example)");
}

void LossConfig::validate() const {
  margin.validate();
  sinkhorn.validate();
  if (!(focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be nonnegative");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("keep_fraction must lie in (0, 1]");
  }
  if (!(hinge_margin >= 0.0)) throw ConfigError("hinge_margin must be nonnegative");
  if (!(lambda_ot >= 0.0)) throw ConfigError("lambda_ot must be nonnegative");
}

Var batch_margin_logits(Tape& tape, Var embeddings, Var weights,
                        const std::vector<std::size_t>& labels, const MarginConfig& cfg) {
  cfg.validate();
  const auto& es = tape.value(embeddings).shape();
  const auto& ws = tape.value(weights).shape();
  if (es.size() != 2 || ws.size() != 2 || es[1] != ws[0]) {
    throw DimensionError("margin logits: embeddings " + shape_str(es) + " and weights " +
                         shape_str(ws) + " are incompatible");
  }
  Var cos = tape.matmul(tape.normalize(embeddings, 1), tape.normalize(weights, 0));
  return tape.margin_logits(cos, labels, cfg.variant, cfg.scale, cfg.margin);
}

Var margin_logits(Tape& tape, Var embedding, Var weights, std::size_t label,
                  const MarginConfig& cfg) {
  const std::size_t d = tape.value(embedding).size();
  Var row = tape.reshape(embedding, {1, d});
  Var logits = batch_margin_logits(tape, row, weights, {label}, cfg);
  return tape.reshape(logits, {tape.value(logits).size()});
}

Var cross_entropy(Tape& tape, Var logits, std::size_t label) {
  const std::size_t c = tape.value(logits).size();
  Var row = tape.reshape(logits, {1, c});
  return tape.reshape(tape.cross_entropy_rows(row, {label}), {1});
}

Var focal_reweight(Tape& tape, Var per_sample_losses, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be nonnegative");
  return tape.mean(tape.focal(per_sample_losses, gamma));
}

Var hard_example_filter(Tape& tape, Var per_sample_losses, double keep_fraction) {
  const auto& lv = tape.value(per_sample_losses);
  const std::size_t n = lv.size();
  if (n == 0) throw ContractError("hard_example_filter on an empty batch");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("keep_fraction must lie in (0, 1]");
  }
  const auto keep = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-12)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&lv](std::size_t a, std::size_t b) { return lv[a] > lv[b]; });
  idx.resize(std::max<std::size_t>(keep, 1));
  return tape.mean(tape.gather(per_sample_losses, std::move(idx)));
}

Var ot_triplet_loss(Tape& tape, const std::vector<mining::HardGroup>& groups,
                    const std::vector<Var>& distributions, const ot::SinkhornConfig& cfg,
                    double hinge_margin) {
  if (groups.empty()) return tape.constant(Tensor::scalar(0.0));
  auto dist = [&](std::size_t i) {
    if (i >= distributions.size() || !distributions[i].valid()) {
      throw ContractError("ot_triplet_loss: no feature distribution for sample " +
                          std::to_string(i));
    }
    return distributions[i];
  };
  std::map<std::pair<std::size_t, std::size_t>, Var> cache;
  auto ot_between = [&](std::size_t a, std::size_t b) {
    auto [it, fresh] = cache.try_emplace({a, b});
    if (fresh) it->second = ot::ot_distance(tape, dist(a), dist(b), cfg);
    return it->second;
  };
  std::vector<Var> terms;
  terms.reserve(groups.size());
  for (const auto& g : groups) {
    Var diff = tape.sub(ot_between(g.anchor, g.positive), ot_between(g.anchor, g.negative));
    terms.push_back(tape.relu(tape.add_scalar(diff, hinge_margin)));
  }
  return tape.sum(tape.stack(terms));
}

LossBreakdown otface_loss(Tape& tape, const ModelOutputs& outputs,
                          const std::vector<std::size_t>& labels, Var weights,
                          const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown out;
  Var logits = batch_margin_logits(tape, outputs.embeddings, weights, labels, cfg.margin);
  Var per_sample = tape.cross_entropy_rows(logits, labels);
  switch (cfg.reweight) {
    case Reweight::kNone: out.margin_var = tape.mean(per_sample); break;
    case Reweight::kFocal: out.margin_var = focal_reweight(tape, per_sample, cfg.focal_gamma); break;
    case Reweight::kHardExample:
      out.margin_var = hard_example_filter(tape, per_sample, cfg.keep_fraction);
      break;
  }
  out.margin_loss = tape.value(out.margin_var).item();
  out.total_var = out.margin_var;
  out.total = out.margin_loss;
  if (!cfg.mining || cfg.lambda_ot == 0.0) return out;

  mining::LabeledBatch batch;
  batch.embeddings = tape.value(outputs.embeddings);
  batch.labels.assign(labels.begin(), labels.end());
  out.groups = mining::mine_hard_groups(batch, cfg.cap_per_anchor);
  out.num_hard_groups = out.groups.size();
  if (out.groups.empty()) return out;

  if (outputs.feature_maps.size() != labels.size()) {
    throw ContractError("otface_loss: feature maps missing for some batch samples");
  }
  std::vector<Var> dists(labels.size());
  for (const auto& g : out.groups) {
    for (std::size_t i : {g.anchor, g.positive, g.negative}) {
      if (!dists[i].valid()) dists[i] = backbone::to_distribution(tape, outputs.feature_maps[i]);
    }
  }
  Var l_ot = ot_triplet_loss(tape, out.groups, dists, cfg.sinkhorn, cfg.hinge_margin);
  Var weighted = cfg.lambda_ot == 1.0 ? l_ot : tape.scale(l_ot, cfg.lambda_ot);
  out.ot_loss = tape.value(weighted).item();
  out.total_var = tape.add(out.margin_var, weighted);
  out.total = tape.value(out.total_var).item();
  return out;
}

}  // namespace otface::losses

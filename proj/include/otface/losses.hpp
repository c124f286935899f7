#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "otface/mining.hpp"
#include "otface/ot.hpp"
#include "otface/tensor.hpp"

namespace otface::losses {

// plain:            s * cos(theta_y)
// additive_cosine:  s * (cos(theta_y) - m)
// additive_angular: s * cos(theta_y + m)
// Non-target logits are always s * cos(theta_j).
struct MarginConfig {
  MarginVariant variant = MarginVariant::kAdditiveAngular;
  double scale = 64.0;
  double margin = 0.5;

  // s = 30, m = 0.35 for additive_cosine; s = 64, m = 0.5 otherwise.
  static MarginConfig defaults_for(MarginVariant variant);
  void validate() const;
};

const char* variant_name(MarginVariant v);
MarginVariant parse_variant(const std::string& name);

enum class Reweight { kNone, kFocal, kHardExample };
const char* reweight_name(Reweight r);
Reweight parse_reweight(const std::string& name);

struct LossConfig {
  MarginConfig margin;
  Reweight reweight = Reweight::kNone;
  double focal_gamma = 2.0;
  double keep_fraction = 0.5;
  bool mining = true;
  std::optional<std::size_t> cap_per_anchor = 4;
  ot::SinkhornConfig sinkhorn;
  double hinge_margin = 0.0;
  double lambda_ot = 1.0;

  void validate() const;
};

struct LossBreakdown {
  Var total_var;
  Var margin_var;
  double margin_loss = 0.0;
  double ot_loss = 0.0;  // lambda_ot * L_OT
  double total = 0.0;
  std::size_t num_hard_groups = 0;
  std::vector<mining::HardGroup> groups;
};

// Logits for one embedding [d] against class weights W [d, C]; the columns of
// W are normalized on the tape.
Var margin_logits(Tape& tape, Var embedding, Var weights, std::size_t label,
                  const MarginConfig& cfg);
// Batched form: embeddings [N, d] -> logits [N, C].
Var batch_margin_logits(Tape& tape, Var embeddings, Var weights,
                        const std::vector<std::size_t>& labels, const MarginConfig& cfg);

// -log softmax(logits)[label] for a [C] logit vector.
Var cross_entropy(Tape& tape, Var logits, std::size_t label);

// mean over t of (1 - p_t)^gamma * loss_t, p_t = exp(-loss_t).
Var focal_reweight(Tape& tape, Var per_sample_losses, double gamma);
// Mean of the ceil(keep_fraction * N) largest losses; ties keep lower indices.
Var hard_example_filter(Tape& tape, Var per_sample_losses, double keep_fraction);

// sum over groups of [OT(a, p) - OT(a, n) + hinge_margin]_+. `distributions`
// is indexed by batch position; entries not referenced may be invalid.
Var ot_triplet_loss(Tape& tape, const std::vector<mining::HardGroup>& groups,
                    const std::vector<Var>& distributions, const ot::SinkhornConfig& cfg,
                    double hinge_margin);

// What a batch forward leaves on the tape.
struct ModelOutputs {
  Var embeddings;                 // [N, d]
  std::vector<Var> feature_maps;  // per sample [d_tap, h, w]
};

// Margin loss (mean, or reweighted) plus lambda_ot times the OT triplet loss
// over the hard groups mined from the embeddings.
LossBreakdown otface_loss(Tape& tape, const ModelOutputs& outputs,
                          const std::vector<std::size_t>& labels, Var weights,
                          const LossConfig& cfg);

}  // namespace otface::losses

#include "otface/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace otface::trainer {

void Dataset::validate() const {
  if (images.empty()) throw ContractError("dataset is empty");
  if (labels.size() != images.size()) throw DimensionError("dataset labels/images length mismatch");
  std::vector<bool> seen(num_classes, false);
  for (std::size_t l : labels) {
    if (l >= num_classes) {
      throw ContractError("label " + std::to_string(l) + " outside 0.." +
                          std::to_string(num_classes - 1));
    }
    seen[l] = true;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ContractError("dataset labels do not cover a contiguous 0..C-1 range");
  }
}

const char* sampler_name(Sampler s) {
  return s == Sampler::kUniformRandom ? "uniform_random" : "class_balanced";
}

Sampler parse_sampler(const std::string& name) {
  if (name == "uniform_random") return Sampler::kUniformRandom;
  if (name == "class_balanced") return Sampler::kClassBalanced;
  throw ConfigError("unknown sampler '" + name + "' (expected uniform_random or class_balanced)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
      throw ConfigError("lr_milestones must be strictly increasing");
    }
    if (lr_milestones[i] >= epochs) {
      throw ConfigError("lr milestone " + std::to_string(lr_milestones[i]) +
                        " is not below epochs = " + std::to_string(epochs));
    }
  }
}

TrainState init_state(const backbone::BackboneConfig& bcfg, std::size_t num_classes,
                      std::uint64_t seed) {
  TrainState s;
  s.params = backbone::init_parameters(bcfg, num_classes, seed);
  for (const auto& [name, t] : s.params.entries()) s.momentum.emplace_back(t.shape());
  // Separate stream for batch sampling.
  s.rng.seed(seed ^ 0x9E3779B97F4A7C15ULL);
  return s;
}

void sgd_step(backbone::Parameters& params, std::vector<Tensor>& buffers,
              const std::vector<Tensor>& grads, double lr, double momentum, double weight_decay) {
  if (grads.size() != params.size() || buffers.size() != params.size()) {
    throw ContractError("sgd_step: " + std::to_string(grads.size()) + " gradients and " +
                        std::to_string(buffers.size()) + " buffers for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (grads[k].shape() != p.shape() || buffers[k].shape() != p.shape()) {
      throw ContractError("sgd_step: gradient " + shape_str(grads[k].shape()) +
                          " does not match parameter '" + params.name(k) + "' " +
                          shape_str(p.shape()));
    }
    Tensor& buf = buffers[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      buf[i] = momentum * buf[i] + grads[k][i] + weight_decay * p[i];
      p[i] -= lr * buf[i];
    }
  }
}

void sgd_step(TrainState& state, const std::vector<Tensor>& grads, const TrainConfig& cfg) {
  sgd_step(state.params, state.momentum, grads, lr_at(state.epoch, cfg), cfg.momentum,
           cfg.weight_decay);
  ++state.step;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const auto decays = std::count_if(cfg.lr_milestones.begin(), cfg.lr_milestones.end(),
                                    [epoch](std::size_t m) { return m <= epoch; });
  double lr = cfg.lr;
  for (std::ptrdiff_t i = 0; i < decays; ++i) lr *= 0.1;
  return lr;
}

std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, const TrainConfig& cfg,
                                                   std::mt19937_64& rng) {
  const std::size_t n = data.size();
  std::vector<std::vector<std::size_t>> batches;
  if (cfg.sampler == Sampler::kUniformRandom) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + cfg.batch_size)));
    }
    return batches;
  }

  std::vector<std::vector<std::size_t>> pools(data.num_classes);
  for (std::size_t i = 0; i < n; ++i) pools[data.labels[i]].push_back(i);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
  std::vector<std::size_t> cursor(data.num_classes, 0);
  std::vector<std::size_t> classes(data.num_classes);
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  std::size_t class_cursor = classes.size();

  const std::size_t k = cfg.samples_per_class;
  const std::size_t p = std::clamp<std::size_t>(cfg.batch_size / k, 1, data.num_classes);
  const std::size_t num_batches = (n + p * k - 1) / (p * k);
  for (std::size_t b = 0; b < num_batches; ++b) {
    std::vector<std::size_t> batch;
    for (std::size_t c = 0; c < p; ++c) {
      if (class_cursor == classes.size()) {
        std::shuffle(classes.begin(), classes.end(), rng);
        class_cursor = 0;
      }
      const std::size_t cls = classes[class_cursor++];
      auto& pool = pools[cls];
      const std::size_t take = std::min(k, pool.size());
      for (std::size_t t = 0; t < take; ++t) {
        if (cursor[cls] == pool.size()) {
          std::shuffle(pool.begin(), pool.end(), rng);
          cursor[cls] = 0;
        }
        batch.push_back(pool[cursor[cls]++]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

BatchResult compute_batch(const backbone::Parameters& params, const Dataset& data,
                          const std::vector<std::size_t>& indices,
                          const backbone::BackboneConfig& bcfg, const losses::LossConfig& lcfg) {
  Tape tape;
  const auto bound = backbone::bind(tape, params, bcfg);
  losses::ModelOutputs outputs;
  std::vector<Var> embeddings;
  std::vector<std::size_t> labels;
  for (std::size_t idx : indices) {
    Var image = tape.constant(data.images.at(idx));
    auto fwd = backbone::forward(tape, image, bound, bcfg);
    embeddings.push_back(fwd.embedding);
    outputs.feature_maps.push_back(fwd.feature_maps);
    labels.push_back(data.labels.at(idx));
  }
  outputs.embeddings = tape.stack(embeddings);
  BatchResult out;
  out.loss = losses::otface_loss(tape, outputs, labels, bound.classifier(), lcfg);
  if (!std::isfinite(out.loss.margin_loss) || !std::isfinite(out.loss.ot_loss)) {
    return out;
  }
  tape.backward(out.loss.total_var);
  for (Var v : bound.vars) out.grads.push_back(tape.grad(v));
  return out;
}

EpochMetrics train_epoch(TrainState& state, const Dataset& data,
                         const backbone::BackboneConfig& bcfg, const losses::LossConfig& lcfg,
                         const TrainConfig& cfg) {
  data.validate();
  cfg.validate();
  EpochMetrics m;
  m.epoch = state.epoch;
  m.lr = lr_at(state.epoch, cfg);
  const auto batches = make_batches(data, cfg, state.rng);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    BatchResult r;
    try {
      r = compute_batch(state.params, data, batches[b], bcfg, lcfg);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("epoch " + std::to_string(state.epoch) + " batch " +
                           std::to_string(b) + ": " + e.what());
    }
    const auto& loss = r.loss;
    for (auto [name, value] : {std::pair{"margin_loss", loss.margin_loss},
                               std::pair{"ot_loss", loss.ot_loss}}) {
      if (!std::isfinite(value)) {
        throw NonFiniteError("epoch " + std::to_string(state.epoch) + " batch " +
                             std::to_string(b) + ": " + name + " is " + std::to_string(value));
      }
    }
    sgd_step(state, r.grads, cfg);
    state.batches.push_back({state.epoch, b, batches[b].size(), loss.margin_loss, loss.ot_loss,
                             loss.total, loss.num_hard_groups});
    m.margin_loss += loss.margin_loss;
    m.ot_loss += loss.ot_loss;
    m.total += loss.total;
    m.hard_groups += loss.num_hard_groups;
  }
  const auto nb = static_cast<double>(batches.size());
  m.margin_loss /= nb;
  m.ot_loss /= nb;
  m.total /= nb;
  state.history.push_back(m);
  ++state.epoch;
  return m;
}

Tensor embed(const backbone::Parameters& params, const std::vector<Tensor>& images,
             const backbone::BackboneConfig& bcfg) {
  Tensor out({images.size(), bcfg.embedding_dim});
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tape tape;
    const auto bound = backbone::bind(tape, params, bcfg);
    auto fwd = backbone::forward(tape, tape.constant(images[i]), bound, bcfg);
    const auto& e = tape.value(fwd.embedding);
    std::copy(e.data().begin(), e.data().end(), out.data().begin() + i * bcfg.embedding_dim);
  }
  return out;
}

}  // namespace otface::trainer

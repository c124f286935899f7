#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "otface/backbone.hpp"
#include "otface/losses.hpp"

namespace otface::trainer {

// In-memory labeled images, labels contiguous in [0, num_classes).
struct Dataset {
  std::vector<Tensor> images;  // each [c, h, w]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
  void validate() const;
};

enum class Sampler { kUniformRandom, kClassBalanced };
const char* sampler_name(Sampler s);
Sampler parse_sampler(const std::string& name);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 24;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> lr_milestones{10, 18, 22};
  Sampler sampler = Sampler::kClassBalanced;
  // K of the P x K sampler; P = batch_size / K, capped by the class count.
  std::size_t samples_per_class = 4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double margin_loss = 0.0;  // batch means
  double ot_loss = 0.0;
  double total = 0.0;
  std::size_t hard_groups = 0;  // summed over batches
  double lr = 0.0;
};

struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::size_t size = 0;
  double margin_loss = 0.0;
  double ot_loss = 0.0;
  double total = 0.0;
  std::size_t hard_groups = 0;
};

struct TrainState {
  backbone::Parameters params;
  std::vector<Tensor> momentum;  // mirrors params
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::mt19937_64 rng;
  std::vector<EpochMetrics> history;
  std::vector<BatchRecord> batches;
};

TrainState init_state(const backbone::BackboneConfig& bcfg, std::size_t num_classes,
                      std::uint64_t seed);

// buf <- momentum * buf + grad + weight_decay * param; param <- param - lr * buf
void sgd_step(backbone::Parameters& params, std::vector<Tensor>& buffers,
              const std::vector<Tensor>& grads, double lr, double momentum, double weight_decay);
// Same update with lr = lr_at(state.epoch).
void sgd_step(TrainState& state, const std::vector<Tensor>& grads, const TrainConfig& cfg);

// lr * 0.1^(number of milestones <= epoch)
double lr_at(std::size_t epoch, const TrainConfig& cfg);

// Batch index lists for one epoch, drawn from state.rng.
std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, const TrainConfig& cfg,
                                                   std::mt19937_64& rng);

struct BatchResult {
  losses::LossBreakdown loss;
  std::vector<Tensor> grads;  // aligned with params
};

// Forward one batch, mine, compute the loss and its parameter gradients.
BatchResult compute_batch(const backbone::Parameters& params, const Dataset& data,
                          const std::vector<std::size_t>& indices,
                          const backbone::BackboneConfig& bcfg, const losses::LossConfig& lcfg);

// One pass over the data. Throws NonFiniteError naming the batch and the term
// when a loss goes non-finite.
EpochMetrics train_epoch(TrainState& state, const Dataset& data,
                         const backbone::BackboneConfig& bcfg, const losses::LossConfig& lcfg,
                         const TrainConfig& cfg);

// Unit embeddings for every image, [N, embedding_dim].
Tensor embed(const backbone::Parameters& params, const std::vector<Tensor>& images,
             const backbone::BackboneConfig& bcfg);

}  // namespace otface::trainer

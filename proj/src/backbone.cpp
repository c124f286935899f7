#include "otface/backbone.hpp"

#include <cmath>
#include <random>

namespace otface::backbone {

void BackboneConfig::validate() const {
  if (stage_channels.empty()) throw ConfigError("backbone needs at least one stage");
  if (tap_stage >= stage_channels.size()) {
    throw ConfigError("tap_stage " + std::to_string(tap_stage) + " does not index one of " +
                      std::to_string(stage_channels.size()) + " stages");
  }
  if (in_channels == 0 || embedding_dim == 0) {
    throw ConfigError("in_channels and embedding_dim must be positive");
  }
  for (std::size_t c : stage_channels) {
    if (c == 0) throw ConfigError("stage channel counts must be positive");
  }
  if (stem_kernel % 2 == 0) throw ConfigError("stem_kernel must be odd");
  if (down_kernel < 2 || down_kernel % 2 != 0) throw ConfigError("down_kernel must be even");
  const std::size_t downs = stage_channels.size() - 1;
  if (input_size == 0 || input_size % (std::size_t{1} << downs) != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " must be divisible by 2^" +
                      std::to_string(downs));
  }
}

void Parameters::add(std::string name, Tensor value) {
  entries_.emplace_back(std::move(name), std::move(value));
}

const Tensor& Parameters::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ContractError("no parameter named '" + name + "'");
}

Tensor& Parameters::get(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

bool operator==(const Parameters& a, const Parameters& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& [na, ta] = a.entries_[i];
    const auto& [nb, tb] = b.entries_[i];
    if (na != nb || ta.shape() != tb.shape() || ta.vec() != tb.vec()) return false;
  }
  return true;
}

Parameters init_parameters(const BackboneConfig& cfg, std::size_t num_classes,
                           std::uint64_t seed) {
  cfg.validate();
  if (num_classes == 0) throw ConfigError("need at least one class");
  std::mt19937_64 rng(seed);
  auto gaussian = [&rng](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> nd(0.0, stddev);
    for (double& x : t.data()) x = nd(rng);
    return t;
  };
  Parameters p;
  std::size_t cin = cfg.in_channels;
  for (std::size_t k = 0; k < cfg.stage_channels.size(); ++k) {
    const std::size_t cout = cfg.stage_channels[k];
    const std::size_t ks = k == 0 ? cfg.stem_kernel : cfg.down_kernel;
    const double fan_in = static_cast<double>(cin * ks * ks);
    p.add("stage" + std::to_string(k) + ".weight",
          gaussian({cout, cin, ks, ks}, std::sqrt(2.0 / fan_in)));
    p.add("stage" + std::to_string(k) + ".bias", Tensor({cout}));
    cin = cout;
  }
  p.add("proj.weight", gaussian({cin, cfg.embedding_dim}, std::sqrt(2.0 / static_cast<double>(cin))));
  p.add("classifier.weight", gaussian({cfg.embedding_dim, num_classes}, 1.0));
  return p;
}

BoundParameters bind(Tape& tape, const Parameters& params, const BackboneConfig& cfg) {
  cfg.validate();
  BoundParameters b;
  b.num_stages = cfg.stage_channels.size();
  if (params.size() != 2 * b.num_stages + 2) {
    throw ConfigError("parameter set has " + std::to_string(params.size()) +
                      " tensors, backbone expects " + std::to_string(2 * b.num_stages + 2));
  }
  for (std::size_t i = 0; i < params.size(); ++i) b.vars.push_back(tape.leaf(params[i]));
  return b;
}

TrunkOutput forward_trunk(Tape& tape, Var image, const BoundParameters& params,
                          const BackboneConfig& cfg) {
  const auto& s = tape.value(image).shape();
  if (s.size() != 3 || s[0] != cfg.in_channels || s[1] != cfg.input_size ||
      s[2] != cfg.input_size) {
    throw ConfigError("image " + shape_str(s) + " does not match backbone input [" +
                      std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.input_size) +
                      "x" + std::to_string(cfg.input_size) + "]");
  }
  TrunkOutput out;
  Var x = image;
  for (std::size_t k = 0; k < cfg.stage_channels.size(); ++k) {
    const bool stem = k == 0;
    const std::size_t stride = stem ? 1 : 2;
    const std::size_t pad = stem ? cfg.stem_kernel / 2 : cfg.down_kernel / 2 - 1;
    Var conv = tape.conv2d(x, params.stage_weight(k), params.stage_bias(k), stride, pad);
    if (k == cfg.tap_stage) out.feature_maps = conv;
    x = tape.relu(conv);
  }
  const auto& fs = tape.value(x).shape();
  const std::size_t c = fs[0], hw = fs[1] * fs[2];
  Var avg = tape.constant(Tensor::filled({hw, 1}, 1.0 / static_cast<double>(hw)));
  out.pooled = tape.reshape(tape.matmul(tape.reshape(x, {c, hw}), avg), {c});
  return out;
}

ForwardOutput forward(Tape& tape, Var image, const BoundParameters& params,
                      const BackboneConfig& cfg) {
  TrunkOutput trunk = forward_trunk(tape, image, params, cfg);
  const std::size_t c = tape.value(trunk.pooled).size();
  Var projected = tape.matmul(tape.reshape(trunk.pooled, {1, c}), params.projection());
  const std::size_t d = tape.value(projected).size();
  return {trunk.feature_maps, tape.normalize(tape.reshape(projected, {d}))};
}

Var to_distribution(Tape& tape, Var feature_maps) {
  const auto& s = tape.value(feature_maps).shape();
  if (s.size() != 3) throw DimensionError("to_distribution expects [d, h, w], got " + shape_str(s));
  return tape.transpose(tape.reshape(feature_maps, {s[0], s[1] * s[2]}));
}

Tensor to_distribution(const Tensor& feature_maps) {
  const auto& s = feature_maps.shape();
  if (s.size() != 3) throw DimensionError("to_distribution expects [d, h, w], got " + shape_str(s));
  const std::size_t d = s[0], n = s[1] * s[2];
  Tensor out({n, d});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < n; ++i) out[i * d + c] = feature_maps[c * n + i];
  return out;
}

}  // namespace otface::backbone

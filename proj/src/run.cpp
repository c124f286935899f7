#include <algorithm>

#include "otface/io.hpp"

namespace otface::io {

TrainResult run_training(const RunConfig& cfg_in, const fs::path& data_root,
                         const fs::path& out_dir, const EpochCallback& on_epoch) {
  RunConfig cfg = cfg_in;
  if (auto s = env_seed()) {
    cfg.trainer.seed = *s;
    cfg.eval.seed = *s;
  }
  cfg.validate();
  const trainer::Dataset data = load_dataset(data_root);
  const auto& img = data.images.front();
  if (img.dim(0) != cfg.backbone.in_channels || img.dim(1) != cfg.backbone.input_size ||
      img.dim(2) != cfg.backbone.input_size) {
    throw ConfigError("dataset images are " + shape_str(img.shape()) + " but the backbone expects " +
                      shape_str({cfg.backbone.in_channels, cfg.backbone.input_size,
                                 cfg.backbone.input_size}));
  }
  fs::create_directories(out_dir);

  const losses::LossConfig lcfg = cfg.resolved_loss();
  TrainResult res{trainer::init_state(cfg.backbone, data.num_classes, cfg.trainer.seed),
                  out_dir / "metrics.csv", out_dir / "model.ckpt"};
  auto& st = res.state;
  for (std::size_t e = 0; e < cfg.trainer.epochs; ++e) {
    const auto m = trainer::train_epoch(st, data, cfg.backbone, lcfg, cfg.trainer);
    // Rewritten every epoch so an interrupted run leaves a consistent prefix.
    atomic_write(res.metrics_path, metrics_csv(st.history));
    if (cfg.trainer.checkpoint_every != 0 && st.epoch % cfg.trainer.checkpoint_every == 0) {
      save_checkpoint({cfg, st.params, st.epoch},
                      out_dir / ("epoch" + std::to_string(st.epoch) + ".ckpt"));
    }
    if (on_epoch) on_epoch(m);
  }
  save_checkpoint({cfg, st.params, st.epoch}, res.checkpoint_path);
  return res;
}

eval::VerificationReport evaluate_model(const backbone::Parameters& params, const RunConfig& cfg,
                                        const trainer::Dataset& data) {
  data.validate();
  const Tensor emb = trainer::embed(params, data.images, cfg.backbone);
  const eval::PairSet pairs =
      eval::make_pairs(data.labels, cfg.eval.folds, cfg.eval.pairs_per_fold, cfg.eval.seed);
  const std::vector<double> scores = eval::pair_scores(emb, pairs);
  eval::VerificationReport rep = eval::kfold_accuracy(pairs, scores, cfg.eval.folds);
  std::vector<bool> same;
  for (const auto& p : pairs.pairs) same.push_back(p.same);
  rep.tar_at_far = eval::tar_at_far(scores, same, cfg.eval.far_targets);

  // First image of each class forms the gallery.
  const std::size_t d = emb.dim(1);
  std::vector<bool> taken(data.num_classes, false);
  std::vector<double> gal, prb;
  std::vector<std::size_t> gal_labels, prb_labels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = emb.data().subspan(i * d, d);
    const std::size_t l = data.labels[i];
    auto& dst = taken[l] ? prb : gal;
    (taken[l] ? prb_labels : gal_labels).push_back(l);
    dst.insert(dst.end(), row.begin(), row.end());
    taken[l] = true;
  }
  if (!prb_labels.empty()) {
    rep.rank1 = eval::rank1_identification(Tensor({prb_labels.size(), d}, std::move(prb)),
                                           prb_labels,
                                           Tensor({gal_labels.size(), d}, std::move(gal)),
                                           gal_labels);
  }
  return rep;
}

}  // namespace otface::io

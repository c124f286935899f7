#include "otface/otface.h"

#include <algorithm>
#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "otface/io.hpp"
#include "otface/mining.hpp"
#include "otface/ot.hpp"

struct otface_config {
  otface::io::RunConfig cfg;
};

struct otface_model {
  otface::io::Checkpoint ck;
};

struct otface_report {
  otface::eval::VerificationReport rep;
};

namespace {

using namespace otface;

thread_local std::string g_last_error;

otface_status status_of(ErrorCode c) {
  switch (c) {
    case ErrorCode::kDimension: return OTFACE_ERR_DIMENSION;
    case ErrorCode::kConfiguration: return OTFACE_ERR_CONFIG;
    case ErrorCode::kDegenerateInput: return OTFACE_ERR_DEGENERATE_INPUT;
    case ErrorCode::kNumericalRegime: return OTFACE_ERR_NUMERICAL_REGIME;
    case ErrorCode::kContract: return OTFACE_ERR_CONTRACT;
    case ErrorCode::kSize: return OTFACE_ERR_SIZE;
    case ErrorCode::kParse: return OTFACE_ERR_PARSE;
    case ErrorCode::kIo: return OTFACE_ERR_IO;
    case ErrorCode::kNonFinite: return OTFACE_ERR_NON_FINITE;
  }
  return OTFACE_ERR_INTERNAL;
}

otface_status fail(otface_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

// Runs `fn`, translating exceptions into status codes. Nothing escapes.
template <typename F>
otface_status guard(F&& fn) noexcept {
  try {
    g_last_error.clear();
    return fn();
  } catch (const Error& e) {
    return fail(status_of(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(OTFACE_ERR_INTERNAL, "out of memory");
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(OTFACE_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(OTFACE_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(OTFACE_ERR_INTERNAL, "unknown exception");
  }
}

#define REQUIRE_ARG(p)                                                              \
  do {                                                                              \
    if ((p) == nullptr) return fail(OTFACE_ERR_INVALID_ARGUMENT, #p " is NULL");    \
  } while (0)

otface_status copy_string(const std::string& s, char* buf, std::size_t capacity,
                          std::size_t* needed) {
  if (needed) *needed = s.size() + 1;
  if (buf == nullptr) return OTFACE_OK;
  if (capacity < s.size() + 1) {
    return fail(OTFACE_ERR_SIZE, "buffer holds " + std::to_string(capacity) + " bytes, need " +
                                     std::to_string(s.size() + 1));
  }
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return OTFACE_OK;
}

std::vector<bool> flags_of(const int* same, std::size_t n) {
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (same[i] != 0 && same[i] != 1) {
      throw ContractError("same[" + std::to_string(i) + "] must be 0 or 1");
    }
    out[i] = same[i] == 1;
  }
  return out;
}

}  // namespace

extern "C" {

const char* otface_version(void) { return "1.0.0"; }

const char* otface_status_name(otface_status s) {
  switch (s) {
    case OTFACE_OK: return "ok";
    case OTFACE_ERR_DIMENSION: return "dimension error";
    case OTFACE_ERR_CONFIG: return "configuration error";
    case OTFACE_ERR_DEGENERATE_INPUT: return "degenerate input";
    case OTFACE_ERR_NUMERICAL_REGIME: return "numerical regime error";
    case OTFACE_ERR_CONTRACT: return "contract violation";
    case OTFACE_ERR_SIZE: return "size error";
    case OTFACE_ERR_PARSE: return "parse error";
    case OTFACE_ERR_IO: return "i/o error";
    case OTFACE_ERR_NON_FINITE: return "non-finite value";
    case OTFACE_ERR_INVALID_ARGUMENT: return "invalid argument";
    case OTFACE_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* otface_last_error(void) { return g_last_error.c_str(); }

// ---- config ----------------------------------------------------------------

otface_status otface_config_new(otface_config** out) {
  return guard([&] {
    REQUIRE_ARG(out);
    *out = new otface_config{};
    return OTFACE_OK;
  });
}

otface_status otface_config_load(const char* path, otface_config** out) {
  return guard([&] {
    REQUIRE_ARG(path);
    REQUIRE_ARG(out);
    *out = new otface_config{io::RunConfig::load(path)};
    return OTFACE_OK;
  });
}

otface_status otface_config_parse(const char* text, otface_config** out) {
  return guard([&] {
    REQUIRE_ARG(text);
    REQUIRE_ARG(out);
    *out = new otface_config{io::RunConfig::from_text(text)};
    return OTFACE_OK;
  });
}

otface_status otface_config_set(otface_config* cfg, const char* assignment) {
  return guard([&] {
    REQUIRE_ARG(cfg);
    REQUIRE_ARG(assignment);
    cfg->cfg.set(assignment);
    return OTFACE_OK;
  });
}

otface_status otface_config_get(const otface_config* cfg, const char* key, char* buf,
                                std::size_t capacity, std::size_t* needed) {
  return guard([&] {
    REQUIRE_ARG(cfg);
    REQUIRE_ARG(key);
    // The text form is authoritative; pick the requested line out of it.
    const std::string text = cfg->cfg.to_text();
    const std::string prefix = std::string(key) + " = ";
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t end = text.find('\n', pos);
      const std::string line = text.substr(pos, end - pos);
      if (line.rfind(prefix, 0) == 0) return copy_string(line.substr(prefix.size()), buf, capacity, needed);
      if (end == std::string::npos) break;
      pos = end + 1;
    }
    return fail(OTFACE_ERR_PARSE, std::string("unknown config key '") + key + "'");
  });
}

otface_status otface_config_to_text(const otface_config* cfg, char* buf, std::size_t capacity,
                                    std::size_t* needed) {
  return guard([&] {
    REQUIRE_ARG(cfg);
    return copy_string(cfg->cfg.to_text(), buf, capacity, needed);
  });
}

otface_status otface_config_validate(const otface_config* cfg) {
  return guard([&] {
    REQUIRE_ARG(cfg);
    cfg->cfg.validate();
    return OTFACE_OK;
  });
}

otface_status otface_config_save(const otface_config* cfg, const char* path) {
  return guard([&] {
    REQUIRE_ARG(cfg);
    REQUIRE_ARG(path);
    cfg->cfg.save(path);
    return OTFACE_OK;
  });
}

void otface_config_free(otface_config* cfg) { delete cfg; }

// ---- optimal transport -------------------------------------------------------

otface_status otface_ot_solve(const double* cost, std::size_t n, double epsilon, unsigned flags,
                              std::size_t max_iters, double marginal_tol, double* plan,
                              otface_ot_result* result) {
  return guard([&] {
    REQUIRE_ARG(cost);
    REQUIRE_ARG(result);
    if (flags & ~(OTFACE_OT_LOG_DOMAIN | OTFACE_OT_EPSILON_SCALING)) {
      throw ConfigError("otface_ot_solve: unknown flag bits " + std::to_string(flags));
    }
    ot::SinkhornConfig cfg;
    cfg.epsilon = epsilon;
    cfg.log_domain = (flags & OTFACE_OT_LOG_DOMAIN) != 0;
    cfg.epsilon_scaling = (flags & OTFACE_OT_EPSILON_SCALING) != 0;
    cfg.max_iters = max_iters;
    cfg.marginal_tol = marginal_tol;
    const ot::CostMatrix c(n, std::vector<double>(cost, cost + n * n));
    const ot::TransportPlan p = ot::solve(c, cfg);
    result->value = p.value;
    result->iterations = p.iterations_used;
    result->marginal_violation = p.marginal_violation;
    result->converged = p.converged ? 1 : 0;
    if (plan) std::copy(p.plan.begin(), p.plan.end(), plan);
    return OTFACE_OK;
  });
}

otface_status otface_ot_exact(const double* cost, std::size_t n, double* value) {
  return guard([&] {
    REQUIRE_ARG(cost);
    REQUIRE_ARG(value);
    *value = ot::exact_ot_uniform(ot::CostMatrix(n, std::vector<double>(cost, cost + n * n)));
    return OTFACE_OK;
  });
}

// ---- mining -------------------------------------------------------------

otface_status otface_mine(const double* embeddings, std::size_t n, std::size_t d,
                          const std::int64_t* labels, std::size_t cap_per_anchor,
                          otface_group* groups, std::size_t capacity, std::size_t* count) {
  return guard([&] {
    REQUIRE_ARG(embeddings);
    REQUIRE_ARG(labels);
    REQUIRE_ARG(count);
    mining::LabeledBatch batch{Tensor({n, d}, std::vector<double>(embeddings, embeddings + n * d)),
                               std::vector<std::int64_t>(labels, labels + n),
                               {}};
    std::optional<std::size_t> cap;
    if (cap_per_anchor != 0) cap = cap_per_anchor;
    const auto found = mining::mine_hard_groups(batch, cap);
    *count = found.size();
    if (groups == nullptr) return OTFACE_OK;
    if (capacity < found.size()) {
      return fail(OTFACE_ERR_SIZE, "group buffer holds " + std::to_string(capacity) + ", need " +
                                       std::to_string(found.size()));
    }
    for (std::size_t i = 0; i < found.size(); ++i) {
      groups[i] = {found[i].anchor, found[i].positive, found[i].negative};
    }
    return OTFACE_OK;
  });
}

// ---- data -----------------------------------------------------------------

void otface_synthetic_spec_default(otface_synthetic_spec* spec) {
  if (spec == nullptr) return;
  const io::SyntheticSpec d;
  *spec = {d.num_classes, d.per_class, d.hardness, d.seed, d.image_size, 0};
}

otface_status otface_generate_synthetic(const otface_synthetic_spec* spec, const char* root) {
  return guard([&] {
    REQUIRE_ARG(spec);
    REQUIRE_ARG(root);
    io::SyntheticSpec s;
    s.num_classes = spec->num_classes;
    s.per_class = spec->per_class;
    s.hardness = spec->hardness;
    s.seed = spec->seed;
    s.image_size = spec->image_size;
    s.encoding = spec->uint8_encoding ? io::ImageEncoding::kUint8 : io::ImageEncoding::kFloat32;
    io::write_synthetic(s, root);
    return OTFACE_OK;
  });
}

otface_status otface_read_csv(const char* path, double* values, std::size_t capacity,
                              std::size_t* rows, std::size_t* cols) {
  return guard([&] {
    REQUIRE_ARG(path);
    REQUIRE_ARG(rows);
    REQUIRE_ARG(cols);
    const io::CsvMatrix m = io::read_csv_matrix(path);
    *rows = m.rows;
    *cols = m.cols;
    if (values == nullptr) return OTFACE_OK;
    if (capacity < m.data.size()) {
      return fail(OTFACE_ERR_SIZE, "value buffer holds " + std::to_string(capacity) + ", need " +
                                       std::to_string(m.data.size()));
    }
    std::copy(m.data.begin(), m.data.end(), values);
    return OTFACE_OK;
  });
}

// ---- training -------------------------------------------------------------

otface_status otface_train(const otface_config* cfg, const char* data_root, const char* out_dir,
                           otface_epoch_callback callback, void* user) {
  return guard([&] {
    REQUIRE_ARG(cfg);
    REQUIRE_ARG(data_root);
    REQUIRE_ARG(out_dir);
    io::EpochCallback cb;
    if (callback) {
      cb = [&](const trainer::EpochMetrics& m) {
        const otface_epoch_metrics c{m.epoch,      m.margin_loss, m.ot_loss,
                                     m.total,      m.hard_groups, m.lr};
        callback(&c, user);
      };
    }
    io::run_training(cfg->cfg, data_root, out_dir, cb);
    return OTFACE_OK;
  });
}

// ---- models -----------------------------------------------------------------

otface_status otface_model_load(const char* checkpoint, otface_model** out) {
  return guard([&] {
    REQUIRE_ARG(checkpoint);
    REQUIRE_ARG(out);
    *out = new otface_model{io::load_checkpoint(checkpoint)};
    return OTFACE_OK;
  });
}

otface_status otface_model_save(const otface_model* model, const char* checkpoint) {
  return guard([&] {
    REQUIRE_ARG(model);
    REQUIRE_ARG(checkpoint);
    io::save_checkpoint(model->ck, checkpoint);
    return OTFACE_OK;
  });
}

otface_status otface_model_config(const otface_model* model, otface_config** out) {
  return guard([&] {
    REQUIRE_ARG(model);
    REQUIRE_ARG(out);
    *out = new otface_config{model->ck.config};
    return OTFACE_OK;
  });
}

otface_status otface_model_epoch(const otface_model* model, std::uint64_t* epoch) {
  return guard([&] {
    REQUIRE_ARG(model);
    REQUIRE_ARG(epoch);
    *epoch = model->ck.epoch;
    return OTFACE_OK;
  });
}

otface_status otface_model_embedding_dim(const otface_model* model, std::size_t* dim) {
  return guard([&] {
    REQUIRE_ARG(model);
    REQUIRE_ARG(dim);
    *dim = model->ck.config.backbone.embedding_dim;
    return OTFACE_OK;
  });
}

otface_status otface_model_embed(const otface_model* model, const double* images,
                                 std::size_t count, double* embeddings) {
  return guard([&] {
    REQUIRE_ARG(model);
    REQUIRE_ARG(images);
    REQUIRE_ARG(embeddings);
    const auto& b = model->ck.config.backbone;
    const Shape shape{b.in_channels, b.input_size, b.input_size};
    const std::size_t px = shape_numel(shape);
    std::vector<Tensor> imgs;
    for (std::size_t i = 0; i < count; ++i) {
      imgs.emplace_back(shape, std::vector<double>(images + i * px, images + (i + 1) * px));
    }
    if (count == 0) return OTFACE_OK;
    const Tensor e = trainer::embed(model->ck.params, imgs, b);
    std::copy(e.data().begin(), e.data().end(), embeddings);
    return OTFACE_OK;
  });
}

void otface_model_free(otface_model* model) { delete model; }

// ---- verification -------------------------------------------------------------

otface_status otface_eval_model(const otface_model* model, const char* data_root,
                                const otface_config* eval_cfg, otface_report** out) {
  return guard([&] {
    REQUIRE_ARG(model);
    REQUIRE_ARG(data_root);
    REQUIRE_ARG(out);
    io::RunConfig cfg = model->ck.config;
    if (eval_cfg) cfg.eval = eval_cfg->cfg.eval;
    if (auto s = io::env_seed()) cfg.eval.seed = *s;
    const trainer::Dataset data = io::load_dataset(data_root);
    *out = new otface_report{io::evaluate_model(model->ck.params, cfg, data)};
    return OTFACE_OK;
  });
}

otface_status otface_eval_embeddings(const char* embeddings_csv, const char* pairs_csv,
                                     const char* labels_csv, std::size_t folds,
                                     const double* far_targets, std::size_t num_targets,
                                     otface_report** out) {
  return guard([&] {
    REQUIRE_ARG(embeddings_csv);
    REQUIRE_ARG(pairs_csv);
    REQUIRE_ARG(out);
    if (num_targets > 0) REQUIRE_ARG(far_targets);
    const io::CsvMatrix em = io::read_csv_matrix(embeddings_csv);
    const Tensor emb({em.rows, em.cols}, em.data);
    const eval::PairSet pairs = io::read_pairs_csv(pairs_csv, folds);
    const std::vector<double> scores = eval::pair_scores(emb, pairs);
    eval::VerificationReport rep = eval::kfold_accuracy(pairs, scores, folds);
    std::vector<bool> same;
    for (const auto& p : pairs.pairs) same.push_back(p.same);
    rep.tar_at_far = eval::tar_at_far(scores, same, {far_targets, num_targets});

    if (labels_csv) {
      const io::CsvMatrix lm = io::read_csv_matrix(labels_csv);
      if (lm.cols != 1 || lm.rows != em.rows) {
        throw DimensionError("labels file must hold one column with " + std::to_string(em.rows) +
                             " rows");
      }
      const std::size_t d = em.cols;
      std::vector<double> gal, prb;
      std::vector<std::size_t> gal_l, prb_l;
      std::vector<std::size_t> seen;
      for (std::size_t i = 0; i < em.rows; ++i) {
        const double lv = lm.data[i];
        if (lv < 0 || lv != static_cast<double>(static_cast<std::size_t>(lv))) {
          throw ParseError("label row " + std::to_string(i + 1) + " is not a nonnegative integer");
        }
        const auto l = static_cast<std::size_t>(lv);
        const bool first = std::find(seen.begin(), seen.end(), l) == seen.end();
        if (first) seen.push_back(l);
        auto& dst = first ? gal : prb;
        (first ? gal_l : prb_l).push_back(l);
        dst.insert(dst.end(), em.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                   em.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      }
      if (!prb_l.empty()) {
        rep.rank1 = eval::rank1_identification(Tensor({prb_l.size(), d}, std::move(prb)), prb_l,
                                               Tensor({gal_l.size(), d}, std::move(gal)), gal_l);
      }
    }
    *out = new otface_report{std::move(rep)};
    return OTFACE_OK;
  });
}

otface_status otface_report_mean_accuracy(const otface_report* rep, double* out) {
  return guard([&] {
    REQUIRE_ARG(rep);
    REQUIRE_ARG(out);
    *out = rep->rep.mean_accuracy;
    return OTFACE_OK;
  });
}

otface_status otface_report_rank1(const otface_report* rep, double* out, int* available) {
  return guard([&] {
    REQUIRE_ARG(rep);
    REQUIRE_ARG(out);
    REQUIRE_ARG(available);
    *available = rep->rep.rank1.has_value() ? 1 : 0;
    *out = rep->rep.rank1.value_or(0.0);
    return OTFACE_OK;
  });
}

otface_status otface_report_write(const otface_report* rep, const char* jsonl_path,
                                  const char* csv_path, const char* roc_path) {
  return guard([&] {
    REQUIRE_ARG(rep);
    if (jsonl_path) io::atomic_write(jsonl_path, io::report_jsonl(rep->rep));
    if (csv_path) io::atomic_write(csv_path, io::report_csv(rep->rep));
    if (roc_path) io::atomic_write(roc_path, io::roc_csv(rep->rep.roc));
    return OTFACE_OK;
  });
}

void otface_report_free(otface_report* rep) { delete rep; }

otface_status otface_kfold_accuracy(const double* scores, const int* same, const std::size_t* folds,
                                    std::size_t n, std::size_t k, double* mean_accuracy,
                                    double* fold_accuracy) {
  return guard([&] {
    REQUIRE_ARG(scores);
    REQUIRE_ARG(same);
    REQUIRE_ARG(folds);
    REQUIRE_ARG(mean_accuracy);
    const auto flags = flags_of(same, n);
    eval::PairSet ps;
    ps.folds = k;
    for (std::size_t i = 0; i < n; ++i) ps.pairs.push_back({0, 0, flags[i], folds[i]});
    const auto rep = eval::kfold_accuracy(ps, {scores, n}, k);
    *mean_accuracy = rep.mean_accuracy;
    if (fold_accuracy) std::copy(rep.fold_accuracy.begin(), rep.fold_accuracy.end(), fold_accuracy);
    return OTFACE_OK;
  });
}

otface_status otface_tar_at_far(const double* scores, const int* same, std::size_t n,
                                const double* far_targets, std::size_t num_targets, double* tar,
                                int* attainable) {
  return guard([&] {
    REQUIRE_ARG(scores);
    REQUIRE_ARG(same);
    REQUIRE_ARG(far_targets);
    REQUIRE_ARG(tar);
    REQUIRE_ARG(attainable);
    const auto res = eval::tar_at_far({scores, n}, flags_of(same, n), {far_targets, num_targets});
    for (std::size_t i = 0; i < res.size(); ++i) {
      tar[i] = res[i].tar;
      attainable[i] = res[i].attainable ? 1 : 0;
    }
    return OTFACE_OK;
  });
}

otface_status otface_rank1(const double* probes, const std::size_t* probe_labels,
                           std::size_t num_probes, const double* gallery,
                           const std::size_t* gallery_labels, std::size_t num_gallery,
                           std::size_t d, double* accuracy) {
  return guard([&] {
    REQUIRE_ARG(probes);
    REQUIRE_ARG(probe_labels);
    REQUIRE_ARG(gallery);
    REQUIRE_ARG(gallery_labels);
    REQUIRE_ARG(accuracy);
    *accuracy = eval::rank1_identification(
        Tensor({num_probes, d}, std::vector<double>(probes, probes + num_probes * d)),
        std::vector<std::size_t>(probe_labels, probe_labels + num_probes),
        Tensor({num_gallery, d}, std::vector<double>(gallery, gallery + num_gallery * d)),
        std::vector<std::size_t>(gallery_labels, gallery_labels + num_gallery));
    return OTFACE_OK;
  });
}

}  // extern "C"

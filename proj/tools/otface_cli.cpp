// Command-line front end. Talks to the library only through otface.h.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "otface/otface.h"

namespace {

struct CliFailure {
  otface_status status;
  std::string message;
};

void check(otface_status s) {
  if (s != OTFACE_OK) throw CliFailure{s, otface_last_error()};
}

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
};

Matrix read_csv(const std::string& path) {
  Matrix m;
  check(otface_read_csv(path.c_str(), nullptr, 0, &m.rows, &m.cols));
  m.values.resize(m.rows * m.cols);
  check(otface_read_csv(path.c_str(), m.values.data(), m.values.size(), &m.rows, &m.cols));
  return m;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Temp file plus rename, so readers never see a half-written output.
void write_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out.flush()) throw CliFailure{OTFACE_ERR_IO, "cannot write " + tmp};
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CliFailure{OTFACE_ERR_IO, "cannot rename " + tmp + ": " + ec.message()};
}

class Config {
 public:
  Config(const std::string& path, const std::vector<std::string>& overrides) {
    check(path.empty() ? otface_config_new(&h_) : otface_config_load(path.c_str(), &h_));
    for (const auto& o : overrides) check(otface_config_set(h_, o.c_str()));
  }
  ~Config() { otface_config_free(h_); }
  Config(const Config&) = delete;
  Config& operator=(const Config&) = delete;

  std::string get(const std::string& key) const {
    std::size_t n = 0;
    check(otface_config_get(h_, key.c_str(), nullptr, 0, &n));
    std::string s(n, '\0');
    check(otface_config_get(h_, key.c_str(), s.data(), n, &n));
    s.resize(n - 1);
    return s;
  }
  otface_config* handle() const { return h_; }

 private:
  otface_config* h_ = nullptr;
};

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty()) out.push_back(std::stod(cell));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"otface: optimal-transport-regularized margin training toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", otface_version());

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config_opts = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "RunConfig file")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override a config key (section.key=value)");
  };

  // train
  auto* train = app.add_subcommand("train", "Train a backbone and write metrics and checkpoints");
  add_config_opts(train);
  std::string data_dir, out_dir;
  bool quiet = false;
  train->add_option("--data", data_dir, "Dataset directory (with manifest.txt)")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_flag("--quiet", quiet, "Do not print per-epoch metrics");

  // eval
  auto* evalc = app.add_subcommand("eval", "Verification report from a checkpoint or embeddings");
  add_config_opts(evalc);
  std::string ckpt, eval_data, emb_csv, pairs_csv, labels_csv, eval_out, far_list;
  std::size_t folds = 0;
  evalc->add_option("--checkpoint", ckpt, "Model checkpoint")->check(CLI::ExistingFile);
  evalc->add_option("--data", eval_data, "Dataset directory to embed (with --checkpoint)");
  evalc->add_option("--embeddings", emb_csv, "Embedding rows CSV")->check(CLI::ExistingFile);
  evalc->add_option("--pairs", pairs_csv, "Pairs CSV a,b,same,fold")->check(CLI::ExistingFile);
  evalc->add_option("--labels", labels_csv, "Per-row labels CSV, enables rank-1")
      ->check(CLI::ExistingFile);
  evalc->add_option("--folds", folds, "Fold count (default: eval.folds)");
  evalc->add_option("--far", far_list, "Comma-separated FAR targets (default: eval.far_targets)");
  evalc->add_option("--out", eval_out, "Directory for report.jsonl, report.csv and roc.csv");

  // ot solve
  auto* otc = app.add_subcommand("ot", "Optimal transport utilities");
  otc->require_subcommand(1);
  auto* solve = otc->add_subcommand("solve", "Entropic OT between uniform marginals");
  std::string cost_csv, plan_out;
  double epsilon = 0.01, tol = 1e-6;
  std::size_t max_iters = 200;
  bool log_domain = false, eps_scaling = false;
  solve->add_option("--cost", cost_csv, "Square cost matrix CSV")->required()->check(CLI::ExistingFile);
  solve->add_option("--epsilon", epsilon, "Entropic regularization")->required();
  solve->add_flag("--log-domain", log_domain, "Use the log-domain solver");
  solve->add_flag("--epsilon-scaling", eps_scaling,
                  "Anneal epsilon down from the cost range with warm starts");
  solve->add_option("--max-iters", max_iters, "Iteration budget (per stage with --epsilon-scaling)");
  solve->add_option("--tol", tol, "Marginal tolerance");
  solve->add_option("--plan", plan_out, "Write the plan as CSV");
  bool exact = false;
  solve->add_flag("--exact", exact, "Also print the exact value (n <= 8)");

  // mine
  auto* mine = app.add_subcommand("mine", "Enumerate hard (anchor, positive, negative) groups");
  std::string mine_emb, mine_labels, mine_out;
  std::size_t cap = 0;
  mine->add_option("--embeddings", mine_emb, "Embedding rows CSV")->required()->check(CLI::ExistingFile);
  mine->add_option("--labels", mine_labels, "Labels CSV, one per row")->required()->check(CLI::ExistingFile);
  mine->add_option("--cap", cap, "Groups kept per anchor (0 = all)");
  mine->add_option("--out", mine_out, "Write groups CSV here instead of stdout");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  otface_synthetic_spec spec;
  otface_synthetic_spec_default(&spec);
  std::string gen_out, encoding = "f32";
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--classes", spec.num_classes, "Number of classes")->capture_default_str();
  gen->add_option("--per-class", spec.per_class, "Samples per class")->capture_default_str();
  gen->add_option("--hardness", spec.hardness, "Hardness in [0, 1]")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Seed (OTFACE_SEED overrides)")->capture_default_str();
  gen->add_option("--image-size", spec.image_size, "Square image extent")->capture_default_str();
  gen->add_option("--encoding", encoding, "f32 or u8")->check(CLI::IsMember({"f32", "u8"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) {
      Config cfg(config_path, overrides);
      struct Ctx {
        bool quiet;
      } ctx{quiet};
      auto cb = [](const otface_epoch_metrics* m, void* user) {
        if (static_cast<Ctx*>(user)->quiet) return;
        std::printf("epoch %zu margin_loss %.6f ot_loss %.6f total %.6f hard_groups %zu lr %g\n",
                    m->epoch, m->margin_loss, m->ot_loss, m->total, m->hard_groups, m->lr);
        std::fflush(stdout);
      };
      check(otface_train(cfg.handle(), data_dir.c_str(), out_dir.c_str(), cb, &ctx));
      std::printf("wrote %s/metrics.csv and %s/model.ckpt\n", out_dir.c_str(), out_dir.c_str());
    } else if (evalc->parsed()) {
      Config cfg(config_path, overrides);
      otface_report* rep = nullptr;
      if (!ckpt.empty()) {
        if (eval_data.empty()) throw CliFailure{OTFACE_ERR_INVALID_ARGUMENT, "--checkpoint needs --data"};
        otface_model* model = nullptr;
        check(otface_model_load(ckpt.c_str(), &model));
        // Only eval.* keys from --config/--set reach the checkpoint's settings.
        const bool has_eval_cfg = !config_path.empty() || !overrides.empty();
        const otface_status s =
            otface_eval_model(model, eval_data.c_str(), has_eval_cfg ? cfg.handle() : nullptr, &rep);
        otface_model_free(model);
        check(s);
      } else if (!emb_csv.empty() && !pairs_csv.empty()) {
        const std::size_t k = folds ? folds : std::stoul(cfg.get("eval.folds"));
        const std::vector<double> fars = parse_list(far_list.empty() ? cfg.get("eval.far_targets") : far_list);
        check(otface_eval_embeddings(emb_csv.c_str(), pairs_csv.c_str(),
                                     labels_csv.empty() ? nullptr : labels_csv.c_str(), k,
                                     fars.data(), fars.size(), &rep));
      } else {
        throw CliFailure{OTFACE_ERR_INVALID_ARGUMENT,
                         "eval needs --checkpoint with --data, or --embeddings with --pairs"};
      }
      double acc = 0.0, rank1 = 0.0;
      int have_rank1 = 0;
      otface_report_mean_accuracy(rep, &acc);
      otface_report_rank1(rep, &rank1, &have_rank1);
      std::printf("mean_accuracy %s\n", fmt(acc).c_str());
      if (have_rank1) std::printf("rank1 %s\n", fmt(rank1).c_str());
      otface_status s = OTFACE_OK;
      if (!eval_out.empty()) {
        std::filesystem::create_directories(eval_out);
        const std::string base = eval_out + "/";
        s = otface_report_write(rep, (base + "report.jsonl").c_str(), (base + "report.csv").c_str(),
                                (base + "roc.csv").c_str());
      } else {
        s = otface_report_write(rep, nullptr, nullptr, nullptr);
      }
      otface_report_free(rep);
      check(s);
      if (!eval_out.empty()) std::printf("wrote %s/report.jsonl, report.csv, roc.csv\n", eval_out.c_str());
    } else if (solve->parsed()) {
      const Matrix c = read_csv(cost_csv);
      if (c.rows != c.cols) {
        throw CliFailure{OTFACE_ERR_DIMENSION, "cost matrix must be square, got " +
                                                   std::to_string(c.rows) + "x" + std::to_string(c.cols)};
      }
      std::vector<double> plan(c.rows * c.cols);
      otface_ot_result r{};
      check(otface_ot_solve(c.values.data(), c.rows, epsilon,
                            (log_domain ? OTFACE_OT_LOG_DOMAIN : 0u) |
                                (eps_scaling ? OTFACE_OT_EPSILON_SCALING : 0u),
                            max_iters, tol,
                            plan.data(), &r));
      std::printf("value %s\niterations %zu\nmarginal_violation %s\nconverged %s\n",
                  fmt(r.value).c_str(), r.iterations, fmt(r.marginal_violation).c_str(),
                  r.converged ? "true" : "false");
      if (exact) {
        double v = 0.0;
        check(otface_ot_exact(c.values.data(), c.rows, &v));
        std::printf("exact_value %s\n", fmt(v).c_str());
      }
      if (!plan_out.empty()) {
        std::string text;
        for (std::size_t i = 0; i < c.rows; ++i) {
          for (std::size_t j = 0; j < c.cols; ++j) {
            text += fmt(plan[i * c.cols + j]) + (j + 1 < c.cols ? "," : "\n");
          }
        }
        write_file(plan_out, text);
      }
    } else if (mine->parsed()) {
      const Matrix e = read_csv(mine_emb);
      const Matrix l = read_csv(mine_labels);
      if (l.cols != 1 || l.rows != e.rows) {
        throw CliFailure{OTFACE_ERR_DIMENSION, "labels must be one column with " +
                                                   std::to_string(e.rows) + " rows"};
      }
      std::vector<std::int64_t> labels;
      for (double v : l.values) {
        if (v != std::floor(v)) throw CliFailure{OTFACE_ERR_PARSE, "labels must be integers"};
        labels.push_back(static_cast<std::int64_t>(v));
      }
      std::size_t count = 0;
      check(otface_mine(e.values.data(), e.rows, e.cols, labels.data(), cap, nullptr, 0, &count));
      std::vector<otface_group> groups(count);
      check(otface_mine(e.values.data(), e.rows, e.cols, labels.data(), cap, groups.data(),
                        groups.size(), &count));
      std::string text = "anchor,positive,negative\n";
      for (const auto& g : groups) {
        text += std::to_string(g.anchor) + "," + std::to_string(g.positive) + "," +
                std::to_string(g.negative) + "\n";
      }
      if (mine_out.empty()) {
        std::fputs(text.c_str(), stdout);
      } else {
        write_file(mine_out, text);
      }
      std::fprintf(stderr, "hard_groups %zu\n", count);
    } else if (gen->parsed()) {
      if (const char* s = std::getenv("OTFACE_SEED"); s && *s) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(s, &end, 10);
        if (*end != '\0') throw CliFailure{OTFACE_ERR_PARSE, std::string("OTFACE_SEED is not an integer: ") + s};
        spec.seed = v;
      }
      spec.uint8_encoding = encoding == "u8" ? 1 : 0;
      check(otface_generate_synthetic(&spec, gen_out.c_str()));
      std::printf("wrote %zu samples to %s\n", spec.num_classes * spec.per_class, gen_out.c_str());
    }
  } catch (const CliFailure& f) {
    std::fprintf(stderr, "otface: %s: %s\n", otface_status_name(f.status), f.message.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "otface: error: %s\n", e.what());
    return 1;
  }
  return 0;
}

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "otface/io.hpp"

namespace otface::io {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE) {
    throw ParseError("key '" + key + "': expected a number, got '" + v + "'");
  }
  return d;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
    throw ParseError("key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

bool parse_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ParseError("key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += fmt(xs[i]);
  }
  return out;
}

struct KeySpec {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

template <class Wrap>
auto wrap_config_errors(Wrap&& fn) {
  return [fn = std::forward<Wrap>(fn)](RunConfig& c, const std::string& k, const std::string& v) {
    try {
      fn(c, k, v);
    } catch (const ConfigError& e) {
      throw ParseError("key '" + k + "': " + e.what());
    }
  };
}

#define SIZE_KEY(name, field)                                                          \
  {name,                                                                               \
   {[](const RunConfig& c) { return std::to_string(c.field); },                        \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_size(k, v); }}}
#define U64_KEY(name, field)                                                           \
  {name,                                                                               \
   {[](const RunConfig& c) { return std::to_string(c.field); },                        \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_u64(k, v); }}}
#define DOUBLE_KEY(name, field)                                                        \
  {name,                                                                               \
   {[](const RunConfig& c) { return fmt_double(c.field); },                            \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }}}
#define BOOL_KEY(name, field)                                                          \
  {name,                                                                               \
   {[](const RunConfig& c) { return std::string(c.field ? "true" : "false"); },        \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }}}

const std::map<std::string, KeySpec>& registry() {
  static const std::map<std::string, KeySpec> keys = {
      SIZE_KEY("backbone.input_size", backbone.input_size),
      SIZE_KEY("backbone.in_channels", backbone.in_channels),
      {"backbone.stage_channels",
       {[](const RunConfig& c) {
          return join(c.backbone.stage_channels, [](std::size_t x) { return std::to_string(x); });
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          std::vector<std::size_t> out;
          for (const auto& s : split_list(v)) out.push_back(parse_size(k, s));
          if (out.empty()) throw ParseError("key '" + k + "': empty channel list");
          c.backbone.stage_channels = out;
        }}},
      SIZE_KEY("backbone.embedding_dim", backbone.embedding_dim),
      SIZE_KEY("backbone.tap_stage", backbone.tap_stage),
      SIZE_KEY("backbone.stem_kernel", backbone.stem_kernel),
      SIZE_KEY("backbone.down_kernel", backbone.down_kernel),

      {"margin.variant",
       {[](const RunConfig& c) { return std::string(losses::variant_name(c.loss.margin.variant)); },
        wrap_config_errors([](RunConfig& c, const std::string&, const std::string& v) {
          c.loss.margin.variant = losses::parse_variant(trim(v));
        })}},
      {"margin.scale",
       {[](const RunConfig& c) {
          return c.margin_scale ? fmt_double(*c.margin_scale) : std::string("auto");
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (trim(v) == "auto") c.margin_scale.reset(); else c.margin_scale = parse_double(k, v);
        }}},
      {"margin.margin",
       {[](const RunConfig& c) {
          return c.margin_margin ? fmt_double(*c.margin_margin) : std::string("auto");
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (trim(v) == "auto") c.margin_margin.reset(); else c.margin_margin = parse_double(k, v);
        }}},
      {"margin.reweight",
       {[](const RunConfig& c) { return std::string(losses::reweight_name(c.loss.reweight)); },
        wrap_config_errors([](RunConfig& c, const std::string&, const std::string& v) {
          c.loss.reweight = losses::parse_reweight(trim(v));
        })}},
      DOUBLE_KEY("margin.focal_gamma", loss.focal_gamma),
      DOUBLE_KEY("margin.keep_fraction", loss.keep_fraction),

      DOUBLE_KEY("sinkhorn.epsilon", loss.sinkhorn.epsilon),
      SIZE_KEY("sinkhorn.max_iters", loss.sinkhorn.max_iters),
      DOUBLE_KEY("sinkhorn.marginal_tol", loss.sinkhorn.marginal_tol),
      BOOL_KEY("sinkhorn.log_domain", loss.sinkhorn.log_domain),
      SIZE_KEY("sinkhorn.unroll_iters", loss.sinkhorn.unroll_iters),
      BOOL_KEY("sinkhorn.include_entropy", loss.sinkhorn.include_entropy),

      BOOL_KEY("mining.enabled", loss.mining),
      {"mining.cap_per_anchor",
       {[](const RunConfig& c) {
          return std::to_string(c.loss.cap_per_anchor ? *c.loss.cap_per_anchor : 0);
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          const std::size_t cap = parse_size(k, v);
          if (cap == 0) c.loss.cap_per_anchor.reset(); else c.loss.cap_per_anchor = cap;
        }}},

      DOUBLE_KEY("loss.hinge_margin", loss.hinge_margin),
      DOUBLE_KEY("loss.lambda_ot", loss.lambda_ot),

      SIZE_KEY("trainer.batch_size", trainer.batch_size),
      SIZE_KEY("trainer.epochs", trainer.epochs),
      DOUBLE_KEY("trainer.lr", trainer.lr),
      DOUBLE_KEY("trainer.momentum", trainer.momentum),
      DOUBLE_KEY("trainer.weight_decay", trainer.weight_decay),
      {"trainer.lr_milestones",
       {[](const RunConfig& c) {
          return join(c.trainer.lr_milestones, [](std::size_t x) { return std::to_string(x); });
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          std::vector<std::size_t> out;
          for (const auto& s : split_list(v)) out.push_back(parse_size(k, s));
          c.trainer.lr_milestones = out;
        }}},
      {"trainer.sampler",
       {[](const RunConfig& c) { return std::string(trainer::sampler_name(c.trainer.sampler)); },
        wrap_config_errors([](RunConfig& c, const std::string&, const std::string& v) {
          c.trainer.sampler = trainer::parse_sampler(trim(v));
        })}},
      SIZE_KEY("trainer.samples_per_class", trainer.samples_per_class),
      U64_KEY("trainer.seed", trainer.seed),
      SIZE_KEY("trainer.checkpoint_every", trainer.checkpoint_every),

      SIZE_KEY("eval.folds", eval.folds),
      SIZE_KEY("eval.pairs_per_fold", eval.pairs_per_fold),
      {"eval.far_targets",
       {[](const RunConfig& c) { return join(c.eval.far_targets, fmt_double); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          std::vector<double> out;
          for (const auto& s : split_list(v)) out.push_back(parse_double(k, s));
          c.eval.far_targets = out;
        }}},
      U64_KEY("eval.seed", eval.seed),
  };
  return keys;
}

#undef SIZE_KEY
#undef U64_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY

}  // namespace

losses::LossConfig RunConfig::resolved_loss() const {
  losses::LossConfig out = loss;
  const auto defaults = losses::MarginConfig::defaults_for(loss.margin.variant);
  out.margin.scale = margin_scale.value_or(defaults.scale);
  out.margin.margin = margin_margin.value_or(defaults.margin);
  return out;
}

void RunConfig::validate() const {
  backbone.validate();
  resolved_loss().validate();
  trainer.validate();
  if (eval.folds < 2) throw ConfigError("eval.folds must be at least 2");
  if (eval.pairs_per_fold == 0) throw ConfigError("eval.pairs_per_fold must be positive");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& reg = registry();
  const auto it = reg.find(key);
  if (it == reg.end()) throw ParseError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ParseError("expected key=value, got '" + assignment + "'");
  }
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, spec] : registry()) out.push_back(k);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out = "# otface run config\n";
  for (const auto& [k, spec] : registry()) out += k + " = " + spec.get(*this) + "\n";
  return out;
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ParseError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    try {
      cfg.set(key, line.substr(eq + 1));
    } catch (const ParseError& e) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const fs::path& path) {
  return from_text(read_file(path), path.string());
}

void RunConfig::save(const fs::path& path) const { atomic_write(path, to_text()); }

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("OTFACE_SEED");
  if (!s || !*s) return std::nullopt;
  return parse_u64("OTFACE_SEED", s);
}

void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace otface::io

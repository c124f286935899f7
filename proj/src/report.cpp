#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "otface/io.hpp"

namespace otface::io {

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

// JSON numbers cannot carry +inf; thresholds at +inf become null.
nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

std::string metrics_csv(const std::vector<trainer::EpochMetrics>& history) {
  std::string out = "epoch,margin_loss,ot_loss,total,hard_groups,lr\n";
  for (const auto& m : history) {
    out += std::to_string(m.epoch) + "," + g17(m.margin_loss) + "," + g17(m.ot_loss) + "," +
           g17(m.total) + "," + std::to_string(m.hard_groups) + "," + g17(m.lr) + "\n";
  }
  return out;
}

std::string report_jsonl(const eval::VerificationReport& rep) {
  std::string out;
  for (std::size_t f = 0; f < rep.fold_accuracy.size(); ++f) {
    nlohmann::json j{{"record", "fold"},
                     {"fold", f},
                     {"accuracy", rep.fold_accuracy[f]},
                     {"threshold", finite_or_null(rep.fold_threshold[f])}};
    out += j.dump() + "\n";
  }
  out += nlohmann::json{{"record", "summary"},
                        {"folds", rep.fold_accuracy.size()},
                        {"mean_accuracy", rep.mean_accuracy},
                        {"roc_points", rep.roc.size()}}
             .dump() +
         "\n";
  for (const auto& t : rep.tar_at_far) {
    nlohmann::json j{{"record", "tar_at_far"},
                     {"far_target", t.far_target},
                     {"attainable", t.attainable}};
    if (t.attainable) {
      j["tar"] = t.tar;
      j["threshold"] = finite_or_null(t.threshold);
      j["achieved_far"] = t.achieved_far;
    } else {
      j["tar"] = nullptr;
    }
    out += j.dump() + "\n";
  }
  if (rep.rank1) out += nlohmann::json{{"record", "rank1"}, {"accuracy", *rep.rank1}}.dump() + "\n";
  return out;
}

std::string report_csv(const eval::VerificationReport& rep) {
  std::string out = "record,key,value\n";
  for (std::size_t f = 0; f < rep.fold_accuracy.size(); ++f) {
    out += "fold_accuracy," + std::to_string(f) + "," + g17(rep.fold_accuracy[f]) + "\n";
    out += "fold_threshold," + std::to_string(f) + "," + g17(rep.fold_threshold[f]) + "\n";
  }
  out += "mean_accuracy,," + g17(rep.mean_accuracy) + "\n";
  for (const auto& t : rep.tar_at_far) {
    out += "tar_at_far," + g17(t.far_target) + "," + (t.attainable ? g17(t.tar) : "") + "\n";
  }
  if (rep.rank1) out += "rank1,," + g17(*rep.rank1) + "\n";
  return out;
}

std::string roc_csv(const std::vector<eval::RocPoint>& roc) {
  std::string out = "far,tar\n";
  for (const auto& p : roc) out += g17(p.far) + "," + g17(p.tar) + "\n";
  return out;
}

CsvMatrix read_csv_matrix(const fs::path& path) {
  std::istringstream in(read_file(path));
  CsvMatrix m;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(trim(line));
    std::vector<double> row;
    bool numeric = true;
    for (const auto& c : cells) {
      double v;
      if (!parse_number(c, v)) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;  // header
      }
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": non-numeric cell");
    }
    first = false;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (!std::isfinite(row[c])) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": column " +
                         std::to_string(c + 1) + " is not finite");
      }
    }
    if (m.rows == 0) {
      m.cols = row.size();
    } else if (row.size() != m.cols) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(m.cols) + " columns, got " + std::to_string(row.size()));
    }
    m.data.insert(m.data.end(), row.begin(), row.end());
    ++m.rows;
  }
  if (m.rows == 0) throw ParseError(path.string() + ": no data rows");
  return m;
}

eval::PairSet read_pairs_csv(const fs::path& path, std::size_t folds) {
  const CsvMatrix m = read_csv_matrix(path);
  if (m.cols != 4) {
    throw ParseError(path.string() + ": pairs need 4 columns (a,b,same,fold), got " +
                     std::to_string(m.cols));
  }
  eval::PairSet ps;
  ps.folds = folds;
  auto as_index = [&](double v, std::size_t row, const char* col) {
    if (v < 0 || v != std::floor(v)) {
      throw ParseError(path.string() + ": row " + std::to_string(row + 1) + ": " + col +
                       " must be a nonnegative integer");
    }
    return static_cast<std::size_t>(v);
  };
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = &m.data[r * 4];
    if (row[2] != 0.0 && row[2] != 1.0) {
      throw ParseError(path.string() + ": row " + std::to_string(r + 1) + ": same must be 0 or 1");
    }
    ps.pairs.push_back({as_index(row[0], r, "a"), as_index(row[1], r, "b"), row[2] == 1.0,
                        as_index(row[3], r, "fold")});
  }
  return ps;
}

std::string pairs_csv(const eval::PairSet& pairs) {
  std::string out = "a,b,same,fold\n";
  for (const auto& p : pairs.pairs) {
    out += std::to_string(p.a) + "," + std::to_string(p.b) + "," + (p.same ? "1" : "0") + "," +
           std::to_string(p.fold) + "\n";
  }
  return out;
}

}  // namespace otface::io

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "otface/backbone.hpp"
#include "otface/eval.hpp"
#include "otface/losses.hpp"
#include "otface/trainer.hpp"

namespace otface::io {

namespace fs = std::filesystem;

struct EvalSettings {
  std::size_t folds = 10;
  std::size_t pairs_per_fold = 30;  // same pairs; as many different pairs
  std::vector<double> far_targets{1e-3, 1e-2, 1e-1};
  std::uint64_t seed = 7;
};

// Every tunable of a run. Text form is one `section.key = value` per line
// (or `key = value` under a `[section]` header); '#' starts a comment.
struct RunConfig {
  backbone::BackboneConfig backbone;
  losses::LossConfig loss;
  // Unset means the variant's conventional value (see MarginConfig).
  std::optional<double> margin_scale;
  std::optional<double> margin_margin;
  trainer::TrainConfig trainer;
  EvalSettings eval;

  // Loss config with margin defaults resolved against the variant.
  losses::LossConfig resolved_loss() const;
  void validate() const;

  // Applies `key=value`; throws ParseError on unknown keys or bad values.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  static RunConfig from_text(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const fs::path& path);
  void save(const fs::path& path) const;

  static std::vector<std::string> keys();
  friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.to_text() == b.to_text(); }
};

// Seed override from OTFACE_SEED, if set and valid.
std::optional<std::uint64_t> env_seed();

// Writes to a sibling temp file, then renames over `path`.
void atomic_write(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

// ---------------------------------------------------------------------------
// Datasets

enum class ImageEncoding { kFloat32, kUint8 };

struct DatasetManifest {
  fs::path root;
  ImageEncoding encoding = ImageEncoding::kFloat32;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  struct Entry {
    std::string id;
    std::string file;  // relative to root
    std::size_t label = 0;
  };
  std::vector<Entry> entries;
};

inline constexpr const char* kManifestName = "manifest.txt";

void write_manifest(const DatasetManifest& m);
// Parses and validates the manifest (files exist with the declared size,
// labels contiguous).
DatasetManifest read_manifest(const fs::path& root);
Tensor read_image(const DatasetManifest& m, const DatasetManifest::Entry& e);
void write_image(const DatasetManifest& m, const DatasetManifest::Entry& e, const Tensor& image);
trainer::Dataset load_dataset(const fs::path& root);

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 100;
  double hardness = 0.5;  // [0, 1]
  std::uint64_t seed = 0;  // class prototypes
  // Per-sample perturbations; unset reuses `seed`. A second draw with the
  // same prototypes gives held-out images of the same identities.
  std::optional<std::uint64_t> sample_seed;
  std::size_t image_size = 16;
  ImageEncoding encoding = ImageEncoding::kFloat32;
};

// Images from class prototypes. Hardness scales both the cross-class blending
// and the within-class perturbation; hardness 0 reproduces the prototypes.
trainer::Dataset generate_synthetic(const SyntheticSpec& spec);
DatasetManifest write_synthetic(const SyntheticSpec& spec, const fs::path& root);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   char[8]  "OTFACECK"
//   u32      version (= 1)
//   u32      config byte count, then the RunConfig text
//   u64      completed epochs
//   u32      tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 extents[rank],
//               f64 data[product(extents)]

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  backbone::Parameters params;
  std::uint64_t epoch = 0;
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ck, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

// ---------------------------------------------------------------------------
// Metrics, reports and CSV helpers

// Header `epoch,margin_loss,ot_loss,total,hard_groups,lr`; doubles in %.17g.
std::string metrics_csv(const std::vector<trainer::EpochMetrics>& history);

// JSON lines: one object per fold, then summary, tar_at_far and rank1 records.
std::string report_jsonl(const eval::VerificationReport& rep);
// Same content as rows `record,key,value`; unattainable TAR is left empty.
std::string report_csv(const eval::VerificationReport& rep);
// Two columns `far,tar`, FAR ascending.
std::string roc_csv(const std::vector<eval::RocPoint>& roc);

// Numeric CSV; a non-numeric first row is treated as a header and skipped.
struct CsvMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
};
CsvMatrix read_csv_matrix(const fs::path& path);
// Pairs CSV with columns a,b,same,fold (header optional).
eval::PairSet read_pairs_csv(const fs::path& path, std::size_t folds);
std::string pairs_csv(const eval::PairSet& pairs);

// ---------------------------------------------------------------------------
// Runs

using EpochCallback = std::function<void(const trainer::EpochMetrics&)>;

struct TrainResult {
  trainer::TrainState state;
  fs::path metrics_path;
  fs::path checkpoint_path;
};

// Trains on the dataset under `data_root`; writes metrics.csv, model.ckpt and
// periodic epoch<k>.ckpt files into `out_dir`.
TrainResult run_training(const RunConfig& cfg, const fs::path& data_root, const fs::path& out_dir,
                         const EpochCallback& on_epoch = {});

// Embeds the dataset with the checkpoint's backbone, draws balanced pairs per
// fold, and reports k-fold accuracy, TAR@FAR and rank-1 (one gallery image per
// class, the rest probes).
eval::VerificationReport evaluate_model(const backbone::Parameters& params,
                                        const RunConfig& cfg, const trainer::Dataset& data);

}  // namespace otface::io

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "otface/io.hpp"

namespace otface::io {

namespace {

static_assert(std::endian::native == std::endian::little, "image files are little-endian");

const char* encoding_name(ImageEncoding e) { return e == ImageEncoding::kFloat32 ? "f32" : "u8"; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::size_t image_bytes(const DatasetManifest& m) {
  const std::size_t px = m.channels * m.height * m.width;
  return m.encoding == ImageEncoding::kFloat32 ? px * sizeof(float) : px;
}

}  // namespace

void write_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# otface dataset manifest\n"
     << "version = 1\n"
     << "encoding = " << encoding_name(m.encoding) << "\n"
     << "channels = " << m.channels << "\n"
     << "height = " << m.height << "\n"
     << "width = " << m.width << "\n"
     << "classes = " << m.num_classes << "\n"
     << "samples:\n"
     << "id,file,label\n";
  for (const auto& e : m.entries) os << e.id << "," << e.file << "," << e.label << "\n";
  atomic_write(m.root / kManifestName, os.str());
}

DatasetManifest read_manifest(const fs::path& root) {
  const fs::path path = root / kManifestName;
  std::istringstream in(read_file(path));
  DatasetManifest m;
  m.root = root;
  std::string line;
  std::size_t lineno = 0;
  bool in_samples = false, saw_header = false;
  auto fail = [&](const std::string& msg) -> void {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto to_size = [&](const std::string& v) {
    try {
      std::size_t pos = 0;
      const unsigned long long x = std::stoull(v, &pos);
      if (pos != v.size()) fail("expected an integer, got '" + v + "'");
      return static_cast<std::size_t>(x);
    } catch (const std::logic_error&) {
      fail("expected an integer, got '" + v + "'");
    }
    return std::size_t{0};
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (!in_samples) {
      if (line == "samples:") {
        in_samples = true;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("expected key = value");
      const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
      if (key == "version") {
        if (val != "1") fail("unsupported manifest version " + val);
      } else if (key == "encoding") {
        if (val == "f32") m.encoding = ImageEncoding::kFloat32;
        else if (val == "u8") m.encoding = ImageEncoding::kUint8;
        else fail("unknown encoding '" + val + "' (expected f32 or u8)");
      } else if (key == "channels") {
        m.channels = to_size(val);
      } else if (key == "height") {
        m.height = to_size(val);
      } else if (key == "width") {
        m.width = to_size(val);
      } else if (key == "classes") {
        m.num_classes = to_size(val);
      } else {
        fail("unknown manifest key '" + key + "'");
      }
      continue;
    }
    if (!saw_header) {
      if (line != "id,file,label") fail("expected index header 'id,file,label'");
      saw_header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (cells.size() != 3) fail("expected 3 columns, got " + std::to_string(cells.size()));
    m.entries.push_back({cells[0], cells[1], to_size(cells[2])});
  }
  if (m.channels == 0 || m.height == 0 || m.width == 0) {
    throw ParseError(path.string() + ": channels, height and width must be declared");
  }
  if (m.entries.empty()) throw ParseError(path.string() + ": no samples");
  std::vector<bool> seen(m.num_classes, false);
  for (const auto& e : m.entries) {
    if (e.label >= m.num_classes) {
      throw ParseError(path.string() + ": sample '" + e.id + "' has label " +
                       std::to_string(e.label) + " outside 0.." +
                       std::to_string(m.num_classes ? m.num_classes - 1 : 0));
    }
    seen[e.label] = true;
    const fs::path f = root / e.file;
    std::error_code ec;
    const auto sz = fs::file_size(f, ec);
    if (ec) throw IoError("sample '" + e.id + "': missing image file " + f.string());
    if (sz != image_bytes(m)) {
      throw ParseError("sample '" + e.id + "': " + f.string() + " has " + std::to_string(sz) +
                       " bytes, expected " + std::to_string(image_bytes(m)));
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ParseError(path.string() + ": labels do not form a contiguous 0..C-1 range");
  }
  return m;
}

Tensor read_image(const DatasetManifest& m, const DatasetManifest::Entry& e) {
  const std::string bytes = read_file(m.root / e.file);
  if (bytes.size() != image_bytes(m)) {
    throw ParseError("image " + e.file + " has the wrong size");
  }
  Tensor img({m.channels, m.height, m.width});
  if (m.encoding == ImageEncoding::kFloat32) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
      if (!std::isfinite(f)) throw ParseError("image " + e.file + " contains a non-finite value");
      img[i] = f;
    }
  } else {
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / 255.0;
    }
  }
  return img;
}

void write_image(const DatasetManifest& m, const DatasetManifest::Entry& e, const Tensor& image) {
  if (image.size() != m.channels * m.height * m.width) {
    throw DimensionError("image " + shape_str(image.shape()) + " does not match the manifest");
  }
  std::string bytes(image_bytes(m), '\0');
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (m.encoding == ImageEncoding::kFloat32) {
      const auto f = static_cast<float>(image[i]);
      std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
    } else {
      const double v = std::clamp(image[i], 0.0, 1.0);
      bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
  }
  atomic_write(m.root / e.file, bytes);
}

trainer::Dataset load_dataset(const fs::path& root) {
  const DatasetManifest m = read_manifest(root);
  trainer::Dataset d;
  d.num_classes = m.num_classes;
  for (const auto& e : m.entries) {
    d.images.push_back(read_image(m, e));
    d.labels.push_back(e.label);
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

constexpr std::size_t kBlobsPerClass = 5;

// Sum of random Gaussian blobs, scaled to unit RMS.
Tensor make_prototype(std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(1.5, static_cast<double>(size) - 2.5);
  std::uniform_real_distribution<double> width(1.0, 2.5);
  std::uniform_real_distribution<double> amp(0.5, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor p({1, size, size});
  for (std::size_t b = 0; b < kBlobsPerClass; ++b) {
    const double cy = pos(rng), cx = pos(rng), w = width(rng);
    const double a = amp(rng) * (sign(rng) ? 1.0 : -1.0);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        p[y * size + x] += a * std::exp(-(dx * dx + dy * dy) / (2.0 * w * w));
      }
    }
  }
  double ss = 0.0;
  for (double v : p.data()) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(p.size()));
  for (double& v : p.data()) v /= rms;
  return p;
}

// Zero-filled translation by (dy, dx).
Tensor shifted(const Tensor& img, std::size_t size, int dy, int dx) {
  Tensor out(img.shape());
  const int n = static_cast<int>(size);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const int sy = y - dy, sx = x - dx;
      if (sy < 0 || sy >= n || sx < 0 || sx >= n) continue;
      out[static_cast<std::size_t>(y * n + x)] = img[static_cast<std::size_t>(sy * n + sx)];
    }
  }
  return out;
}

}  // namespace

trainer::Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (spec.per_class == 0) throw ConfigError("per_class must be positive");
  if (!(spec.hardness >= 0.0 && spec.hardness <= 1.0)) {
    throw ConfigError("hardness must lie in [0, 1]");
  }
  if (spec.image_size < 4) throw ConfigError("image_size must be at least 4");
  const double h = spec.hardness;
  const std::size_t s = spec.image_size;
  std::mt19937_64 rng(spec.seed);
  std::vector<Tensor> protos;
  for (std::size_t c = 0; c < spec.num_classes; ++c) protos.push_back(make_prototype(s, rng));

  const int max_shift = static_cast<int>(std::lround(2.0 * h));
  std::mt19937_64 draw(spec.sample_seed.value_or(spec.seed) * 0x9E3779B97F4A7C15ULL + 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-max_shift, max_shift);
  std::uniform_int_distribution<std::size_t> other(0, spec.num_classes - 2);
  std::normal_distribution<double> noise(0.0, 1.0);

  trainer::Dataset d;
  d.num_classes = spec.num_classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      // Blend toward a random other class, then perturb.
      std::size_t o = other(draw);
      if (o >= c) ++o;
      const double alpha = 0.5 * h * unit(draw);
      const double gain = 1.0 + 0.6 * h * (unit(draw) - 0.5);
      const int dy = shift(draw), dx = shift(draw);
      Tensor img({1, s, s});
      for (std::size_t i = 0; i < img.size(); ++i) {
        img[i] = gain * ((1.0 - alpha) * protos[c][i] + alpha * protos[o][i]);
      }
      if (dy != 0 || dx != 0) img = shifted(img, s, dy, dx);
      const double sigma = 0.6 * h;
      for (double& v : img.data()) {
        const double z = noise(draw);
        v = static_cast<double>(static_cast<float>(v + sigma * z));
      }
      d.images.push_back(std::move(img));
      d.labels.push_back(c);
    }
  }
  return d;
}

DatasetManifest write_synthetic(const SyntheticSpec& spec, const fs::path& root) {
  const trainer::Dataset d = generate_synthetic(spec);
  DatasetManifest m;
  m.root = root;
  m.encoding = spec.encoding;
  m.channels = 1;
  m.height = m.width = spec.image_size;
  m.num_classes = spec.num_classes;
  fs::create_directories(root / "images");
  for (std::size_t i = 0; i < d.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "s%06zu", i);
    DatasetManifest::Entry e{id, std::string("images/") + id + "." + encoding_name(spec.encoding),
                             d.labels[i]};
    write_image(m, e, d.images[i]);
    m.entries.push_back(std::move(e));
  }
  write_manifest(m);
  return m;
}

}  // namespace otface::io

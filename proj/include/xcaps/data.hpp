// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xcaps/ratings.hpp"
#include "xcaps/rng.hpp"

namespace xcaps::data {

static_assert(std::endian::native == std::endian::little,
              "dataset and checkpoint formats are little-endian");

inline constexpr std::size_t kPatchSize = 32;
inline constexpr std::size_t kPatchPixels = kPatchSize * kPatchSize;

// One 32x32 patch with its binary nodule mask and the rater panel.
struct SampleRecord {
  std::string id;
  std::vector<float> image;         // kPatchPixels floats in [0,1]
  std::vector<std::uint8_t> mask;   // kPatchPixels bytes in {0,1}
  ratings::RaterScores scores;

  double malignancy_mean() const { return ratings::mean_score(scores.malignancy); }
  bool is_malignant() const { return malignancy_mean() > 3.0; }

  // exact integer test: mean == 3 iff sum == 3n
  bool malignancy_mean_is_three() const {
    long sum = 0;
    for (int s : scores.malignancy) sum += s;
    return sum == 3 * static_cast<long>(scores.malignancy.size());
  }

  void validate() const {
    if (id.empty()) throw std::invalid_argument("sample: empty id");
    if (image.size() != kPatchPixels)
      throw std::invalid_argument("sample " + id + ": image has " + std::to_string(image.size()) +
                                  " pixels, expected " + std::to_string(kPatchPixels));
    if (mask.size() != kPatchPixels)
      throw std::invalid_argument("sample " + id + ": mask has " + std::to_string(mask.size()) +
                                  " pixels, expected " + std::to_string(kPatchPixels));
    std::size_t fg = 0;
    for (std::size_t i = 0; i < kPatchPixels; ++i) {
      const float v = image[i];
      if (!(v >= 0.0f && v <= 1.0f))
        throw std::invalid_argument("sample " + id + ": image value " + std::to_string(v) +
                                    " outside [0,1]");
      if (mask[i] > 1)
        throw std::invalid_argument("sample " + id + ": mask value " + std::to_string(mask[i]) +
                                    " outside {0,1}");
      fg += mask[i];
    }
    if (fg == 0) throw std::invalid_argument("sample " + id + ": empty mask");
    scores.validate();
  }
};

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;
};

struct DatasetManifest {
  int version = 1;
  std::vector<ManifestEntry> samples;
  std::array<const char*, ratings::kAttributeCount> attribute_names = ratings::kAttributeNames;
};

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::size_t rater_count = 4;
  double rater_noise = 0.7;

  void validate() const {
    if (count == 0) throw std::invalid_argument("synthetic: count must be positive");
    if (rater_count < 3) throw std::invalid_argument("synthetic: need at least 3 raters");
    if (rater_noise < 0) throw std::invalid_argument("synthetic: rater noise must be >= 0");
  }
};

struct FoldSpec {
  std::size_t k = 5;
  double val_fraction = 0.10;
  std::unordered_map<std::string, std::size_t> assignment;  // id -> fold index

  std::size_t fold_of(const std::string& id) const {
    auto it = assignment.find(id);
    if (it == assignment.end()) throw std::invalid_argument("folds: unknown id " + id);
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// binary file helpers

namespace detail_data {

inline void write_bytes(const std::filesystem::path& file, const void* data, std::size_t n) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("dataset: cannot open " + file.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("dataset: write failed for " + file.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& file, std::size_t expected,
                                    const std::string& sample_id) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in)
    throw std::runtime_error("dataset: sample " + sample_id + ": missing file " + file.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected)
    throw std::runtime_error("dataset: sample " + sample_id + ": " + file.string() + " has " +
                             std::to_string(size) + " bytes, expected " + std::to_string(expected));
  std::vector<char> buf(size);
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  if (!in) throw std::runtime_error("dataset: sample " + sample_id + ": read failed");
  return buf;
}

}  // namespace detail_data

// ---------------------------------------------------------------------------
// dataset directory IO
//
// Layout: manifest.jsonl (one JSON object per line: id, image, mask,
// malignancy, attributes) plus raw binary patches. Images are 32x32
// little-endian float32 row-major; masks 32x32 uint8 in {0,1}.

inline void save_dataset(const std::vector<SampleRecord>& records,
                         const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw std::runtime_error("dataset: cannot write manifest in " + dir.string());
  for (const SampleRecord& rec : records) {
    rec.validate();
    const std::string image_rel = "images/" + rec.id + ".bin";
    const std::string mask_rel = "masks/" + rec.id + ".bin";
    detail_data::write_bytes(dir / image_rel, rec.image.data(), rec.image.size() * sizeof(float));
    detail_data::write_bytes(dir / mask_rel, rec.mask.data(), rec.mask.size());

    nlohmann::json attrs;
    for (std::size_t i = 0; i < ratings::kAttributeCount; ++i)
      attrs[ratings::kAttributeNames[i]] = rec.scores.attributes[i];
    nlohmann::json line{{"id", rec.id},
                        {"image", image_rel},
                        {"mask", mask_rel},
                        {"malignancy", rec.scores.malignancy},
                        {"attributes", attrs}};
    manifest << line.dump() << "\n";
  }
  if (!manifest) throw std::runtime_error("dataset: manifest write failed in " + dir.string());
}

// Loads and fully validates a dataset directory. With exclude_mean3 (the
// default), samples whose mean malignancy rating is exactly 3 are dropped.
inline std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir,
                                              bool exclude_mean3 = true) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("dataset: missing manifest.jsonl in " + dir.string());

  std::vector<SampleRecord> records;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("dataset: manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    SampleRecord rec;
    rec.id = j.at("id").get<std::string>();
    if (!seen.insert(rec.id).second)
      throw std::runtime_error("dataset: duplicate id " + rec.id);

    const auto image_bytes =
        detail_data::read_bytes(dir / j.at("image").get<std::string>(),
                                kPatchPixels * sizeof(float), rec.id);
    rec.image.resize(kPatchPixels);
    std::memcpy(rec.image.data(), image_bytes.data(), image_bytes.size());
    const auto mask_bytes =
        detail_data::read_bytes(dir / j.at("mask").get<std::string>(), kPatchPixels, rec.id);
    rec.mask.assign(mask_bytes.begin(), mask_bytes.end());

    rec.scores.malignancy = j.at("malignancy").get<std::vector<int>>();
    const auto& attrs = j.at("attributes");
    for (std::size_t i = 0; i < ratings::kAttributeCount; ++i)
      rec.scores.attributes[i] = attrs.at(ratings::kAttributeNames[i]).get<std::vector<int>>();

    try {
      rec.validate();
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset: " + std::string(e.what()));
    }
    if (exclude_mean3 && rec.malignancy_mean_is_three()) continue;
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// synthetic nodule generator
//
// Each sample draws six latent attribute values uniformly in [1,5] and
// renders a blob whose geometry they control: sphericity sets the ellipse
// axis ratio, lobulation a 2-4 cycle radial perturbation, spiculation an
// 8-12 cycle one, margin the edge blur (inverted), texture the interior
// solid-vs-noise mix, subtlety the foreground/background contrast. The mask
// is the set of pixels where the unblurred solid blob exceeds half its peak
// intensity, i.e. the geometric interior.

namespace detail_synth {

inline constexpr double kBackground = 0.10;
// spreads the attribute-weighted malignancy mix back over the full 1..5 range
inline constexpr double kMalignancyStretch = 2.0;

struct Latents {
  std::array<double, ratings::kAttributeCount> attr;  // sub sph mar lob spi tex
  int malignancy = 0;
};

inline int clamp_score(double v) {
  const long r = std::lround(v);
  return static_cast<int>(std::min(5L, std::max(1L, r)));
}

inline int latent_malignancy(const std::array<double, 6>& a) {
  // weights favor spiculation/lobulation and penalize sharp margins and
  // obvious (high-subtlety-score) nodules less
  const double mix = 0.3 * a[4] + 0.3 * a[3] + 0.2 * (6.0 - a[2]) + 0.2 * (6.0 - a[0]);
  return clamp_score(3.0 + kMalignancyStretch * (mix - 3.0));
}

inline void gaussian_blur(std::vector<double>& img, std::size_t n, double sigma) {
  if (sigma <= 0.05) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  const int nn = static_cast<int>(n);
  std::vector<double> tmp(img.size());
  for (int y = 0; y < nn; ++y)
    for (int x = 0; x < nn; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::min(nn - 1, std::max(0, x + i));
        acc += kernel[i + radius] * img[y * nn + xx];
      }
      tmp[y * nn + x] = acc;
    }
  for (int y = 0; y < nn; ++y)
    for (int x = 0; x < nn; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::min(nn - 1, std::max(0, y + i));
        acc += kernel[i + radius] * tmp[yy * nn + x];
      }
      img[y * nn + x] = acc;
    }
}

}  // namespace detail_synth

struct GeneratedSample {
  SampleRecord record;
  std::array<double, ratings::kAttributeCount> latent_attributes;
  int latent_malignancy = 0;
};

inline GeneratedSample generate_sample_full(
    std::uint64_t sample_seed, std::size_t index, const SyntheticConfig& cfg,
    const std::optional<std::array<double, ratings::kAttributeCount>>& forced_latents = {}) {
  Rng rng(sample_seed);
  detail_synth::Latents lat;
  for (double& a : lat.attr) a = rng.uniform(1.0, 5.0);
  if (forced_latents) lat.attr = *forced_latents;
  const double sub = lat.attr[0], sph = lat.attr[1], mar = lat.attr[2];
  const double lob = lat.attr[3], spi = lat.attr[4], tex = lat.attr[5];
  lat.malignancy = detail_synth::latent_malignancy(lat.attr);

  // geometry draws (fixed order)
  const double r0 = rng.uniform(6.0, 8.0);
  const double cx = 16.0 + rng.uniform(-2.0, 2.0);
  const double cy = 16.0 + rng.uniform(-2.0, 2.0);
  const double phi_e = rng.uniform(0.0, 3.14159265358979323846);
  const double m_lob = 2.0 + std::floor(rng.uniform() * 3.0);    // 2..4 cycles
  const double phi_lob = rng.uniform(0.0, 6.28318530717958647692);
  const double m_spi = 8.0 + std::floor(rng.uniform() * 5.0);    // 8..12 cycles
  const double phi_spi = rng.uniform(0.0, 6.28318530717958647692);

  const double axis_ratio = 0.40 + 0.15 * (sph - 1.0);
  const double amp_lob = 0.005 + 0.06875 * (lob - 1.0);
  const double amp_spi = 0.005 + 0.05375 * (spi - 1.0);
  const double blur_sigma = 0.20 + 0.325 * (5.0 - mar);
  const double fg = 0.30 + 0.15 * (sub - 1.0);
  const double tex_mix = 0.15 * (5.0 - tex);

  SampleRecord rec;
  {
    std::ostringstream os;
    os << "s" << std::setfill('0') << std::setw(6) << index;
    rec.id = os.str();
  }
  rec.mask.assign(kPatchPixels, 0);
  std::vector<double> img(kPatchPixels, detail_synth::kBackground);

  for (std::size_t py = 0; py < kPatchSize; ++py) {
    for (std::size_t px = 0; px < kPatchSize; ++px) {
      const double dx = (static_cast<double>(px) + 0.5) - cx;
      const double dy = (static_cast<double>(py) + 0.5) - cy;
      const double r = std::sqrt(dx * dx + dy * dy);
      const double psi = std::atan2(dy, dx);
      const double ce = std::cos(psi - phi_e), se = std::sin(psi - phi_e);
      const double ellipse =
          axis_ratio / std::sqrt(axis_ratio * axis_ratio * ce * ce + se * se);
      const double boundary =
          r0 * ellipse *
          (1.0 + amp_lob * std::sin(m_lob * psi + phi_lob) + amp_spi * std::sin(m_spi * psi + phi_spi));
      if (r <= boundary) rec.mask[py * kPatchSize + px] = 1;
    }
  }

  // interior texture: 2x2-block noise (drawn in raster order) so that low
  // margin blur cannot erase it entirely
  const std::size_t blocks = kPatchSize / 2;
  std::vector<double> block_noise(blocks * blocks);
  for (double& n : block_noise) n = rng.uniform(-1.0, 1.0);
  for (std::size_t py = 0; py < kPatchSize; ++py)
    for (std::size_t px = 0; px < kPatchSize; ++px) {
      const std::size_t i = py * kPatchSize + px;
      if (!rec.mask[i]) continue;
      const double noise = block_noise[(py / 2) * blocks + px / 2];
      img[i] = std::min(1.0, std::max(0.0, fg * (1.0 + 0.9 * tex_mix * noise)));
    }

  detail_synth::gaussian_blur(img, kPatchSize, blur_sigma);
  rec.image.resize(kPatchPixels);
  for (std::size_t i = 0; i < kPatchPixels; ++i)
    rec.image[i] = static_cast<float>(std::min(1.0, std::max(0.0, img[i])));

  // rater panels: per rater, malignancy then the six attributes
  rec.scores.malignancy.resize(cfg.rater_count);
  for (auto& list : rec.scores.attributes) list.resize(cfg.rater_count);
  for (std::size_t r = 0; r < cfg.rater_count; ++r) {
    rec.scores.malignancy[r] =
        detail_synth::clamp_score(lat.malignancy + rng.normal(0.0, cfg.rater_noise));
    for (std::size_t a = 0; a < ratings::kAttributeCount; ++a)
      rec.scores.attributes[a][r] =
          detail_synth::clamp_score(lat.attr[a] + rng.normal(0.0, cfg.rater_noise));
  }
  return GeneratedSample{std::move(rec), lat.attr, lat.malignancy};
}

inline SampleRecord generate_sample(std::uint64_t sample_seed, std::size_t index,
                                    const SyntheticConfig& cfg) {
  return generate_sample_full(sample_seed, index, cfg).record;
}

inline std::vector<SampleRecord> generate_synthetic_records(const SyntheticConfig& cfg) {
  cfg.validate();
  std::vector<SampleRecord> records;
  records.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i)
    records.push_back(generate_sample(mix_seed(cfg.seed, i), i, cfg));
  return records;
}

inline void generate_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& out_dir) {
  save_dataset(generate_synthetic_records(cfg), out_dir);
}

// ---------------------------------------------------------------------------
// splits: strata are benign (mean <= 3) vs malignant (mean > 3)

namespace detail_data {

inline std::array<std::vector<std::size_t>, 2> strata_indices(
    const std::vector<SampleRecord>& records) {
  std::array<std::vector<std::size_t>, 2> strata;
  for (std::size_t i = 0; i < records.size(); ++i)
    strata[records[i].is_malignant() ? 1 : 0].push_back(i);
  return strata;
}

}  // namespace detail_data

inline FoldSpec stratified_kfold(const std::vector<SampleRecord>& records, std::size_t k,
                                 std::uint64_t seed) {
  if (records.empty()) throw std::invalid_argument("kfold: no records");
  if (k < 2) throw std::invalid_argument("kfold: k must be >= 2");
  auto strata = detail_data::strata_indices(records);
  FoldSpec spec;
  spec.k = k;
  for (std::size_t s = 0; s < strata.size(); ++s) {
    auto& idx = strata[s];
    if (idx.empty()) continue;
    if (idx.size() < k)
      throw std::invalid_argument("kfold: k=" + std::to_string(k) + " exceeds stratum size " +
                                  std::to_string(idx.size()));
    Rng rng(mix_seed(seed, 0xF01D + s));
    shuffle(idx, rng);
    for (std::size_t i = 0; i < idx.size(); ++i)
      spec.assignment[records[idx[i]].id] = i % k;
  }
  return spec;
}

inline std::pair<std::vector<SampleRecord>, std::vector<SampleRecord>> train_val_split(
    const std::vector<SampleRecord>& records, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("split: fraction must be in (0,1)");
  if (records.empty()) throw std::invalid_argument("split: no records");
  auto strata = detail_data::strata_indices(records);
  std::vector<bool> is_val(records.size(), false);
  for (std::size_t s = 0; s < strata.size(); ++s) {
    auto& idx = strata[s];
    if (idx.empty()) continue;
    const std::size_t n_val =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * idx.size())));
    if (n_val >= idx.size())
      throw std::invalid_argument("split: stratum of " + std::to_string(idx.size()) +
                                  " records too small for a validation sample");
    Rng rng(mix_seed(seed, 0x5B117 + s));
    shuffle(idx, rng);
    for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = true;
  }
  std::pair<std::vector<SampleRecord>, std::vector<SampleRecord>> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    (is_val[i] ? out.second : out.first).push_back(records[i]);
  return out;
}

}  // namespace xcaps::data

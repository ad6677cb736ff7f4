#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mil/matrix.hpp"
#include "mil/rng.hpp"

namespace mil::data {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

// A bag is a contiguous [start, end) range into the feature table.
struct Bag {
  std::uint32_t id = 0;
  int label = 0;
  std::uint32_t start = 0;
  std::uint32_t end = 0;
  Split split = Split::train;
  std::vector<std::uint8_t> instance_labels;  // empty when ground truth is absent

  std::uint32_t size() const { return end - start; }
  bool has_instance_labels() const { return !instance_labels.empty(); }
};

struct Dataset {
  num::Matrix features;  // N x m
  std::vector<Bag> bags;
  std::uint64_t config_hash = 0;

  std::size_t instance_count() const { return features.rows(); }
  std::size_t feature_dim() const { return features.cols(); }
  std::vector<const Bag*> bags_in(Split s) const;
  // Per-instance views (length N).
  std::vector<std::uint8_t> bag_label_per_instance() const;
  std::vector<std::uint8_t> instance_labels_flat() const;  // DataError when any bag lacks labels
  bool has_instance_labels() const;
  void validate() const;  // range partition, MIL rule, finite features
};

struct BagSizeDist {
  std::size_t size = 50;
  std::size_t jitter = 0;  // uniform in [size - jitter, size + jitter]
};

struct SplitBagCounts {
  std::size_t negatives = 0;
  std::size_t positives = 0;
};

struct SynthConfig {
  std::size_t feature_dim = 32;  // m
  SplitBagCounts train_bags{50, 50};
  SplitBagCounts val_bags{15, 15};
  SplitBagCounts test_bags{15, 15};
  BagSizeDist bag_size;
  double witness_rate = 0.10;                    // fraction of positives in positive bags
  std::size_t negative_components = 3;           // Gaussian mixture components for negatives
  double class_separation = 2.0;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::uint64_t hash() const;
};

// Negative instances come from a K-component Gaussian mixture, positives from
// a separate Gaussian shifted by the class separation; each positive bag gets
// ceil(WR * K_b) positives. Ground-truth instance labels are retained.
Dataset gen_synthetic(const SynthConfig& cfg);

enum class TargetClass { positives, negatives };

// Within each positive bag keep ceil(keep_fraction * count) uniformly chosen
// instances of the targeted class (a bag's last positive is never dropped).
Dataset set_witness_rate(const Dataset& ds, double keep_fraction, TargetClass which,
                         std::uint64_t seed);

// Split bags larger than max_size into sub-bags; negative bags into same-sized
// random parts, positive bags so every sub-bag keeps at least one positive and
// roughly the parent witness rate.
Dataset partition_subbags(const Dataset& ds, std::size_t max_size, std::uint64_t seed);

// x' = s * (x + eps), eps ~ N(0, strength^2 I), s ~ U[1 - strength, 1 + strength].
void augment(std::span<const double> x, double strength, Rng& rng, std::span<double> out);
num::Matrix augment_rows(const num::Matrix& x, double strength, Rng& rng);

// Directory layout: features.milf (magic "MILF1\0", u32 N, u32 m, then N*m
// real32 LE row-major) plus dataset.json (bags and metadata). Round-trips are
// byte-exact.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mil::data

#include "mil/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "binio.hpp"
#include "mil/errors.hpp"

namespace mil::data {

namespace {

constexpr char kMagic[7] = "MILF1";

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::size_t ceil_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12));
}

std::vector<double> unit_direction(std::size_t m, Rng& rng) {
  std::vector<double> v(m);
  double norm = 0.0;
  do {
    for (auto& x : v) x = rand_normal(rng);
    norm = num::l2_norm(v);
  } while (norm == 0.0);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw FormatError("unknown split name: " + name);
}

std::vector<const Bag*> Dataset::bags_in(Split s) const {
  std::vector<const Bag*> out;
  for (const Bag& b : bags)
    if (b.split == s) out.push_back(&b);
  return out;
}

std::vector<std::uint8_t> Dataset::bag_label_per_instance() const {
  std::vector<std::uint8_t> labels(instance_count(), 0);
  for (const Bag& b : bags)
    for (std::uint32_t i = b.start; i < b.end; ++i) labels[i] = b.label ? 1 : 0;
  return labels;
}

bool Dataset::has_instance_labels() const {
  return std::all_of(bags.begin(), bags.end(),
                     [](const Bag& b) { return b.has_instance_labels(); });
}

std::vector<std::uint8_t> Dataset::instance_labels_flat() const {
  std::vector<std::uint8_t> labels(instance_count(), 0);
  for (const Bag& b : bags) {
    if (!b.has_instance_labels()) throw DataError("dataset lacks ground-truth instance labels");
    for (std::uint32_t i = b.start; i < b.end; ++i) labels[i] = b.instance_labels[i - b.start];
  }
  return labels;
}

void Dataset::validate() const {
  if (!features.all_finite()) throw FormatError("non-finite feature value");
  std::vector<const Bag*> sorted;
  for (const Bag& b : bags) sorted.push_back(&b);
  std::sort(sorted.begin(), sorted.end(),
            [](const Bag* a, const Bag* b) { return a->start < b->start; });
  std::uint32_t expect = 0;
  for (const Bag* b : sorted) {
    if (b->end <= b->start) throw FormatError("empty bag range (bag " + std::to_string(b->id) + ")");
    if (b->start != expect) {
      throw FormatError("bag ranges do not partition the feature table",
                        static_cast<long long>(b->start));
    }
    expect = b->end;
    if (b->label != 0 && b->label != 1) throw FormatError("bag label must be 0 or 1");
    if (b->has_instance_labels()) {
      if (b->instance_labels.size() != b->size()) {
        throw FormatError("instance label count mismatch (bag " + std::to_string(b->id) + ")");
      }
      const bool any_pos = std::any_of(b->instance_labels.begin(), b->instance_labels.end(),
                                       [](std::uint8_t y) { return y != 0; });
      if (b->label == 1 && !any_pos) {
        throw FormatError("positive bag without a positive instance (bag " +
                          std::to_string(b->id) + ")");
      }
      if (b->label == 0 && any_pos) {
        throw FormatError("negative bag with a positive instance (bag " + std::to_string(b->id) +
                          ")");
      }
    }
  }
  if (expect != instance_count()) {
    throw FormatError("bag ranges do not cover the feature table",
                      static_cast<long long>(expect));
  }
}

void SynthConfig::validate() const {
  if (feature_dim == 0) throw ConfigError("synth: feature_dim must be positive");
  if (!(witness_rate > 0.0 && witness_rate <= 1.0)) {
    throw ConfigError("synth: witness_rate must be in (0, 1]");
  }
  if (bag_size.size == 0) throw ConfigError("synth: bag size must be >= 1");
  if (bag_size.jitter >= bag_size.size) throw ConfigError("synth: jitter must be < bag size");
  if (negative_components == 0) throw ConfigError("synth: need at least one negative component");
  if (noise_scale < 0.0) throw ConfigError("synth: noise_scale must be nonnegative");
}

std::uint64_t SynthConfig::hash() const {
  std::string s = "m=" + std::to_string(feature_dim);
  for (const auto& [tag, c] : {std::pair<const char*, const SplitBagCounts*>{"tr", &train_bags},
                               {"va", &val_bags},
                               {"te", &test_bags}}) {
    s += std::string(";") + tag + "=" + std::to_string(c->negatives) + "/" +
         std::to_string(c->positives);
  }
  s += ";k=" + std::to_string(bag_size.size) + "+-" + std::to_string(bag_size.jitter);
  s += ";wr=" + std::to_string(witness_rate);
  s += ";nc=" + std::to_string(negative_components);
  s += ";sep=" + std::to_string(class_separation);
  s += ";noise=" + std::to_string(noise_scale);
  s += ";seed=" + std::to_string(seed);
  return fnv1a(s);
}

Dataset gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng = make_rng(cfg.seed, 0x73796e);  // "syn"

  // Cluster means: unit directions scaled by the class separation. The
  // negative mixture gives CSSL intra-negative structure to pull apart.
  std::vector<std::vector<double>> neg_means;
  for (std::size_t c = 0; c < cfg.negative_components; ++c) {
    auto mu = unit_direction(cfg.feature_dim, rng);
    for (auto& x : mu) x *= cfg.class_separation;
    neg_means.push_back(std::move(mu));
  }
  std::vector<double> pos_mean = unit_direction(cfg.feature_dim, rng);
  for (auto& x : pos_mean) x *= cfg.class_separation;

  Dataset ds;
  ds.config_hash = cfg.hash();
  std::vector<double> feature_rows;

  auto draw_size = [&]() {
    if (cfg.bag_size.jitter == 0) return cfg.bag_size.size;
    return cfg.bag_size.size - cfg.bag_size.jitter +
           rand_index(rng, 2 * cfg.bag_size.jitter + 1);
  };
  auto push_instance = [&](std::span<const double> mean) {
    for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
      const double v = mean[j] + cfg.noise_scale * rand_normal(rng);
      // Quantize to the real32 storage precision so in-memory and on-disk
      // datasets are identical.
      feature_rows.push_back(static_cast<double>(static_cast<float>(v)));
    }
  };

  std::uint32_t next_id = 0;
  auto gen_split = [&](Split split, const SplitBagCounts& counts) {
    // Alternate classes while both remain.
    std::vector<std::uint8_t> order;
    std::size_t nn = counts.negatives, np = counts.positives;
    for (bool turn_pos = false; nn + np > 0; turn_pos = !turn_pos) {
      if ((turn_pos && np > 0) || nn == 0) {
        order.push_back(1);
        --np;
      } else {
        order.push_back(0);
        --nn;
      }
    }
    for (const bool positive : order) {
      const std::size_t k = draw_size();
      Bag bag;
      bag.id = next_id++;
      bag.split = split;
      bag.start = static_cast<std::uint32_t>(feature_rows.size() / cfg.feature_dim);
      bag.label = positive ? 1 : 0;
      if (positive) {
        const std::size_t n_pos = std::max<std::size_t>(1, ceil_count(cfg.witness_rate, k));
        std::vector<std::uint8_t> labels(k, 0);
        std::fill_n(labels.begin(), n_pos, 1);
        std::shuffle(labels.begin(), labels.end(), rng);
        for (std::uint8_t y : labels) {
          if (y) {
            push_instance(pos_mean);
          } else {
            push_instance(neg_means[rand_index(rng, neg_means.size())]);
          }
        }
        bag.instance_labels = std::move(labels);
      } else {
        for (std::size_t i = 0; i < k; ++i) {
          push_instance(neg_means[rand_index(rng, neg_means.size())]);
        }
        bag.instance_labels.assign(k, 0);
      }
      bag.end = static_cast<std::uint32_t>(feature_rows.size() / cfg.feature_dim);
      ds.bags.push_back(std::move(bag));
    }
  };
  gen_split(Split::train, cfg.train_bags);
  gen_split(Split::val, cfg.val_bags);
  gen_split(Split::test, cfg.test_bags);

  const std::size_t n_rows = feature_rows.size() / cfg.feature_dim;
  ds.features = num::Matrix(n_rows, cfg.feature_dim, std::move(feature_rows));
  ds.validate();
  return ds;
}

Dataset set_witness_rate(const Dataset& ds, double keep_fraction, TargetClass which,
                         std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("set_witness_rate: keep_fraction must be in (0, 1]");
  }
  if (!ds.has_instance_labels()) {
    throw DataError("set_witness_rate: dataset lacks instance labels");
  }
  Rng rng = make_rng(seed, 0x7772);  // "wr"

  Dataset out;
  out.config_hash = ds.config_hash;
  std::vector<double> rows;
  const std::size_t m = ds.feature_dim();

  for (const Bag& bag : ds.bags) {
    Bag nb;
    nb.id = bag.id;
    nb.label = bag.label;
    nb.split = bag.split;
    nb.start = static_cast<std::uint32_t>(rows.size() / m);

    std::vector<std::uint32_t> keep;  // offsets within the bag
    if (bag.label == 0) {
      keep.resize(bag.size());
      std::iota(keep.begin(), keep.end(), 0);
    } else {
      const std::uint8_t target = which == TargetClass::positives ? 1 : 0;
      std::vector<std::uint32_t> targeted, rest;
      for (std::uint32_t off = 0; off < bag.size(); ++off) {
        (bag.instance_labels[off] == target ? targeted : rest).push_back(off);
      }
      std::shuffle(targeted.begin(), targeted.end(), rng);
      targeted.resize(std::min(targeted.size(), ceil_count(keep_fraction, targeted.size())));
      keep = rest;
      keep.insert(keep.end(), targeted.begin(), targeted.end());
      std::sort(keep.begin(), keep.end());
    }
    if (keep.empty()) throw DataError("set_witness_rate: dropping would empty bag " +
                                      std::to_string(bag.id));

    for (std::uint32_t off : keep) {
      const auto row = ds.features.row_span(bag.start + off);
      rows.insert(rows.end(), row.begin(), row.end());
      nb.instance_labels.push_back(bag.instance_labels[off]);
    }
    nb.end = static_cast<std::uint32_t>(rows.size() / m);
    out.bags.push_back(std::move(nb));
  }
  const std::size_t n_rows = rows.size() / m;
  out.features = num::Matrix(n_rows, m, std::move(rows));
  out.validate();
  return out;
}

Dataset partition_subbags(const Dataset& ds, std::size_t max_size, std::uint64_t seed) {
  if (max_size == 0) throw ConfigError("partition_subbags: max_size must be >= 1");
  Rng rng = make_rng(seed, 0x7362);  // "sb"

  Dataset out;
  out.config_hash = ds.config_hash;
  std::vector<double> rows;
  const std::size_t m = ds.feature_dim();
  std::uint32_t next_id = 0;

  auto emit = [&](const Bag& parent, std::span<const std::uint32_t> offsets) {
    Bag nb;
    nb.id = next_id++;
    nb.label = parent.label;
    nb.split = parent.split;
    nb.start = static_cast<std::uint32_t>(rows.size() / m);
    for (std::uint32_t off : offsets) {
      const auto row = ds.features.row_span(parent.start + off);
      rows.insert(rows.end(), row.begin(), row.end());
      if (parent.has_instance_labels()) nb.instance_labels.push_back(parent.instance_labels[off]);
    }
    nb.end = static_cast<std::uint32_t>(rows.size() / m);
    out.bags.push_back(std::move(nb));
  };

  for (const Bag& bag : ds.bags) {
    const std::size_t n = bag.size();
    if (n <= max_size) {
      std::vector<std::uint32_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      emit(bag, all);
      continue;
    }
    if (bag.label == 0) {
      // Same-sized random parts (sizes differ by at most one).
      std::vector<std::uint32_t> offs(n);
      std::iota(offs.begin(), offs.end(), 0);
      std::shuffle(offs.begin(), offs.end(), rng);
      const std::size_t parts = (n + max_size - 1) / max_size;
      const std::size_t base = n / parts, rem = n % parts;
      std::size_t at = 0;
      for (std::size_t p = 0; p < parts; ++p) {
        const std::size_t sz = base + (p < rem ? 1 : 0);
        std::vector<std::uint32_t> chunk(offs.begin() + at, offs.begin() + at + sz);
        std::sort(chunk.begin(), chunk.end());
        emit(bag, chunk);
        at += sz;
      }
    } else {
      if (!bag.has_instance_labels()) {
        throw DataError("partition_subbags: positive bag " + std::to_string(bag.id) +
                        " lacks instance labels");
      }
      std::vector<std::uint32_t> pos, neg;
      for (std::uint32_t off = 0; off < n; ++off) {
        (bag.instance_labels[off] ? pos : neg).push_back(off);
      }
      std::size_t parts = (n + max_size - 1) / max_size;
      // A sub-bag must keep at least one positive; reduce the count if needed.
      parts = std::min(parts, pos.size());
      std::shuffle(pos.begin(), pos.end(), rng);
      std::shuffle(neg.begin(), neg.end(), rng);

      std::vector<std::size_t> pos_count(parts, pos.size() / parts);
      for (std::size_t p = 0; p < pos.size() % parts; ++p) ++pos_count[p];

      // Sub-bag sizes proportional to their positive share keep the witness
      // rate near the parent's.
      std::vector<std::size_t> sizes(parts);
      std::vector<std::pair<double, std::size_t>> remainders;
      std::size_t assigned = 0;
      for (std::size_t p = 0; p < parts; ++p) {
        const double exact = static_cast<double>(n) * static_cast<double>(pos_count[p]) /
                             static_cast<double>(pos.size());
        sizes[p] = std::max(pos_count[p], static_cast<std::size_t>(exact));
        remainders.emplace_back(exact - std::floor(exact), p);
        assigned += sizes[p];
      }
      std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (std::size_t r = 0; assigned < n; ++r, ++assigned) {
        ++sizes[remainders[r % parts].second];
      }
      while (assigned > n) {  // rare over-assignment from the pos_count floor
        for (std::size_t p = 0; p < parts && assigned > n; ++p) {
          if (sizes[p] > pos_count[p]) {
            --sizes[p];
            --assigned;
          }
        }
      }

      std::size_t pos_at = 0, neg_at = 0;
      for (std::size_t p = 0; p < parts; ++p) {
        std::vector<std::uint32_t> chunk(pos.begin() + pos_at, pos.begin() + pos_at + pos_count[p]);
        pos_at += pos_count[p];
        const std::size_t n_neg = sizes[p] - pos_count[p];
        chunk.insert(chunk.end(), neg.begin() + neg_at, neg.begin() + neg_at + n_neg);
        neg_at += n_neg;
        std::sort(chunk.begin(), chunk.end());
        emit(bag, chunk);
      }
    }
  }
  const std::size_t n_rows = rows.size() / m;
  out.features = num::Matrix(n_rows, m, std::move(rows));
  out.validate();
  return out;
}

void augment(std::span<const double> x, double strength, Rng& rng, std::span<double> out) {
  if (strength < 0.0) throw ConfigError("augment: strength must be nonnegative");
  if (x.size() != out.size()) throw ShapeError("augment: output size mismatch");
  if (strength == 0.0) {
    std::copy(x.begin(), x.end(), out.begin());
    return;
  }
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + strength * rand_normal(rng);
  const double s = rand_uniform(rng, 1.0 - strength, 1.0 + strength);
  for (auto& v : out) v *= s;
}

num::Matrix augment_rows(const num::Matrix& x, double strength, Rng& rng) {
  num::Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) augment(x.row_span(i), strength, rng, out.row_span(i));
  return out;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);

  io::Writer w;
  w.put_bytes(kMagic, 6);
  w.put_u32(static_cast<std::uint32_t>(ds.instance_count()));
  w.put_u32(static_cast<std::uint32_t>(ds.feature_dim()));
  for (double v : ds.features.data()) w.put_f32(static_cast<float>(v));
  w.save(dir / "features.milf");

  nlohmann::json j;
  char hash_hex[17];
  std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                static_cast<unsigned long long>(ds.config_hash));
  j["metadata"] = {{"feature_dim", ds.feature_dim()},
                   {"instance_count", ds.instance_count()},
                   {"config_hash", hash_hex}};
  nlohmann::json bags = nlohmann::json::array();
  for (const Bag& b : ds.bags) {
    nlohmann::json jb = {{"id", b.id},
                         {"label", b.label},
                         {"start", b.start},
                         {"end", b.end},
                         {"split", split_name(b.split)}};
    if (b.has_instance_labels()) {
      jb["instance_labels"] = b.instance_labels;
    }
    bags.push_back(std::move(jb));
  }
  j["bags"] = std::move(bags);

  const std::string text = j.dump(2) + "\n";
  io::Writer jw;
  jw.put_bytes(text.data(), text.size());
  jw.save(dir / "dataset.json");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  io::Reader r(dir / "features.milf");
  r.expect_magic(kMagic);
  const std::uint32_t n = r.get_u32();
  const std::uint32_t m = r.get_u32();
  if (m == 0) throw FormatError("feature_dim is zero", 6);
  Dataset ds;
  {
    std::vector<double> rows;
    rows.reserve(static_cast<std::size_t>(n) * m);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * m; ++i) {
      rows.push_back(static_cast<double>(r.get_f32()));
    }
    r.expect_eof();
    ds.features = num::Matrix(n, m, std::move(rows));
  }

  const std::filesystem::path manifest = dir / "dataset.json";
  std::ifstream in(manifest);
  if (!in) throw MissingArtifactError("cannot open: " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  try {
    const auto& meta = j.at("metadata");
    if (meta.at("feature_dim").get<std::size_t>() != m ||
        meta.at("instance_count").get<std::size_t>() != n) {
      throw FormatError("manifest metadata disagrees with feature file");
    }
    ds.config_hash = std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
    for (const auto& jb : j.at("bags")) {
      Bag b;
      b.id = jb.at("id").get<std::uint32_t>();
      b.label = jb.at("label").get<int>();
      b.start = jb.at("start").get<std::uint32_t>();
      b.end = jb.at("end").get<std::uint32_t>();
      b.split = split_from_name(jb.at("split").get<std::string>());
      if (jb.contains("instance_labels")) {
        b.instance_labels = jb.at("instance_labels").get<std::vector<std::uint8_t>>();
      }
      if (b.end > n) throw FormatError("bag range beyond feature table",
                                       static_cast<long long>(b.end));
      ds.bags.push_back(std::move(b));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  ds.validate();
  return ds;
}

}  // namespace mil::data

#include "spherefed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds,
                                                       std::span<const std::size_t> indices) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i : indices) by_class[ds.labels[i]].push_back(i);
  return by_class;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Largest-remainder apportionment of total into shares proportional to p.
// Ties on the fractional part go to the lower index.
std::vector<std::size_t> apportion(std::span<const double> p, std::size_t total) {
  const std::size_t k = p.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> frac(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double raw = p[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(raw));
    frac[i] = raw - std::floor(raw);
    assigned += counts[i];
  }
  // Floating-point slack can push the floor sum past total by a unit.
  while (assigned > total) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order = iota_indices(k);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < total; ++r) {
    ++counts[order[r % k]];
    ++assigned;
  }
  return counts;
}

std::uint32_t read_be32(std::istream& in, std::size_t offset, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError("truncated " + what, offset);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

}  // namespace

void validate(const Dataset& ds, bool require_all_classes) {
  if (ds.size() == 0) throw InputError("dataset is empty");
  if (ds.features.rows() != ds.size()) {
    throw ShapeError("dataset has " + std::to_string(ds.features.rows()) + " feature rows but " +
                     std::to_string(ds.size()) + " labels");
  }
  if (!all_finite(ds.features.data())) throw InputError("dataset features contain non-finite values");
  std::vector<bool> seen(ds.num_classes, false);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] >= ds.num_classes) {
      throw InputError("label " + std::to_string(ds.labels[i]) + " at sample " +
                       std::to_string(i) + " is outside [0, " +
                       std::to_string(ds.num_classes) + ")");
    }
    seen[ds.labels[i]] = true;
  }
  if (require_all_classes) {
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      if (!seen[c]) throw InputError("class " + std::to_string(c) + " has no samples");
    }
  }
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.num_classes = ds.num_classes;
  out.features = Matrix(indices.size(), ds.dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= ds.size()) throw ConsistencyError("subset index " + std::to_string(i) + " out of range");
    std::copy_n(ds.features.row(i).begin(), ds.dim(), out.features.row(r).begin());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

Matrix synthetic_means(std::size_t classes, std::size_t dim, Rng rng) {
  Matrix means = orthonormal_rows(classes, dim, rng);
  for (double& x : means.data()) x *= 3.0;
  return means;
}

Dataset make_synthetic(std::size_t classes, std::size_t dim, std::size_t per_class, double spread,
                       const Rng& rng) {
  if (classes < 2) throw ParameterError("synthetic data needs at least two classes");
  if (dim < classes) {
    throw CapacityError("synthetic data needs dim >= classes (dim " + std::to_string(dim) +
                        ", classes " + std::to_string(classes) + ")");
  }
  if (per_class == 0) throw ParameterError("per_class must be positive");
  if (!(spread >= 0.0)) throw ParameterError("spread must be nonnegative");

  const Matrix means = synthetic_means(classes, dim, rng.child(0));
  Rng noise = rng.child(1);
  Dataset ds;
  ds.num_classes = classes;
  ds.features = Matrix(classes * per_class, dim);
  ds.labels.resize(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      const std::size_t i = c * per_class + s;
      ds.labels[i] = c;
      auto row = ds.features.row(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] = means(c, j) + spread * noise.normal();
    }
  }
  return ds;
}

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, std::size_t num_classes) {
  std::ifstream images = open_binary(images_path);
  const std::uint32_t image_magic = read_be32(images, 0, "image magic");
  if (image_magic != 0x00000803) throw FormatError("bad IDX image magic in " + images_path.string(), 0);
  const std::uint32_t n = read_be32(images, 4, "image count");
  const std::uint32_t rows = read_be32(images, 8, "image rows");
  const std::uint32_t cols = read_be32(images, 12, "image cols");
  const std::size_t d = std::size_t{rows} * cols;
  if (n == 0 || d == 0) throw FormatError("empty IDX image tensor", 4);

  std::ifstream labels = open_binary(labels_path);
  const std::uint32_t label_magic = read_be32(labels, 0, "label magic");
  if (label_magic != 0x00000801) throw FormatError("bad IDX label magic in " + labels_path.string(), 0);
  const std::uint32_t label_count = read_be32(labels, 4, "label count");
  if (label_count != n) {
    throw FormatError("label count " + std::to_string(label_count) + " does not match image count " +
                          std::to_string(n),
                      4);
  }

  Dataset ds;
  ds.num_classes = num_classes;
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  std::vector<unsigned char> buf(d);
  for (std::size_t i = 0; i < n; ++i) {
    images.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(d));
    const std::size_t got = static_cast<std::size_t>(images.gcount());
    if (got != d) throw FormatError("truncated IDX image data", 16 + i * d + got);
    auto row = ds.features.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<double>(buf[j]) / 255.0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int byte = labels.get();
    if (byte == std::char_traits<char>::eof()) throw FormatError("truncated IDX label data", 8 + i);
    if (static_cast<std::size_t>(byte) >= num_classes) {
      throw FormatError("label " + std::to_string(byte) + " is not below " +
                            std::to_string(num_classes),
                        8 + i);
    }
    ds.labels[i] = static_cast<std::size_t>(byte);
  }
  validate(ds, false);
  return ds;
}

Partition partition_dirichlet(const Dataset& ds, std::size_t k, double alpha, const Rng& rng) {
  if (k == 0) throw ParameterError("need at least one client");
  if (k > ds.size()) {
    throw CapacityError("cannot split " + std::to_string(ds.size()) + " samples over " +
                        std::to_string(k) + " clients");
  }
  if (!(alpha > 0.0)) throw ParameterError("dirichlet concentration must be positive");

  Partition p;
  p.alpha = alpha;
  p.assignments.resize(k);
  const auto all = iota_indices(ds.size());
  auto by_class = indices_by_class(ds, all);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    Rng class_rng = rng.child(c);
    class_rng.shuffle(std::span(idx));
    const auto proportions = dirichlet(alpha, k, class_rng);
    const auto counts = apportion(proportions, idx.size());
    std::size_t cursor = 0;
    for (std::size_t client = 0; client < k; ++client) {
      auto& dst = p.assignments[client];
      dst.insert(dst.end(), idx.begin() + static_cast<std::ptrdiff_t>(cursor),
                 idx.begin() + static_cast<std::ptrdiff_t>(cursor + counts[client]));
      cursor += counts[client];
    }
  }
  for (std::size_t client = 0; client < k; ++client) {
    if (!p.assignments[client].empty()) continue;
    auto largest = std::max_element(
        p.assignments.begin(), p.assignments.end(),
        [](const auto& a, const auto& b) { return a.size() < b.size(); });
    p.assignments[client].push_back(largest->back());
    largest->pop_back();
  }
  for (auto& a : p.assignments) std::sort(a.begin(), a.end());
  return p;
}

Partition partition_iid(const Dataset& ds, std::size_t k, const Rng& rng) {
  if (k == 0) throw ParameterError("need at least one client");
  if (k > ds.size()) {
    throw CapacityError("cannot split " + std::to_string(ds.size()) + " samples over " +
                        std::to_string(k) + " clients");
  }
  Partition p;
  p.assignments.resize(k);
  const auto all = iota_indices(ds.size());
  auto by_class = indices_by_class(ds, all);
  // The starting client rotates between classes so that remainders spread
  // evenly and client sizes stay balanced too.
  std::size_t next = 0;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[c];
    Rng class_rng = rng.child(c);
    class_rng.shuffle(std::span(idx));
    for (std::size_t i : idx) {
      p.assignments[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  for (auto& a : p.assignments) std::sort(a.begin(), a.end());
  return p;
}

Partition make_partition(const Dataset& ds, std::size_t k, std::optional<double> alpha,
                         const Rng& rng) {
  return alpha ? partition_dirichlet(ds, k, *alpha, rng) : partition_iid(ds, k, rng);
}

void check_partition(const Partition& p, std::size_t n) {
  std::vector<bool> seen(n, false);
  std::size_t total = 0;
  for (std::size_t k = 0; k < p.num_clients(); ++k) {
    if (p.assignments[k].empty()) throw ConsistencyError("client " + std::to_string(k) + " is empty");
    for (std::size_t i : p.assignments[k]) {
      if (i >= n) throw ConsistencyError("index " + std::to_string(i) + " out of range");
      if (seen[i]) throw ConsistencyError("index " + std::to_string(i) + " assigned twice");
      seen[i] = true;
      ++total;
    }
  }
  if (total != n) throw ConsistencyError("partition covers " + std::to_string(total) + " of " +
                                         std::to_string(n) + " samples");
}

ClassHistogram partition_stats(const Partition& p, const Dataset& ds) {
  ClassHistogram h(p.num_clients(), std::vector<std::size_t>(ds.num_classes, 0));
  for (std::size_t k = 0; k < p.num_clients(); ++k) {
    for (std::size_t i : p.assignments[k]) {
      if (i >= ds.size()) {
        throw ConsistencyError("client " + std::to_string(k) + " holds index " + std::to_string(i) +
                               " but the dataset has " + std::to_string(ds.size()) + " samples");
      }
      ++h[k][ds.labels[i]];
    }
  }
  return h;
}

HoldoutSplit stratified_holdout(const Dataset& ds, std::span<const std::size_t> indices,
                                double fraction, const Rng& rng) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ParameterError("holdout fraction must be in [0, 1)");
  HoldoutSplit split;
  auto by_class = indices_by_class(ds, indices);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& idx = by_class[c];
    Rng class_rng = rng.child(c);
    class_rng.shuffle(std::span(idx));
    const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    split.held_out.insert(split.held_out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(held));
    split.kept.insert(split.kept.end(), idx.begin() + static_cast<std::ptrdiff_t>(held), idx.end());
  }
  std::sort(split.kept.begin(), split.kept.end());
  std::sort(split.held_out.begin(), split.held_out.end());
  return split;
}

HoldoutSplit stratified_holdout(const Dataset& ds, double fraction, const Rng& rng) {
  const auto all = iota_indices(ds.size());
  return stratified_holdout(ds, all, fraction, rng);
}

}  // namespace spherefed

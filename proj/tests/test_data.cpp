#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "spherefed/data.hpp"
#include "spherefed/errors.hpp"

using namespace spherefed;

namespace {

void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Writes a 3-image 2x2 IDX pair; truncate_images drops trailing pixel bytes.
void write_idx_fixture(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::uint32_t image_magic = 0x803, std::size_t truncate_images = 0,
                       unsigned char last_label = 2) {
  std::ofstream im(images, std::ios::binary | std::ios::trunc);
  put_be32(im, image_magic);
  put_be32(im, 3);
  put_be32(im, 2);
  put_be32(im, 2);
  std::vector<unsigned char> px = {0, 255, 51, 102, 10, 20, 30, 40, 255, 255, 0, 0};
  px.resize(px.size() - truncate_images);
  im.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  std::ofstream lb(labels, std::ios::binary | std::ios::trunc);
  put_be32(lb, 0x801);
  put_be32(lb, 3);
  const unsigned char ys[3] = {1, 0, last_label};
  lb.write(reinterpret_cast<const char*>(ys), 3);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("spherefed_test_" + name);
}

double mean_max_class_share(const Partition& p, const Dataset& ds) {
  const auto hist = partition_stats(p, ds);
  double s = 0.0;
  for (const auto& row : hist) {
    std::size_t total = 0, top = 0;
    for (std::size_t v : row) {
      total += v;
      top = std::max(top, v);
    }
    s += static_cast<double>(top) / static_cast<double>(total);
  }
  return s / static_cast<double>(hist.size());
}

}  // namespace

TEST_CASE("make_synthetic is class-major and reproducible") {
  const auto ds = make_synthetic(4, 8, 5, 0.5, Rng(3));
  CHECK(ds.size() == 20);
  CHECK(ds.dim() == 8);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ds.labels[i] == i / 5);
  CHECK(make_synthetic(4, 8, 5, 0.5, Rng(3)).features == ds.features);
  CHECK(make_synthetic(4, 8, 5, 0.5, Rng(4)).features != ds.features);
  // Zero spread puts every sample on its class mean, at distance 3 from the origin.
  const auto tight = make_synthetic(3, 5, 2, 0.0, Rng(1));
  for (std::size_t i = 0; i < tight.size(); ++i) CHECK(norm2(tight.features.row(i)) == doctest::Approx(3.0));
  CHECK_THROWS_AS(make_synthetic(6, 5, 2, 1.0, Rng(1)), CapacityError);
  CHECK_THROWS_AS(make_synthetic(3, 5, 0, 1.0, Rng(1)), ParameterError);
}

TEST_CASE("validate and subset") {
  auto ds = make_synthetic(3, 4, 2, 1.0, Rng(1));
  CHECK_NOTHROW(validate(ds, true));
  const std::vector<std::size_t> pick = {0, 1};
  CHECK_THROWS_AS(validate(subset(ds, pick), true), InputError);
  CHECK_NOTHROW(validate(subset(ds, pick), false));
  CHECK_THROWS_AS(subset(ds, std::vector<std::size_t>{99}), ConsistencyError);
  ds.labels[0] = 3;
  CHECK_THROWS_AS(validate(ds, false), InputError);
  ds.labels[0] = 0;
  ds.features(0, 0) = NAN;
  CHECK_THROWS_AS(validate(ds, false), InputError);
}

TEST_CASE("dirichlet partition covers the data and skews with small alpha") {
  const auto ds = make_synthetic(10, 16, 100, 1.0, Rng(2));
  for (double alpha : {0.01, 0.1, 0.5, 100.0}) {
    const auto p = partition_dirichlet(ds, 10, alpha, Rng(5));
    CHECK_NOTHROW(check_partition(p, ds.size()));
    CHECK(p.alpha.value() == alpha);
    for (const auto& a : p.assignments) CHECK(std::is_sorted(a.begin(), a.end()));
  }
  // Average dominance of the largest class on a client, over 5 seeds.
  double skewed = 0.0, flat = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    skewed += mean_max_class_share(partition_dirichlet(ds, 10, 0.1, Rng(s)), ds);
    flat += mean_max_class_share(partition_dirichlet(ds, 10, 100.0, Rng(s)), ds);
  }
  CHECK(skewed > 3.0 * flat);
  CHECK(partition_dirichlet(ds, 10, 0.1, Rng(5)).assignments ==
        partition_dirichlet(ds, 10, 0.1, Rng(5)).assignments);
  CHECK_THROWS_AS(partition_dirichlet(ds, 10, 0.0, Rng(1)), ParameterError);
  CHECK_THROWS_AS(partition_dirichlet(ds, 2000, 0.5, Rng(1)), CapacityError);
  CHECK_THROWS_AS(partition_dirichlet(ds, 0, 0.5, Rng(1)), ParameterError);
}

TEST_CASE("tiny alpha still leaves no client empty") {
  const auto ds = make_synthetic(2, 4, 6, 1.0, Rng(2));
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = partition_dirichlet(ds, 12, 0.001, Rng(s));
    CHECK_NOTHROW(check_partition(p, ds.size()));
  }
}

TEST_CASE("iid partition balances every class") {
  const auto ds = make_synthetic(5, 8, 23, 1.0, Rng(9));
  const auto p = partition_iid(ds, 4, Rng(1));
  CHECK_NOTHROW(check_partition(p, ds.size()));
  CHECK_FALSE(p.alpha.has_value());
  const auto hist = partition_stats(p, ds);
  for (const auto& row : hist)
    for (std::size_t v : row) CHECK(std::abs(static_cast<double>(v) - 23.0 / 4) < 1.0);
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& a : p.assignments) {
    lo = std::min(lo, a.size());
    hi = std::max(hi, a.size());
  }
  CHECK(hi - lo <= 1);
}

TEST_CASE("check_partition rejects overlaps, gaps and empty clients") {
  CHECK_THROWS_AS(check_partition(Partition{{{0, 1}, {1, 2}}, {}}, 3), ConsistencyError);
  CHECK_THROWS_AS(check_partition(Partition{{{0}, {2}}, {}}, 3), ConsistencyError);
  CHECK_THROWS_AS(check_partition(Partition{{{0, 1, 2}, {}}, {}}, 3), ConsistencyError);
  CHECK_THROWS_AS(check_partition(Partition{{{0, 5}}, {}}, 2), ConsistencyError);
}

TEST_CASE("stratified holdout") {
  const auto ds = make_synthetic(3, 4, 11, 1.0, Rng(4));
  const auto split = stratified_holdout(ds, 0.2, Rng(1));
  CHECK(split.held_out.size() == 3 * 2);  // round(2.2) per class
  CHECK(split.kept.size() + split.held_out.size() == ds.size());
  std::vector<int> seen(ds.size(), 0);
  for (auto i : split.kept) ++seen[i];
  for (auto i : split.held_out) ++seen[i];
  for (int s : seen) CHECK(s == 1);
  CHECK_THROWS_AS(stratified_holdout(ds, 1.0, Rng(1)), ParameterError);
}

TEST_CASE("load_idx reads big-endian IDX files") {
  const auto im = temp_path("images.idx");
  const auto lb = temp_path("labels.idx");
  write_idx_fixture(im, lb);
  const auto ds = load_idx(im, lb, 3);
  CHECK(ds.size() == 3);
  CHECK(ds.dim() == 4);
  CHECK(ds.labels == std::vector<std::size_t>{1, 0, 2});
  CHECK(ds.features(0, 1) == 1.0);
  CHECK(ds.features(0, 2) == 51.0 / 255.0);

  write_idx_fixture(im, lb, 0x802);
  try {
    load_idx(im, lb, 3);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  write_idx_fixture(im, lb, 0x803, 3);
  try {
    load_idx(im, lb, 3);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 16 + 2 * 4 + 1);
  }
  write_idx_fixture(im, lb, 0x803, 0, 7);
  try {
    load_idx(im, lb, 3);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 10);
  }
  CHECK_THROWS_AS(load_idx(temp_path("missing.idx"), lb, 3), IoError);
  std::filesystem::remove(im);
  std::filesystem::remove(lb);
}

#include "spherefed/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

constexpr char kDumpMagic[4] = {'S', 'F', 'F', 'D'};

std::string format_double(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& token, const std::filesystem::path& path) {
  double v = 0.0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), v);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
    throw IoError("bad number '" + token + "' in " + path.string());
  }
  return v;
}

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw IoError("truncated feature dump " + path.string());
  }
  return value;
}

}  // namespace

AlignmentStats classifier_alignment(std::span<const Matrix> heads) {
  if (heads.size() < 2) throw ParameterError("alignment needs at least two client heads");
  const std::size_t c = heads.front().rows();
  const std::size_t l = heads.front().cols();
  for (const auto& h : heads) {
    if (h.rows() != c || h.cols() != l) throw ShapeError("client heads differ in shape");
  }
  const std::size_t k = heads.size();
  // Row norms once per client.
  std::vector<std::vector<double>> norms(k, std::vector<double>(c));
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t cls = 0; cls < c; ++cls) norms[a][cls] = norm2(heads[a].row(cls));

  AlignmentStats st;
  st.class_cosine.assign(c, 0.0);
  st.class_norm_diff.assign(c, 0.0);
  double cos_sum = 0.0;
  double diff_sum = 0.0;
  std::size_t cos_count = 0;
  std::size_t diff_count = 0;
  for (std::size_t cls = 0; cls < c; ++cls) {
    double ccos = 0.0;
    double cdiff = 0.0;
    std::size_t ncos = 0;
    std::size_t ndiff = 0;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a + 1; b < k; ++b) {
        const double na = norms[a][cls];
        const double nb = norms[b][cls];
        cdiff += std::abs(na - nb);
        ++ndiff;
        if (na == 0.0 || nb == 0.0) {
          ++st.skipped;
          continue;
        }
        const auto ra = heads[a].row(cls);
        const auto rb = heads[b].row(cls);
        // Bit-identical rows are exactly parallel; skip the rounding in the quotient.
        ccos += std::equal(ra.begin(), ra.end(), rb.begin()) ? 1.0 : dot(ra, rb) / (na * nb);
        ++ncos;
      }
    }
    st.class_cosine[cls] = ncos ? ccos / static_cast<double>(ncos) : 0.0;
    st.class_norm_diff[cls] = cdiff / static_cast<double>(ndiff);
    cos_sum += ccos;
    diff_sum += cdiff;
    cos_count += ncos;
    diff_count += ndiff;
  }
  st.mean_cosine = cos_count ? cos_sum / static_cast<double>(cos_count) : 0.0;
  st.mean_norm_diff = diff_sum / static_cast<double>(diff_count);
  return st;
}

double accuracy(const Model& model, const Dataset& eval) {
  if (eval.size() == 0) throw InputError("accuracy on an empty evaluation set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto z = extract_feature(model.extractor, eval.features.row(i),
                                   model.head.normalize_features);
    if (predict(head_logits(model.head, z)) == eval.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eval.size());
}

double accuracy_with_head(const MlpExtractor& extractor, const Matrix& head_weights,
                          const Dataset& eval) {
  Model m{extractor, ClassifierHead{head_weights, true, true, 1.0}};
  return accuracy(m, eval);
}

CommCost cost_classifier_comm(CostStrategy strategy, std::size_t l, std::size_t c, std::size_t k,
                              std::size_t rounds, std::size_t bytes_per_param) {
  CommCost cost;
  const std::uint64_t bpp = bytes_per_param;
  if (strategy == CostStrategy::kTrainableHead) {
    cost.per_client = std::uint64_t{l} * c * bpp * 2 * rounds;
  } else {
    cost.per_client = std::uint64_t{l} * (l + c) * bpp;
  }
  cost.total = cost.per_client * k;
  return cost;
}

FfcFlops cost_ffc_flops(std::size_t l, std::size_t c, std::span<const std::size_t> dataset_sizes) {
  FfcFlops f;
  for (std::size_t n : dataset_sizes) {
    const std::uint64_t v = 2ULL * l * n * (l + c);
    f.per_client.push_back(v);
    f.client_total += v;
  }
  const double ld = static_cast<double>(l);
  f.server = 2.0 / 3.0 * ld * ld * ld + 2.0 * ld * ld * static_cast<double>(c);
  return f;
}

std::uint64_t trainable_head_client_flops(std::size_t l, std::size_t c, std::size_t samples_seen,
                                          std::size_t steps) {
  return 2ULL * l * c * samples_seen + 2ULL * l * c * steps;
}

std::uint64_t trainable_head_server_flops(std::size_t l, std::size_t c, std::size_t clients) {
  return 2ULL * l * c * clients;
}

CostLedger::CostLedger(std::string strategy, std::size_t num_clients)
    : strategy_(std::move(strategy)),
      upload_(num_clients, 0),
      download_(num_clients, 0),
      client_flops_(num_clients, 0) {}

void CostLedger::add_client(std::size_t client, std::uint64_t upload_bytes,
                            std::uint64_t download_bytes, std::uint64_t flops) {
  upload_.at(client) += upload_bytes;
  download_.at(client) += download_bytes;
  client_flops_.at(client) += flops;
}

void CostLedger::add_server(double flops) {
  if (flops < 0.0) throw ParameterError("ledger entries must be nonnegative");
  server_flops_ += flops;
}

std::uint64_t CostLedger::total_upload_bytes() const {
  return std::accumulate(upload_.begin(), upload_.end(), std::uint64_t{0});
}

std::uint64_t CostLedger::total_download_bytes() const {
  return std::accumulate(download_.begin(), download_.end(), std::uint64_t{0});
}

std::uint64_t CostLedger::total_client_flops() const {
  return std::accumulate(client_flops_.begin(), client_flops_.end(), std::uint64_t{0});
}

void dump_features(const MlpExtractor& extractor, const Dataset& data,
                   std::span<const std::size_t> indices, std::span<const std::size_t> client_ids,
                   std::size_t num_clients, const std::filesystem::path& path,
                   FeatureFormat format) {
  if (indices.empty()) throw InputError("feature dump needs a nonempty subset");
  if (client_ids.size() != indices.size()) throw ShapeError("one client id per dumped sample");
  const std::size_t l = extractor.feature_dim();
  if (format == FeatureFormat::kText) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write feature dump " + path.string());
    out << l << ' ' << data.num_classes << ' ' << num_clients << '\n';
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const std::size_t i = indices[r];
      const auto z = extract_feature(extractor, data.features.row(i), true);
      out << client_ids[r] << ' ' << data.labels[i];
      for (double x : z) out << ' ' << format_double(x);
      out << '\n';
    }
    if (!out) throw IoError("failed writing feature dump " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write feature dump " + path.string());
  out.write(kDumpMagic, 4);
  write_pod(out, static_cast<std::uint64_t>(l));
  write_pod(out, static_cast<std::uint64_t>(data.num_classes));
  write_pod(out, static_cast<std::uint64_t>(num_clients));
  write_pod(out, static_cast<std::uint64_t>(indices.size()));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    const auto z = extract_feature(extractor, data.features.row(i), true);
    write_pod(out, static_cast<std::uint64_t>(client_ids[r]));
    write_pod(out, static_cast<std::uint64_t>(data.labels[i]));
    out.write(reinterpret_cast<const char*>(z.data()), static_cast<std::streamsize>(z.size() * 8));
  }
  if (!out) throw IoError("failed writing feature dump " + path.string());
}

FeatureDump read_features(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open feature dump " + path.string());
  char magic[4] = {};
  probe.read(magic, 4);
  FeatureDump dump;
  if (probe.gcount() == 4 && std::memcmp(magic, kDumpMagic, 4) == 0) {
    dump.feature_dim = read_pod<std::uint64_t>(probe, path);
    dump.num_classes = read_pod<std::uint64_t>(probe, path);
    dump.num_clients = read_pod<std::uint64_t>(probe, path);
    const auto n = read_pod<std::uint64_t>(probe, path);
    dump.features = Matrix(n, dump.feature_dim);
    for (std::size_t r = 0; r < n; ++r) {
      dump.client_ids.push_back(read_pod<std::uint64_t>(probe, path));
      dump.labels.push_back(read_pod<std::uint64_t>(probe, path));
      auto row = dump.features.row(r);
      probe.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 8));
      if (probe.gcount() != static_cast<std::streamsize>(row.size() * 8)) {
        throw IoError("truncated feature dump " + path.string());
      }
    }
    return dump;
  }

  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty feature dump " + path.string());
  {
    std::istringstream header(line);
    if (!(header >> dump.feature_dim >> dump.num_classes >> dump.num_clients)) {
      throw IoError("bad feature dump header in " + path.string());
    }
  }
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream rec(line);
    std::size_t client = 0;
    std::size_t label = 0;
    if (!(rec >> client >> label)) throw IoError("bad feature record in " + path.string());
    dump.client_ids.push_back(client);
    dump.labels.push_back(label);
    std::string tok;
    std::size_t count = 0;
    while (rec >> tok) {
      values.push_back(parse_double(tok, path));
      ++count;
    }
    if (count != dump.feature_dim) throw IoError("feature record has wrong width in " + path.string());
  }
  dump.features = Matrix(dump.labels.size(), dump.feature_dim, std::move(values));
  return dump;
}

}  // namespace spherefed

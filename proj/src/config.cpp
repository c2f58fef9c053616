#include "spherefed/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "spherefed/errors.hpp"

namespace spherefed {

namespace {

using nlohmann::json;

// Walks one JSON object, remembering which keys were read so leftovers can
// be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    if (!j_.contains(key)) return Section(kEmpty, key_path(key));
    return Section(j_.at(key), key_path(key));
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(key_path(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(key_path(key), "must be finite");
    return x;
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(key_path(key), "expected a nonnegative integer");
    }
    return v.get<std::size_t>();
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    return static_cast<std::uint64_t>(count(key, static_cast<std::size_t>(fallback)));
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(key_path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(key_path(key), "expected a string");
    return v.get<std::string>();
  }

  std::string choice(const std::string& key, const std::string& fallback,
                     std::initializer_list<const char*> options) {
    const std::string s = string(key, fallback);
    std::string listed;
    for (const char* o : options) {
      if (s == o) return s;
      listed += listed.empty() ? o : std::string(", ") + o;
    }
    throw ConfigError(key_path(key), "unknown value '" + s + "' (expected one of: " + listed + ")");
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> fallback) {
    if (!has(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(key_path(key), "expected an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) throw ConfigError(key_path(key), "expected nonnegative integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  std::vector<double> numbers(const std::string& key) {
    if (!has(key)) return {};
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(key_path(key), "expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(key_path(key), "expected numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(key_path(k), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Strategy parse_strategy(const std::string& s) {
  if (s == "fedavg") return Strategy::kFedAvg;
  if (s == "fedprox") return Strategy::kFedProx;
  if (s == "fednova") return Strategy::kFedNova;
  return Strategy::kFedOpt;
}

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "multistep") return ScheduleKind::kMultiStep;
  return ScheduleKind::kCosine;
}

std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kMultiStep: return "multistep";
    case ScheduleKind::kCosine: return "cosine";
  }
  return "cosine";
}

std::string calibration_name(CalibrationMode m) {
  switch (m) {
    case CalibrationMode::kOff: return "off";
    case CalibrationMode::kOnce: return "once";
    case CalibrationMode::kEvery: return "every";
  }
  return "off";
}

void require(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError(key, message);
}

void check_fraction(double x, const std::string& key) {
  require(x >= 0.0 && x < 1.0, key, "must lie in [0, 1)");
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kFedAvg: return "fedavg";
    case Strategy::kFedProx: return "fedprox";
    case Strategy::kFedNova: return "fednova";
    case Strategy::kFedOpt: return "fedopt";
  }
  return "fedavg";
}

std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::kTrainable: return "trainable";
    case HeadKind::kFixedRandom: return "fixed-random";
    case HeadKind::kFixedOrthonormal:
    case HeadKind::kFixedTammes: return "fixed-orthonormal";
  }
  return "trainable";
}

std::string to_string(LossKind l) { return l == LossKind::kMse ? "mse" : "ce"; }

std::string alpha_label(const std::optional<double>& alpha) {
  if (!alpha) return "iid";
  std::ostringstream os;
  os << *alpha;
  return os.str();
}

RunConfig parse_config(const json& j) {
  RunConfig cfg;
  Section root(j, "");
  cfg.seed = root.u64("seed", cfg.seed);
  cfg.threads = root.count("threads", cfg.threads);
  require(cfg.threads >= 1, "threads", "must be at least 1");

  {
    Section d = root.child("dataset");
    auto& ds = cfg.dataset;
    ds.kind = d.choice("kind", ds.kind, {"synthetic", "idx"});
    ds.classes = d.count("classes", ds.classes);
    ds.test_fraction = d.number("test_fraction", ds.test_fraction);
    ds.validation_fraction = d.number("validation_fraction", ds.validation_fraction);
    check_fraction(ds.validation_fraction, d.key_path("validation_fraction"));
    require(ds.classes >= 2, d.key_path("classes"), "need at least two classes");
    if (ds.kind == "synthetic") {
      ds.dim = d.count("dim", ds.dim);
      ds.per_class = d.count("per_class", ds.per_class);
      ds.spread = d.number("spread", ds.spread);
      require(ds.dim >= ds.classes, d.key_path("dim"),
              "synthetic class means are orthogonal, so dim must be >= classes");
      require(ds.per_class >= 1, d.key_path("per_class"), "must be positive");
      require(ds.spread >= 0.0, d.key_path("spread"), "must be nonnegative");
      require(ds.test_fraction > 0.0 && ds.test_fraction < 1.0, d.key_path("test_fraction"),
              "must lie in (0, 1)");
    } else {
      ds.train_images = d.string("train_images", "");
      ds.train_labels = d.string("train_labels", "");
      ds.test_images = d.string("test_images", "");
      ds.test_labels = d.string("test_labels", "");
      for (const char* k : {"train_images", "train_labels", "test_images", "test_labels"}) {
        require(!d.string(k, "").empty(), d.key_path(k), "required for an idx dataset");
      }
    }
    d.finish();
  }

  {
    Section p = root.child("partition");
    cfg.clients = p.count("clients", cfg.clients);
    require(cfg.clients >= 1, p.key_path("clients"), "must be at least 1");
    if (p.has("alpha")) {
      const json& a = p.raw("alpha");
      if (a.is_string()) {
        require(a.get<std::string>() == "iid", p.key_path("alpha"), "expected a number or \"iid\"");
        cfg.alpha.reset();
      } else {
        cfg.alpha = p.number("alpha", 0.1);
        require(*cfg.alpha > 0.0, p.key_path("alpha"), "must be positive");
      }
    }
    p.finish();
  }

  bool lr_set = false;
  {
    Section m = root.child("model");
    cfg.hidden = m.counts("hidden", cfg.hidden);
    for (std::size_t h : cfg.hidden) require(h >= 1, m.key_path("hidden"), "layer widths must be positive");
    cfg.feature_dim = m.count("feature_dim", cfg.feature_dim);
    require(cfg.feature_dim >= 1, m.key_path("feature_dim"), "must be positive");
    const std::string head =
        m.choice("head", "fixed-orthonormal", {"trainable", "fixed-random", "fixed-orthonormal"});
    const std::string init = m.choice("orthonormal_init", "qr", {"qr", "tammes"});
    if (head == "trainable") cfg.head = HeadKind::kTrainable;
    else if (head == "fixed-random") cfg.head = HeadKind::kFixedRandom;
    else cfg.head = init == "tammes" ? HeadKind::kFixedTammes : HeadKind::kFixedOrthonormal;
    require(init == "qr" || head == "fixed-orthonormal", m.key_path("orthonormal_init"),
            "only applies to a fixed-orthonormal head");
    cfg.loss = m.choice("loss", "mse", {"mse", "ce"}) == "mse" ? LossKind::kMse
                                                               : LossKind::kCrossEntropy;
    const bool spherical = head == "fixed-orthonormal";
    cfg.normalize_features = m.boolean("normalize_features", spherical);
    require(cfg.normalize_features || !spherical, m.key_path("normalize_features"),
            "a fixed-orthonormal head always works on normalized features");
    if (m.has("tau")) {
      cfg.tau = m.number("tau", 1.0);
      require(cfg.tau > 0.0, m.key_path("tau"), "must be positive");
    } else if (spherical && cfg.loss == LossKind::kCrossEntropy) {
      cfg.tau_defaulted = true;
      cfg.warnings.push_back(
          "model.tau unset for cross-entropy on a fixed-orthonormal head; using tau = 1, "
          "which bounds the logits to [-1, 1] and typically trains poorly");
    }
    if (spherical && cfg.dataset.kind == "synthetic") {
      require(cfg.dataset.classes <= cfg.feature_dim, m.key_path("feature_dim"),
              "a fixed-orthonormal head needs classes (" + std::to_string(cfg.dataset.classes) +
                  ") <= feature_dim (" + std::to_string(cfg.feature_dim) +
                  "); raise feature_dim or use another head");
    }
    m.finish();
  }

  {
    Section t = root.child("training");
    auto& f = cfg.fed;
    f.strategy = parse_strategy(
        t.choice("strategy", "fedavg", {"fedavg", "fedprox", "fednova", "fedopt"}));
    f.rounds = t.count("rounds", f.rounds);
    f.local_epochs = t.count("local_epochs", f.local_epochs);
    f.batch_size = t.count("batch_size", f.batch_size);
    lr_set = t.has("lr");
    // Unset lr follows the loss: 0.5 for the MSE objective, 0.1 for cross-entropy.
    f.lr = t.number("lr", cfg.loss == LossKind::kMse ? 0.5 : 0.1);
    f.momentum = t.number("momentum", f.momentum);
    f.weight_decay = t.number("weight_decay", f.weight_decay);
    f.schedule = parse_schedule(t.choice("schedule", "cosine", {"constant", "cosine", "multistep"}));
    f.milestones = t.counts("milestones", f.milestones);
    f.gamma = t.number("gamma", f.gamma);
    f.prox_mu = t.number("prox_mu", f.prox_mu);
    f.server_lr = t.number("server_lr", f.server_lr);
    f.server_momentum = t.number("server_momentum", f.server_momentum);
    f.participation = t.number("participation", f.participation);
    f.bytes_per_param = t.count("bytes_per_param", f.bytes_per_param);
    require(f.rounds >= 1, t.key_path("rounds"), "must be at least 1");
    require(f.local_epochs >= 1, t.key_path("local_epochs"), "must be at least 1");
    require(f.batch_size >= 1, t.key_path("batch_size"), "must be at least 1");
    require(f.lr > 0.0, t.key_path("lr"), "must be positive");
    require(f.momentum >= 0.0 && f.momentum < 1.0, t.key_path("momentum"), "must lie in [0, 1)");
    require(f.weight_decay >= 0.0, t.key_path("weight_decay"), "must be nonnegative");
    require(f.prox_mu >= 0.0, t.key_path("prox_mu"), "must be nonnegative");
    require(f.server_lr > 0.0, t.key_path("server_lr"), "must be positive");
    require(f.server_momentum >= 0.0 && f.server_momentum < 1.0, t.key_path("server_momentum"),
            "must lie in [0, 1)");
    require(f.participation > 0.0 && f.participation <= 1.0, t.key_path("participation"),
            "must lie in (0, 1]");
    require(f.bytes_per_param >= 1, t.key_path("bytes_per_param"), "must be positive");
    t.finish();
  }
  cfg.fed.loss = cfg.loss;
  cfg.fed.threads = cfg.threads;
  cfg.fed.seed = cfg.seed;
  cfg.lr_defaulted = !lr_set;

  {
    Section c = root.child("calibration");
    auto& cal = cfg.fed.calibration;
    const std::string mode = c.choice("mode", "off", {"off", "once", "every"});
    cal.mode = mode == "off" ? CalibrationMode::kOff
               : mode == "once" ? CalibrationMode::kOnce
                                : CalibrationMode::kEvery;
    cal.every = c.count("every", cal.every);
    cal.lambda = c.number("lambda", cal.lambda);
    cfg.lambda_grid = c.numbers("lambda_grid");
    require(cal.every >= 1, c.key_path("every"), "must be at least 1");
    require(cal.lambda >= 0.0, c.key_path("lambda"), "must be nonnegative");
    for (double l : cfg.lambda_grid) require(l >= 0.0, c.key_path("lambda_grid"), "entries must be nonnegative");
    c.finish();
  }

  {
    Section o = root.child("output");
    cfg.out_dir = o.string("dir", cfg.out_dir.string());
    cfg.dump_features = o.boolean("dump_features", cfg.dump_features);
    cfg.feature_format =
        o.choice("feature_format", "text", {"text", "binary"}) == "text" ? FeatureFormat::kText
                                                                         : FeatureFormat::kBinary;
    o.finish();
  }

  root.finish();
  try {
    validate(cfg.fed);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("training", e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const RunConfig& cfg) {
  json ds;
  ds["kind"] = cfg.dataset.kind;
  ds["classes"] = cfg.dataset.classes;
  ds["test_fraction"] = cfg.dataset.test_fraction;
  ds["validation_fraction"] = cfg.dataset.validation_fraction;
  if (cfg.dataset.kind == "synthetic") {
    ds["dim"] = cfg.dataset.dim;
    ds["per_class"] = cfg.dataset.per_class;
    ds["spread"] = cfg.dataset.spread;
  } else {
    ds["train_images"] = cfg.dataset.train_images;
    ds["train_labels"] = cfg.dataset.train_labels;
    ds["test_images"] = cfg.dataset.test_images;
    ds["test_labels"] = cfg.dataset.test_labels;
  }

  json part;
  part["clients"] = cfg.clients;
  if (cfg.alpha) part["alpha"] = *cfg.alpha;
  else part["alpha"] = "iid";

  json model;
  model["hidden"] = cfg.hidden;
  model["feature_dim"] = cfg.feature_dim;
  model["head"] = to_string(cfg.head);
  model["orthonormal_init"] = cfg.head == HeadKind::kFixedTammes ? "tammes" : "qr";
  model["loss"] = to_string(cfg.loss);
  model["tau"] = cfg.tau;
  model["normalize_features"] = cfg.normalize_features;

  const auto& f = cfg.fed;
  json tr;
  tr["strategy"] = to_string(f.strategy);
  tr["rounds"] = f.rounds;
  tr["local_epochs"] = f.local_epochs;
  tr["batch_size"] = f.batch_size;
  tr["lr"] = f.lr;
  tr["momentum"] = f.momentum;
  tr["weight_decay"] = f.weight_decay;
  tr["schedule"] = schedule_name(f.schedule);
  tr["milestones"] = f.milestones;
  tr["gamma"] = f.gamma;
  tr["prox_mu"] = f.prox_mu;
  tr["server_lr"] = f.server_lr;
  tr["server_momentum"] = f.server_momentum;
  tr["participation"] = f.participation;
  tr["bytes_per_param"] = f.bytes_per_param;

  json cal;
  cal["mode"] = calibration_name(f.calibration.mode);
  cal["every"] = f.calibration.every;
  cal["lambda"] = f.calibration.lambda;
  cal["lambda_grid"] = cfg.lambda_grid;

  json out;
  out["dir"] = cfg.out_dir.generic_string();
  out["dump_features"] = cfg.dump_features;
  out["feature_format"] = cfg.feature_format == FeatureFormat::kText ? "text" : "binary";

  json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["dataset"] = ds;
  j["partition"] = part;
  j["model"] = model;
  j["training"] = tr;
  j["calibration"] = cal;
  j["output"] = out;
  return j;
}

RunData build_data(const RunConfig& cfg) {
  const Rng root(cfg.seed);
  RunData d;
  Dataset full;
  if (cfg.dataset.kind == "synthetic") {
    const auto& s = cfg.dataset;
    full = make_synthetic(s.classes, s.dim, s.per_class, s.spread, root.child(1));
    const auto split = stratified_holdout(full, s.test_fraction, root.child(2));
    d.train = subset(full, split.kept);
    d.test = subset(full, split.held_out);
  } else {
    d.train = load_idx(cfg.dataset.train_images, cfg.dataset.train_labels, cfg.dataset.classes);
    d.test = load_idx(cfg.dataset.test_images, cfg.dataset.test_labels, cfg.dataset.classes);
    validate(d.train, false);
    validate(d.test, false);
    if (d.train.dim() != d.test.dim()) {
      throw ConfigError("dataset.test_images", "train and test images differ in size");
    }
  }
  if (cfg.dataset.validation_fraction > 0.0) {
    const auto split = stratified_holdout(d.train, cfg.dataset.validation_fraction, root.child(5));
    d.validation = subset(d.train, split.held_out);
    d.train = subset(d.train, split.kept);
  }
  if (cfg.clients > d.train.size()) {
    throw ConfigError("partition.clients", "more clients than training samples");
  }
  d.partition = make_partition(d.train, cfg.clients, cfg.alpha, root.child(3));
  return d;
}

Model build_model(const RunConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
  const bool spherical =
      cfg.head == HeadKind::kFixedOrthonormal || cfg.head == HeadKind::kFixedTammes;
  if (spherical && num_classes > cfg.feature_dim) {
    throw ConfigError("model.feature_dim", "a fixed-orthonormal head needs classes <= feature_dim");
  }
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(cfg.feature_dim);
  Rng rng = Rng(cfg.seed).child(4);
  return make_model(std::move(dims), num_classes, cfg.head, cfg.normalize_features, cfg.tau, rng);
}

}  // namespace spherefed

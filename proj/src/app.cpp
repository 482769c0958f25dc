#include "automix/app.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "automix/errors.hpp"
#include "automix/metrics.hpp"
#include "automix/mix_policies.hpp"
#include "automix/ops.hpp"
#include "automix/selfcheck.hpp"

namespace automix::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_stamp(const char* format) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}

// ---- config -------------------------------------------------------------

std::string joined(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

const json& field(const json& obj, const std::string& key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError("missing field '" + joined(path, key) + "'");
  return *it;
}

std::size_t get_size(const json& obj, const std::string& key, const std::string& path) {
  const json& v = field(obj, key, path);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("field '" + joined(path, key) + "': expected a non-negative integer, got " +
                      v.dump());
  }
  return v.get<std::size_t>();
}

double get_double(const json& obj, const std::string& key, const std::string& path) {
  const json& v = field(obj, key, path);
  if (!v.is_number()) {
    throw ConfigError("field '" + joined(path, key) + "': expected a number, got " + v.dump());
  }
  return v.get<double>();
}

bool get_bool(const json& obj, const std::string& key, const std::string& path) {
  const json& v = field(obj, key, path);
  if (!v.is_boolean()) {
    throw ConfigError("field '" + joined(path, key) + "': expected true or false, got " +
                      v.dump());
  }
  return v.get<bool>();
}

std::string get_string(const json& obj, const std::string& key, const std::string& path) {
  const json& v = field(obj, key, path);
  if (!v.is_string()) {
    throw ConfigError("field '" + joined(path, key) + "': expected a string, got " + v.dump());
  }
  return v.get<std::string>();
}

std::vector<std::size_t> get_size_list(const json& obj, const std::string& key,
                                       const std::string& path) {
  const json& v = field(obj, key, path);
  std::vector<std::size_t> out;
  bool ok = v.is_array();
  if (ok) {
    for (const auto& e : v) {
      if (!e.is_number_integer() || e.get<long long>() < 0) {
        ok = false;
        break;
      }
      out.push_back(e.get<std::size_t>());
    }
  }
  if (!ok) {
    throw ConfigError("field '" + joined(path, key) +
                      "': expected a list of non-negative integers, got " + v.dump());
  }
  return out;
}

std::vector<std::string> get_string_list(const json& obj, const std::string& key,
                                         const std::string& path) {
  const json& v = field(obj, key, path);
  std::vector<std::string> out;
  bool ok = v.is_array();
  if (ok) {
    for (const auto& e : v) {
      if (!e.is_string()) {
        ok = false;
        break;
      }
      out.push_back(e.get<std::string>());
    }
  }
  if (!ok) {
    throw ConfigError("field '" + joined(path, key) + "': expected a list of strings, got " +
                      v.dump());
  }
  return out;
}

void reject_unknown(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) {
    throw ConfigError((path.empty() ? std::string("config") : "field '" + path + "'") +
                      ": expected an object");
  }
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (!known.contains(it.key())) {
      throw ConfigError("unknown config field '" + joined(path, it.key()) + "'");
    }
    const json& k = known.at(it.key());
    if (k.is_object()) reject_unknown(it.value(), k, joined(path, it.key()));
  }
}

void merge_into(json& base, const json& layer, const std::string& path) {
  reject_unknown(layer, base, path);
  for (auto it = layer.begin(); it != layer.end(); ++it) {
    json& target = base[it.key()];
    if (target.is_object()) {
      merge_into(target, it.value(), joined(path, it.key()));
    } else {
      target = it.value();
    }
  }
}

double parse_number(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) {
    throw ConfigError("option --" + key + ": expected a number, got '" + text + "'");
  }
  return v;
}

json parse_integer(const std::string& key, const std::string& text) {
  const double v = parse_number(key, text);
  if (v < 0 || std::floor(v) != v) {
    throw ConfigError("option --" + key + ": expected a non-negative integer, got '" + text +
                      "'");
  }
  return static_cast<std::uint64_t>(v);
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(text);
  while (std::getline(is, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

// Parses `text` into the JSON type of the field it overrides.
json parse_override(const std::string& key, const json& current, const std::string& text) {
  if (current.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("option --" + key + ": expected true or false, got '" + text + "'");
  }
  if (current.is_number_integer()) return parse_integer(key, text);
  if (current.is_number()) return parse_number(key, text);
  if (current.is_null()) {
    if (text == "null" || text == "none") return nullptr;
    return parse_number(key, text);
  }
  if (current.is_array()) {
    json arr = json::array();
    const bool numeric = !current.empty() && current.front().is_number();
    for (const auto& part : split_list(text, ',')) {
      arr.push_back(numeric ? parse_integer(key, part) : json(part));
    }
    return arr;
  }
  if (current.is_object()) {
    try {
      return json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("option --" + key + ": expected a JSON object");
    }
  }
  return text;
}

void apply_override(json& doc, const std::string& key, const std::string& value) {
  json* node = &doc;
  for (const auto& part : split_list(key, '.')) {
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown option --" + key);
    }
    node = &(*node)[part];
  }
  if (node == &doc) throw ConfigError("empty option name");
  *node = parse_override(key, *node, value);
}

AppConfig resolve_from_doc(const std::optional<json>& file_doc, const Overrides& overrides) {
  json doc = to_json(default_config());
  if (file_doc) merge_into(doc, *file_doc, "");
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  return config_from_json(doc);
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// ---- data -----------------------------------------------------------------

fs::path data_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("AUTOMIX_DATA_DIR"); root && *root) {
      return fs::path(root) / path;
    }
  }
  return path;
}

LabeledDataset concat_datasets(std::vector<LabeledDataset> parts, const std::string& split) {
  if (parts.size() == 1) {
    parts.front().split = split;
    return std::move(parts.front());
  }
  LabeledDataset out;
  out.num_classes = parts.front().num_classes;
  out.split = split;
  Shape shape = parts.front().images.shape();
  shape[0] = 0;
  std::vector<double> values;
  for (const auto& p : parts) {
    if (p.images.dim(1) != shape[1] || p.images.dim(2) != shape[2] ||
        p.images.dim(3) != shape[3]) {
      throw DatasetError("dataset files have different image shapes");
    }
    shape[0] += p.size();
    values.insert(values.end(), p.images.data().begin(), p.images.data().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.images = Tensor(shape, std::move(values));
  return out;
}

// ---- run directories -------------------------------------------------------

fs::path fresh_dir(const fs::path& root, const std::string& stem) {
  fs::create_directories(root);
  for (int i = 1;; ++i) {
    fs::path candidate = root / (i == 1 ? stem : stem + "-" + std::to_string(i));
    if (fs::create_directory(candidate)) return candidate;
  }
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  return os;
}

void write_json(const fs::path& path, const json& doc) {
  auto os = open_out(path);
  os << doc.dump(2) << '\n';
}

std::vector<double> read_column(const fs::path& csv, const std::string& column) {
  std::ifstream is(csv);
  if (!is) throw Error("cannot open '" + csv.string() + "'");
  std::string line;
  std::getline(is, line);
  const auto header = split_list(line, ',');
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) throw FormatError(csv.string() + ": no column '" + column + "'");
  const auto col = static_cast<std::size_t>(it - header.begin());
  std::vector<double> out;
  while (std::getline(is, line)) {
    auto cells = split_list(line, ',');
    if (cells.size() != header.size()) throw FormatError(csv.string() + ": ragged row");
    out.push_back(std::stod(cells[col]));
  }
  return out;
}

// ---- checkpoint layout -----------------------------------------------------

Tensor size_vector(const std::vector<std::size_t>& v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::vector<double>(v.begin(), v.end()));
}

Tensor scalar_vector(double v) { return Tensor({1}, {v}); }

const Tensor& record(const ParamSet& all, const std::string& name) {
  if (!all.contains(name)) throw FormatError("checkpoint has no record '" + name + "'");
  return all.at(name);
}

std::vector<std::size_t> sizes_of(const Tensor& t, const std::string& name) {
  std::vector<std::size_t> out;
  for (double v : t.data()) {
    if (!(v >= 0) || std::floor(v) != v) {
      throw FormatError("checkpoint record '" + name + "' is not a list of sizes");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::size_t size_of(const ParamSet& all, const std::string& name) {
  auto v = sizes_of(record(all, name), name);
  if (v.size() != 1) throw FormatError("checkpoint record '" + name + "' must hold one value");
  return v.front();
}

// ---- command helpers -------------------------------------------------------

struct CommandContext {
  std::ostream& out;
  std::ostream& err;
};

Overrides parse_extras(const std::vector<std::string>& extras) {
  Overrides out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) {
      throw ConfigError("unexpected argument '" + a + "'");
    }
    std::string key = a.substr(2), value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("option --" + key + " needs a value");
      value = extras[++i];
    }
    std::replace(key.begin(), key.end(), '-', '_');
    out.emplace_back(key, value);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& what, const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split_list(text, ',')) out.push_back(parse_number(what, part));
  if (out.empty()) throw ConfigError("option --" + what + ": empty list");
  return out;
}

// Config of a stored run: manifest next to the checkpoint, else defaults,
// then any explicit file and flags on top.
AppConfig config_for_checkpoint(const fs::path& checkpoint,
                                const std::optional<std::string>& config_path,
                                const Overrides& overrides) {
  std::optional<json> doc;
  const fs::path manifest = checkpoint.parent_path() / "manifest.json";
  if (config_path) {
    doc = read_json_file(*config_path);
  } else if (fs::exists(manifest)) {
    json m = read_json_file(manifest);
    if (m.contains("config")) doc = m["config"];
  }
  return resolve_from_doc(doc, overrides);
}

LabeledDataset pick_split(Datasets& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "test") {
    if (ds.test.size() == 0) throw ConfigError("the configured data has no test split");
    return ds.test;
  }
  throw ConfigError("--split must be 'train' or 'test', got '" + split + "'");
}

void check_compatible(const LoadedModel& model, const LabeledDataset& ds) {
  if (ds.channels() != model.encoder.input_channels ||
      ds.num_classes != model.encoder.num_classes) {
    throw ConfigError("dataset (" + std::to_string(ds.channels()) + " channels, " +
                      std::to_string(ds.num_classes) + " classes) does not match the checkpoint (" +
                      std::to_string(model.encoder.input_channels) + " channels, " +
                      std::to_string(model.encoder.num_classes) + " classes)");
  }
}

std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string lambda_tag(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", lambda);
  return buf;
}

// ---- commands --------------------------------------------------------------

int cmd_train(CommandContext& ctx, const std::optional<std::string>& config_path,
              const std::string& runs_dir, const Overrides& overrides) {
  AppConfig config = resolve_from_doc(
      config_path ? std::optional<json>(read_json_file(*config_path)) : std::nullopt, overrides);
  TrainRun run = train_run(config, runs_dir, &ctx.err);
  const auto& last = run.fit.history;
  ctx.out << "run_dir " << run.dir.string() << '\n';
  if (!last.empty()) {
    ctx.out << "final_train_top1 " << fmt17(last.back().top1) << '\n';
    if (last.back().test_top1) ctx.out << "final_test_top1 " << fmt17(*last.back().test_top1) << '\n';
  }
  return kExitOk;
}

int cmd_eval(CommandContext& ctx, const std::string& checkpoint,
             const std::optional<std::string>& config_path, const std::string& split,
             const std::vector<double>& fgsm, const std::optional<std::string>& encoder_choice,
             const std::optional<std::string>& out_dir, const Overrides& overrides) {
  LoadedModel model = load_model(checkpoint);
  if (encoder_choice) {
    if (*encoder_choice != "student" && *encoder_choice != "teacher") {
      throw ConfigError("--encoder must be 'student' or 'teacher'");
    }
    model.eval_teacher = *encoder_choice == "teacher";
  }
  AppConfig config = config_for_checkpoint(checkpoint, config_path, overrides);
  Datasets data = load_datasets(config.data);
  // Evaluate with the statistics the model was trained with.
  LabeledDataset raw_split = pick_split(data, split);
  raw_split.images = standardize(destandardize(raw_split.images, data.stats), model.stats);
  check_compatible(model, raw_split);

  Encoder encoder(model.encoder);
  const ParamSet& params = model.eval_params();
  Tensor logits = predict_logits(encoder, params, raw_split.images);
  const double top1 = top1_accuracy(logits, raw_split.labels);
  CalibrationReport report = calibration_from_logits(logits, raw_split.labels);

  const fs::path dir = out_dir ? fs::path(*out_dir) : fs::path(checkpoint).parent_path();
  fs::create_directories(dir);
  {
    auto os = open_out(dir / ("reliability_" + split + ".csv"));
    write_reliability_csv(os, report);
  }

  ctx.out << "split " << split << " n " << raw_split.size() << '\n';
  ctx.out << "top1 " << fmt17(top1) << '\n';
  ctx.out << "ece " << fmt17(report.ece) << '\n';
  for (double eps : fgsm) {
    const double e = fgsm_error(encoder, params, raw_split.images, raw_split.labels, eps, model.stats);
    ctx.out << "fgsm_error eps " << fmt17(eps) << " error " << fmt17(e) << '\n';
  }

  // Mixed-sample containment metrics at lambda = 0.5 with the stored Mix Block.
  Rng rng(config.train.seed ^ 0x6d69786564ULL);
  auto order = make_epoch_batches(raw_split, 100, rng);
  auto os = open_out(dir / ("mixed_topk_" + split + ".csv"));
  os << "batch,count,top1_in_pair,top2_equals_pair\n" << std::setprecision(17);
  double sum_in = 0.0, sum_eq = 0.0;
  std::size_t counted = 0;
  for (std::size_t b = 0; b < order.size(); ++b) {
    Batch batch = make_batch(raw_split, order[b]);
    auto idx = random_permutation(batch.labels.size(), rng);
    Tensor z = encoder.forward_features(model.teacher, batch.x, model.feature_layer);
    GeneratedMix g = generate(batch.x, gather_batch(batch.x, idx), z, gather_batch(z, idx), 0.5,
                              model.mixblock);
    std::vector<int> y_j(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y_j[i] = batch.labels[idx[i]];
    PairAccuracy acc = mixed_topk_accuracy(encoder.forward_logits(params, g.x_mix), batch.labels, y_j);
    os << b << ',' << acc.counted << ',' << acc.top1_in_pair << ',' << acc.top2_equals_pair << '\n';
    sum_in += acc.top1_in_pair * static_cast<double>(acc.counted);
    sum_eq += acc.top2_equals_pair * static_cast<double>(acc.counted);
    counted += acc.counted;
  }
  if (counted > 0) {
    ctx.out << "mixed_top1_in_pair " << fmt17(sum_in / static_cast<double>(counted)) << '\n';
    ctx.out << "mixed_top2_equals_pair " << fmt17(sum_eq / static_cast<double>(counted)) << '\n';
  }
  return kExitOk;
}

int cmd_gen_masks(CommandContext& ctx, const std::string& checkpoint,
                  const std::optional<std::string>& config_path, const std::string& split,
                  const std::string& pairs_text, const std::string& lambdas_text,
                  const std::optional<std::string>& out_dir, const Overrides& overrides) {
  LoadedModel model = load_model(checkpoint);
  AppConfig config = config_for_checkpoint(checkpoint, config_path, overrides);
  Datasets data = load_datasets(config.data);
  LabeledDataset ds = pick_split(data, split);
  ds.images = standardize(destandardize(ds.images, data.stats), model.stats);
  check_compatible(model, ds);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& part : split_list(pairs_text, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("--pairs entries look like i:j, got '" + part + "'");
    }
    const auto i = parse_integer("pairs", part.substr(0, colon)).get<std::size_t>();
    const auto j = parse_integer("pairs", part.substr(colon + 1)).get<std::size_t>();
    if (i >= ds.size() || j >= ds.size()) {
      throw ConfigError("--pairs index outside the " + split + " split (" +
                        std::to_string(ds.size()) + " samples)");
    }
    pairs.emplace_back(i, j);
  }
  if (pairs.empty()) throw ConfigError("--pairs is empty");
  const std::vector<double> lambdas = parse_double_list("lambdas", lambdas_text);
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("--lambdas entries must lie in [0, 1]");
  }

  const fs::path dir = out_dir ? fs::path(*out_dir) : fs::path(checkpoint).parent_path() / "masks";
  fs::create_directories(dir);
  Encoder encoder(model.encoder);
  auto csv = open_out(dir / "masks.csv");
  csv << "pair,index_i,index_j,lambda,mask_mean,lambda_residual,spatial_std\n"
      << std::setprecision(17);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    Tensor x_i = gather_batch(ds.images, {i});
    Tensor x_j = gather_batch(ds.images, {j});
    Tensor z_i = encoder.forward_features(model.teacher, x_i, model.feature_layer);
    Tensor z_j = encoder.forward_features(model.teacher, x_j, model.feature_layer);
    const std::string tag = "p" + std::to_string(p);
    write_pnm(dir / (tag + "_x_i" + (x_i.dim(1) == 3 ? ".ppm" : ".pgm")),
              destandardize(x_i, model.stats));
    write_pnm(dir / (tag + "_x_j" + (x_j.dim(1) == 3 ? ".ppm" : ".pgm")),
              destandardize(x_j, model.stats));
    for (double lambda : lambdas) {
      GeneratedMix g = generate(x_i, x_j, z_i, z_j, lambda, model.mixblock);
      MaskStats ms = mask_stats(g.mask.s_i, std::vector<double>{lambda});
      const std::string name = tag + "_lam" + lambda_tag(lambda);
      write_pnm(dir / (name + "_mask.pgm"), g.mask.s_i);
      write_pnm(dir / (name + "_mix" + (x_i.dim(1) == 3 ? ".ppm" : ".pgm")),
                destandardize(g.x_mix, model.stats));
      csv << p << ',' << i << ',' << j << ',' << lambda << ',' << ms.mean << ','
          << ms.lambda_residual << ',' << ms.spatial_std << '\n';
      ctx.out << "pair " << p << " lambda " << lambda_tag(lambda) << " mask_mean "
              << fmt17(ms.mean) << '\n';
    }
  }
  ctx.out << "wrote " << dir.string() << '\n';
  return kExitOk;
}

int cmd_compare(CommandContext& ctx, const std::optional<std::string>& config_path,
                const std::string& policies_text, const std::string& seeds_text,
                const std::string& runs_dir, const Overrides& overrides) {
  AppConfig base = resolve_from_doc(
      config_path ? std::optional<json>(read_json_file(*config_path)) : std::nullopt, overrides);
  std::vector<Policy> policies;
  for (const auto& name : split_list(policies_text, ',')) policies.push_back(parse_policy(name));
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(seeds_text, ',')) {
    seeds.push_back(parse_integer("seeds", s).get<std::uint64_t>());
  }
  if (policies.empty() || seeds.empty()) throw ConfigError("need at least one policy and seed");

  const Datasets data = load_datasets(base.data);
  const fs::path dir = fresh_dir(runs_dir, utc_stamp("%Y%m%d-%H%M%S") + "-compare");
  auto per_run = open_out(dir / "runs.csv");
  per_run << "policy,seed,run_dir,score\n" << std::setprecision(17);
  const bool use_test = data.test.size() > 0;
  const std::string column = use_test ? "test_top1" : "top1";

  auto summary = open_out(dir / "summary.csv");
  summary << "policy,seeds,mean_top1,std_top1,min_top1,max_top1\n" << std::setprecision(17);
  ctx.out << "policy      mean_top1  std_top1  (median of last 10 epochs, "
          << (use_test ? "test" : "train") << " split)\n";
  for (Policy policy : policies) {
    std::vector<double> scores;
    for (auto seed : seeds) {
      AppConfig cfg = base;
      cfg.train.policy = policy;
      cfg.train.seed = seed;
      TrainRun run = train_run(cfg, dir, &ctx.err, &data);
      const fs::path csv = run.dir / (use_test ? "test_metrics.csv" : "metrics.csv");
      const auto series = read_column(csv, column);
      const double score = series.empty() ? std::numeric_limits<double>::quiet_NaN()
                                          : median_of_last(series, 10);
      scores.push_back(score);
      per_run << to_string(policy) << ',' << seed << ',' << run.dir.filename().string() << ','
              << score << '\n';
    }
    double mean = 0.0;
    for (double v : scores) mean += v;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double v : scores) var += (v - mean) * (v - mean);
    const double sd =
        scores.size() > 1 ? std::sqrt(var / static_cast<double>(scores.size() - 1)) : 0.0;
    summary << to_string(policy) << ',' << scores.size() << ',' << mean << ',' << sd << ','
            << *std::min_element(scores.begin(), scores.end()) << ','
            << *std::max_element(scores.begin(), scores.end()) << '\n';
    ctx.out << std::left << std::setw(10) << to_string(policy) << "  " << std::fixed
            << std::setprecision(4) << mean << "     " << sd << std::defaultfloat << '\n';
  }
  ctx.out << "summary " << (dir / "summary.csv").string() << '\n';
  return kExitOk;
}

int cmd_selfcheck(CommandContext& ctx, const std::string& fault) {
  if (fault == "sigmoid-backward-sign") {
    debug::set_fault(debug::Fault::sigmoid_backward_sign);
  } else if (fault != "none") {
    throw ConfigError("unknown --inject-fault '" + fault + "' (valid: none, sigmoid-backward-sign)");
  }
  const auto t0 = Clock::now();
  std::vector<CheckResult> results;
  try {
    results = run_selfcheck();
  } catch (...) {
    debug::set_fault(debug::Fault::none);
    throw;
  }
  debug::set_fault(debug::Fault::none);
  std::size_t failed = 0;
  for (const auto& r : results) {
    if (!r.passed) {
      ++failed;
      ctx.out << "FAIL " << r.name << ": " << r.detail << '\n';
    }
  }
  ctx.out << results.size() - failed << "/" << results.size() << " checks passed in "
          << std::fixed << std::setprecision(2) << seconds_since(t0) << " s" << std::defaultfloat
          << '\n';
  return failed == 0 ? kExitOk : kExitFailure;
}

}  // namespace

AppConfig default_config() {
  AppConfig c;
  c.train.encoder.stage_channels = {8, 16, 32, 32};
  c.train.encoder.stage_strides = {2, 2, 2, 2};
  c.train.epochs = 30;
  c.train.batch_size = 50;
  c.train.base_lr = 0.03;
  return c;
}

json to_json(const AppConfig& config) {
  const TrainConfig& t = config.train;
  const DataConfig& d = config.data;
  json j;
  j["policy"] = to_string(t.policy);
  j["seed"] = t.seed;
  j["alpha"] = t.alpha;
  j["baseline_alpha"] = t.baseline_alpha;
  j["feature_layer"] = t.feature_layer;
  j["m0"] = t.m0;
  j["momentum_override"] = t.momentum_override ? json(*t.momentum_override) : json(nullptr);
  j["base_lr"] = t.base_lr;
  j["sgd_momentum"] = t.sgd_momentum;
  j["weight_decay"] = t.weight_decay;
  j["gamma0"] = t.gamma0;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["augment"] = t.augment;
  j["eval_encoder"] = t.eval_encoder == EvalEncoder::teacher ? "teacher" : "student";
  j["encoder"] = {{"stage_channels", t.encoder.stage_channels},
                  {"stage_strides", t.encoder.stage_strides},
                  {"kernel_size", t.encoder.kernel_size}};
  j["data"] = {{"source", d.source},
               {"n_per_class", d.n_per_class},
               {"test_per_class", d.test_per_class},
               {"image_size", d.image_size},
               {"num_classes", d.num_classes},
               {"channels", d.channels},
               {"seed", d.seed},
               {"train_images", d.train_images},
               {"train_labels", d.train_labels},
               {"test_images", d.test_images},
               {"test_labels", d.test_labels},
               {"cifar_train", d.cifar_train},
               {"cifar_test", d.cifar_test}};
  return j;
}

AppConfig config_from_json(const json& doc) {
  reject_unknown(doc, to_json(default_config()), "");
  AppConfig c = default_config();
  TrainConfig& t = c.train;
  t.policy = parse_policy(get_string(doc, "policy", ""));
  t.seed = get_size(doc, "seed", "");
  t.alpha = get_double(doc, "alpha", "");
  t.baseline_alpha = get_double(doc, "baseline_alpha", "");
  t.feature_layer = get_size(doc, "feature_layer", "");
  t.m0 = get_double(doc, "m0", "");
  const json& mo = field(doc, "momentum_override", "");
  if (mo.is_null()) {
    t.momentum_override.reset();
  } else {
    t.momentum_override = get_double(doc, "momentum_override", "");
  }
  t.base_lr = get_double(doc, "base_lr", "");
  t.sgd_momentum = get_double(doc, "sgd_momentum", "");
  t.weight_decay = get_double(doc, "weight_decay", "");
  t.gamma0 = get_double(doc, "gamma0", "");
  t.epochs = get_size(doc, "epochs", "");
  t.batch_size = get_size(doc, "batch_size", "");
  t.augment = get_bool(doc, "augment", "");
  const std::string ev = get_string(doc, "eval_encoder", "");
  if (ev != "student" && ev != "teacher") {
    throw ConfigError("field 'eval_encoder': expected 'student' or 'teacher', got '" + ev + "'");
  }
  t.eval_encoder = ev == "teacher" ? EvalEncoder::teacher : EvalEncoder::student;

  const json& e = field(doc, "encoder", "");
  t.encoder.stage_channels = get_size_list(e, "stage_channels", "encoder");
  t.encoder.stage_strides = get_size_list(e, "stage_strides", "encoder");
  t.encoder.kernel_size = get_size(e, "kernel_size", "encoder");

  const json& d = field(doc, "data", "");
  DataConfig& dc = c.data;
  dc.source = get_string(d, "source", "data");
  if (dc.source != "synthetic" && dc.source != "idx" && dc.source != "cifar10") {
    throw ConfigError("field 'data.source': expected synthetic, idx or cifar10, got '" +
                      dc.source + "'");
  }
  dc.n_per_class = get_size(d, "n_per_class", "data");
  dc.test_per_class = get_size(d, "test_per_class", "data");
  dc.image_size = get_size(d, "image_size", "data");
  dc.num_classes = get_size(d, "num_classes", "data");
  dc.channels = get_size(d, "channels", "data");
  dc.seed = get_size(d, "seed", "data");
  dc.train_images = get_string(d, "train_images", "data");
  dc.train_labels = get_string(d, "train_labels", "data");
  dc.test_images = get_string(d, "test_images", "data");
  dc.test_labels = get_string(d, "test_labels", "data");
  dc.cifar_train = get_string_list(d, "cifar_train", "data");
  dc.cifar_test = get_string(d, "cifar_test", "data");

  if (dc.source == "cifar10") {
    dc.channels = 3;
    dc.num_classes = 10;
  }
  t.encoder.input_channels = dc.channels;
  t.encoder.num_classes = dc.num_classes;
  try {
    t.validate();
  } catch (const ParameterError& err) {
    throw ConfigError(std::string("encoder: ") + err.what());
  }
  return c;
}

AppConfig resolve_config(const std::optional<std::string>& config_path,
                         const Overrides& overrides) {
  return resolve_from_doc(
      config_path ? std::optional<json>(read_json_file(*config_path)) : std::nullopt, overrides);
}

Datasets load_datasets(const DataConfig& c) {
  Datasets out;
  if (c.source == "synthetic") {
    out.train = gen_synthetic_shapes(c.n_per_class, c.image_size, c.num_classes, c.seed, c.channels);
    out.train.split = "train";
    if (c.test_per_class > 0) {
      out.test = gen_synthetic_shapes(c.test_per_class, c.image_size, c.num_classes,
                                      c.seed + 0x5eed0001ULL, c.channels);
      out.test.split = "test";
    }
  } else if (c.source == "idx") {
    if (c.train_images.empty() || c.train_labels.empty()) {
      throw ConfigError("data.source idx needs data.train_images and data.train_labels");
    }
    out.train = read_idx_dataset(data_path(c.train_images).string(),
                                 data_path(c.train_labels).string(), c.num_classes);
    out.train.split = "train";
    if (!c.test_images.empty()) {
      out.test = read_idx_dataset(data_path(c.test_images).string(),
                                  data_path(c.test_labels).string(), c.num_classes);
      out.test.split = "test";
    }
  } else {
    if (c.cifar_train.empty()) throw ConfigError("data.source cifar10 needs data.cifar_train");
    std::vector<LabeledDataset> parts;
    for (const auto& f : c.cifar_train) parts.push_back(read_cifar10_bin(data_path(f).string()));
    out.train = concat_datasets(std::move(parts), "train");
    if (!c.cifar_test.empty()) {
      out.test = read_cifar10_bin(data_path(c.cifar_test).string());
      out.test.split = "test";
    }
  }
  out.train.validate();
  out.stats = compute_channel_stats(out.train.images);
  out.train.images = standardize(out.train.images, out.stats);
  if (out.test.size() > 0) {
    out.test.validate();
    out.test.images = standardize(out.test.images, out.stats);
  }
  return out;
}

ParamSet model_checkpoint(const TrainState& state, const TrainConfig& config,
                          const ChannelStats& stats) {
  ParamSet out = checkpoint_tensors(state);
  out.set("norm.mean", Tensor({stats.mean.size()}, stats.mean));
  out.set("norm.std", Tensor({stats.stddev.size()}, stats.stddev));
  out.set("meta.stage_channels", size_vector(config.encoder.stage_channels));
  out.set("meta.stage_strides", size_vector(config.encoder.stage_strides));
  out.set("meta.input_channels", scalar_vector(static_cast<double>(config.encoder.input_channels)));
  out.set("meta.num_classes", scalar_vector(static_cast<double>(config.encoder.num_classes)));
  out.set("meta.kernel_size", scalar_vector(static_cast<double>(config.encoder.kernel_size)));
  out.set("meta.feature_layer", scalar_vector(static_cast<double>(config.feature_layer)));
  out.set("meta.eval_teacher", scalar_vector(config.eval_encoder == EvalEncoder::teacher ? 1 : 0));
  return out;
}

LoadedModel load_model(const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw Error("checkpoint '" + checkpoint.string() + "' not found");
  const ParamSet all = read_checkpoint(checkpoint.string());
  LoadedModel m;
  m.encoder.stage_channels = sizes_of(record(all, "meta.stage_channels"), "meta.stage_channels");
  m.encoder.stage_strides = sizes_of(record(all, "meta.stage_strides"), "meta.stage_strides");
  m.encoder.input_channels = size_of(all, "meta.input_channels");
  m.encoder.num_classes = size_of(all, "meta.num_classes");
  m.encoder.kernel_size = size_of(all, "meta.kernel_size");
  m.feature_layer = size_of(all, "meta.feature_layer");
  m.eval_teacher = size_of(all, "meta.eval_teacher") == 1;
  try {
    m.encoder.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint encoder layout: ") + e.what());
  }
  if (m.feature_layer < 1 || m.feature_layer > m.encoder.num_stages()) {
    throw FormatError("checkpoint feature layer out of range");
  }
  const ParamSet layout = init_params(m.encoder, 0);
  m.student = clone_params(strip_prefix(all, "student"));
  m.teacher = clone_params(strip_prefix(all, "teacher"));
  if (!same_layout(m.student, layout) || !same_layout(m.teacher, layout)) {
    throw FormatError("checkpoint encoder tensors do not match the stored layout");
  }
  m.mixblock = MixBlockParams::from_param_set(clone_params(strip_prefix(all, "mixblock")));
  if (m.mixblock.input_channels() != m.encoder.feature_channels(m.feature_layer) + 1) {
    throw FormatError("checkpoint mix block does not match the feature layer");
  }
  const auto& mean = record(all, "norm.mean");
  const auto& sd = record(all, "norm.std");
  if (mean.numel() != m.encoder.input_channels || sd.numel() != m.encoder.input_channels) {
    throw FormatError("checkpoint normalization statistics have the wrong length");
  }
  m.stats.mean.assign(mean.data().begin(), mean.data().end());
  m.stats.stddev.assign(sd.data().begin(), sd.data().end());
  return m;
}

TrainRun train_run(const AppConfig& input, const fs::path& runs_root, std::ostream* log,
                   const Datasets* preloaded) {
  const auto t0 = Clock::now();
  AppConfig config = input;
  Datasets owned;
  if (!preloaded) {
    owned = load_datasets(config.data);
    preloaded = &owned;
  }
  const Datasets& data = *preloaded;
  config.train.encoder.input_channels = data.train.channels();
  config.train.encoder.num_classes = data.train.num_classes;
  config.train.validate();
  const double data_seconds = seconds_since(t0);

  TrainRun run;
  run.dir = fresh_dir(runs_root, utc_stamp("%Y%m%d-%H%M%S") + "-" + to_string(config.train.policy) +
                                     "-s" + std::to_string(config.train.seed));
  json manifest;
  manifest["config"] = to_json(config);
  manifest["seed"] = config.train.seed;
  manifest["created_utc"] = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
  manifest["dataset"] = {{"source", config.data.source},
                         {"train_size", data.train.size()},
                         {"test_size", data.test.size()},
                         {"train_fingerprint", hex64(fingerprint(data.train))},
                         {"test_fingerprint",
                          data.test.size() > 0 ? hex64(fingerprint(data.test)) : ""}};
  manifest["paths"] = {{"manifest", "manifest.json"},
                       {"metrics_csv", "metrics.csv"},
                       {"test_metrics_csv", "test_metrics.csv"},
                       {"checkpoint", "checkpoint.bin"}};

  auto metrics = open_out(run.dir / "metrics.csv");
  auto test_metrics = open_out(run.dir / "test_metrics.csv");
  write_metrics_csv_header(metrics);
  test_metrics << "epoch,test_top1\n" << std::setprecision(17);
  FitOptions options;
  options.test = data.test.size() > 0 ? &data.test : nullptr;
  options.log = log;
  options.on_epoch = [&](const EpochRecord& r) {
    write_metrics_csv_row(metrics, r);
    metrics.flush();
    if (r.test_top1) {
      test_metrics << r.epoch << ',' << *r.test_top1 << '\n';
      test_metrics.flush();
    }
  };

  const auto t_train = Clock::now();
  try {
    run.fit = fit(config.train, data.train, options);
  } catch (const NumericError& e) {
    manifest["status"] = "numeric_failure";
    manifest["error"] = e.what();
    manifest["timings"] = {{"data_seconds", data_seconds},
                           {"train_seconds", seconds_since(t_train)},
                           {"total_seconds", seconds_since(t0)}};
    write_json(run.dir / "manifest.json", manifest);
    throw;
  }
  const double train_seconds = seconds_since(t_train);
  write_checkpoint((run.dir / "checkpoint.bin").string(),
                   model_checkpoint(run.fit.state, config.train, data.stats));

  json final_metrics = json::object();
  if (!run.fit.history.empty()) {
    const auto& last = run.fit.history.back();
    final_metrics["train_top1"] = last.top1;
    if (last.test_top1) {
      std::vector<double> test;
      for (const auto& r : run.fit.history) test.push_back(*r.test_top1);
      final_metrics["test_top1"] = *last.test_top1;
      final_metrics["median_last10_test_top1"] = median_of_last(test, 10);
    }
    std::size_t warnings = 0;
    for (const auto& r : run.fit.history) warnings += r.collapse_warning ? 1 : 0;
    final_metrics["collapse_warning_epochs"] = warnings;
  }
  manifest["status"] = "ok";
  manifest["final"] = final_metrics;
  manifest["timings"] = {{"data_seconds", data_seconds},
                         {"train_seconds", train_seconds},
                         {"total_seconds", seconds_since(t0)}};
  write_json(run.dir / "manifest.json", manifest);
  return run;
}

void write_pnm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || (image.dim(1) != 1 && image.dim(1) != 3)) {
    throw DimensionError("write_pnm: expected [1,1,H,W] or [1,3,H,W], got " +
                         shape_str(image.shape()));
  }
  const std::size_t c = image.dim(1), h = image.dim(2), w = image.dim(3);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << (c == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  auto v = image.data();
  std::vector<char> bytes(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double p = std::clamp(v[(ch * h + y) * w + x], 0.0, 1.0);
        bytes[(y * w + x) * c + ch] = static_cast<char>(static_cast<unsigned char>(std::lround(p * 255.0)));
      }
    }
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learnable mixup training with a cross-attention Mix Block", "automix"};
  app.require_subcommand(1);

  std::optional<std::string> config_path, encoder_choice, out_dir;
  std::string runs_dir = "runs", checkpoint, split = "test", fgsm_text;
  std::string pairs = "0:1,2:3", lambdas = "0,0.3,0.7,1";
  std::string policies = "vanilla,mixup,cutmix,automix", seeds = "1,2,3", fault = "none";

  auto* train = app.add_subcommand("train", "Train one model; extra --key value flags override the config");
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--runs-dir", runs_dir, "Parent directory for run directories");
  train->allow_extras();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (top-1, ECE, FGSM, mixed top-k)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint.bin path")->required();
  eval->add_option("--config", config_path, "JSON config (default: manifest next to checkpoint)");
  eval->add_option("--split", split, "train or test");
  eval->add_option("--fgsm", fgsm_text, "Comma-separated FGSM epsilons in pixel units");
  eval->add_option("--encoder", encoder_choice, "student or teacher");
  eval->add_option("--out", out_dir, "Output directory for CSVs");
  eval->allow_extras();

  auto* masks = app.add_subcommand("gen-masks", "Export Mix Block masks and mixed samples as PNM images");
  masks->add_option("--checkpoint", checkpoint, "checkpoint.bin path")->required();
  masks->add_option("--config", config_path, "JSON config (default: manifest next to checkpoint)");
  masks->add_option("--split", split, "train or test");
  masks->add_option("--pairs", pairs, "Sample index pairs, e.g. 0:1,2:3");
  masks->add_option("--lambdas", lambdas, "Comma-separated mixing ratios");
  masks->add_option("--out", out_dir, "Output directory");
  masks->allow_extras();

  auto* compare = app.add_subcommand("compare", "Train every (policy, seed) cell and summarize");
  compare->add_option("--config", config_path, "JSON config file");
  compare->add_option("--policies", policies, "Comma-separated policies");
  compare->add_option("--seeds", seeds, "Comma-separated seeds");
  compare->add_option("--runs-dir", runs_dir, "Parent directory for the comparison");
  compare->allow_extras();

  auto* selfcheck = app.add_subcommand("selfcheck", "Run the gradient-check and invariant suite");
  selfcheck->add_option("--inject-fault", fault, "none or sigmoid-backward-sign");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  CommandContext ctx{out, err};
  try {
    auto extras = [](CLI::App* sub) { return parse_extras(sub->remaining()); };
    if (train->parsed()) return cmd_train(ctx, config_path, runs_dir, extras(train));
    if (eval->parsed()) {
      std::vector<double> eps;
      if (!fgsm_text.empty()) eps = parse_double_list("fgsm", fgsm_text);
      return cmd_eval(ctx, checkpoint, config_path, split, eps, encoder_choice, out_dir, extras(eval));
    }
    if (masks->parsed()) {
      return cmd_gen_masks(ctx, checkpoint, config_path, split, pairs, lambdas, out_dir,
                           extras(masks));
    }
    if (compare->parsed()) return cmd_compare(ctx, config_path, policies, seeds, runs_dir, extras(compare));
    if (selfcheck->parsed()) return cmd_selfcheck(ctx, fault);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ContractError& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace automix::app

#pragma once

// Run configuration: one JSON document with a section per concern. The schema
// below carries every default; a user file is validated against it (unknown
// keys and wrong types rejected), flag overrides are layered on top, and the
// fully populated result is what commands write back as resolved_config.json.

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pose/bench.hpp"
#include "pose/error.hpp"
#include "pose/evalkit.hpp"
#include "pose/trainer.hpp"

namespace pose::config {

using Json = nlohmann::ordered_json;

inline constexpr const char* kOutputRootEnv = "POSE_OUTPUT_ROOT";
inline constexpr const char* kResolvedName = "resolved_config.json";

// ---------------------------------------------------------------------------
// Schema construction (a JSON Schema subset: type, default, enum, minimum,
// maximum, items, properties, additionalProperties)

namespace schema {

inline Json integer(long long def, std::optional<long long> min = {}, std::optional<long long> max = {}) {
  Json s{{"type", "integer"}, {"default", def}};
  if (min) s["minimum"] = *min;
  if (max) s["maximum"] = *max;
  return s;
}

inline Json number(double def, std::optional<double> min = {}, std::optional<double> max = {}) {
  Json s{{"type", "number"}, {"default", def}};
  if (min) s["minimum"] = *min;
  if (max) s["maximum"] = *max;
  return s;
}

inline Json string(const std::string& def, const std::vector<std::string>& choices = {}) {
  Json s{{"type", "string"}, {"default", def}};
  if (!choices.empty()) s["enum"] = choices;
  return s;
}

inline Json boolean(bool def) { return Json{{"type", "boolean"}, {"default", def}}; }

inline Json array(Json items, Json def) {
  return Json{{"type", "array"}, {"items", std::move(items)}, {"default", std::move(def)}};
}

inline Json object(Json properties) {
  return Json{{"type", "object"}, {"properties", std::move(properties)}, {"additionalProperties", false}};
}

inline std::vector<std::string> perturb_kinds() { return {"blur", "jpeg", "lighting", "noise", "crop_resize"}; }

inline Json stamp_list(const std::vector<bench::StampSpec>& stamps, bool with_type) {
  Json item_props{{"name", string("")},
                  {"seed", integer(0, 0)},
                  {"architecture", string("conv2_k3", bench::architecture_tags())},
                  {"base_domain", string("fields", bench::domain_tags())}};
  if (with_type) item_props["type"] = string("seed", {"seed", "architecture", "dataset"});
  Json def = Json::array();
  for (const auto& s : stamps) {
    Json e{{"name", s.name},
           {"seed", s.stamp.seed},
           {"architecture", s.stamp.architecture},
           {"base_domain", s.stamp.base_domain}};
    if (with_type) e["type"] = eval::to_string(s.type);
    def.push_back(std::move(e));
  }
  return array(object(std::move(item_props)), std::move(def));
}

}  // namespace schema

// The complete schema. Defaults describe the desk profile (32 px benchmark,
// narrow task model, 10 epochs); configs/paper.json holds the full-scale values.
inline const Json& run_schema() {
  static const Json s = [] {
    using namespace schema;
    const bench::BenchSpec b = bench::default_bench_spec();
    const train::TrainConfig t;
    const losses::LossConfig l;
    Json root = object(Json{
        {"paths", object(Json{{"bench_dir", string("bench")},
                              {"run_dir", string("runs/pose")},
                              {"out_dir", string("")}})},
        {"bench", object(Json{{"global_seed", integer(static_cast<long long>(b.global_seed), 0)},
                              {"input_size", integer(b.input_size, 4)},
                              {"train_per_class", integer(b.train_per_class, 1)},
                              {"test_per_class", integer(b.test_per_class, 1)},
                              {"amplitude", number(b.amplitude, 0.0)},
                              {"real_domains", array(string("fields", bench::domain_tags()), b.real_domains)},
                              {"unseen_real_domains",
                               array(string("cells", bench::domain_tags()), b.unseen_real_domains)},
                              {"seen", stamp_list(b.seen, false)},
                              {"unseen", stamp_list(b.unseen, true)}})},
        {"train", object(Json{{"mode", string("pose", {"pose", "base", "pose-nodiv", "joint"})},
                              {"epochs", integer(10, 1)},
                              {"seed", integer(0, 0)},
                              {"lr_task", number(1e-3, 0.0)},
                              {"lr_aug", number(t.lr_aug, 0.0)},
                              {"lr_decay", number(t.lr_decay, 0.0, 1.0)},
                              {"lr_decay_every", integer(t.lr_decay_every, 1)},
                              {"batch_per_class", integer(t.batch_per_class, 2)},
                              {"aug_steps_per_epoch", integer(100, 0)},
                              {"aug_arch", string("conv2_k3")},
                              {"aug_hidden", integer(t.aug_arch.hidden, 1)},
                              {"channels", array(integer(8, 1), Json{8, 8, 16, 16, 32, 32, 64, 64})},
                              {"embed_dim", integer(t.embed_dim, 1)},
                              {"head_depth", integer(t.head_depth, 1, 2)},
                              {"dropout", number(t.dropout, 0.0, 1.0)},
                              {"dct_eps", number(1e-3, 0.0)},
                              {"immunize", object(Json{{"kind", string("none", [] {
                                                                  auto k = perturb_kinds();
                                                                  k.insert(k.begin(), "none");
                                                                  return k;
                                                                }())},
                                                       {"max_strength", number(0.0)},
                                                       {"probability", number(0.5, 0.0, 1.0)}})}})},
        {"loss", object(Json{{"lambda_spectral", number(l.lambda_spectral, 0.0)},
                             {"alpha", number(l.alpha, 0.0)},
                             {"beta", number(l.beta, 0.0)},
                             {"d_margin", number(l.d_margin, 0.0, 1.0)},
                             {"m_margin", number(l.m_margin, 0.0)},
                             {"epsilon_floor", number(l.epsilon_floor, 0.0)}})},
        {"eval", object(Json{{"checkpoint", string("final")},
                             {"theta", number(0.5, 0.0, 1.0)},
                             {"histogram_bins", integer(20, 2)},
                             {"theta_sweep", integer(0, 0)}})},
        {"spectrum", object(Json{{"corpus_a", string("")},
                                 {"corpus_b", string("")},
                                 {"normalize", boolean(false)},
                                 {"fit", boolean(false)},
                                 {"fit_steps", integer(300, 0)},
                                 {"fit_batch", integer(16, 1)},
                                 {"fit_lr", number(1e-2, 0.0)},
                                 {"seed", integer(0, 0)}})},
        {"cluster", object(Json{{"k", integer(0, 0)}, {"seed", integer(0, 0)}})},
        {"robustness", object(Json{{"kind", string("blur", perturb_kinds())},
                                   {"strengths", array(number(0.0), Json::array())},
                                   {"levels", integer(6, 2)},
                                   {"seed", integer(0, 0)},
                                   {"immunized", boolean(false)},
                                   {"immunize_probability", number(0.5, 0.0, 1.0)}})}});
    root["$schema"] = "https://json-schema.org/draft/2020-12/schema";
    root["title"] = "pose run configuration";
    return root;
  }();
  return s;
}

// ---------------------------------------------------------------------------
// Validation and default filling

namespace detail {

inline std::string where(const std::string& path) { return path.empty() ? "<root>" : path; }

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void validate(const Json& value, const Json& s, const std::string& path) {
  const std::string type = s.at("type");
  if (type == "object") {
    if (!value.is_object()) throw ConfigError(where(path) + ": expected an object");
    const Json& props = s.at("properties");
    for (const auto& [key, v] : value.items()) {
      if (!props.contains(key)) throw ConfigError("unknown key '" + join(path, key) + "'");
      validate(v, props.at(key), join(path, key));
    }
  } else if (type == "array") {
    if (!value.is_array()) throw ConfigError(where(path) + ": expected an array");
    for (std::size_t i = 0; i < value.size(); ++i)
      validate(value[i], s.at("items"), path + "[" + std::to_string(i) + "]");
  } else if (type == "integer") {
    if (!value.is_number_integer()) throw ConfigError(where(path) + ": expected an integer");
  } else if (type == "number") {
    if (!value.is_number()) throw ConfigError(where(path) + ": expected a number");
  } else if (type == "string") {
    if (!value.is_string()) throw ConfigError(where(path) + ": expected a string");
  } else if (type == "boolean") {
    if (!value.is_boolean()) throw ConfigError(where(path) + ": expected true or false");
  }
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s.at("enum")) found = found || e == value;
    if (!found) throw ConfigError(where(path) + ": " + value.dump() + " is not one of " + s.at("enum").dump());
  }
  if (value.is_number()) {
    const double v = value.get<double>();
    if (s.contains("minimum") && v < s.at("minimum").get<double>())
      throw ConfigError(where(path) + ": must be >= " + s.at("minimum").dump());
    if (s.contains("maximum") && v > s.at("maximum").get<double>())
      throw ConfigError(where(path) + ": must be <= " + s.at("maximum").dump());
  }
}

// Missing keys take their schema default, recursively; present values are kept.
inline Json fill(const Json* value, const Json& s) {
  const std::string type = s.at("type");
  if (type == "object") {
    Json out = Json::object();
    for (const auto& [key, ps] : s.at("properties").items())
      out[key] = fill(value && value->contains(key) ? &value->at(key) : nullptr, ps);
    return out;
  }
  if (type == "array") {
    const Json src = value ? *value : s.at("default");
    Json out = Json::array();
    for (const auto& e : src) out.push_back(fill(&e, s.at("items")));
    return out;
  }
  if (value) {
    if (type == "number") return Json(value->get<double>());
    return *value;
  }
  return s.at("default");
}

inline void merge(Json& base, const Json& over) {
  for (const auto& [key, v] : over.items()) {
    if (v.is_object() && base.contains(key) && base[key].is_object()) merge(base[key], v);
    else base[key] = v;
  }
}

}  // namespace detail

inline Json defaults() { return detail::fill(nullptr, run_schema()); }

// Validates a partial document and returns it with every default filled in.
inline Json resolve(const Json& partial) {
  detail::validate(partial, run_schema(), "");
  return detail::fill(&partial, run_schema());
}

// "train.epochs=5" -> {"train": {"epochs": 5}}. The value is parsed as JSON
// when possible, otherwise taken as a string.
inline Json parse_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json out = Json::object();
  Json* node = &out;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading with precedence flags > file > defaults

struct RunConfig {
  Json doc;                          // resolved, every key present
  std::filesystem::path config_dir;  // base for relative input paths

  const Json& section(const std::string& name) const { return doc.at(name); }
  std::filesystem::path path(const std::string& key) const {
    return std::filesystem::path(doc.at("paths").at(key).get<std::string>());
  }
};

inline Json read_document(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot read config " + file.string());
  Json j = Json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError(file.string() + " is not valid JSON");
  if (!j.is_object()) throw ConfigError(file.string() + ": top level must be an object");
  return j;
}

// Output paths resolve against $POSE_OUTPUT_ROOT when set, otherwise against
// the config file's directory (cwd without a file). Input corpora always
// resolve against the config directory.
inline std::filesystem::path output_base(const std::filesystem::path& config_dir) {
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::absolute(root);
  return config_dir;
}

inline std::string anchor(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

// `overrides` are applied in order after the file; path-valued overrides
// given here should already be absolute if they are meant relative to cwd.
inline RunConfig load(const std::optional<std::filesystem::path>& file, const std::vector<Json>& overrides = {}) {
  RunConfig rc;
  Json doc = Json::object();
  if (file) {
    doc = read_document(*file);
    rc.config_dir = std::filesystem::absolute(*file).parent_path();
  } else {
    rc.config_dir = std::filesystem::current_path();
  }
  detail::validate(doc, run_schema(), "");
  for (const auto& o : overrides) {
    detail::validate(o, run_schema(), "");
    detail::merge(doc, o);
  }
  rc.doc = resolve(doc);
  const auto out_base = output_base(rc.config_dir);
  for (const char* key : {"bench_dir", "run_dir", "out_dir"}) {
    auto& v = rc.doc["paths"][key];
    v = anchor(v.get<std::string>(), out_base);
  }
  for (const char* key : {"corpus_a", "corpus_b"}) {
    auto& v = rc.doc["spectrum"][key];
    v = anchor(v.get<std::string>(), rc.config_dir);
  }
  return rc;
}

inline void write_resolved(const RunConfig& rc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / kResolvedName);
  if (!os) throw IoError("cannot write " + (dir / kResolvedName).string());
  os << rc.doc.dump(2) << '\n';
  if (!os) throw IoError("cannot write " + (dir / kResolvedName).string());
}

// ---------------------------------------------------------------------------
// Typed views

inline std::vector<bench::StampSpec> stamps_from(const Json& list, double amplitude, bool unseen) {
  std::vector<bench::StampSpec> out;
  for (const auto& e : list) {
    bench::StampSpec s;
    s.name = e.at("name");
    s.stamp.seed = e.at("seed").get<std::uint64_t>();
    s.stamp.architecture = e.at("architecture");
    s.stamp.base_domain = e.at("base_domain");
    s.stamp.amplitude = amplitude;
    s.type = unseen ? eval::unseen_type_from_string(e.at("type")) : eval::UnseenType::None;
    out.push_back(std::move(s));
  }
  return out;
}

inline bench::BenchSpec bench_spec(const RunConfig& rc) {
  const Json& b = rc.section("bench");
  bench::BenchSpec s;
  s.global_seed = b.at("global_seed").get<std::uint64_t>();
  s.input_size = b.at("input_size");
  s.train_per_class = b.at("train_per_class");
  s.test_per_class = b.at("test_per_class");
  s.amplitude = b.at("amplitude");
  s.real_domains = b.at("real_domains").get<std::vector<std::string>>();
  s.unseen_real_domains = b.at("unseen_real_domains").get<std::vector<std::string>>();
  s.seen = stamps_from(b.at("seen"), s.amplitude, false);
  s.unseen = stamps_from(b.at("unseen"), s.amplitude, true);
  bench::validate(s);
  return s;
}

inline losses::LossConfig loss_config(const RunConfig& rc) {
  const Json& l = rc.section("loss");
  losses::LossConfig c;
  c.lambda_spectral = l.at("lambda_spectral");
  c.alpha = l.at("alpha");
  c.beta = l.at("beta");
  c.d_margin = l.at("d_margin");
  c.m_margin = l.at("m_margin");
  c.epsilon_floor = l.at("epsilon_floor");
  return c;
}

// The input size comes from the benchmark the run trains on.
inline train::TrainConfig train_config(const RunConfig& rc, int input_size) {
  const Json& t = rc.section("train");
  train::TrainConfig c;
  c.mode = train::mode_from_string(t.at("mode"));
  c.epochs = t.at("epochs");
  c.seed = t.at("seed").get<std::uint64_t>();
  c.lr_task = t.at("lr_task");
  c.lr_aug = t.at("lr_aug");
  c.lr_decay = t.at("lr_decay");
  c.lr_decay_every = t.at("lr_decay_every");
  c.batch_per_class = t.at("batch_per_class");
  c.aug_steps_per_epoch = t.at("aug_steps_per_epoch");
  c.aug_arch = aug_arch_from_tag(t.at("aug_arch"));
  c.aug_arch.hidden = t.at("aug_hidden");
  c.channels = t.at("channels").get<std::vector<int>>();
  c.embed_dim = t.at("embed_dim");
  c.head_depth = t.at("head_depth");
  c.dropout = t.at("dropout");
  c.dct_eps = t.at("dct_eps");
  c.input_size = input_size;
  c.loss = loss_config(rc);
  const Json& im = t.at("immunize");
  if (im.at("kind") != "none") {
    train::Immunize i;
    i.kind = bench::perturb_kind_from_string(im.at("kind"));
    i.max_strength = im.at("max_strength");
    i.probability = im.at("probability");
    const auto [lo, hi] = bench::strength_range(i.kind);
    if (i.max_strength < lo || i.max_strength > hi)
      throw ConfigError("train.immunize.max_strength outside the range of " + im.at("kind").get<std::string>());
    c.immunize = i;
  }
  c.validate();
  return c;
}

}  // namespace pose::config

// SPDX-License-Identifier: Apache-2.0
#include "comodal/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "comodal/error.hpp"
#include "comodal/random.hpp"

namespace comodal {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const char* type_name(const json& v) {
  if (v.is_null()) return "null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return "object";
}

[[noreturn]] void fail(const std::string& path, const std::string& expected, const json& got) {
  throw ConfigError(path + ": expected " + expected + ", got " + type_name(got) + " " +
                    got.dump());
}

/// Object view that remembers which keys were read so leftovers can be
/// reported as unknown.
class Obj {
 public:
  Obj(const json& value, std::string path) : value_(value), path_(std::move(path)) {
    if (!value_.is_object()) fail(display(), "object", value_);
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return value_.contains(key);
  }

  const json& at(const std::string& key) {
    seen_.insert(key);
    return value_.at(key);
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void uint(const std::string& key, std::size_t& out, bool positive = false) {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) {
      fail(key_path(key), "non-negative integer", v);
    }
    out = v.get<std::size_t>();
    if (positive && out == 0) fail(key_path(key), "positive integer", v);
  }

  void u64(const std::string& key, std::uint64_t& out) {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(key_path(key), "non-negative integer", v);
    }
    out = v.get<std::uint64_t>();
  }

  void number(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_number()) fail(key_path(key), "number", v);
    out = v.get<double>();
    if (!std::isfinite(out)) fail(key_path(key), "finite number", v);
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_boolean()) fail(key_path(key), "boolean", v);
    out = v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_string()) fail(key_path(key), "string", v);
    return v.get<std::string>();
  }

  void finish() const {
    for (auto it = value_.begin(); it != value_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()) + ": unknown key");
    }
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& value_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto with_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(path, 0) == 0) throw;
    throw ConfigError(path + ": " + what);
  }
}

StageKind stage_kind_from_string(const std::string& path, const std::string& name) {
  for (auto k : {StageKind::pointwise, StageKind::conv1d, StageKind::spatial_pool,
                 StageKind::self_attention}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError(path +
                    ": expected one of pointwise|conv1d|spatial_pool|self_attention, got \"" +
                    name + "\"");
}

StageSpec parse_stage(const json& value, const std::string& path) {
  Obj o(value, path);
  StageSpec s;
  if (!o.has("kind")) throw ConfigError(o.key_path("kind") + ": required key missing");
  s.kind = stage_kind_from_string(o.key_path("kind"), o.string("kind", ""));
  const bool needs_out = s.kind == StageKind::pointwise || s.kind == StageKind::conv1d;
  if (needs_out && !o.has("out")) throw ConfigError(o.key_path("out") + ": required key missing");
  o.uint("out", s.out, needs_out);
  o.uint("kernel", s.kernel, true);
  o.uint("stride", s.stride, true);
  o.uint("padding", s.padding);
  o.uint("heads", s.heads, true);
  o.uint("ffn_hidden", s.ffn_hidden);
  o.boolean("activation", s.activation);
  o.finish();
  return s;
}

InputSpec parse_input(const json& value, const std::string& path) {
  Obj o(value, path);
  InputSpec in;
  o.uint("channels", in.channels, true);
  o.uint("length", in.length, true);
  if (o.has("spatial")) {
    const json& v = o.at("spatial");
    if (!v.is_array()) fail(o.key_path("spatial"), "array of positive integers", v);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_integer() || v[i].get<long long>() <= 0) {
        fail(o.key_path("spatial") + "[" + std::to_string(i) + "]", "positive integer", v[i]);
      }
      in.spatial.push_back(v[i].get<std::size_t>());
    }
  }
  o.finish();
  return in;
}

ExperimentConfig parse_json(const json& root) {
  ExperimentConfig c;
  Obj o(root, "");
  o.u64("seed", c.seed);

  if (o.has("task")) {
    Obj t(o.at("task"), "task");
    const std::string kind = t.string("kind", "classification");
    if (kind == "classification") {
      c.model.task.kind = TaskKind::classification;
    } else if (kind == "regression") {
      c.model.task.kind = TaskKind::regression;
    } else {
      throw ConfigError("task.kind: expected one of classification|regression, got \"" + kind +
                        "\"");
    }
    t.uint("classes", c.model.task.classes);
    if (c.model.task.kind == TaskKind::classification && c.model.task.classes < 2) {
      throw ConfigError("task.classes: expected integer >= 2");
    }
    t.finish();
  }

  if (!o.has("modalities")) throw ConfigError("modalities: required key missing");
  const json& mods = o.at("modalities");
  if (!mods.is_array()) fail("modalities", "array of objects", mods);
  for (std::size_t i = 0; i < mods.size(); ++i) {
    const std::string path = "modalities[" + std::to_string(i) + "]";
    Obj m(mods[i], path);
    ModalitySpec spec;
    if (!m.has("name")) throw ConfigError(m.key_path("name") + ": required key missing");
    spec.name = m.string("name", "");
    if (m.has("input")) spec.input = parse_input(m.at("input"), m.key_path("input"));
    if (!m.has("stages")) throw ConfigError(m.key_path("stages") + ": required key missing");
    const json& stages = m.at("stages");
    if (!stages.is_array()) fail(m.key_path("stages"), "array of objects", stages);
    for (std::size_t j = 0; j < stages.size(); ++j) {
      spec.stages.push_back(
          parse_stage(stages[j], m.key_path("stages") + "[" + std::to_string(j) + "]"));
    }
    m.uint("attach_after", spec.attach_after);
    m.boolean("project_tokens", spec.project_tokens);
    if (m.has("view")) {
      Obj v(m.at("view"), m.key_path("view"));
      ViewParams view;
      v.number("noise", view.noise);
      v.uint("rank", view.rank);
      if (view.noise < 0.0) throw ConfigError(v.key_path("noise") + ": expected number >= 0");
      v.finish();
      c.data.views[spec.name] = view;
    }
    m.finish();
    c.model.modalities.push_back(std::move(spec));
  }

  if (o.has("multimodal")) {
    Obj mm(o.at("multimodal"), "multimodal");
    mm.uint("width", c.model.stack.width, true);
    mm.uint("heads", c.model.stack.heads, true);
    mm.uint("cross_depth", c.model.stack.cross_depth);
    mm.uint("self_depth", c.model.stack.self_depth);
    mm.uint("ffn_hidden", c.model.stack.ffn_hidden, true);
    mm.boolean("positional_encoding", c.model.positional_encoding);
    mm.finish();
  }

  if (o.has("loss")) {
    Obj l(o.at("loss"), "loss");
    l.number("alpha", c.weights.alpha);
    l.number("beta", c.weights.beta);
    l.number("gamma", c.weights.gamma);
    l.number("temperature", c.weights.temperature);
    for (const auto& [key, value] : {std::pair{"alpha", c.weights.alpha},
                                     std::pair{"beta", c.weights.beta},
                                     std::pair{"gamma", c.weights.gamma}}) {
      if (value < 0.0) {
        throw ConfigError(std::string("loss.") + key + ": expected number >= 0, got " +
                          json(value).dump());
      }
    }
    if (!(c.weights.temperature > 0.0)) {
      throw ConfigError("loss.temperature: expected number > 0, got " +
                        json(c.weights.temperature).dump());
    }
    const std::string kt = l.string("kt", to_string(c.kt));
    try {
      c.kt = kt_mode_from_string(kt);
    } catch (const Error&) {
      throw ConfigError("loss.kt: expected one of decision|feature|attention|none, got \"" + kt +
                        "\"");
    }
    l.boolean("kt_through_stem", c.kt_through_stem);
    l.finish();
  }

  if (o.has("optimizer")) {
    Obj p(o.at("optimizer"), "optimizer");
    p.number("lr", c.optimizer.lr);
    p.number("beta1", c.optimizer.beta1);
    p.number("beta2", c.optimizer.beta2);
    p.number("eps", c.optimizer.eps);
    if (!(c.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr: expected number > 0");
    if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0)) {
      throw ConfigError("optimizer.beta1: expected number in [0, 1)");
    }
    if (!(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) {
      throw ConfigError("optimizer.beta2: expected number in [0, 1)");
    }
    if (!(c.optimizer.eps > 0.0)) throw ConfigError("optimizer.eps: expected number > 0");
    p.finish();
  }

  if (o.has("training")) {
    Obj t(o.at("training"), "training");
    t.uint("epochs", c.epochs, true);
    t.uint("batch_size", c.batch_size, true);
    const std::string mode = t.string("mode", to_string(c.mode));
    try {
      c.mode = train_mode_from_string(mode);
    } catch (const Error&) {
      throw ConfigError(
          "training.mode: expected one of cotrain|no_mm|frozen_shared_mm|no_kt, got \"" + mode +
          "\"");
    }
    t.finish();
  }

  if (o.has("data")) {
    Obj d(o.at("data"), "data");
    d.uint("latent_dim", c.data.latent_dim, true);
    d.uint("train", c.data.train, true);
    d.uint("val", c.data.val, true);
    d.uint("test", c.data.test, true);
    d.number("regression_scale", c.data.regression_scale);
    if (d.has("seed") && !d.at("seed").is_null()) {
      std::uint64_t seed = 0;
      d.u64("seed", seed);
      c.data.seed = seed;
    }
    d.finish();
  }
  o.finish();

  c.validate();
  try {
    CoTrainModel probe(c.model_config());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("modalities: ") + e.what());
  }
  return c;
}

ordered_json stage_json(const StageSpec& s) {
  ordered_json j;
  j["kind"] = to_string(s.kind);
  switch (s.kind) {
    case StageKind::pointwise:
      j["out"] = s.out;
      j["activation"] = s.activation;
      break;
    case StageKind::conv1d:
      j["out"] = s.out;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["padding"] = s.padding;
      j["activation"] = s.activation;
      break;
    case StageKind::spatial_pool:
      break;
    case StageKind::self_attention:
      j["heads"] = s.heads;
      j["ffn_hidden"] = s.ffn_hidden;
      break;
  }
  return j;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  return parse_json(root);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  return parse_config_text(read_text_file(path));
}

std::string config_to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["task"]["kind"] = c.model.task.kind == TaskKind::classification ? "classification"
                                                                     : "regression";
  j["task"]["classes"] = c.model.task.classes;
  j["modalities"] = ordered_json::array();
  for (const auto& m : c.model.modalities) {
    ordered_json mj;
    mj["name"] = m.name;
    mj["input"]["channels"] = m.input.channels;
    mj["input"]["length"] = m.input.length;
    mj["input"]["spatial"] = m.input.spatial;
    mj["stages"] = ordered_json::array();
    for (const auto& s : m.stages) mj["stages"].push_back(stage_json(s));
    mj["attach_after"] = m.attach_after;
    mj["project_tokens"] = m.project_tokens;
    ViewParams view;
    if (auto it = c.data.views.find(m.name); it != c.data.views.end()) view = it->second;
    mj["view"]["noise"] = view.noise;
    mj["view"]["rank"] = view.rank;
    j["modalities"].push_back(mj);
  }
  j["multimodal"]["width"] = c.model.stack.width;
  j["multimodal"]["heads"] = c.model.stack.heads;
  j["multimodal"]["cross_depth"] = c.model.stack.cross_depth;
  j["multimodal"]["self_depth"] = c.model.stack.self_depth;
  j["multimodal"]["ffn_hidden"] = c.model.stack.ffn_hidden;
  j["multimodal"]["positional_encoding"] = c.model.positional_encoding;
  j["loss"]["alpha"] = c.weights.alpha;
  j["loss"]["beta"] = c.weights.beta;
  j["loss"]["gamma"] = c.weights.gamma;
  j["loss"]["temperature"] = c.weights.temperature;
  j["loss"]["kt"] = to_string(c.kt);
  j["loss"]["kt_through_stem"] = c.kt_through_stem;
  j["optimizer"]["lr"] = c.optimizer.lr;
  j["optimizer"]["beta1"] = c.optimizer.beta1;
  j["optimizer"]["beta2"] = c.optimizer.beta2;
  j["optimizer"]["eps"] = c.optimizer.eps;
  j["training"]["epochs"] = c.epochs;
  j["training"]["batch_size"] = c.batch_size;
  j["training"]["mode"] = to_string(c.mode);
  j["data"]["latent_dim"] = c.data.latent_dim;
  j["data"]["train"] = c.data.train;
  j["data"]["val"] = c.data.val;
  j["data"]["test"] = c.data.test;
  j["data"]["regression_scale"] = c.data.regression_scale;
  j["data"]["seed"] = c.data.seed ? ordered_json(*c.data.seed) : ordered_json(nullptr);
  return j.dump(2) + "\n";
}

std::string defaults_reference() {
  const ExperimentConfig c;
  const StageSpec s;
  const InputSpec in;
  const ViewParams v;
  const ModalitySpec m;
  auto num = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", x);
    return std::string(buf);
  };
  auto yes = [](bool b) { return std::string(b ? "true" : "false"); };
  struct Row {
    std::string key, type, fallback, note;
  };
  const std::vector<Row> rows = {
      {"seed", "integer", std::to_string(c.seed), "run seed (initialization, shuffling, data)"},
      {"task.kind", "string", "classification", "classification | regression"},
      {"task.classes", "integer", std::to_string(c.model.task.classes), "classification only"},
      {"modalities", "array", "required", "at least 2 entries"},
      {"modalities[].name", "string", "required", "unique, no '.' or '>'"},
      {"modalities[].input.channels", "integer", std::to_string(in.channels), ""},
      {"modalities[].input.length", "integer", std::to_string(in.length), "temporal length"},
      {"modalities[].input.spatial", "array", "[]", "trailing spatial dims"},
      {"modalities[].stages", "array", "required", "branch stages in order"},
      {"modalities[].stages[].kind", "string", "required",
       "pointwise | conv1d | spatial_pool | self_attention"},
      {"modalities[].stages[].out", "integer", "required", "pointwise and conv1d"},
      {"modalities[].stages[].kernel", "integer", std::to_string(s.kernel), "conv1d"},
      {"modalities[].stages[].stride", "integer", std::to_string(s.stride), "conv1d"},
      {"modalities[].stages[].padding", "integer", std::to_string(s.padding), "conv1d"},
      {"modalities[].stages[].activation", "boolean", yes(s.activation),
       "relu after pointwise / conv1d"},
      {"modalities[].stages[].heads", "integer", std::to_string(s.heads), "self_attention"},
      {"modalities[].stages[].ffn_hidden", "integer", std::to_string(s.ffn_hidden),
       "self_attention; 0 means 2 x width"},
      {"modalities[].attach_after", "integer", std::to_string(m.attach_after),
       "number of stem stages"},
      {"modalities[].project_tokens", "boolean", yes(m.project_tokens),
       "learned map from stem channels to multimodal.width"},
      {"modalities[].view.noise", "number", num(v.noise), "synthetic view noise sigma"},
      {"modalities[].view.rank", "integer", std::to_string(v.rank),
       "latent rank seen by the view; 0 means full"},
      {"multimodal.width", "integer", std::to_string(c.model.stack.width), "token width d"},
      {"multimodal.heads", "integer", std::to_string(c.model.stack.heads), "divides width"},
      {"multimodal.cross_depth", "integer", std::to_string(c.model.stack.cross_depth), ""},
      {"multimodal.self_depth", "integer", std::to_string(c.model.stack.self_depth), ""},
      {"multimodal.ffn_hidden", "integer", std::to_string(c.model.stack.ffn_hidden), ""},
      {"multimodal.positional_encoding", "boolean", yes(c.model.positional_encoding),
       "sinusoidal"},
      {"loss.alpha", "number", num(c.weights.alpha), "transfer weight, >= 0"},
      {"loss.beta", "number", num(c.weights.beta), "unimodal task weight, >= 0"},
      {"loss.gamma", "number", num(c.weights.gamma), "multimodal task weight, >= 0"},
      {"loss.temperature", "number", num(c.weights.temperature), "> 0"},
      {"loss.kt", "string", to_string(c.kt), "decision | feature | attention | none"},
      {"loss.kt_through_stem", "boolean", yes(c.kt_through_stem),
       "false stops transfer gradients at the stem"},
      {"optimizer.lr", "number", num(c.optimizer.lr), "Adam step size"},
      {"optimizer.beta1", "number", num(c.optimizer.beta1), ""},
      {"optimizer.beta2", "number", num(c.optimizer.beta2), ""},
      {"optimizer.eps", "number", num(c.optimizer.eps), ""},
      {"training.epochs", "integer", std::to_string(c.epochs), ""},
      {"training.batch_size", "integer", std::to_string(c.batch_size), ""},
      {"training.mode", "string", to_string(c.mode), "cotrain | no_mm | frozen_shared_mm | no_kt"},
      {"data.latent_dim", "integer", std::to_string(c.data.latent_dim), ""},
      {"data.train", "integer", std::to_string(c.data.train), "examples"},
      {"data.val", "integer", std::to_string(c.data.val), "examples"},
      {"data.test", "integer", std::to_string(c.data.test), "examples"},
      {"data.regression_scale", "number", num(c.data.regression_scale), ""},
      {"data.seed", "integer or null", "null", "pins the dataset; defaults to seed"},
  };
  std::string out = "| key | type | default | notes |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    out += "| `" + r.key + "` | " + r.type + " | " + r.fallback + " | " + r.note + " |\n";
  }
  return out;
}

std::string make_run_id(const std::string& config_bytes, std::uint64_t seed) {
  std::string keyed = config_bytes;
  for (int i = 0; i < 8; ++i) keyed.push_back(static_cast<char>((seed >> (8 * i)) & 0xFF));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(keyed)));
  return buf;
}

}  // namespace comodal

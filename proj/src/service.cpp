#include "psal/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <future>
#include <mutex>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"
#include "psal/experiments.hpp"
#include "psal/image_codec.hpp"
#include "psal/input_saliency.hpp"
#include "psal/trainer.hpp"

namespace psal {

using nlohmann::json;

SessionData load_session(const ServiceArtifacts& a) {
  for (const auto& p : {a.checkpoint, a.dataset, a.stats, a.index}) {
    if (!std::filesystem::exists(p)) throw MissingArtifactError("missing artifact " + p.string());
  }
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  PreparedData data = load_dataset_manifest(a.dataset);
  ProfileStats stats = load_stats(a.stats);
  if (stats.model_fingerprint != 0 && stats.model_fingerprint != ckpt.model.fingerprint()) {
    throw ConfigError("stats " + a.stats.string() + " were computed for a different checkpoint");
  }
  ProfileIndex index = ProfileIndex::load(a.index);
  if (index.filter_count() != ckpt.model.registry().filter_count()) {
    throw ConfigError("profile index filter count does not match the checkpoint");
  }
  return {std::move(ckpt.model), std::move(data), std::move(stats), std::move(index)};
}

namespace {

struct HttpError : Error {
  HttpError(int s, std::string c, const std::string& m) : Error(m), status(s), code(std::move(c)) {}
  int status;
  std::string code;
};

[[noreturn]] void bad_request(const std::string& m) { throw HttpError(400, "invalid_request", m); }

/// Value computed once per key; concurrent requests for the same key wait for
/// the first one instead of recomputing.
template <class K, class V>
class OnceCache {
 public:
  template <class F>
  V get(const K& key, F&& make) {
    std::promise<V> promise;
    std::shared_future<V> fut;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = map_.find(key);
      if (it != map_.end()) {
        fut = it->second;
      } else {
        owner = true;
        fut = promise.get_future().share();
        map_.emplace(key, fut);
      }
    }
    if (owner) {
      try {
        promise.set_value(make());
      } catch (...) {
        {
          std::lock_guard lock(mu_);
          map_.erase(key);
        }
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::mutex mu_;
  std::map<K, std::shared_future<V>> map_;
};

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (text.empty() || text[0] == '-' || text[0] == '+') throw std::invalid_argument(text);
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    bad_request(what + " must be a non-negative integer, got '" + text + "'");
  }
  if (pos != text.size()) bad_request(what + " must be a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

void check_keys(const json& body, std::initializer_list<const char*> allowed) {
  if (!body.is_object()) bad_request("request body must be a JSON object");
  for (const auto& [key, _] : body.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      bad_request("unknown field '" + key + "'");
    }
  }
}

void check_query(const std::map<std::string, std::string>& query, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : query) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      bad_request("unknown query parameter '" + key + "'");
    }
  }
}

template <class T>
T field(const json& body, const char* name, T fallback) {
  if (!body.contains(name)) return fallback;
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    bad_request(std::string("field '") + name + "' has the wrong type");
  }
}

json layers_json(const std::vector<LayerRange>& layers) {
  json out = json::array();
  for (const auto& l : layers) {
    out.push_back({{"layer_id", l.layer_id}, {"name", l.name}, {"first_filter", l.first_filter},
                   {"filter_count", l.filter_count}});
  }
  return out;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '/')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

}  // namespace

struct Service::Impl {
  SessionData s;
  std::unordered_map<std::size_t, std::pair<std::string, std::size_t>> where;  // id -> (split, position)
  mutable OnceCache<std::size_t, Prediction> predictions;
  mutable OnceCache<std::size_t, std::vector<double>> profiles;
  mutable OnceCache<std::tuple<std::size_t, std::size_t, double>, std::shared_ptr<const PixelSaliencyMap>> maps;
  std::unique_ptr<httplib::Server> server;
  std::mutex server_mu;

  explicit Impl(SessionData session) : s(std::move(session)) {
    for (const char* name : {"train", "val", "holdout"}) {
      const Dataset& ds = s.data.by_name(name);
      for (std::size_t i = 0; i < ds.size(); ++i) where[ds.samples[i].id] = {name, i};
    }
  }

  const Sample& sample(std::size_t id) const {
    const auto it = where.find(id);
    if (it == where.end()) throw HttpError(404, "not_found", "no sample with id " + std::to_string(id));
    return s.data.by_name(it->second.first).samples[it->second.second];
  }

  Prediction predict(std::size_t id) const {
    return predictions.get(id, [&] { return s.model.predict(sample(id).image); });
  }

  std::vector<double> profile(std::size_t id) const {
    return profiles.get(id, [&] { return standardized_profile(s.model, sample(id), s.stats).values; });
  }

  std::shared_ptr<const PixelSaliencyMap> raw_map(std::size_t id, std::size_t top, double boost) const {
    return maps.get({id, top, boost}, [&] {
      const Sample& x = sample(id);
      FilterSaliencyProfile z;
      z.values = profile(id);
      return std::make_shared<const PixelSaliencyMap>(
          input_saliency_map(s.model, x, top_salient_boost(z, top, boost), s.stats));
    });
  }

  json sample_meta(std::size_t id) const {
    const Sample& x = sample(id);
    const Prediction p = predict(id);
    return {{"id", id},
            {"split", where.at(id).first},
            {"label", x.label},
            {"predicted", p.predicted},
            {"correct", p.predicted == x.label},
            {"confidences", p.confidences}};
  }

  std::vector<std::size_t> top_filters(std::size_t id, std::size_t top) const {
    FilterSaliencyProfile z;
    z.values = profile(id);
    return top_salient_boost(z, top, 1.0).filters;
  }

  static json outcome(const Prediction& before, const Prediction& after, std::size_t label) {
    json delta = json::array();
    for (std::size_t c = 0; c < after.confidences.size(); ++c) delta.push_back(after.confidences[c] - before.confidences[c]);
    json j = {{"confidences_before", before.confidences},
              {"confidences", after.confidences},
              {"predicted", after.predicted},
              {"corrected", before.predicted != label && after.predicted == label},
              {"correct", after.predicted == label},
              {"delta", delta},
              {"delta_true", after.confidences[label] - before.confidences[label]}};
    j["delta_incorrect"] = before.predicted != label
                               ? json(after.confidences[before.predicted] - before.confidences[before.predicted])
                               : json(nullptr);
    return j;
  }

  // GET /model
  json get_model() const {
    const Model& m = s.model;
    std::ostringstream fp;
    fp << std::hex << m.fingerprint();
    return {{"spec", spec_to_json(m.spec())},
            {"filter_count", m.registry().filter_count()},
            {"parameter_count", m.parameter_count()},
            {"layers", layers_json(m.registry().layers())},
            {"stages", m.stage_names()},
            {"fingerprint", fp.str()},
            {"stats_reference", s.stats.reference_id},
            {"index_size", s.index.size()},
            {"splits",
             {{"train", s.data.splits.train.size()},
              {"val", s.data.splits.val.size()},
              {"holdout", s.data.splits.holdout.size()}}}};
  }

  // GET /samples
  json list_samples(const std::map<std::string, std::string>& q) const {
    check_query(q, {"split", "filter", "offset", "limit"});
    const std::string split = q.count("split") ? q.at("split") : "val";
    if (split != "train" && split != "val" && split != "holdout") bad_request("unknown split '" + split + "'");
    const std::string filter = q.count("filter") ? q.at("filter") : "all";
    if (filter != "all" && filter != "misclassified" && filter != "correct") {
      bad_request("filter must be all, misclassified or correct");
    }
    const std::size_t offset = q.count("offset") ? parse_size(q.at("offset"), "offset") : 0;
    const std::size_t limit = q.count("limit") ? parse_size(q.at("limit"), "limit") : 50;
    if (limit == 0 || limit > 1000) bad_request("limit must lie in [1, 1000]");
    const Dataset& ds = s.data.by_name(split);
    std::vector<std::size_t> ids;
    for (const auto& x : ds.samples) {
      const bool correct = predict(x.id).predicted == x.label;
      if (filter == "all" || (filter == "correct") == correct) ids.push_back(x.id);
    }
    json items = json::array();
    for (std::size_t i = offset; i < ids.size() && i < offset + limit; ++i) items.push_back(sample_meta(ids[i]));
    return {{"split", split}, {"filter", filter}, {"total", ids.size()}, {"offset", offset}, {"limit", limit},
            {"samples", items}};
  }

  json get_sample(std::size_t id, const std::map<std::string, std::string>& q) const {
    check_query(q, {});
    json j = sample_meta(id);
    const Tensor& img = sample(id).image;
    const auto& shape = img.shape();
    j["shape"] = shape;
    j["image_png"] = base64_encode(encode_png(shape[2], shape[1], shape[0], image_to_bytes(img, s.data.normalization)));
    return j;
  }

  json get_profile(std::size_t id, const std::map<std::string, std::string>& q) const {
    check_query(q, {"sorted"});
    const std::string sorted = q.count("sorted") ? q.at("sorted") : "none";
    if (sorted != "none" && sorted != "per_layer") bad_request("sorted must be none or per_layer");
    const auto z = profile(id);
    const Prediction p = predict(id);
    json j = {{"id", id},
              {"label", sample(id).label},
              {"predicted", p.predicted},
              {"stats_reference", s.stats.reference_id},
              {"values", z},
              {"layers", layers_json(s.model.registry().layers())}};
    if (sorted == "per_layer") {
      json layers = json::array();
      for (const auto& l : s.model.registry().layers()) {
        std::vector<std::size_t> ids(l.filter_count);
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = l.first_filter + i;
        std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
        json entries = json::array();
        for (auto f : ids) entries.push_back({{"filter_id", f}, {"value", z[f]}});
        layers.push_back({{"layer_id", l.layer_id}, {"entries", entries}});
      }
      j["sorted"] = layers;
    }
    return j;
  }

  json get_neighbors(std::size_t id, const std::map<std::string, std::string>& q) const {
    check_query(q, {"k", "pool", "layers"});
    NeighborQuery nq;
    nq.k = q.count("k") ? parse_size(q.at("k"), "k") : 10;
    if (nq.k == 0) bad_request("k must be positive");
    nq.pool = parse_pool_filter(q.count("pool") ? q.at("pool") : "all");
    if (q.count("layers")) {
      const std::string& text = q.at("layers");
      const auto dots = text.find("..");
      if (dots == std::string::npos) bad_request("layers must look like a..b");
      nq.layer_range = std::make_pair(parse_size(text.substr(0, dots), "layers"), parse_size(text.substr(dots + 2), "layers"));
    }
    const Sample& x = sample(id);
    const Prediction p = predict(id);
    bool stored = true;
    try {
      s.index.row_of(id);
    } catch (const ConfigError&) {
      stored = false;
    }
    if (stored) {
      nq.sample_id = id;
    } else {
      nq.profile = profile(id);
      nq.exclude_id = id;
    }
    const NeighborResult r = s.index.knn(nq);
    const bool wrong = p.predicted != x.label;
    const auto pair = std::minmax(x.label, p.predicted);
    json items = json::array();
    for (const auto& n : r.neighbors) {
      const RowMeta& m = s.index.meta(s.index.row_of(n.sample_id));
      const bool shares = wrong && !m.correct() && std::minmax(m.label, m.predicted) == pair;
      items.push_back({{"id", n.sample_id},
                       {"similarity", n.similarity},
                       {"label", m.label},
                       {"predicted", m.predicted},
                       {"correct", m.correct()},
                       {"confusion_pair", shares}});
    }
    return {{"id", id},           {"k", nq.k},
            {"pool", pool_filter_name(nq.pool)},
            {"truncated", r.truncated}, {"zero_norm_query", r.zero_norm_query},
            {"neighbors", items}};
  }

  json post_input_saliency(std::size_t id, const json& body) const {
    check_keys(body, {"top_filters", "boost", "postprocess", "percentile"});
    const auto top = field<std::size_t>(body, "top_filters", 10);
    const auto boost = field<double>(body, "boost", 100.0);
    const auto post = field<bool>(body, "postprocess", true);
    const auto pct = field<double>(body, "percentile", 90.0);
    if (top == 0 || top > s.model.registry().filter_count()) bad_request("top_filters out of range");
    if (!(boost > 0)) bad_request("boost must be positive");
    const auto raw = raw_map(id, top, boost);
    const PixelSaliencyMap map = post ? postprocess_map(*raw, pct) : *raw;
    json grid = json::array();
    for (std::size_t y = 0; y < map.height; ++y) {
      grid.push_back(std::vector<double>(map.values.begin() + static_cast<long>(y * map.width),
                                         map.values.begin() + static_cast<long>((y + 1) * map.width)));
    }
    json j = {{"id", id},
              {"filters", map.filters},
              {"boost", map.factor},
              {"height", map.height},
              {"width", map.width},
              {"grid", grid},
              {"postprocessed", map.postprocessed},
              {"degenerate", map.degenerate}};
    if (post) j["overlay_png"] = base64_encode(encode_png(map.width, map.height, 4, heat_overlay(map.values)));
    return j;
  }

  json post_mask(std::size_t id, const json& body) const {
    check_keys(body, {"regions", "pixels", "fill", "constant", "protect", "top_filters"});
    const auto top = field<std::size_t>(body, "top_filters", 10);
    if (top == 0 || top > s.model.registry().filter_count()) bad_request("top_filters out of range");
    json spec_json = body;
    spec_json.erase("top_filters");
    const MaskSpec spec = mask_spec_from_json(spec_json);
    const Sample& x = sample(id);
    const auto& shape = x.image.shape();
    const auto mask = resolve_mask(spec, shape[1], shape[2]);
    const Tensor masked = apply_mask(x.image, spec);
    const auto filters = top_filters(id, top);
    const auto fs = filter_saliency_delta(s.model, {x.image, masked}, x.label, filters, s.stats);
    json j = outcome(predict(id), s.model.predict(masked), x.label);
    j["id"] = id;
    j["masked_pixels"] = std::count(mask.begin(), mask.end(), true);
    j["filters"] = filters;
    j["filter_saliency"] = {{"before", fs[0].mean}, {"after", fs[1].mean}, {"delta", fs[1].delta}};
    return j;
  }

  json post_prune(std::size_t id, const json& body) const {
    check_keys(body, {"mode", "count", "seed"});
    const auto mode = parse_finetune_mode(field<std::string>(body, "mode", "most_salient"));
    const auto count = field<std::size_t>(body, "count", 0);
    const auto seed = field<std::uint64_t>(body, "seed", 0);
    const auto ids = select_filters(profile(id), mode, count, seed, id);
    const Sample& x = sample(id);
    json j = outcome(predict(id), prune_filters(s.model, ids).predict(x.image), x.label);
    j["id"] = id;
    j["mode"] = finetune_mode_name(mode);
    j["count"] = count;
    j["filters"] = ids;
    return j;
  }

  json post_finetune(std::size_t id, const json& body) const {
    check_keys(body, {"mode", "count", "step_size", "seed", "allow_over_cap", "neighbors"});
    const auto mode = parse_finetune_mode(field<std::string>(body, "mode", "most_salient"));
    const auto count = field<std::size_t>(body, "count", 1);
    const auto seed = field<std::uint64_t>(body, "seed", 0);
    const auto k = field<std::size_t>(body, "neighbors", 10);
    if (k == 0) bad_request("neighbors must be positive");
    FinetuneStep step;
    step.filter_ids = select_filters(profile(id), mode, count, seed, id);
    step.step_size = field<double>(body, "step_size", 1e-3);
    step.mode = mode;
    step.allow_over_cap = field<bool>(body, "allow_over_cap", false);
    const Sample& x = sample(id);
    const FinetuneResult tuned = targeted_finetune(s.model, x, step);
    json j = outcome(predict(id), tuned.model.predict(x.image), x.label);
    j["id"] = id;
    j["mode"] = finetune_mode_name(mode);
    j["count"] = count;
    j["filters"] = step.filter_ids;
    j["zero_gradient"] = tuned.zero_gradient;
    j["loss_before"] = tuned.loss_before;
    j["loss_after"] = tuned.loss_after;

    NeighborQuery nq;
    nq.profile = profile(id);
    nq.exclude_id = id;
    nq.k = k;
    nq.pool = PoolFilter::kMisclassifiedOnly;
    json items = json::array();
    std::size_t fixed = 0;
    const auto found = s.index.knn(nq).neighbors;
    for (const auto& n : found) {
      const Sample& ns = sample(n.sample_id);
      const Prediction before = predict(n.sample_id);
      const Prediction after = tuned.model.predict(ns.image);
      const bool now = after.predicted == ns.label;
      fixed += now;
      items.push_back({{"id", n.sample_id},
                       {"similarity", n.similarity},
                       {"corrected", now && before.predicted != ns.label},
                       {"delta_true", after.confidences[ns.label] - before.confidences[ns.label]}});
    }
    j["neighbors"] = items;
    j["neighbor_corrected_fraction"] = found.empty() ? 0.0 : static_cast<double>(fixed) / static_cast<double>(found.size());
    return j;
  }

  json post_paste(std::size_t id, const json& body) const {
    check_keys(body, {"source_id", "source_rect", "dest_xy"});
    if (!body.contains("source_id") || !body.contains("source_rect") || !body.contains("dest_xy")) {
      bad_request("source_id, source_rect and dest_xy are required");
    }
    const auto source_id = field<std::size_t>(body, "source_id", 0);
    const json& r = body.at("source_rect");
    check_keys(r, {"top", "left", "height", "width"});
    Rect rect;
    try {
      rect = {r.at("top").get<std::size_t>(), r.at("left").get<std::size_t>(), r.at("height").get<std::size_t>(),
              r.at("width").get<std::size_t>()};
    } catch (const json::exception&) {
      bad_request("source_rect needs non-negative top, left, height and width");
    }
    const auto dest = field<std::vector<std::size_t>>(body, "dest_xy", {});
    if (dest.size() != 2) bad_request("dest_xy must be [x, y]");
    const Sample& target = sample(id);
    const Sample& source = sample(source_id);
    const auto& shape = target.image.shape();
    const std::size_t c = shape[0], h = shape[1], w = shape[2];
    if (rect.height == 0 || rect.width == 0 || rect.top + rect.height > h || rect.left + rect.width > w) {
      bad_request("source_rect lies outside the image");
    }
    if (dest[1] + rect.height > h || dest[0] + rect.width > w) bad_request("pasted region would leave the image");
    std::vector<double> v(target.image.data().begin(), target.image.data().end());
    const auto src = source.image.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < rect.height; ++y) {
        for (std::size_t xx = 0; xx < rect.width; ++xx) {
          v[(ch * h + dest[1] + y) * w + dest[0] + xx] = src[(ch * h + rect.top + y) * w + rect.left + xx];
        }
      }
    }
    const Tensor pasted(shape, std::move(v));
    json j = outcome(predict(id), s.model.predict(pasted), target.label);
    j["id"] = id;
    j["source_id"] = source_id;
    return j;
  }

  ApiResponse route(const std::string& method, const std::string& path, const std::map<std::string, std::string>& q,
                    const std::string& raw_body) const {
    const auto parts = split_path(path);
    if (parts.size() < 3 || parts[0] != "api" || parts[1] != "v1") {
      throw HttpError(404, "not_found", "no route " + path);
    }
    const std::vector<std::string> r(parts.begin() + 2, parts.end());
    auto need = [&](const char* m) {
      if (method != m) throw HttpError(405, "method_not_allowed", method + " is not allowed on " + path);
    };
    auto body = [&] {
      if (raw_body.empty()) return json::object();
      try {
        return json::parse(raw_body);
      } catch (const json::exception& e) {
        throw HttpError(400, "invalid_json", e.what());
      }
    };
    if (r.size() == 1 && r[0] == "model") {
      need("GET");
      check_query(q, {});
      return {200, get_model()};
    }
    if (r[0] != "samples") throw HttpError(404, "not_found", "no route " + path);
    if (r.size() == 1) {
      need("GET");
      return {200, list_samples(q)};
    }
    const std::size_t id = parse_size(r[1], "sample id");
    if (r.size() == 2) {
      need("GET");
      return {200, get_sample(id, q)};
    }
    if (r.size() == 3 && r[2] == "profile") {
      need("GET");
      return {200, get_profile(id, q)};
    }
    if (r.size() == 3 && r[2] == "neighbors") {
      need("GET");
      return {200, get_neighbors(id, q)};
    }
    if (r.size() == 3 && r[2] == "input_saliency") {
      need("POST");
      check_query(q, {});
      return {200, post_input_saliency(id, body())};
    }
    if (r.size() == 4 && r[2] == "whatif") {
      need("POST");
      check_query(q, {});
      if (r[3] == "mask") return {200, post_mask(id, body())};
      if (r[3] == "prune") return {200, post_prune(id, body())};
      if (r[3] == "finetune") return {200, post_finetune(id, body())};
      if (r[3] == "paste") return {200, post_paste(id, body())};
    }
    throw HttpError(404, "not_found", "no route " + path);
  }
};

Service::Service(SessionData session) : impl_(std::make_unique<Impl>(std::move(session))) {}
Service::~Service() { stop(); }

ApiResponse Service::handle(const std::string& method, const std::string& path,
                            const std::map<std::string, std::string>& query, const std::string& body) const {
  auto error = [](int status, const std::string& code, const std::string& message) {
    return ApiResponse{status, json{{"code", code}, {"message", message}}};
  };
  try {
    return impl_->route(method, path, query, body);
  } catch (const HttpError& e) {
    return error(e.status, e.code, e.what());
  } catch (const NumericalError& e) {
    return error(422, "numerical_error", e.what());
  } catch (const MissingArtifactError& e) {
    return error(404, "missing_artifact", e.what());
  } catch (const Error& e) {
    return error(400, "invalid_request", e.what());
  } catch (const json::exception& e) {
    return error(400, "invalid_request", e.what());
  } catch (const std::exception& e) {
    return error(500, "internal_error", e.what());
  }
}

void Service::serve(const std::string& host, int port, const std::function<void(int)>& on_ready) {
  {
    std::lock_guard lock(impl_->server_mu);
    impl_->server = std::make_unique<httplib::Server>();
  }
  httplib::Server& srv = *impl_->server;
  auto forward = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const ApiResponse r = handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body.dump(), "application/json");
  };
  srv.Get(".*", forward);
  srv.Post(".*", forward);
  srv.Put(".*", forward);
  srv.Delete(".*", forward);
  const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  if (on_ready) on_ready(bound);
  srv.listen_after_bind();
}

void Service::stop() {
  std::lock_guard lock(impl_->server_mu);
  if (impl_->server) impl_->server->stop();
}

}  // namespace psal

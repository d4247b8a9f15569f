#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <thread>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"
#include "psal/experiments.hpp"
#include "psal/image_codec.hpp"
#include "psal/input_saliency.hpp"
#include "psal/parallel.hpp"
#include "psal/profile_index.hpp"
#include "psal/service.hpp"
#include "psal/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace psal;

namespace {

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

void need(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifactError("missing input " + p.string());
}

json read_json(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void log(const std::string& msg) { std::cerr << "[psal] " << msg << '\n'; }

const Sample& find_sample(const PreparedData& data, std::size_t id) {
  for (const char* name : {"train", "val", "holdout"}) {
    for (const auto& s : data.by_name(name).samples) {
      if (s.id == id) return s;
    }
  }
  throw ConfigError("no sample with id " + std::to_string(id) + " in the dataset");
}

Model load_model(const fs::path& p) {
  need(p);
  return load_checkpoint(p).model;
}

ProfileStats read_stats(const fs::path& p) {
  need(p);
  return load_stats(p);
}

PreparedData read_dataset(const fs::path& p) {
  need(p);
  return load_dataset_manifest(p);
}

void check_stats(const Model& model, const ProfileStats& stats) {
  if (stats.model_fingerprint != 0 && stats.model_fingerprint != model.fingerprint()) {
    throw ConfigError("stats were computed for a different checkpoint");
  }
}

std::optional<std::pair<std::size_t, std::size_t>> parse_layers(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const auto dots = text.find("..");
  if (dots == std::string::npos) throw ConfigError("--layers must look like a..b");
  try {
    return std::make_pair(static_cast<std::size_t>(std::stoull(text.substr(0, dots))),
                          static_cast<std::size_t>(std::stoull(text.substr(dots + 2))));
  } catch (const std::exception&) {
    throw ConfigError("--layers must look like a..b");
  }
}

// Shared flags of the commands that need a model, its dataset and stats.
struct Common {
  std::string checkpoint, dataset, stats;
  std::size_t workers = default_workers();
};

void add_common(CLI::App* c, Common& o, bool with_stats = true) {
  c->add_option("--checkpoint", o.checkpoint, "Model checkpoint (.psal)")->required();
  c->add_option("--dataset", o.dataset, "Dataset manifest written by train")->required();
  if (with_stats) c->add_option("--stats", o.stats, "Profile statistics written by stats")->required();
  c->add_option("--workers", o.workers, "Sample-level worker threads")->check(CLI::PositiveNumber);
}

struct SweepArgs {
  Common common;
  std::string config, split = "val", pool = "misclassified", index, csv_out, json_out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> limit;
};

int run_sweep(const std::string& kind, const SweepArgs& a) {
  const Model model = load_model(a.common.checkpoint);
  const PreparedData data = read_dataset(a.common.dataset);
  const ProfileStats stats = read_stats(a.common.stats);
  check_stats(model, stats);
  need(a.config);
  const json cj = read_json(a.config);
  json sweep_json = cj;
  if (cj.contains("percentages")) {
    sweep_json["counts"] = counts_from_percentages(model.registry().filter_count(),
                                                   cj.at("percentages").get<std::vector<double>>());
    sweep_json.erase("percentages");
  }
  SweepConfig config = sweep_config_from_json(sweep_json);
  if (a.seed) config.seed = *a.seed;
  config.workers = a.common.workers;

  const Dataset& split = data.by_name(a.split);
  Dataset pool;
  if (a.pool == "misclassified") pool = misclassified_subset(model, split, a.limit);
  else if (a.pool == "correct") pool = correct_subset(model, split, a.limit);
  else throw ConfigError("--pool must be misclassified or correct");
  log(kind + ": " + std::to_string(pool.size()) + " samples from " + a.split);

  ExperimentReport report;
  if (kind == "prune") {
    report = a.pool == "correct" ? correct_pool_pruning(model, pool, stats, config)
                                 : pruning_sweep(model, pool, stats, config);
  } else if (kind == "perturb") {
    report = perturbation_sweep(model, pool, stats, config);
  } else {
    need(a.index);
    const ProfileIndex index = ProfileIndex::load(a.index);
    Dataset neighbor_pool;
    neighbor_pool.num_classes = split.num_classes;
    neighbor_pool.image_shape = split.image_shape;
    for (const auto& m : index.metas()) neighbor_pool.samples.push_back(find_sample(data, m.sample_id));
    report = finetune_sweep(model, pool, stats, neighbor_pool, index, config);
  }
  log(kind + " finished in " + std::to_string(report.runtime_seconds) + " s");
  if (!a.csv_out.empty()) write_report_csv(a.csv_out, report);
  if (!a.json_out.empty()) write_json(a.json_out, report_to_json(report));
  if (a.csv_out.empty() && a.json_out.empty()) std::cout << report_to_json(report)["rows"].dump(2) << '\n';
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const MissingArtifactError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-saliency toolkit: training, filter saliency profiles, experiments and the explorer API"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint plus dataset manifest");
  std::string t_data, t_model, t_config, t_ckpt, t_manifest, t_history;
  std::optional<std::uint64_t> t_seed;
  train_cmd->add_option("--data", t_data, "Dataset description JSON (kind, synth|paths, split)")->required();
  train_cmd->add_option("--model", t_model, "Model spec JSON (defaults to the built-in small_resnet)");
  train_cmd->add_option("--train-config", t_config, "Training config JSON");
  train_cmd->add_option("--seed", t_seed, "Seed for initialization and shuffling (overrides the config)");
  train_cmd->add_option("--checkpoint-out", t_ckpt, "Checkpoint to write")->required();
  train_cmd->add_option("--dataset-out", t_manifest, "Dataset manifest to write")->required();
  train_cmd->add_option("--history-out", t_history, "Per-epoch metrics CSV");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  Common e_common;
  std::string e_split = "val", e_out;
  add_common(eval_cmd, e_common, false);
  eval_cmd->add_option("--split", e_split, "train, val or holdout");
  eval_cmd->add_option("--out", e_out, "Per-sample predictions CSV");

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Per-filter mean/std of raw profiles over a reference split");
  Common s_common;
  std::string s_split = "train", s_out;
  add_common(stats_cmd, s_common, false);
  stats_cmd->add_option("--split", s_split, "Reference split");
  stats_cmd->add_option("--out", s_out, "Stats JSON to write")->required();

  // profile
  auto* prof_cmd = app.add_subcommand("profile", "Standardized profile of one sample, or a profile index over a split");
  Common p_common;
  std::optional<std::size_t> p_sample;
  std::string p_out, p_split = "val", p_index_out;
  add_common(prof_cmd, p_common);
  prof_cmd->add_option("--sample", p_sample, "Sample id");
  prof_cmd->add_option("--out", p_out, "Profile JSON for --sample (a .f32 sidecar is written next to it)");
  prof_cmd->add_option("--split", p_split, "Split indexed by --index-out");
  prof_cmd->add_option("--index-out", p_index_out, "Profile index sidecar JSON");

  // knn
  auto* knn_cmd = app.add_subcommand("knn", "Exact nearest neighbors in profile space");
  std::string k_index, k_profile, k_pool = "all", k_layers, k_out;
  std::optional<std::size_t> k_sample;
  std::size_t k_k = 10;
  knn_cmd->add_option("--index", k_index, "Profile index sidecar JSON")->required();
  knn_cmd->add_option("--sample", k_sample, "Query by indexed sample id");
  knn_cmd->add_option("--profile", k_profile, "Query by a profile JSON");
  knn_cmd->add_option("--k", k_k, "Number of neighbors")->check(CLI::PositiveNumber);
  knn_cmd->add_option("--pool", k_pool, "all, misclassified or correct");
  knn_cmd->add_option("--layers", k_layers, "Inclusive layer range a..b");
  knn_cmd->add_option("--out", k_out, "Output JSON (stdout when omitted)");

  // sweeps
  SweepArgs prune_args, perturb_args, ft_args;
  auto add_sweep = [&](const char* name, const char* help, SweepArgs& a, bool with_index) {
    auto* c = app.add_subcommand(name, help);
    add_common(c, a.common);
    c->add_option("--config", a.config, "Sweep config JSON (modes, counts or percentages, ...)")->required();
    c->add_option("--split", a.split, "Split the sample pool comes from");
    c->add_option("--pool", a.pool, "misclassified or correct");
    c->add_option("--limit", a.limit, "Use at most this many pool samples");
    c->add_option("--seed", a.seed, "Overrides the config seed");
    c->add_option("--csv-out", a.csv_out, "Summary CSV, one row per mode and count");
    c->add_option("--json-out", a.json_out, "Full report JSON");
    if (with_index) c->add_option("--index", a.index, "Profile index of the neighbor split (holdout)")->required();
    return c;
  };
  auto* prune_cmd = add_sweep("exp-prune", "Filter pruning sweep", prune_args, false);
  auto* perturb_cmd = add_sweep("exp-perturb", "Filter perturbation sweep", perturb_args, false);
  auto* ft_cmd = add_sweep("exp-finetune", "Single-sample targeted fine-tuning sweep", ft_args, true);

  // exp-mask
  auto* mask_cmd = app.add_subcommand("exp-mask", "Salient versus random pixel masking over a sample pool");
  Common m_common;
  std::string m_config, m_split = "val", m_csv, m_json;
  std::optional<std::uint64_t> m_seed;
  std::optional<std::size_t> m_limit;
  add_common(mask_cmd, m_common);
  mask_cmd->add_option("--config", m_config, "Mask config JSON (percent, top_filters, boost, protect)");
  mask_cmd->add_option("--split", m_split, "Split of the misclassified pool");
  mask_cmd->add_option("--limit", m_limit, "Use at most this many samples");
  mask_cmd->add_option("--seed", m_seed, "Random-mask seed");
  mask_cmd->add_option("--csv-out", m_csv, "Per-sample CSV");
  mask_cmd->add_option("--json-out", m_json, "Report JSON with sign tests");

  // input-saliency
  auto* is_cmd = app.add_subcommand("input-saliency", "Pixel map that explains the sample's top salient filters");
  Common i_common;
  std::size_t i_sample = 0, i_top = 10;
  double i_boost = 100.0, i_pct = 90.0;
  bool i_raw = false;
  std::string i_out, i_png;
  add_common(is_cmd, i_common);
  is_cmd->add_option("--sample", i_sample, "Sample id")->required();
  is_cmd->add_option("--top", i_top, "Number of boosted filters")->check(CLI::PositiveNumber);
  is_cmd->add_option("--boost", i_boost, "Boost factor")->check(CLI::PositiveNumber);
  is_cmd->add_option("--percentile", i_pct, "Threshold percentile for post-processing");
  is_cmd->add_flag("--raw", i_raw, "Skip thresholding, blur and rescaling");
  is_cmd->add_option("--out", i_out, "Map JSON (with a .f32 sidecar)")->required();
  is_cmd->add_option("--png-out", i_png, "Heat map overlay PNG");

  // sanity-check
  auto* san_cmd = app.add_subcommand("sanity-check", "Cascading randomization test of input saliency maps");
  Common c_common;
  std::string c_split = "holdout", c_ref = "train", c_csv, c_json;
  std::size_t c_samples = 20, c_top = 10;
  double c_boost = 100.0;
  std::uint64_t c_seed = 0;
  add_common(san_cmd, c_common, false);
  san_cmd->add_option("--split", c_split, "Split the samples come from");
  san_cmd->add_option("--reference", c_ref, "Split for re-derived stats of randomized models");
  san_cmd->add_option("--samples", c_samples, "Number of samples")->check(CLI::PositiveNumber);
  san_cmd->add_option("--top", c_top, "Number of boosted filters")->check(CLI::PositiveNumber);
  san_cmd->add_option("--boost", c_boost, "Boost factor");
  san_cmd->add_option("--seed", c_seed, "Randomization seed");
  san_cmd->add_option("--csv-out", c_csv, "Per-sample CSV");
  san_cmd->add_option("--json-out", c_json, "Summary JSON");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Serve the /api/v1 HTTP interface");
  std::string v_config, v_ckpt, v_data, v_stats, v_index, v_host = "127.0.0.1";
  int v_port = 8080;
  serve_cmd->add_option("--config", v_config, "JSON with any of checkpoint, dataset, stats, index, host, port");
  serve_cmd->add_option("--checkpoint", v_ckpt, "Model checkpoint");
  serve_cmd->add_option("--dataset", v_data, "Dataset manifest");
  serve_cmd->add_option("--stats", v_stats, "Profile statistics");
  serve_cmd->add_option("--index", v_index, "Profile index sidecar");
  serve_cmd->add_option("--host", v_host, "Bind address");
  serve_cmd->add_option("--port", v_port, "Port (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      need(t_data);
      const DatasetManifest manifest = manifest_from_json(read_json(t_data));
      ModelSpec spec;
      if (!t_model.empty()) spec = spec_from_json(read_json(t_model));
      TrainConfig config;
      if (!t_config.empty()) config = train_config_from_json(read_json(t_config));
      if (t_seed) config.seed = *t_seed;
      config.validate();
      const Dataset raw = load_raw(manifest);
      const PreparedData data = prepare(raw, manifest.split);
      if (data.splits.train.image_shape != Shape{spec.channels, spec.height, spec.width} ||
          raw.num_classes != spec.num_classes) {
        throw ConfigError("model spec input shape or class count does not match the dataset");
      }
      Model model(spec, config.seed);
      const auto history = train(model, data.splits.train, data.splits.val, config, [](const EpochMetrics& m) {
        log("epoch " + std::to_string(m.epoch) + " train_loss " + std::to_string(m.train_loss) + " val_acc " +
            std::to_string(m.val_acc));
      });
      const TrainingMetadata meta = finalize_for_checkpoint(model, data.splits.val, config);
      save_checkpoint(model, meta, t_ckpt);
      save_dataset_manifest(manifest, raw, data, t_manifest);
      if (!t_history.empty()) write_history_csv(t_history, history);
      std::cout << json{{"final_accuracy", meta.final_accuracy}, {"epochs", meta.epochs}}.dump() << '\n';
    } else if (*eval_cmd) {
      need(e_common.checkpoint);
      const Checkpoint ckpt = load_checkpoint(e_common.checkpoint);
      const PreparedData data = read_dataset(e_common.dataset);
      const Dataset& ds = data.by_name(e_split);
      const EvalResult r = evaluate(ckpt.model, ds);
      bool golden_ok = true;
      if (ckpt.metadata.golden) {
        golden_ok = make_golden(ckpt.model, ckpt.metadata.golden->input_seed).confidences ==
                    ckpt.metadata.golden->confidences;
        if (!golden_ok) log("warning: golden confidences differ from the checkpoint record");
      }
      if (!e_out.empty()) {
        std::ofstream out(e_out);
        if (!out) throw Error("cannot write " + e_out);
        out.precision(12);
        out << "sample_id,label,predicted,correct,confidence_predicted,confidence_true\n";
        for (std::size_t i = 0; i < ds.size(); ++i) {
          const auto& p = r.predictions[i];
          out << ds.samples[i].id << ',' << ds.samples[i].label << ',' << p.predicted << ','
              << (p.predicted == ds.samples[i].label) << ',' << p.confidences[p.predicted] << ','
              << p.confidences[ds.samples[i].label] << '\n';
        }
      }
      std::cout << json{{"split", e_split}, {"samples", ds.size()}, {"accuracy", r.accuracy}, {"loss", r.loss},
                        {"golden_ok", golden_ok}}
                       .dump()
                << '\n';
    } else if (*stats_cmd) {
      const Model model = load_model(s_common.checkpoint);
      const PreparedData data = read_dataset(s_common.dataset);
      save_stats(compute_stats(model, data.by_name(s_split), s_split, s_common.workers), s_out);
      log("stats over " + std::to_string(data.by_name(s_split).size()) + " samples written to " + s_out);
    } else if (*prof_cmd) {
      if (!p_sample && p_index_out.empty()) throw ConfigError("profile needs --sample and --out, or --index-out");
      const Model model = load_model(p_common.checkpoint);
      const PreparedData data = read_dataset(p_common.dataset);
      const ProfileStats stats = read_stats(p_common.stats);
      check_stats(model, stats);
      if (p_sample) {
        if (p_out.empty()) throw ConfigError("--sample needs --out");
        save_profile(standardized_profile(model, find_sample(data, *p_sample), stats), p_out);
      }
      if (!p_index_out.empty()) {
        ProfileIndex::build(model, data.by_name(p_split), stats, p_common.workers).save(p_index_out);
      }
    } else if (*knn_cmd) {
      need(k_index);
      const ProfileIndex index = ProfileIndex::load(k_index);
      NeighborQuery q;
      if (k_sample.has_value() == !k_profile.empty()) throw ConfigError("knn needs exactly one of --sample, --profile");
      if (k_sample) {
        q.sample_id = *k_sample;
      } else {
        need(k_profile);
        q.profile = load_profile(k_profile).values;
      }
      q.k = k_k;
      q.pool = parse_pool_filter(k_pool);
      q.layer_range = parse_layers(k_layers);
      const json out = neighbors_to_json(index.knn(q));
      if (k_out.empty()) std::cout << out.dump(2) << '\n';
      else write_json(k_out, out);
    } else if (*prune_cmd) {
      return run_sweep("prune", prune_args);
    } else if (*perturb_cmd) {
      return run_sweep("perturb", perturb_args);
    } else if (*ft_cmd) {
      return run_sweep("finetune", ft_args);
    } else if (*mask_cmd) {
      const Model model = load_model(m_common.checkpoint);
      const PreparedData data = read_dataset(m_common.dataset);
      const ProfileStats stats = read_stats(m_common.stats);
      check_stats(model, stats);
      MaskConfig config;
      if (!m_config.empty()) {
        need(m_config);
        const json j = read_json(m_config);
        for (const auto& [key, _] : j.items()) {
          if (key != "percent" && key != "top_filters" && key != "boost" && key != "seed" && key != "protect") {
            throw ConfigError("unknown mask config field '" + key + "'");
          }
        }
        config.percent = j.value("percent", config.percent);
        config.top_filters = j.value("top_filters", config.top_filters);
        config.boost = j.value("boost", config.boost);
        config.seed = j.value("seed", config.seed);
        if (j.contains("protect") && j.at("protect").is_string()) {
          // "objects": the synthetic generator's own-blob boxes stand in for annotated object boxes
          if (j.at("protect") != "objects") throw ConfigError("protect must be \"objects\" or a map of id -> rect");
          const DatasetManifest manifest = manifest_from_json(read_json(m_common.dataset));
          if (manifest.kind != "synth") throw ConfigError("protect \"objects\" needs a synthetic dataset");
          config.protect = synth_object_boxes(manifest.synth);
        } else if (j.contains("protect")) {
          for (const auto& [id, r] : j.at("protect").items()) {
            config.protect[std::stoull(id)] = Rect{r.at("top"), r.at("left"), r.at("height"), r.at("width")};
          }
        }
      }
      if (m_seed) config.seed = *m_seed;
      config.workers = m_common.workers;
      const Dataset pool = misclassified_subset(model, data.by_name(m_split), m_limit);
      log("masking over " + std::to_string(pool.size()) + " misclassified samples");
      const MaskReport report = mask_dataset_experiment(model, pool, stats, config);
      if (!m_csv.empty()) write_mask_csv(m_csv, report);
      const json j = mask_report_to_json(report);
      if (!m_json.empty()) write_json(m_json, j);
      json summary = j;
      summary.erase("records");
      std::cout << summary.dump(2) << '\n';
    } else if (*is_cmd) {
      const Model model = load_model(i_common.checkpoint);
      const PreparedData data = read_dataset(i_common.dataset);
      const ProfileStats stats = read_stats(i_common.stats);
      check_stats(model, stats);
      const Sample& s = find_sample(data, i_sample);
      const auto z = standardized_profile(model, s, stats);
      PixelSaliencyMap map = input_saliency_map(model, s, top_salient_boost(z, i_top, i_boost), stats);
      if (!i_raw) map = postprocess_map(map, i_pct);
      save_map(map, i_out);
      if (!i_png.empty()) {
        std::vector<double> shown = map.values;
        if (i_raw) shown = postprocess_map(map, 0.0, false).values;  // rescale only
        write_file_bytes(i_png, encode_png(map.width, map.height, 4, heat_overlay(shown)));
      }
    } else if (*san_cmd) {
      const Model model = load_model(c_common.checkpoint);
      const PreparedData data = read_dataset(c_common.dataset);
      const Dataset& reference = data.by_name(c_ref);
      const Dataset& from = data.by_name(c_split);
      const auto sets = cascade_stage_sets(model);
      std::vector<std::vector<SanityRow>> rows(std::min(c_samples, from.size()));
      parallel_for(rows.size(), c_common.workers, [&](std::size_t i) {
        rows[i] = sanity_randomization(model, from.samples[i], c_top, c_boost, sets, reference, c_seed);
      });
      json summary = json::array();
      for (std::size_t r = 0; r < sets.size() + 1; ++r) {
        std::vector<double> v;
        for (const auto& sample_rows : rows) v.push_back(sample_rows[r].spearman);
        summary.push_back({{"stages", rows.empty() ? std::vector<std::size_t>{} : rows[0][r].stages},
                           {"mean_spearman", mean_of(v)}});
      }
      if (!c_csv.empty()) {
        std::ofstream out(c_csv);
        if (!out) throw Error("cannot write " + c_csv);
        out.precision(12);
        out << "sample_id,randomized_stages,spearman\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
          for (const auto& row : rows[i]) {
            std::string stages;
            for (auto st : row.stages) stages += (stages.empty() ? "" : "+") + std::to_string(st);
            out << from.samples[i].id << ',' << (stages.empty() ? "none" : stages) << ',' << row.spearman << '\n';
          }
        }
      }
      const json j = {{"samples", rows.size()}, {"seed", c_seed}, {"cascade", summary}};
      if (!c_json.empty()) write_json(c_json, j);
      std::cout << j.dump(2) << '\n';
    } else if (*serve_cmd) {
      ServiceArtifacts a;
      if (!v_config.empty()) {
        need(v_config);
        const json j = read_json(v_config);
        for (const auto& [key, _] : j.items()) {
          if (key != "checkpoint" && key != "dataset" && key != "stats" && key != "index" && key != "host" &&
              key != "port") {
            throw ConfigError("unknown serve config field '" + key + "'");
          }
        }
        a.checkpoint = j.value("checkpoint", "");
        a.dataset = j.value("dataset", "");
        a.stats = j.value("stats", "");
        a.index = j.value("index", "");
        if (serve_cmd->count("--host") == 0) v_host = j.value("host", v_host);
        if (serve_cmd->count("--port") == 0) v_port = j.value("port", v_port);
      }
      if (!v_ckpt.empty()) a.checkpoint = v_ckpt;
      if (!v_data.empty()) a.dataset = v_data;
      if (!v_stats.empty()) a.stats = v_stats;
      if (!v_index.empty()) a.index = v_index;
      if (a.checkpoint.empty() || a.dataset.empty() || a.stats.empty() || a.index.empty()) {
        throw ConfigError("serve needs checkpoint, dataset, stats and index");
      }
      Service service(load_session(a));
      service.serve(v_host, v_port, [&](int port) { log("listening on http://" + v_host + ":" + std::to_string(port) + "/api/v1"); });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}

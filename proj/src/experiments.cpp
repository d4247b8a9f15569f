#include "psal/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

#include "psal/checkpoint.hpp"
#include "psal/error.hpp"
#include "psal/parallel.hpp"

namespace psal {

namespace {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void SweepConfig::validate(std::size_t filter_count) const {
  if (modes.empty()) throw ConfigError("sweep needs at least one mode");
  if (counts.empty()) throw ConfigError("sweep needs at least one filter count");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (i > 0 && counts[i] <= counts[i - 1]) throw ConfigError("sweep counts must be strictly ascending");
    if (counts[i] > filter_count) {
      throw ConfigError("sweep count " + std::to_string(counts[i]) + " exceeds the " + std::to_string(filter_count) +
                        " filters of the model");
    }
  }
  if (resamples == 0) throw ConfigError("resamples must be positive");
  if (!(noise_std >= 0) || noise_seeds == 0) throw ConfigError("noise_std must be >= 0 and noise_seeds >= 1");
  if (!(step_size >= 0)) throw ConfigError("step_size must be >= 0");
  if (neighbors == 0) throw ConfigError("neighbors must be >= 1");
}

nlohmann::json sweep_config_to_json(const SweepConfig& c) {
  std::vector<std::string> modes;
  for (auto m : c.modes) modes.push_back(finetune_mode_name(m));
  return {{"modes", modes},           {"counts", c.counts},         {"seed", c.seed},
          {"resamples", c.resamples}, {"noise_std", c.noise_std},   {"noise_seeds", c.noise_seeds},
          {"step_size", c.step_size}, {"allow_over_cap", c.allow_over_cap}, {"neighbors", c.neighbors}};
}

SweepConfig sweep_config_from_json(const nlohmann::json& j) {
  SweepConfig c;
  try {
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& m : j.at("modes")) c.modes.push_back(parse_finetune_mode(m.get<std::string>()));
    }
    c.counts = j.value("counts", c.counts);
    c.seed = j.value("seed", c.seed);
    c.resamples = j.value("resamples", c.resamples);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.noise_seeds = j.value("noise_seeds", c.noise_seeds);
    c.step_size = j.value("step_size", c.step_size);
    c.allow_over_cap = j.value("allow_over_cap", c.allow_over_cap);
    c.neighbors = j.value("neighbors", c.neighbors);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid sweep config: ") + e.what());
  }
  return c;
}

std::vector<std::size_t> counts_from_percentages(std::size_t total, const std::vector<double>& percentages) {
  std::vector<std::size_t> out;
  for (double p : percentages) {
    if (!(p > 0 && p <= 100)) throw ConfigError("percentages must lie in (0, 100]");
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p / 100.0 * static_cast<double>(total))));
    if (out.empty() || k > out.back()) out.push_back(k);
  }
  return out;
}

std::vector<std::size_t> select_filters(const std::vector<double>& z, SelectionMode mode, std::size_t k,
                                        std::uint64_t seed, std::size_t sample_id) {
  if (k > z.size()) throw ConfigError("cannot select more filters than exist");
  std::vector<std::size_t> ids;
  switch (mode) {
    case SelectionMode::kMostSalient:
      ids = top_k(z, k);
      break;
    case SelectionMode::kLeastSalient: {
      std::vector<double> neg(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) neg[i] = -z[i];
      ids = top_k(neg, k);
      break;
    }
    case SelectionMode::kRandom: {
      std::vector<std::size_t> all(z.size());
      std::iota(all.begin(), all.end(), 0);
      std::mt19937_64 rng(derive_seed(seed, sample_id, k));
      for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
        std::swap(all[i], all[pick(rng)]);
      }
      ids.assign(all.begin(), all.begin() + static_cast<long>(k));
      break;
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

Dataset subset(const Model& model, const Dataset& dataset, bool want_correct, std::optional<std::size_t> limit) {
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.image_shape = dataset.image_shape;
  if (dataset.empty()) return out;
  const EvalResult ev = evaluate(model, dataset);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if ((ev.predictions[i].predicted == dataset.samples[i].label) != want_correct) continue;
    if (limit && out.size() >= *limit) break;
    out.samples.push_back(dataset.samples[i]);
  }
  return out;
}

}  // namespace

Dataset misclassified_subset(const Model& model, const Dataset& dataset, std::optional<std::size_t> limit) {
  return subset(model, dataset, false, limit);
}

Dataset correct_subset(const Model& model, const Dataset& dataset, std::optional<std::size_t> limit) {
  return subset(model, dataset, true, limit);
}

const ReportRow& ExperimentReport::row(SelectionMode mode, std::size_t k) const {
  for (const auto& r : rows) {
    if (r.mode == mode && r.k == k) return r;
  }
  throw ConfigError("no report row for " + finetune_mode_name(mode) + " k=" + std::to_string(k));
}

namespace {

struct Outcome {
  double d_predicted = 0, d_true = 0, corrected = 0;
  double neighbor_corrected = 0, neighbor_true_delta = 0;
};

struct SampleContext {
  const Sample* sample;
  Prediction before;
  std::vector<double> z;
  double baseline_corrected = 0.0;
};

using Intervene = std::function<Outcome(const SampleContext&, const std::vector<std::size_t>& filters, std::size_t k)>;

Outcome confidence_change(const Model& changed, const SampleContext& ctx) {
  const Prediction after = changed.predict(ctx.sample->image);
  Outcome o;
  o.d_predicted = after.confidences[ctx.before.predicted] - ctx.before.confidences[ctx.before.predicted];
  o.d_true = after.confidences[ctx.sample->label] - ctx.before.confidences[ctx.sample->label];
  o.corrected = after.predicted == ctx.sample->label ? 1.0 : 0.0;
  return o;
}

MetricCI summarize(const std::vector<double>& v, const SweepConfig& c) {
  const ConfidenceInterval ci = bootstrap_mean_ci(v, c.resamples, 0.95, c.seed);
  return {ci.estimate, ci.lower, ci.upper};
}

ExperimentReport run_sweep(const std::string& name, const Model& model, const Dataset& pool, const ProfileStats& stats,
                           const SweepConfig& config, const Intervene& intervene,
                           const std::function<double(const SampleContext&)>& baseline = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (pool.empty()) throw ConfigError(name + ": sample pool is empty");
  config.validate(model.registry().filter_count());
  const std::uint64_t fingerprint = model.fingerprint();

  std::vector<std::vector<SampleRecord>> per_sample(pool.size());
  parallel_for(pool.size(), config.workers, [&](std::size_t i) {
    SampleContext ctx;
    ctx.sample = &pool.samples[i];
    ctx.before = model.predict(ctx.sample->image);
    ctx.z = standardized_profile(model, *ctx.sample, stats).values;
    if (baseline) ctx.baseline_corrected = baseline(ctx);
    for (auto mode : config.modes) {
      for (auto k : config.counts) {
        const auto ids = select_filters(ctx.z, mode, k, config.seed, ctx.sample->id);
        const Outcome o = intervene(ctx, ids, k);
        per_sample[i].push_back({ctx.sample->id, mode, k, o.d_predicted, o.d_true, o.corrected, o.neighbor_corrected,
                                 o.neighbor_true_delta, ctx.baseline_corrected});
      }
    }
  });

  if (model.fingerprint() != fingerprint) throw Error(name + ": base model was modified during the sweep");
  ExperimentReport report;
  report.name = name;
  report.model_fingerprint = fingerprint;
  report.config = sweep_config_to_json(config);
  for (auto& recs : per_sample) {
    for (auto& r : recs) report.records.push_back(r);
  }
  for (auto mode : config.modes) {
    for (auto k : config.counts) {
      std::vector<double> dp, dt, cor, nc, nt, bc;
      for (const auto& r : report.records) {
        if (r.mode != mode || r.k != k) continue;
        dp.push_back(r.d_predicted);
        dt.push_back(r.d_true);
        cor.push_back(r.corrected);
        nc.push_back(r.neighbor_corrected);
        nt.push_back(r.neighbor_true_delta);
        bc.push_back(r.baseline_corrected);
      }
      report.rows.push_back({mode, k, dp.size(), summarize(dp, config), summarize(dt, config), summarize(cor, config),
                             summarize(nc, config), summarize(nt, config), summarize(bc, config)});
    }
  }
  report.runtime_seconds = seconds_since(t0);
  return report;
}

}  // namespace

ExperimentReport pruning_sweep(const Model& model, const Dataset& pool, const ProfileStats& stats,
                               const SweepConfig& config) {
  return run_sweep("pruning", model, pool, stats, config,
                   [&](const SampleContext& ctx, const std::vector<std::size_t>& ids, std::size_t) {
                     return confidence_change(prune_filters(model, ids), ctx);
                   });
}

ExperimentReport correct_pool_pruning(const Model& model, const Dataset& correct_pool, const ProfileStats& stats,
                                      const SweepConfig& config) {
  ExperimentReport r = pruning_sweep(model, correct_pool, stats, config);
  r.name = "correct_pool_pruning";
  return r;
}

ExperimentReport perturbation_sweep(const Model& model, const Dataset& pool, const ProfileStats& stats,
                                    const SweepConfig& config) {
  return run_sweep("perturbation", model, pool, stats, config,
                   [&](const SampleContext& ctx, const std::vector<std::size_t>& ids, std::size_t k) {
                     Outcome avg;
                     for (std::size_t s = 0; s < config.noise_seeds; ++s) {
                       const std::uint64_t seed = derive_seed(config.seed, ctx.sample->id, k * 1000 + s);
                       const Outcome o = confidence_change(perturb_filters(model, ids, config.noise_std, seed), ctx);
                       avg.d_predicted += o.d_predicted;
                       avg.d_true += o.d_true;
                       avg.corrected += o.corrected;
                     }
                     const double n = static_cast<double>(config.noise_seeds);
                     avg.d_predicted /= n;
                     avg.d_true /= n;
                     avg.corrected /= n;
                     return avg;
                   });
}

ExperimentReport finetune_sweep(const Model& model, const Dataset& pool, const ProfileStats& stats,
                                const Dataset& neighbor_pool, const ProfileIndex& neighbor_index,
                                const SweepConfig& config) {
  std::unordered_map<std::size_t, std::size_t> position;
  for (std::size_t i = 0; i < neighbor_pool.size(); ++i) position[neighbor_pool.samples[i].id] = i;

  auto neighbors_of = [&](const SampleContext& ctx) {
    NeighborQuery q;
    q.profile = ctx.z;
    q.k = config.neighbors;
    q.pool = PoolFilter::kMisclassifiedOnly;
    q.exclude_id = ctx.sample->id;
    std::vector<std::size_t> rows;
    for (const auto& n : neighbor_index.knn(q).neighbors) {
      const auto it = position.find(n.sample_id);
      if (it == position.end()) throw ConfigError("neighbor index refers to a sample missing from the neighbor pool");
      rows.push_back(it->second);
    }
    return rows;
  };

  return run_sweep(
      "finetune", model, pool, stats, config,
      [&](const SampleContext& ctx, const std::vector<std::size_t>& ids, std::size_t) {
        FinetuneStep step;
        step.filter_ids = ids;
        step.step_size = config.step_size;
        step.allow_over_cap = config.allow_over_cap;
        const FinetuneResult tuned = targeted_finetune(model, *ctx.sample, step);
        Outcome o = confidence_change(tuned.model, ctx);
        const auto rows = neighbors_of(ctx);
        std::vector<Tensor> images;
        for (auto r : rows) images.push_back(neighbor_pool.samples[r].image);
        // same batch layout for both models so an unchanged model reports exactly zero
        const Tensor batch = stack_images(images);
        const auto base = model.predict_batch(batch);
        const auto after = tuned.model.predict_batch(batch);
        double fixed = 0.0, delta = 0.0;
        for (std::size_t n = 0; n < rows.size(); ++n) {
          const std::size_t y = neighbor_pool.samples[rows[n]].label;
          fixed += after[n].predicted == y;
          delta += after[n].confidences[y] - base[n].confidences[y];
        }
        o.neighbor_corrected = fixed / static_cast<double>(rows.size());
        o.neighbor_true_delta = delta / static_cast<double>(rows.size());
        return o;
      },
      [&](const SampleContext& ctx) {
        return full_network_finetune(model, *ctx.sample, config.step_size).corrected ? 1.0 : 0.0;
      });
}

MaskReport mask_dataset_experiment(const Model& model, const Dataset& pool, const ProfileStats& stats,
                                   const MaskConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  if (pool.empty()) throw ConfigError("masking experiment: sample pool is empty");
  if (!(config.percent > 0 && config.percent < 100)) throw ConfigError("mask percent must lie in (0, 100)");
  const std::uint64_t fingerprint = model.fingerprint();
  MaskReport report;
  report.percent = config.percent;
  report.records.resize(pool.size());
  parallel_for(pool.size(), config.workers, [&](std::size_t i) {
    const Sample& s = pool.samples[i];
    const Prediction before = model.predict(s.image);
    const auto z = standardized_profile(model, s, stats);
    const BoostSpec spec = top_salient_boost(z, config.top_filters, config.boost);
    const PixelSaliencyMap map = input_saliency_map(model, s, spec, stats);
    std::optional<Rect> protect;
    if (auto it = config.protect.find(s.id); it != config.protect.end()) protect = it->second;
    const TopMask salient = mask_top_percent(s.image, map, config.percent, protect);
    const TopMask random = mask_random(s.image, salient.count, protect, derive_seed(config.seed, s.id, 7));
    const Prediction ps = model.predict(salient.image), pr = model.predict(random.image);
    const std::size_t y = s.label, wrong = before.predicted;
    MaskRecord& r = report.records[i];
    r.sample_id = s.id;
    r.masked_pixels = salient.count;
    r.salient_d_true = ps.confidences[y] - before.confidences[y];
    r.salient_d_incorrect = ps.confidences[wrong] - before.confidences[wrong];
    r.random_d_true = pr.confidences[y] - before.confidences[y];
    r.random_d_incorrect = pr.confidences[wrong] - before.confidences[wrong];
    const auto fs = filter_saliency_delta(model, {s.image, salient.image, random.image}, y, spec.filters, stats);
    r.filter_saliency_original = fs[0].mean;
    r.filter_saliency_salient = fs[1].mean;
    r.filter_saliency_random = fs[2].mean;
  });
  if (model.fingerprint() != fingerprint) throw Error("masking experiment modified the base model");

  std::vector<double> st, si, rt, ri, diff_inc, fss, fsr, diff_fs;
  for (const auto& r : report.records) {
    st.push_back(r.salient_d_true);
    si.push_back(r.salient_d_incorrect);
    rt.push_back(r.random_d_true);
    ri.push_back(r.random_d_incorrect);
    diff_inc.push_back(r.random_d_incorrect - r.salient_d_incorrect);
    fss.push_back(r.filter_saliency_salient);
    fsr.push_back(r.filter_saliency_random);
    diff_fs.push_back(r.filter_saliency_random - r.filter_saliency_salient);
  }
  report.mean_salient_d_true = mean_of(st);
  report.mean_salient_d_incorrect = mean_of(si);
  report.mean_random_d_true = mean_of(rt);
  report.mean_random_d_incorrect = mean_of(ri);
  report.mean_filter_saliency_salient = mean_of(fss);
  report.mean_filter_saliency_random = mean_of(fsr);
  report.salient_true = sign_test(st);
  report.salient_incorrect = sign_test(si);
  report.random_true = sign_test(rt);
  report.random_incorrect = sign_test(ri);
  report.salient_vs_random_incorrect = sign_test(diff_inc);
  report.salient_vs_random_filter_saliency = sign_test(diff_fs);
  report.model_fingerprint = fingerprint;
  report.runtime_seconds = seconds_since(t0);
  return report;
}

namespace {

nlohmann::json ci_json(const MetricCI& m) { return {{"mean", m.mean}, {"lower", m.lower}, {"upper", m.upper}}; }

nlohmann::json sign_json(const SignTest& t) {
  return {{"positive", t.positive}, {"negative", t.negative}, {"ties", t.ties}, {"p_value", t.p_value},
          {"p_greater", t.p_greater}};
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(12);
  return out;
}

}  // namespace

nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json rows = nlohmann::json::array(), records = nlohmann::json::array();
  const bool finetune = r.name == "finetune";
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"mode", finetune_mode_name(row.mode)}, {"k", row.k}, {"samples", row.samples},
                        {"d_predicted", ci_json(row.d_predicted)}, {"d_true", ci_json(row.d_true)},
                        {"corrected", ci_json(row.corrected)}};
    if (finetune) {
      j["neighbor_corrected"] = ci_json(row.neighbor_corrected);
      j["neighbor_true_delta"] = ci_json(row.neighbor_true_delta);
      j["baseline_corrected"] = ci_json(row.baseline_corrected);
    }
    rows.push_back(j);
  }
  for (const auto& rec : r.records) {
    nlohmann::json j = {{"sample_id", rec.sample_id}, {"mode", finetune_mode_name(rec.mode)}, {"k", rec.k},
                        {"d_predicted", rec.d_predicted}, {"d_true", rec.d_true}, {"corrected", rec.corrected}};
    if (finetune) {
      j["neighbor_corrected"] = rec.neighbor_corrected;
      j["neighbor_true_delta"] = rec.neighbor_true_delta;
      j["baseline_corrected"] = rec.baseline_corrected;
    }
    records.push_back(j);
  }
  return {{"experiment", r.name}, {"config", r.config}, {"model_fingerprint", r.model_fingerprint},
          {"rows", rows}, {"records", records}};
}

void write_report_csv(const std::filesystem::path& path, const ExperimentReport& r) {
  auto out = open_out(path);
  const bool finetune = r.name == "finetune";
  auto cols = [&](const char* name) {
    out << ',' << name << "_mean," << name << "_lower," << name << "_upper";
  };
  out << "mode,k,samples";
  cols("d_predicted");
  cols("d_true");
  cols("corrected");
  if (finetune) {
    cols("neighbor_corrected");
    cols("neighbor_true_delta");
    cols("baseline_corrected");
  }
  out << '\n';
  auto vals = [&](const MetricCI& m) { out << ',' << m.mean << ',' << m.lower << ',' << m.upper; };
  for (const auto& row : r.rows) {
    out << finetune_mode_name(row.mode) << ',' << row.k << ',' << row.samples;
    vals(row.d_predicted);
    vals(row.d_true);
    vals(row.corrected);
    if (finetune) {
      vals(row.neighbor_corrected);
      vals(row.neighbor_true_delta);
      vals(row.baseline_corrected);
    }
    out << '\n';
  }
}

nlohmann::json mask_report_to_json(const MaskReport& r) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& m : r.records) {
    records.push_back({{"sample_id", m.sample_id},
                       {"masked_pixels", m.masked_pixels},
                       {"salient_d_true", m.salient_d_true},
                       {"salient_d_incorrect", m.salient_d_incorrect},
                       {"random_d_true", m.random_d_true},
                       {"random_d_incorrect", m.random_d_incorrect},
                       {"filter_saliency_original", m.filter_saliency_original},
                       {"filter_saliency_salient", m.filter_saliency_salient},
                       {"filter_saliency_random", m.filter_saliency_random}});
  }
  return {{"experiment", "masking"},
          {"percent", r.percent},
          {"samples", r.records.size()},
          {"model_fingerprint", r.model_fingerprint},
          {"mean_salient_d_true", r.mean_salient_d_true},
          {"mean_salient_d_incorrect", r.mean_salient_d_incorrect},
          {"mean_random_d_true", r.mean_random_d_true},
          {"mean_random_d_incorrect", r.mean_random_d_incorrect},
          {"mean_filter_saliency_salient", r.mean_filter_saliency_salient},
          {"mean_filter_saliency_random", r.mean_filter_saliency_random},
          {"sign_tests",
           {{"salient_true", sign_json(r.salient_true)},
            {"salient_incorrect", sign_json(r.salient_incorrect)},
            {"random_true", sign_json(r.random_true)},
            {"random_incorrect", sign_json(r.random_incorrect)},
            {"salient_vs_random_incorrect", sign_json(r.salient_vs_random_incorrect)},
            {"salient_vs_random_filter_saliency", sign_json(r.salient_vs_random_filter_saliency)}}},
          {"records", records}};
}

void write_mask_csv(const std::filesystem::path& path, const MaskReport& r) {
  auto out = open_out(path);
  out << "sample_id,masked_pixels,salient_d_true,salient_d_incorrect,random_d_true,random_d_incorrect,"
         "filter_saliency_original,filter_saliency_salient,filter_saliency_random\n";
  for (const auto& m : r.records) {
    out << m.sample_id << ',' << m.masked_pixels << ',' << m.salient_d_true << ',' << m.salient_d_incorrect << ','
        << m.random_d_true << ',' << m.random_d_incorrect << ',' << m.filter_saliency_original << ','
        << m.filter_saliency_salient << ',' << m.filter_saliency_random << '\n';
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace psal

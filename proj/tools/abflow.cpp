// abflow: data generation, reward caching, training, sampling, evaluation
// and the tabular balance check.
//
// Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "abflow/checkpoint.hpp"
#include "abflow/config.hpp"
#include "abflow/metrics.hpp"
#include "abflow/tabular.hpp"
#include "abflow/toydata.hpp"
#include "abflow/train.hpp"

namespace fs = std::filesystem;
using namespace abflow;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> overrides;
  std::string checkpoint;
  std::optional<int> n_samples;
  std::string region;
  std::string samples;
};

RunConfig effective_config(const CommonOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  for (const auto& kv : o.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.n_samples) c.n_samples = *o.n_samples;
  if (!o.region.empty()) c.region = o.region;
  validate_config(c);
  return c;
}

/// Creates the output directory and records the config the command ran with.
fs::path prepare_out(const CommonOptions& o, const RunConfig& c) {
  fs::path out(o.out);
  fs::create_directories(out);
  atomic_write(out / "config.txt", serialize_config(c));
  return out;
}

int cmd_gen_toy_data(const CommonOptions& o) {
  RunConfig c = effective_config(o);
  fs::path out = prepare_out(o, c);
  auto data = make_toy_dataset(c.toy, c.seed, c.energy);
  write_dataset(out / "dataset.jsonl", data);
  std::printf("wrote %zu complexes to %s\n", data.size(), (out / "dataset.jsonl").c_str());
  return 0;
}

int cmd_precompute_rewards(const CommonOptions& o) {
  RunConfig c = effective_config(o);
  require_paths(c, true, false);
  fs::path out = prepare_out(o, c);
  auto cache = precompute_rewards(parse_dataset(c.dataset), region_tags(), c.energy, c.alpha);
  atomic_write(out / "rewards.jsonl", serialize_rewards(cache));
  std::printf("cached %zu rewards (%d region entries absent)\n", cache.records.size(), cache.skipped);
  return 0;
}

std::string step_checkpoint_name(std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_step_%06lld.bin", static_cast<long long>(step));
  return buf;
}

int cmd_train(const CommonOptions& o) {
  RunConfig c = effective_config(o);
  require_paths(c, true, true);
  fs::path out = prepare_out(o, c);
  auto data = parse_dataset(c.dataset);
  auto cache = load_rewards(c.rewards, c.energy, c.alpha);
  auto items = make_train_items(data, cache, c.region, c.pos_scale);

  TrainState state =
      o.checkpoint.empty() ? initial_state(c) : state_from_checkpoint(load_checkpoint(o.checkpoint, c.arch), c);
  std::string log;
  TrainHooks hooks;
  hooks.on_log = [&](const StepLog& l) { log += l.to_json_line(c.train.objective) + "\n"; };
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(out / step_checkpoint_name(s.step), make_checkpoint(s, c));
  };
  try {
    train(state, items, c, hooks);
  } catch (const TrainingNumericError& e) {
    atomic_write(out / "train_log.jsonl", log);
    save_checkpoint(out / "nan_snapshot.bin", make_checkpoint(state, c));
    atomic_write(out / "nan_report.json",
                 json{{"step", e.step()}, {"error", e.what()}, {"snapshot", "nan_snapshot.bin"}}.dump() + "\n");
    throw;
  }
  atomic_write(out / "train_log.jsonl", log);
  save_checkpoint(out / "checkpoint_final.bin", make_checkpoint(state, c));
  std::printf("trained to step %lld, final log_Z %.6f\n", static_cast<long long>(state.step), state.params.log_z());
  return 0;
}

int cmd_sample(const CommonOptions& o) {
  RunConfig c = effective_config(o);
  require_paths(c, true, false);
  if (o.checkpoint.empty()) throw ConfigError("sample needs --checkpoint");
  fs::path out = prepare_out(o, c);
  auto data = parse_dataset(c.dataset);
  Checkpoint ck = load_checkpoint(o.checkpoint, c.arch);
  state_from_checkpoint(ck, c);  // schedule check
  const ScheduleSet sched = c.schedules();
  const ModelRef model{ck.params, c.arch, sched};
  std::vector<SampleRecord> samples;
  int missing = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& rec = data[i];
    if (!rec.cdr_regions.count(c.region)) {
      std::fprintf(stderr, "skipping '%s': no region %s\n", rec.id.c_str(), c.region.c_str());
      ++missing;
      continue;
    }
    RegionView view = extract_region(rec, c.region, c.pos_scale);
    SampleRequest req{rec.id, c.region, c.n_samples, derive_seed(c.seed, {stream::kSample, i})};
    for (const auto& g : generate_batch(view, req, model, c.energy, c.alpha)) samples.push_back(to_record(view, g));
  }
  atomic_write(out / "samples.jsonl", serialize_samples(samples));
  std::printf("wrote %zu samples (%d complexes skipped)\n", samples.size(), missing);
  return 0;
}

int cmd_eval(const CommonOptions& o) {
  RunConfig c = effective_config(o);
  require_paths(c, true, false);
  if (o.samples.empty()) throw ConfigError("eval needs --samples");
  fs::path out = prepare_out(o, c);
  auto samples = parse_samples_text(read_file(o.samples));
  EvalReport rep = evaluate(samples, parse_dataset(c.dataset), c.energy, c.eval_align);
  atomic_write(out / "eval.jsonl", serialize_eval(rep));
  std::fputs(summary_table(rep).c_str(), stdout);
  return 0;
}

int cmd_tabular(const CommonOptions& o) {
  RunConfig c = effective_config(o);
  fs::path out = prepare_out(o, c);
  TabularSpec spec = c.tabular;
  spec.seed = c.seed;
  TabularResult r = tabular_mode(spec);
  json res = json::array();
  for (const auto& f : r.residuals)
    res.push_back({{"t", f.t}, {"state", f.state}, {"forward", f.forward_flow}, {"backward", f.backward_flow},
                   {"residual", f.residual}});
  const bool ok = r.passes();
  atomic_write(out / "tabular.json", json{{"terminal", r.terminal},
                                          {"target", r.target},
                                          {"l1", r.l1},
                                          {"log_z", r.log_z},
                                          {"log_z_target", r.log_z_target},
                                          {"max_residual", r.max_residual},
                                          {"final_loss", r.final_loss},
                                          {"residuals", res},
                                          {"pass", ok}}
                                         .dump(2) +
                                         "\n");
  std::printf("terminal:");
  for (double p : r.terminal) std::printf(" %.4f", p);
  std::printf("\ntarget:  ");
  for (double p : r.target) std::printf(" %.4f", p);
  std::printf("\nL1 %.5f  log_Z %.5f (target %.5f)  max flow residual %.3g  %s\n", r.l1, r.log_z, r.log_z_target,
              r.max_residual, ok ? "PASS" : "FAIL");
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"abflow: reward-guided diffusion for CDR design"};
  app.require_subcommand(1);
  CommonOptions o;

  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--set", o.overrides, "override a config key, key=value");
    return sub;
  };
  CLI::App* gen = add("gen-toy-data", "generate a synthetic dataset");
  CLI::App* pre = add("precompute-rewards", "cache reference energies and rewards");
  CLI::App* tr = add("train", "train the denoiser");
  tr->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint")->check(CLI::ExistingFile);
  CLI::App* smp = add("sample", "generate CDRs for every complex");
  smp->add_option("--checkpoint", o.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  smp->add_option("--n-samples", o.n_samples, "samples per complex");
  smp->add_option("--region", o.region, "CDR region tag");
  CLI::App* ev = add("eval", "score samples against the references");
  ev->add_option("--samples", o.samples, "sample file")->check(CLI::ExistingFile);
  CLI::App* tab = add("tabular", "train a tabular model and check the balance fixed point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_toy_data(o);
    if (pre->parsed()) return cmd_precompute_rewards(o);
    if (tr->parsed()) return cmd_train(o);
    if (smp->parsed()) return cmd_sample(o);
    if (ev->parsed()) return cmd_eval(o);
    if (tab->parsed()) return cmd_tabular(o);
  } catch (const ad::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitUsage;
}

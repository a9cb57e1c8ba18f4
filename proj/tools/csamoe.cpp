// csamoe command-line tool: synth, train, eval, count, gradcheck.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csamoe/csamoe.hpp"

namespace fs = std::filesystem;
using namespace csamoe;

namespace {

enum Exit : int { ok = 0, usage = 2, numerical = 3, artifact = 4 };

// Tees console lines into train.log once the output directory exists.
class Log {
 public:
  void open(const fs::path& p) {
    file_.open(p);
    if (!file_) throw UsageError("cannot write " + p.string());
    file_ << pending_.str();
  }
  template <class... A>
  void line(const A&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    os << '\n';
    std::cout << os.str() << std::flush;
    if (file_.is_open()) file_ << os.str() << std::flush;
    else pending_ << os.str();
  }

 private:
  std::ofstream file_;
  std::ostringstream pending_;
};

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::size_t capped_workers(std::size_t requested) {
  return std::max<std::size_t>(1, std::min(requested, default_thread_count()));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create directory " + dir.string());
}

std::string part_name_check(const std::string& p) {
  if (p != "train" && p != "val" && p != "test") throw UsageError("--part must be train, val or test");
  return p;
}

std::string predictions_csv(const PassResult& r) {
  std::ostringstream os;
  os << "id,label,score\n" << std::setprecision(10);
  for (std::size_t i = 0; i < r.ids.size(); ++i) os << r.ids[i] << ',' << r.labels[i] << ',' << r.scores[i] << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t per_class = 200, size = 64;
  std::uint64_t seed = 7;
  std::string format = "pgm";
  std::size_t workers = 4;
};

int cmd_synth(const SynthArgs& a) {
  SyntheticSpec spec;
  spec.per_class = a.per_class;
  spec.size = a.size;
  spec.seed = a.seed;
  spec.extension = "." + a.format;
  if (a.size < 32) throw UsageError("--size must be at least 32");
  ensure_dir(a.out);
  const auto samples = synth_generate(spec, a.out, capped_workers(a.workers));
  std::ostringstream os;
  os << "id,label,roughness\n" << std::setprecision(10);
  for (const auto& s : samples) os << s.id << ',' << s.label << ',' << roughness(s.mask) << '\n';
  write_text((fs::path(a.out) / "manifest.csv").string(), os.str());
  std::cout << "wrote " << samples.size() << " samples (" << 2 * samples.size() << " files) to " << a.out << '\n';
  return ok;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::string> variant, drop_expert, preset, data, out;
  std::optional<std::size_t> runs, epochs, workers;
  std::optional<std::uint64_t> seed_base;
  std::optional<double> lr;
};

int cmd_train(const TrainArgs& a) {
  CliConfig c = read_config_file(a.config);
  if (a.variant) apply_config_key(c, "variant", *a.variant);
  if (a.drop_expert) apply_config_key(c, "drop_expert", *a.drop_expert);
  if (a.preset) apply_config_key(c, "preset", *a.preset);
  if (a.data) c.data = *a.data;
  if (a.out) c.out = *a.out;
  if (a.runs) c.runs = *a.runs;
  if (a.epochs) c.train.epochs = *a.epochs;
  if (a.workers) c.train.workers = *a.workers;
  if (a.lr) c.train.lr = *a.lr;
  if (c.runs == 0) throw ConfigError("runs must be at least 1");
  if (c.data.empty()) throw ConfigError("config key 'data' is required");
  c.train.validate();
  c.train.workers = capped_workers(c.train.workers);
  const std::uint64_t split_seed = c.train.seed;
  const std::uint64_t seed_base = a.seed_base.value_or(split_seed);

  const fs::path out = c.out;
  ensure_dir(out);
  Log log;
  log.open(out / "train.log");

  const ModelConfig mc = c.train.model();
  const CountReport counts = count_model(mc);
  std::ostringstream head;
  head << "model " << to_string(mc.variant) << " preset " << to_string(mc.preset);
  if (mc.drop_tumor) head << " without tumor expert";
  if (mc.drop_boundary) head << " without boundary expert";
  log.line(head.str());
  std::ostringstream pc;
  pc << "params " << counts.total_params << " (" << fixed(counts.total_params / 1e6, 3) << "M";
  if (counts.reference_params_m > 0) pc << ", reference " << fixed(counts.reference_params_m, 3) << "M";
  pc << ")  MACs " << fixed(counts.total_macs / 1e9, 3) << "G";
  if (counts.reference_flops_g > 0) pc << " (reference " << fixed(counts.reference_flops_g, 3) << "G)";
  log.line(pc.str());
  log.line("epochs ", c.train.epochs, " batch ", c.train.batch_size, " lr ", c.train.lr, " runs ", c.runs,
           " split seed ", split_seed, " run seeds ", seed_base, "..", seed_base + c.runs - 1);

  std::vector<std::string> warnings;
  const std::size_t side = mc.backbone().input_size;
  const auto samples = load_dataset(c.data, side, &warnings);
  for (const auto& w : warnings) log.line("warning: ", w);
  SplitSpec ss;
  ss.seed = split_seed;
  const Split split = stratified_split(samples, ss);
  write_manifest(out / "manifest.csv", split);
  log.line("data ", samples.size(), " samples: train ", split.train.size(), " val ", split.val.size(), " test ",
           split.test.size());

  std::vector<MetricsReport> reports;
  std::vector<std::string> run_ids;
  for (std::size_t r = 0; r < c.runs; ++r) {
    TrainConfig tc = c.train;
    tc.seed = seed_base + r;
    const fs::path run_dir = out / ("run_" + std::to_string(r));
    ensure_dir(run_dir);
    CsaMoeModel<float> model(mc, tc.seed);
    const auto t0 = std::chrono::steady_clock::now();
    const FitResult fr = fit(tc, split, model, [&](const EpochLog& t, const EpochLog& v) {
      log.line("run ", r, " epoch ", t.epoch, "  train loss ", fixed(t.loss, 4), " acc ", fixed(t.accuracy, 4),
               "  val loss ", fixed(v.loss, 4), " acc ", fixed(v.accuracy, 4), "  gate ", fixed(v.gate[0], 3), '/',
               fixed(v.gate[1], 3), '/', fixed(v.gate[2], 3), "  lr ", t.lr);
    });
    for (const auto& w : fr.warnings) log.line("warning: ", w);
    write_text((run_dir / "epoch_log.csv").string(), epoch_log_csv(fr.logs));
    if (tc.log_alpha) write_text((run_dir / "alpha_log.csv").string(), alpha_log_csv(fr.alpha));
    if (tc.log_channel_weights) write_text((run_dir / "channel_log.csv").string(), channel_log_csv(fr.channels));
    write_checkpoint_file(run_dir / "model.ckpt", to_checkpoint(model));

    PassResult pass;
    const auto [m, roc] = test_metrics(model, split.test, tc.batch_size, tc.workers, &pass);
    write_text((run_dir / "roc_points.csv").string(), roc_csv(roc));
    write_text((run_dir / "predictions.csv").string(), predictions_csv(pass));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.line("run ", r, " seed ", tc.seed, " best epoch ", fr.best_epoch, " val acc ", fixed(fr.best_val_accuracy, 4),
             "  test acc ", fixed(m.accuracy, 4), " precision ", fixed(m.precision, 4), " recall ",
             fixed(m.recall, 4), " f1 ", fixed(m.f1, 4), " auc ", fixed(m.auc, 4), " threshold ", m.threshold, "  (", fixed(secs, 1), " s)");
    reports.push_back(m);
    run_ids.push_back("run_" + std::to_string(r));
  }
  write_text((out / "metrics.csv").string(), metrics_csv(reports, run_ids));
  const RunAggregate agg = aggregate_runs(reports);
  write_text((out / "metrics_summary.csv").string(), metrics_summary_csv(agg));
  log.line("");
  std::istringstream table(format_summary_table({{to_string(mc.variant), agg}}));
  for (std::string l; std::getline(table, l);) log.line(l);
  return ok;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, part = "test", out = ".";
  std::uint64_t seed = 42;
  std::size_t batch_size = 32, workers = 4;
};

int cmd_eval(const EvalArgs& a) {
  part_name_check(a.part);
  const Checkpoint ck = read_checkpoint_file(a.checkpoint);
  const ModelConfig mc = infer_model_config(ck);
  CsaMoeModel<float> model(mc, 0);
  load_into(model, ck);

  const auto samples = load_dataset(a.data, mc.backbone().input_size);
  SplitSpec ss;
  ss.seed = a.seed;
  const Split split = stratified_split(samples, ss);
  const auto& part = a.part == "train" ? split.train : a.part == "val" ? split.val : split.test;
  ensure_dir(a.out);
  PassResult pass;
  const auto [m, roc] = test_metrics(model, part, a.batch_size, capped_workers(a.workers), &pass);
  const fs::path out = a.out;
  write_text((out / "metrics.csv").string(), metrics_csv({m}, {a.part}));
  write_text((out / "roc_points.csv").string(), roc_csv(roc));
  write_text((out / "predictions.csv").string(), predictions_csv(pass));
  std::cout << to_string(mc.variant) << " (" << to_string(mc.preset) << ") on " << a.part << " (" << m.n
            << " samples): accuracy " << fixed(m.accuracy, 4) << " precision " << fixed(m.precision, 4)
            << " recall " << fixed(m.recall, 4) << " f1 " << fixed(m.f1, 4) << " auc " << fixed(m.auc, 4) << " threshold " << m.threshold << '\n';
  return ok;
}

// ---------------------------------------------------------------------------

struct CountArgs {
  std::string variant = "all", preset = "full";
  std::optional<std::string> drop_expert;
};

int cmd_count(const CountArgs& a) {
  std::vector<Variant> variants;
  if (a.variant == "all") variants = {Variant::resnet18, Variant::resnet_moe, Variant::csa_moe};
  else variants = {parse_variant(a.variant)};
  const Preset preset = parse_preset(a.preset);

  std::cout << std::left << std::setw(12) << "Model" << std::right << std::setw(14) << "Params" << std::setw(12)
            << "Params(M)" << std::setw(10) << "ref(M)" << std::setw(12) << "FLOPs(G)" << std::setw(10) << "ref(G)"
            << '\n';
  std::vector<CountReport> reports;
  for (Variant v : variants) {
    ModelConfig mc;
    mc.preset = preset;
    mc.variant = v;
    if (a.drop_expert) {
      CliConfig tmp;
      apply_config_key(tmp, "drop_expert", *a.drop_expert);
      mc.drop_tumor = tmp.train.drop_tumor;
      mc.drop_boundary = tmp.train.drop_boundary;
    }
    const CountReport r = count_model(mc);
    auto ref = [](double x, int d) { return x > 0 ? fixed(x, d) : std::string("-"); };
    std::cout << std::left << std::setw(12) << to_string(v) << std::right << std::setw(14) << r.total_params
              << std::setw(12) << fixed(r.total_params / 1e6, 3) << std::setw(10) << ref(r.reference_params_m, 3)
              << std::setw(12) << fixed(r.total_macs / 1e9, 3) << std::setw(10) << ref(r.reference_flops_g, 3)
              << '\n';
    reports.push_back(r);
  }
  for (std::size_t i = 0; i < variants.size(); ++i) {
    std::cout << '\n' << to_string(variants[i]) << " breakdown\n";
    for (const auto& row : reports[i].rows)
      std::cout << "  " << std::left << std::setw(28) << row.component << std::right << std::setw(12) << row.params
                << std::setw(16) << row.macs << '\n';
  }
  return ok;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 42;
  std::size_t trials = 20;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<std::string> offenders;
  std::cout << std::left << std::setw(34) << "op" << std::right << std::setw(8) << "trials" << std::setw(16)
            << "max_rel_error" << "  status\n";
  for (const auto& c : gradcheck::cases::standard()) {
    const auto r = gradcheck::run_case(c, a.trials, a.seed, a.tolerance);
    std::ostringstream e;
    e << std::scientific << std::setprecision(3) << r.max_rel_error;
    std::cout << std::left << std::setw(34) << r.name << std::right << std::setw(8) << r.trials << std::setw(16)
              << e.str() << "  " << (r.passed ? "ok" : "FAIL") << '\n';
    if (!r.passed) offenders.push_back(r.name);
  }
  for (Variant v : {Variant::csa_moe, Variant::resnet_moe}) {
    const auto m = gradcheck::check_model(v, a.seed, a.tolerance);
    std::ostringstream e;
    e << std::scientific << std::setprecision(3) << m.max_rel_error;
    const std::string name = std::string("model:") + to_string(v) + "(tiny)";
    std::cout << std::left << std::setw(34) << name << std::right << std::setw(8) << m.per_param.size()
              << std::setw(16) << e.str() << "  " << (m.passed ? "ok" : "FAIL") << '\n';
    if (!m.passed)
      for (const auto& [pname, err] : m.per_param)
        if (!(err < a.tolerance)) offenders.push_back(name + " " + pname);
  }
  if (!offenders.empty()) {
    std::cerr << "gradient check failed for:";
    for (const auto& o : offenders) std::cerr << "\n  " << o;
    std::cerr << '\n';
    return numerical;
  }
  std::cout << "all gradients within " << a.tolerance << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSA-MoE-Net breast ultrasound classifier"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic lesion dataset");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--per-class", sa.per_class, "samples per class")->capture_default_str();
  synth->add_option("--size", sa.size, "image side in pixels")->capture_default_str();
  synth->add_option("--seed", sa.seed, "generator seed")->capture_default_str();
  synth->add_option("--format", sa.format, "pgm or png")->check(CLI::IsMember({"pgm", "png"}))->capture_default_str();
  synth->add_option("--workers", sa.workers)->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train one or more runs from a config file");
  train->add_option("--config", ta.config, "key = value config file")->required();
  train->add_option("--variant", ta.variant, "csa_moe, resnet_moe or resnet18");
  train->add_option("--drop-expert", ta.drop_expert, "tumor or boundary");
  train->add_option("--runs", ta.runs, "independent runs");
  train->add_option("--seed-base", ta.seed_base, "seed of run 0; run r uses seed-base + r");
  train->add_option("--preset", ta.preset, "tiny or full");
  train->add_option("--data", ta.data, "dataset root");
  train->add_option("--out", ta.out, "output directory");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--lr", ta.lr);
  train->add_option("--workers", ta.workers);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split part");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--data", ea.data, "dataset root")->required();
  eval->add_option("--part", ea.part, "train, val or test")->capture_default_str();
  eval->add_option("--out", ea.out, "output directory")->capture_default_str();
  eval->add_option("--seed", ea.seed, "split seed")->capture_default_str();
  eval->add_option("--batch-size", ea.batch_size)->capture_default_str();
  eval->add_option("--workers", ea.workers)->capture_default_str();

  CountArgs ca;
  auto* count = app.add_subcommand("count", "parameter and FLOP accounting");
  count->add_option("--variant", ca.variant, "csa_moe, resnet_moe, resnet18 or all")->capture_default_str();
  count->add_option("--preset", ca.preset, "tiny or full")->capture_default_str();
  count->add_option("--drop-expert", ca.drop_expert, "tumor or boundary");

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seed", ga.seed)->capture_default_str();
  grad->add_option("--trials", ga.trials, "random trials per op")->capture_default_str();
  grad->add_option("--tolerance", ga.tolerance)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*count) return cmd_count(ca);
    if (*grad) return cmd_gradcheck(ga);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return usage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical;
  } catch (const FormatError& e) {
    std::cerr << "bad artifact: " << e.what() << '\n';
    return artifact;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return usage;
}

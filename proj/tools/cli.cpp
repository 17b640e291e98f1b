#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "dcp/checkpoint.hpp"
#include "dcp/data.hpp"
#include "dcp/model.hpp"
#include "dcp/prune.hpp"
#include "dcp/random.hpp"
#include "dcp/trainer.hpp"

namespace dcp::cli {
namespace {

namespace fs = std::filesystem;

constexpr std::size_t kSynthTrain = 8000;
constexpr std::size_t kSynthTest = 2000;
constexpr const char* kCheckpointName = "checkpoint.dcpk";
constexpr const char* kMetricsName = "metrics.csv";

struct DataFlags {
  std::string data;  // "synth" | DIR; empty: $DCP_DATA_DIR, else synth
  std::size_t subset = 0;
  std::uint64_t data_seed = 1;
};

struct TrainFlags {
  std::string arch = "tinycnn";
  double width = 1.0;
  double prune_rate = 0.0;
  int epochs = 20;
  std::size_t batch = 128;
  std::uint64_t seed = 1;
  std::string schedule = "mutative";
  std::string from;
  std::string resume;
  std::string out;
  int checkpoint_every = 0;
  std::size_t min_keep = 1;
  int freeze_epoch = -1;
  float lr = 0.1f;
  bool exempt_masked = false;
  bool no_augment = false;
  bool quiet = false;
  DataFlags data;
};

void check_rate(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw UsageError("prune-rate must be in [0,1)");
}

std::string resolve_data(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DCP_DATA_DIR"); env && *env) return env;
  return "synth";
}

data::CifarSplit load_data(const DataFlags& f, int num_classes) {
  const std::string source = resolve_data(f.data);
  if (source == "synth") {
    const std::size_t n = f.subset ? f.subset : kSynthTrain;
    if (n < static_cast<std::size_t>(num_classes))
      throw UsageError("--subset must be at least the number of classes");
    return {data::synth_dataset(num_classes, n, f.data_seed),
            data::synth_dataset(num_classes, kSynthTest, stream_key(f.data_seed, {0x7e57}))};
  }
  std::error_code ec;
  if (!fs::is_directory(source, ec)) throw UsageError("data directory '" + source + "' is not readable");
  auto split = data::load_cifar10(source);
  if (f.subset) split.train = split.train.head(std::min(f.subset, split.train.size()));
  return split;
}

std::string histogram_text(const data::Dataset& d) {
  std::string s;
  for (auto c : d.class_histogram()) s += (s.empty() ? "" : ";") + std::to_string(c);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--data", f.data, "'synth' or a directory of CIFAR-10 binary batches (default: $DCP_DATA_DIR, else synth)");
  cmd->add_option("--subset", f.subset, "use only the first K training records");
  cmd->add_option("--data-seed", f.data_seed, "seed of the synthetic dataset");
}

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_rate) {
  cmd->add_option("--arch", f.arch, "vgg16 | resnet32 | tinycnn");
  cmd->add_option("--width", f.width, "VGG-16 width multiplier");
  if (with_rate) cmd->add_option("--prune-rate", f.prune_rate, "fraction of prunable channels to remove");
  cmd->add_option("--epochs", f.epochs, "training epochs (>= 3)");
  cmd->add_option("--batch", f.batch, "mini-batch size");
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_option("--lambda-schedule", f.schedule, "mutative | fixed:V | divide10");
  cmd->add_option("--from", f.from, "start from the weights in this checkpoint");
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--checkpoint-every", f.checkpoint_every, "also checkpoint every K epochs");
  cmd->add_option("--min-keep", f.min_keep, "channels kept per prunable layer at least");
  cmd->add_option("--freeze-epoch", f.freeze_epoch, "epoch at which masks freeze (default: second lr milestone)");
  cmd->add_option("--lr", f.lr, "initial learning rate");
  cmd->add_flag("--exempt-masked", f.exempt_masked, "masked filters skip the optimizer step");
  cmd->add_flag("--no-augment", f.no_augment, "disable crop/flip augmentation");
  cmd->add_flag("--quiet", f.quiet, "no per-epoch progress lines");
  add_data_flags(cmd, f.data);
}

train::TrainConfig make_config(const TrainFlags& f) {
  check_rate(f.prune_rate);
  train::TrainConfig c;
  c.prune_rate = f.prune_rate;
  c.schedule = engine::DecaySchedule::parse(f.schedule);
  c.lr0 = f.lr;
  c.epochs = f.epochs;
  c.batch_size = f.batch;
  c.seed = f.seed;
  c.min_keep = f.min_keep;
  if (f.freeze_epoch >= 0) c.freeze_epoch = f.freeze_epoch;
  c.init = f.from.empty() ? "scratch" : "from-checkpoint";
  c.exempt_masked = f.exempt_masked;
  c.augment = !f.no_augment;
  c.validate();
  return c;
}

zoo::ModelSpec arch_spec(const std::string& arch, double width) {
  if (arch != "vgg16" && arch != "resnet32" && arch != "tinycnn")
    throw UsageError("unknown arch '" + arch + "' (expected vgg16, resnet32 or tinycnn)");
  if (!(width > 0.0 && width <= 1.0)) throw UsageError("--width must be in (0,1]");
  return zoo::build_by_name(arch, 10, width);
}

std::string final_accuracy(const std::vector<train::MetricsRow>& rows) {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->split == "eval") return fmt6(it->accuracy);
  return rows.empty() ? "nan" : fmt6(rows.back().accuracy);
}

int do_train(const TrainFlags& f, std::ostream& out) {
  std::optional<train::Trainer> trainer;
  data::CifarSplit split;
  if (!f.resume.empty()) {
    const auto snap = io::read_file(f.resume);
    auto probe = io::unpack_model(snap);
    split = load_data(f.data, probe.spec().num_classes);
    trainer.emplace(train::Trainer::resume(snap, split.train, &split.test));
  } else {
    const auto config = make_config(f);
    std::optional<zoo::Network> net;
    if (!f.from.empty()) {
      net.emplace(io::unpack_model(io::read_file(f.from)));
    } else {
      net.emplace(arch_spec(f.arch, f.width), f.seed);
    }
    split = load_data(f.data, net->spec().num_classes);
    trainer.emplace(std::move(*net), config, split.train, &split.test);
  }
  if (split.train.images.dim(2) != static_cast<std::size_t>(trainer->network().spec().image_size))
    throw std::runtime_error("dataset image size does not match the model");

  const fs::path dir = f.out;
  fs::create_directories(dir);
  out << "train_records=" << split.train.size() << " histogram=" << histogram_text(split.train) << "\n";
  trainer->on_epoch_end = [&](train::Trainer& t) {
    write_text(dir / kMetricsName, train::metrics_csv(t.metrics()));
    if (!f.quiet)
      for (auto it = t.metrics().end() - (t.metrics().back().split == "eval" ? 2 : 1); it != t.metrics().end(); ++it)
        out << it->csv() << "\n" << std::flush;
    if (f.checkpoint_every > 0 && t.epoch() % f.checkpoint_every == 0 && !t.done())
      io::write_file(dir / ("checkpoint_e" + std::to_string(t.epoch()) + ".dcpk"), t.snapshot());
  };
  trainer->run();
  write_text(dir / kMetricsName, train::metrics_csv(trainer->metrics()));
  io::write_file(dir / kCheckpointName, trainer->snapshot());
  out << "done epochs=" << trainer->epoch() << " acc=" << final_accuracy(trainer->metrics())
      << " masked=" << trainer->utilities().masked_count() << " checkpoint=" << (dir / kCheckpointName).string() << "\n";
  return kExitOk;
}

io::CheckpointData load_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  return io::read_file(path);
}

int do_prune(const std::string& ckpt, std::optional<double> rate_flag, std::optional<std::size_t> min_keep_flag,
             const std::string& out_dir, std::ostream& out) {
  const auto snap = load_checkpoint(ckpt);
  const auto state = io::unpack_utilities(snap);
  std::optional<train::TrainConfig> config;
  if (snap.has("train.config")) config = train::TrainConfig::from_json(snap.get("train.config"));
  if (!rate_flag && !config) throw UsageError("--prune-rate is required for checkpoints without a training config");
  const double rate = rate_flag.value_or(config ? config->prune_rate : 0.0);
  check_rate(rate);
  const std::size_t min_keep = min_keep_flag.value_or(config ? config->min_keep : 1);

  auto net = io::unpack_model(snap);
  const auto keep = prune::select_keep_sets(state.utilities, rate, min_keep);
  auto compact = prune::export_compact(net, keep);
  const auto report = prune::count_flops(net.spec(), keep);

  const fs::path dir = out_dir;
  fs::create_directories(dir);
  io::CheckpointData packed;
  io::pack_model(packed, compact);
  packed.set_float("prune.rate", rate);
  for (std::size_t l = 0; l < keep.layers(); ++l) {
    std::string list;
    for (auto k : keep.keep[l]) list += (list.empty() ? "" : ",") + std::to_string(k);
    packed.set("prune.keep." + std::to_string(l), list + "/" + std::to_string(keep.channels[l]));
  }
  io::write_file(dir / "compact.dcpk", packed);
  write_text(dir / "flops.txt", report.to_text());
  write_text(dir / "flops.csv", report.to_csv());
  out << "prune.rate=" << fmt6(rate) << "\n";
  out << "prune.masked=" << keep.pruned_total() << "\n";
  out << "params.original=" << net.parameter_count() << "\n";
  out << "params.compact=" << compact.parameter_count() << "\n";
  out << report.to_text();
  return kExitOk;
}

int do_eval(const std::string& ckpt, const DataFlags& df, std::size_t batch, std::ostream& out) {
  const auto snap = load_checkpoint(ckpt);
  auto net = io::unpack_model(snap);
  std::optional<engine::UtilityState> state;
  if (io::has_utilities(snap)) state = io::unpack_utilities(snap);
  const auto split = load_data(df, net.spec().num_classes);
  const auto& d = split.test;
  if (d.images.dim(1) != static_cast<std::size_t>(net.spec().in_channels) ||
      d.images.dim(2) != static_cast<std::size_t>(net.spec().image_size))
    throw std::runtime_error("shape mismatch: dataset images " + shape_str(d.images.shape()) + " vs model input " +
                             std::to_string(net.spec().in_channels) + "x" + std::to_string(net.spec().image_size) + "x" +
                             std::to_string(net.spec().image_size));
  for (auto l : d.labels)
    if (l >= net.spec().num_classes) throw std::runtime_error("shape mismatch: label outside the model's classes");
  const auto r = train::evaluate(net, d, state ? &state->masks : nullptr, batch);
  out << "loss=" << fmt6(r.loss) << " acc=" << fmt6(r.accuracy) << "\n";
  return kExitOk;
}

std::string distribution_csv(const io::CheckpointData& snap) {
  auto net = io::unpack_model(snap);
  std::vector<std::size_t> kept = net.prunable_channels();
  std::vector<std::size_t> total = net.prunable_channels();
  if (io::has_utilities(snap)) {
    const auto state = io::unpack_utilities(snap);
    for (std::size_t l = 0; l < kept.size(); ++l)
      kept[l] = static_cast<std::size_t>(std::count(state.masks[l].begin(), state.masks[l].end(), 1.0f));
  } else {
    // Compact checkpoints record their original widths.
    for (std::size_t l = 0; l < kept.size(); ++l) {
      const std::string key = "prune.keep." + std::to_string(l);
      if (!snap.has(key)) continue;
      const auto& v = snap.get(key);
      total[l] = std::stoull(v.substr(v.find('/') + 1));
    }
  }
  std::string csv = "layer,kept,total\n";
  for (std::size_t l = 0; l < kept.size(); ++l)
    csv += std::to_string(l) + "," + std::to_string(kept[l]) + "," + std::to_string(total[l]) + "\n";
  return csv;
}

struct SweepRow {
  double rate;
  double flops_pruned;
  std::string accuracy;
};

std::string sweep_summary_csv(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("sweep directory '" + dir.string() + "' does not exist");
  std::vector<SweepRow> rows;
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / kCheckpointName) && fs::exists(e.path() / kMetricsName))
      runs.push_back(e.path());
  for (const auto& run : runs) {
    const auto snap = io::read_file(run / kCheckpointName);
    const auto config = train::TrainConfig::from_json(snap.get("train.config"));
    const auto net = io::unpack_model(snap);
    const auto state = io::unpack_utilities(snap);
    const auto report = prune::count_flops(net.spec(), prune::PruneSpec::from_masks(state.masks));
    std::istringstream metrics(read_text(run / kMetricsName));
    std::string line, acc = "nan";
    while (std::getline(metrics, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
      if (f.size() == 8 && f[1] == "eval") acc = f[3];
    }
    rows.push_back({config.prune_rate, report.reduction(), acc});
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.rate < b.rate; });
  std::string csv = "rate,flops_pruned,accuracy\n";
  for (const auto& r : rows) csv += fmt6(r.rate) + "," + fmt6(r.flops_pruned) + "," + r.accuracy + "\n";
  return csv;
}

std::vector<double> parse_rates(const std::string& text) {
  std::vector<double> rates;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    char* end = nullptr;
    const double r = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0') throw UsageError("bad rate '" + item + "' in --rates");
    check_rate(r);
    rates.push_back(r);
  }
  if (rates.empty()) throw UsageError("--rates is empty");
  return rates;
}

int dispatch(CLI::App& app, std::ostream& out, TrainFlags& train_flags, TrainFlags& sweep_flags,
             const std::string& sweep_rates, const std::string& ckpt, std::optional<double> prune_rate,
             std::optional<std::size_t> prune_min_keep, const std::string& prune_out, const DataFlags& eval_data,
             std::size_t eval_batch, const std::string& report_kind, const std::string& report_dir,
             const std::string& report_out, const std::string& flops_arch, double flops_width) {
  if (app.got_subcommand("train")) return do_train(train_flags, out);
  if (app.got_subcommand("prune")) return do_prune(ckpt, prune_rate, prune_min_keep, prune_out, out);
  if (app.got_subcommand("eval")) return do_eval(ckpt, eval_data, eval_batch, out);
  if (app.got_subcommand("report")) {
    std::string csv;
    if (report_kind == "distribution") {
      csv = distribution_csv(load_checkpoint(ckpt));
    } else if (report_kind == "sweep-summary") {
      if (report_dir.empty()) throw UsageError("--dir is required for sweep-summary");
      csv = sweep_summary_csv(report_dir);
    } else {
      throw UsageError("unknown report kind '" + report_kind + "' (expected distribution or sweep-summary)");
    }
    if (!report_out.empty()) write_text(report_out, csv);
    out << csv;
    return kExitOk;
  }
  if (app.got_subcommand("sweep")) {
    const auto rates = parse_rates(sweep_rates);
    const fs::path root = sweep_flags.out;
    for (double r : rates) {
      TrainFlags f = sweep_flags;
      f.prune_rate = r;
      f.out = (root / ("rate_" + fmt6(r))).string();
      out << "sweep rate=" << fmt6(r) << "\n";
      do_train(f, out);
    }
    const auto csv = sweep_summary_csv(root);
    write_text(root / "summary.csv", csv);
    out << csv;
    return kExitOk;
  }
  if (app.got_subcommand("flops")) {
    std::optional<zoo::ModelSpec> spec;
    std::optional<prune::PruneSpec> keep;
    if (!ckpt.empty()) {
      const auto snap = load_checkpoint(ckpt);
      spec = io::unpack_model(snap).spec();
      if (io::has_utilities(snap)) keep = prune::PruneSpec::from_masks(io::unpack_utilities(snap).masks);
    } else {
      spec = arch_spec(flops_arch, flops_width);
    }
    out << (keep ? prune::count_flops(*spec, *keep) : prune::count_flops(*spec)).to_text();
    return kExitOk;
  }
  throw UsageError("no command given");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Training-time channel pruning with decayed Taylor utilities", "dcp"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a network with dynamic channel gating");
  add_train_flags(train_cmd, train_flags, true);
  train_cmd->add_option("--resume", train_flags.resume, "continue the run stored in this checkpoint");

  std::string ckpt;
  double prune_rate_value = -1.0;
  std::size_t min_keep_value = 0;
  std::string prune_out;
  auto* prune_cmd = app.add_subcommand("prune", "export the compact model and a FLOPs report");
  prune_cmd->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  auto* rate_opt = prune_cmd->add_option("--prune-rate", prune_rate_value, "defaults to the training rate");
  auto* keep_opt = prune_cmd->add_option("--min-keep", min_keep_value, "defaults to the training value");
  prune_cmd->add_option("--out", prune_out, "output directory")->required();

  DataFlags eval_data;
  std::size_t eval_batch = 256;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (masked when it carries utilities)");
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--batch", eval_batch, "evaluation batch size");
  add_data_flags(eval_cmd, eval_data);

  std::string report_kind = "distribution", report_dir, report_out;
  auto* report_cmd = app.add_subcommand("report", "emit per-layer channel distribution or sweep summary rows");
  report_cmd->add_option("--kind", report_kind, "distribution | sweep-summary");
  report_cmd->add_option("--checkpoint", ckpt, "checkpoint (distribution)");
  report_cmd->add_option("--dir", report_dir, "sweep output directory (sweep-summary)");
  report_cmd->add_option("--out", report_out, "also write the rows to this file");

  TrainFlags sweep_flags;
  std::string sweep_rates = "0.1,0.3,0.5";
  auto* sweep_cmd = app.add_subcommand("sweep", "train once per pruning rate and summarize");
  add_train_flags(sweep_cmd, sweep_flags, false);
  sweep_cmd->add_option("--rates", sweep_rates, "comma-separated pruning rates");

  std::string flops_arch = "tinycnn";
  double flops_width = 1.0;
  auto* flops_cmd = app.add_subcommand("flops", "FLOPs (multiply-accumulates) of an architecture or checkpoint");
  flops_cmd->add_option("--arch", flops_arch, "vgg16 | resnet32 | tinycnn");
  flops_cmd->add_option("--width", flops_width, "VGG-16 width multiplier");
  flops_cmd->add_option("--checkpoint", ckpt, "use this checkpoint's model and masks");

  std::vector<std::string> argv_store{"dcp"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return kExitUsage;
  }

  std::optional<double> prune_rate;
  if (rate_opt->count()) prune_rate = prune_rate_value;
  std::optional<std::size_t> prune_min_keep;
  if (keep_opt->count()) prune_min_keep = min_keep_value;

  try {
    train::retain_freed_memory();
    return dispatch(app, out, train_flags, sweep_flags, sweep_rates, ckpt, prune_rate, prune_min_keep, prune_out,
                    eval_data, eval_batch, report_kind, report_dir, report_out, flops_arch, flops_width);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const engine::ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return kExitRuntime;
  }
}

}  // namespace dcp::cli

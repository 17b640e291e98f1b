#include "dcp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "dcp/ops.hpp"

namespace dcp::train {

using engine::ConfigError;

void TrainConfig::validate() const {
  if (!(prune_rate >= 0.0 && prune_rate < 1.0)) throw ConfigError("prune-rate must be in [0,1)");
  if (epochs < 3) throw ConfigError("epochs must be >= 3 so both lr milestones fall inside training");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (!(lr0 > 0.0f) || !std::isfinite(lr0)) throw ConfigError("lr0 must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("momentum must be in [0,1)");
  if (!(weight_decay >= 0.0f) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be >= 0");
  if (freeze_epoch && (*freeze_epoch < 0 || *freeze_epoch > epochs))
    throw ConfigError("freeze epoch must be in [0, epochs]");
  if (schedule.kind == engine::DecaySchedule::Kind::kFixed && !(schedule.value > 0.0f && schedule.value < 1.0f))
    throw ConfigError("decay factor must be in (0,1)");
  if (init != "scratch" && init != "from-checkpoint") throw ConfigError("init must be scratch or from-checkpoint");
}

int TrainConfig::resolved_freeze_epoch() const { return freeze_epoch.value_or(engine::lr_milestones(epochs).second); }

float TrainConfig::lr_at(int epoch) const {
  const auto ms = engine::lr_milestones(epochs);
  float lr = lr0;
  if (epoch >= ms.first) lr *= 0.1f;
  if (epoch >= ms.second) lr *= 0.1f;
  return lr;
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["prune_rate"] = io::hex_float(prune_rate);
  j["schedule"] = schedule.str();
  j["lr0"] = io::hex_float(lr0);
  j["momentum"] = io::hex_float(momentum);
  j["weight_decay"] = io::hex_float(weight_decay);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["min_keep"] = min_keep;
  j["freeze_epoch"] = freeze_epoch ? nlohmann::json(*freeze_epoch) : nlohmann::json(nullptr);
  j["init"] = init;
  j["gating"] = gating;
  j["exempt_masked"] = exempt_masked;
  j["augment"] = augment;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    auto hex = [&](const char* key) { return std::strtod(j.at(key).get<std::string>().c_str(), nullptr); };
    TrainConfig c;
    c.prune_rate = hex("prune_rate");
    c.schedule = engine::DecaySchedule::parse(j.at("schedule").get<std::string>());
    c.lr0 = static_cast<float>(hex("lr0"));
    c.momentum = static_cast<float>(hex("momentum"));
    c.weight_decay = static_cast<float>(hex("weight_decay"));
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.min_keep = j.at("min_keep").get<std::size_t>();
    if (!j.at("freeze_epoch").is_null()) c.freeze_epoch = j.at("freeze_epoch").get<int>();
    c.init = j.at("init").get<std::string>();
    c.gating = j.at("gating").get<bool>();
    c.exempt_masked = j.at("exempt_masked").get<bool>();
    c.augment = j.at("augment").get<bool>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
}

std::string MetricsRow::csv() const {
  char buf[256];
  char thr[32];
  if (std::isinf(threshold) && threshold < 0)
    std::snprintf(thr, sizeof thr, "-inf");
  else
    std::snprintf(thr, sizeof thr, "%.6f", static_cast<double>(threshold));
  std::snprintf(buf, sizeof buf, "%d,%s,%.6f,%.6f,%.6f,%.6f,%s,%zu", epoch, split.c_str(), loss, accuracy, lr, lambda,
                thr, churn);
  return buf;
}

namespace {

MetricsRow parse_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) f.push_back(item);
  if (f.size() != 8) throw io::CheckpointError(io::CheckpointErrc::kMalformedHeader, "metrics row '" + line + "'");
  MetricsRow r;
  r.epoch = std::stoi(f[0]);
  r.split = f[1];
  r.loss = std::strtod(f[2].c_str(), nullptr);
  r.accuracy = std::strtod(f[3].c_str(), nullptr);
  r.lr = std::strtod(f[4].c_str(), nullptr);
  r.lambda = std::strtod(f[5].c_str(), nullptr);
  r.threshold = static_cast<float>(std::strtod(f[6].c_str(), nullptr));
  r.churn = static_cast<std::size_t>(std::stoull(f[7]));
  return r;
}

std::size_t argmax_row(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::size_t count_correct(const Tensor& logits, std::span<const std::int32_t> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(logits.data().subspan(i * k, k)) == static_cast<std::size_t>(labels[i])) ++correct;
  return correct;
}

}  // namespace

std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += r.csv() + "\n";
  return out;
}

void sgd_step(std::span<float> w, std::span<const float> g, std::span<float> v, float lr, float momentum,
              float weight_decay) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = momentum * v[i] + (g[i] + weight_decay * w[i]);
    w[i] -= lr * v[i];
  }
}

EvalResult evaluate(zoo::Network& net, const data::Dataset& dataset, const std::vector<engine::Mask>* masks,
                    std::size_t batch_size) {
  if (dataset.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  NoGradGuard no_grad;
  const data::Normalization norm;
  const data::BatchIterator it(dataset.size(), batch_size, 0, 0, /*shuffle=*/false);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < it.batches(); ++b) {
    const auto idx = it.batch(b);
    const auto labels = data::gather_labels(dataset, idx);
    const Tensor logits = net.forward(data::make_batch(dataset, idx, norm), Mode::kEval, masks);
    loss_sum += static_cast<double>(softmax_cross_entropy<float>(logits, labels).item()) * static_cast<double>(idx.size());
    correct += count_correct(logits, labels);
  }
  const auto n = static_cast<double>(dataset.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::size_t mask_churn(const std::vector<engine::Mask>& a, const std::vector<engine::Mask>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask_churn: layer count differs");
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].size() != b[l].size()) throw std::invalid_argument("mask_churn: channel count differs");
    for (std::size_t k = 0; k < a[l].size(); ++k) n += (a[l][k] != 0.0f) != (b[l][k] != 0.0f);
  }
  return n;
}

Trainer::Trainer(zoo::Network net, TrainConfig config, const data::Dataset& train, const data::Dataset* test)
    : net_(std::move(net)), config_(std::move(config)), train_(&train), test_(test) {
  config_.validate();
  if (train.size() == 0) throw std::invalid_argument("training set is empty");
  for (auto l : train.labels)
    if (l < 0 || l >= net_.spec().num_classes)
      throw ConfigError("label " + std::to_string(l) + " outside the model's " + std::to_string(net_.spec().num_classes) +
                        " classes");
  state_ = engine::UtilityState::init(net_.prunable_channels());
  prev_epoch_masks_ = state_.masks;
}

void Trainer::run() {
  while (!done()) run_epoch();
}

std::vector<MetricsRow> Trainer::run_epoch() {
  if (done()) throw std::logic_error("training already finished");
  const auto step = engine::step_schedule(epoch_, config_.epochs, config_.schedule, config_.resolved_freeze_epoch());
  const float lr = config_.lr_at(epoch_);
  if (config_.gating) state_.decay = step.decay;

  const data::Normalization norm;
  const data::BatchIterator it(train_->size(), config_.batch_size, config_.seed, static_cast<std::uint64_t>(epoch_));
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < it.batches(); ++b) {
    const auto idx = it.batch(b);
    Tensor x = data::make_batch(*train_, idx, norm);
    if (config_.augment) data::augment(x, config_.seed, static_cast<std::uint64_t>(epoch_), b);
    const auto labels = data::gather_labels(*train_, idx);

    // Masks already reflect the latest utilities, so freezing just stops updates.
    if (config_.gating && step.frozen) state_.frozen = true;
    train_step(x, labels, loss_sum, correct, b);
    optimizer_step(lr);
    // Threshold and masks follow every utility update; the first batch runs
    // on the initial all-ones masks, so the first selection is informed.
    if (config_.gating && !state_.frozen) {
      auto sel = engine::select_channels(state_.utilities, config_.prune_rate, config_.min_keep);
      state_.masks = std::move(sel.masks);
      state_.threshold = sel.threshold;
    }
  }

  const std::size_t churn = config_.gating ? mask_churn(state_.masks, prev_epoch_masks_) : 0;
  prev_epoch_masks_ = state_.masks;
  const double lambda = step.decay;
  const auto n = static_cast<double>(train_->size());
  std::vector<MetricsRow> rows;
  rows.push_back({epoch_, "train", loss_sum / n, static_cast<double>(correct) / n, lr, lambda, state_.threshold, churn});
  if (test_) {
    const auto r = evaluate(net_, *test_, config_.gating ? &state_.masks : nullptr);
    rows.push_back({epoch_, "eval", r.loss, r.accuracy, lr, lambda, state_.threshold, churn});
  }
  metrics_.insert(metrics_.end(), rows.begin(), rows.end());
  ++epoch_;
  if (on_epoch_end) on_epoch_end(*this);
  return rows;
}

void Trainer::train_step(const Tensor& x, std::span<const std::int32_t> labels, double& loss_sum, std::size_t& correct,
                         std::uint64_t batch_index) {
  const bool gate = config_.gating;
  const bool track = gate && !state_.frozen;
  engine::GateTrace trace(track ? net_.prunable_layers() : 0);
  const Tensor logits = net_.forward(x, Mode::kTrain, gate ? &state_.masks : nullptr, track ? &trace : nullptr);
  const Tensor loss = softmax_cross_entropy<float>(logits, labels);
  const float value = loss.item();
  if (!std::isfinite(value))
    diverged("epoch " + std::to_string(epoch_) + " batch " + std::to_string(batch_index), track ? &trace : nullptr);

  net_.zero_grad();
  backward(loss);
  if (track) engine::update_utilities(state_, engine::normalized_criteria(trace));

  step_losses_.push_back(value);
  loss_sum += static_cast<double>(value) * static_cast<double>(labels.size());
  correct += count_correct(logits, labels);
}

void Trainer::optimizer_step(float lr) {
  auto params = net_.parameters();
  if (velocity_.empty())
    for (const auto& p : params) velocity_.emplace_back(p.tensor.numel(), 0.0f);
  std::vector<float> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    std::span<const float> g = p.tensor.grad();
    if (g.empty()) {
      zeros.assign(p.tensor.numel(), 0.0f);
      g = zeros;
    }
    auto w = p.tensor.mutable_data();
    auto& v = velocity_[i];
    if (config_.exempt_masked && config_.gating && p.prune_slot) {
      const auto& mask = state_.masks[*p.prune_slot];
      const std::size_t row = w.size() / mask.size();
      for (std::size_t r = 0; r < mask.size(); ++r) {
        if (mask[r] == 0.0f) continue;
        sgd_step(w.subspan(r * row, row), g.subspan(r * row, row), std::span<float>(v).subspan(r * row, row), lr,
                 config_.momentum, config_.weight_decay);
      }
    } else {
      sgd_step(w, g, v, lr, config_.momentum, config_.weight_decay);
    }
  }
}

void Trainer::diverged(const std::string& where, const engine::GateTrace* trace) {
  std::string culprit = "loss";
  auto check = [&](const std::string& name, std::span<const float> values) {
    if (culprit == "loss" && !all_finite(values)) culprit = name;
  };
  for (auto& p : net_.parameters()) check(p.name, p.tensor.data());
  for (auto& e : net_.state_entries()) check(e.name, e.values);
  if (trace)
    for (std::size_t l = 0; l < trace->size(); ++l)
      if (trace->at(l).defined()) check("gate." + std::to_string(l), trace->at(l).data());
  throw DivergenceError("non-finite loss at " + where + "; first non-finite tensor: " + culprit);
}

io::CheckpointData Trainer::snapshot() {
  io::CheckpointData out;
  io::pack_model(out, net_);
  io::pack_utilities(out, state_);
  out.set("train.config", config_.to_json());
  out.set("train.epoch", std::to_string(epoch_));
  std::string rows;
  for (const auto& r : metrics_) rows += (rows.empty() ? "" : "|") + r.csv();
  out.set("train.metrics", rows);
  const auto params = net_.parameters();
  for (std::size_t i = 0; i < velocity_.size(); ++i)
    out.add_tensor("velocity." + params[i].name, params[i].tensor.shape(), velocity_[i]);
  for (std::size_t l = 0; l < prev_epoch_masks_.size(); ++l)
    out.add_tensor("prev_mask." + std::to_string(l), {prev_epoch_masks_[l].size()}, prev_epoch_masks_[l]);
  if (!step_losses_.empty()) out.add_tensor("train.step_losses", {step_losses_.size()}, step_losses_);
  return out;
}

Trainer Trainer::resume(const io::CheckpointData& snap, const data::Dataset& train, const data::Dataset* test) {
  Trainer t(io::unpack_model(snap), TrainConfig::from_json(snap.get("train.config")), train, test);
  t.state_ = io::unpack_utilities(snap);
  t.epoch_ = static_cast<int>(snap.get_int("train.epoch"));
  std::stringstream rows(snap.get("train.metrics"));
  std::string line;
  while (std::getline(rows, line, '|'))
    if (!line.empty()) t.metrics_.push_back(parse_row(line));
  const auto params = t.net_.parameters();
  if (snap.has_tensor("velocity." + params.front().name))
    for (const auto& p : params) {
      const auto& rec = snap.tensor("velocity." + p.name);
      if (rec.values.size() != p.tensor.numel())
        throw io::CheckpointError(io::CheckpointErrc::kShapeMismatch, "velocity for '" + p.name + "'");
      t.velocity_.push_back(rec.values);
    }
  for (std::size_t l = 0; l < t.prev_epoch_masks_.size(); ++l)
    t.prev_epoch_masks_[l] = snap.tensor("prev_mask." + std::to_string(l)).values;
  if (snap.has_tensor("train.step_losses")) t.step_losses_ = snap.tensor("train.step_losses").values;
  return t;
}

}  // namespace dcp::train

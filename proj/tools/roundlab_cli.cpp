/*
 * Copyright 2026 The roundlab Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// roundlab: train / quantize / attack / detect / eval / trigger on the desk pipeline.
//
// Exit codes: 0 ok, 2 configuration or usage, 3 malformed file, 4 numeric failure, 1 other.

#include "roundlab/adaptive.hpp"
#include "roundlab/data.hpp"
#include "roundlab/defense.hpp"
#include "roundlab/model_io.hpp"
#include "roundlab/run_config.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace roundlab;

namespace
{

constexpr int kSchemaVersion = 1;
constexpr std::size_t kProbeSize = 256;

struct Inputs
{
  Dataset train;
  Dataset test;
  bool synthesized = false;
  Dataset full;
};

Inputs load_inputs(const RunConfig &cfg)
{
  Inputs in;
  if (cfg.paths.dataset.empty())
  {
    in.full = synth_dataset({4, 5000, 16, 16, 1, cfg.seed});
    in.synthesized = true;
  }
  else
    in.full = load_dataset(cfg.paths.dataset);
  in.full.require_labels("the CLI");
  if (in.full.size() < 10)
    throw ConfigError("dataset has too few samples");
  std::tie(in.train, in.test) = split(in.full, in.full.size() * 4 / 5);
  return in;
}

std::vector<Tensor> calibration_batches(const Inputs &in, const RunConfig &cfg)
{
  return batches(build_calibration(in.train, 0.01, cfg.seed), 32);
}

Model require_model(const RunConfig &cfg, const Inputs &in)
{
  if (cfg.paths.model.empty())
    throw ConfigError("paths.model is required for this command");
  Model m = load_model(cfg.paths.model);
  if (m.input_shape() != in.full.sample_shape())
    throw DimensionError("model input " + shape_string(m.input_shape()) + " does not match dataset samples " +
                         shape_string(in.full.sample_shape()));
  if (m.num_classes() < in.full.num_classes)
    throw DimensionError("model has fewer outputs than the dataset has classes");
  return m;
}

json base_report(const char *command, const RunConfig &cfg)
{
  json r;
  r["schema_version"] = kSchemaVersion;
  r["command"] = command;
  json c = json::object();
  for (const auto &[k, v] : cfg.resolved())
    c[k] = v;
  r["config"] = c;
  return r;
}

json spec_json(const QuantSpec &s) { return {{"bits", s.bits}, {"scale", s.scale}, {"n", s.n}, {"p", s.p}}; }

class Outputs
{
public:
  explicit Outputs(const RunConfig &cfg) : dir_(cfg.paths.out) {}

  // Nothing reaches disk until commit, so a failing command leaves no partial outputs.
  void add(const std::string &name, std::vector<char> bytes) { files_.push_back({name, std::move(bytes)}); }
  void add(const std::string &name, const json &j)
  {
    const std::string s = j.dump(2) + "\n";
    files_.push_back({name, std::vector<char>(s.begin(), s.end())});
  }

  void commit() const
  {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec)
      throw ConfigError("cannot create " + dir_.string() + ": " + ec.message());
    for (const auto &[name, bytes] : files_)
    {
      io::write_file_atomic(dir_ / name, bytes);
      std::fprintf(stderr, "wrote %s\n", (dir_ / name).string().c_str());
    }
  }

private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::vector<char>>> files_;
};

int cmd_train(const RunConfig &cfg)
{
  const Inputs in = load_inputs(cfg);
  TrainConfig tc;
  tc.seed = cfg.seed;
  const Model init = desk_cnn(in.full.sample_shape(), in.full.num_classes, cfg.seed);
  const Model m = round_to_f32(train_model(init, in.train.images, *in.train.labels, tc));
  json r = base_report("train", cfg);
  r["train_samples"] = in.train.size();
  r["test_samples"] = in.test.size();
  r["ca"] = eval_ca(m, in.test);
  Outputs out(cfg);
  out.add("model.qnet", serialize_model(m));
  if (in.synthesized)
    out.add("dataset.qdat", serialize_dataset(in.full));
  out.add("train.json", r);
  out.commit();
  std::printf("CA %.4f\n", r["ca"].get<double>());
  return 0;
}

int cmd_quantize(const RunConfig &cfg)
{
  const Inputs in = load_inputs(cfg);
  const Model m = require_model(cfg, in);
  const auto q = quantize_model_benign(m, calibration_batches(in, cfg), cfg.quantize_config());
  json r = base_report("quantize", cfg);
  r["ca_float"] = eval_ca(m, in.test);
  r["ca"] = eval_ca(q.model, in.test);
  json layers = json::array();
  for (const auto &l : q.layers)
    layers.push_back({{"layer", l.layer},
                      {"spec", spec_json(l.spec)},
                      {"accuracy_loss_nearest", l.accuracy_nearest},
                      {"accuracy_loss_final", l.accuracy_final},
                      {"flipped_fraction", l.flipped_fraction},
                      {"binarization", l.binarization}});
  r["layers"] = layers;
  Outputs out(cfg);
  out.add("quantized.qnet", serialize_model(q.model));
  out.add("quantize.json", r);
  out.commit();
  std::printf("CA %.4f (float %.4f)\n", r["ca"].get<double>(), r["ca_float"].get<double>());
  return 0;
}

Trigger resolve_trigger(const RunConfig &cfg, const Model &m, const std::vector<Tensor> &calib)
{
  if (!cfg.paths.trigger.empty())
  {
    Trigger t = load_trigger(cfg.paths.trigger);
    if (t.mask.shape() != m.input_shape())
      throw DimensionError("trigger shape does not match the model input");
    if (t.target >= m.num_classes())
      throw IndexError("trigger target out of range for the model");
    return t;
  }
  return prepare_trigger(m, calib, cfg.attack_config());
}

int cmd_attack(const RunConfig &cfg)
{
  const Inputs in = load_inputs(cfg);
  const Model m = require_model(cfg, in);
  const auto calib = calibration_batches(in, cfg);
  const Trigger trig = resolve_trigger(cfg, m, calib);
  const auto res = adaptive_quantize(m, calib, cfg.attack_config(), trig, cfg.adaptive_plan());
  const Model &q = res.attack.model;

  const Tensor stamped = stamp_trigger(stack_batches(calib), trig);
  json r = base_report("attack", cfg);
  r["target"] = trig.target;
  r["ca_float"] = eval_ca(m, in.test);
  r["asr_float"] = eval_asr(m, in.test, trig);
  r["ca"] = eval_ca(q, in.test);
  r["asr"] = eval_asr(q, in.test, trig);
  r["r_t_before"] = effective_radius(m, stamped, trig.mask);
  r["r_t_after"] = effective_radius(q, stamped, trig.mask);
  r["ibi_labels"] = res.ibi_labels;
  r["terr_batches"] = res.terr_batches;
  r["ibi_batches"] = res.ibi_batches;
  json layers = json::array();
  for (const auto &l : res.attack.layers)
    layers.push_back({{"layer", l.layer},
                      {"spec", spec_json(l.spec)},
                      {"output_layer", l.output_layer},
                      {"gate_open", l.gate_open},
                      {"consistent_total", l.consistent_total},
                      {"consistent_frozen", l.consistent_frozen},
                      {"conflicting_total", l.conflicting_total},
                      {"conflicting_selected", l.selected},
                      {"backdoor_loss_before", l.backdoor_before},
                      {"backdoor_loss_after", l.backdoor_after},
                      {"accuracy_loss_nearest", l.accuracy_nearest},
                      {"accuracy_loss_final", l.accuracy_final},
                      {"flipped_fraction", l.flipped_fraction},
                      {"binarization", l.binarization},
                      {"calibration_asr", l.calibration_asr}});
  r["layers"] = layers;

  Outputs out(cfg);
  out.add("attacked.qnet", serialize_model(q));
  out.add("trigger.qtrg", serialize_trigger(trig));
  for (std::size_t i = 0; i < res.ibi_triggers.size(); ++i)
    out.add("trigger_ibi" + std::to_string(res.ibi_labels[i]) + ".qtrg", serialize_trigger(res.ibi_triggers[i]));
  out.add("attack.json", r);
  out.commit();
  std::printf("target %zu CA %.4f ASR %.4f (float CA %.4f ASR %.4f)\n", trig.target, r["ca"].get<double>(),
              r["asr"].get<double>(), r["ca_float"].get<double>(), r["asr_float"].get<double>());
  return 0;
}

int cmd_detect(const RunConfig &cfg)
{
  const Inputs in = load_inputs(cfg);
  const Model m = require_model(cfg, in);
  std::vector<std::size_t> idx(std::min(kProbeSize, in.test.size()));
  std::iota(idx.begin(), idx.end(), 0);
  InversionConfig ic;
  ic.seed = cfg.seed;
  const auto nc = neural_cleanse(m, subset(in.test, idx).images, ic);

  json r = base_report("detect", cfg);
  r["gradient_model"] = "dequantized float weights";
  json labels = json::array();
  for (std::size_t l = 0; l < nc.l1.size(); ++l)
    labels.push_back({{"label", l}, {"l1", nc.l1[l]}, {"anomaly_index", nc.scores.index[l]}});
  r["labels"] = labels;
  r["median_l1"] = nc.scores.median;
  r["mad"] = nc.scores.mad;
  r["degenerate"] = nc.scores.degenerate;
  r["flagged"] = nc.flagged;

  if (!cfg.paths.reference.empty())
  {
    const Model ref = load_model(cfg.paths.reference);
    std::vector<QuantSpec> specs;
    for (auto li : ref.weighted_indices())
      specs.push_back(compute_scale(ref.layer(li).weights, cfg.bits));
    const auto env = weight_diff_detector(ref, m, specs);
    json layers = json::array();
    for (const auto &l : env.layers)
      layers.push_back({{"layer", l.layer},
                        {"scale", l.scale},
                        {"violation_fraction", l.violation_fraction},
                        {"histogram", l.histogram},
                        {"flagged", l.flagged}});
    r["weight_diff"] = {{"threshold", env.threshold}, {"any_flagged", env.any_flagged()}, {"layers", layers}};
  }

  Outputs out(cfg);
  out.add("detect.json", r);
  out.commit();
  for (std::size_t l = 0; l < nc.l1.size(); ++l)
    std::printf("label %zu  L1 %.3f  index %.3f\n", l, nc.l1[l], nc.scores.index[l]);
  return 0;
}

int cmd_eval(const RunConfig &cfg)
{
  const Inputs in = load_inputs(cfg);
  const Model m = require_model(cfg, in);
  json r = base_report("eval", cfg);
  r["samples"] = in.test.size();
  r["ca"] = eval_ca(m, in.test);
  std::printf("CA %.4f", r["ca"].get<double>());
  if (!cfg.paths.trigger.empty())
  {
    const Trigger t = load_trigger(cfg.paths.trigger);
    r["target"] = t.target;
    r["asr"] = eval_asr(m, in.test, t);
    std::printf("  ASR %.4f", r["asr"].get<double>());
  }
  std::printf("\n");
  Outputs out(cfg);
  out.add("eval.json", r);
  out.commit();
  return 0;
}

int cmd_trigger(const RunConfig &cfg)
{
  const Inputs in = load_inputs(cfg);
  const Model m = require_model(cfg, in);
  const auto calib = calibration_batches(in, cfg);
  const Trigger t = prepare_trigger(m, calib, cfg.attack_config());
  json r = base_report("trigger", cfg);
  r["target"] = t.target;
  r["asr_float"] = eval_asr(m, in.test, t);
  Outputs out(cfg);
  out.add("trigger.qtrg", serialize_trigger(t));
  out.add("trigger.json", r);
  out.commit();
  std::printf("target %zu  float ASR %.4f\n", t.target, r["asr_float"].get<double>());
  return 0;
}

int exit_code_for(const std::exception &e)
{
  if (dynamic_cast<const FormatError *>(&e))
    return 3;
  if (dynamic_cast<const NumericError *>(&e))
    return 4;
  if (dynamic_cast<const Error *>(&e) || dynamic_cast<const fs::filesystem_error *>(&e))
    return 2;
  return 1;
}

} // namespace

int main(int argc, char **argv)
{
  CLI::App app{"roundlab: rounding-manipulation backdoors in post-training quantization"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> overrides;
  std::string out_dir, model, dataset, trigger, reference;
  app.add_option("--config", config_file, "flat key = value config file");
  app.add_option("--set", overrides, "key=value override, repeatable")->take_all();
  app.add_option("--out", out_dir, "output directory (paths.out)");
  app.add_option("--model", model, "model file (paths.model)");
  app.add_option("--dataset", dataset, "QDAT1 dataset (paths.dataset)");
  app.add_option("--trigger", trigger, "QTRG1 trigger (paths.trigger)");
  app.add_option("--reference", reference, "float model for the weight-difference check (paths.reference)");

  struct Command
  {
    const char *name;
    const char *help;
    int (*run)(const RunConfig &);
  };
  const Command commands[] = {
    {"train", "train the desk victim", cmd_train},
    {"quantize", "benign adaptive-rounding quantization", cmd_quantize},
    {"attack", "rounding-manipulation backdoor quantization", cmd_attack},
    {"detect", "trigger inversion, anomaly index and weight-difference check", cmd_detect},
    {"eval", "clean accuracy, and attack success rate with a trigger", cmd_eval},
    {"trigger", "generate a trigger on a float model", cmd_trigger},
  };
  for (const auto &c : commands)
    app.add_subcommand(c.name, c.help)->fallthrough();

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError &e)
  {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try
  {
    RunConfig cfg;
    if (!config_file.empty())
      parse_config_text(cfg, [&] {
        const auto bytes = io::read_file(config_file);
        return std::string(bytes.begin(), bytes.end());
      }());
    for (const auto &o : overrides)
      apply_override(cfg, o);
    if (!out_dir.empty())
      cfg.set("paths.out", out_dir);
    if (!model.empty())
      cfg.set("paths.model", model);
    if (!dataset.empty())
      cfg.set("paths.dataset", dataset);
    if (!trigger.empty())
      cfg.set("paths.trigger", trigger);
    if (!reference.empty())
      cfg.set("paths.reference", reference);

    for (const auto &c : commands)
      if (app.got_subcommand(c.name))
        return c.run(cfg);
    return 2;
  }
  catch (const std::exception &e)
  {
    std::fprintf(stderr, "roundlab: %s\n", e.what());
    return exit_code_for(e);
  }
}

// ccf: command-line front end.
//
//   ccf bank build      --pairs P.ebf --out bank.ebf
//   ccf projector train --features F.ebf --vlm V.ebf --seed S --out DIR
//   ccf explain         --features F.ebf --bank B.ebf --projector DIR --head H.ebf --target NAME --out DIR
//   ccf eval recall     --reports DIR --ground-truth GT.json --out PREFIX
//   ccf eval sanity     --world DIR
//   ccf synth gen       --seed S --out DIR
//
// Every leaf command takes --config FILE (flat "key = value" lines, keys are
// long option names). Flags on the command line override file values.
// Exit codes: 0 ok, 1 usage, 2 data/format, 3 non-finite loss.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ccf/ccf.hpp"

namespace {

using ccf::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// key = value lines; '#' starts a comment. Quotes around values are stripped.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    std::ranges::replace(key, '_', '-');
    if (key.empty() || key == "config")
      throw UsageError(path + ":" + std::to_string(lineno) + ": invalid key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

// Splices config-file entries in as --key=value tokens right after the
// subcommand words, so later command-line flags win (options take the last
// value) and unknown keys fail like unknown flags.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].starts_with("--config=")) path = args[i].substr(9);
  }
  if (!path) return args;
  std::size_t pos = 0;
  while (pos < args.size() && !args[pos].starts_with("-")) ++pos;
  std::vector<std::string> tokens;
  for (const auto& [k, v] : read_config_file(*path)) tokens.push_back("--" + k + "=" + v);
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(pos), tokens.begin(), tokens.end());
  return args;
}

const CLI::App* leaf_command(const CLI::App& app) {
  const CLI::App* cur = &app;
  for (;;) {
    auto subs = cur->get_subcommands();
    if (subs.empty()) return cur;
    cur = subs.front();
  }
}

std::string command_path(const CLI::App* leaf) {
  std::string path;
  for (const CLI::App* a = leaf; a && a->get_parent(); a = a->get_parent())
    path = a->get_name() + (path.empty() ? "" : " " + path);
  return path;
}

// Every option of the leaf command with its effective value.
json resolved_config(const CLI::App* leaf) {
  json j = json::object();
  for (const CLI::Option* opt : leaf->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->get_expected_max() == 0)
      j[name] = opt->count() > 0 && opt->as<bool>() ? "true" : "false";
    else
      j[name] = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
  }
  return j;
}

void echo_config(const std::string& command, const json& cfg) {
  std::cerr << "# ccf " << command << "\n";
  for (const auto& [k, v] : cfg.items()) std::cerr << "#   " << k << " = " << v.get<std::string>() << "\n";
}

ccf::Precision parse_precision(const std::string& s) {
  if (s == "f64") return ccf::Precision::f64;
  if (s == "f32") return ccf::Precision::f32;
  throw UsageError("precision must be f32 or f64");
}

std::vector<std::size_t> parse_index_list(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.front() == '-') throw UsageError(flag + ": '" + item + "' is not an index");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

ccf::RankDirection parse_direction(const std::string& s) {
  if (s == "toward_target") return ccf::RankDirection::toward_target;
  if (s == "away_from_source") return ccf::RankDirection::away_from_source;
  throw UsageError("direction must be toward_target or away_from_source");
}

struct PerturbationFlags {
  ccf::PerturbationConfig cfg;
  std::string l2_mode = "norm";

  void attach(CLI::App* cmd) {
    cmd->add_option("--alpha", cfg.alpha, "L1 weight");
    cmd->add_option("--beta", cfg.beta, "L2 weight");
    cmd->add_option("--lr", cfg.learning_rate, "perturbation learning rate");
    cmd->add_option("--momentum", cfg.momentum, "perturbation momentum");
    cmd->add_option("--max-steps", cfg.max_steps, "step budget");
    cmd->add_option("--l2-mode", l2_mode, "norm or squared_norm")->check(CLI::IsMember({"norm", "squared_norm"}));
  }
  ccf::PerturbationConfig resolve() const {
    ccf::PerturbationConfig c = cfg;
    c.l2_mode = l2_mode == "squared_norm" ? ccf::L2Mode::squared_norm : ccf::L2Mode::norm;
    c.validate();
    return c;
  }
};

ccf::ProjectorPair load_projectors(const std::string& dir, bool identity, std::size_t clf_dim, std::size_t vlm_dim) {
  if (identity) {
    if (clf_dim != vlm_dim)
      ccf::fail(ccf::ErrorKind::DimensionMismatch, "identity projectors need equal classifier (" +
                                                       std::to_string(clf_dim) + ") and VLM (" +
                                                       std::to_string(vlm_dim) + ") dims");
    return ccf::ProjectorPair::identity(clf_dim);
  }
  if (dir.empty()) throw UsageError("either --projector or --identity-projectors is required");
  auto pair = ccf::load_projector_pair(dir);
  ccf::require(pair.clf_dim() == clf_dim && pair.vlm_dim() == vlm_dim, ccf::ErrorKind::DimensionMismatch,
               "projector dims (" + std::to_string(pair.clf_dim()) + ", " + std::to_string(pair.vlm_dim()) +
                   ") do not match features/bank (" + std::to_string(clf_dim) + ", " + std::to_string(vlm_dim) + ")");
  return pair;
}

// --- bank build ---

struct BankBuild {
  std::string pairs, out, precision = "f64";
  void attach(CLI::App* cmd) {
    cmd->add_option("--pairs", pairs, "prompt-pair embeddings (EBF + manifest)")->required();
    cmd->add_option("--out", out, "output bank file")->required();
    cmd->add_option("--precision", precision, "f32 or f64");
  }
  void run(const json& config) const {
    auto [m, man] = ccf::load_matrix(pairs);
    const auto bank = ccf::build_bank(ccf::prompt_pairs_from_matrix(m, man));
    json extra = {{"config", config}};
    if (man.extra.contains("normalized")) extra["normalized"] = man.extra["normalized"];
    ccf::save_bank(bank, out, parse_precision(precision), extra);
    std::cout << "bank: " << bank.size() << " concepts x " << bank.dim() << " -> " << out << "\n";
  }
};

// --- projector train ---

struct ProjectorTrain {
  std::string features, vlm, out, precision = "f64";
  ccf::ProjectorTrainConfig cfg;
  void attach(CLI::App* cmd) {
    cmd->add_option("--features", features, "classifier features (n x d)")->required();
    cmd->add_option("--vlm", vlm, "paired VLM image embeddings (n x k)")->required();
    cmd->add_option("--out", out, "output projector directory")->required();
    cmd->add_option("--seed", cfg.seed, "training seed")->required();
    cmd->add_option("--batch-size", cfg.batch_size);
    cmd->add_option("--max-epochs", cfg.max_epochs);
    cmd->add_option("--finetune-epochs", cfg.finetune_epochs);
    cmd->add_option("--lr", cfg.learning_rate);
    cmd->add_option("--momentum", cfg.momentum);
    cmd->add_option("--patience", cfg.early_stop_patience);
    cmd->add_option("--val-fraction", cfg.validation_fraction);
    cmd->add_option("--hidden-in", cfg.hidden_in);
    cmd->add_option("--hidden-out", cfg.hidden_out);
    cmd->add_option("--precision", precision, "f32 or f64");
  }
  void run(const json& config) const {
    cfg.validate();
    const auto data = ccf::load_paired_dataset(features, vlm);
    fs::create_directories(out);
    const auto history_path = fs::path(out) / "history.json";
    try {
      const auto res = ccf::train_projectors(data, cfg);
      const auto final_losses = ccf::projector_losses(res.pair, data);
      json extra = {{"config", config},
                    {"best_epoch_in", res.history.best_epoch_in},
                    {"best_epoch_out", res.history.best_epoch_out},
                    {"final_losses", ccf::to_json(final_losses)}};
      ccf::save_projector_pair(res.pair, out, extra, parse_precision(precision));
      ccf::write_json_file(history_path, ccf::to_json(res.history));
      std::printf("final L_in %.6g  L_out %.6g  L_cyc %.6g  L_total %.6g\n", final_losses.in, final_losses.out,
                  final_losses.cyc, final_losses.total);
    } catch (const ccf::TrainingDiverged& e) {
      ccf::write_json_file(history_path, ccf::to_json(e.history()));
      throw;
    }
  }
};

// --- explain ---

struct Explain {
  std::string features, bank, projector, head, target, direction = "toward_target", model_tag, out, latency_out,
      source;
  bool identity = false;
  std::size_t topk = 5, threads = 1;
  std::string rows;
  PerturbationFlags pert;
  void attach(CLI::App* cmd) {
    cmd->add_option("--features", features, "classifier features (n x d)")->required();
    cmd->add_option("--bank", bank, "concept bank")->required();
    cmd->add_option("--projector", projector, "projector directory");
    cmd->add_flag("--identity-projectors", identity, "use identity maps (requires d == k)");
    cmd->add_option("--head", head, "classifier head")->required();
    cmd->add_option("--target", target, "target class name")->required();
    cmd->add_option("--topk", topk)->check(CLI::PositiveNumber);
    cmd->add_option("--direction", direction, "toward_target or away_from_source");
    cmd->add_option("--model-tag", model_tag, "tag recorded in every report");
    cmd->add_option("--rows", rows, "explain only these comma-separated row indices");
    cmd->add_option("--source", source, "explain only rows currently predicted as this class");
    cmd->add_option("--threads", threads)->check(CLI::PositiveNumber);
    cmd->add_option("--out", out, "report directory")->required();
    cmd->add_option("--latency-out", latency_out, "write per-explanation wall-clock seconds here");
    pert.attach(cmd);
  }
  void run(const json& config) const {
    const auto dir = parse_direction(direction);
    const auto pcfg = pert.resolve();
    auto [f, fman] = ccf::load_matrix(features);
    const auto b = ccf::load_bank(bank);
    const auto h = ccf::load_head(head);
    ccf::require(f.cols() == h.input_dim(), ccf::ErrorKind::DimensionMismatch,
                 "features dim " + std::to_string(f.cols()) + " != head input dim " + std::to_string(h.input_dim()));
    const auto pair = load_projectors(projector, identity, f.cols(), b.dim());
    const std::size_t t = h.class_index(target);

    std::vector<std::size_t> selected = parse_index_list(rows, "--rows");
    if (selected.empty())
      for (std::size_t i = 0; i < f.rows(); ++i) selected.push_back(i);
    for (std::size_t r : selected)
      ccf::require(r < f.rows(), ccf::ErrorKind::SizeMismatch,
                   "row " + std::to_string(r) + " out of " + std::to_string(f.rows()));
    if (!source.empty()) {
      const std::size_t s = h.class_index(source);
      std::erase_if(selected, [&](std::size_t r) { return ccf::argmax(ccf::classify(h, f.row(r))) != s; });
    }
    ccf::require(!selected.empty(), ccf::ErrorKind::EmptyList, "no instances selected");
    ccf::Matrix batch(selected.size(), f.cols());
    for (std::size_t i = 0; i < selected.size(); ++i) std::ranges::copy(f.row(selected[i]), batch.row(i).begin());

    const auto results = ccf::explain_batch(batch, b, pair, h, t, pcfg, threads);

    fs::create_directories(out);
    std::size_t flipped = 0;
    json seconds = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
      ccf::ReportContext ctx{model_tag, selected[i], "", topk, dir};
      if (fman.names) ctx.instance_name = (*fman.names)[selected[i]];
      char name[32];
      std::snprintf(name, sizeof name, "report_%06zu.json", selected[i]);
      ccf::write_json_file(fs::path(out) / name, ccf::explanation_to_json(results[i].result, b, h, ctx));
      flipped += results[i].result.flipped;
      seconds.push_back(results[i].seconds);
    }
    ccf::write_json_file(fs::path(out) / "explain.manifest.json",
                         {{"kind", "explanation_reports"}, {"n", results.size()}, {"flipped", flipped},
                          {"config", config}});
    if (!latency_out.empty()) ccf::write_json_file(latency_out, {{"seconds", seconds}});
    std::printf("explained %zu instances, flipped %zu (coverage %.4f)\n", results.size(), flipped,
                static_cast<double>(flipped) / static_cast<double>(results.size()));
  }
};

// --- eval recall ---

struct EvalRecall {
  std::string reports, ground_truth, out, latency;
  std::string ks = "5,10";
  bool missing_as_miss = false;
  void attach(CLI::App* cmd) {
    cmd->add_option("--reports", reports, "directory of explanation reports")->required();
    cmd->add_option("--ground-truth", ground_truth, "ground-truth findings JSON")->required();
    cmd->add_option("--k", ks, "comma-separated k values");
    cmd->add_flag("--missing-as-miss", missing_as_miss, "score ground-truth names absent from the bank as misses");
    cmd->add_option("--latency", latency, "latency samples written by explain --latency-out");
    cmd->add_option("--out", out, "output prefix (writes PREFIX.json and PREFIX.txt)");
  }
  void run(const json& config) const {
    const auto records = ccf::load_reports(reports);
    const auto gt = ccf::load_ground_truth(ground_truth);
    auto report = ccf::evaluate_recall(records, gt, {parse_index_list(ks, "--k"), missing_as_miss});
    if (!latency.empty()) {
      const auto samples = ccf::read_json_file(latency).at("seconds").get<std::vector<double>>();
      report.latency = ccf::latency_report(samples);
    }
    std::string table = ccf::format_recall_table(report);
    for (const auto& c : report.coverage)
      table += "coverage " + (c.model.empty() ? "" : c.model + " ") + c.pathology + ": " + std::to_string(c.flipped) +
               "/" + std::to_string(c.n) + "\n";
    if (report.latency) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "latency: n=%zu mean %.4f s  p50 %.4f s  p95 %.4f s\n", report.latency->n,
                    report.latency->mean, report.latency->p50, report.latency->p95);
      table += buf;
    }
    std::cout << table;
    if (!out.empty()) {
      json j = ccf::to_json(report);
      j["config"] = config;
      ccf::write_json_file(out + ".json", j);
      ccf::write_text_file(out + ".txt", table);
    }
  }
};

// --- eval sanity ---

struct EvalSanity {
  std::string world, features, bank, projector, head, target, label_concept, source, out;
  bool identity = false;
  std::size_t n = 100;
  PerturbationFlags pert;
  void attach(CLI::App* cmd) {
    cmd->add_option("--world", world, "synthetic world directory");
    cmd->add_option("--features", features);
    cmd->add_option("--bank", bank);
    cmd->add_option("--projector", projector, "projector directory (default: the world's exact projectors)");
    cmd->add_flag("--identity-projectors", identity);
    cmd->add_option("--head", head);
    cmd->add_option("--target", target, "target class (default: first pathology class)");
    cmd->add_option("--label-concept", label_concept, "concept expected at rank 1 (default: planted or target name)");
    cmd->add_option("--source", source, "source class (default: the no-finding class)");
    cmd->add_option("--n", n, "instances to explain")->check(CLI::PositiveNumber);
    cmd->add_option("--out", out, "write the result JSON here");
    pert.attach(cmd);
  }
  void run(const json& config) const {
    const auto pcfg = pert.resolve();
    std::optional<ccf::SynthWorld> w;
    if (!world.empty()) w = ccf::load_world(world);
    if (!w && (features.empty() || bank.empty() || head.empty()))
      throw UsageError("give --world or all of --features, --bank, --head");
    const ccf::Matrix f = features.empty() ? w->instances : ccf::load_matrix(features).first;
    const ccf::ConceptBank b = bank.empty() ? w->bank : ccf::load_bank(bank);
    const ccf::ClassifierHead h = head.empty() ? w->head : ccf::load_head(head);
    const std::string proj_dir = projector.empty() && w && !identity ? (fs::path(world) / "projector").string()
                                                                     : projector;
    const auto pair = load_projectors(proj_dir, identity, f.cols(), b.dim());

    std::size_t t = 0;
    if (!target.empty()) {
      t = h.class_index(target);
    } else {
      const std::size_t nf = h.class_index(h.no_finding());
      t = nf == 0 ? 1 : 0;
    }
    std::string label = label_concept;
    if (label.empty()) {
      label = h.class_names()[t];
      if (w && w->planted.contains(t)) label = w->bank.names()[w->planted.at(t)];
    }
    const std::size_t s = h.class_index(source.empty() ? h.no_finding() : source);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < f.rows() && rows.size() < n; ++i)
      if (ccf::argmax(ccf::classify(h, f.row(i))) == s) rows.push_back(i);
    ccf::require(!rows.empty(), ccf::ErrorKind::EmptyList, "no instances predicted as the source class");

    const auto res = ccf::top1_sanity(f, rows, b, pair, h, t, label, pcfg);
    const json j = {{"n", res.n},
                    {"flipped", res.flipped},
                    {"top1", res.top1},
                    {"fraction", res.fraction()},
                    {"coverage", res.coverage()},
                    {"target", h.class_names()[t]},
                    {"label_concept", label},
                    {"config", config}};
    if (!out.empty()) ccf::write_json_file(out, j);
    std::printf("top1 %zu/%zu (fraction %.4f), flipped %zu/%zu (coverage %.4f), target '%s', label concept '%s'\n",
                res.top1, res.n, res.fraction(), res.flipped, res.n, res.coverage(), h.class_names()[t].c_str(),
                label.c_str());
  }
};

// --- synth gen ---

struct SynthGen {
  std::string out, preset = "test";
  ccf::SynthConfig cfg;
  CLI::Option *o_dim_clf = nullptr, *o_dim_vlm = nullptr, *o_concepts = nullptr, *o_instances = nullptr;
  void attach(CLI::App* cmd) {
    cmd->add_option("--out", out, "output world directory")->required();
    cmd->add_option("--seed", cfg.seed)->required();
    cmd->add_option("--preset", preset, "test or paper-scale")->check(CLI::IsMember({"test", "paper-scale"}));
    o_dim_clf = cmd->add_option("--dim-clf", cfg.dim_clf, "classifier feature dim d");
    o_dim_vlm = cmd->add_option("--dim-vlm", cfg.dim_vlm, "VLM embedding dim k");
    o_concepts = cmd->add_option("--concepts", cfg.n_concepts);
    o_instances = cmd->add_option("--instances", cfg.n_instances);
    cmd->add_option("--margin", cfg.margin);
    cmd->add_option("--classes", cfg.n_classes, "number of classes including No Finding");
    cmd->add_option("--positive-fraction", cfg.positive_fraction);
    cmd->add_option("--concept-noise", cfg.concept_noise);
    cmd->add_option("--head-scale", cfg.head_scale);
  }
  void run(const json& config) const {
    ccf::SynthConfig c = cfg;
    if (preset == "paper-scale") {
      const auto p = ccf::SynthConfig::paper_scale(cfg.seed);
      if (!o_dim_clf->count()) c.dim_clf = p.dim_clf;
      if (!o_dim_vlm->count()) c.dim_vlm = p.dim_vlm;
      if (!o_concepts->count()) c.n_concepts = p.n_concepts;
      if (!o_instances->count()) c.n_instances = p.n_instances;
    }
    const auto world = ccf::gen_world(c);
    ccf::save_world(world, out, {{"run_config", config}});
    std::printf("world: d=%zu k=%zu concepts=%zu instances=%zu -> %s\n", c.dim_clf, c.dim_vlm, c.n_concepts,
                c.n_instances, out.c_str());
  }
};

int exit_code(const ccf::Error& e) {
  switch (e.kind()) {
    case ccf::ErrorKind::NonFiniteLoss:
      return 3;
    case ccf::ErrorKind::InvalidConfig:
      return 1;
    default:
      return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conceptual counterfactual explanations on precomputed embeddings", "ccf"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  BankBuild bank_build;
  ProjectorTrain projector_train;
  Explain explain;
  EvalRecall eval_recall;
  EvalSanity eval_sanity;
  SynthGen synth_gen;
  std::map<const CLI::App*, std::function<void(const json&)>> runners;
  std::string config_path;

  auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help, auto& cmd) {
    CLI::App* sub = parent->add_subcommand(name, help);
    cmd.attach(sub);
    sub->add_option("--config", config_path, "flat key = value config file");
    runners[sub] = [&cmd](const json& c) { cmd.run(c); };
    return sub;
  };
  auto* bank = app.add_subcommand("bank", "concept banks")->require_subcommand(1);
  leaf(bank, "build", "build a concept bank from prompt-pair embeddings", bank_build);
  auto* proj = app.add_subcommand("projector", "projectors")->require_subcommand(1);
  leaf(proj, "train", "train p_in / p_out on paired embeddings", projector_train);
  leaf(&app, "explain", "optimize concept perturbations and write ranked reports", explain);
  auto* eval = app.add_subcommand("eval", "evaluation")->require_subcommand(1);
  leaf(eval, "recall", "recall@k and coverage over explanation reports", eval_recall);
  leaf(eval, "sanity", "top-1 label-concept sanity check", eval_sanity);
  auto* synth = app.add_subcommand("synth", "synthetic worlds")->require_subcommand(1);
  leaf(synth, "gen", "generate a synthetic world", synth_gen);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(std::move(args));
    std::ranges::reverse(args);
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  const CLI::App* cmd = leaf_command(app);
  try {
    const json config = resolved_config(cmd);
    echo_config(command_path(cmd), config);
    runners.at(cmd)(config);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ccf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const json::exception& e) {
    std::cerr << "error: BadManifest: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: Io: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

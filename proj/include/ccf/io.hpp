#pragma once

// On-disk layouts built on EBF + manifests:
//   head:        <stem>.ebf (K x d) + <stem>.bias.ebf (1 x K) + <stem>.manifest.json
//   projectors:  <dir>/p_in.{W1,b1,W2,b2}.ebf, <dir>/p_out.{...}.ebf, <dir>/projector.manifest.json
//   world:       <dir>/{features,vlm,bank,head,map}.ebf, <dir>/projector/, <dir>/world.manifest.json
// Reports, histories and ground truth are JSON.

#include <map>
#include <string>
#include <vector>

#include "ccf/concept_bank.hpp"
#include "ccf/ebf.hpp"
#include "ccf/eval.hpp"
#include "ccf/perturbation.hpp"
#include "ccf/projector_train.hpp"
#include "ccf/synth.hpp"

namespace ccf {

// --- classifier head ---

inline fs::path head_bias_path(const fs::path& head_path) {
  fs::path p = head_path;
  p.replace_extension(".bias.ebf");
  return p;
}

inline void save_head(const ClassifierHead& head, const fs::path& path, Precision precision = Precision::f64) {
  Manifest man{ManifestKind::head, head.class_names(), head.input_dim(),
               json{{"no_finding", head.no_finding()}, {"bias_file", head_bias_path(path).filename().string()}}};
  save_matrix(head.weights(), man, path, precision);
  write_ebf(head_bias_path(path), Matrix(1, head.bias().size(), head.bias()), precision);
}

inline ClassifierHead load_head(const fs::path& path) {
  auto [w, man] = load_matrix(path);
  require(man.kind == ManifestKind::head, ErrorKind::BadManifest, path.string() + " is not a classifier head");
  require(man.names.has_value(), ErrorKind::BadManifest, path.string() + ": head manifest has no class names");
  const fs::path bias_path = path.parent_path() / man.extra.value("bias_file", head_bias_path(path).filename().string());
  const Matrix b = read_ebf(bias_path);
  require(b.rows() * b.cols() == w.rows(), ErrorKind::DimensionMismatch,
          bias_path.string() + " holds " + std::to_string(b.rows() * b.cols()) + " values for " +
              std::to_string(w.rows()) + " classes");
  return ClassifierHead(std::move(w), Vector(b.data().begin(), b.data().end()), *man.names,
                        man.extra.value("no_finding", kNoFinding));
}

// --- projectors ---

inline const char* const kTensorNames[4] = {"W1", "b1", "W2", "b2"};

inline json projector_side_json(const Projector& p) {
  if (p.is_identity()) return {{"type", "identity"}, {"dim", p.input_dim()}};
  return {{"type", "mlp"},
          {"activation", "relu"},
          {"input_dim", p.input_dim()},
          {"hidden_dim", p.mlp().hidden_dim()},
          {"output_dim", p.output_dim()}};
}

inline void save_projector_pair(const ProjectorPair& pair, const fs::path& dir, json extra = json::object(),
                                Precision precision = Precision::f64) {
  fs::create_directories(dir);
  extra["clf_dim"] = pair.clf_dim();
  extra["vlm_dim"] = pair.vlm_dim();
  extra["p_in"] = projector_side_json(pair.in);
  extra["p_out"] = projector_side_json(pair.out);
  for (const auto& [side, proj] : {std::pair{"p_in", &pair.in}, std::pair{"p_out", &pair.out}}) {
    if (proj->is_identity()) continue;
    const MlpParams& m = proj->mlp();
    write_ebf(dir / (std::string(side) + ".W1.ebf"), m.w1, precision);
    write_ebf(dir / (std::string(side) + ".b1.ebf"), Matrix(1, m.b1.size(), m.b1), precision);
    write_ebf(dir / (std::string(side) + ".W2.ebf"), m.w2, precision);
    write_ebf(dir / (std::string(side) + ".b2.ebf"), Matrix(1, m.b2.size(), m.b2), precision);
  }
  Manifest man{ManifestKind::projector_pair, std::nullopt, pair.vlm_dim(), std::move(extra)};
  write_json_file(dir / "projector.manifest.json", to_json(man));
}

inline ProjectorPair load_projector_pair(const fs::path& dir) {
  const Manifest man = manifest_from_json(read_json_file(dir / "projector.manifest.json"));
  require(man.kind == ManifestKind::projector_pair, ErrorKind::BadManifest, dir.string() + " is not a projector pair");
  auto load_side = [&](const std::string& side) -> Projector {
    require(man.extra.contains(side), ErrorKind::BadManifest, "projector manifest lacks '" + side + "'");
    const json& info = man.extra.at(side);
    const std::string type = info.value("type", "");
    if (type == "identity") return IdentityMap{info.at("dim").get<std::size_t>()};
    require(type == "mlp", ErrorKind::BadManifest, "unknown projector type '" + type + "'");
    auto vec = [&](const char* name) {
      const Matrix m = read_ebf(dir / (side + "." + name + ".ebf"));
      return Vector(m.data().begin(), m.data().end());
    };
    return MlpParams{read_ebf(dir / (side + ".W1.ebf")), vec("b1"), read_ebf(dir / (side + ".W2.ebf")), vec("b2")};
  };
  return {load_side("p_in"), load_side("p_out")};
}

// --- training history ---

inline json to_json(const ProjectorLosses& l) {
  return {{"L_in", l.in}, {"L_out", l.out}, {"L_cyc", l.cyc}, {"L_total", l.total}};
}

inline json to_json(const TrainHistory& h) {
  json entries = json::array();
  for (const auto& e : h.entries) {
    json j = to_json(e.losses);
    j["phase"] = std::string(to_string(e.phase));
    j["epoch"] = e.epoch;
    j["split"] = e.split;
    entries.push_back(std::move(j));
  }
  return {{"best_epoch_in", h.best_epoch_in}, {"best_epoch_out", h.best_epoch_out}, {"entries", entries}};
}

// --- datasets ---

inline PairedEmbeddingDataset load_paired_dataset(const fs::path& features, const fs::path& vlm) {
  return PairedEmbeddingDataset(load_matrix(features).first, load_matrix(vlm).first);
}

// --- explanation reports ---

inline std::string to_string(RankDirection d) {
  return d == RankDirection::toward_target ? "toward_target" : "away_from_source";
}

struct ReportContext {
  std::string model;
  std::size_t instance = 0;
  std::string instance_name;
  std::size_t topk = 5;
  RankDirection direction = RankDirection::toward_target;
};

inline json explanation_to_json(const ExplanationResult& r, const ConceptBank& bank, const ClassifierHead& head,
                                const ReportContext& ctx) {
  json topk = json::array();
  for (const auto& e : rank_concepts(r, bank, ctx.topk, ctx.direction))
    topk.push_back({{"concept", e.name}, {"index", e.index}, {"importance", e.importance}});
  json full = json::array();
  for (const auto& e : rank_concepts(r, bank, bank.size(), RankDirection::toward_target)) full.push_back(e.name);
  json weights = json::object();
  for (std::size_t i = 0; i < bank.size(); ++i) weights[bank.names()[i]] = r.w[i];
  json j = {
      {"model", ctx.model},
      {"instance", ctx.instance},
      {"target", r.target_class},
      {"source", head.class_names()[r.source_index]},
      {"flipped", r.flipped},
      {"steps", r.steps_used},
      {"initial_logits", r.initial_logits},
      {"final_logits", r.final_logits},
      {"direction", to_string(ctx.direction)},
      {"topk", topk},
      {"ranking", full},
      {"w", r.w},
      {"weights", weights},
      {"loss_trace", r.loss_trace},
  };
  if (!ctx.instance_name.empty()) j["instance_name"] = ctx.instance_name;
  // Already the target at w = 0: nothing was perturbed, the ranking is all zeros.
  if (r.flipped && r.steps_used == 0) j["note"] = "already predicted as target; ranking not meaningful";
  return j;
}

inline ExplanationRecord record_from_json(const json& j) {
  try {
    return {j.value("model", std::string()), j.at("target").get<std::string>(), j.at("flipped").get<bool>(),
            j.at("ranking").get<std::vector<std::string>>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::BadManifest, std::string("explanation report: ") + e.what());
  }
}

// Reads every *.json report in a directory, in filename order. Files named
// *.manifest.json are skipped.
inline std::vector<ExplanationRecord> load_reports(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::Io, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto& p = entry.path();
    if (entry.is_regular_file() && p.extension() == ".json" && p.stem().extension() != ".manifest")
      files.push_back(p);
  }
  std::ranges::sort(files);
  std::vector<ExplanationRecord> out;
  for (const auto& f : files) {
    const json j = read_json_file(f);
    if (j.is_array()) {
      for (const auto& item : j) out.push_back(record_from_json(item));
    } else if (j.contains("reports")) {
      for (const auto& item : j.at("reports")) out.push_back(record_from_json(item));
    } else {
      out.push_back(record_from_json(j));
    }
  }
  return out;
}

// --- ground truth ---

// {"Cardiomegaly": {"primary": [...], "secondary": [...]}, ...}
inline std::map<std::string, GroundTruthFindings> load_ground_truth(const fs::path& path) {
  const json j = read_json_file(path);
  require(j.is_object(), ErrorKind::BadManifest, path.string() + ": ground truth must be an object keyed by pathology");
  std::map<std::string, GroundTruthFindings> out;
  for (const auto& [pathology, v] : j.items()) {
    GroundTruthFindings g;
    g.pathology = pathology;
    try {
      g.primary = v.value("primary", std::vector<std::string>{});
      g.secondary = v.value("secondary", std::vector<std::string>{});
    } catch (const json::exception& e) {
      fail(ErrorKind::BadManifest, path.string() + ": " + e.what());
    }
    require(!g.primary.empty(), ErrorKind::EmptyGroundTruth, "pathology '" + pathology + "' has no primary findings");
    out[pathology] = std::move(g);
  }
  return out;
}

inline json to_json(const LatencySummary& l) {
  return {{"n", l.n}, {"mean_s", l.mean}, {"p50_s", l.p50}, {"p95_s", l.p95}};
}

inline json to_json(const EvalReport& r) {
  json recall = json::array();
  for (const auto& row : r.recall)
    recall.push_back({{"model", row.model},
                      {"pathology", row.pathology},
                      {"finding", row.finding},
                      {"n_findings", row.n_findings},
                      {"k", row.k},
                      {"n", row.n},
                      {"mean_recall", row.mean_recall}});
  json cov = json::array();
  for (const auto& row : r.coverage)
    cov.push_back({{"model", row.model},
                   {"pathology", row.pathology},
                   {"n", row.n},
                   {"flipped", row.flipped},
                   {"coverage", row.coverage}});
  json j = {{"recall", recall}, {"coverage", cov}, {"per_instance", r.per_instance}};
  if (r.latency) j["latency"] = to_json(*r.latency);
  return j;
}

// --- synthetic worlds ---

inline json to_json(const SynthConfig& c) {
  return {{"dim_clf", c.dim_clf},         {"dim_vlm", c.dim_vlm},
          {"n_concepts", c.n_concepts},   {"n_instances", c.n_instances},
          {"margin", c.margin},           {"seed", c.seed},
          {"n_classes", c.n_classes},     {"positive_fraction", c.positive_fraction},
          {"concept_noise", c.concept_noise}, {"head_scale", c.head_scale}};
}

inline SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  c.dim_clf = j.at("dim_clf");
  c.dim_vlm = j.at("dim_vlm");
  c.n_concepts = j.at("n_concepts");
  c.n_instances = j.at("n_instances");
  c.margin = j.at("margin");
  c.seed = j.at("seed");
  c.n_classes = j.at("n_classes");
  c.positive_fraction = j.at("positive_fraction");
  c.concept_noise = j.at("concept_noise");
  c.head_scale = j.at("head_scale");
  return c;
}

inline void save_world(const SynthWorld& w, const fs::path& dir, json extra = json::object()) {
  fs::create_directories(dir);
  std::vector<std::string> labels;
  for (std::size_t l : w.labels) labels.push_back(w.head.class_names()[l]);
  json feat_extra = {{"labels", labels}};
  save_matrix(w.instances, Manifest{ManifestKind::features, std::nullopt, w.dim_clf(), feat_extra},
              dir / "features.ebf");
  save_matrix(w.vlm_embeddings(), Manifest{ManifestKind::vlm_embeddings, std::nullopt, w.dim_vlm(), {}},
              dir / "vlm.ebf");
  save_bank(w.bank, dir / "bank.ebf");
  save_head(w.head, dir / "head.ebf");
  save_matrix(w.map, Manifest{ManifestKind::linear_map, std::nullopt, w.dim_clf(), {}}, dir / "map.ebf");
  save_projector_pair(w.exact_projectors(), dir / "projector", {{"source", "exact linear map of synthetic world"}});
  json planted = json::object();
  for (const auto& [cls, idx] : w.planted) planted[w.head.class_names()[cls]] = w.bank.names()[idx];
  extra["config"] = to_json(w.config);
  extra["planted"] = planted;
  Manifest man{ManifestKind::synth_world, std::nullopt, w.dim_vlm(), std::move(extra)};
  write_json_file(dir / "world.manifest.json", to_json(man));
}

inline SynthWorld load_world(const fs::path& dir) {
  const Manifest man = manifest_from_json(read_json_file(dir / "world.manifest.json"));
  require(man.kind == ManifestKind::synth_world, ErrorKind::BadManifest, dir.string() + " is not a synthetic world");
  try {
    auto [features, fman] = load_matrix(dir / "features.ebf");
    ConceptBank bank = load_bank(dir / "bank.ebf");
    ClassifierHead head = load_head(dir / "head.ebf");
    std::vector<std::size_t> labels;
    for (const auto& name : fman.extra.at("labels").get<std::vector<std::string>>())
      labels.push_back(head.class_index(name));
    std::map<std::size_t, std::size_t> planted;
    for (const auto& [cls, concept_name] : man.extra.at("planted").items()) {
      const auto idx = bank.index_of(concept_name.get<std::string>());
      require(idx.has_value(), ErrorKind::BadManifest, "planted concept '" + concept_name.get<std::string>() + "' missing");
      planted[head.class_index(cls)] = *idx;
    }
    return SynthWorld{synth_config_from_json(man.extra.at("config")), read_ebf(dir / "map.ebf"), std::move(bank),
                      std::move(head), std::move(features), std::move(labels), std::move(planted)};
  } catch (const json::exception& e) {
    fail(ErrorKind::BadManifest, dir.string() + ": " + e.what());
  }
}

}  // namespace ccf

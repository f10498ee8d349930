#include "carn/checkpoint.hpp"

#include <fstream>
#include <set>

namespace carn {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(what, "must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(key, std::string("unknown key in ") + what);
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"heads", c.heads},
          {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"final_layers", c.final_layers},
          {"naming_hidden", c.naming_hidden},
          {"d_f", c.d_f},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j, const ModelConfig& defaults) {
  reject_unknown(j,
                 {"d_model", "d_ff", "heads", "encoder_layers", "decoder_layers", "final_layers",
                  "naming_hidden", "d_f", "seed"},
                 "model config");
  ModelConfig c = defaults;
  read_if(j, "d_model", c.d_model);
  read_if(j, "d_ff", c.d_ff);
  read_if(j, "heads", c.heads);
  read_if(j, "encoder_layers", c.encoder_layers);
  read_if(j, "decoder_layers", c.decoder_layers);
  read_if(j, "final_layers", c.final_layers);
  read_if(j, "naming_hidden", c.naming_hidden);
  read_if(j, "d_f", c.d_f);
  read_if(j, "seed", c.seed);
  return c;
}

json to_json(const ModalityConfig& m) {
  return {{"use_sub", m.use_sub},
          {"use_objs", m.use_objs},
          {"use_rels", m.use_rels},
          {"objs_names", m.objs_names},
          {"rels_names", m.rels_names}};
}

ModalityConfig modality_from_json(const json& j) {
  if (j.is_string()) return parse_modality(j.get<std::string>());
  reject_unknown(j, {"use_sub", "use_objs", "use_rels", "objs_names", "rels_names"}, "modality");
  ModalityConfig m;
  read_if(j, "use_sub", m.use_sub);
  read_if(j, "use_objs", m.use_objs);
  read_if(j, "use_rels", m.use_rels);
  read_if(j, "objs_names", m.objs_names);
  read_if(j, "rels_names", m.rels_names);
  m.validate();
  return m;
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"lambda", c.lambda},
          {"epsilon", c.epsilon},
          {"seed", c.seed},
          {"modality", to_json(c.modality)},
          {"use_ts", c.use_ts},
          {"min_count", c.min_count},
          {"max_ratio", c.max_ratio},
          {"model", to_json(c.model)},
          {"human_words", c.human_words},
          {"threads", c.threads},
          {"shards", c.shards}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& defaults) {
  reject_unknown(j,
                 {"batch_size", "learning_rate", "weight_decay", "epochs", "lambda", "epsilon", "seed", "modality",
                  "use_ts", "min_count", "max_ratio", "model", "human_words", "threads", "shards"},
                 "train config");
  TrainConfig c = defaults;
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "learning_rate", c.learning_rate);
  read_if(j, "weight_decay", c.weight_decay);
  read_if(j, "epochs", c.epochs);
  read_if(j, "lambda", c.lambda);
  read_if(j, "epsilon", c.epsilon);
  read_if(j, "seed", c.seed);
  if (j.contains("modality")) c.modality = modality_from_json(j.at("modality"));
  read_if(j, "use_ts", c.use_ts);
  read_if(j, "min_count", c.min_count);
  read_if(j, "max_ratio", c.max_ratio);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  read_if(j, "human_words", c.human_words);
  read_if(j, "threads", c.threads);
  read_if(j, "shards", c.shards);
  return c;
}

json to_json(const GenConfig& c) {
  return {{"k_principals", c.k_principals},
          {"n_extras", c.n_extras},
          {"n_clips", c.n_clips},
          {"frames_per_clip", c.frames_per_clip},
          {"d_f", c.d_f},
          {"noise_sigma", c.noise_sigma},
          {"cooccur_rho", c.cooccur_rho},
          {"fps", c.fps},
          {"qas_per_clip", c.qas_per_clip},
          {"in_clip_distractors", c.in_clip_distractors},
          {"principal_names", c.principal_names},
          {"extra_names", c.extra_names},
          {"object_vocab", c.object_vocab},
          {"attribute_vocab", c.attribute_vocab},
          {"predicate_vocab", c.predicate_vocab},
          {"spatial_predicates", c.spatial_predicates},
          {"human_words", c.human_words},
          {"topic_vocab", c.topic_vocab},
          {"speech_verbs", c.speech_verbs},
          {"visual_template", c.visual_template},
          {"textual_template", c.textual_template},
          {"seed", c.seed}};
}

GenConfig gen_config_from_json(const json& j, const GenConfig& defaults) {
  reject_unknown(j,
                 {"k_principals", "n_extras", "n_clips", "frames_per_clip", "d_f", "noise_sigma",
                  "cooccur_rho", "fps", "qas_per_clip", "in_clip_distractors", "principal_names",
                  "extra_names", "object_vocab", "attribute_vocab", "predicate_vocab",
                  "spatial_predicates", "human_words", "topic_vocab", "speech_verbs",
                  "visual_template", "textual_template", "seed"},
                 "generator config");
  GenConfig c = defaults;
  read_if(j, "k_principals", c.k_principals);
  read_if(j, "n_extras", c.n_extras);
  read_if(j, "n_clips", c.n_clips);
  read_if(j, "frames_per_clip", c.frames_per_clip);
  read_if(j, "d_f", c.d_f);
  read_if(j, "noise_sigma", c.noise_sigma);
  read_if(j, "cooccur_rho", c.cooccur_rho);
  read_if(j, "fps", c.fps);
  read_if(j, "qas_per_clip", c.qas_per_clip);
  read_if(j, "in_clip_distractors", c.in_clip_distractors);
  read_if(j, "principal_names", c.principal_names);
  read_if(j, "extra_names", c.extra_names);
  read_if(j, "object_vocab", c.object_vocab);
  read_if(j, "attribute_vocab", c.attribute_vocab);
  read_if(j, "predicate_vocab", c.predicate_vocab);
  read_if(j, "spatial_predicates", c.spatial_predicates);
  read_if(j, "human_words", c.human_words);
  read_if(j, "topic_vocab", c.topic_vocab);
  read_if(j, "speech_verbs", c.speech_verbs);
  read_if(j, "visual_template", c.visual_template);
  read_if(j, "textual_template", c.textual_template);
  read_if(j, "seed", c.seed);
  c.validate();
  return c;
}

json to_json(const CastList& cast) {
  return {{"names", cast.names},
          {"counts", cast.counts},
          {"k", cast.k()},
          {"unk_index", cast.unk_index}};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& params = ckpt.model.params();
  json tensors = json::object();
  for (int i = 0; i < params.size(); ++i) {
    const auto& m = params.value(i);
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    }
    tensors[params.name(i)] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
  }
  json doc = {{"schema_version", kCheckpointSchema},
              {"model_config", to_json(ckpt.model.config())},
              {"train_config", to_json(ckpt.train)},
              {"cast", to_json(ckpt.model.cast())},
              {"vocab", {{"words", ckpt.model.vocab().words()}, {"names", ckpt.model.vocab().names()}}},
              {"params", std::move(tensors)}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
  }
  const std::string version = doc.value("schema_version", "");
  if (version != kCheckpointSchema) {
    throw VersionError("unsupported checkpoint schema_version '" + version + "'");
  }
  try {
    const ModelConfig mc = model_config_from_json(doc.at("model_config"));
    const TrainConfig tc = train_config_from_json(doc.at("train_config"));
    CastList cast;
    cast.names = doc.at("cast").at("names").get<std::vector<std::string>>();
    cast.counts = doc.at("cast").at("counts").get<std::vector<long>>();
    cast.unk_index = doc.at("cast").at("unk_index").get<int>();
    if (cast.unk_index != cast.k()) throw std::runtime_error("cast unk_index mismatch");
    Vocab vocab(doc.at("vocab").at("words").get<std::vector<std::string>>(),
                doc.at("vocab").at("names").get<std::vector<std::string>>());
    Checkpoint ckpt{Model(mc, std::move(cast), std::move(vocab)), tc};
    auto& params = ckpt.model.params();
    const json& tensors = doc.at("params");
    if (static_cast<int>(tensors.size()) != params.size()) {
      throw std::runtime_error("parameter count mismatch");
    }
    for (int i = 0; i < params.size(); ++i) {
      const json& t = tensors.at(params.name(i));
      auto& m = params.value(i);
      if (t.at("rows").get<Eigen::Index>() != m.rows() ||
          t.at("cols").get<Eigen::Index>() != m.cols()) {
        throw std::runtime_error("shape mismatch for parameter '" + params.name(i) + "'");
      }
      const auto data = t.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != m.size()) {
        throw std::runtime_error("data length mismatch for parameter '" + params.name(i) + "'");
      }
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = data[k++];
      }
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint '" + path.string() + "' is malformed: " + e.what());
  }
}

}  // namespace carn

#include "carn/model.hpp"

#include <cmath>
#include <random>

#include "carn/layers.hpp"

namespace carn {

void ModelConfig::validate() const {
  if (d_model < 1) throw ConfigError("d_model", "must be positive");
  if (heads < 1) throw ConfigError("heads", "must be positive");
  if (d_model % heads != 0) throw ConfigError("heads", "must divide d_model");
  if (d_ff < 1) throw ConfigError("d_ff", "must be positive");
  if (encoder_layers < 1) throw ConfigError("encoder_layers", "must be positive");
  if (decoder_layers < 1) throw ConfigError("decoder_layers", "must be positive");
  if (final_layers < 0) throw ConfigError("final_layers", "must be non-negative");
  if (naming_hidden < 1) throw ConfigError("naming_hidden", "must be positive");
  if (d_f < 1) throw ConfigError("d_f", "must be positive");
}

Model::Model(ModelConfig config, CastList cast, Vocab vocab)
    : config_(config), cast_(std::move(cast)), vocab_(std::move(vocab)) {
  config_.validate();
  if (cast_.k() < 1) throw EmptyCastError("model needs a non-empty cast list");
  init_params();
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Eigen::MatrixXd xavier(Eigen::Index rows, Eigen::Index cols) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-limit, limit);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = u(rng_);
    }
    return m;
  }

  Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng_);
    }
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

void add_norm(ParamSet<double>& p, const std::string& prefix, int d) {
  p.add(prefix + ".g", Eigen::MatrixXd::Ones(1, d));
  p.add(prefix + ".b", Eigen::MatrixXd::Zero(1, d));
}

void add_ffn(ParamSet<double>& p, Initializer& init, const std::string& prefix, int d_in,
             int d_hidden, int d_out) {
  p.add(prefix + ".w1", init.xavier(d_in, d_hidden));
  p.add(prefix + ".b1", Eigen::MatrixXd::Zero(1, d_hidden));
  p.add(prefix + ".w2", init.xavier(d_hidden, d_out));
  p.add(prefix + ".b2", Eigen::MatrixXd::Zero(1, d_out));
}

void add_block(ParamSet<double>& p, Initializer& init, const std::string& prefix,
               const ModelConfig& c, bool cross) {
  add_norm(p, prefix + ".ln1", c.d_model);
  if (cross) add_norm(p, prefix + ".lnc", c.d_model);
  p.add(prefix + ".att.wq", init.xavier(c.d_model, c.d_model));
  p.add(prefix + ".att.wk", init.xavier(c.d_model, c.d_model));
  add_norm(p, prefix + ".ln2", c.d_model);
  add_ffn(p, init, prefix + ".ff", c.d_model, c.d_ff, c.d_model);
}

void add_stack(ParamSet<double>& p, Initializer& init, const std::string& prefix,
               const ModelConfig& c, int layers, bool cross) {
  for (int l = 0; l < layers; ++l) add_block(p, init, prefix + ".l" + std::to_string(l), c, cross);
  add_norm(p, prefix + ".ln_f", c.d_model);
}

}  // namespace

void Model::init_params() {
  Initializer init(config_.seed);
  const auto& c = config_;
  params_ = ParamSet<double>{};
  params_.add("emb.word", init.gaussian(static_cast<Eigen::Index>(vocab_.words().size()),
                                        c.d_model, 1.0));
  params_.add("emb.name", init.gaussian(static_cast<Eigen::Index>(vocab_.names().size()),
                                        c.d_model, 1.0));
  params_.add("emb.char", init.gaussian(kCharRows, c.d_model, 1.0));
  add_ffn(params_, init, "naming", c.d_f, c.naming_hidden, cast_.classes());
  add_stack(params_, init, "enc", c, c.encoder_layers, false);
  add_stack(params_, init, "dec_v", c, c.decoder_layers, true);
  add_stack(params_, init, "dec_s", c, c.decoder_layers, true);
  add_stack(params_, init, "fin", c, c.final_layers, false);
  add_ffn(params_, init, "out", c.d_model, c.d_ff, 1);
}

NamingParams<double> Model::naming_params() const {
  return {params_.value(params_.index("naming.w1")), params_.value(params_.index("naming.b1")),
          params_.value(params_.index("naming.w2")), params_.value(params_.index("naming.b2"))};
}

QAInput prepare_input(const Clip& view, const QAItem& qa, const FaceNames& names,
                      const ModalityConfig& modality, const Vocab& vocab,
                      const std::set<std::string>& human_words) {
  if (qa.answers.size() != kCandidates) throw ShapeError("a QA item needs exactly 5 answers");
  QAInput in;
  const TokenStream question = vocab.flag_text(qa.question);
  for (int c = 0; c < kCandidates; ++c) {
    in.candidates[c] = question;
    in.candidates[c].append(vocab.flag_text(qa.answers[c]));
  }
  if (modality.use_sub) {
    for (const auto& line : view.subtitles) {
      in.subtitles.push(line.speaker, vocab.is_name(line.speaker));
      in.subtitles.append(vocab.flag_text(line.tokens));
    }
  }
  if (modality.uses_visual()) {
    SemanticStream s = build_semantic_stream(view, names, modality, human_words);
    in.visual = std::move(s.objects);
    in.visual.append(s.relations);
  }
  return in;
}

Mask pad_mask(const TokenStream& stream) {
  Mask m(stream.size(), 1);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (stream.tokens[i] == kPadToken) m[i] = 0;
  }
  return m;
}

Var<double> embed(Tape<double>& tape, const TokenStream& stream, const Vocab& vocab) {
  const auto& params = tape.params();
  const std::size_t n = stream.size();
  std::vector<std::vector<int>> words(n), names(n), chars(n);
  bool any_word = false, any_name = false, any_char = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& tok = stream.tokens[i];
    if (tok == kPadToken) continue;
    if (stream.name_flags[i]) {
      const int r = vocab.name_index(tok);
      if (r >= 0) {
        names[i].push_back(r);
        any_name = true;
        continue;
      }
    }
    const int w = vocab.word_index(tok);
    if (w >= 0) {
      words[i].push_back(w);
      any_word = true;
      continue;
    }
    for (unsigned char ch : tok) chars[i].push_back(static_cast<int>(ch));
    any_char = any_char || !tok.empty();
  }
  std::vector<Var<double>> parts;
  if (any_word) parts.push_back(gather_mean(tape, params.index("emb.word"), std::move(words)));
  if (any_name) parts.push_back(gather_mean(tape, params.index("emb.name"), std::move(names)));
  if (any_char) parts.push_back(gather_mean(tape, params.index("emb.char"), std::move(chars)));
  if (parts.empty()) {
    const Eigen::Index d = params.value(params.index("emb.char")).cols();
    return tape.constant(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), d));
  }
  Var<double> out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = out + parts[i];
  return out;
}

namespace {

struct Encoded {
  Var<double> hidden;
  Mask mask;
};

Encoded encode_stream(Tape<double>& tape, const Model& model, const TokenStream& stream) {
  Encoded out;
  out.mask = pad_mask(stream);
  if (!any_valid(out.mask, static_cast<Eigen::Index>(stream.size()))) return out;
  const auto& c = model.config();
  auto x = embed(tape, stream, model.vocab());
  x = x + tape.constant(positional_encoding<double>(x.rows(), x.cols()));
  out.hidden = encode(x, "enc", c.encoder_layers, c.heads, out.mask);
  return out;
}

}  // namespace

Var<double> forward_logits(Tape<double>& tape, const Model& model, const QAInput& input,
                           int* skipped_contexts) {
  const auto& c = model.config();
  const Encoded visual = encode_stream(tape, model, input.visual);
  const Encoded subs = encode_stream(tape, model, input.subtitles);
  int skipped = 0;
  std::vector<Var<double>> pooled;
  for (const auto& cand : input.candidates) {
    const Encoded qa = encode_stream(tape, model, cand);
    if (!qa.hidden.valid()) throw EmptyInputError("question/answer sequence is empty");
    bool skip = false;
    auto z = co_attend(qa.hidden, visual.hidden, "dec_v", c.decoder_layers, c.heads, visual.mask,
                       &skip);
    skipped += skip;
    z = co_attend(z, subs.hidden, "dec_s", c.decoder_layers, c.heads, subs.mask, &skip);
    skipped += skip;
    pooled.push_back(mean_rows(z, qa.mask));
  }
  auto m = concat_rows<double>(pooled);
  for (int l = 0; l < c.final_layers; ++l) {
    m = transformer_block(m, Var<double>{}, "fin.l" + std::to_string(l), c.heads, Mask{});
  }
  m = norm(m, "fin.ln_f");
  if (skipped_contexts) *skipped_contexts = skipped;
  return transpose(feed_forward(m, "out"));
}

AnswerScores forward(const Model& model, const QAInput& input) {
  Tape<double> tape(model.params(), nullptr);
  auto logits = forward_logits(tape, model, input);
  AnswerScores out;
  out.probs = softmax_rows_value<double>(logits.value()).row(0);
  out.choice = 0;
  for (int i = 1; i < kCandidates; ++i) {
    if (out.probs(i) > out.probs(out.choice)) out.choice = i;
  }
  return out;
}

NameDistributionSeq<double> predict_names(const Model& model, const Clip& clip) {
  return predict_name_distributions<double>(clip, model.naming_params());
}

double multi_task_loss(const Eigen::Ref<const Eigen::RowVectorXd>& probs, int gold, double rkl,
                       double lambda, bool* clamped) {
  if (gold < 0 || gold >= probs.size()) throw std::out_of_range("gold index out of range");
  constexpr double floor = 1e-12;
  const double p = probs(gold);
  if (clamped) *clamped = p < floor;
  return -std::log(std::max(p, floor)) + lambda * rkl;
}

}  // namespace carn

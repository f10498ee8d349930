#ifndef CARN_MODEL_HPP
#define CARN_MODEL_HPP

// Character-aware reasoning network: dual word/name embeddings, shared
// Transformer encoder, sequential co-attention decoders (visual, then
// subtitles), and a self-attention decoder scoring the five candidates.

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "carn/autodiff.hpp"
#include "carn/castlist.hpp"
#include "carn/corpus.hpp"
#include "carn/modality.hpp"
#include "carn/naming.hpp"
#include "carn/semantics.hpp"

namespace carn {

inline constexpr const char* kPadToken = "<pad>";
inline constexpr int kCandidates = 5;
inline constexpr int kCharRows = 256;

struct ModelConfig {
  int d_model = 64;
  int d_ff = 128;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int final_layers = 1;
  int naming_hidden = 64;
  int d_f = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Separate word and name tables; out-of-vocabulary words fall back to the
/// mean of their byte vectors.
class Vocab {
 public:
  Vocab() = default;
  Vocab(std::vector<std::string> words, std::vector<std::string> names);

  /// Words from every text and visual field; names are the cast followed by
  /// every other subtitle speaker.
  static Vocab build(const std::vector<Clip>& clips, const CastList& cast);

  int word_index(const std::string& token) const;  // -1 when absent
  int name_index(const std::string& token) const;  // -1 when absent
  bool is_name(const std::string& token) const { return name_index(token) >= 0; }

  const std::vector<std::string>& words() const { return words_; }
  const std::vector<std::string>& names() const { return names_; }

  /// Name flags for free text: a token is a name iff it is in the name table.
  TokenStream flag_text(const Tokens& tokens) const;

 private:
  std::vector<std::string> words_;
  std::vector<std::string> names_;
  std::map<std::string, int> word_lookup_;
  std::map<std::string, int> name_lookup_;
};

/// Token streams for one QA item: [question ; answer_c] per candidate, the
/// subtitle stream (speaker name then words per line) and the visual stream
/// (objects then relations).
struct QAInput {
  std::array<TokenStream, kCandidates> candidates;
  TokenStream subtitles;
  TokenStream visual;
};

struct AnswerScores {
  Eigen::Matrix<double, 1, kCandidates> probs;
  int choice = 0;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, CastList cast, Vocab vocab);

  const ModelConfig& config() const { return config_; }
  const CastList& cast() const { return cast_; }
  const Vocab& vocab() const { return vocab_; }
  ParamSet<double>& params() { return params_; }
  const ParamSet<double>& params() const { return params_; }

  NamingParams<double> naming_params() const;

 private:
  void init_params();

  ModelConfig config_;
  CastList cast_;
  Vocab vocab_;
  ParamSet<double> params_;
};

QAInput prepare_input(const Clip& view, const QAItem& qa, const FaceNames& names,
                      const ModalityConfig& modality, const Vocab& vocab,
                      const std::set<std::string>& human_words);

/// Embedding rows for a token stream; pad tokens embed to zero.
Var<double> embed(Tape<double>& tape, const TokenStream& stream, const Vocab& vocab);

/// Key mask with pad positions cleared.
Mask pad_mask(const TokenStream& stream);

/// Answer logits, 1 x 5.
Var<double> forward_logits(Tape<double>& tape, const Model& model, const QAInput& input,
                           int* skipped_contexts = nullptr);

AnswerScores forward(const Model& model, const QAInput& input);

/// Name distributions for all faces of a clip under the current parameters.
NameDistributionSeq<double> predict_names(const Model& model, const Clip& clip);

/// -log p[gold] + lambda * rkl. p[gold] is floored at 1e-12; `*clamped`
/// reports whether the floor was hit.
double multi_task_loss(const Eigen::Ref<const Eigen::RowVectorXd>& probs, int gold, double rkl,
                       double lambda, bool* clamped = nullptr);

}  // namespace carn

#endif  // CARN_MODEL_HPP
